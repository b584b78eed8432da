//! Building blocks of the x-vector network, each with an explicit forward and
//! backward pass.
//!
//! Frame-level data for a batch of sequences is carried as one stacked matrix
//! plus the per-sequence lengths ([`Frames`]).

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Variable-length sequences stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub data: Matrix,
    pub lens: Vec<usize>,
}

impl Frames {
    pub fn from_sequences(seqs: &[Matrix]) -> Result<Frames> {
        let data = Matrix::vstack(seqs)?;
        Ok(Frames {
            data,
            lens: seqs.iter().map(Matrix::rows).collect(),
        })
    }

    /// Row offset of every sequence.
    pub fn starts(&self) -> Vec<usize> {
        self.lens
            .iter()
            .scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect()
    }

    pub fn sequences(&self) -> Vec<Matrix> {
        self.starts()
            .iter()
            .zip(&self.lens)
            .map(|(&s, &l)| self.data.slice_rows(s, s + l))
            .collect()
    }
}

/// `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Affine {
    /// Zero-mean normal weights with variance `2 / fan_in`, zero bias.
    pub fn he_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Affine {
        let std = (2.0 / fan_in as f64).sqrt();
        Affine {
            weight: Matrix::random_normal(fan_in, fan_out, std, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight)?;
        z.add_row_broadcast(self.bias.as_slice())?;
        Ok(z)
    }

    /// Returns `(dW, db, dx)`.
    pub fn backward(&self, x: &Matrix, dz: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let dw = x.t_matmul(dz)?;
        let db = Matrix::row_vector(&dz.sum_rows());
        let dx = dz.matmul_t(&self.weight)?;
        Ok((dw, db, dx))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    /// `1 × n`
    pub gamma: Matrix,
    /// `1 × n`
    pub beta: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Batch statistics produced by a training-mode pass, applied to the running
/// estimates afterwards.
#[derive(Clone, Debug)]
pub struct BnStats {
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(n: usize, momentum: f64) -> BatchNorm {
        BatchNorm {
            gamma: Matrix::filled(1, n, 1.0),
            beta: Matrix::zeros(1, n),
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
            momentum,
            eps: BN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    /// Normalizes over all rows in training mode, with the running statistics
    /// in evaluation mode.
    pub fn forward(&self, a: &Matrix, mode: Mode) -> Result<(Matrix, BnCache, Option<BnStats>)> {
        let n = a.rows();
        let w = a.cols();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let (mean, std) = a.reduce_rows_mean_std(0.0)?;
                let var: Vec<f64> = std.iter().map(|s| s * s).collect();
                let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let stats = BnStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * correction).collect(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, w);
        let mut y = Matrix::zeros(n, w);
        let g = self.gamma.as_slice();
        let b = self.beta.as_slice();
        for r in 0..n {
            let src = a.row(r);
            for c in 0..w {
                let h = (src[c] - mean[c]) * inv_std[c];
                xhat[(r, c)] = h;
                y[(r, c)] = g[c] * h + b[c];
            }
        }
        Ok((y, BnCache { xhat, inv_std }, stats))
    }

    /// Training-mode backward. Returns `(dgamma, dbeta, da)`.
    pub fn backward(&self, cache: &BnCache, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
        let n = dy.rows();
        let w = dy.cols();
        let nf = n as f64;
        let g = self.gamma.as_slice();
        let mut dgamma = vec![0.0; w];
        let mut dbeta = vec![0.0; w];
        // sums of dxhat and dxhat*xhat per column
        let mut s1 = vec![0.0; w];
        let mut s2 = vec![0.0; w];
        for r in 0..n {
            let dyr = dy.row(r);
            let xr = cache.xhat.row(r);
            for c in 0..w {
                dgamma[c] += dyr[c] * xr[c];
                dbeta[c] += dyr[c];
                let dxh = dyr[c] * g[c];
                s1[c] += dxh;
                s2[c] += dxh * xr[c];
            }
        }
        let mut da = Matrix::zeros(n, w);
        for r in 0..n {
            let dyr = dy.row(r);
            let xr = cache.xhat.row(r);
            let out = da.row_mut(r);
            for c in 0..w {
                let dxh = dyr[c] * g[c];
                out[c] = cache.inv_std[c] / nf * (nf * dxh - s1[c] - xr[c] * s2[c]);
            }
        }
        (
            Matrix::row_vector(&dgamma),
            Matrix::row_vector(&dbeta),
            da,
        )
    }

    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

/// Shared tail of TDNN and dense blocks: affine → ReLU → BN.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub affine: Affine,
    pub relu: bool,
    pub bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub input: Matrix,
    /// Affine output before ReLU and BN.
    pub pre: Matrix,
    bn: Option<BnCache>,
}

/// Gradients of one block, in parameter order: weight, bias, [gamma, beta].
#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub bn: Option<(Matrix, Matrix)>,
}

impl Block {
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, BlockCache, Option<BnStats>)> {
        let pre = self.affine.forward(x)?;
        let act = if self.relu { pre.map(|v| v.max(0.0)) } else { pre.clone() };
        let (out, bn_cache, stats) = match &self.bn {
            Some(bn) => {
                let (y, c, s) = bn.forward(&act, mode)?;
                (y, Some(c), s)
            }
            None => (act, None, None),
        };
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                pre,
                bn: bn_cache,
            },
            stats,
        ))
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Matrix) -> Result<(BlockGrads, Matrix)> {
        let (bn_grads, mut dpre) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => {
                let (dg, db, da) = bn.backward(c, dy);
                (Some((dg, db)), da)
            }
            (None, None) => (None, dy.clone()),
            _ => return Err(Error::Usage("batchnorm cache does not match layer".into())),
        };
        if self.relu {
            for (d, &p) in dpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let (dw, db, dx) = self.affine.backward(&cache.input, &dpre)?;
        Ok((
            BlockGrads {
                weight: dw,
                bias: db,
                bn: bn_grads,
            },
            dx,
        ))
    }

    pub fn apply_stats(&mut self, stats: &Option<BnStats>) {
        if let (Some(bn), Some(s)) = (&mut self.bn, stats) {
            bn.update_running(s);
        }
    }
}

/// Time-delay layer: splices the input at the given frame offsets and feeds
/// the concatenation through a [`Block`]. Frames lacking full context are
/// dropped, so each sequence shrinks by the offset span.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnnLayer {
    pub offsets: Vec<i32>,
    pub block: Block,
}

#[derive(Clone, Debug)]
pub struct TdnnCache {
    pub block: BlockCache,
    in_lens: Vec<usize>,
    in_dim: usize,
}

impl TdnnLayer {
    pub fn new(offsets: Vec<i32>, block: Block) -> Result<TdnnLayer> {
        validate_offsets(&offsets)?;
        if !block.affine.in_dim().is_multiple_of(offsets.len()) {
            return Err(Error::dim(format!(
                "TDNN weight has {} rows, not a multiple of {} offsets",
                block.affine.in_dim(),
                offsets.len()
            )));
        }
        Ok(TdnnLayer { offsets, block })
    }

    /// Number of frames lost per sequence.
    pub fn span(&self) -> usize {
        offsets_span(&self.offsets)
    }

    pub fn input_dim(&self) -> usize {
        self.block.affine.in_dim() / self.offsets.len()
    }

    fn splice(&self, x: &Frames) -> Result<(Matrix, Vec<usize>)> {
        let d = x.data.cols();
        if d != self.input_dim() {
            return Err(Error::dim(format!(
                "TDNN layer expects {}-dim input, got {d}",
                self.input_dim()
            )));
        }
        let span = self.span();
        let lo = self.offsets[0];
        let k = self.offsets.len();
        let mut out_lens = Vec::with_capacity(x.lens.len());
        for &l in &x.lens {
            if l <= span {
                return Err(Error::InputTooShort {
                    got: l,
                    min: span + 1,
                });
            }
            out_lens.push(l - span);
        }
        let total: usize = out_lens.iter().sum();
        let mut g = Matrix::zeros(total, d * k);
        let mut row = 0;
        for (start, &ol) in x.starts().iter().zip(&out_lens) {
            for t in 0..ol {
                let dst = g.row_mut(row);
                for (j, &off) in self.offsets.iter().enumerate() {
                    let src = start + (t as i64 - lo as i64 + off as i64) as usize;
                    dst[j * d..(j + 1) * d].copy_from_slice(x.data.row(src));
                }
                row += 1;
            }
        }
        Ok((g, out_lens))
    }

    pub fn forward(&self, x: &Frames, mode: Mode) -> Result<(Frames, TdnnCache, Option<BnStats>)> {
        let (g, out_lens) = self.splice(x)?;
        let (y, block, stats) = self.block.forward(&g, mode)?;
        Ok((
            Frames {
                data: y,
                lens: out_lens,
            },
            TdnnCache {
                block,
                in_lens: x.lens.clone(),
                in_dim: x.data.cols(),
            },
            stats,
        ))
    }

    pub fn backward(&self, cache: &TdnnCache, dy: &Matrix) -> Result<(BlockGrads, Frames)> {
        let (grads, dg) = self.block.backward(&cache.block, dy)?;
        let d = cache.in_dim;
        let span = self.span();
        let lo = self.offsets[0];
        let in_frames = Frames {
            data: Matrix::zeros(cache.in_lens.iter().sum(), d),
            lens: cache.in_lens.clone(),
        };
        let starts = in_frames.starts();
        let mut dx = in_frames.data;
        let mut row = 0;
        for (&start, &l) in starts.iter().zip(&cache.in_lens) {
            for t in 0..l - span {
                let src = dg.row(row);
                for (j, &off) in self.offsets.iter().enumerate() {
                    let tgt = start + (t as i64 - lo as i64 + off as i64) as usize;
                    for (o, v) in dx.row_mut(tgt).iter_mut().zip(&src[j * d..(j + 1) * d]) {
                        *o += v;
                    }
                }
                row += 1;
            }
        }
        Ok((
            grads,
            Frames {
                data: dx,
                lens: cache.in_lens.clone(),
            },
        ))
    }
}

pub(crate) fn validate_offsets(offsets: &[i32]) -> Result<()> {
    if offsets.is_empty() {
        return Err(Error::config("TDNN layer needs at least one context offset"));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "context offsets must be strictly increasing, got {offsets:?}"
        )));
    }
    Ok(())
}

pub(crate) fn offsets_span(offsets: &[i32]) -> usize {
    (offsets[offsets.len() - 1] - offsets[0]) as usize
}

/// Per-sequence mean and standard deviation, concatenated `[mean | std]`.
/// Uses the population variance over the whole sequence; `std = sqrt(var + eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsPool {
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input: Frames,
    mean: Matrix,
    std: Matrix,
}

impl PoolCache {
    pub fn batch_size(&self) -> usize {
        self.mean.rows()
    }
}

impl StatsPool {
    pub fn forward(&self, x: &Frames) -> Result<(Matrix, PoolCache)> {
        let h = x.data.cols();
        let b = x.lens.len();
        let mut out = Matrix::zeros(b, 2 * h);
        let mut mean = Matrix::zeros(b, h);
        let mut std = Matrix::zeros(b, h);
        for (i, seq) in x.sequences().iter().enumerate() {
            let (m, s) = seq.reduce_rows_mean_std(self.eps)?;
            out.row_mut(i)[..h].copy_from_slice(&m);
            out.row_mut(i)[h..].copy_from_slice(&s);
            mean.row_mut(i).copy_from_slice(&m);
            std.row_mut(i).copy_from_slice(&s);
        }
        Ok((
            out,
            PoolCache {
                input: x.clone(),
                mean,
                std,
            },
        ))
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Matrix) -> Frames {
        let h = cache.mean.cols();
        let mut dx = Matrix::zeros(cache.input.data.rows(), h);
        for (i, (&start, &len)) in cache.input.starts().iter().zip(&cache.input.lens).enumerate() {
            let t = len as f64;
            let dm = &dy.row(i)[..h];
            let ds = &dy.row(i)[h..];
            let mu = cache.mean.row(i);
            let sd = cache.std.row(i);
            for r in start..start + len {
                let x = cache.input.data.row(r);
                let out = dx.row_mut(r);
                for c in 0..h {
                    out[c] = dm[c] / t + ds[c] * (x[c] - mu[c]) / (t * sd[c]);
                }
            }
        }
        Frames {
            data: dx,
            lens: cache.input.lens.clone(),
        }
    }
}
