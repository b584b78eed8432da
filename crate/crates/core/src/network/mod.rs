//! The x-vector network: five frame-level TDNN layers, statistics pooling and
//! two segment-level dense layers. Every block is affine → ReLU → BN. The
//! projection onto speaker classes is owned by [`crate::losses`].

pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng, STD_EPS};

pub use layers::{
    Affine, BatchNorm, Block, BlockGrads, Frames, Mode, StatsPool, TdnnLayer, BN_MOMENTUM,
};
use layers::{offsets_span, validate_offsets, BlockCache, BnStats, PoolCache, TdnnCache};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayerSpec {
    pub offsets: Vec<i32>,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub frame_layers: Vec<FrameLayerSpec>,
    /// Widths of the segment-level layers; the first one is the embedding layer.
    pub segment_widths: Vec<usize>,
    pub batchnorm: bool,
    pub bn_momentum: f64,
    pub pool_eps: f64,
}

/// Context offsets of frame1..frame5.
pub const XVECTOR_OFFSETS: [&[i32]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

impl NetConfig {
    pub fn with_widths(input_dim: usize, frame_widths: [usize; 5], segment_widths: [usize; 2]) -> Self {
        NetConfig {
            input_dim,
            frame_layers: XVECTOR_OFFSETS
                .iter()
                .zip(frame_widths)
                .map(|(o, w)| FrameLayerSpec {
                    offsets: o.to_vec(),
                    width: w,
                })
                .collect(),
            segment_widths: segment_widths.to_vec(),
            batchnorm: true,
            bn_momentum: BN_MOMENTUM,
            pool_eps: STD_EPS,
        }
    }

    /// Full-size widths: 512 ×4, 1500, pooled 3000, 512, 512.
    pub fn full_scale(input_dim: usize) -> Self {
        Self::with_widths(input_dim, [512, 512, 512, 512, 1500], [512, 512])
    }

    /// Small widths for single-core experiments: 64 ×4, 128, pooled 256, 64, 64.
    pub fn desk_scale(input_dim: usize) -> Self {
        Self::with_widths(input_dim, [64, 64, 64, 64, 128], [64, 64])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.frame_layers.is_empty() {
            return Err(Error::config("at least one frame-level layer is required"));
        }
        for (i, l) in self.frame_layers.iter().enumerate() {
            validate_offsets(&l.offsets)?;
            if l.width == 0 {
                return Err(Error::config(format!("frame layer {} has zero width", i + 1)));
            }
        }
        if self.segment_widths.contains(&0) {
            return Err(Error::config("segment layer widths must be positive"));
        }
        if !(self.pool_eps >= 0.0) {
            return Err(Error::config("pool_eps must be non-negative"));
        }
        Ok(())
    }

    /// Cumulative context after each frame layer.
    pub fn total_context(&self) -> Vec<usize> {
        self.frame_layers
            .iter()
            .scan(1, |acc, l| {
                *acc += offsets_span(&l.offsets);
                Some(*acc)
            })
            .collect()
    }

    /// Minimum number of input frames that yields one pooled frame.
    pub fn receptive_field(&self) -> usize {
        self.total_context().last().copied().unwrap_or(1)
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.frame_layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.segment_widths.first().copied()
    }

    pub fn output_dim(&self) -> usize {
        self.segment_widths
            .last()
            .copied()
            .unwrap_or_else(|| self.pooled_dim())
    }

    /// `(in, out)` of every affine map, frame layers first.
    pub fn affine_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut d = self.input_dim;
        for l in &self.frame_layers {
            shapes.push((d * l.offsets.len(), l.width));
            d = l.width;
        }
        let mut d = self.pooled_dim();
        for &w in &self.segment_widths {
            shapes.push((d, w));
            d = w;
        }
        shapes
    }

    /// Trainable parameters of the network body (weights, biases, BN scale/shift).
    pub fn parameter_count(&self) -> usize {
        self.affine_shapes()
            .iter()
            .map(|&(i, o)| i * o + o + if self.batchnorm { 2 * o } else { 0 })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct XVectorNet {
    config: NetConfig,
    frame_layers: Vec<TdnnLayer>,
    pool: StatsPool,
    segment_layers: Vec<Block>,
    version: u64,
}

impl PartialEq for XVectorNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.frame_layers == other.frame_layers
            && self.pool == other.pool
            && self.segment_layers == other.segment_layers
    }
}

/// Everything a backward pass needs, tagged with the parameter version and
/// mode it was produced under.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    version: u64,
    frame: Vec<TdnnCache>,
    pool: PoolCache,
    segment: Vec<BlockCache>,
    pooled: Matrix,
}

impl ForwardCache {
    /// Pre-activation output of the first segment layer.
    pub fn embedding(&self) -> Option<&Matrix> {
        self.segment.first().map(|c| &c.pre)
    }

    pub fn pooled(&self) -> &Matrix {
        &self.pooled
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Affine outputs of every block, frame layers first.
    pub fn pre_activations(&self) -> Vec<&Matrix> {
        self.frame
            .iter()
            .map(|c| &c.block.pre)
            .chain(self.segment.iter().map(|c| &c.pre))
            .collect()
    }
}

/// Gradients aligned with [`XVectorNet::parameters`], plus per-sequence input
/// gradients.
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub params: Vec<Matrix>,
    pub input: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    /// Weight decay applies (affine weights only).
    pub decay: bool,
}

impl XVectorNet {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let shapes = config.affine_shapes();
        let n_frame = config.frame_layers.len();
        let bn = |w: usize| config.batchnorm.then(|| BatchNorm::new(w, config.bn_momentum));
        let mut frame_layers = Vec::with_capacity(n_frame);
        for (spec, &(i, o)) in config.frame_layers.iter().zip(&shapes) {
            frame_layers.push(TdnnLayer::new(
                spec.offsets.clone(),
                Block {
                    affine: Affine::he_init(i, o, rng),
                    relu: true,
                    bn: bn(o),
                },
            )?);
        }
        let segment_layers = shapes[n_frame..]
            .iter()
            .map(|&(i, o)| Block {
                affine: Affine::he_init(i, o, rng),
                relu: true,
                bn: bn(o),
            })
            .collect();
        Ok(XVectorNet {
            pool: StatsPool {
                eps: config.pool_eps,
            },
            config,
            frame_layers,
            segment_layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn frame_layers(&self) -> &[TdnnLayer] {
        &self.frame_layers
    }

    pub fn segment_layers(&self) -> &[Block] {
        &self.segment_layers
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.frame_layers
            .iter()
            .map(|l| &l.block)
            .chain(&self.segment_layers)
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let n_frame = self.frame_layers.len();
        for (i, b) in self.blocks().enumerate() {
            let name = if i < n_frame {
                format!("frame{}", i + 1)
            } else {
                format!("segment{}", i + 1)
            };
            out.push(ParamInfo {
                name: format!("{name}.weight"),
                decay: true,
            });
            out.push(ParamInfo {
                name: format!("{name}.bias"),
                decay: false,
            });
            if b.bn.is_some() {
                out.push(ParamInfo {
                    name: format!("{name}.bn.gamma"),
                    decay: false,
                });
                out.push(ParamInfo {
                    name: format!("{name}.bn.beta"),
                    decay: false,
                });
            }
        }
        out
    }

    /// Trainable tensors in a fixed order: per block weight, bias, [gamma, beta].
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push(&b.affine.weight);
            out.push(&b.affine.bias);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    /// Mutable view of [`Self::parameters`]. Invalidates outstanding caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        let mut out = Vec::new();
        let blocks = self
            .frame_layers
            .iter_mut()
            .map(|l| &mut l.block)
            .chain(self.segment_layers.iter_mut());
        for b in blocks {
            out.push(&mut b.affine.weight);
            out.push(&mut b.affine.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Every tensor that defines the network, parameters and BN running
    /// statistics alike, under stable names. Used by checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        let n_frame = self.frame_layers.len();
        for (i, b) in self.blocks().enumerate() {
            let name = if i < n_frame {
                format!("frame{}", i + 1)
            } else {
                format!("segment{}", i + 1)
            };
            out.push((format!("{name}.weight"), b.affine.weight.clone()));
            out.push((format!("{name}.bias"), b.affine.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{name}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("{name}.bn.beta"), bn.beta.clone()));
                out.push((format!("{name}.bn.running_mean"), Matrix::row_vector(&bn.running_mean)));
                out.push((format!("{name}.bn.running_var"), Matrix::row_vector(&bn.running_var)));
            }
        }
        out
    }

    /// Overwrites the network state from tensors in [`Self::state_tensors`]
    /// order. Names and shapes must match exactly.
    pub fn load_state_tensors(&mut self, tensors: Vec<(String, Matrix)>) -> Result<()> {
        let expected = self.state_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::dim(format!(
                "network has {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, em), (gn, gm)) in expected.iter().zip(&tensors) {
            if en != gn {
                return Err(Error::config(format!("expected tensor {en}, found {gn}")));
            }
            if em.shape() != gm.shape() {
                return Err(Error::dim(format!(
                    "{en}: expected {}x{}, got {}x{}",
                    em.rows(),
                    em.cols(),
                    gm.rows(),
                    gm.cols()
                )));
            }
        }
        self.version += 1;
        let mut it = tensors.into_iter().map(|(_, m)| m);
        let blocks = self
            .frame_layers
            .iter_mut()
            .map(|l| &mut l.block)
            .chain(self.segment_layers.iter_mut());
        for b in blocks {
            b.affine.weight = it.next().unwrap();
            b.affine.bias = it.next().unwrap();
            if let Some(bn) = &mut b.bn {
                bn.gamma = it.next().unwrap();
                bn.beta = it.next().unwrap();
                bn.running_mean = it.next().unwrap().into_vec();
                bn.running_var = it.next().unwrap().into_vec();
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|m| m.rows() * m.cols()).sum()
    }

    fn check_input(&self, batch: &[Matrix]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let min = self.config.receptive_field();
        for seq in batch {
            if seq.cols() != self.config.input_dim {
                return Err(Error::dim(format!(
                    "network expects {}-dim frames, got {}",
                    self.config.input_dim,
                    seq.cols()
                )));
            }
            if seq.rows() < min {
                return Err(Error::InputTooShort {
                    got: seq.rows(),
                    min,
                });
            }
        }
        Ok(())
    }

    fn run(&self, batch: &[Matrix], mode: Mode) -> Result<(Matrix, ForwardCache, Vec<Option<BnStats>>)> {
        self.check_input(batch)?;
        let mut stats = Vec::new();
        let mut x = Frames::from_sequences(batch)?;
        let mut frame = Vec::with_capacity(self.frame_layers.len());
        for layer in &self.frame_layers {
            let (y, c, s) = layer.forward(&x, mode)?;
            frame.push(c);
            stats.push(s);
            x = y;
        }
        let (pooled, pool) = self.pool.forward(&x)?;
        let mut h = pooled.clone();
        let mut segment = Vec::with_capacity(self.segment_layers.len());
        for block in &self.segment_layers {
            let (y, c, s) = block.forward(&h, mode)?;
            segment.push(c);
            stats.push(s);
            h = y;
        }
        h.ensure_finite("network output")?;
        Ok((
            h,
            ForwardCache {
                mode,
                version: self.version,
                frame,
                pool,
                segment,
                pooled,
            },
            stats,
        ))
    }

    /// Runs a batch of `T × input_dim` sequences and returns the output of the
    /// last segment layer (`batch × output_dim`). In training mode BN uses
    /// batch statistics and the running estimates are updated.
    pub fn forward(&mut self, batch: &[Matrix], mode: Mode) -> Result<(Matrix, ForwardCache)> {
        let (out, cache, stats) = self.run(batch, mode)?;
        if mode == Mode::Train {
            let blocks = self
                .frame_layers
                .iter_mut()
                .map(|l| &mut l.block)
                .chain(self.segment_layers.iter_mut());
            for (b, s) in blocks.zip(&stats) {
                b.apply_stats(s);
            }
        }
        Ok((out, cache))
    }

    /// Evaluation-mode forward; never touches the network.
    pub fn forward_eval(&self, batch: &[Matrix]) -> Result<(Matrix, ForwardCache)> {
        let (out, cache, _) = self.run(batch, Mode::Eval)?;
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<NetGrads> {
        if cache.mode != Mode::Train {
            return Err(Error::Usage(
                "backward needs a cache from a training-mode forward".into(),
            ));
        }
        if cache.version != self.version {
            return Err(Error::Usage(
                "stale cache: parameters changed since the forward pass".into(),
            ));
        }
        let expected = (cache.pool.batch_size(), self.config.output_dim());
        if grad_output.shape() != expected {
            return Err(Error::dim(format!(
                "grad_output is {}x{}, expected {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                expected.0,
                expected.1
            )));
        }
        let mut seg_grads = Vec::with_capacity(self.segment_layers.len());
        let mut g = grad_output.clone();
        for (block, c) in self.segment_layers.iter().zip(&cache.segment).rev() {
            let (bg, dx) = block.backward(c, &g)?;
            seg_grads.push(bg);
            g = dx;
        }
        seg_grads.reverse();
        let mut gf = self.pool.backward(&cache.pool, &g);
        let mut frame_grads = Vec::with_capacity(self.frame_layers.len());
        for (layer, c) in self.frame_layers.iter().zip(&cache.frame).rev() {
            let (bg, dx) = layer.backward(c, &gf.data)?;
            frame_grads.push(bg);
            gf = dx;
        }
        frame_grads.reverse();
        let mut params = Vec::new();
        for bg in frame_grads.into_iter().chain(seg_grads) {
            params.push(bg.weight);
            params.push(bg.bias);
            if let Some((dg, db)) = bg.bn {
                params.push(dg);
                params.push(db);
            }
        }
        Ok(NetGrads {
            params,
            input: gf.sequences(),
        })
    }

    /// Embedding of one utterance: the first segment layer's affine output,
    /// taken before ReLU and BN, computed in evaluation mode.
    pub fn extract_embedding(&self, frames: &Matrix) -> Result<Vec<f64>> {
        if self.segment_layers.is_empty() {
            return Err(Error::config("network has no segment layer to tap"));
        }
        let (_, cache) = self.forward_eval(std::slice::from_ref(frames))?;
        Ok(cache.segment[0].pre.row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_context_per_layer() {
        let cfg = NetConfig::full_scale(30);
        assert_eq!(cfg.total_context(), vec![5, 9, 15, 15, 15]);
        assert_eq!(cfg.receptive_field(), 15);
    }

    #[test]
    fn desk_shapes() {
        let mut rng = Rng::new(1);
        let mut net = XVectorNet::new(NetConfig::desk_scale(30), &mut rng).unwrap();
        assert_eq!(net.config().pooled_dim(), 256);
        let frames = Matrix::random_normal(200, 30, 1.0, &mut rng);
        let (out, cache) = net.forward(std::slice::from_ref(&frames), Mode::Eval).unwrap();
        assert_eq!(out.shape(), (1, 64));
        assert_eq!(cache.pooled().shape(), (1, 256));
        assert_eq!(net.extract_embedding(&frames).unwrap().len(), 64);
        assert_eq!(net.parameter_count(), net.config().parameter_count());
    }

    #[test]
    fn short_input_names_receptive_field() {
        let mut rng = Rng::new(1);
        let net = XVectorNet::new(NetConfig::desk_scale(4), &mut rng).unwrap();
        let err = net.extract_embedding(&Matrix::zeros(14, 4)).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { got: 14, min: 15 }));
        assert!(err.to_string().contains("15"));
    }

    #[test]
    fn eval_cache_cannot_be_backpropagated() {
        let mut rng = Rng::new(2);
        let mut net = XVectorNet::new(NetConfig::desk_scale(3), &mut rng).unwrap();
        let x = Matrix::random_normal(20, 3, 1.0, &mut rng);
        let (out, cache) = net.forward(&[x.clone(), x.clone()], Mode::Eval).unwrap();
        assert!(matches!(net.backward(&cache, &out), Err(Error::Usage(_))));

        let (out, cache) = net.forward(&[x.clone(), x], Mode::Train).unwrap();
        net.parameters_mut();
        assert!(matches!(net.backward(&cache, &out), Err(Error::Usage(_))));
    }
}
