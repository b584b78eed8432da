//! Embedding back-end: centering, LDA, length normalization and a
//! two-covariance PLDA model scored by log-likelihood ratio.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::binio::{write_matrix, Tracked};
use crate::dataio::FeatureArchive;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, NORM_EPS};

pub const BACKEND_MAGIC: &[u8; 4] = b"XVBK";
pub const BACKEND_VERSION: u32 = 1;
pub const DEFAULT_LDA_DIM: usize = 128;
pub const DEFAULT_PLDA_ITERS: usize = 10;
/// Ridge added to the within-class scatter, relative to its mean eigenvalue.
pub const LDA_RIDGE: f64 = 1e-6;

/// Labelled or unlabelled embeddings, one row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Option<Vec<String>>,
    pub vectors: Matrix,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, labels: Option<Vec<String>>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::dim(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::dim(format!("{} labels for {} ids", l.len(), ids.len())));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Domain(format!("duplicate embedding id {id}")));
            }
        }
        Ok(EmbeddingSet {
            ids,
            labels,
            vectors,
        })
    }

    /// Reads an embedding archive: one single-frame utterance per embedding.
    pub fn from_archive(archive: &FeatureArchive) -> Result<Self> {
        let mut ids = Vec::with_capacity(archive.len());
        let mut labels = Vec::with_capacity(archive.len());
        let mut data = Vec::with_capacity(archive.len() * archive.dim());
        for u in archive.utterances() {
            if u.frames.rows() != 1 {
                return Err(Error::Domain(format!(
                    "{} has {} frames; embedding archives hold exactly one",
                    u.utt_id,
                    u.frames.rows()
                )));
            }
            ids.push(u.utt_id.clone());
            labels.push(u.speaker_id.clone());
            data.extend_from_slice(u.frames.row(0));
        }
        let vectors = Matrix::new(ids.len(), archive.dim(), data)?;
        EmbeddingSet::new(ids, Some(labels), vectors)
    }

    /// Embedding archive form. Unlabelled sets use each id as its own label.
    pub fn to_archive(&self) -> Result<FeatureArchive> {
        let mut a = FeatureArchive::new(self.dim());
        for (i, id) in self.ids.iter().enumerate() {
            let spk = self.labels.as_ref().map_or(id, |l| &l[i]);
            a.push(id, spk, &Matrix::row_vector(self.vectors.row(i)))?;
        }
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Dense class index per row and the class count, in first-seen order.
    pub fn class_indices(&self) -> Result<(Vec<usize>, usize)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Domain("embedding set has no speaker labels".into()))?;
        let mut map: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(labels.len());
        for l in labels {
            let next = map.len();
            out.push(*map.entry(l.as_str()).or_insert(next));
        }
        Ok((out, map.len()))
    }

    /// Same ids and labels with new vectors.
    pub fn with_vectors(&self, vectors: Matrix) -> Result<Self> {
        EmbeddingSet::new(self.ids.clone(), self.labels.clone(), vectors)
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Matrix::new(m.nrows(), m.ncols(), data).expect("finite nalgebra result")
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Per-class sums and counts, plus global mean.
struct ClassStats {
    mean: DVector<f64>,
    counts: Vec<usize>,
    sums: Vec<DVector<f64>>,
}

fn class_stats(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> ClassStats {
    let d = x.ncols();
    let mut sums = vec![DVector::zeros(d); classes];
    let mut counts = vec![0usize; classes];
    let mut total = DVector::zeros(d);
    for (r, &k) in labels.iter().enumerate() {
        let row = x.row(r).transpose();
        sums[k] += &row;
        total += &row;
        counts[k] += 1;
    }
    ClassStats {
        mean: total / x.nrows() as f64,
        counts,
        sums,
    }
}

/// Centering vector, projection and the generalized eigenvalues of the kept
/// directions (descending).
#[derive(Clone, Debug, PartialEq)]
pub struct Lda {
    pub center: Vec<f64>,
    /// `d × p`
    pub projection: Matrix,
    pub eigenvalues: Vec<f64>,
}

/// Fisher LDA: directions solving `Sb v = λ Sw v`, normalized so that the
/// projected within-class covariance is the identity.
pub fn fit_lda(embs: &EmbeddingSet, p: usize) -> Result<Lda> {
    let (labels, classes) = embs.class_indices()?;
    if classes < 2 {
        return Err(Error::config(format!("LDA needs at least 2 classes, got {classes}")));
    }
    let d = embs.dim();
    let max = d.min(classes - 1);
    if p == 0 || p > max {
        return Err(Error::config(format!(
            "LDA dimension {p} is not achievable: must lie in 1..={max} for {d}-dim data with {classes} classes"
        )));
    }
    let x = to_na(&embs.vectors);
    let n = x.nrows() as f64;
    let st = class_stats(&x, &labels, classes);

    let mut sb = DMatrix::zeros(d, d);
    for (sum, &c) in st.sums.iter().zip(&st.counts) {
        let diff = sum / c as f64 - &st.mean;
        sb += (&diff * diff.transpose()) * (c as f64 / n);
    }
    let mut sw = DMatrix::zeros(d, d);
    for (r, &k) in labels.iter().enumerate() {
        let diff = x.row(r).transpose() - &st.sums[k] / st.counts[k] as f64;
        sw += &diff * diff.transpose();
    }
    sw /= n;
    let ridge = LDA_RIDGE * sw.trace() / d as f64;
    let ridge = if ridge > 0.0 { ridge } else { LDA_RIDGE };
    for i in 0..d {
        sw[(i, i)] += ridge;
    }

    let chol = cholesky(&sw, "within-class scatter")?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("within-class scatter factor is singular".into()))?;
    let mut m = &l_inv * &sb * l_inv.transpose();
    symmetrize(&mut m);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vecs = l_inv.transpose() * &eig.eigenvectors;

    let mut proj = DMatrix::zeros(d, p);
    let mut eigenvalues = Vec::with_capacity(p);
    for (j, &k) in order.iter().take(p).enumerate() {
        let mut v = vecs.column(k).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        proj.set_column(j, &v);
        eigenvalues.push(eig.eigenvalues[k]);
    }
    Ok(Lda {
        center: st.mean.iter().copied().collect(),
        projection: from_na(&proj),
        eigenvalues,
    })
}

/// `v / ‖v‖`. A vector with norm below the guard comes back as zeros with the
/// flag set.
pub fn length_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let n = crate::numeric::norm(v);
    if n < NORM_EPS {
        (vec![0.0; v.len()], true)
    } else {
        (v.iter().map(|x| x / n).collect(), false)
    }
}

/// Two-covariance model `x = mu + u + e`, `u ~ N(0, B)`, `e ~ N(0, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda {
    pub mu: Vec<f64>,
    pub between: Matrix,
    pub within: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PldaFit {
    pub model: Plda,
    /// Mean per-sample log-likelihood before the first and after every
    /// iteration.
    pub log_likelihood: Vec<f64>,
}

struct EStep {
    b_sum: DMatrix<f64>,
    w_sum: DMatrix<f64>,
    loglik: f64,
}

fn e_step(
    z: &DMatrix<f64>,
    labels: &[usize],
    st: &ClassStats,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<EStep> {
    let d = z.ncols();
    let n_total = z.nrows();
    let w_chol = cholesky(w, "within-speaker covariance")?;
    let w_logdet = log_det(&w_chol);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    // quantities depend only on the class size
    let mut by_size: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>, f64)> = BTreeMap::new();
    for &n in &st.counts {
        if n == 0 || by_size.contains_key(&n) {
            continue;
        }
        let a = w + b * n as f64;
        let a_chol = cholesky(&a, "W + nB")?;
        // gain = B A^-1, posterior covariance = B A^-1 W
        let gain = a_chol.solve(b).transpose();
        let mut cov = &gain * w;
        symmetrize(&mut cov);
        by_size.insert(n, (gain, cov, log_det(&a_chol)));
    }

    let mut means = Vec::with_capacity(st.sums.len());
    let mut b_sum = DMatrix::zeros(d, d);
    let mut loglik = 0.0;
    for (sum, &n) in st.sums.iter().zip(&st.counts) {
        if n == 0 {
            means.push(DVector::zeros(d));
            continue;
        }
        let (gain, cov, a_logdet) = &by_size[&n];
        let m = gain * sum;
        b_sum += &m * m.transpose() + cov;
        let w_inv_s = w_chol.solve(sum);
        loglik += -0.5 * (n * d) as f64 * ln2pi - 0.5 * n as f64 * w_logdet
            - 0.5 * (a_logdet - w_logdet)
            + 0.5 * w_inv_s.dot(&m);
        means.push(m);
    }
    let mut w_sum = DMatrix::zeros(d, d);
    for (r, &k) in labels.iter().enumerate() {
        let zr = z.row(r).transpose();
        loglik -= 0.5 * zr.dot(&w_chol.solve(&zr));
        let e = &zr - &means[k];
        w_sum += &e * e.transpose();
    }
    for (&n, (_, cov, _)) in &by_size {
        let classes = st.counts.iter().filter(|&&c| c == n).count();
        w_sum += cov * (n * classes) as f64;
    }
    Ok(EStep {
        b_sum,
        w_sum,
        loglik: loglik / n_total as f64,
    })
}

fn regularize_if_singular(m: &mut DMatrix<f64>, what: &str) {
    if Cholesky::new(m.clone()).is_none() {
        let d = m.nrows();
        let ridge = 1e-6 * (m.trace() / d as f64).abs().max(1e-12);
        warn!("{what} is singular; adding {ridge:.3e} to the diagonal");
        for i in 0..d {
            m[(i, i)] += ridge;
        }
    }
}

/// EM for the two-covariance model with `mu` fixed at the global mean.
/// Initialized from the between-class covariance of class means and the
/// within-class scatter.
pub fn fit_plda(embs: &EmbeddingSet, iters: usize) -> Result<PldaFit> {
    let (labels, classes) = embs.class_indices()?;
    if classes < 2 {
        return Err(Error::config(format!("PLDA needs at least 2 classes, got {classes}")));
    }
    let x = to_na(&embs.vectors);
    let d = x.ncols();
    let st0 = class_stats(&x, &labels, classes);
    let mut z = x.clone();
    for mut r in z.row_iter_mut() {
        r -= st0.mean.transpose();
    }
    let st = class_stats(&z, &labels, classes);

    let mut b = DMatrix::zeros(d, d);
    let mut w = DMatrix::zeros(d, d);
    for (sum, &c) in st.sums.iter().zip(&st.counts) {
        let m = sum / c as f64;
        b += &m * m.transpose();
    }
    b /= classes as f64;
    for (r, &k) in labels.iter().enumerate() {
        let e = z.row(r).transpose() - &st.sums[k] / st.counts[k] as f64;
        w += &e * e.transpose();
    }
    w /= z.nrows() as f64;
    regularize_if_singular(&mut w, "within-class scatter");
    regularize_if_singular(&mut b, "between-class covariance");

    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let e = e_step(&z, &labels, &st, &b, &w)?;
        history.push(e.loglik);
        b = e.b_sum / classes as f64;
        w = e.w_sum / z.nrows() as f64;
        symmetrize(&mut b);
        symmetrize(&mut w);
        regularize_if_singular(&mut w, "within-speaker covariance");
    }
    history.push(e_step(&z, &labels, &st, &b, &w)?.loglik);
    Ok(PldaFit {
        model: Plda {
            mu: st0.mean.iter().copied().collect(),
            between: from_na(&b),
            within: from_na(&w),
        },
        log_likelihood: history,
    })
}

fn centered_stats(model: &Plda, embs: &EmbeddingSet) -> Result<(DMatrix<f64>, Vec<usize>, ClassStats)> {
    let (labels, classes) = embs.class_indices()?;
    if embs.dim() != model.mu.len() {
        return Err(Error::dim(format!(
            "PLDA model is {}-dim, embeddings are {}-dim",
            model.mu.len(),
            embs.dim()
        )));
    }
    let mut z = to_na(&embs.vectors);
    let mu = DVector::from_column_slice(&model.mu);
    for mut r in z.row_iter_mut() {
        r -= mu.transpose();
    }
    let st = class_stats(&z, &labels, classes);
    Ok((z, labels, st))
}

/// Mean per-sample log-likelihood of labelled data under `model`.
pub fn plda_log_likelihood(model: &Plda, embs: &EmbeddingSet) -> Result<f64> {
    let (z, labels, st) = centered_stats(model, embs)?;
    Ok(e_step(&z, &labels, &st, &to_na(&model.between), &to_na(&model.within))?.loglik)
}

/// One EM update of `between` and `within`; `mu` is kept.
pub fn plda_em_step(model: &Plda, embs: &EmbeddingSet) -> Result<Plda> {
    let (z, labels, st) = centered_stats(model, embs)?;
    let e = e_step(&z, &labels, &st, &to_na(&model.between), &to_na(&model.within))?;
    let mut b = e.b_sum / st.counts.len() as f64;
    let mut w = e.w_sum / z.nrows() as f64;
    symmetrize(&mut b);
    symmetrize(&mut w);
    Ok(Plda {
        mu: model.mu.clone(),
        between: from_na(&b),
        within: from_na(&w),
    })
}

/// Precomputed closed-form LLR:
/// `score = ½ eᵀQe + ½ tᵀQt + eᵀPt + c` on mean-removed vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaScorer {
    mu: Vec<f64>,
    q: Matrix,
    p: Matrix,
    constant: f64,
}

impl PldaScorer {
    pub fn new(model: &Plda) -> Result<Self> {
        let b = to_na(&model.between);
        let w = to_na(&model.within);
        let d = b.nrows();
        if model.mu.len() != d || w.shape() != (d, d) || b.shape() != (d, d) {
            return Err(Error::dim("inconsistent PLDA parameter shapes"));
        }
        let total = &b + &w;
        let t_chol = cholesky(&total, "total covariance")?;
        let t_inv = t_chol.inverse();
        let mut schur = &total - &b * &t_inv * &b;
        symmetrize(&mut schur);
        let s_chol = cholesky(&schur, "conditional covariance")?;
        let s_inv = s_chol.inverse();
        let mut q = &t_inv - &s_inv;
        symmetrize(&mut q);
        let mut p = &t_inv * &b * &s_inv;
        symmetrize(&mut p);
        let constant = -0.5 * (log_det(&s_chol) - log_det(&t_chol));
        Ok(PldaScorer {
            mu: model.mu.clone(),
            q: from_na(&q),
            p: from_na(&p),
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let d = self.dim();
        if enroll.len() != d || test.len() != d {
            return Err(Error::dim(format!(
                "PLDA expects {d}-dim vectors, got {} and {}",
                enroll.len(),
                test.len()
            )));
        }
        let e: Vec<f64> = enroll.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        let t: Vec<f64> = test.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        let mut s = self.constant;
        for i in 0..d {
            let (qi, pi) = (self.q.row(i), self.p.row(i));
            let mut qe = 0.0;
            let mut qt = 0.0;
            let mut pt = 0.0;
            for j in 0..d {
                qe += qi[j] * e[j];
                qt += qi[j] * t[j];
                pt += pi[j] * t[j];
            }
            s += 0.5 * e[i] * qe + 0.5 * t[i] * qt + e[i] * pt;
        }
        Ok(s)
    }
}

/// Log-likelihood ratio of same versus different speaker.
pub fn plda_score(model: &Plda, enroll: &[f64], test: &[f64]) -> Result<f64> {
    PldaScorer::new(model)?.score(enroll, test)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackendConfig {
    /// `None` picks `min(128, d, classes - 1)`.
    pub lda_dim: Option<usize>,
    pub plda_iters: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            lda_dim: None,
            plda_iters: DEFAULT_PLDA_ITERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendModel {
    pub center: Vec<f64>,
    /// `d × p`
    pub lda: Matrix,
    pub plda: Plda,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendFit {
    pub model: BackendModel,
    pub lda_eigenvalues: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    pub zero_norm: usize,
}

/// Center, project and length-normalize every row, in that order. Returns the
/// processed set and how many rows collapsed to zero before normalization.
pub fn apply_backend(model: &BackendModel, embs: &EmbeddingSet) -> Result<(EmbeddingSet, usize)> {
    let d = model.center.len();
    if embs.dim() != d {
        return Err(Error::dim(format!(
            "backend expects {d}-dim embeddings, got {}",
            embs.dim()
        )));
    }
    let p = model.lda.cols();
    let mut out = Vec::with_capacity(embs.len() * p);
    let mut zero = 0;
    for r in 0..embs.len() {
        let (v, z) = process_one(model, embs.vectors.row(r))?;
        zero += z as usize;
        out.extend(v);
    }
    let vectors = Matrix::new(embs.len(), p, out)?;
    Ok((embs.with_vectors(vectors)?, zero))
}

/// The per-vector pipeline of [`apply_backend`].
pub fn process_one(model: &BackendModel, v: &[f64]) -> Result<(Vec<f64>, bool)> {
    if v.len() != model.center.len() {
        return Err(Error::dim(format!(
            "backend expects {}-dim embeddings, got {}",
            model.center.len(),
            v.len()
        )));
    }
    let centered: Vec<f64> = v.iter().zip(&model.center).map(|(a, c)| a - c).collect();
    let (d, p) = model.lda.shape();
    let mut y = vec![0.0; p];
    for i in 0..d {
        let row = model.lda.row(i);
        for j in 0..p {
            y[j] += centered[i] * row[j];
        }
    }
    Ok(length_normalize(&y))
}

pub fn fit_backend(embs: &EmbeddingSet, cfg: &BackendConfig) -> Result<BackendFit> {
    let (_, classes) = embs.class_indices()?;
    if classes < 2 {
        return Err(Error::config(format!("back-end needs at least 2 speakers, got {classes}")));
    }
    let p = cfg
        .lda_dim
        .unwrap_or_else(|| DEFAULT_LDA_DIM.min(embs.dim()).min(classes - 1));
    let lda = fit_lda(embs, p)?;
    let partial = BackendModel {
        center: lda.center.clone(),
        lda: lda.projection.clone(),
        plda: Plda {
            mu: vec![0.0; p],
            between: Matrix::identity(p),
            within: Matrix::identity(p),
        },
    };
    let (processed, zero_norm) = apply_backend(&partial, embs)?;
    if zero_norm > 0 {
        warn!("{zero_norm} embeddings have zero norm after LDA");
    }
    let fit = fit_plda(&processed, cfg.plda_iters)?;
    Ok(BackendFit {
        model: BackendModel {
            plda: fit.model,
            ..partial
        },
        lda_eigenvalues: lda.eigenvalues,
        log_likelihood: fit.log_likelihood,
        zero_norm,
    })
}

pub fn write_backend(path: impl AsRef<Path>, model: &BackendModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_backend(&mut w, model)?;
    w.flush()?;
    Ok(())
}

/// Magic `XVBK`, version u32, then five matrices (rows u32, cols u32,
/// row-major f64): center, LDA, PLDA mu, between and within covariances.
pub fn encode_backend<W: Write>(w: &mut W, model: &BackendModel) -> Result<()> {
    w.write_all(BACKEND_MAGIC)?;
    w.write_u32::<LittleEndian>(BACKEND_VERSION)?;
    write_matrix(w, &Matrix::row_vector(&model.center))?;
    write_matrix(w, &model.lda)?;
    write_matrix(w, &Matrix::row_vector(&model.plda.mu))?;
    write_matrix(w, &model.plda.between)?;
    write_matrix(w, &model.plda.within)?;
    Ok(())
}

pub fn read_backend(path: impl AsRef<Path>) -> Result<BackendModel> {
    decode_backend(BufReader::new(File::open(path)?))
}

pub fn decode_backend<R: Read>(reader: R) -> Result<BackendModel> {
    let mut r = Tracked::new(reader);
    r.magic(BACKEND_MAGIC)?;
    let version = r.u32("version")?;
    if version != BACKEND_VERSION {
        return Err(r.fail(format!("unsupported back-end version {version}")));
    }
    let center = r.matrix("center")?;
    let lda = r.matrix("lda")?;
    let mu = r.matrix("plda mu")?;
    let between = r.matrix("plda between")?;
    let within = r.matrix("plda within")?;
    r.expect_end()?;
    let (d, p) = lda.shape();
    if center.shape() != (1, d)
        || mu.shape() != (1, p)
        || between.shape() != (p, p)
        || within.shape() != (p, p)
    {
        return Err(r.fail("back-end matrix shapes are inconsistent"));
    }
    Ok(BackendModel {
        center: center.into_vec(),
        lda,
        plda: Plda {
            mu: mu.into_vec(),
            between,
            within,
        },
    })
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() {
        return Err(Error::dim("eigenvalues need a square matrix"));
    }
    let mut a = to_na(m);
    symmetrize(&mut a);
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_norm_examples() {
        let (v, z) = length_normalize(&[3.0, 4.0]);
        assert_eq!(v, vec![0.6, 0.8]);
        assert!(!z);
        let (w, _) = length_normalize(&v);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        let (z, flag) = length_normalize(&[0.0, 0.0, 0.0]);
        assert_eq!(z, vec![0.0; 3]);
        assert!(flag);
    }

    #[test]
    fn two_axis_aligned_classes() {
        let offsets = [[0.2, 0.0], [-0.2, 0.0], [0.0, 0.5], [0.0, -0.5]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, x0) in [("a", -5.0), ("b", 5.0)] {
            for o in offsets {
                rows.push(vec![x0 + o[0], 1.0 + o[1]]);
                labels.push(c.to_string());
            }
        }
        let ids = (0..8).map(|i| format!("u{i}")).collect();
        let set = EmbeddingSet::new(ids, Some(labels), Matrix::from_rows(&rows).unwrap()).unwrap();
        let lda = fit_lda(&set, 1).unwrap();
        let v = lda.projection.col(0);
        let cos = v[0].abs() / crate::numeric::norm(&v);
        assert!(cos > 0.999, "{cos}");
        let err = fit_lda(&set, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("1..=1"));
    }
}
