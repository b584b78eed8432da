//! Projection layer and the four classification losses: softmax, A-Softmax
//! (multiplicative angular margin), AM-Softmax (additive cosine margin) and
//! AAM-Softmax (additive angular margin). All gradients are analytic.
//!
//! The margin losses share one "cosine head": weight columns are normalized on
//! every call, the cosine between each input and each column is clamped to
//! `[-1 + 1e-7, 1 - 1e-7]`, and only the target-class logit is modified.
//! Non-target classes always contribute `scale · cos θ` to the partition sum.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, norm, Matrix, Rng, NORM_EPS};

/// Cosines are kept this far inside `[-1, 1]`.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;
/// Raw cosines beyond `1 + COS_TOLERANCE` indicate broken geometry.
pub const COS_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_SCALE: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    ASoftmax,
    AmSoftmax,
    AamSoftmax,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Softmax,
        LossKind::ASoftmax,
        LossKind::AmSoftmax,
        LossKind::AamSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::ASoftmax => "a_softmax",
            LossKind::AmSoftmax => "am_softmax",
            LossKind::AamSoftmax => "aam_softmax",
        }
    }

    pub fn default_margin(self) -> f64 {
        match self {
            LossKind::Softmax => 0.0,
            LossKind::ASoftmax => 2.0,
            LossKind::AmSoftmax => 0.2,
            LossKind::AamSoftmax => 0.3,
        }
    }

    pub fn has_bias(self) -> bool {
        self == LossKind::Softmax
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "softmax" => Ok(LossKind::Softmax),
            "a_softmax" | "asoftmax" | "sphereface" => Ok(LossKind::ASoftmax),
            "am_softmax" | "am" | "amsoftmax" | "cosface" => Ok(LossKind::AmSoftmax),
            "aam_softmax" | "aam" | "aamsoftmax" | "arcface" => Ok(LossKind::AamSoftmax),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub m: f64,
    pub s: f64,
}

impl LossConfig {
    /// Kind with its default margin and `s = 32`.
    pub fn new(kind: LossKind) -> Self {
        LossConfig {
            kind,
            m: kind.default_margin(),
            s: DEFAULT_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let LossConfig { kind, m, s } = *self;
        if !m.is_finite() || !s.is_finite() {
            return Err(Error::config(format!("{kind}: m and s must be finite")));
        }
        match kind {
            LossKind::Softmax => Ok(()),
            LossKind::ASoftmax => {
                if m < 1.0 || m.fract() != 0.0 {
                    Err(Error::config(format!(
                        "a_softmax margin m must be an integer >= 1, got {m}"
                    )))
                } else {
                    Ok(())
                }
            }
            LossKind::AmSoftmax | LossKind::AamSoftmax => {
                if s <= 0.0 {
                    return Err(Error::config(format!("{kind}: scale s must be positive, got {s}")));
                }
                if m < 0.0 {
                    return Err(Error::config(format!("{kind}: margin m must be >= 0, got {m}")));
                }
                if kind == LossKind::AamSoftmax && m >= PI {
                    return Err(Error::config(format!(
                        "aam_softmax margin m must lie in [0, pi), got {m}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Final classification layer. `weight` is `embed_dim × classes`; the bias is
/// present only for plain softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl ProjectionLayer {
    pub fn new(embed_dim: usize, classes: usize, kind: LossKind, rng: &mut Rng) -> Self {
        let std = (1.0 / embed_dim as f64).sqrt();
        ProjectionLayer {
            weight: Matrix::random_normal(embed_dim, classes, std, rng),
            bias: kind.has_bias().then(|| Matrix::zeros(1, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Mean angle between each input and its target weight column.
    pub mean_target_theta: f64,
    pub mean_target_cos: f64,
    /// Inputs whose norm fell below the normalization guard.
    pub zero_norm_rows: usize,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Batch mean.
    pub loss: f64,
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Option<Matrix>,
    pub diagnostics: LossDiagnostics,
}

fn check_batch(x: &Matrix, labels: &[usize], layer: &ProjectionLayer) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} inputs but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if x.cols() != layer.embed_dim() {
        return Err(Error::dim(format!(
            "inputs are {}-dim, projection expects {}",
            x.cols(),
            layer.embed_dim()
        )));
    }
    let c = layer.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean cross-entropy of row-wise softmax over `logits`; returns the loss and
/// `d loss / d logits` (already divided by the batch size).
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[y];
        let g = grad.row_mut(i);
        for (gj, zj) in g.iter_mut().zip(z) {
            *gj = ((zj - lse).exp()) / nf;
        }
        g[y] -= 1.0 / nf;
    }
    (total / nf, grad)
}

/// Cosine between each row of `x` and each column of `w`, for diagnostics.
fn target_cosines(x: &Matrix, w: &Matrix, labels: &[usize]) -> Vec<f64> {
    let wn = w.col_norms();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let xi = x.row(i);
            let num: f64 = xi.iter().enumerate().map(|(k, v)| v * w[(k, y)]).sum();
            (num / (norm(xi).max(NORM_EPS) * wn[y].max(NORM_EPS))).clamp(-1.0, 1.0)
        })
        .collect()
}

fn diagnostics(cosines: &[f64], zero_norm_rows: usize) -> LossDiagnostics {
    let n = cosines.len() as f64;
    LossDiagnostics {
        mean_target_theta: cosines.iter().map(|c| c.acos()).sum::<f64>() / n,
        mean_target_cos: cosines.iter().sum::<f64>() / n,
        zero_norm_rows,
    }
}

/// Cross-entropy over `x W + b`.
pub fn softmax_loss(x: &Matrix, labels: &[usize], layer: &ProjectionLayer) -> Result<LossOutput> {
    check_batch(x, labels, layer)?;
    let bias = layer
        .bias
        .as_ref()
        .ok_or_else(|| Error::config("softmax projection needs a bias"))?;
    let mut logits = x.matmul(&layer.weight)?;
    logits.add_row_broadcast(bias.as_slice())?;
    let (loss, dz) = cross_entropy(&logits, labels);
    let grad_w = x.t_matmul(&dz)?;
    let grad_b = Matrix::row_vector(&dz.sum_rows());
    let grad_x = dz.matmul_t(&layer.weight)?;
    let zero = (0..x.rows()).filter(|&i| norm(x.row(i)) < NORM_EPS).count();
    Ok(LossOutput {
        loss,
        grad_x,
        grad_w,
        grad_b: Some(grad_b),
        diagnostics: diagnostics(&target_cosines(x, &layer.weight, labels), zero),
    })
}

/// Piecewise target function `(-1)^k cos(mθ) - 2k` on `[kπ/m, (k+1)π/m]`.
///
/// Angles a hair outside `[0, π]` are clamped; anything further is an error.
pub fn phi_a_softmax(theta: f64, m: u32) -> Result<f64> {
    let theta = clamp_angle(theta)?;
    if m == 0 {
        return Err(Error::Domain("a_softmax margin must be >= 1".into()));
    }
    let k = piece_index(theta, m);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(sign * (m as f64 * theta).cos() - 2.0 * k as f64)
}

/// `dφ/dθ` on the piece containing `theta`.
fn phi_a_softmax_dtheta(theta: f64, m: u32) -> f64 {
    let k = piece_index(theta, m);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    -sign * m as f64 * (m as f64 * theta).sin()
}

fn piece_index(theta: f64, m: u32) -> u32 {
    ((theta * m as f64 / PI).floor() as u32).min(m - 1)
}

fn clamp_angle(theta: f64) -> Result<f64> {
    if (0.0..=PI).contains(&theta) {
        Ok(theta)
    } else if theta < 0.0 && theta > -1e-9 {
        Ok(0.0)
    } else if theta > PI && theta < PI + 1e-9 {
        Ok(PI)
    } else {
        Err(Error::Domain(format!("angle {theta} outside [0, pi]")))
    }
}

/// How the target-class cosine is turned into a logit, before scaling.
#[derive(Clone, Copy)]
enum Margin {
    /// `φ(θ)`; the scale is `‖x‖`.
    Multiplicative(u32),
    /// `cos θ - m`
    AdditiveCosine(f64),
    /// `cos(θ + m)` via `cos θ cos m - sin θ sin m`
    AdditiveAngular(f64),
}

impl Margin {
    /// Target function of the clamped cosine and its derivative.
    fn target(self, c: f64) -> (f64, f64) {
        match self {
            Margin::Multiplicative(m) => {
                let theta = c.acos();
                let sin = (1.0 - c * c).max(0.0).sqrt();
                // dθ/dc = -1/sinθ; the clamp keeps sinθ >= ~4.5e-4
                let phi = phi_a_softmax(theta, m).expect("acos lies in [0, pi]");
                (phi, -phi_a_softmax_dtheta(theta, m) / sin)
            }
            Margin::AdditiveCosine(m) => (c - m, 1.0),
            Margin::AdditiveAngular(m) => {
                let sin = (1.0 - c * c).max(0.0).sqrt();
                let (sm, cm) = m.sin_cos();
                (c * cm - sin * sm, cm + c * sm / sin)
            }
        }
    }
}

/// Shared forward/backward for the three margin losses.
///
/// `scale`: `None` keeps each input's own norm as its scale (A-Softmax),
/// `Some(s)` length-normalizes the inputs and uses the constant `s`.
fn cosine_head_loss(
    x: &Matrix,
    labels: &[usize],
    layer: &ProjectionLayer,
    margin: Margin,
    scale: Option<f64>,
) -> Result<LossOutput> {
    check_batch(x, labels, layer)?;
    if layer.bias.is_some() {
        return Err(Error::config("margin losses use a projection without bias"));
    }
    let (n, e) = x.shape();
    let c = layer.classes();
    let w = &layer.weight;
    let w_norms = w.col_norms();
    let w_hat = w.col_l2_normalize(NORM_EPS);
    let x_norms: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
    let u = x.row_l2_normalize(NORM_EPS);
    let zero_norm_rows = x_norms.iter().filter(|&&r| r < NORM_EPS).count();

    let raw = u.matmul(&w_hat)?;
    let mut cos = Matrix::zeros(n, c);
    let mut inside = vec![true; n * c];
    for (idx, (&r, out)) in raw.as_slice().iter().zip(cos.as_mut_slice()).enumerate() {
        if r.abs() > 1.0 + COS_TOLERANCE {
            return Err(Error::Numeric(format!(
                "cosine {r} out of range at ({}, {})",
                idx / c,
                idx % c
            )));
        }
        let clamped = r.clamp(-COS_CLAMP, COS_CLAMP);
        inside[idx] = clamped == r;
        *out = clamped;
    }

    let row_scale: Vec<f64> = match scale {
        Some(s) => vec![s; n],
        None => x_norms.clone(),
    };
    let mut logits = Matrix::zeros(n, c);
    let mut target_value = vec![0.0; n];
    let mut target_slope = vec![0.0; n];
    for i in 0..n {
        let y = labels[i];
        for j in 0..c {
            logits[(i, j)] = row_scale[i] * cos[(i, j)];
        }
        let (f, df) = margin.target(cos[(i, y)]);
        target_value[i] = f;
        target_slope[i] = df;
        logits[(i, y)] = row_scale[i] * f;
    }
    logits.ensure_finite("margin logits")?;
    let (loss, dz) = cross_entropy(&logits, labels);

    // d loss / d cos, and for the norm-scaled variant d loss / d ‖x‖
    let mut dcos = Matrix::zeros(n, c);
    let mut dscale = vec![0.0; n];
    for i in 0..n {
        let y = labels[i];
        for j in 0..c {
            let (f, df) = if j == y {
                (target_value[i], target_slope[i])
            } else {
                (cos[(i, j)], 1.0)
            };
            dscale[i] += dz[(i, j)] * f;
            if inside[i * c + j] {
                dcos[(i, j)] = dz[(i, j)] * row_scale[i] * df;
            }
        }
    }

    // cos = u · ŵ
    let du = dcos.matmul_t(&w_hat)?;
    let dw_hat = u.t_matmul(&dcos)?;

    let mut grad_x = Matrix::zeros(n, e);
    for i in 0..n {
        let r = x_norms[i];
        let g = du.row(i);
        let out = grad_x.row_mut(i);
        if r < NORM_EPS {
            out.iter_mut().zip(g).for_each(|(o, v)| *o = v / NORM_EPS);
            continue;
        }
        let ui = u.row(i);
        let proj = dot(g, ui);
        for k in 0..e {
            out[k] = (g[k] - proj * ui[k]) / r;
        }
        if scale.is_none() {
            for k in 0..e {
                out[k] += dscale[i] * ui[k];
            }
        }
    }

    let mut grad_w = Matrix::zeros(e, c);
    for j in 0..c {
        let wn = w_norms[j];
        let gcol = dw_hat.col(j);
        if wn < NORM_EPS {
            for k in 0..e {
                grad_w[(k, j)] = gcol[k] / NORM_EPS;
            }
            continue;
        }
        let proj: f64 = (0..e).map(|k| gcol[k] * w_hat[(k, j)]).sum();
        for k in 0..e {
            grad_w[(k, j)] = (gcol[k] - proj * w_hat[(k, j)]) / wn;
        }
    }

    let target_cos: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| cos[(i, y)]).collect();
    Ok(LossOutput {
        loss,
        grad_x,
        grad_w,
        grad_b: None,
        diagnostics: diagnostics(&target_cos, zero_norm_rows),
    })
}

/// Target logit `‖x‖ φ(θ)`, other logits `‖x‖ cos θ`; weight columns
/// normalized, inputs left at their own length.
pub fn a_softmax_loss(
    x: &Matrix,
    labels: &[usize],
    layer: &ProjectionLayer,
    m: u32,
) -> Result<LossOutput> {
    if m == 0 {
        return Err(Error::config("a_softmax margin m must be >= 1"));
    }
    cosine_head_loss(x, labels, layer, Margin::Multiplicative(m), None)
}

/// Target logit `s (cos θ - m)`, other logits `s cos θ`; inputs and columns
/// normalized.
pub fn am_softmax_loss(
    x: &Matrix,
    labels: &[usize],
    layer: &ProjectionLayer,
    m: f64,
    s: f64,
) -> Result<LossOutput> {
    LossConfig {
        kind: LossKind::AmSoftmax,
        m,
        s,
    }
    .validate()?;
    cosine_head_loss(x, labels, layer, Margin::AdditiveCosine(m), Some(s))
}

/// Target logit `s cos(θ + m)`, other logits `s cos θ`; inputs and columns
/// normalized.
pub fn aam_softmax_loss(
    x: &Matrix,
    labels: &[usize],
    layer: &ProjectionLayer,
    m: f64,
    s: f64,
) -> Result<LossOutput> {
    LossConfig {
        kind: LossKind::AamSoftmax,
        m,
        s,
    }
    .validate()?;
    cosine_head_loss(x, labels, layer, Margin::AdditiveAngular(m), Some(s))
}

/// Single entry point used by the trainer.
pub fn compute_loss(
    cfg: &LossConfig,
    x: &Matrix,
    labels: &[usize],
    layer: &ProjectionLayer,
) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Softmax => softmax_loss(x, labels, layer),
        LossKind::ASoftmax => a_softmax_loss(x, labels, layer, cfg.m as u32),
        LossKind::AmSoftmax => am_softmax_loss(x, labels, layer, cfg.m, cfg.s),
        LossKind::AamSoftmax => aam_softmax_loss(x, labels, layer, cfg.m, cfg.s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize, e: usize, c: usize, kind: LossKind, seed: u64) -> (Matrix, Vec<usize>, ProjectionLayer) {
        let mut rng = Rng::new(seed);
        let x = Matrix::random_normal(n, e, 1.0, &mut rng);
        let labels = (0..n).map(|_| rng.below(c)).collect();
        let layer = ProjectionLayer::new(e, c, kind, &mut rng);
        (x, labels, layer)
    }

    #[test]
    fn zero_projection_gives_log_c() {
        let (x, y, mut layer) = setup(6, 4, 5, LossKind::Softmax, 1);
        layer.weight = Matrix::zeros(4, 5);
        let out = softmax_loss(&x, &y, &layer).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn equal_logits_give_ln2() {
        for z in [-40.0, 0.0, 3.5, 700.0] {
            let logits = Matrix::from_rows(&[[z, z]]).unwrap();
            let (loss, _) = cross_entropy(&logits, &[1]);
            assert!((loss - 2f64.ln()).abs() < 1e-12, "{z}");
        }
    }

    #[test]
    fn logit_gradient_sums_to_zero() {
        let mut rng = Rng::new(9);
        let logits = Matrix::random_normal(7, 5, 3.0, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.below(5)).collect();
        let (_, g) = cross_entropy(&logits, &labels);
        for i in 0..7 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range() {
        let (x, mut y, layer) = setup(3, 4, 5, LossKind::Softmax, 2);
        y[1] = 5;
        assert!(matches!(softmax_loss(&x, &y, &layer), Err(Error::Domain(_))));
    }

    #[test]
    fn phi_examples() {
        for m in 1..5 {
            assert_eq!(phi_a_softmax(0.0, m).unwrap(), 1.0);
        }
        let left = phi_a_softmax(PI / 2.0 - 1e-12, 2).unwrap();
        let right = phi_a_softmax(PI / 2.0 + 1e-12, 2).unwrap();
        assert!((left + 1.0).abs() < 1e-9 && (right + 1.0).abs() < 1e-9);
        for i in 0..=100 {
            let t = PI * i as f64 / 100.0;
            assert!((phi_a_softmax(t, 1).unwrap() - t.cos()).abs() < 1e-15);
        }
        assert_eq!(phi_a_softmax(-1e-10, 3).unwrap(), 1.0);
        assert!(phi_a_softmax(-1e-6, 3).is_err());
        assert!(phi_a_softmax(PI + 1e-6, 3).is_err());
    }

    #[test]
    fn aam_target_cosine_at_zero_angle() {
        let (c, _) = Margin::AdditiveAngular(0.3).target(COS_CLAMP);
        assert!((c - 0.3f64.cos()).abs() < 2e-4);
        assert!((0.3f64.cos() - 0.955336).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { kind: LossKind::ASoftmax, m: 1.5, s: 32.0 }.validate().is_err());
        assert!(LossConfig { kind: LossKind::ASoftmax, m: 0.0, s: 32.0 }.validate().is_err());
        assert!(LossConfig { kind: LossKind::AamSoftmax, m: PI, s: 32.0 }.validate().is_err());
        assert!(LossConfig { kind: LossKind::AmSoftmax, m: 0.2, s: 0.0 }.validate().is_err());
        for k in LossKind::ALL {
            LossConfig::new(k).validate().unwrap();
        }
        let aam = LossConfig::new(LossKind::AamSoftmax);
        assert_eq!((aam.m, aam.s), (0.3, 32.0));
        assert_eq!("aam".parse::<LossKind>().unwrap(), LossKind::AamSoftmax);
    }

    #[test]
    fn dispatch_routes_to_softmax() {
        let (x, y, layer) = setup(4, 3, 3, LossKind::Softmax, 5);
        let a = compute_loss(&LossConfig::new(LossKind::Softmax), &x, &y, &layer).unwrap();
        let b = softmax_loss(&x, &y, &layer).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad_x, b.grad_x);
    }

    #[test]
    fn margin_layer_must_not_carry_bias() {
        let (x, y, layer) = setup(4, 3, 3, LossKind::Softmax, 5);
        assert!(am_softmax_loss(&x, &y, &layer, 0.2, 32.0).is_err());
    }

    #[test]
    fn zero_norm_row_is_flagged() {
        let (mut x, y, layer) = setup(4, 3, 3, LossKind::ASoftmax, 6);
        x.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        let out = a_softmax_loss(&x, &y, &layer, 2).unwrap();
        assert_eq!(out.diagnostics.zero_norm_rows, 1);
        assert!(out.loss.is_finite() && out.grad_x.is_finite());
    }
}
