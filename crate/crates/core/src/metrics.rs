//! Detection metrics over scored trials: EER, minDCF and the DET sweep.
//!
//! Thresholds are the distinct scores plus "reject everything"; a trial is
//! accepted when its score is at or above the threshold.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::TrialList;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} scores for {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score {i} is {}", scores[i])));
        }
        let nt = targets.iter().filter(|&&t| t).count();
        if nt == 0 || nt == targets.len() {
            return Err(Error::Domain(format!(
                "need at least one target and one nontarget trial, got {nt} targets of {}",
                targets.len()
            )));
        }
        Ok(ScoredTrials { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn n_target(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.targets.len() - self.n_target()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub fn new(p_target: f64) -> Self {
        DcfParams {
            p_target,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::config(format!(
                "p_target must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) || !(self.c_miss.is_finite() && self.c_fa.is_finite()) {
            return Err(Error::config("detection costs must be positive and finite"));
        }
        Ok(())
    }

    fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Normalized detection cost at the given error rates.
    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)) / self.normalizer()
    }
}

/// One operating point of the sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    /// `+inf` for the reject-everything point.
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score (ascending) followed by the
/// reject-everything point.
pub fn sweep(trials: &ScoredTrials) -> Vec<SweepPoint> {
    let mut order: Vec<usize> = (0..trials.scores.len()).collect();
    order.sort_by(|&a, &b| trials.scores[a].total_cmp(&trials.scores[b]));
    let nt = trials.n_target() as f64;
    let nn = trials.n_nontarget() as f64;
    let mut miss = 0usize;
    let mut fa = trials.n_nontarget();
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let threshold = trials.scores[order[i]];
        out.push(SweepPoint {
            threshold,
            p_miss: miss as f64 / nt,
            p_fa: fa as f64 / nn,
        });
        while i < order.len() && trials.scores[order[i]] == threshold {
            if trials.targets[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
    out.push(SweepPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    out
}

/// Equal error rate and its threshold, interpolating linearly between the two
/// sweep points where `P_fa − P_miss` changes sign.
pub fn eer(trials: &ScoredTrials) -> (f64, f64) {
    eer_from_sweep(&sweep(trials))
}

pub fn eer_from_sweep(points: &[SweepPoint]) -> (f64, f64) {
    let i = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the last sweep point always has p_miss >= p_fa");
    let cur = points[i];
    if i == 0 || cur.p_miss == cur.p_fa {
        return ((cur.p_miss + cur.p_fa) / 2.0, cur.threshold);
    }
    let prev = points[i - 1];
    let d0 = prev.p_fa - prev.p_miss;
    let d1 = cur.p_fa - cur.p_miss;
    let t = d0 / (d0 - d1);
    let rate = prev.p_miss + t * (cur.p_miss - prev.p_miss);
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + t * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    (rate, threshold)
}

/// Minimum normalized detection cost over the sweep and the threshold that
/// attains it (`+inf` when rejecting everything is best).
pub fn min_dcf(trials: &ScoredTrials, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    Ok(min_dcf_from_sweep(&sweep(trials), params))
}

pub fn min_dcf_from_sweep(points: &[SweepPoint], params: &DcfParams) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in points {
        let c = params.cost(p.p_miss, p.p_fa);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    best
}

/// Normalized cost of accepting every trial scoring at or above `threshold`.
pub fn dcf_at(trials: &ScoredTrials, params: &DcfParams, threshold: f64) -> f64 {
    let (mut miss, mut fa) = (0usize, 0usize);
    for (&s, &t) in trials.scores.iter().zip(&trials.targets) {
        if t && s < threshold {
            miss += 1;
        }
        if !t && s >= threshold {
            fa += 1;
        }
    }
    params.cost(
        miss as f64 / trials.n_target() as f64,
        fa as f64 / trials.n_nontarget() as f64,
    )
}

/// `(P_fa, P_miss)` staircase: one point per distinct score plus one.
pub fn det_points(trials: &ScoredTrials) -> Vec<(f64, f64)> {
    sweep(trials).iter().map(|p| (p.p_fa, p.p_miss)).collect()
}

pub fn det_csv(trials: &ScoredTrials) -> String {
    let mut s = String::from("threshold,p_fa,p_miss\n");
    for p in sweep(trials) {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.p_fa, p.p_miss));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf_p01: f64,
    pub min_dcf_p001: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// EER plus minDCF at `p_target` 0.01 and 0.001 with the given costs.
pub fn evaluate(trials: &ScoredTrials, c_miss: f64, c_fa: f64) -> Result<EvalReport> {
    let points = sweep(trials);
    let (eer, eer_threshold) = eer_from_sweep(&points);
    let mut dcf = [0.0; 2];
    for (slot, p_target) in dcf.iter_mut().zip([0.01, 0.001]) {
        let params = DcfParams {
            p_target,
            c_miss,
            c_fa,
        };
        params.validate()?;
        *slot = min_dcf_from_sweep(&points, &params).0;
    }
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_dcf_p01: dcf[0],
        min_dcf_p001: dcf[1],
        n_target: trials.n_target(),
        n_nontarget: trials.n_nontarget(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
}

/// Parses `enroll_id test_id score` lines. Blank lines are skipped.
pub fn parse_scores_str(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let score: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad score {:?}", fields[2]),
        })?;
        if !score.is_finite() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("score {score} is not finite"),
            });
        }
        out.push(ScoreLine {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn parse_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    parse_scores_str(&std::fs::read_to_string(path)?)
}

pub fn scores_to_text(lines: &[ScoreLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&format!("{} {} {}\n", l.enroll_id, l.test_id, l.score));
    }
    s
}

/// Attaches trial labels to scores by `(enroll, test)` key, so line order
/// does not matter. Every trial needs exactly one score.
pub fn align_scores(trials: &TrialList, lines: &[ScoreLine]) -> Result<ScoredTrials> {
    let mut by_key: HashMap<(&str, &str), f64> = HashMap::with_capacity(lines.len());
    for l in lines {
        if by_key
            .insert((l.enroll_id.as_str(), l.test_id.as_str()), l.score)
            .is_some()
        {
            return Err(Error::Domain(format!(
                "duplicate score for trial {} {}",
                l.enroll_id, l.test_id
            )));
        }
    }
    let mut scores = Vec::with_capacity(trials.len());
    let mut targets = Vec::with_capacity(trials.len());
    let mut missing = Vec::new();
    for t in &trials.trials {
        match by_key.get(&(t.enroll_id.as_str(), t.test_id.as_str())) {
            Some(&s) => {
                scores.push(s);
                targets.push(t.label.is_target());
            }
            None => missing.push(format!("{} {}", t.enroll_id, t.test_id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Domain(format!(
            "{} trials have no score, first: {}",
            missing.len(),
            missing.iter().take(10).cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    ScoredTrials::new(scores, targets)
}
