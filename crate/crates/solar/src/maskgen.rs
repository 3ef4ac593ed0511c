//! Intersection-mask generation: Gaussian fits over similarity score pools,
//! the closed-form density-equality threshold, hard masks, and the annealed
//! (evolutionary) soft mask.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::numerics::cosine;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Soft,
    Hard,
}

/// Per-token weights in [0,1]; hard masks contain only {0,1}.
#[derive(Debug, Clone)]
pub struct MaskVector {
    weights: Vec<f64>,
    kind: MaskKind,
}

impl MaskVector {
    pub fn hard(weights: Vec<f64>) -> Self {
        assert!(weights.iter().all(|w| *w == 0.0 || *w == 1.0), "hard mask must be 0/1");
        MaskVector { weights, kind: MaskKind::Hard }
    }

    pub fn soft(weights: Vec<f64>) -> Self {
        assert!(weights.iter().all(|w| (0.0..=1.0).contains(w)), "soft mask weight out of [0,1]");
        MaskVector { weights, kind: MaskKind::Soft }
    }

    pub fn ones(n: usize) -> Self {
        MaskVector { weights: vec![1.0; n], kind: MaskKind::Hard }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// F1 of this mask against a reference hard mask.
    pub fn f1_against(&self, truth: &MaskVector) -> f64 {
        assert_eq!(self.len(), truth.len());
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (p, t) in self.weights.iter().zip(truth.weights()) {
            let (p, t) = (*p > 0.5, *t > 0.5);
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp == 0.0 {
            return 0.0;
        }
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Mean, population standard deviation and count of a score set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

impl GaussianStats {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (std::f64::consts::TAU).ln()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Annealing state for the evolutionary mask blend M = ρ·1 + (1−ρ)·M̂.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleState {
    pub step: usize,
    pub total_anneal_steps: usize,
    pub kind: ScheduleKind,
}

impl ScheduleState {
    pub fn rho(&self) -> Result<f64> {
        rho_at(self.step, self.total_anneal_steps, self.kind)
    }
}

/// Cross-modal local-to-global similarity scores for one encoded pair:
/// S_L2V(p) = cos(image patch p, text global), S_V2L(t) = cos(text token t,
/// image global).
pub fn local_global_sims(
    v_locals: &Tensor,
    l_global: &[f64],
    l_locals: &Tensor,
    v_global: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut s_l2v = Vec::with_capacity(v_locals.rows());
    for p in 0..v_locals.rows() {
        s_l2v.push(cosine(v_locals.row(p), l_global)?);
    }
    let mut s_v2l = Vec::with_capacity(l_locals.rows());
    for t in 0..l_locals.rows() {
        s_v2l.push(cosine(l_locals.row(t), v_global)?);
    }
    Ok((s_l2v, s_v2l))
}

/// Sample mean and population standard deviation of each score pool.
pub fn fit_gaussians(pos: &[f64], neg: &[f64]) -> Result<(GaussianStats, GaussianStats)> {
    Ok((fit_one(pos)?, fit_one(neg)?))
}

fn fit_one(scores: &[f64]) -> Result<GaussianStats> {
    if scores.len() < 2 {
        return Err(SolarError::Degenerate(format!(
            "need >= 2 scores to fit a Gaussian, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    Ok(GaussianStats { mu, sigma: var.sqrt(), n: scores.len() })
}

const SIGMA_FLOOR: f64 = 1e-9;

/// Density-equality threshold between the two fitted Gaussians. The printed
/// closed form solves a quadratic; we take the root in [μ⁻, μ⁺], verify it by
/// direct density substitution, and fall back to bisection on the log-density
/// difference if verification fails.
pub fn qda_threshold(pos: GaussianStats, neg: GaussianStats) -> Result<f64> {
    if pos.sigma < SIGMA_FLOOR || neg.sigma < SIGMA_FLOOR {
        return Err(SolarError::Degenerate(format!(
            "near-zero sigma in QDA: {} / {}",
            pos.sigma, neg.sigma
        )));
    }
    if pos.mu <= neg.mu {
        return Err(SolarError::InvertedSignal(format!(
            "positive mean {} <= negative mean {}",
            pos.mu, neg.mu
        )));
    }
    if (pos.sigma - neg.sigma).abs() < SIGMA_FLOOR {
        return Ok(0.5 * (pos.mu + neg.mu));
    }

    // equate log densities: quadratic a·τ² + b·τ + c = 0
    let (vp, vn) = (pos.sigma * pos.sigma, neg.sigma * neg.sigma);
    let a = vn - vp;
    let b = 2.0 * (pos.mu * vn - neg.mu * vp) * -1.0;
    let c = pos.mu * pos.mu * vn - neg.mu * neg.mu * vp + 2.0 * vp * vn * (pos.sigma / neg.sigma).ln();
    let disc = b * b - 4.0 * a * c;
    let mut root = None;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        for r in [(-b + sq) / (2.0 * a), (-b - sq) / (2.0 * a)] {
            if r >= neg.mu && r <= pos.mu {
                root = Some(r);
                break;
            }
        }
    }
    if let Some(tau) = root {
        if density_residual(pos, neg, tau) < 1e-9 {
            return Ok(tau);
        }
    }
    bisect_threshold(pos, neg)
}

fn density_residual(pos: GaussianStats, neg: GaussianStats, tau: f64) -> f64 {
    let (p, q) = (pos.pdf(tau), neg.pdf(tau));
    (p - q).abs() / p.max(1e-300)
}

/// log p⁺(τ) − log p⁻(τ) is positive at μ⁺ and negative at μ⁻ whenever
/// μ⁻ < μ⁺, so a sign change exists in between.
fn bisect_threshold(pos: GaussianStats, neg: GaussianStats) -> Result<f64> {
    let f = |x: f64| pos.log_pdf(x) - neg.log_pdf(x);
    let (mut lo, mut hi) = (neg.mu, pos.mu);
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo <= 0.0 && fhi >= 0.0) {
        return Err(SolarError::Degenerate(format!(
            "no density crossing in [{}, {}] (f: {} .. {})",
            lo, hi, flo, fhi
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Strict-greater thresholding; ties fall to the difference set. An all-zero
/// mask would make the masked encoder ill-posed, so the single
/// highest-scoring token is forced on.
pub fn hard_mask(scores: &[f64], tau: f64) -> MaskVector {
    let mut weights: Vec<f64> =
        scores.iter().map(|s| if *s > tau { 1.0 } else { 0.0 }).collect();
    if weights.iter().all(|w| *w == 0.0) {
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty score vector");
        weights[best] = 1.0;
    }
    MaskVector::hard(weights)
}

/// M = ρ·1 + (1−ρ)·M̂, elementwise.
pub fn evolutionary_mask(hard: &MaskVector, sched: &ScheduleState) -> Result<MaskVector> {
    let rho = sched.rho()?;
    let weights = hard.weights().iter().map(|m| rho + (1.0 - rho) * m).collect();
    Ok(MaskVector::soft(weights))
}

/// The density-equality point lies inside [μ⁻, μ⁺] iff the log-density
/// difference changes sign across the interval. Poorly separated pools
/// (tiny mean gap, dissimilar sigmas) put the crossing outside; those cases
/// surface as errors from `qda_threshold`'s bisection fallback.
pub fn crossing_in_interval(pos: GaussianStats, neg: GaussianStats) -> bool {
    if pos.mu <= neg.mu || pos.sigma < SIGMA_FLOOR || neg.sigma < SIGMA_FLOOR {
        return false;
    }
    let f = |x: f64| pos.log_pdf(x) - neg.log_pdf(x);
    f(neg.mu) <= 0.0 && f(pos.mu) >= 0.0
}

pub fn rho_at(step: usize, total_anneal_steps: usize, kind: ScheduleKind) -> Result<f64> {
    if total_anneal_steps == 0 {
        return Err(SolarError::Config("total_anneal_steps must be > 0".into()));
    }
    let frac = (step as f64 / total_anneal_steps as f64).min(1.0);
    let rho = match kind {
        ScheduleKind::Linear => 1.0 - frac,
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    };
    Ok(rho.clamp(0.0, 1.0))
}
