//! Automatic threshold selection via peaks-over-threshold extreme-value
//! fitting, online snapshot scoring, and the anomaly verdict with its
//! interpretation coefficients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::Snapshot;
use crate::model::Session;
use crate::{HvgraeError, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvtParams {
    /// Lower-tail fraction used to pick the peaks-over-threshold anchor.
    pub initial_quantile: f64,
    /// Target exceedance probability of the returned threshold.
    pub risk_q: f64,
    /// Fitted generalized-Pareto shape; None on the empirical fallback.
    pub gpd_shape: Option<f64>,
    pub gpd_scale: Option<f64>,
}

pub const DEFAULT_INITIAL_QUANTILE: f64 = 0.02;
pub const DEFAULT_RISK_Q: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Thresholds {
    /// Log-probability threshold for edges.
    pub alpha_a: f64,
    /// Log-likelihood threshold for node attributes; absent for
    /// unattributed data.
    pub alpha_x: Option<f64>,
    pub evt: EvtParams,
}

/// Result of fitting one threshold from a score sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdFit {
    pub level: f64,
    pub gpd_shape: Option<f64>,
    pub gpd_scale: Option<f64>,
    /// True when the empirical-quantile fallback was used.
    pub fallback: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Profile log-likelihood of a GPD fit to exceedances `x` at slope
/// theta = shape / scale. Returns (loglik, shape, scale).
fn gpd_profile(x: &[f64], theta: f64) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    if theta.abs() < 1e-12 {
        // exponential limit
        let mean = x.iter().sum::<f64>() / n;
        if mean <= 0.0 {
            return None;
        }
        return Some((-n * mean.ln() - n, 0.0, mean));
    }
    let mut sum_ln = 0.0;
    for &v in x {
        let a = 1.0 + theta * v;
        if a <= 0.0 {
            return None;
        }
        sum_ln += a.ln();
    }
    let shape = sum_ln / n;
    if shape.abs() < 1e-12 {
        return None;
    }
    let scale = shape / theta;
    if scale <= 0.0 {
        return None;
    }
    Some((-n * scale.ln() - n * (shape + 1.0), shape, scale))
}

/// Maximum-likelihood GPD fit (profile likelihood over theta with a
/// method-of-moments start and grid refinement).
fn fit_gpd(x: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if mean <= 0.0 || var <= 0.0 {
        return None;
    }
    // method-of-moments: shape = (mean^2/var - 1) / 2, scale = mean (1 - shape + mean^2/var) / 2
    let r = mean * mean / var;
    let mom_shape = 0.5 * (r - 1.0);
    let mom_scale = 0.5 * mean * (r + 1.0);
    let theta0 = if mom_scale > 0.0 { mom_shape / mom_scale } else { 0.0 };
    let x_max = x.iter().cloned().fold(0.0_f64, f64::max);
    let theta_lo = -1.0 / x_max + 1e-9;

    let mut best: Option<(f64, f64, f64, f64)> = None; // (loglik, theta, shape, scale)
    let consider = |best: &mut Option<(f64, f64, f64, f64)>, theta: f64| {
        if theta <= theta_lo {
            return;
        }
        if let Some((ll, shape, scale)) = gpd_profile(x, theta) {
            if ll.is_finite() && best.map_or(true, |(b, ..)| ll > b) {
                *best = Some((ll, theta, shape, scale));
            }
        }
    };
    consider(&mut best, 0.0);
    consider(&mut best, theta0);
    // coarse grid spanning several orders of magnitude on both sides
    for k in -20..=20 {
        let mag = 10f64.powf(k as f64 / 4.0 - 3.0);
        consider(&mut best, mag / mean);
        consider(&mut best, -mag / mean);
    }
    // two rounds of local refinement around the incumbent
    for _ in 0..2 {
        let (_, theta, _, _) = best?;
        let span = theta.abs().max(1e-6 / mean);
        for k in -10..=10 {
            consider(&mut best, theta + span * k as f64 / 20.0);
        }
    }
    let (_, _, shape, scale) = best?;
    Some((shape, scale))
}

/// Peaks-over-threshold fit on the lower tail of a log-probability sample.
///
/// Picks the empirical `initial_quantile` as the anchor, fits a
/// generalized Pareto distribution to the exceedances below it, and
/// returns the level with exceedance probability `risk_q`. Falls back to
/// the empirical quantile when fewer than 10 exceedances exist or the fit
/// fails; the result is always clamped to the observed score range.
pub fn fit_threshold(scores: &[f64], risk_q: f64, initial_quantile: f64) -> Result<ThresholdFit> {
    if scores.len() < 50 {
        return Err(HvgraeError::Validation(format!(
            "threshold fitting needs at least 50 scores, got {}",
            scores.len()
        )));
    }
    if !(0.0..1.0).contains(&risk_q) || risk_q <= 0.0 {
        return Err(HvgraeError::Validation("risk_q must be in (0,1)".into()));
    }
    if !(0.0..1.0).contains(&initial_quantile) || initial_quantile <= 0.0 {
        return Err(HvgraeError::Validation(
            "initial_quantile must be in (0,1)".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HvgraeError::Numerical("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (min, max) = (sorted[0], *sorted.last().unwrap());
    let anchor = quantile(&sorted, initial_quantile);
    let exceedances: Vec<f64> = sorted
        .iter()
        .take_while(|&&s| s < anchor)
        .map(|&s| anchor - s)
        .filter(|&e| e > 0.0)
        .collect();

    let fallback = |why_empirical: bool| ThresholdFit {
        level: quantile(&sorted, risk_q).clamp(min, max),
        gpd_shape: None,
        gpd_scale: None,
        fallback: why_empirical,
    };
    if exceedances.len() < 10 {
        return Ok(fallback(true));
    }
    match fit_gpd(&exceedances) {
        None => Ok(fallback(true)),
        Some((shape, scale)) => {
            let n = scores.len() as f64;
            let n_u = exceedances.len() as f64;
            let ratio = risk_q * n / n_u;
            let level = if shape.abs() < 1e-9 {
                anchor + scale * ratio.ln()
            } else {
                anchor - (scale / shape) * (ratio.powf(-shape) - 1.0)
            };
            if !level.is_finite() {
                return Ok(fallback(true));
            }
            Ok(ThresholdFit {
                level: level.clamp(min, max),
                gpd_shape: Some(shape),
                gpd_scale: Some(scale),
                fallback: false,
            })
        }
    }
}

/// Reconstruction probabilities of one scored snapshot.
#[derive(Clone, Debug)]
pub struct ReconReport {
    pub t: usize,
    /// (i, j, log y_ij) for every existing edge.
    pub edge_scores: Vec<(usize, usize, f64)>,
    /// (node, total log-likelihood, per-dimension breakdown); empty for
    /// unattributed data.
    pub node_scores: Vec<(usize, f64, Vec<f64>)>,
    /// Decoder Gaussian parameters, kept for the eta_n coefficient.
    pub attr_mu: Option<Array2<f64>>,
    pub attr_sigma_sq: Option<Array2<f64>>,
    pub attributes: Option<Array2<f64>>,
}

/// Score one snapshot through the session's frozen model and commit the
/// recurrent state. Snapshots must arrive in time order.
pub fn score_snapshot(sess: &mut Session, snapshot: &Snapshot) -> Result<ReconReport> {
    let mc = sess.model().config.mc_score;
    let attributed = sess.model().attributed;
    let out = sess.forward(snapshot, mc, None)?;
    let edge_scores = snapshot
        .edges()
        .into_iter()
        .map(|(i, j)| (i, j, out.edge_logp[(i, j)]))
        .collect();
    let mut node_scores = Vec::new();
    if let Some(attr_logp) = &out.attr_logp {
        for (k, row) in attr_logp.rows().into_iter().enumerate() {
            node_scores.push((k, row.sum(), row.to_vec()));
        }
    }
    let report = ReconReport {
        t: snapshot.t,
        edge_scores,
        node_scores,
        attr_mu: out.decoder.attr_mu.clone(),
        attr_sigma_sq: out.decoder.attr_sigma_sq.clone(),
        attributes: if attributed {
            Some(snapshot.attributes.clone())
        } else {
            None
        },
    };
    sess.commit(out.commit)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DetectionVerdict {
    pub t: usize,
    #[serde(rename = "alpha_A")]
    pub alpha_a: f64,
    pub flagged_edges: Vec<(usize, usize, f64)>,
    pub flagged_nodes: Vec<(usize, f64)>,
    pub gamma_e: f64,
    pub gamma_n: f64,
    pub eta_e: f64,
    pub eta_n: f64,
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let q = q.clamp(1e-12, 1.0 - 1e-12);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Pure threshold application: flag low-probability edges and nodes and
/// compute the coarse (gamma) and fine (eta) anomaly coefficients.
pub fn detect(report: &ReconReport, thresholds: &Thresholds) -> DetectionVerdict {
    let alpha_a = thresholds.alpha_a;
    let alpha_prob = alpha_a.exp().clamp(1e-12, 1.0 - 1e-12);

    let flagged_edges: Vec<(usize, usize, f64)> = report
        .edge_scores
        .iter()
        .filter(|&&(_, _, lp)| lp < alpha_a)
        .copied()
        .collect();
    let edge_total = report.edge_scores.len();
    let gamma_e = if edge_total > 0 {
        flagged_edges.len() as f64 / edge_total as f64
    } else {
        0.0
    };
    let eta_e: f64 = report
        .edge_scores
        .iter()
        .map(|&(_, _, lp)| bernoulli_kl(lp.exp(), alpha_prob))
        .sum();

    let mut flagged: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    let mut eta_n = 0.0;
    let mut node_total = 0usize;
    if let (Some(alpha_x), Some(mu), Some(var), Some(x)) = (
        thresholds.alpha_x,
        report.attr_mu.as_ref(),
        report.attr_sigma_sq.as_ref(),
        report.attributes.as_ref(),
    ) {
        node_total = report.node_scores.len();
        for &(k, lp, _) in &report.node_scores {
            if lp < alpha_x {
                flagged.entry(k).or_insert(lp);
            }
        }
        // Threshold distribution for continuous attributes: per dimension,
        // a Gaussian centered on the observation whose peak log-density is
        // the per-dimension share of alpha_x.
        let d = mu.ncols() as f64;
        let sigma_t_sq = (-2.0 * alpha_x / d).exp() / (2.0 * std::f64::consts::PI);
        for ((i, j), &m) in mu.indexed_iter() {
            let s2 = var[(i, j)];
            let diff = m - x[(i, j)];
            eta_n += 0.5 * ((sigma_t_sq / s2).ln() + (s2 + diff * diff) / sigma_t_sq - 1.0);
        }
        eta_n = eta_n.max(0.0);
    }
    // nodes touching a flagged edge are flagged with the edge's log-prob
    for &(i, j, lp) in &flagged_edges {
        flagged.entry(i).or_insert(lp);
        flagged.entry(j).or_insert(lp);
        node_total = node_total.max(i + 1).max(j + 1);
    }
    let gamma_n = if node_total > 0 {
        (flagged.len() as f64 / node_total as f64).min(1.0)
    } else {
        0.0
    };

    DetectionVerdict {
        t: report.t,
        alpha_a,
        flagged_edges,
        flagged_nodes: flagged.into_iter().collect(),
        gamma_e,
        gamma_n,
        eta_e,
        eta_n,
    }
}
