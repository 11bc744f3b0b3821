//! Stochastic machinery: diagonal-Gaussian heads, reparameterized sampling,
//! planar normalizing-flow chains with log-det accounting, the
//! precision-weighted posterior/prior merge, and Monte-Carlo KL estimation.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::params::{small_uniform, zeros, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::{HvgraeError, Result};

pub const SIGMA_SQ_FLOOR: f64 = 1e-6;
pub const LN_2PI: f64 = 1.837877066409345_f64;

/// Diagonal Gaussian over N node rows, d latent dims.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub sigma_sq: Var,
}

/// Clamp a variance head output to the positivity floor.
pub fn floor_sigma_sq(tape: &Tape, v: Var) -> Var {
    tape.clamp(v, SIGMA_SQ_FLOOR, f64::INFINITY)
}

/// mu + noise . sqrt(sigma_sq), differentiable in mu and sigma_sq.
pub fn reparameterize(tape: &Tape, params: &GaussianParams, noise: &Array2<f64>) -> Result<Var> {
    if tape.shape(params.mu) != noise.dim() || tape.shape(params.sigma_sq) != noise.dim() {
        return Err(HvgraeError::Shape(format!(
            "reparameterize: params {:?} vs noise {:?}",
            tape.shape(params.mu),
            noise.dim()
        )));
    }
    let eps = tape.leaf(noise.clone());
    Ok(tape.add(params.mu, tape.mul(eps, tape.sqrt(params.sigma_sq))))
}

/// Parameter ids of one planar flow layer: u, w are d x 1, b is a scalar.
#[derive(Clone, Debug)]
pub struct PlanarFlow {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl PlanarFlow {
    pub fn init(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PlanarFlow {
            u: params.add(format!("{prefix}.u"), small_uniform(rng, dim, 1)),
            w: params.add(format!("{prefix}.w"), small_uniform(rng, dim, 1)),
            b: params.add(format!("{prefix}.b"), zeros(1, 1)),
        }
    }

    pub fn bind(&self, pvars: &[Var]) -> PlanarVars {
        PlanarVars {
            u: pvars[self.u.0],
            w: pvars[self.w.0],
            b: pvars[self.b.0],
        }
    }
}

/// Bound (on-tape) planar flow parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarVars {
    pub u: Var,
    pub w: Var,
    pub b: Var,
}

/// Reparameterized u ensuring w'u_hat = -1 + softplus(w'u) > -1, which makes
/// the flow invertible for any raw parameters.
pub fn u_hat(tape: &Tape, flow: &PlanarVars) -> Var {
    let wtu = tape.matmul(tape.transpose(flow.w), flow.u); // 1x1
    let m = tape.add_const(tape.softplus(wtu), -1.0);
    let w_norm_sq = tape.sum_all(tape.mul(flow.w, flow.w));
    let coef = tape.div(tape.sub(m, wtu), w_norm_sq);
    tape.add(flow.u, tape.mul(flow.w, coef))
}

/// One planar flow layer applied row-wise: z' = z + u_hat . tanh(z w + b).
///
/// Returns (z', per-row log|det J|) with the rank-one Jacobian correction
/// log|1 + u_hat' psi(z)|, psi(z) = (1 - tanh^2(z w + b)) w.
pub fn planar_forward(tape: &Tape, flow: &PlanarVars, z: Var) -> Result<(Var, Var)> {
    let (_, d) = tape.shape(z);
    let (wr, wc) = tape.shape(flow.w);
    if (wr, wc) != (d, 1) || tape.shape(flow.u) != (d, 1) || tape.shape(flow.b) != (1, 1) {
        return Err(HvgraeError::Shape(format!(
            "planar flow params for d={d}: w {:?}, u {:?}, b {:?}",
            tape.shape(flow.w),
            tape.shape(flow.u),
            tape.shape(flow.b)
        )));
    }
    let uh = u_hat(tape, flow);
    let pre = tape.add(tape.matmul(z, flow.w), flow.b); // N x 1
    let h = tape.tanh(pre);
    let z_out = tape.add(z, tape.matmul(h, tape.transpose(uh)));
    // w' u_hat = -1 + softplus(w'u) keeps the argument of ln positive.
    let wtu_hat = tape.matmul(tape.transpose(flow.w), uh); // 1x1
    let h_deriv = tape.sub(tape.scalar(1.0), tape.mul(h, h)); // N x 1
    let inner = tape.add_const(tape.mul(h_deriv, wtu_hat), 1.0);
    let log_det = tape.ln(inner);
    Ok((z_out, log_det))
}

/// Apply a chain of planar flows in order; log-dets sum over the chain.
/// The empty chain is the identity with zero log-det.
pub fn chain_forward(tape: &Tape, chain: &[PlanarVars], z_gauss: Var) -> Result<(Var, Var)> {
    let (n, _) = tape.shape(z_gauss);
    let mut z = z_gauss;
    let mut log_det = tape.zeros(n, 1);
    for flow in chain {
        let (z_next, ld) = planar_forward(tape, flow, z)?;
        z = z_next;
        log_det = tape.add(log_det, ld);
    }
    Ok((z, log_det))
}

/// Per-row log-density of a diagonal Gaussian, summed over dims: N x 1.
pub fn gauss_log_density(tape: &Tape, params: &GaussianParams, z: Var) -> Var {
    let diff = tape.sub(z, params.mu);
    let quad = tape.div(tape.mul(diff, diff), tape.scale(params.sigma_sq, 2.0));
    let per_dim = tape.add_const(
        tape.sub(tape.scale(tape.ln(params.sigma_sq), -0.5), quad),
        -0.5 * LN_2PI,
    );
    tape.sum_cols(per_dim)
}

/// log q(z) by change of variables, where z = chain(z_gauss):
/// log N(z_gauss; mu, sigma_sq) - sum of chain log-dets at z_gauss.
pub fn log_density_flow(
    tape: &Tape,
    chain: &[PlanarVars],
    base: &GaussianParams,
    z_gauss: Var,
) -> Result<Var> {
    let (_, log_det) = chain_forward(tape, chain, z_gauss)?;
    Ok(tape.sub(gauss_log_density(tape, base, z_gauss), log_det))
}

/// Precision-weighted merge of two diagonal Gaussians (element-wise):
/// merged variance is the inverse precision sum, merged mean the
/// precision-weighted average.
pub fn precision_merge(tape: &Tape, enc: &GaussianParams, prior: &GaussianParams) -> GaussianParams {
    let prec_enc = tape.recip(enc.sigma_sq);
    let prec_prior = tape.recip(prior.sigma_sq);
    let sigma_sq = tape.recip(tape.add(prec_enc, prec_prior));
    let weighted = tape.add(tape.mul(enc.mu, prec_enc), tape.mul(prior.mu, prec_prior));
    let mu = tape.mul(weighted, sigma_sq);
    GaussianParams { mu, sigma_sq }
}

/// Single-sample KL estimate per node: log q(z) - log p_prior(z).
///
/// Only the shared-chain case is supported; the flow log-det terms then
/// cancel analytically and the estimate reduces to a difference of base
/// Gaussian log-densities at z_gauss.
pub fn kl_estimate(
    tape: &Tape,
    posterior: (&GaussianParams, &[PlanarVars]),
    prior: (&GaussianParams, &[PlanarVars]),
    z_gauss: Var,
) -> Result<Var> {
    let (post, post_chain) = posterior;
    let (pri, prior_chain) = prior;
    let shared = post_chain.len() == prior_chain.len()
        && post_chain.iter().zip(prior_chain).all(|(a, b)| a == b);
    if !shared {
        return Err(HvgraeError::Unsupported(
            "KL between differently-parameterized flow chains requires a flow inverse".into(),
        ));
    }
    Ok(tape.sub(
        gauss_log_density(tape, post, z_gauss),
        gauss_log_density(tape, pri, z_gauss),
    ))
}
