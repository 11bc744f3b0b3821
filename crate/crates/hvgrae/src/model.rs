//! Full model assembly: hierarchical encoder, predictive prior,
//! precision-weighted information sharing, and the symmetric decoder,
//! evaluated one snapshot at a time on an autodiff tape.
//!
//! A [`Session`] owns the tape and the per-scale recurrent state, so a
//! sequence is processed by alternating `forward` and `commit` in time
//! order. Training unrolls a whole sequence on one tape and calls
//! `backward` once; scoring reads values off the tape and never
//! differentiates.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::graph::{normalize_adjacency, Snapshot};
use crate::latent::{
    chain_forward, floor_sigma_sq, gauss_log_density, kl_estimate, precision_merge,
    reparameterize, GaussianParams, PlanarFlow, PlanarVars, LN_2PI,
};
use crate::nn::{
    dropout, gcn_forward, gru_step, mlp_forward, Activation, GruCell, Mlp,
};
use crate::params::{glorot, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::{HvgraeError, Result};

pub const EDGE_PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Number of stochastic scales M; scale i runs at dilation 2^(i-1).
    pub scales: usize,
    /// Latent dimensionality d at every scale.
    pub latent_dim: usize,
    /// Output width of the content extractor MLP.
    pub content_dim: usize,
    /// Width of every graph-convolution layer in the stacks.
    pub gcn_dim: usize,
    /// Hidden width of the dilated GRU layers (encoder, prior, decoder).
    pub drnn_hidden: usize,
    /// Hidden width of the inference / likelihood heads.
    pub head_hidden: usize,
    /// Planar flows per scale; 0 disables flows.
    pub flow_layers: usize,
    /// Monte-Carlo samples per timestep during training.
    pub mc_train: usize,
    /// Monte-Carlo samples per timestep during scoring.
    pub mc_score: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 2,
            latent_dim: 16,
            content_dim: 64,
            gcn_dim: 64,
            drnn_hidden: 64,
            head_hidden: 32,
            flow_layers: 2,
            mc_train: 1,
            mc_score: 8,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(HvgraeError::Validation("scales must be >= 1".into()));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("content_dim", self.content_dim),
            ("gcn_dim", self.gcn_dim),
            ("drnn_hidden", self.drnn_hidden),
            ("head_hidden", self.head_hidden),
            ("mc_train", self.mc_train),
            ("mc_score", self.mc_score),
        ] {
            if v < 1 {
                return Err(HvgraeError::Validation(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HvgraeError::Validation("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn dilation(&self, scale: usize) -> usize {
        1 << scale
    }
}

/// Parameter layout of one model instance; every id points into the
/// shared [`ParamSet`].
#[derive(Clone, Debug)]
struct Arch {
    content_mlp: Mlp,
    gcn_w: Vec<ParamId>,
    enc_gru: Vec<GruCell>,
    head_gcn_w: Vec<ParamId>,
    head_mu_w: Vec<ParamId>,
    head_var_w: Vec<ParamId>,
    /// Projection of the sampled level-(i+1) latent into the scale-i
    /// inference head; length M-1 (entry i serves scale i).
    topdown_w: Vec<ParamId>,
    prior_gru: Vec<GruCell>,
    prior_topdown_w: Vec<ParamId>,
    prior_hidden: Vec<Mlp>,
    prior_mu: Vec<Mlp>,
    prior_var: Vec<Mlp>,
    /// One flow chain per scale, shared by posterior and prior.
    flows: Vec<Vec<PlanarFlow>>,
    dec_mlp: Vec<Mlp>,
    dec_gcn_w: Vec<ParamId>,
    dec_gru: Vec<GruCell>,
    fusion: Mlp,
    bern_hidden: Mlp,
    bern_src_w: ParamId,
    bern_dst_w: ParamId,
    bern_bias: ParamId,
    gauss_hidden: Option<Mlp>,
    gauss_mu: Option<Mlp>,
    gauss_var: Option<Mlp>,
}

/// The assembled model: configuration, dataset dimensions, and parameters.
#[derive(Clone, Debug)]
pub struct Hvgrae {
    pub config: ModelConfig,
    pub node_count: usize,
    pub attr_dim: usize,
    /// False when attributes are the identity fallback; the attribute
    /// likelihood is then dropped from the objective.
    pub attributed: bool,
    pub params: ParamSet,
    arch: Arch,
}

impl Hvgrae {
    pub fn new(
        config: ModelConfig,
        node_count: usize,
        attr_dim: usize,
        attributed: bool,
    ) -> Result<Self> {
        config.validate()?;
        if node_count < 1 || attr_dim < 1 {
            return Err(HvgraeError::Validation(
                "node count and attribute dim must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let m = config.scales;
        let d = config.latent_dim;
        let h = config.drnn_hidden;

        let content_mlp = Mlp::init(
            &mut ps,
            "enc.content",
            &[attr_dim, config.content_dim],
            &[Activation::Relu],
            &mut rng,
        );
        let mut gcn_w = Vec::new();
        let mut enc_gru = Vec::new();
        for i in 0..m {
            let f_in = if i == 0 { config.content_dim } else { config.gcn_dim };
            gcn_w.push(ps.add(format!("enc.gcn{i}.w"), glorot(&mut rng, f_in, config.gcn_dim)));
            let gru_in = if i == 0 { config.gcn_dim } else { config.gcn_dim + h };
            enc_gru.push(GruCell::init(&mut ps, &format!("enc.drnn{i}"), gru_in, h, &mut rng));
        }
        let mut head_gcn_w = Vec::new();
        let mut head_mu_w = Vec::new();
        let mut head_var_w = Vec::new();
        let mut topdown_w = Vec::new();
        let mut prior_gru = Vec::new();
        let mut prior_topdown_w = Vec::new();
        let mut prior_hidden = Vec::new();
        let mut prior_mu = Vec::new();
        let mut prior_var = Vec::new();
        let mut flows = Vec::new();
        for i in 0..m {
            let top = i + 1 == m;
            let head_in = h + d + if top { 0 } else { d };
            head_gcn_w.push(ps.add(
                format!("enc.head{i}.w"),
                glorot(&mut rng, head_in, config.head_hidden),
            ));
            head_mu_w.push(ps.add(
                format!("enc.head{i}.mu"),
                glorot(&mut rng, config.head_hidden, d),
            ));
            head_var_w.push(ps.add(
                format!("enc.head{i}.var"),
                glorot(&mut rng, config.head_hidden, d),
            ));
            if !top {
                topdown_w.push(ps.add(format!("enc.topdown{i}.w"), glorot(&mut rng, d, d)));
                prior_topdown_w.push(ps.add(
                    format!("prior.topdown{i}.w"),
                    glorot(&mut rng, d, d),
                ));
            }
            prior_gru.push(GruCell::init(&mut ps, &format!("prior.drnn{i}"), d, h, &mut rng));
            let prior_in = h + if top { 0 } else { d };
            prior_hidden.push(Mlp::init(
                &mut ps,
                &format!("prior.hidden{i}"),
                &[prior_in, config.head_hidden],
                &[Activation::Relu],
                &mut rng,
            ));
            prior_mu.push(Mlp::init(
                &mut ps,
                &format!("prior.mu{i}"),
                &[config.head_hidden, d],
                &[Activation::Linear],
                &mut rng,
            ));
            prior_var.push(Mlp::init(
                &mut ps,
                &format!("prior.var{i}"),
                &[config.head_hidden, d],
                &[Activation::Softplus],
                &mut rng,
            ));
            flows.push(
                (0..config.flow_layers)
                    .map(|l| PlanarFlow::init(&mut ps, &format!("flow{i}.{l}"), d, &mut rng))
                    .collect(),
            );
        }
        let mut dec_mlp = Vec::new();
        let mut dec_gcn_w = Vec::new();
        let mut dec_gru = Vec::new();
        for i in 0..m {
            dec_mlp.push(Mlp::init(
                &mut ps,
                &format!("dec.content{i}"),
                &[d, config.content_dim],
                &[Activation::Relu],
                &mut rng,
            ));
            dec_gcn_w.push(ps.add(
                format!("dec.gcn{i}.w"),
                glorot(&mut rng, config.content_dim, config.gcn_dim),
            ));
            dec_gru.push(GruCell::init(
                &mut ps,
                &format!("dec.drnn{i}"),
                config.gcn_dim,
                h,
                &mut rng,
            ));
        }
        let fusion = Mlp::init(
            &mut ps,
            "dec.fusion",
            &[m * h, h],
            &[Activation::Relu],
            &mut rng,
        );
        // Edge likelihood: per-node embeddings feed a bilinear sigmoid, so
        // edge probabilities permute consistently on both axes under node
        // relabeling (a per-node output layer would fix the column order).
        let bern_hidden = Mlp::init(
            &mut ps,
            "dec.bern.hidden",
            &[h, config.head_hidden],
            &[Activation::Tanh],
            &mut rng,
        );
        let bern_src_w = ps.add(
            "dec.bern.src".to_string(),
            glorot(&mut rng, config.head_hidden, config.head_hidden),
        );
        let bern_dst_w = ps.add(
            "dec.bern.dst".to_string(),
            glorot(&mut rng, config.head_hidden, config.head_hidden),
        );
        let bern_bias = ps.add("dec.bern.bias".to_string(), crate::params::zeros(1, 1));
        let (gauss_hidden, gauss_mu, gauss_var) = if attributed {
            (
                Some(Mlp::init(
                    &mut ps,
                    "dec.gauss.hidden",
                    &[h, config.head_hidden],
                    &[Activation::Tanh],
                    &mut rng,
                )),
                Some(Mlp::init(
                    &mut ps,
                    "dec.gauss.mu",
                    &[config.head_hidden, attr_dim],
                    &[Activation::Linear],
                    &mut rng,
                )),
                Some(Mlp::init(
                    &mut ps,
                    "dec.gauss.var",
                    &[config.head_hidden, attr_dim],
                    &[Activation::Softplus],
                    &mut rng,
                )),
            )
        } else {
            (None, None, None)
        };

        Ok(Hvgrae {
            config,
            node_count,
            attr_dim,
            attributed,
            params: ps,
            arch: Arch {
                content_mlp,
                gcn_w,
                enc_gru,
                head_gcn_w,
                head_mu_w,
                head_var_w,
                topdown_w,
                prior_gru,
                prior_topdown_w,
                prior_hidden,
                prior_mu,
                prior_var,
                flows,
                dec_mlp,
                dec_gcn_w,
                dec_gru,
                fusion,
                bern_hidden,
                bern_src_w,
                bern_dst_w,
                bern_bias,
                gauss_hidden,
                gauss_mu,
                gauss_var,
            },
        })
    }
}

/// Per-scale recurrent buffers; each deque holds exactly `dilation`
/// entries, front = state from `dilation` steps ago.
struct ScaleState {
    enc_h: VecDeque<Var>,
    dec_h: VecDeque<Var>,
    prior_h: VecDeque<Var>,
    z_g: VecDeque<Var>,
}

/// Everything `commit` needs to advance the recurrence by one step.
pub struct CommitPayload {
    t: usize,
    enc_h: Vec<Var>,
    dec_h: Vec<Var>,
    prior_h: Vec<Var>,
    z_g: Vec<Var>,
}

/// Decoder likelihood parameters at one timestep (sample-averaged values).
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Mean edge probability over Monte-Carlo samples, N x N in (0,1).
    pub edge_probs: Array2<f64>,
    pub attr_mu: Option<Array2<f64>>,
    pub attr_sigma_sq: Option<Array2<f64>>,
}

/// Outputs of one forward step, before the state commit.
pub struct StepOutput {
    pub t: usize,
    /// Mean-over-samples ELBO of this snapshot (scalar Var, maximized).
    pub elbo: Var,
    pub recon_a: Var,
    pub recon_x: Option<Var>,
    /// Per-scale KL (summed over nodes, mean over samples).
    pub kl: Vec<Var>,
    pub decoder: DecoderOutput,
    /// Mean over samples of log edge probability, N x N.
    pub edge_logp: Array2<f64>,
    /// Mean over samples of per-element attribute log-likelihood, N x D.
    pub attr_logp: Option<Array2<f64>>,
    /// Per-scale merged posterior (mu, sigma_sq) values.
    pub merged: Vec<(Array2<f64>, Array2<f64>)>,
    /// Per-scale post-flow latent sample (first Monte-Carlo sample).
    pub z_sample: Vec<Array2<f64>>,
    pub commit: CommitPayload,
}

/// Standard-normal matrix via Box-Muller.
pub fn gaussian_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

/// One stateful pass over a snapshot sequence. Create a fresh session per
/// training epoch (then backprop through the whole unroll) or per scoring
/// stream.
pub struct Session<'a> {
    model: &'a Hvgrae,
    pub tape: Tape,
    pvars: Vec<Var>,
    state: Vec<ScaleState>,
    t_next: Option<usize>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Hvgrae, training: bool, seed: u64) -> Self {
        let tape = Tape::new();
        let pvars = model.params.bind(&tape);
        let n = model.node_count;
        let cfg = &model.config;
        let state = (0..cfg.scales)
            .map(|i| {
                let k = cfg.dilation(i);
                let zero_h = || {
                    (0..k)
                        .map(|_| tape.zeros(n, cfg.drnn_hidden))
                        .collect::<VecDeque<_>>()
                };
                ScaleState {
                    enc_h: zero_h(),
                    dec_h: zero_h(),
                    prior_h: zero_h(),
                    z_g: (0..k).map(|_| tape.zeros(n, cfg.latent_dim)).collect(),
                }
            })
            .collect();
        Session {
            model,
            tape,
            pvars,
            state,
            t_next: None,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// On-tape handles of all parameters, index-aligned with the ParamSet.
    pub fn param_vars(&self) -> &[Var] {
        &self.pvars
    }

    pub fn model(&self) -> &Hvgrae {
        self.model
    }

    fn expect_t(&self, t: usize) -> Result<()> {
        if let Some(tn) = self.t_next {
            if t != tn {
                return Err(HvgraeError::Contract(format!(
                    "snapshot t={t} out of order, expected t={tn}"
                )));
            }
        }
        Ok(())
    }

    /// Evaluate one snapshot with `mc` Monte-Carlo samples. State buffers
    /// are not touched; call [`Session::commit`] with the returned payload
    /// to advance time. `noise` overrides the session RNG when provided
    /// (indexed `noise[sample][scale]`).
    pub fn forward(
        &mut self,
        snapshot: &Snapshot,
        mc: usize,
        noise: Option<&[Vec<Array2<f64>>]>,
    ) -> Result<StepOutput> {
        let model = self.model;
        let cfg = &model.config;
        let n = model.node_count;
        let m = cfg.scales;
        let d = cfg.latent_dim;
        self.expect_t(snapshot.t)?;
        if mc < 1 {
            return Err(HvgraeError::Validation("mc samples must be >= 1".into()));
        }
        if snapshot.adjacency.dim() != (n, n) || snapshot.attributes.dim() != (n, model.attr_dim) {
            return Err(HvgraeError::Shape(format!(
                "snapshot dims {:?}/{:?} inconsistent with model ({n}, {})",
                snapshot.adjacency.dim(),
                snapshot.attributes.dim(),
                model.attr_dim
            )));
        }
        if let Some(ns) = noise {
            if ns.len() != mc || ns.iter().any(|s| s.len() != m) {
                return Err(HvgraeError::Shape(
                    "noise override must be [mc][scales] matrices".into(),
                ));
            }
        }
        let tape = &self.tape;
        let adj = tape.leaf(normalize_adjacency(&snapshot.adjacency)?);
        let arch = &model.arch;

        // Encoder: content extraction, GCN stack, dilated recurrence.
        let x_in = dropout(
            tape,
            tape.leaf(snapshot.attributes.clone()),
            cfg.dropout,
            self.training,
            &mut self.rng,
        );
        let c_x = mlp_forward(tape, &arch.content_mlp.bind(&self.pvars), x_in)?;
        let mut s_list = Vec::with_capacity(m);
        let mut s = c_x;
        for i in 0..m {
            s = gcn_forward(tape, adj, s, self.pvars[arch.gcn_w[i].0], Activation::Relu)?;
            s_list.push(s);
        }
        let mut st_list: Vec<Var> = Vec::with_capacity(m);
        for i in 0..m {
            let input = if i == 0 {
                s_list[0]
            } else {
                tape.concat_cols(s_list[i], st_list[i - 1])
            };
            let h_prev = *self.state[i].enc_h.front().unwrap();
            st_list.push(gru_step(
                tape,
                arch.enc_gru[i].bind(&self.pvars),
                h_prev,
                input,
            )?);
        }

        // Prior recurrence over past latent samples (sample-independent).
        let mut prior_h_new = Vec::with_capacity(m);
        for i in 0..m {
            let ph_prev = *self.state[i].prior_h.front().unwrap();
            let z_prev = *self.state[i].z_g.front().unwrap();
            prior_h_new.push(gru_step(
                tape,
                arch.prior_gru[i].bind(&self.pvars),
                ph_prev,
                z_prev,
            )?);
        }

        let a_leaf = tape.leaf(snapshot.adjacency.clone());
        let x_leaf = tape.leaf(snapshot.attributes.clone());

        let mut recon_a_acc: Option<Var> = None;
        let mut recon_x_acc: Option<Var> = None;
        let mut kl_acc: Vec<Option<Var>> = vec![None; m];
        let mut edge_logp_acc = Array2::<f64>::zeros((n, n));
        let mut edge_prob_acc = Array2::<f64>::zeros((n, n));
        let mut attr_logp_acc = if model.attributed {
            Some(Array2::<f64>::zeros((n, model.attr_dim)))
        } else {
            None
        };
        let mut first_sample: Option<(Vec<Var>, Vec<Var>, Vec<(Array2<f64>, Array2<f64>)>, Vec<Array2<f64>>, DecoderOutput)> = None;

        for l in 0..mc {
            // Top-down inference and sampling, scale M-1 down to 0.
            let mut z_samples: Vec<Option<Var>> = vec![None; m];
            let mut z_g_samples: Vec<Option<Var>> = vec![None; m];
            let mut merged_vals = Vec::with_capacity(m);
            let mut kl_this = vec![tape.scalar(0.0); m];
            for i in (0..m).rev() {
                let top = i + 1 == m;
                let z_prev = *self.state[i].z_g.front().unwrap();
                let mut head_in = tape.concat_cols(st_list[i], z_prev);
                if !top {
                    let proj = tape.matmul(
                        z_samples[i + 1].unwrap(),
                        self.pvars[arch.topdown_w[i].0],
                    );
                    head_in = tape.concat_cols(head_in, proj);
                }
                let hh = gcn_forward(
                    tape,
                    adj,
                    head_in,
                    self.pvars[arch.head_gcn_w[i].0],
                    Activation::Relu,
                )?;
                let enc = GaussianParams {
                    mu: gcn_forward(tape, adj, hh, self.pvars[arch.head_mu_w[i].0], Activation::Linear)?,
                    sigma_sq: floor_sigma_sq(
                        tape,
                        gcn_forward(tape, adj, hh, self.pvars[arch.head_var_w[i].0], Activation::Softplus)?,
                    ),
                };
                let mut prior_in = prior_h_new[i];
                if !top {
                    let proj = tape.matmul(
                        z_samples[i + 1].unwrap(),
                        self.pvars[arch.prior_topdown_w[i].0],
                    );
                    prior_in = tape.concat_cols(prior_in, proj);
                }
                let phid = mlp_forward(tape, &arch.prior_hidden[i].bind(&self.pvars), prior_in)?;
                let prior = GaussianParams {
                    mu: mlp_forward(tape, &arch.prior_mu[i].bind(&self.pvars), phid)?,
                    sigma_sq: floor_sigma_sq(
                        tape,
                        mlp_forward(tape, &arch.prior_var[i].bind(&self.pvars), phid)?,
                    ),
                };
                let merged = precision_merge(tape, &enc, &prior);
                let eps = match noise {
                    Some(ns) => ns[l][i].clone(),
                    None => gaussian_noise(&mut self.rng, n, d),
                };
                let z_g = reparameterize(tape, &merged, &eps)?;
                let chain: Vec<PlanarVars> =
                    arch.flows[i].iter().map(|f| f.bind(&self.pvars)).collect();
                let (z, _log_det) = chain_forward(tape, &chain, z_g)?;
                let kl_vec = kl_estimate(tape, (&merged, &chain), (&prior, &chain), z_g)?;
                kl_this[i] = tape.sum_all(kl_vec);
                merged_vals.push((tape.value(merged.mu), tape.value(merged.sigma_sq)));
                z_samples[i] = Some(z);
                z_g_samples[i] = Some(z_g);
            }
            merged_vals.reverse();

            // Symmetric decoder: per-scale content MLP, GCN, dilated GRU,
            // then fused multi-scale features feed both likelihood heads.
            let mut dec_h_new = Vec::with_capacity(m);
            let mut fused_in: Option<Var> = None;
            for i in 0..m {
                let c_z = mlp_forward(
                    tape,
                    &arch.dec_mlp[i].bind(&self.pvars),
                    z_samples[i].unwrap(),
                )?;
                let s_d = gcn_forward(tape, adj, c_z, self.pvars[arch.dec_gcn_w[i].0], Activation::Relu)?;
                let dh_prev = *self.state[i].dec_h.front().unwrap();
                let st_d = gru_step(tape, arch.dec_gru[i].bind(&self.pvars), dh_prev, s_d)?;
                dec_h_new.push(st_d);
                fused_in = Some(match fused_in {
                    None => st_d,
                    Some(f) => tape.concat_cols(f, st_d),
                });
            }
            let fused_in = dropout(tape, fused_in.unwrap(), cfg.dropout, self.training, &mut self.rng);
            let fused = mlp_forward(tape, &arch.fusion.bind(&self.pvars), fused_in)?;
            let bh = mlp_forward(tape, &arch.bern_hidden.bind(&self.pvars), fused)?;
            let b_src = tape.matmul(bh, self.pvars[arch.bern_src_w.0]);
            let b_dst = tape.matmul(bh, self.pvars[arch.bern_dst_w.0]);
            let logits = tape.add(
                tape.matmul(b_src, tape.transpose(b_dst)),
                self.pvars[arch.bern_bias.0],
            );
            let y = tape.clamp(
                tape.sigmoid(logits),
                EDGE_PROB_FLOOR,
                1.0 - EDGE_PROB_FLOOR,
            );
            let ln_y = tape.ln(y);
            let ln_1my = tape.ln(tape.sub(tape.scalar(1.0), y));
            let recon_a = tape.sum_all(tape.add(
                tape.mul(a_leaf, ln_y),
                tape.mul(tape.sub(tape.scalar(1.0), a_leaf), ln_1my),
            ));
            recon_a_acc = Some(match recon_a_acc {
                None => recon_a,
                Some(acc) => tape.add(acc, recon_a),
            });
            edge_logp_acc += &tape.value(ln_y);
            edge_prob_acc += &tape.value(y);

            let mut attr_out = (None, None);
            if model.attributed {
                let gh = mlp_forward(tape, &arch.gauss_hidden.as_ref().unwrap().bind(&self.pvars), fused)?;
                let mu_x = mlp_forward(tape, &arch.gauss_mu.as_ref().unwrap().bind(&self.pvars), gh)?;
                let var_x = floor_sigma_sq(
                    tape,
                    mlp_forward(tape, &arch.gauss_var.as_ref().unwrap().bind(&self.pvars), gh)?,
                );
                let gp = GaussianParams { mu: mu_x, sigma_sq: var_x };
                let recon_x = tape.sum_all(gauss_log_density(tape, &gp, x_leaf));
                recon_x_acc = Some(match recon_x_acc {
                    None => recon_x,
                    Some(acc) => tape.add(acc, recon_x),
                });
                let (muv, varv) = (tape.value(mu_x), tape.value(var_x));
                let xv = &snapshot.attributes;
                let acc = attr_logp_acc.as_mut().unwrap();
                for ((i, j), a) in acc.indexed_iter_mut() {
                    let v = varv[(i, j)];
                    let diff = xv[(i, j)] - muv[(i, j)];
                    *a += -0.5 * LN_2PI - 0.5 * v.ln() - diff * diff / (2.0 * v);
                }
                attr_out = (Some(muv), Some(varv));
            }
            for i in 0..m {
                kl_acc[i] = Some(match kl_acc[i] {
                    None => kl_this[i],
                    Some(acc) => tape.add(acc, kl_this[i]),
                });
            }
            if l == 0 {
                let z_vals = z_samples
                    .iter()
                    .map(|z| tape.value(z.unwrap()))
                    .collect::<Vec<_>>();
                first_sample = Some((
                    z_g_samples.iter().map(|z| z.unwrap()).collect(),
                    dec_h_new,
                    merged_vals,
                    z_vals,
                    DecoderOutput {
                        edge_probs: Array2::zeros((0, 0)),
                        attr_mu: attr_out.0,
                        attr_sigma_sq: attr_out.1,
                    },
                ));
            }
        }

        let inv = 1.0 / mc as f64;
        let recon_a = tape.scale(recon_a_acc.unwrap(), inv);
        let recon_x = recon_x_acc.map(|v| tape.scale(v, inv));
        let kl: Vec<Var> = kl_acc
            .into_iter()
            .map(|v| tape.scale(v.unwrap(), inv))
            .collect();
        let mut elbo = recon_a;
        if let Some(rx) = recon_x {
            elbo = tape.add(elbo, rx);
        }
        for &k in &kl {
            elbo = tape.sub(elbo, k);
        }
        edge_logp_acc *= inv;
        edge_prob_acc *= inv;
        if let Some(a) = attr_logp_acc.as_mut() {
            *a *= inv;
        }
        let (z_g0, dec_h0, merged_vals, z_vals, mut dec_out) = first_sample.unwrap();
        dec_out.edge_probs = edge_prob_acc;

        Ok(StepOutput {
            t: snapshot.t,
            elbo,
            recon_a,
            recon_x,
            kl,
            decoder: dec_out,
            edge_logp: edge_logp_acc,
            attr_logp: attr_logp_acc,
            merged: merged_vals,
            z_sample: z_vals,
            commit: CommitPayload {
                t: snapshot.t,
                enc_h: st_list,
                dec_h: dec_h0,
                prior_h: prior_h_new,
                z_g: z_g0,
            },
        })
    }

    /// Push the step's new hidden states and latent samples into the
    /// dilation ring buffers. Must be called once per timestep, in order.
    pub fn commit(&mut self, payload: CommitPayload) -> Result<()> {
        if let Some(tn) = self.t_next {
            if payload.t != tn {
                return Err(HvgraeError::Contract(format!(
                    "commit for t={} out of order, expected t={tn}",
                    payload.t
                )));
            }
        }
        for (i, st) in self.state.iter_mut().enumerate() {
            st.enc_h.pop_front();
            st.enc_h.push_back(payload.enc_h[i]);
            st.dec_h.pop_front();
            st.dec_h.push_back(payload.dec_h[i]);
            st.prior_h.pop_front();
            st.prior_h.push_back(payload.prior_h[i]);
            st.z_g.pop_front();
            st.z_g.push_back(payload.z_g[i]);
        }
        self.t_next = Some(payload.t + 1);
        Ok(())
    }

    /// Buffer depth at a given scale (dilation ring size).
    pub fn buffer_depth(&self, scale: usize) -> usize {
        self.state[scale].z_g.len()
    }
}
