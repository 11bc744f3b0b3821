//! Deterministic neural building blocks: graph convolution, dilated GRU
//! recurrence, and per-node MLPs. All blocks evaluate on the autodiff tape,
//! so parameter gradients come from a single backward pass.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{glorot, zeros, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::{HvgraeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
    Softplus,
    Tanh,
    Sigmoid,
}

pub fn activate(tape: &Tape, act: Activation, v: Var) -> Var {
    match act {
        Activation::Relu => tape.relu(v),
        Activation::Linear => v,
        Activation::Softplus => tape.softplus(v),
        Activation::Tanh => tape.tanh(v),
        Activation::Sigmoid => tape.sigmoid(v),
    }
}

/// Graph convolution: activation(adj . features . W).
///
/// `norm_adj` is expected to come from `graph::normalize_adjacency`.
pub fn gcn_forward(
    tape: &Tape,
    norm_adj: Var,
    features: Var,
    weight: Var,
    act: Activation,
) -> Result<Var> {
    let (an, am) = tape.shape(norm_adj);
    let (fr, fc) = tape.shape(features);
    let (wr, _) = tape.shape(weight);
    if an != am || an != fr {
        return Err(HvgraeError::Shape(format!(
            "gcn: adjacency {an}x{am} vs features {fr}x{fc}"
        )));
    }
    if fc != wr {
        return Err(HvgraeError::Shape(format!(
            "gcn: features cols {fc} vs weight rows {wr}"
        )));
    }
    let support = tape.matmul(features, weight);
    let agg = tape.matmul(norm_adj, support);
    Ok(activate(tape, act, agg))
}

/// Parameter ids for one GRU cell. Weights act on the concatenation
/// [hidden || input]; biases are broadcast row vectors.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cat = hidden_dim + input_dim;
        GruCell {
            w_r: params.add(format!("{prefix}.w_r"), glorot(rng, cat, hidden_dim)),
            b_r: params.add(format!("{prefix}.b_r"), zeros(1, hidden_dim)),
            w_u: params.add(format!("{prefix}.w_u"), glorot(rng, cat, hidden_dim)),
            b_u: params.add(format!("{prefix}.b_u"), zeros(1, hidden_dim)),
            w_h: params.add(format!("{prefix}.w_h"), glorot(rng, cat, hidden_dim)),
            b_h: params.add(format!("{prefix}.b_h"), zeros(1, hidden_dim)),
            input_dim,
            hidden_dim,
        }
    }
}

/// Bound (on-tape) view of a GRU cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_r: Var,
    pub b_r: Var,
    pub w_u: Var,
    pub b_u: Var,
    pub w_h: Var,
    pub b_h: Var,
}

impl GruCell {
    pub fn bind(&self, pvars: &[Var]) -> GruVars {
        GruVars {
            w_r: pvars[self.w_r.0],
            b_r: pvars[self.b_r.0],
            w_u: pvars[self.w_u.0],
            b_u: pvars[self.b_u.0],
            w_h: pvars[self.w_h.0],
            b_h: pvars[self.b_h.0],
        }
    }
}

/// One GRU update with shared weights across nodes.
///
/// `h_prev` is the stored state from `dilation` steps earlier (zeros when no
/// history is reachable yet).
pub fn gru_step(tape: &Tape, cell: GruVars, h_prev: Var, input: Var) -> Result<Var> {
    let (hr, hc) = tape.shape(h_prev);
    let (ir, ic) = tape.shape(input);
    let (wr, wc) = tape.shape(cell.w_r);
    if hr != ir {
        return Err(HvgraeError::Shape(format!(
            "gru: hidden rows {hr} vs input rows {ir}"
        )));
    }
    if hc + ic != wr {
        return Err(HvgraeError::Shape(format!(
            "gru: [hidden||input] width {} vs gate weight rows {wr}",
            hc + ic
        )));
    }
    if wc != hc {
        return Err(HvgraeError::Shape(format!(
            "gru: gate output {wc} vs hidden dim {hc}"
        )));
    }
    let cat = tape.concat_cols(h_prev, input);
    let r = tape.sigmoid(tape.add(tape.matmul(cat, cell.w_r), cell.b_r));
    let u = tape.sigmoid(tape.add(tape.matmul(cat, cell.w_u), cell.b_u));
    let gated = tape.concat_cols(tape.mul(r, h_prev), input);
    let h_tilde = tape.tanh(tape.add(tape.matmul(gated, cell.w_h), cell.b_h));
    // h = (1 - u) . h_prev + u . h_tilde
    let keep = tape.mul(tape.sub(tape.scalar(1.0), u), h_prev);
    Ok(tape.add(keep, tape.mul(u, h_tilde)))
}

/// Run a dilated GRU layer over a full input sequence.
///
/// Output at step t reads the hidden state from `dilation` steps earlier;
/// missing history reads as zeros.
pub fn drnn_layer_forward(
    tape: &Tape,
    cell: GruVars,
    inputs: &[Var],
    dilation: usize,
    hidden_dim: usize,
) -> Result<Vec<Var>> {
    if dilation == 0 {
        return Err(HvgraeError::Contract("dilation must be positive".into()));
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(inputs.len());
    for (t, &input) in inputs.iter().enumerate() {
        let rows = tape.shape(input).0;
        let h_prev = if t >= dilation {
            outputs[t - dilation]
        } else {
            tape.zeros(rows, hidden_dim)
        };
        outputs.push(gru_step(tape, cell, h_prev, input)?);
    }
    Ok(outputs)
}

/// Parameter ids for a feed-forward block applied row-wise.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId, Activation)>,
    pub out_dim: usize,
}

impl Mlp {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        acts: &[Activation],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(dims.len(), acts.len() + 1);
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &act)| {
                let w = params.add(format!("{prefix}.w{i}"), glorot(rng, dims[i], dims[i + 1]));
                let b = params.add(format!("{prefix}.b{i}"), zeros(1, dims[i + 1]));
                (w, b, act)
            })
            .collect();
        Mlp {
            layers,
            out_dim: *dims.last().unwrap(),
        }
    }

    pub fn bind(&self, pvars: &[Var]) -> Vec<(Var, Var, Activation)> {
        self.layers
            .iter()
            .map(|&(w, b, act)| (pvars[w.0], pvars[b.0], act))
            .collect()
    }
}

/// Row-wise feed-forward application; rows never interact.
pub fn mlp_forward(tape: &Tape, layers: &[(Var, Var, Activation)], x: Var) -> Result<Var> {
    let mut h = x;
    for &(w, b, act) in layers {
        let (_, hc) = tape.shape(h);
        let (wr, _) = tape.shape(w);
        if hc != wr {
            return Err(HvgraeError::Shape(format!(
                "mlp: input cols {hc} vs weight rows {wr}"
            )));
        }
        h = activate(tape, act, tape.add(tape.matmul(h, w), b));
    }
    Ok(h)
}

/// Inverted dropout applied to a block input during training.
pub fn dropout(tape: &Tape, x: Var, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Var {
    if !training || rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn((r, c), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul(x, tape.leaf(mask))
}
