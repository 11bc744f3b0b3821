//! Named parameter storage shared by all model blocks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::{HvgraeError, Result};

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .expect("parameter entry shape mismatch")
    }
}

/// Flat, ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    values: Vec<Array2<f64>>,
    names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Register every parameter as a leaf on `tape`; index i of the result
    /// corresponds to `ParamId(i)`.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn to_entries(&self) -> Vec<ParamEntry> {
        self.values
            .iter()
            .zip(&self.names)
            .map(|(v, n)| ParamEntry {
                name: n.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Restore values from serialized entries; names and shapes must match
    /// the layout produced by the same model configuration.
    pub fn load_entries(&mut self, entries: &[ParamEntry]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(HvgraeError::Validation(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name != self.names[i] {
                return Err(HvgraeError::Validation(format!(
                    "checkpoint parameter {} named '{}', expected '{}'",
                    i, e.name, self.names[i]
                )));
            }
            if (e.rows, e.cols) != self.values[i].dim() {
                return Err(HvgraeError::Validation(format!(
                    "checkpoint parameter '{}' has shape {}x{}, expected {:?}",
                    e.name,
                    e.rows,
                    e.cols,
                    self.values[i].dim()
                )));
            }
            self.values[i] = e.to_array();
        }
        Ok(())
    }
}

/// Glorot-uniform weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-a..a))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

/// Small uniform init for flow vectors, keeping the initial flow near identity.
pub fn small_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.1..0.1))
}
