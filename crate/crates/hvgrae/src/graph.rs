//! Dynamic-network data model, on-disk ingestion, and adjacency normalization.
//!
//! A dynamic network is an ordered sequence of snapshots over a fixed node
//! universe. Nodes absent at some time are isolated rows; adjacency matrices
//! are binary with no stored self-loops (self-loops are added only during
//! normalization). Unattributed datasets fall back to identity attributes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{HvgraeError, Result};

#[derive(Clone, Debug)]
pub struct Snapshot {
    /// 1-based timestamp index.
    pub t: usize,
    /// N x N matrix of exactly 0.0 / 1.0 entries.
    pub adjacency: Array2<f64>,
    /// N x D attribute matrix; identity for unattributed datasets.
    pub attributes: Array2<f64>,
}

impl Snapshot {
    /// Directed edge list (i, j) with A_ij = 1.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for ((i, j), &v) in self.adjacency.indexed_iter() {
            if v != 0.0 {
                out.push((i, j));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&v| v != 0.0).count()
    }
}

#[derive(Clone, Debug)]
pub struct DynNetwork {
    pub snapshots: Vec<Snapshot>,
    pub node_count: usize,
    pub attr_dim: usize,
    pub directed: bool,
    /// False when attributes are the synthetic identity fallback.
    pub attributed: bool,
}

impl DynNetwork {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, snap) in self.snapshots.iter().enumerate() {
            if snap.t != idx + 1 {
                return Err(HvgraeError::Validation(format!(
                    "snapshot at position {} has index {}, expected contiguous 1..T",
                    idx, snap.t
                )));
            }
            let n = self.node_count;
            if snap.adjacency.dim() != (n, n) {
                return Err(HvgraeError::Validation(format!(
                    "snapshot {} adjacency is {:?}, expected ({n}, {n})",
                    snap.t,
                    snap.adjacency.dim()
                )));
            }
            if snap.adjacency.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(HvgraeError::Validation(format!(
                    "snapshot {} adjacency has non-binary entries",
                    snap.t
                )));
            }
            if snap.attributes.dim() != (n, self.attr_dim) {
                return Err(HvgraeError::Validation(format!(
                    "snapshot {} attributes are {:?}, expected ({n}, {})",
                    snap.t,
                    snap.attributes.dim(),
                    self.attr_dim
                )));
            }
            if snap.attributes.iter().any(|v| !v.is_finite()) {
                return Err(HvgraeError::Validation(format!(
                    "snapshot {} attributes contain non-finite values",
                    snap.t
                )));
            }
        }
        Ok(())
    }
}

/// D^{-1/2} (A + I) D^{-1/2} with D the diagonal of row sums of A + I.
pub fn normalize_adjacency(adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    let (r, c) = adjacency.dim();
    if r != c {
        return Err(HvgraeError::Validation(format!(
            "adjacency must be square, got {r}x{c}"
        )));
    }
    if adjacency.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(HvgraeError::Validation(
            "adjacency entries must be exactly 0 or 1".into(),
        ));
    }
    let mut tilde = adjacency.clone();
    for i in 0..r {
        tilde[(i, i)] = 1.0;
    }
    // Self-loops guarantee every row sum >= 1.
    let deg_inv_sqrt: Vec<f64> = (0..r)
        .map(|i| tilde.row(i).sum().sqrt().recip())
        .collect();
    let mut out = tilde;
    for ((i, j), v) in out.indexed_iter_mut() {
        *v *= deg_inv_sqrt[i] * deg_inv_sqrt[j];
    }
    Ok(out)
}

/// Identity attribute fallback for unattributed datasets.
pub fn identity_attributes(n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(HvgraeError::Validation(
            "node count must be at least 1".into(),
        ));
    }
    Ok(Array2::eye(n))
}

fn parse_meta(path: &Path) -> Result<(usize, usize, usize, bool)> {
    let meta_path = path.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(|e| HvgraeError::Ingest {
        file: meta_path.display().to_string(),
        line: 0,
        msg: format!("cannot read meta file: {e}"),
    })?;
    let (mut n, mut t, mut d, mut directed) = (None, None, None, None);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| HvgraeError::Ingest {
            file: meta_path.display().to_string(),
            line: lineno + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        let value: i64 = value.trim().parse().map_err(|_| HvgraeError::Ingest {
            file: meta_path.display().to_string(),
            line: lineno + 1,
            msg: format!("invalid integer '{}'", value.trim()),
        })?;
        match key.trim() {
            "N" => n = Some(value),
            "T" => t = Some(value),
            "D" => d = Some(value),
            "directed" => directed = Some(value),
            other => {
                return Err(HvgraeError::Ingest {
                    file: meta_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("unknown meta key '{other}'"),
                })
            }
        }
    }
    let missing = |k: &str| HvgraeError::Ingest {
        file: meta_path.display().to_string(),
        line: 0,
        msg: format!("missing required key '{k}'"),
    };
    let n = n.ok_or_else(|| missing("N"))?;
    let t = t.ok_or_else(|| missing("T"))?;
    let d = d.ok_or_else(|| missing("D"))?;
    let directed = directed.ok_or_else(|| missing("directed"))?;
    if n < 1 || t < 1 || d < 0 || !(directed == 0 || directed == 1) {
        return Err(HvgraeError::Ingest {
            file: meta_path.display().to_string(),
            line: 0,
            msg: format!("invalid meta values N={n} T={t} D={d} directed={directed}"),
        });
    }
    Ok((n as usize, t as usize, d as usize, directed == 1))
}

/// Load a dataset directory (see the repository README for the layout).
///
/// Undirected datasets are symmetrized at ingestion; when D=0 the identity
/// matrix is used as node attributes for every snapshot.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DynNetwork> {
    let path = path.as_ref();
    let (n, t_max, d, directed) = parse_meta(path)?;

    let mut snapshots = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let edge_path = path.join(format!("snapshot_{t}.edges"));
        let text = fs::read_to_string(&edge_path).map_err(|e| HvgraeError::Ingest {
            file: edge_path.display().to_string(),
            line: 0,
            msg: format!("cannot read edge file (index gap?): {e}"),
        })?;
        let mut adjacency = Array2::zeros((n, n));
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<usize> {
                let s = s.ok_or_else(|| HvgraeError::Ingest {
                    file: edge_path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected 'src dst'".into(),
                })?;
                s.parse().map_err(|_| HvgraeError::Ingest {
                    file: edge_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("invalid node id '{s}'"),
                })
            };
            let src = parse(parts.next())?;
            let dst = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(HvgraeError::Ingest {
                    file: edge_path.display().to_string(),
                    line: lineno + 1,
                    msg: "trailing tokens after 'src dst'".into(),
                });
            }
            if src >= n || dst >= n {
                return Err(HvgraeError::Ingest {
                    file: edge_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("node id out of range (N={n}): {src} {dst}"),
                });
            }
            if src != dst {
                adjacency[(src, dst)] = 1.0;
                if !directed {
                    adjacency[(dst, src)] = 1.0;
                }
            }
        }

        let attr_path = path.join(format!("snapshot_{t}.attrs"));
        let attributes = if d > 0 {
            let text = fs::read_to_string(&attr_path).map_err(|e| HvgraeError::Ingest {
                file: attr_path.display().to_string(),
                line: 0,
                msg: format!("cannot read attribute file: {e}"),
            })?;
            let mut rows = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let row: Vec<f64> = line
                    .split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| HvgraeError::Ingest {
                            file: attr_path.display().to_string(),
                            line: lineno + 1,
                            msg: format!("invalid real '{}'", s.trim()),
                        })
                    })
                    .collect::<Result<_>>()?;
                if row.len() != d {
                    return Err(HvgraeError::Ingest {
                        file: attr_path.display().to_string(),
                        line: lineno + 1,
                        msg: format!("expected {d} columns, got {}", row.len()),
                    });
                }
                rows.push(row);
            }
            if rows.len() != n {
                return Err(HvgraeError::Ingest {
                    file: attr_path.display().to_string(),
                    line: 0,
                    msg: format!("expected {n} attribute rows, got {}", rows.len()),
                });
            }
            Array2::from_shape_fn((n, d), |(i, j)| rows[i][j])
        } else {
            identity_attributes(n)?
        };

        snapshots.push(Snapshot {
            t,
            adjacency,
            attributes,
        });
    }

    let net = DynNetwork {
        snapshots,
        node_count: n,
        attr_dim: if d > 0 { d } else { n },
        directed,
        attributed: d > 0,
    };
    net.validate()?;
    Ok(net)
}

/// Write a dataset directory in the ingestion format.
pub fn save_dataset(net: &DynNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path)?;
    let d = if net.attributed { net.attr_dim } else { 0 };
    fs::write(
        path.join("meta.txt"),
        format!(
            "N={}\nT={}\nD={}\ndirected={}\n",
            net.node_count,
            net.len(),
            d,
            if net.directed { 1 } else { 0 }
        ),
    )?;
    for snap in &net.snapshots {
        let mut f = fs::File::create(path.join(format!("snapshot_{}.edges", snap.t)))?;
        for (i, j) in snap.edges() {
            if !net.directed && j < i {
                continue;
            }
            writeln!(f, "{i} {j}")?;
        }
        if net.attributed {
            let mut f = fs::File::create(path.join(format!("snapshot_{}.attrs", snap.t)))?;
            for i in 0..net.node_count {
                let row: Vec<String> = snap
                    .attributes
                    .row(i)
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                writeln!(f, "{}", row.join(","))?;
            }
        }
    }
    Ok(())
}

/// Subsample a snapshot's edge set without replacement.
///
/// Retained count rounds to nearest, minimum 1 for a nonempty snapshot.
/// Undirected networks sample unordered pairs and keep symmetry.
fn subsample_snapshot(snap: &Snapshot, ratio: f64, directed: bool, rng: &mut ChaCha8Rng) -> Snapshot {
    let mut edges: Vec<(usize, usize)> = snap
        .edges()
        .into_iter()
        .filter(|&(i, j)| directed || i < j)
        .collect();
    if edges.is_empty() || ratio >= 1.0 {
        return snap.clone();
    }
    let keep = ((edges.len() as f64 * ratio).round() as usize).max(1);
    edges.shuffle(rng);
    edges.truncate(keep);
    let n = snap.adjacency.nrows();
    let mut adjacency = Array2::zeros((n, n));
    for (i, j) in edges {
        adjacency[(i, j)] = 1.0;
        if !directed {
            adjacency[(j, i)] = 1.0;
        }
    }
    Snapshot {
        t: snap.t,
        adjacency,
        attributes: snap.attributes.clone(),
    }
}

/// Split into (train, test): the last `test_len` snapshots are the test set,
/// the rest form the train set with per-snapshot edge subsampling.
pub fn split_train_test(
    net: &DynNetwork,
    test_len: usize,
    train_edge_ratio: f64,
    seed: u64,
) -> Result<(DynNetwork, DynNetwork)> {
    if test_len >= net.len() {
        return Err(HvgraeError::Validation(format!(
            "test_len {} must be smaller than T={}",
            test_len,
            net.len()
        )));
    }
    if !(train_edge_ratio > 0.0 && train_edge_ratio <= 1.0) {
        return Err(HvgraeError::Validation(format!(
            "train_edge_ratio must be in (0, 1], got {train_edge_ratio}"
        )));
    }
    let split = net.len() - test_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_snaps: Vec<Snapshot> = net.snapshots[..split]
        .iter()
        .map(|s| subsample_snapshot(s, train_edge_ratio, net.directed, &mut rng))
        .collect();
    let test_snaps: Vec<Snapshot> = net.snapshots[split..]
        .iter()
        .enumerate()
        .map(|(k, s)| Snapshot {
            t: k + 1,
            ..s.clone()
        })
        .collect();
    let mk = |snapshots: Vec<Snapshot>| DynNetwork {
        snapshots,
        node_count: net.node_count,
        attr_dim: net.attr_dim,
        directed: net.directed,
        attributed: net.attributed,
    };
    Ok((mk(train_snaps), mk(test_snaps)))
}
