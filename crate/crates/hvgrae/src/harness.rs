//! Experiment harness: ground-truth anomaly injection, synthetic dynamic
//! network generation, ROC-AUC evaluation, and the end-to-end benchmark
//! runner used by the CLI and the acceptance suite.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvgraeError, Result};
use crate::graph::{identity_attributes, split_train_test, DynNetwork, Snapshot};
use crate::model::{Hvgrae, ModelConfig, Session};
use crate::train::{train, TrainConfig};

/// How many fake edges to plant and where.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InjectionSpec {
    /// Fraction of each target snapshot's edges to add as anomalies.
    pub ratio: f64,
    pub seed: u64,
    /// 1-based snapshot timestamps to inject into.
    pub target_snapshots: Vec<usize>,
}

impl InjectionSpec {
    pub fn validate(&self, net: &DynNetwork) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 0.5) {
            return Err(HvgraeError::Validation(format!(
                "injection ratio must be in (0, 0.5), got {}",
                self.ratio
            )));
        }
        for &t in &self.target_snapshots {
            if t == 0 || t > net.len() {
                return Err(HvgraeError::Validation(format!(
                    "target snapshot {} outside 1..={}",
                    t,
                    net.len()
                )));
            }
        }
        Ok(())
    }
}

/// A snapshot whose edge set carries ground-truth anomaly labels.
#[derive(Clone, Debug)]
pub struct LabeledSnapshot {
    pub snapshot: Snapshot,
    /// Directed edge cells that were planted; disjoint from the originals.
    pub injected: BTreeSet<(usize, usize)>,
}

/// Dynamic stochastic-block-model generator parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub t: usize,
    pub communities: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    /// Per-step probability that a node moves to another community.
    pub drift_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(HvgraeError::Validation(
                "synthetic network needs n >= 1 and t >= 1".into(),
            ));
        }
        if self.communities == 0 || self.communities > self.n {
            return Err(HvgraeError::Validation(format!(
                "communities must be in 1..={}, got {}",
                self.n, self.communities
            )));
        }
        if !(0.0 <= self.inter_p && self.inter_p < self.intra_p && self.intra_p <= 1.0)
            && !(self.intra_p == self.inter_p && (0.0..=1.0).contains(&self.intra_p))
        {
            return Err(HvgraeError::Validation(format!(
                "need 0 <= inter_p <= intra_p <= 1, got intra={} inter={}",
                self.intra_p, self.inter_p
            )));
        }
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return Err(HvgraeError::Validation(format!(
                "drift_rate must be in [0, 1], got {}",
                self.drift_rate
            )));
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

/// Plant `round(ratio * |E(t)|)` fake edges (at least one when the snapshot
/// is nonempty) into each target snapshot, sampled uniformly from the
/// non-adjacent node pairs. Every snapshot of the input is returned so the
/// result is a complete labeled sequence.
pub fn inject_anomalies(net: &DynNetwork, spec: &InjectionSpec) -> Result<Vec<LabeledSnapshot>> {
    spec.validate(net)?;
    let targets: BTreeSet<usize> = spec.target_snapshots.iter().copied().collect();
    let n = net.node_count;
    let mut out = Vec::with_capacity(net.len());
    for snap in &net.snapshots {
        if !targets.contains(&snap.t) {
            out.push(LabeledSnapshot {
                snapshot: snap.clone(),
                injected: BTreeSet::new(),
            });
            continue;
        }
        // For undirected graphs the edge unit is the unordered pair, so
        // count matrix cells in pairs on both sides of the ratio.
        let edge_count = if net.directed {
            snap.edge_count()
        } else {
            snap.edge_count() / 2
        };
        let want = if edge_count == 0 {
            0
        } else {
            ((spec.ratio * edge_count as f64).round() as usize).max(1)
        };

        // Candidate pairs: absent, no self-loops; unordered for undirected
        // graphs so both cells of the matrix stay consistent.
        let mut candidates = Vec::new();
        for i in 0..n {
            let j_start = if net.directed { 0 } else { i + 1 };
            for j in j_start..n {
                if i == j {
                    continue;
                }
                if snap.adjacency[(i, j)] == 0.0 {
                    candidates.push((i, j));
                }
            }
        }
        if candidates.len() < want {
            return Err(HvgraeError::Validation(format!(
                "snapshot {} too dense: {} absent pairs < {} requested injections",
                snap.t,
                candidates.len(),
                want
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, snap.t as u64));
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), want);
        let mut adjacency = snap.adjacency.clone();
        let mut injected = BTreeSet::new();
        for idx in picks.iter() {
            let (i, j) = candidates[idx];
            adjacency[(i, j)] = 1.0;
            injected.insert((i, j));
            if !net.directed {
                adjacency[(j, i)] = 1.0;
                injected.insert((j, i));
            }
        }
        out.push(LabeledSnapshot {
            snapshot: Snapshot {
                t: snap.t,
                adjacency,
                attributes: snap.attributes.clone(),
            },
            injected,
        });
    }
    Ok(out)
}

/// Generate a dynamic stochastic block model together with the per-step
/// community memberships (exposed for tests and diagnostics).
pub fn generate_synthetic_with_memberships(
    spec: &SynthSpec,
) -> Result<(DynNetwork, Vec<Vec<usize>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Balanced initial assignment: node k starts in community k mod C.
    let mut membership: Vec<usize> = (0..spec.n).map(|k| k % spec.communities).collect();
    let mut snapshots = Vec::with_capacity(spec.t);
    let mut histories = Vec::with_capacity(spec.t);
    for t in 1..=spec.t {
        if t > 1 && spec.communities > 1 {
            for m in membership.iter_mut() {
                if rng.gen::<f64>() < spec.drift_rate {
                    let shift = rng.gen_range(1..spec.communities);
                    *m = (*m + shift) % spec.communities;
                }
            }
        }
        let mut adjacency = Array2::<f64>::zeros((spec.n, spec.n));
        for i in 0..spec.n {
            for j in (i + 1)..spec.n {
                let p = if membership[i] == membership[j] {
                    spec.intra_p
                } else {
                    spec.inter_p
                };
                if rng.gen::<f64>() < p {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
            }
        }
        snapshots.push(Snapshot {
            t,
            adjacency,
            attributes: identity_attributes(spec.n)?,
        });
        histories.push(membership.clone());
    }
    let net = DynNetwork {
        snapshots,
        node_count: spec.n,
        attr_dim: spec.n,
        directed: false,
        attributed: false,
    };
    net.validate()?;
    Ok((net, histories))
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<DynNetwork> {
    Ok(generate_synthetic_with_memberships(spec)?.0)
}

/// Rank-based ROC AUC (Mann-Whitney statistic) with ties counted half.
/// Scores follow the convention "higher = more anomalous"; `label` marks the
/// positive (anomalous) class.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let pos = scored.iter().filter(|(_, l)| *l).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(HvgraeError::Validation(format!(
            "AUC undefined: {pos} positive / {neg} negative samples"
        )));
    }
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(HvgraeError::Numerical("non-finite score in AUC input".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).unwrap());
    // Average ranks across tie groups, then the Mann-Whitney U statistic.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        let avg_rank = ((i + 1 + j) as f64) / 2.0; // mean of ranks i+1..=j
        for &k in &order[i..j] {
            if scored[k].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One benchmark cell: a (injection ratio, seed) pair and its edge AUC.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentRow {
    pub ratio: f64,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ExperimentRow>,
    /// (ratio, mean AUC over seeds).
    pub means: Vec<(f64, f64)>,
}

impl ResultsTable {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "ratio,seed,auc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.ratio, r.seed, r.auc)?;
        }
        for (ratio, mean) in &self.means {
            writeln!(w, "{ratio},mean,{mean}")?;
        }
        Ok(())
    }
}

/// Everything run_experiment needs besides the dataset itself.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Number of trailing snapshots held out for injection and scoring.
    pub test_len: usize,
    /// Fraction of training edges kept per snapshot.
    pub train_edge_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ratios: vec![0.01, 0.05, 0.10],
            seeds: vec![0, 1, 2],
            test_len: 10,
            train_edge_ratio: 0.5,
        }
    }
}

/// Warm a scoring session on the training prefix, then score the labeled
/// test snapshots. Returns pooled (anomaly score, is_injected) pairs over
/// all existing test edges, using -log p(edge) as the anomaly score.
fn score_labeled_sequence(
    model: &Hvgrae,
    train_net: &DynNetwork,
    labeled: &[LabeledSnapshot],
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    let mut sess = Session::new(model, false, seed);
    let mc = model.config.mc_score;
    for snap in &train_net.snapshots {
        let out = sess.forward(snap, mc, None)?;
        sess.commit(out.commit)?;
    }
    let mut pooled = Vec::new();
    let offset = train_net.len();
    for (k, ls) in labeled.iter().enumerate() {
        // Session timestamps continue the training sequence.
        let snap = Snapshot {
            t: offset + k + 1,
            adjacency: ls.snapshot.adjacency.clone(),
            attributes: ls.snapshot.attributes.clone(),
        };
        let out = sess.forward(&snap, mc, None)?;
        for (i, j) in snap.edges() {
            let lp = out.edge_logp[(i, j)];
            pooled.push((-lp, ls.injected.contains(&(i, j))));
        }
        sess.commit(out.commit)?;
    }
    Ok(pooled)
}

fn run_cell(
    net: &DynNetwork,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<ExperimentRow>> {
    let (train_net, test_net) = split_train_test(net, cfg.test_len, cfg.train_edge_ratio, seed)?;
    let mut model_config = cfg.model.clone();
    model_config.seed = seed;
    let mut train_config = cfg.train.clone();
    train_config.seed = seed;
    let (ckpt, _log) = train(&model_config, &train_config, &train_net)?;
    let model = ckpt.build_model()?;

    let test_start = net.len() - cfg.test_len;
    let mut rows = Vec::new();
    for &ratio in &cfg.ratios {
        let spec = InjectionSpec {
            ratio,
            seed: mix_seed(seed, (ratio * 1e6) as u64),
            target_snapshots: (1..=cfg.test_len).collect(),
        };
        let labeled = inject_anomalies(&test_net, &spec)?;
        // Replay the training prefix at original timestamps for state warmup.
        let warm = DynNetwork {
            snapshots: train_net
                .snapshots
                .iter()
                .map(|s| Snapshot {
                    t: s.t,
                    adjacency: s.adjacency.clone(),
                    attributes: s.attributes.clone(),
                })
                .collect(),
            ..train_net.clone()
        };
        let pooled = score_labeled_sequence(&model, &warm, &labeled, seed)?;
        rows.push(ExperimentRow {
            ratio,
            seed,
            auc: auc(&pooled)?,
        });
    }
    debug_assert_eq!(test_start + cfg.test_len, net.len());
    Ok(rows)
}

/// Full benchmark: per seed, train on the subsampled prefix, then for each
/// injection ratio plant anomalies in the trailing snapshots and report the
/// edge-level AUC. Seeds run in parallel when the `parallel` feature is on.
pub fn run_experiment(net: &DynNetwork, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    if cfg.seeds.is_empty() || cfg.ratios.is_empty() {
        return Err(HvgraeError::Validation(
            "run_experiment needs at least one seed and one ratio".into(),
        ));
    }
    #[cfg(feature = "parallel")]
    let per_seed: Vec<Result<Vec<ExperimentRow>>> = {
        use rayon::prelude::*;
        cfg.seeds
            .par_iter()
            .map(|&s| run_cell(net, cfg, s))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_seed: Vec<Result<Vec<ExperimentRow>>> =
        cfg.seeds.iter().map(|&s| run_cell(net, cfg, s)).collect();
    collect_table(cfg, per_seed)
}

/// Single-threaded reference implementation of [`run_experiment`]; exists so
/// the benchmark suite can compare both paths in one build and as a fallback
/// when the `parallel` feature is disabled.
pub fn run_experiment_sequential(net: &DynNetwork, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    if cfg.seeds.is_empty() || cfg.ratios.is_empty() {
        return Err(HvgraeError::Validation(
            "run_experiment needs at least one seed and one ratio".into(),
        ));
    }
    let per_seed = cfg.seeds.iter().map(|&s| run_cell(net, cfg, s)).collect();
    collect_table(cfg, per_seed)
}

fn collect_table(
    cfg: &ExperimentConfig,
    per_seed: Vec<Result<Vec<ExperimentRow>>>,
) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for cell in per_seed {
        rows.extend(cell?);
    }
    rows.sort_by(|a, b| {
        a.ratio
            .partial_cmp(&b.ratio)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    let mut means = Vec::new();
    for &ratio in &cfg.ratios {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.ratio == ratio)
            .map(|r| r.auc)
            .collect();
        means.push((ratio, vals.iter().sum::<f64>() / vals.len() as f64));
    }
    means.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(ResultsTable { rows, means })
}
