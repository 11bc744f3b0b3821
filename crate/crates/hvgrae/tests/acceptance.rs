//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n> <name>: PASS|FAIL` line. Run with
//! `cargo test --test acceptance -- --nocapture --test-threads=1`.

use std::collections::VecDeque;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvgrae::graph::{identity_attributes, split_train_test, DynNetwork, Snapshot};
use hvgrae::harness::{
    generate_synthetic, run_experiment_sequential, ExperimentConfig, ResultsTable, SynthSpec,
};
use hvgrae::latent::{
    chain_forward, gauss_log_density, kl_estimate, GaussianParams, PlanarFlow,
};
use hvgrae::model::{gaussian_noise, Hvgrae, ModelConfig, Session};
use hvgrae::params::ParamSet;
use hvgrae::tape::Tape;
use hvgrae::train::{train, TrainConfig, TrainLog};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rand_net(rng: &mut ChaCha8Rng, n: usize, d: usize, t: usize, p: f64) -> DynNetwork {
    let snapshots = (1..=t)
        .map(|ti| {
            let mut a = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen::<f64>() < p {
                        a[(i, j)] = 1.0;
                        a[(j, i)] = 1.0;
                    }
                }
            }
            Snapshot {
                t: ti,
                adjacency: a,
                attributes: Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)),
            }
        })
        .collect();
    DynNetwork {
        snapshots,
        node_count: n,
        attr_dim: d,
        directed: false,
        attributed: true,
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        scales: 2,
        latent_dim: 3,
        content_dim: 3,
        gcn_dim: 3,
        drnn_hidden: 3,
        head_hidden: 3,
        flow_layers: 1,
        mc_train: 1,
        mc_score: 1,
        dropout: 0.0,
        seed: 7,
    }
}

/// Fixed per-(snapshot, sample, scale) noise so the loss is a deterministic
/// function of the parameters.
fn fixed_noise(cfg: &ModelConfig, n: usize, t: usize, seed: u64) -> Vec<Vec<Vec<Array2<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|_| {
            (0..cfg.mc_train)
                .map(|_| {
                    (0..cfg.scales)
                        .map(|_| gaussian_noise(&mut rng, n, cfg.latent_dim))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn sequence_loss(model: &Hvgrae, net: &DynNetwork, noise: &[Vec<Vec<Array2<f64>>>]) -> f64 {
    let mut sess = Session::new(model, true, 0);
    let mut total = 0.0;
    for (snap, step_noise) in net.snapshots.iter().zip(noise) {
        let out = sess
            .forward(snap, model.config.mc_train, Some(step_noise))
            .unwrap();
        total -= sess.tape.scalar_value(out.elbo);
        sess.commit(out.commit).unwrap();
    }
    total / net.len() as f64
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = rand_net(&mut rng, 4, 2, 3, 0.5);
    let mut model = Hvgrae::new(cfg.clone(), 4, 2, true).unwrap();
    // Nudge every parameter off the ReLU kinks that zero-initialized
    // biases and cold-start states would otherwise sit on.
    for p in model.params.values_mut() {
        for x in p.iter_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let noise = fixed_noise(&cfg, 4, net.len(), 3);

    // Analytic gradients of the mean sequence loss.
    let mut sess = Session::new(&model, true, 0);
    let mut acc = None;
    for (snap, step_noise) in net.snapshots.iter().zip(&noise) {
        let out = sess.forward(snap, cfg.mc_train, Some(step_noise)).unwrap();
        let term = sess.tape.neg(out.elbo);
        acc = Some(match acc {
            None => term,
            Some(a) => sess.tape.add(a, term),
        });
        sess.commit(out.commit).unwrap();
    }
    let loss = sess.tape.scale(acc.unwrap(), 1.0 / net.len() as f64);
    let grads = sess.tape.backward(loss);
    let analytic: Vec<Array2<f64>> = model
        .params
        .values()
        .iter()
        .zip(sess.param_vars())
        .map(|(v, &var)| grads.get(var, v.dim()))
        .collect();
    drop(sess);

    let h = 1e-5;
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let param_count = model.params.values().len();
    for pi in 0..param_count {
        let (rows, cols) = model.params.values()[pi].dim();
        let entries = rows * cols;
        let stride = (entries / 4).max(1);
        for e in (0..entries).step_by(stride) {
            let at = (e / cols, e % cols);
            let orig = model.params.values()[pi][at];
            model.params.values_mut()[pi][at] = orig + h;
            let up = sequence_loss(&model, &net, &noise);
            model.params.values_mut()[pi][at] = orig - h;
            let down = sequence_loss(&model, &net, &noise);
            model.params.values_mut()[pi][at] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pi][at];
            // Relative error with an absolute guard so finite-difference
            // round-off on near-zero gradients does not dominate.
            let denom = an.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max((an - fd).abs() / denom);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        "gradient suite",
        checked > 300 && max_rel < 1e-4 && secs < 60.0,
        &format!("{checked} entries, max rel err {max_rel:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_2_flow_log_det() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_err = 0.0f64;
    for chain_idx in 0..200 {
        let dim = rng.gen_range(2..=4);
        let layers = rng.gen_range(1..=3);
        let mut ps = ParamSet::default();
        let flows: Vec<PlanarFlow> = (0..layers)
            .map(|l| PlanarFlow::init(&mut ps, &format!("f{chain_idx}.{l}"), dim, &mut rng))
            .collect();
        // Scale parameters up so the chains are far from the identity map.
        for p in ps.values_mut() {
            for x in p.iter_mut() {
                *x += rng.gen_range(-0.8..0.8);
            }
        }
        let z0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let run = |z: &[f64], ps: &ParamSet| -> (Vec<f64>, f64) {
            let tape = Tape::new();
            let pvars = ps.bind(&tape);
            let chain: Vec<_> = flows.iter().map(|f| f.bind(&pvars)).collect();
            let zv = tape.leaf(Array2::from_shape_vec((1, dim), z.to_vec()).unwrap());
            let (out, log_det) = chain_forward(&tape, &chain, zv).unwrap();
            (
                tape.value(out).iter().copied().collect(),
                tape.scalar_value(log_det),
            )
        };
        let (_, analytic) = run(&z0, &ps);
        // Numeric Jacobian via central differences.
        let h = 1e-6;
        let mut jac = Array2::<f64>::zeros((dim, dim));
        for k in 0..dim {
            let mut zp = z0.clone();
            zp[k] += h;
            let (up, _) = run(&zp, &ps);
            zp[k] = z0[k] - h;
            let (down, _) = run(&zp, &ps);
            for r in 0..dim {
                jac[(r, k)] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        let det = match dim {
            2 => jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)],
            3 => {
                jac[(0, 0)] * (jac[(1, 1)] * jac[(2, 2)] - jac[(1, 2)] * jac[(2, 1)])
                    - jac[(0, 1)] * (jac[(1, 0)] * jac[(2, 2)] - jac[(1, 2)] * jac[(2, 0)])
                    + jac[(0, 2)] * (jac[(1, 0)] * jac[(2, 1)] - jac[(1, 1)] * jac[(2, 0)])
            }
            _ => {
                // 4x4 via cofactor expansion on the first row.
                let minor = |skip_r: usize, skip_c: usize| {
                    let mut m = [[0.0; 3]; 3];
                    let (mut ri, mut ci);
                    ri = 0;
                    for r in 0..4 {
                        if r == skip_r {
                            continue;
                        }
                        ci = 0;
                        for c in 0..4 {
                            if c == skip_c {
                                continue;
                            }
                            m[ri][ci] = jac[(r, c)];
                            ci += 1;
                        }
                        ri += 1;
                    }
                    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
                };
                jac[(0, 0)] * minor(0, 0) - jac[(0, 1)] * minor(0, 1)
                    + jac[(0, 2)] * minor(0, 2)
                    - jac[(0, 3)] * minor(0, 3)
            }
        };
        assert!(det > 0.0, "flow chain not orientation-preserving: det {det}");
        max_err = max_err.max((det.ln() - analytic).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        2,
        "flow log-det vs numeric Jacobian",
        max_err < 1e-6 && secs < 30.0,
        &format!("200 chains, max abs err {max_err:.2e}, {secs:.1}s"),
    );
}

#[test]
fn criterion_3_kl_mc_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 4;
    let samples = 10_000;
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let mu_q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var_q: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.2..2.0)).collect();
        let mu_p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var_p: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.2..2.0)).collect();
        // Closed-form diagonal Gaussian KL(q || p).
        let exact: f64 = (0..dim)
            .map(|k| {
                0.5 * ((var_p[k] / var_q[k]).ln() + var_q[k] / var_p[k]
                    + (mu_q[k] - mu_p[k]).powi(2) / var_p[k]
                    - 1.0)
            })
            .sum();

        let mut vals = Vec::with_capacity(samples);
        for _ in 0..samples {
            let tape = Tape::new();
            let q = GaussianParams {
                mu: tape.leaf(Array2::from_shape_vec((1, dim), mu_q.clone()).unwrap()),
                sigma_sq: tape.leaf(Array2::from_shape_vec((1, dim), var_q.clone()).unwrap()),
            };
            let p = GaussianParams {
                mu: tape.leaf(Array2::from_shape_vec((1, dim), mu_p.clone()).unwrap()),
                sigma_sq: tape.leaf(Array2::from_shape_vec((1, dim), var_p.clone()).unwrap()),
            };
            let eps = gaussian_noise(&mut rng, 1, dim);
            let z = Array2::from_shape_fn((1, dim), |(_, k)| {
                mu_q[k] + var_q[k].sqrt() * eps[(0, k)]
            });
            let zv = tape.leaf(z);
            let est = kl_estimate(&tape, (&q, &[]), (&p, &[]), zv).unwrap();
            vals.push(tape.scalar_value(tape.sum_all(est)));
            let _ = gauss_log_density; // closed form checked above
        }
        let mean = vals.iter().sum::<f64>() / samples as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64)
            .sqrt();
        let se = sd / (samples as f64).sqrt();
        worst_z = worst_z.max((mean - exact).abs() / se);
    }
    report(
        3,
        "KL Monte-Carlo consistency",
        worst_z < 3.0,
        &format!("20 pairs x 10k samples, worst |z| {worst_z:.2} SE"),
    );
}

#[test]
fn criterion_4_causality_and_permutation() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let n = 5;
    let net = rand_net(&mut rng, n, 2, 4, 0.5);
    let model = Hvgrae::new(cfg.clone(), n, 2, true).unwrap();

    // Causality: outputs up to t must be bit-identical when only snapshots
    // after t change.
    let run_prefix = |net: &DynNetwork, upto: usize| -> Vec<Array2<f64>> {
        let mut sess = Session::new(&model, false, 5);
        let mut outs = Vec::new();
        for snap in &net.snapshots[..upto] {
            let out = sess.forward(snap, 1, None).unwrap();
            outs.push(out.edge_logp.clone());
            sess.commit(out.commit).unwrap();
        }
        outs
    };
    let mut perturbed = net.clone();
    perturbed.snapshots[3].adjacency.fill(0.0);
    let a = run_prefix(&net, 3);
    let b = run_prefix(&perturbed, 3);
    let causal = a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));

    // Permutation equivariance: relabeling nodes (and permuting the
    // injected noise rows the same way) leaves the ELBO unchanged.
    let perm = [3usize, 1, 4, 0, 2];
    let noise = fixed_noise(&cfg, n, net.len(), 9);
    let permuted_noise: Vec<Vec<Vec<Array2<f64>>>> = noise
        .iter()
        .map(|step| {
            step.iter()
                .map(|sample| {
                    sample
                        .iter()
                        .map(|m| {
                            let mut p = m.clone();
                            for (new_row, &old_row) in perm.iter().enumerate() {
                                for c in 0..m.ncols() {
                                    p[(new_row, c)] = m[(old_row, c)];
                                }
                            }
                            p
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut permuted = net.clone();
    for snap in permuted.snapshots.iter_mut() {
        let mut a2 = Array2::<f64>::zeros((n, n));
        let mut x2 = Array2::<f64>::zeros(snap.attributes.dim());
        for (ni, &oi) in perm.iter().enumerate() {
            for (nj, &oj) in perm.iter().enumerate() {
                a2[(ni, nj)] = snap.adjacency[(oi, oj)];
            }
            for c in 0..snap.attributes.ncols() {
                x2[(ni, c)] = snap.attributes[(oi, c)];
            }
        }
        snap.adjacency = a2;
        snap.attributes = x2;
    }
    let elbo_of = |net: &DynNetwork, noise: &[Vec<Vec<Array2<f64>>>]| -> f64 {
        let mut sess = Session::new(&model, false, 0);
        let mut total = 0.0;
        for (snap, step_noise) in net.snapshots.iter().zip(noise) {
            let out = sess.forward(snap, 1, Some(step_noise)).unwrap();
            total += sess.tape.scalar_value(out.elbo);
            sess.commit(out.commit).unwrap();
        }
        total
    };
    let e1 = elbo_of(&net, &noise);
    let e2 = elbo_of(&permuted, &permuted_noise);
    let perm_err = (e1 - e2).abs();
    report(
        4,
        "causality + permutation equivariance",
        causal && perm_err < 1e-8,
        &format!("causal prefix bit-identical: {causal}, |dELBO| {perm_err:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Shared synthetic-benchmark state for criteria 5-8.

struct Benchmark {
    /// Timed 3-seed, 5%-injection run for the end-to-end criterion.
    small: ResultsTable,
    small_secs: f64,
    /// 5 seeds x {1%, 5%, 10%} for the two-scale model.
    m2: ResultsTable,
    /// 5 seeds at 5% for the single-scale model.
    m1: ResultsTable,
    log100: TrainLog,
}

fn bench_model_config(scales: usize) -> ModelConfig {
    ModelConfig {
        scales,
        latent_dim: 8,
        content_dim: 32,
        gcn_dim: 32,
        drnn_hidden: 32,
        head_hidden: 16,
        flow_layers: 2,
        mc_train: 1,
        mc_score: 8,
        dropout: 0.2,
        seed: 0,
    }
}

fn bench_train_config() -> TrainConfig {
    // Reconstruction-only warm-up, then ramp the divergence weight to 1 and
    // stop at the full objective; see the training-module docs.
    TrainConfig {
        epochs: 1200,
        kl_delay_epochs: 800,
        kl_ramp_epochs: 400,
        ..TrainConfig::default()
    }
}

fn synthetic_net() -> DynNetwork {
    generate_synthetic(&SynthSpec {
        n: 60,
        t: 30,
        communities: 2,
        intra_p: 0.25,
        inter_p: 0.02,
        drift_rate: 0.02,
        seed: 0,
    })
    .unwrap()
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let net = synthetic_net();
        let base = ExperimentConfig {
            model: bench_model_config(2),
            train: bench_train_config(),
            ratios: vec![0.05],
            seeds: vec![0, 1, 2],
            test_len: 10,
            train_edge_ratio: 0.5,
        };
        let t0 = Instant::now();
        let small = run_experiment_sequential(&net, &base).unwrap();
        let small_secs = t0.elapsed().as_secs_f64();
        println!("  [bench] 3-seed 5% run: {small_secs:.0}s, rows {:?}", small.rows);

        let m2 = run_experiment_sequential(
            &net,
            &ExperimentConfig {
                ratios: vec![0.01, 0.05, 0.10],
                seeds: vec![0, 1, 2, 3, 4],
                ..base.clone()
            },
        )
        .unwrap();
        println!("  [bench] M=2 means {:?}", m2.means);
        let m1 = run_experiment_sequential(
            &net,
            &ExperimentConfig {
                model: bench_model_config(1),
                ratios: vec![0.05],
                seeds: vec![0, 1, 2, 3, 4],
                ..base.clone()
            },
        )
        .unwrap();
        println!("  [bench] M=1 means {:?}", m1.means);

        let (train_net, _) = split_train_test(&net, 10, 0.5, 0).unwrap();
        let (_, log100) = train(
            &bench_model_config(2),
            &TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            &train_net,
        )
        .unwrap();
        Benchmark {
            small,
            small_secs,
            m2,
            m1,
            log100,
        }
    })
}

fn mean_for(table: &ResultsTable, ratio: f64) -> f64 {
    table
        .means
        .iter()
        .find(|(r, _)| (*r - ratio).abs() < 1e-12)
        .unwrap()
        .1
}

#[test]
fn criterion_5_synthetic_end_to_end() {
    let bench = benchmark();
    let mean = mean_for(&bench.small, 0.05);
    report(
        5,
        "synthetic end-to-end AUC",
        mean >= 0.80 && bench.small_secs < 600.0,
        &format!(
            "mean AUC {mean:.4} over 3 seeds (gate 0.80; the Bayes-optimal oracle for this \
             injection model measures ~0.77, see README), wall {:.0}s",
            bench.small_secs
        ),
    );
}

#[test]
fn criterion_6_trend_reproduction() {
    let bench = benchmark();
    let a1 = mean_for(&bench.m2, 0.01);
    let a10 = mean_for(&bench.m2, 0.10);
    report(
        6,
        "injection-ratio trend",
        a1 >= a10 - 0.02,
        &format!("mean AUC@1% {a1:.4} vs AUC@10% {a10:.4} over 5 seeds"),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let bench = benchmark();
    let m2 = mean_for(&bench.m2, 0.05);
    let m1 = mean_for(&bench.m1, 0.05);
    report(
        7,
        "two-scale vs single-scale ordering",
        m2 >= m1,
        &format!("M=2 mean AUC {m2:.4}, M=1 mean AUC {m1:.4} over 5 seeds"),
    );
}

#[test]
fn criterion_8_training_sanity() {
    let bench = benchmark();
    let log = &bench.log100;
    let finite = log
        .rows
        .iter()
        .all(|r| r.elbo.is_finite() && r.recon_a.is_finite() && r.kl.iter().all(|k| k.is_finite()));
    let first: f64 = log.rows[..10].iter().map(|r| r.elbo).sum::<f64>() / 10.0;
    let last: f64 = log.rows[log.rows.len() - 10..]
        .iter()
        .map(|r| r.elbo)
        .sum::<f64>()
        / 10.0;
    report(
        8,
        "training sanity",
        log.rows.len() == 100 && finite && last > first,
        &format!(
            "100 epochs, finite {finite}, mean ELBO first-10 {first:.1} vs last-10 {last:.1}"
        ),
    );
}

#[test]
fn criterion_9_pipeline_smoke() {
    let bin = env!("CARGO_BIN_EXE_hvgrae");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(
        p("spec.txt"),
        "n = 20\nt = 8\ncommunities = 2\nintra_p = 0.4\ninter_p = 0.05\ndrift_rate = 0.02\nseed = 5\n",
    )
    .unwrap();
    std::fs::write(
        p("cfg.txt"),
        "scales = 2\nlatent_dim = 4\ncontent_dim = 8\ngcn_dim = 8\ndrnn_hidden = 8\n\
         head_hidden = 6\nflow_layers = 1\nmc_train = 1\nmc_score = 2\ndropout = 0.1\n\
         epochs = 3\nseed = 11\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "hvgrae {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let s = |pb: std::path::PathBuf| pb.to_str().unwrap().to_string();
    run(&["synth", "--spec", &s(p("spec.txt")), "--out", &s(p("data"))]);
    run(&[
        "train",
        "--data",
        &s(p("data")),
        "--config",
        &s(p("cfg.txt")),
        "--out",
        &s(p("model.json")),
    ]);
    run(&[
        "inject",
        "--data",
        &s(p("data")),
        "--ratio",
        "0.1",
        "--snapshots",
        "LAST:3",
        "--seed",
        "7",
        "--out",
        &s(p("injected")),
    ]);
    run(&[
        "detect",
        "--ckpt",
        &s(p("model.json")),
        "--data",
        &s(p("injected")),
        "--report",
        &s(p("verdicts.ndjson")),
    ]);
    run(&[
        "eval",
        "--ckpt",
        &s(p("model.json")),
        "--data",
        &s(p("injected")),
        "--labels",
        &s(p("injected")),
        "--out",
        &s(p("results.csv")),
    ]);

    // Verdict schema: all coefficient fields present, gamma in [0,1], eta >= 0.
    let verdicts = std::fs::read_to_string(p("verdicts.ndjson")).unwrap();
    let mut count = 0;
    let mut schema_ok = true;
    for line in verdicts.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        count += 1;
        for key in ["t", "alpha_A", "flagged_edges", "flagged_nodes"] {
            schema_ok &= v.get(key).is_some();
        }
        for key in ["gamma_e", "gamma_n"] {
            let g = v[key].as_f64();
            schema_ok &= matches!(g, Some(x) if (0.0..=1.0).contains(&x));
        }
        for key in ["eta_e", "eta_n"] {
            let e = v[key].as_f64();
            schema_ok &= matches!(e, Some(x) if x >= 0.0);
        }
    }
    let results = std::fs::read_to_string(p("results.csv")).unwrap();
    let csv_ok = results.starts_with("t,edges,injected,auc") && results.lines().count() >= 2;
    report(
        9,
        "CLI pipeline smoke",
        count == 8 && schema_ok && csv_ok,
        &format!("{count} verdicts, schema ok {schema_ok}, results CSV ok {csv_ok}"),
    );
}

// Keep unused-import lints honest for items used only in some criteria.
#[allow(dead_code)]
fn _typecheck(_: VecDeque<()>, _: &ParamSet) {}
#[allow(dead_code)]
fn _attrs(_: fn(usize) -> hvgrae::Result<Array2<f64>>) {}
#[allow(unused)]
use identity_attributes as _identity_attributes;
