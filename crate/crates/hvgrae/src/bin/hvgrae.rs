//! Command-line front end: train a model, plant labeled anomalies, stream
//! detection verdicts, evaluate AUC against labels, generate synthetic
//! networks, and export latent summaries.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hvgrae::detect::{
    detect, fit_threshold, score_snapshot, Thresholds, DEFAULT_INITIAL_QUANTILE, DEFAULT_RISK_Q,
};
use hvgrae::graph::{load_dataset, save_dataset, DynNetwork};
use hvgrae::harness::{auc, generate_synthetic, inject_anomalies, InjectionSpec, SynthSpec};
use hvgrae::model::{ModelConfig, Session};
use hvgrae::train::{train, training_scores, Checkpoint, TrainConfig};
use hvgrae::{HvgraeError, Result};

#[derive(Parser)]
#[command(
    name = "hvgrae",
    about = "Semi-supervised anomaly detection in dynamic networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plant labeled anomalous edges into selected snapshots.
    Inject {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ratio: f64,
        /// Either `LAST:K` or a comma-separated list of 1-based timestamps.
        #[arg(long)]
        snapshots: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream snapshots through a trained model; one verdict JSON per line.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a labeled dataset and report edge AUC per snapshot.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dynamic network from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-snapshot latent summaries to CSV.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flat `key=value` file: blank lines and `#` comments ignored.
fn parse_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HvgraeError::Ingest {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HvgraeError::Validation(format!("invalid value for {key}: {value:?}")))
}

/// Apply a flat config file to the model and training configs. Keys mirror
/// the config struct fields; unknown keys are errors.
fn apply_config(
    path: &Path,
    mc: &mut ModelConfig,
    tc: &mut TrainConfig,
) -> Result<()> {
    for (k, v) in parse_kv(path)? {
        match k.as_str() {
            "scales" => mc.scales = parse_field(&k, &v)?,
            "latent_dim" => mc.latent_dim = parse_field(&k, &v)?,
            "content_dim" => mc.content_dim = parse_field(&k, &v)?,
            "gcn_dim" => mc.gcn_dim = parse_field(&k, &v)?,
            "drnn_hidden" => mc.drnn_hidden = parse_field(&k, &v)?,
            "head_hidden" => mc.head_hidden = parse_field(&k, &v)?,
            "flow_layers" => mc.flow_layers = parse_field(&k, &v)?,
            "mc_train" => mc.mc_train = parse_field(&k, &v)?,
            "mc_score" => mc.mc_score = parse_field(&k, &v)?,
            "dropout" => mc.dropout = parse_field(&k, &v)?,
            "learning_rate" => tc.learning_rate = parse_field(&k, &v)?,
            "epochs" => tc.epochs = parse_field(&k, &v)?,
            "weight_decay" => tc.weight_decay = parse_field(&k, &v)?,
            "kl_delay_epochs" => tc.kl_delay_epochs = parse_field(&k, &v)?,
            "kl_ramp_epochs" => tc.kl_ramp_epochs = parse_field(&k, &v)?,
            "grad_clip" => {
                tc.grad_clip = if v == "none" {
                    None
                } else {
                    Some(parse_field(&k, &v)?)
                }
            }
            "seed" => {
                let s: u64 = parse_field(&k, &v)?;
                mc.seed = s;
                tc.seed = s;
            }
            _ => {
                return Err(HvgraeError::Validation(format!(
                    "unknown config key: {k}"
                )))
            }
        }
    }
    Ok(())
}

fn parse_snapshot_selector(sel: &str, total: usize) -> Result<Vec<usize>> {
    if let Some(k) = sel.strip_prefix("LAST:") {
        let k: usize = parse_field("snapshots", k)?;
        if k == 0 || k > total {
            return Err(HvgraeError::Validation(format!(
                "LAST:{k} out of range for T={total}"
            )));
        }
        return Ok(((total - k + 1)..=total).collect());
    }
    sel.split(',')
        .map(|s| parse_field("snapshots", s.trim()))
        .collect()
}

fn fit_thresholds_from_training(
    model: &hvgrae::model::Hvgrae,
    net: &DynNetwork,
) -> Result<Thresholds> {
    let (edge_scores, node_scores) = training_scores(model, net)?;
    let edge_fit = fit_threshold(&edge_scores, DEFAULT_RISK_Q, DEFAULT_INITIAL_QUANTILE)?;
    let alpha_x = if node_scores.is_empty() {
        None
    } else {
        Some(fit_threshold(&node_scores, DEFAULT_RISK_Q, DEFAULT_INITIAL_QUANTILE)?.level)
    };
    Ok(Thresholds {
        alpha_a: edge_fit.level,
        alpha_x,
        evt: hvgrae::detect::EvtParams {
            initial_quantile: DEFAULT_INITIAL_QUANTILE,
            risk_q: DEFAULT_RISK_Q,
            gpd_shape: edge_fit.gpd_shape,
            gpd_scale: edge_fit.gpd_scale,
        },
    })
}

fn load_labels(dir: &Path, t: usize) -> Result<Option<BTreeSet<(usize, usize)>>> {
    let path = dir.join(format!("snapshot_{t}.labels"));
    if !path.exists() {
        return Ok(None);
    }
    let mut set = BTreeSet::new();
    for (k, v) in fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once(char::is_whitespace))
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
    {
        set.insert((
            parse_field::<usize>("label src", &k)?,
            parse_field::<usize>("label dst", &v)?,
        ));
    }
    Ok(Some(set))
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let net = load_dataset(data)?;
    let mut mc = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(cfg) = config {
        apply_config(cfg, &mut mc, &mut tc)?;
    }
    if let Some(s) = seed {
        mc.seed = s;
        tc.seed = s;
    }
    let (mut ckpt, log) = train(&mc, &tc, &net)?;
    let model = ckpt.build_model()?;
    ckpt.thresholds = Some(fit_thresholds_from_training(&model, &net)?);
    ckpt.save(out)?;
    let log_path = out.with_extension("log.csv");
    log.write_csv(BufWriter::new(fs::File::create(&log_path)?))?;
    println!(
        "trained {} epochs on {} snapshots; checkpoint {} log {}",
        log.rows.len(),
        net.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_inject(data: &Path, ratio: f64, snapshots: &str, seed: u64, out: &Path) -> Result<()> {
    let net = load_dataset(data)?;
    let targets = parse_snapshot_selector(snapshots, net.len())?;
    let spec = InjectionSpec {
        ratio,
        seed,
        target_snapshots: targets,
    };
    let labeled = inject_anomalies(&net, &spec)?;
    let injected_net = DynNetwork {
        snapshots: labeled.iter().map(|l| l.snapshot.clone()).collect(),
        ..net.clone()
    };
    save_dataset(&injected_net, out)?;
    let mut total = 0;
    for l in &labeled {
        if l.injected.is_empty() {
            continue;
        }
        let mut w = BufWriter::new(fs::File::create(
            out.join(format!("snapshot_{}.labels", l.snapshot.t)),
        )?);
        for &(i, j) in &l.injected {
            writeln!(w, "{i} {j}")?;
            total += 1;
        }
    }
    println!("injected {total} labeled edge cells into {}", out.display());
    Ok(())
}

fn cmd_detect(ckpt_path: &Path, data: &Path, report: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let thresholds = ckpt.thresholds.clone().ok_or_else(|| {
        HvgraeError::Validation(
            "checkpoint has no fitted thresholds; re-train with this CLI".into(),
        )
    })?;
    let model = ckpt.build_model()?;
    let net = load_dataset(data)?;
    if net.node_count != model.node_count {
        return Err(HvgraeError::Validation(format!(
            "dataset has {} nodes but the checkpoint was trained on {}",
            net.node_count, model.node_count
        )));
    }
    let mut sess = Session::new(&model, false, ckpt.seed ^ 0xdec0de);
    let mut w = BufWriter::new(fs::File::create(report)?);
    for snap in &net.snapshots {
        let rep = score_snapshot(&mut sess, snap)?;
        let verdict = detect(&rep, &thresholds);
        serde_json::to_writer(&mut w, &verdict)?;
        writeln!(w)?;
    }
    println!(
        "wrote {} verdicts to {}",
        net.len(),
        report.display()
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, data: &Path, labels: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.build_model()?;
    let net = load_dataset(data)?;
    let mut sess = Session::new(&model, false, ckpt.seed ^ 0xe7a1);
    let mut w = BufWriter::new(fs::File::create(out)?);
    writeln!(w, "t,edges,injected,auc")?;
    let mut pooled = Vec::new();
    let mut labeled_snaps = 0;
    for snap in &net.snapshots {
        let rep = score_snapshot(&mut sess, snap)?;
        let Some(label_set) = load_labels(labels, snap.t)? else {
            continue;
        };
        labeled_snaps += 1;
        let scored: Vec<(f64, bool)> = rep
            .edge_scores
            .iter()
            .map(|&(i, j, lp)| (-lp, label_set.contains(&(i, j))))
            .collect();
        let snap_auc = auc(&scored)?;
        writeln!(
            w,
            "{},{},{},{}",
            snap.t,
            scored.len(),
            scored.iter().filter(|(_, l)| *l).count(),
            snap_auc
        )?;
        pooled.extend(scored);
    }
    if labeled_snaps == 0 {
        return Err(HvgraeError::Validation(format!(
            "no snapshot_<t>.labels files found in {}",
            labels.display()
        )));
    }
    let overall = auc(&pooled)?;
    writeln!(
        w,
        "overall,{},{},{overall}",
        pooled.len(),
        pooled.iter().filter(|(_, l)| *l).count()
    )?;
    println!("overall edge AUC {overall:.4} over {labeled_snaps} labeled snapshots");
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let mut spec = SynthSpec {
        n: 60,
        t: 30,
        communities: 2,
        intra_p: 0.25,
        inter_p: 0.02,
        drift_rate: 0.02,
        seed: 0,
    };
    for (k, v) in parse_kv(spec_path)? {
        match k.as_str() {
            "n" => spec.n = parse_field(&k, &v)?,
            "t" => spec.t = parse_field(&k, &v)?,
            "communities" => spec.communities = parse_field(&k, &v)?,
            "intra_p" => spec.intra_p = parse_field(&k, &v)?,
            "inter_p" => spec.inter_p = parse_field(&k, &v)?,
            "drift_rate" => spec.drift_rate = parse_field(&k, &v)?,
            "seed" => spec.seed = parse_field(&k, &v)?,
            _ => {
                return Err(HvgraeError::Validation(format!(
                    "unknown synth spec key: {k}"
                )))
            }
        }
    }
    let net = generate_synthetic(&spec)?;
    save_dataset(&net, out)?;
    println!(
        "generated N={} T={} dynamic network at {}",
        spec.n,
        spec.t,
        out.display()
    );
    Ok(())
}

fn cmd_export_latents(ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.build_model()?;
    let net = load_dataset(data)?;
    let mut sess = Session::new(&model, false, ckpt.seed ^ 0x1a7e);
    let mut w = BufWriter::new(fs::File::create(out)?);
    writeln!(w, "t,node,scale,dim,mu,sigma_sq,z")?;
    for snap in &net.snapshots {
        let step = sess.forward(snap, model.config.mc_score, None)?;
        for (scale, ((mu, var), z)) in step.merged.iter().zip(&step.z_sample).enumerate() {
            for node in 0..model.node_count {
                for dim in 0..model.config.latent_dim {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        snap.t,
                        node,
                        scale,
                        dim,
                        mu[(node, dim)],
                        var[(node, dim)],
                        z[(node, dim)]
                    )?;
                }
            }
        }
        sess.commit(step.commit)?;
    }
    println!("exported latents for {} snapshots to {}", net.len(), out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            data,
            config,
            out,
            seed,
        } => cmd_train(&data, config.as_deref(), &out, seed),
        Command::Inject {
            data,
            ratio,
            snapshots,
            seed,
            out,
        } => cmd_inject(&data, ratio, &snapshots, seed, &out),
        Command::Detect { ckpt, data, report } => cmd_detect(&ckpt, &data, &report),
        Command::Eval {
            ckpt,
            data,
            labels,
            out,
        } => cmd_eval(&ckpt, &data, &labels, &out),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::ExportLatents { ckpt, data, out } => cmd_export_latents(&ckpt, &data, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
