//! Command-line driver: `run` executes the full training loop, `eval`
//! re-evaluates a checkpoint, `plot` renders learning curves from metrics
//! streams.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lss_core::checkpoint;
use lss_core::config::{load_config, ConfigError, RunConfig};
use lss_core::metrics::{read_metrics, MetricsRecord, MetricsWriter, PlannerStats};
use lss_core::orchestrator::{
    bundle_restore, bundle_skeleton, bundle_to_map, collect_offline, encode_trajectory,
    evaluate, run_round, train_offline, Dataset, EvalSummary,
};

#[derive(Parser)]
#[command(name = "lss", about = "Safe-set constrained latent-space planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run offline training plus online rounds, writing checkpoints and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint over fresh episodes.
    Eval {
        /// A run directory or a specific checkpoint directory inside one.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate metrics streams into a learning-curve CSV and SVG chart.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// One metrics.jsonl per seed.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

/// Top-level description of a run directory; enough, together with the files
/// it references, to reproduce or resume the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    config: RunConfig,
    seed: u64,
    code_version: String,
    /// Relative paths of written checkpoints, offline phase first.
    checkpoints: Vec<String>,
    created_unix: u64,
    /// Rounds whose data, training, and checkpoint are all on disk.
    completed_rounds: usize,
    done: bool,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => cmd_eval(&checkpoint, episodes, seed),
        Command::Plot { out, metrics } => cmd_plot(&metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(manifest).map_err(runtime)?;
    json.push(b'\n');
    std::fs::write(out.join("run_manifest.json"), json)?;
    Ok(())
}

fn read_manifest(out: &Path) -> Result<RunManifest, CliError> {
    let bytes = std::fs::read(out.join("run_manifest.json"))?;
    serde_json::from_slice(&bytes).map_err(runtime)
}

/// Wall-clock timings go to a sidecar so the primary metrics stream stays
/// byte-identical across replays.
fn append_timing(out: &Path, label: &str, secs: f64) {
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("timings.jsonl"))
    {
        use std::io::Write;
        let _ = writeln!(f, "{{\"label\":\"{label}\",\"wall_secs\":{secs:.3}}}");
    }
}

fn save_round_checkpoint(
    out: &Path,
    round: usize,
    bundle: &lss_core::ModelBundle,
) -> Result<String, CliError> {
    let rel = format!("checkpoints/round_{round:02}");
    checkpoint::save(&out.join(&rel), "lss", &bundle_to_map(bundle)).map_err(runtime)?;
    Ok(rel)
}

fn save_dataset(out: &Path, dataset: &Dataset) -> Result<(), CliError> {
    let tmp = out.join("dataset.json.tmp");
    let file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    serde_json::to_writer(file, dataset).map_err(runtime)?;
    std::fs::rename(tmp, out.join("dataset.json"))?;
    Ok(())
}

fn load_dataset(out: &Path) -> Result<Dataset, CliError> {
    let file = std::io::BufReader::new(std::fs::File::open(out.join("dataset.json"))?);
    serde_json::from_reader(file).map_err(runtime)
}

fn cmd_run(config_path: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    std::fs::create_dir_all(out)?;

    // Resume when a manifest for the same config+seed is already present.
    let resume = match read_manifest(out) {
        Ok(m) if m.config == cfg && m.seed == seed && !m.done => Some(m),
        Ok(m) if m.config == cfg && m.seed == seed && m.done => {
            eprintln!("run already complete: {}", out.display());
            return Ok(());
        }
        Ok(_) => {
            return Err(CliError::Validation(format!(
                "output directory {} holds a different run; refusing to mix",
                out.display()
            )))
        }
        Err(_) => None,
    };

    let snapshot = toml::to_string_pretty(&cfg).map_err(runtime)?;
    std::fs::write(out.join("config.toml"), snapshot)?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.jsonl")).map_err(runtime)?;

    let (mut manifest, mut dataset, mut bundle, mut encoded) = match resume {
        Some(manifest) => {
            eprintln!(
                "resuming after {} completed rounds",
                manifest.completed_rounds
            );
            let dataset = load_dataset(out)?;
            let mut bundle = bundle_skeleton(&cfg);
            let last = manifest
                .checkpoints
                .last()
                .ok_or_else(|| CliError::Runtime("manifest lists no checkpoints".into()))?;
            let map = checkpoint::load(&out.join(last)).map_err(runtime)?;
            let missing = bundle_restore(&mut bundle, &map);
            if !missing.is_empty() {
                return Err(CliError::Runtime(format!(
                    "incomplete checkpoint, missing parameters: {missing:?}"
                )));
            }
            let encoded = dataset
                .trajectories
                .iter()
                .map(|t| encode_trajectory(&bundle.encoder, t))
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime)?;
            (manifest, dataset, bundle, encoded)
        }
        None => {
            let t0 = Instant::now();
            eprintln!("collecting offline dataset");
            let dataset = collect_offline(&cfg, seed).map_err(runtime)?;
            for traj in &dataset.trajectories {
                metrics
                    .append(&MetricsRecord {
                        phase: "offline".into(),
                        round: 0,
                        trajectory_id: traj.id,
                        seed,
                        total_reward: traj.transitions.iter().map(|t| t.reward).sum(),
                        success: traj.success,
                        violation: traj.violation,
                        steps_to_goal: traj
                            .transitions
                            .iter()
                            .position(|t| t.in_goal)
                            .map(|i| i + 1)
                            .unwrap_or(cfg.env.horizon),
                        planner: PlannerStats::default(),
                    })
                    .map_err(runtime)?;
            }
            eprintln!("training offline models");
            let (bundle, encoded) = train_offline(&dataset, &cfg, seed).map_err(runtime)?;
            append_timing(out, "offline", t0.elapsed().as_secs_f64());
            let ckpt = save_round_checkpoint(out, 0, &bundle)?;
            save_dataset(out, &dataset)?;
            let manifest = RunManifest {
                config: cfg.clone(),
                seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                checkpoints: vec![ckpt],
                created_unix: unix_now(),
                completed_rounds: 0,
                done: false,
            };
            write_manifest(out, &manifest)?;
            (manifest, dataset, bundle, encoded)
        }
    };

    for round in (manifest.completed_rounds + 1)..=cfg.n_rounds {
        let t0 = Instant::now();
        eprintln!("round {round}/{}", cfg.n_rounds);
        let records = run_round(&mut bundle, &mut dataset, &mut encoded, &cfg, round, seed)
            .map_err(runtime)?;
        for r in &records {
            metrics.append(r).map_err(runtime)?;
        }
        append_timing(out, &format!("round_{round:02}"), t0.elapsed().as_secs_f64());
        let ckpt = save_round_checkpoint(out, round, &bundle)?;
        save_dataset(out, &dataset)?;
        manifest.checkpoints.push(ckpt);
        manifest.completed_rounds = round;
        write_manifest(out, &manifest)?;
    }

    let t0 = Instant::now();
    eprintln!("final evaluation over {} episodes", cfg.eval_episodes);
    let (summary, records) = evaluate(&bundle, &cfg, cfg.eval_episodes, seed, cfg.n_rounds);
    for r in &records {
        metrics.append(r).map_err(runtime)?;
    }
    append_timing(out, "eval", t0.elapsed().as_secs_f64());
    let mut json = serde_json::to_vec_pretty(&summary).map_err(runtime)?;
    json.push(b'\n');
    std::fs::write(out.join("eval_summary.json"), json)?;
    manifest.done = true;
    write_manifest(out, &manifest)?;
    println!(
        "success_rate={:.3} violation_rate={:.3} mean_reward={:.2}",
        summary.success_rate, summary.violation_rate, summary.mean_reward
    );
    Ok(())
}

/// Resolve `--checkpoint` to (run config, checkpoint dir): either a run
/// directory (use its last checkpoint) or a checkpoint directory inside one.
fn resolve_checkpoint(path: &Path) -> Result<(RunConfig, PathBuf), CliError> {
    if path.join("run_manifest.json").exists() {
        let manifest = read_manifest(path)?;
        let last = manifest
            .checkpoints
            .last()
            .ok_or_else(|| CliError::Validation("run has no checkpoints yet".into()))?;
        return Ok((manifest.config, path.join(last)));
    }
    if path.join(checkpoint::MANIFEST_FILE).exists() {
        // checkpoints/round_XX -> run dir two levels up
        let run_dir = path
            .parent()
            .and_then(|p| p.parent())
            .ok_or_else(|| CliError::Validation("checkpoint has no parent run".into()))?;
        let manifest = read_manifest(run_dir)?;
        return Ok((manifest.config, path.to_path_buf()));
    }
    Err(CliError::Validation(format!(
        "{} is neither a run directory nor a checkpoint",
        path.display()
    )))
}

fn cmd_eval(ckpt: &Path, episodes: usize, seed: u64) -> Result<(), CliError> {
    let (cfg, ckpt_dir) = resolve_checkpoint(ckpt)?;
    let map = checkpoint::load(&ckpt_dir).map_err(runtime)?;
    let mut bundle = bundle_skeleton(&cfg);
    let missing = bundle_restore(&mut bundle, &map);
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "incomplete checkpoint, missing parameters: {missing:?}"
        )));
    }
    let (summary, records) = evaluate(&bundle, &cfg, episodes, seed, cfg.n_rounds);
    print_summary(&summary);
    // Structured copy next to the checkpoint.
    let out = ckpt_dir.join(format!("eval_seed{seed}.json"));
    #[derive(Serialize)]
    struct EvalFile {
        summary: EvalSummary,
        records: Vec<MetricsRecord>,
    }
    let mut json = serde_json::to_vec_pretty(&EvalFile { summary, records }).map_err(runtime)?;
    json.push(b'\n');
    std::fs::write(out, json)?;
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    println!(
        "episodes={} success_rate={:.3} violation_rate={:.3} mean_reward={:.2} (stderr {:.2})",
        s.n_episodes, s.success_rate, s.violation_rate, s.mean_reward, s.reward_stderr
    );
}

/// Per-seed online trajectories in collection order.
fn online_series(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let records = read_metrics(path)?;
    Ok(records
        .into_iter()
        .filter(|r| r.phase == "online")
        .collect())
}

fn running_mean(values: &[f64], window: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(window - 1);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

fn cmd_plot(metrics_paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut series: Vec<Vec<MetricsRecord>> = Vec::new();
    for p in metrics_paths {
        let s = online_series(p)?;
        if s.is_empty() {
            return Err(CliError::Validation(format!(
                "{} contains no online trajectories",
                p.display()
            )));
        }
        series.push(s);
    }
    let shortest = series.iter().map(|s| s.len()).min().unwrap();
    if series.iter().any(|s| s.len() != shortest) {
        eprintln!(
            "warning: trajectory counts differ across seeds; truncating to {shortest}"
        );
    }

    let n_seeds = series.len() as f64;
    let mut mean_reward = Vec::with_capacity(shortest);
    let mut stderr_reward = Vec::with_capacity(shortest);
    let mut success_rate = Vec::with_capacity(shortest);
    let mut violation_rate = Vec::with_capacity(shortest);
    for i in 0..shortest {
        let rewards: Vec<f64> = series.iter().map(|s| s[i].total_reward).collect();
        let m = rewards.iter().sum::<f64>() / n_seeds;
        let var = if series.len() > 1 {
            rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n_seeds - 1.0)
        } else {
            0.0
        };
        mean_reward.push(m);
        stderr_reward.push((var / n_seeds).sqrt());
        success_rate
            .push(series.iter().filter(|s| s[i].success).count() as f64 / n_seeds);
        violation_rate
            .push(series.iter().filter(|s| s[i].violation).count() as f64 / n_seeds);
    }
    let success_smooth = running_mean(&success_rate, 10);
    let violation_smooth = running_mean(&violation_rate, 10);

    let csv_path = out.with_extension("csv");
    let mut csv = String::from(
        "trajectory,mean_reward,stderr_reward,success_rate_w10,violation_rate_w10\n",
    );
    for i in 0..shortest {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            i, mean_reward[i], stderr_reward[i], success_smooth[i], violation_smooth[i]
        ));
    }
    std::fs::write(&csv_path, csv)?;

    let svg = render_svg(&mean_reward, &success_smooth, &violation_smooth);
    std::fs::write(out, svg)?;
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(())
}

/// Minimal self-contained line chart: reward on the left axis, rates on the
/// right.
fn render_svg(reward: &[f64], success: &[f64], violation: &[f64]) -> String {
    let (w, h, pad) = (720.0, 360.0, 45.0);
    let n = reward.len().max(2) as f64;
    let (rmin, rmax) = reward
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let rspan = (rmax - rmin).max(1e-9);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y_reward = |v: f64| h - pad - (h - 2.0 * pad) * (v - rmin) / rspan;
    let y_rate = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let polyline = |values: &[f64], ymap: &dyn Fn(f64) -> f64, color: &str| {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), ymap(v)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        )
    };
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{pad}\" y=\"20\" font-size=\"13\">reward (blue, left) / ",
            "success w10 (green) and violation w10 (red, right 0..1)</text>\n",
            "{r}\n{s}\n{v}\n",
            "<line x1=\"{pad}\" y1=\"{yb}\" x2=\"{xe}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        r = polyline(reward, &y_reward, "#1f77b4"),
        s = polyline(success, &y_rate, "#2ca02c"),
        v = polyline(violation, &y_rate, "#d62728"),
        yb = h - pad,
        xe = w - pad,
    )
}
