//! The five subcommands. Each takes a validated [`RunConfig`] and writes its
//! artifacts into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;
use xlpolicy_core::learn::{
    evaluate, metrics_to_csv, train_bc, train_ppo, window_ends, Controller, EvalReport, ExpertController, MetricRow,
    ModelController,
};
use xlpolicy_core::model::Model;
use xlpolicy_core::numerics::{derive_seed, rng_from_seed, Params, Tensor};
use xlpolicy_core::sim::{gen_dataset, load_episodes, save_episodes, write_atomic, Episode};
use xlpolicy_core::xl::{Window, XlConfig, XlEncoder, XlMemory};
use xlpolicy_core::Error;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::svg::{line_plot, Series};

pub const DATASET_FILE: &str = "episodes.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PLOT_FILE: &str = "losses.svg";
pub const EVAL_FILE: &str = "eval.json";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_HEADER: &str = "mode,seq_len,mean_s,p95_s";

/// Rows averaged at each end of a loss curve when summarising a run.
pub const TREND_WINDOW: usize = 20;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub path: PathBuf,
    pub episodes: usize,
    pub mean_length: f64,
}

pub fn gen_data(cfg: &RunConfig, n: usize, out_dir: &Path) -> CliResult<GenSummary> {
    if n == 0 {
        return Err(CliError::Usage("gen-data needs at least one episode (--n must be positive)".into()));
    }
    ensure_dir(out_dir)?;
    let env = cfg.env()?;
    let episodes = gen_dataset(&env, n, &cfg.data.tasks, cfg.seed)?;
    let path = out_dir.join(DATASET_FILE);
    save_episodes(&path, &episodes)?;
    let mean_length = episodes.iter().map(Episode::len).sum::<usize>() as f64 / n as f64;
    Ok(GenSummary { path, episodes: n, mean_length })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub plot: PathBuf,
    pub rows: usize,
    /// Windowed actor loss at the start and end of the run.
    pub actor_trend: Option<(f64, f64)>,
    pub critic_trend: Option<(f64, f64)>,
    /// Mean rollout return of each PPO iteration.
    pub iteration_returns: Vec<f64>,
}

fn write_metrics(out_dir: &Path, title: &str, rows: &[MetricRow]) -> CliResult<(PathBuf, PathBuf)> {
    let metrics = out_dir.join(METRICS_FILE);
    write_atomic(&metrics, metrics_to_csv(rows).as_bytes())?;
    let plot = out_dir.join(PLOT_FILE);
    let series = [
        Series { label: "actor loss", points: rows.iter().map(|r| (r.batch as f64, r.actor_loss)).collect() },
        Series { label: "critic loss", points: rows.iter().map(|r| (r.batch as f64, r.critic_loss)).collect() },
    ];
    write_atomic(&plot, line_plot(title, "batch", "loss", &series).as_bytes())?;
    Ok((metrics, plot))
}

fn summarise(out_dir: &Path, title: &str, model: &Model, rows: &[MetricRow], returns: Vec<f64>) -> CliResult<TrainSummary> {
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, model)?;
    let (metrics, plot) = write_metrics(out_dir, title, rows)?;
    let actor: Vec<f64> = rows.iter().map(|r| r.actor_loss).collect();
    let critic: Vec<f64> = rows.iter().map(|r| r.critic_loss).collect();
    Ok(TrainSummary {
        checkpoint: ckpt,
        metrics,
        plot,
        rows: rows.len(),
        actor_trend: window_ends(&actor, TREND_WINDOW),
        critic_trend: window_ends(&critic, TREND_WINDOW),
        iteration_returns: returns,
    })
}

/// Rejects a dataset recorded under a different sensor layout or vocabulary.
fn check_dataset(cfg: &RunConfig, episodes: &[Episode]) -> CliResult<()> {
    if episodes.is_empty() {
        return Err(CliError::Usage("dataset has no episodes".into()));
    }
    let spec = cfg.action_spec()?;
    for ep in episodes {
        if let Some(first) = ep.steps.first() {
            first.obs.validate(&cfg.model.fusion).map_err(|e| CliError::Usage(format!("dataset does not match the configured sensors: {e}")))?;
        }
        for s in &ep.steps {
            if spec.decode(spec.nearest(&s.action))? != s.action {
                return Err(CliError::Usage(format!(
                    "dataset episode {} uses action {:?}, which is not in the configured vocabulary",
                    ep.seed, s.action
                )));
            }
        }
    }
    Ok(())
}

fn train_config(cfg: &RunConfig) -> xlpolicy_core::learn::TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = cfg.seed;
    t
}

pub fn train_bc_cmd(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> CliResult<TrainSummary> {
    let episodes = load_episodes(dataset)?;
    check_dataset(cfg, &episodes)?;
    ensure_dir(out_dir)?;
    let model = Model::new(&cfg.model, cfg.action_spec()?, cfg.seed)?;
    let (model, rows) = match train_bc(model, &episodes, &train_config(cfg)) {
        Ok(r) => r,
        Err(Error::NonFinite(msg)) => return Err(CliError::Divergence(format!("behaviour cloning: {msg}"))),
        Err(e) => return Err(e.into()),
    };
    summarise(out_dir, "behaviour cloning losses", &model, &rows, Vec::new())
}

/// Loads a checkpoint and checks that it was built for this config.
pub fn load_compatible(cfg: &RunConfig, path: &Path) -> CliResult<Model> {
    let model = checkpoint::load(path)?;
    if model.action_spec() != &cfg.action_spec()? {
        return Err(CliError::Usage(format!("{}: checkpoint action vocabulary does not match the config", path.display())));
    }
    if model.config() != &cfg.model {
        return Err(CliError::Usage(format!("{}: checkpoint model architecture does not match the config", path.display())));
    }
    Ok(model)
}

pub fn train_ppo_cmd(cfg: &RunConfig, input: Option<&Path>, cold_start: bool, out_dir: &Path) -> CliResult<TrainSummary> {
    let model = match (input, cold_start) {
        (Some(_), true) => return Err(CliError::Usage("pass either --in or --cold-start, not both".into())),
        (Some(p), false) => load_compatible(cfg, p)?,
        (None, true) => Model::new(&cfg.model, cfg.action_spec()?, cfg.seed)?,
        (None, false) => return Err(CliError::Usage("train-ppo needs a checkpoint (--in) or --cold-start".into())),
    };
    ensure_dir(out_dir)?;
    let env = cfg.env()?;
    let outcome = train_ppo(model, &env, &train_config(cfg))?;
    let summary = summarise(out_dir, "PPO losses", &outcome.model, &outcome.metrics, outcome.iteration_returns)?;
    match outcome.diverged {
        Some(msg) => Err(CliError::Divergence(format!("{msg}; last good parameters saved to {}", summary.checkpoint.display()))),
        None => Ok(summary),
    }
}

/// Which controller `eval` drives.
pub enum EvalPolicy<'a> {
    Checkpoint(&'a Path),
    Expert,
}

pub fn eval_cmd(cfg: &RunConfig, policy: EvalPolicy<'_>, n: usize, out_dir: &Path) -> CliResult<Vec<EvalReport>> {
    if n == 0 {
        return Err(CliError::Usage("eval needs at least one episode".into()));
    }
    let env = cfg.env()?;
    let model = match policy {
        EvalPolicy::Checkpoint(p) => Some(load_compatible(cfg, p)?),
        EvalPolicy::Expert => None,
    };
    let mut reports = Vec::new();
    for &task in &cfg.eval.tasks {
        let mut ctrl: Box<dyn Controller> = match &model {
            Some(m) => Box::new(ModelController::new(m)),
            None => Box::new(ExpertController::new(&env)),
        };
        reports.push(evaluate(&env, ctrl.as_mut(), task, n, cfg.seed)?);
    }
    ensure_dir(out_dir)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&out_dir.join(EVAL_FILE), json.as_bytes())?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: &'static str,
    pub seq_len: usize,
    pub mean_s: f64,
    pub p95_s: f64,
}

pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.mode, r.seq_len, r.mean_s, r.p95_s));
    }
    out
}

/// Mean and nearest-rank 95th percentile.
pub fn latency_stats(samples: &[f64]) -> (f64, f64) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    (mean, sorted[rank - 1])
}

fn encoder_for(cfg: &RunConfig, seq_len: usize, window: Window) -> CliResult<(XlEncoder, Params)> {
    let xl = XlConfig { seg_len: seq_len, mem_len: 0, window, ..cfg.model.xl.clone() };
    let mut params = Params::new();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xbe7c));
    let enc = XlEncoder::new(&xl, cfg.model.fusion.fused_width(), &mut params, &mut rng)?;
    Ok((enc, params))
}

fn time_forward(enc: &XlEncoder, params: &Params, x: &Tensor, mem: &XlMemory, warmup: usize, reps: usize) -> CliResult<Vec<f64>> {
    for _ in 0..warmup {
        enc.encode_segment(params, x, mem)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = enc.encode_segment(params, x, mem)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(samples)
}

/// Times single-segment encoder forwards, dense against the local window.
///
/// Before timing each length, a window spanning the whole segment must
/// reproduce the dense output bit for bit.
pub fn bench(cfg: &RunConfig, warmup: usize, reps: usize) -> CliResult<Vec<BenchRow>> {
    if reps == 0 {
        return Err(CliError::Usage("bench needs at least one timed repetition".into()));
    }
    let mut rows = Vec::new();
    for &t in &cfg.bench.seq_lengths {
        let (dense, params) = encoder_for(cfg, t, Window::Dense)?;
        let (covering, covering_params) = encoder_for(cfg, t, Window::Local(t))?;
        let (sparse, sparse_params) = encoder_for(cfg, t, Window::Local(cfg.bench.window))?;
        debug_assert!(params == covering_params && params == sparse_params);

        let mut rng = rng_from_seed(derive_seed(cfg.seed, t as u64));
        let d_in = cfg.model.fusion.fused_width();
        let x = Tensor::new(vec![t, d_in], (0..t * d_in).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let mem = XlMemory::empty(dense.config());
        let a = dense.encode_segment(&params, &x, &mem)?.0;
        let b = covering.encode_segment(&covering_params, &x, &mem)?.0;
        if a != b {
            return Err(Error::State(format!("window {t} does not reproduce dense attention at length {t}")).into());
        }
        for (mode, enc, p) in [("dense", &dense, &params), ("sparse", &sparse, &sparse_params)] {
            let samples = time_forward(enc, p, &x, &mem, warmup, reps)?;
            let (mean_s, p95_s) = latency_stats(&samples);
            rows.push(BenchRow { mode, seq_len: t, mean_s, p95_s });
        }
    }
    Ok(rows)
}

pub fn bench_cmd(cfg: &RunConfig, out_dir: &Path) -> CliResult<Vec<BenchRow>> {
    if cfg.bench.warmup < 5 || cfg.bench.reps < 30 {
        return Err(CliError::Usage("bench needs at least 5 warmup runs and 30 timed repetitions".into()));
    }
    let rows = bench(cfg, cfg.bench.warmup, cfg.bench.reps)?;
    ensure_dir(out_dir)?;
    write_atomic(&out_dir.join(BENCH_FILE), bench_to_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=40).map(f64::from).collect();
        assert_eq!(latency_stats(&v), (20.5, 38.0));
        assert_eq!(latency_stats(&[3.0]), (3.0, 3.0));
    }

    #[test]
    fn bench_csv_has_one_row_per_pair() {
        let cfg = RunConfig {
            bench: crate::config::BenchConfig { seq_lengths: vec![4, 8], window: 2, warmup: 0, reps: 1 },
            ..RunConfig::default()
        };
        let rows = bench(&cfg, 0, 1).unwrap();
        let csv = bench_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("dense,4,") && lines[4].starts_with("sparse,8,"));
    }
}
