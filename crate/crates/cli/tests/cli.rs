use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xlpolicy::checkpoint;
use xlpolicy::commands::{BENCH_HEADER, CHECKPOINT_FILE, DATASET_FILE, EVAL_FILE, METRICS_FILE, PLOT_FILE};
use xlpolicy::svg::polyline_sizes;
use xlpolicy_core::learn::{metrics_from_csv, window_ends};

const SMALL: &str = r#"
seed = 3

[model]
head_hidden = 16

[model.fusion]
conv_channels = [4, 8]
d_rgbd = 8
d_lidar = 8
d_touch = 4
mlp_hidden = 8

[model.xl]
d_model = 16
n_heads = 2
n_layers = 1
mem_len = 8
seg_len = 8
ff_mult = 2

[train]
bc_steps = 30
ppo_iterations = 1
rollout_steps = 48
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn xlpolicy(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_xlpolicy"));
        cmd.arg(args[0]).arg("--config").arg(&config).args(&args[1..]).current_dir(self.dir.path());
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.xlpolicy(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.xlpolicy(args).status.code().expect("exited normally")
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_data_writes_reports_and_repeats() {
    let run = Run::new(SMALL);
    let stdout = run.ok(&["gen-data", "--n", "10", "--out", "a"]);
    assert!(stdout.contains("wrote 10 episodes"), "{stdout}");
    let eps = xlpolicy_core::sim::load_episodes(&run.path("a").join(DATASET_FILE)).unwrap();
    assert_eq!(eps.len(), 10);
    run.ok(&["gen-data", "--n", "10", "--out", "b"]);
    assert_eq!(read(run.path("a").join(DATASET_FILE)), read(run.path("b").join(DATASET_FILE)));
    run.ok(&["gen-data", "--n", "10", "--out", "c", "--seed", "4"]);
    assert_ne!(read(run.path("a").join(DATASET_FILE)), read(run.path("c").join(DATASET_FILE)));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let run = Run::new(SMALL);
    assert_eq!(run.code(&["gen-data", "--n", "0", "--out", "a"]), 2);
    fs::write(run.path("blocker"), b"file").unwrap();
    assert_eq!(run.code(&["gen-data", "--n", "2", "--out", "blocker/sub"]), 2);
    assert_eq!(run.code(&["train-ppo", "--out", "p"]), 2);
    assert_eq!(run.code(&["train-bc", "--in", "missing.jsonl", "--out", "p"]), 2);
    assert_eq!(run.code(&["frobnicate"]), 2);

    let typo = Run::new(&format!("{SMALL}\n[eval]\nepisode = 3\n"));
    assert_eq!(typo.code(&["gen-data", "--n", "2"]), 2);
    let inconsistent = Run::new("[model.xl]\nd_model = 30\nn_heads = 4\n");
    assert_eq!(inconsistent.code(&["bench"]), 2);
}

#[test]
fn bc_artifacts_are_consistent_and_deterministic() {
    let run = Run::new(SMALL);
    run.ok(&["gen-data", "--n", "12", "--out", "d"]);
    let data = run.path("d").join(DATASET_FILE);
    let data = data.to_str().unwrap();
    run.ok(&["train-bc", "--in", data, "--out", "a"]);
    run.ok(&["train-bc", "--in", data, "--out", "b"]);
    for f in [METRICS_FILE, CHECKPOINT_FILE, PLOT_FILE] {
        assert_eq!(read(run.path("a").join(f)), read(run.path("b").join(f)), "{f} differs between runs");
    }
    let csv = fs::read_to_string(run.path("a").join(METRICS_FILE)).unwrap();
    assert!(csv.starts_with("phase,batch,actor_loss,critic_loss,return,mse\n"));
    let rows = metrics_from_csv(&csv).unwrap();
    assert_eq!(rows.len(), 30);
    let svg = fs::read_to_string(run.path("a").join(PLOT_FILE)).unwrap();
    assert_eq!(polyline_sizes(&svg), vec![rows.len(), rows.len()]);
}

#[test]
fn bc_dataset_must_match_vocabulary() {
    let run = Run::new(SMALL);
    run.ok(&["gen-data", "--n", "3", "--out", "d"]);
    let other = Run::new(&format!("{SMALL}\n[action]\nstep = 0.25\n"));
    let data = run.path("d").join(DATASET_FILE);
    assert_eq!(other.code(&["train-bc", "--in", data.to_str().unwrap(), "--out", "x"]), 2);
}

#[test]
fn bc_converges_on_fifty_episodes_with_default_model() {
    let run = Run::new("seed = 0\n");
    run.ok(&["gen-data", "--n", "50", "--out", "d"]);
    let data = run.path("d").join(DATASET_FILE);
    run.ok(&["train-bc", "--in", data.to_str().unwrap(), "--out", "bc"]);
    let csv = fs::read_to_string(run.path("bc").join(METRICS_FILE)).unwrap();
    let mse: Vec<f64> = metrics_from_csv(&csv).unwrap().iter().map(|r| r.mse.unwrap()).collect();
    let (first, last) = window_ends(&mse, 20).unwrap();
    assert!(last < 0.1 * first, "windowed mse {first} -> {last}");
}

#[test]
fn ppo_with_zero_iterations_returns_input_checkpoint() {
    let run = Run::new(&SMALL.replace("ppo_iterations = 1", "ppo_iterations = 0"));
    run.ok(&["gen-data", "--n", "6", "--out", "d"]);
    let data = run.path("d").join(DATASET_FILE);
    run.ok(&["train-bc", "--in", data.to_str().unwrap(), "--out", "bc"]);
    let ckpt = run.path("bc").join(CHECKPOINT_FILE);
    run.ok(&["train-ppo", "--in", ckpt.to_str().unwrap(), "--out", "ppo"]);
    assert_eq!(read(&ckpt), read(run.path("ppo").join(CHECKPOINT_FILE)));
    assert_eq!(fs::read_to_string(run.path("ppo").join(METRICS_FILE)).unwrap().lines().count(), 1);
}

#[test]
fn ppo_cold_start_runs_and_repeats() {
    let run = Run::new(SMALL);
    run.ok(&["train-ppo", "--cold-start", "--out", "a"]);
    run.ok(&["train-ppo", "--cold-start", "--out", "b"]);
    assert_eq!(read(run.path("a").join(METRICS_FILE)), read(run.path("b").join(METRICS_FILE)));
    assert_eq!(read(run.path("a").join(CHECKPOINT_FILE)), read(run.path("b").join(CHECKPOINT_FILE)));
    let rows = metrics_from_csv(&fs::read_to_string(run.path("a").join(METRICS_FILE)).unwrap()).unwrap();
    assert!(!rows.is_empty() && rows.iter().all(|r| r.ret.is_some()));
    let svg = fs::read_to_string(run.path("a").join(PLOT_FILE)).unwrap();
    assert_eq!(polyline_sizes(&svg), vec![rows.len(), rows.len()]);
}

#[test]
fn ppo_divergence_exits_three_and_keeps_last_good() {
    let run = Run::new(SMALL);
    run.ok(&["train-ppo", "--cold-start", "--out", "init"]);
    let mut model = checkpoint::load(&run.path("init").join(CHECKPOINT_FILE)).unwrap();
    let id = model.params().id("head.q.out.w").unwrap();
    let n = model.params().get(id).numel();
    let huge: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { f64::MAX } else { -f64::MAX }).collect();
    model.params_mut().assign(id, &huge).unwrap();
    let bad = run.path("bad.ckpt");
    checkpoint::save(&bad, &model).unwrap();

    let out = run.xlpolicy(&["train-ppo", "--in", bad.to_str().unwrap(), "--out", "ppo"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert_eq!(read(&bad), read(run.path("ppo").join(CHECKPOINT_FILE)));
}

#[test]
fn eval_expert_is_perfect_and_untrained_model_reports() {
    let run = Run::new(SMALL);
    run.ok(&["eval", "--expert", "--n", "5", "--out", "e"]);
    let reports: serde_json::Value = serde_json::from_slice(&read(run.path("e").join(EVAL_FILE))).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert_eq!(r["success_rate"], 1.0);
        assert_eq!(r["accuracy"], 1.0);
    }

    run.ok(&["train-ppo", "--cold-start", "--out", "m"]);
    let ckpt = run.path("m").join(CHECKPOINT_FILE);
    let stdout = run.ok(&["eval", "--in", ckpt.to_str().unwrap(), "--n", "3", "--out", "e2"]);
    assert!(stdout.starts_with("task,episodes,success_rate"));
    let again = run.ok(&["eval", "--in", ckpt.to_str().unwrap(), "--n", "3", "--out", "e3"]);
    assert_eq!(stdout, again);

    let other = Run::new(&format!("{SMALL}\n[action]\nyaw_step = 0.5\n"));
    assert_eq!(other.code(&["eval", "--in", ckpt.to_str().unwrap(), "--n", "1"]), 2);
}

#[test]
fn bench_writes_one_row_per_mode_and_length() {
    let run = Run::new(&format!("{SMALL}\n[bench]\nseq_lengths = [8, 24]\nwindow = 4\n"));
    let stdout = run.ok(&["bench", "--out", "b"]);
    let csv = fs::read_to_string(run.path("b").join("bench.csv")).unwrap();
    assert_eq!(stdout, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], BENCH_HEADER);
    let keys: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["dense,8", "sparse,8", "dense,24", "sparse,24"]);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(f[0] > 0.0 && f[1] >= 0.0);
    }
    let few = Run::new(&format!("{SMALL}\n[bench]\nreps = 10\n"));
    assert_eq!(few.code(&["bench"]), 2);
}
