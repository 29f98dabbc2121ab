//! End-to-end command workflows, both through the library entry points
//! and through the compiled binary.

use std::path::Path;
use std::process::Command;

use lightcts_cli::commands::{
    cmd_eval, cmd_study, cmd_synth, cmd_train, read_history_csv, read_study_csv, CliError,
};
use lightcts_cli::config::RunConfig;
use lightcts_core::profiler::{count_flops, Component};
use tempfile::TempDir;

/// Small but structurally complete run: the receptive field 1+1*(1+2+4+8)=16
/// covers the 12-step history, and every width divides its group counts.
fn base_config(data_path: &Path) -> String {
    format!(
        "data.path = {}\n\
         mode = multi\n\
         history_len = 12\n\
         horizon = 12\n\
         model.embed_dim = 8\n\
         model.tcn_layers = 4\n\
         model.tcn_groups = 2\n\
         model.se_reduction = 4\n\
         model.blocks = 2\n\
         model.heads = 2\n\
         model.mha_groups = 2\n\
         model.ffn_groups = 2\n\
         model.head_hidden = 32\n\
         train.epochs = 2\n\
         train.batch_size = 16\n\
         seed = 5\n",
        data_path.display()
    )
}

fn synth_config(n: usize, t: usize) -> String {
    format!(
        "synth.n = {n}\n\
         synth.t = {t}\n\
         synth.f = 1\n\
         synth.density = 0.5\n\
         synth.coupling = 0.3\n\
         synth.noise = 0.05\n\
         seed = 5\n"
    )
}

fn make_dataset(dir: &Path, n: usize, t: usize) -> std::path::PathBuf {
    let cfg = RunConfig::parse(&synth_config(n, t)).unwrap();
    cmd_synth(&cfg, dir).unwrap().dataset_path
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&base_config(&data)).unwrap();

    let out = dir.path().join("run");
    let trained = cmd_train(&cfg, &out).unwrap();
    assert!(trained.checkpoint_path.is_file());
    assert_eq!(trained.epochs_run, 2);
    assert!(trained.best_epoch >= 1 && trained.best_epoch <= 2);
    assert!(trained.best_val_mae.is_finite());

    let history = read_history_csv(&trained.history_path).unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(history[0].epoch, 1);
    assert!(history.iter().all(|e| e.train_mae.is_finite() && e.val_mae.is_finite()));
    let recorded_best = history
        .iter()
        .map(|e| e.val_mae)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(recorded_best, trained.best_val_mae);

    let mut eval_cfg = cfg.clone();
    eval_cfg.checkpoint = Some(trained.checkpoint_path.clone());
    let eval_out = dir.path().join("eval");
    let scored = cmd_eval(&eval_cfg, Some(&eval_out)).unwrap();
    let metrics_path = scored.metrics_path.unwrap();
    assert!(metrics_path.is_file());
    let text = std::fs::read_to_string(&metrics_path).unwrap();
    assert_eq!(text, scored.csv);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scope,mae,rmse,mape");
    assert!(lines[1].starts_with("average,"));
    // Q = 12, so the selected per-horizon rows are present.
    assert!(lines.iter().any(|l| l.starts_with("horizon_3,")));
    assert!(lines.iter().any(|l| l.starts_with("horizon_12,")));
    assert!(scored.report.mae.is_finite() && scored.report.mae >= 0.0);
    assert!(scored.report.rmse >= scored.report.mae);
}

#[test]
fn training_history_csv_round_trips_exactly() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&base_config(&data)).unwrap();
    let out = dir.path().join("run");
    let trained = cmd_train(&cfg, &out).unwrap();
    let history = read_history_csv(&trained.history_path).unwrap();
    // Values are written with enough digits to reproduce the exact f64s.
    let rewritten = dir.path().join("copy.csv");
    lightcts_cli::commands::write_history_csv(&rewritten, &history).unwrap();
    assert_eq!(
        std::fs::read_to_string(&trained.history_path).unwrap(),
        std::fs::read_to_string(&rewritten).unwrap()
    );
}

#[test]
fn eval_on_checkpoint_with_different_node_count_names_positional_encoding() {
    let dir = TempDir::new().unwrap();
    let data4 = make_dataset(&dir.path().join("d4"), 4, 120);
    let data6 = make_dataset(&dir.path().join("d6"), 6, 120);
    let cfg = RunConfig::parse(&base_config(&data4)).unwrap();
    let trained = cmd_train(&cfg, &dir.path().join("run")).unwrap();

    let mut eval_cfg = RunConfig::parse(&base_config(&data6)).unwrap();
    eval_cfg.checkpoint = Some(trained.checkpoint_path);
    let err = cmd_eval(&eval_cfg, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("positional encoding"), "got: {msg}");
    assert!(msg.contains('6') && msg.contains('4'), "got: {msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_requires_a_checkpoint_key() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&base_config(&data)).unwrap();
    let err = cmd_eval(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("checkpoint"), "got: {err}");
}

fn study_config(data_path: &Path, sweep: &str, values: &str) -> String {
    format!(
        "{}study.sweep = {sweep}\nstudy.values = {values}\nstudy.epochs = 1\n",
        base_config(data_path)
    )
}

#[test]
fn study_over_tcn_groups_shrinks_params_and_flops() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    // The channel shuffle needs D/G divisible by G, so the width must
    // be 16 for the sweep to reach G = 4.
    let text = study_config(&data, "tcn_groups", "1,2,4")
        .replace("model.embed_dim = 8", "model.embed_dim = 16");
    let cfg = RunConfig::parse(&text).unwrap();
    let out = dir.path().join("study");
    let study = cmd_study(&cfg, Some(&out)).unwrap();
    assert_eq!(study.rows.len(), 3);
    for pair in study.rows.windows(2) {
        assert!(
            pair[1].params < pair[0].params,
            "params must strictly decrease with more groups: {:?}",
            study.rows
        );
        assert!(pair[1].flops < pair[0].flops);
    }
    let back = read_study_csv(&study.report_path.unwrap()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.iter().zip(&study.rows) {
        assert_eq!(a.value, b.value);
        assert_eq!(a.params, b.params);
        assert_eq!(a.flops, b.flops);
    }
}

#[test]
fn study_over_embed_dim_scales_heavy_components_quadratically() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&study_config(&data, "embed_dim", "16,32")).unwrap();
    let study = cmd_study(&cfg, None).unwrap();
    assert!(study.rows[1].flops > study.rows[0].flops);

    // Doubling the width should roughly quadruple the temporal and
    // spatial operator FLOPs; the linear attention-score and gating
    // terms keep the ratio slightly below exactly 4.
    let component_flops = |d: usize| {
        let mut c = cfg.clone();
        c.embed_dim = d;
        let model_config = c.model_config(4, 1).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mask = Some(lightcts_core::data::MaskMatrix::all_true(4));
        let model =
            lightcts_core::model::LightCtsModel::init(model_config, mask, &mut rng).unwrap();
        let report = count_flops(&model);
        let get = |comp: Component| {
            report
                .components
                .iter()
                .find(|c| c.component == comp)
                .unwrap()
                .flops as f64
        };
        (get(Component::TemporalOperators), get(Component::SpatialOperators))
    };
    let (t16, s16) = component_flops(16);
    let (t32, s32) = component_flops(32);
    assert!(
        (3.0..=4.5).contains(&(t32 / t16)),
        "temporal ratio {}",
        t32 / t16
    );
    assert!(
        (3.0..=4.5).contains(&(s32 / s16)),
        "spatial ratio {}",
        s32 / s16
    );
}

#[test]
fn study_over_blocks_grows_params_linearly() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&study_config(&data, "blocks", "0,2,4")).unwrap();
    let study = cmd_study(&cfg, None).unwrap();
    let p: Vec<i64> = study.rows.iter().map(|r| r.params as i64).collect();
    assert!(p[0] < p[1] && p[1] < p[2]);
    assert_eq!(p[2] - p[1], p[1] - p[0], "per-block cost must be constant");
}

#[test]
fn study_rejects_bad_values_before_training() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    // 10 is not divisible by the 2 temporal groups.
    let cfg = RunConfig::parse(&study_config(&data, "embed_dim", "8,10")).unwrap();
    let err = cmd_study(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("10"), "must name the offending value: {msg}");
}

#[test]
fn study_needs_at_least_two_values() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let cfg = RunConfig::parse(&study_config(&data, "embed_dim", "8")).unwrap();
    let err = cmd_study(&cfg, None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    match err {
        CliError::Validation(msg) => assert!(msg.contains("at least 2"), "got: {msg}"),
        other => panic!("got: {other}"),
    }
}

// ── binary-level checks ──────────────────────────────────────────────

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lightcts"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn binary_synth_is_seed_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", &synth_config(5, 80));
    let run = |out: &str, seed: &str| {
        let status = bin()
            .args(["synth", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.path().join(out).join("data.cts")).unwrap()
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn binary_rejects_unknown_config_key_with_exit_1() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "synth.nodes = 4\n");
    let output = bin()
        .args(["synth", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("synth.nodes"), "stderr: {stderr}");
}

#[test]
fn binary_missing_data_file_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.cfg",
        &base_config(&dir.path().join("nope.cts")),
    );
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn binary_pipeline_synth_train_eval_profile() {
    let dir = TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let synth_cfg = write_config(dir.path(), "synth.cfg", &synth_config(4, 120));
    assert!(bin()
        .args(["synth", "--config"])
        .arg(&synth_cfg)
        .args(["--out"])
        .arg(&data_dir)
        .status()
        .unwrap()
        .success());

    let text = base_config(&data_dir.join("data.cts"))
        .replace("train.epochs = 2", "train.epochs = 1");
    let run_cfg = write_config(dir.path(), "run.cfg", &text);

    let run_dir = dir.path().join("run");
    let output = bin()
        .args(["train", "--config"])
        .arg(&run_cfg)
        .args(["--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("best validation MAE"), "stdout: {stdout}");
    assert!(run_dir.join("model.lcts").is_file());
    assert!(run_dir.join("history.csv").is_file());

    let eval_text = format!(
        "{}checkpoint = {}\n",
        text,
        run_dir.join("model.lcts").display()
    );
    let eval_cfg = write_config(dir.path(), "eval.cfg", &eval_text);
    let eval_dir = dir.path().join("eval");
    let output = bin()
        .args(["eval", "--config"])
        .arg(&eval_cfg)
        .args(["--out"])
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(String::from_utf8_lossy(&output.stdout).contains("average,"));
    assert!(eval_dir.join("metrics.csv").is_file());

    let output = bin()
        .args(["profile", "--config"])
        .arg(&run_cfg)
        .args(["--format", "csv"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("component,params,flops"), "stdout: {stdout}");
    assert!(stdout.contains("total,"), "stdout: {stdout}");
}

#[test]
fn binary_train_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(&dir.path().join("data"), 4, 120);
    let text = base_config(&data).replace("train.epochs = 2", "train.epochs = 1");
    let cfg = write_config(dir.path(), "run.cfg", &text);
    let run = |out: &str, seed: &str| {
        let status = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(dir.path().join(out).join("model.lcts")).unwrap(),
            std::fs::read(dir.path().join(out).join("history.csv")).unwrap(),
        )
    };
    let (ckpt_a, hist_a) = run("a", "11");
    let (ckpt_b, hist_b) = run("b", "11");
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(hist_a, hist_b);
    let (ckpt_c, _) = run("c", "12");
    assert_ne!(ckpt_a, ckpt_c);
}

#[test]
fn binary_profile_table_format_is_aligned_text() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", &synth_config(4, 50));
    let output = bin()
        .args(["profile", "--config"])
        .arg(&cfg)
        .args(["--format", "table"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("component"), "stdout: {stdout}");
    assert!(stdout.contains("total"), "stdout: {stdout}");
}

#[test]
fn binary_help_exits_zero() {
    let status = bin().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
}
