//! Command implementations behind the binary. Each command is a plain
//! function over a parsed [`RunConfig`] so tests can drive it without
//! spawning a process; the binary only parses flags, dispatches, and
//! maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use lightcts_core::data::{
    make_windows, split, CtsDataset, DataError, MaskMatrix, Normalizer, TargetMode, WindowSample,
};
use lightcts_core::model::{LightCtsModel, ModelError};
use lightcts_core::profiler::{count_flops, profile};
use lightcts_core::training::{
    evaluate, forecast_matrix, train, EpochStats, MetricReport, TrainError,
};
use lightcts_core::ConfigError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{CliConfigError, MaskSource, RunConfig, StudySweep};
use crate::synth;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] CliConfigError),
    #[error("invalid run: {0}")]
    Validation(String),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for configuration problems the user can fix by editing inputs,
    /// 2 for failures while actually running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Validation(_) | CliError::Invalid(_) => 1,
            _ => 2,
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Loads the dataset named by the config: binary container first, CSV
/// pair otherwise.
pub fn load_dataset(cfg: &RunConfig) -> Result<CtsDataset, CliError> {
    if let Some(path) = &cfg.data_path {
        return Ok(CtsDataset::load_binary(path)?);
    }
    if let Some(values) = &cfg.values_csv {
        return Ok(CtsDataset::load_csv(values, &cfg.adjacency_csv)?);
    }
    Err(CliError::Config(CliConfigError::MissingKey {
        key: "data.path",
    }))
}

/// Resolves the configured mask source against a concrete dataset.
pub fn build_mask(cfg: &RunConfig, ds: &CtsDataset) -> Option<MaskMatrix> {
    match cfg.mask {
        MaskSource::Adjacency => Some(MaskMatrix::from_adjacency(ds.adjacency(), ds.n(), 0.0)),
        MaskSource::AllTrue => Some(MaskMatrix::all_true(ds.n())),
        MaskSource::None => None,
    }
}

/// Split, normalization, and windowing shared by train, eval, and study.
/// Statistics are fitted on the training portion only and applied to all
/// three, so evaluation sees exactly the units the model was trained in.
pub struct PreparedData {
    pub normalizer: Normalizer,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub n_nodes: usize,
    pub in_features: usize,
}

pub fn prepare(
    ds: &CtsDataset,
    history_len: usize,
    horizon: usize,
    mode: TargetMode,
    cfg: &RunConfig,
) -> Result<PreparedData, CliError> {
    let window = lightcts_core::data::WindowSpec {
        history_len,
        horizon,
        mode,
    };
    let (tr, va, te) = split(ds, &cfg.split_spec())?;
    let normalizer = Normalizer::fit(&tr);
    let trn = normalizer.normalize_dataset(&tr)?;
    let van = normalizer.normalize_dataset(&va)?;
    let ten = normalizer.normalize_dataset(&te)?;
    Ok(PreparedData {
        train: make_windows(&trn, &window)?,
        val: make_windows(&van, &window)?,
        test: make_windows(&ten, &window)?,
        normalizer,
        n_nodes: ds.n(),
        in_features: ds.f(),
    })
}

#[derive(Debug)]
pub struct SynthOutput {
    pub dataset_path: PathBuf,
    pub values_path: PathBuf,
    pub adjacency_path: PathBuf,
    pub n: usize,
    pub t: usize,
    pub f: usize,
}

/// Generates a dataset and writes it under `out` as both the binary
/// container (`data.cts`) and an inspectable CSV pair.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutput, CliError> {
    let ds = synth::generate(&cfg.synth, cfg.seed)?;
    fs::create_dir_all(out)?;
    let dataset_path = out.join("data.cts");
    let values_path = out.join("values.csv");
    let adjacency_path = out.join("adjacency.csv");
    ds.save_binary(&dataset_path)?;
    ds.save_values_csv(&values_path)?;
    ds.save_adjacency_csv(0, &adjacency_path)?;
    Ok(SynthOutput {
        dataset_path,
        values_path,
        adjacency_path,
        n: ds.n(),
        t: ds.t(),
        f: ds.f(),
    })
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub n_params: usize,
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mae", "val_mae"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.17e}", e.train_mae),
            format!("{:.17e}", e.val_mae),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochStats>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str, CliError> {
            record
                .get(i)
                .ok_or_else(|| validation(format!("history row has {} fields", record.len())))
        };
        out.push(EpochStats {
            epoch: field(0)?
                .parse()
                .map_err(|e| validation(format!("history epoch: {e}")))?,
            train_mae: field(1)?
                .parse()
                .map_err(|e| validation(format!("history train_mae: {e}")))?,
            val_mae: field(2)?
                .parse()
                .map_err(|e| validation(format!("history val_mae: {e}")))?,
        });
    }
    Ok(out)
}

/// Trains a fresh model on the configured dataset and writes the best
/// validation snapshot plus the per-epoch history under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput, CliError> {
    let train_config = cfg.train_config()?;
    let ds = load_dataset(cfg)?;
    let model_config = cfg.model_config(ds.n(), ds.f())?;
    let data = prepare(&ds, cfg.history_len, cfg.horizon, cfg.mode, cfg)?;
    let mask = build_mask(cfg, &ds);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = LightCtsModel::init(model_config, mask, &mut rng)?;
    let n_params = model.n_params();

    let outcome = train(model, &data.train, &data.val, &train_config)?;

    fs::create_dir_all(out)?;
    let checkpoint_path = out.join("model.lcts");
    let history_path = out.join("history.csv");
    outcome.model.save_checkpoint(&checkpoint_path)?;
    write_history_csv(&history_path, &outcome.history)?;
    Ok(TrainOutput {
        checkpoint_path,
        history_path,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        epochs_run: outcome.history.len(),
        n_params,
    })
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub csv: String,
    pub metrics_path: Option<PathBuf>,
}

/// Horizons singled out in the per-horizon section of the metrics CSV,
/// reported when the model's horizon reaches that far.
const REPORTED_HORIZONS: [usize; 3] = [3, 6, 12];

pub fn metrics_to_csv(report: &MetricReport, mode: TargetMode) -> String {
    let mut out = String::new();
    match mode {
        TargetMode::MultiStep => {
            out.push_str("scope,mae,rmse,mape\n");
            let mape = report.mape.map_or(String::new(), |m| format!("{m:.6}"));
            out.push_str(&format!(
                "average,{:.6},{:.6},{}\n",
                report.mae, report.rmse, mape
            ));
            if let Some(per) = &report.per_horizon {
                if per.len() >= *REPORTED_HORIZONS.last().unwrap() {
                    for &h in &REPORTED_HORIZONS {
                        let row = &per[h - 1];
                        out.push_str(&format!(
                            "horizon_{h},{:.6},{:.6},{:.6}\n",
                            row.mae, row.rmse, row.mape
                        ));
                    }
                }
            }
        }
        TargetMode::SingleStep => {
            out.push_str("scope,mae,rmse,rrse,corr\n");
            out.push_str(&format!(
                "average,{:.6},{:.6},{:.6},{:.6}\n",
                report.mae,
                report.rmse,
                report.rrse.unwrap_or(f64::NAN),
                report.corr.unwrap_or(f64::NAN),
            ));
        }
    }
    out
}

/// Scores a saved checkpoint on the test split of the configured
/// dataset. Window shape and mode come from the checkpoint itself; the
/// run config supplies the data location and split fractions.
pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>) -> Result<EvalOutput, CliError> {
    let checkpoint = cfg
        .checkpoint
        .as_ref()
        .ok_or(CliError::Config(CliConfigError::MissingKey {
            key: "checkpoint",
        }))?;
    let model = LightCtsModel::load_checkpoint(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let mc = model.config();
    if ds.n() != mc.n_nodes {
        return Err(CliError::Model(ModelError::NodeMismatch {
            got: ds.n(),
            expected: mc.n_nodes,
        }));
    }
    let data = prepare(&ds, mc.history_len, mc.horizon, mc.mode, cfg)?;
    if data.test.is_empty() {
        return Err(CliError::Train(TrainError::EmptyWindows { which: "test" }));
    }
    let (pred, truth) = forecast_matrix(&model, &data.test, &data.normalizer)?;
    let report = evaluate(&pred, &truth, mc.mode)?;
    let csv = metrics_to_csv(&report, mc.mode);
    let metrics_path = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            fs::write(&path, &csv)?;
            Some(path)
        }
        None => None,
    };
    Ok(EvalOutput {
        report,
        csv,
        metrics_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Table,
}

#[derive(Debug)]
pub struct ProfileOutput {
    pub text: String,
    pub total_params: u64,
    pub total_flops: u64,
    pub report_path: Option<PathBuf>,
}

/// Shape source for profile and study when no dataset is configured:
/// the synth spec describes the data the run would generate.
fn profile_shape(cfg: &RunConfig) -> Result<(usize, usize), CliError> {
    if cfg.data_path.is_some() || cfg.values_csv.is_some() {
        let ds = load_dataset(cfg)?;
        Ok((ds.n(), ds.f()))
    } else {
        Ok((cfg.synth.n, cfg.synth.f))
    }
}

/// Counts parameters and forward FLOPs for the configured model without
/// training it.
pub fn cmd_profile(
    cfg: &RunConfig,
    format: OutputFormat,
    out: Option<&Path>,
) -> Result<ProfileOutput, CliError> {
    let (n_nodes, in_features) = profile_shape(cfg)?;
    let model_config = cfg.model_config(n_nodes, in_features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = LightCtsModel::init(model_config, Some(MaskMatrix::all_true(n_nodes)), &mut rng)?;
    let report = profile(&model);
    let text = match format {
        OutputFormat::Csv => report.to_csv(),
        OutputFormat::Table => report.to_table(),
    };
    let report_path = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let name = match format {
                OutputFormat::Csv => "profile.csv",
                OutputFormat::Table => "profile.txt",
            };
            let path = dir.join(name);
            fs::write(&path, &text)?;
            Some(path)
        }
        None => None,
    };
    Ok(ProfileOutput {
        text,
        total_params: report.total_params(),
        total_flops: report.total_flops(),
        report_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub value: usize,
    pub params: u64,
    pub flops: u64,
    pub val_mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

#[derive(Debug)]
pub struct StudyOutput {
    pub sweep: StudySweep,
    pub rows: Vec<StudyRow>,
    pub csv: String,
    pub report_path: Option<PathBuf>,
}

pub fn study_rows_to_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from("value,params,flops,val_mae,rmse,mape\n");
    for r in rows {
        let mape = r.mape.map_or(String::new(), |m| format!("{m:.6}"));
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.value, r.params, r.flops, r.val_mae, r.rmse, mape
        ));
    }
    out
}

pub fn read_study_csv(path: &Path) -> Result<Vec<StudyRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str, CliError> {
            record
                .get(i)
                .ok_or_else(|| validation(format!("study row has {} fields", record.len())))
        };
        let num = |i: usize, name: &str| -> Result<f64, CliError> {
            field(i)?
                .parse()
                .map_err(|e| validation(format!("study {name}: {e}")))
        };
        let mape_field = field(5)?;
        rows.push(StudyRow {
            value: field(0)?
                .parse()
                .map_err(|e| validation(format!("study value: {e}")))?,
            params: num(1, "params")? as u64,
            flops: num(2, "flops")? as u64,
            val_mae: num(3, "val_mae")?,
            rmse: num(4, "rmse")?,
            mape: if mape_field.is_empty() {
                None
            } else {
                Some(
                    mape_field
                        .parse()
                        .map_err(|e| validation(format!("study mape: {e}")))?,
                )
            },
        });
    }
    Ok(rows)
}

fn apply_sweep_value(cfg: &RunConfig, sweep: StudySweep, value: usize) -> RunConfig {
    let mut c = cfg.clone();
    match sweep {
        StudySweep::EmbedDim => c.embed_dim = value,
        StudySweep::TcnGroups => c.tcn_groups = value,
        StudySweep::Blocks => c.blocks = value,
    }
    c
}

/// Sweeps one hyperparameter over the configured values, training and
/// scoring a fresh model per value on a shared split. Every value is
/// validated before the first training run starts.
pub fn cmd_study(cfg: &RunConfig, out: Option<&Path>) -> Result<StudyOutput, CliError> {
    let sweep = cfg
        .study_sweep
        .ok_or(CliError::Config(CliConfigError::MissingKey {
            key: "study.sweep",
        }))?;
    if cfg.study_values.len() < 2 {
        return Err(validation(format!(
            "study.values needs at least 2 values to compare, got {}",
            cfg.study_values.len()
        )));
    }

    let ds = if cfg.data_path.is_some() || cfg.values_csv.is_some() {
        load_dataset(cfg)?
    } else {
        synth::generate(&cfg.synth, cfg.seed)?
    };

    // Reject every bad value up front so a sweep never dies mid-run.
    for &value in &cfg.study_values {
        let candidate = apply_sweep_value(cfg, sweep, value);
        candidate
            .model_config(ds.n(), ds.f())
            .map_err(|e| validation(format!("study value {value} ({}): {e}", sweep.name())))?;
    }

    let mut train_config = cfg.train_config()?;
    train_config.epochs = cfg.study_epochs;
    if cfg.study_epochs == 0 {
        return Err(validation("study.epochs must be at least 1".to_string()));
    }

    let data = prepare(&ds, cfg.history_len, cfg.horizon, cfg.mode, cfg)?;
    let mask = build_mask(cfg, &ds);

    let mut rows = Vec::new();
    for &value in &cfg.study_values {
        let candidate = apply_sweep_value(cfg, sweep, value);
        let model_config = candidate.model_config(ds.n(), ds.f())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = LightCtsModel::init(model_config, mask.clone(), &mut rng)?;
        let flops = count_flops(&model).total_flops();
        let params = model.n_params() as u64;

        let outcome = train(model, &data.train, &data.val, &train_config)?;
        let (pred, truth) = forecast_matrix(&outcome.model, &data.test, &data.normalizer)?;
        let report = evaluate(&pred, &truth, cfg.mode)?;
        rows.push(StudyRow {
            value,
            params,
            flops,
            val_mae: outcome.best_val_mae,
            rmse: report.rmse,
            mape: report.mape,
        });
    }

    let csv = study_rows_to_csv(&rows);
    let report_path = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("study.csv");
            fs::write(&path, &csv)?;
            Some(path)
        }
        None => None,
    };
    Ok(StudyOutput {
        sweep,
        rows,
        csv,
        report_path,
    })
}
