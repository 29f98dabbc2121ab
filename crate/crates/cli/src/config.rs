//! Flat key=value run configuration. Every upstream divisibility and
//! sizing invariant is checked before any training or generation
//! starts, with errors naming the violated constraint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lightcts_core::data::{SplitSpec, TargetMode, WindowSpec};
use lightcts_core::glformer::{BlockKind, GlFormerConfig};
use lightcts_core::ltcn::LtcnConfig;
use lightcts_core::model::ModelConfig;
use lightcts_core::training::TrainConfig;
use lightcts_core::ConfigError;
use thiserror::Error;

use crate::synth::{SynthKind, SynthSpec};

#[derive(Debug, Error)]
pub enum CliConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected key=value, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config key {key:?} is not recognized")]
    UnknownKey { key: String },
    #[error("config key {key:?}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("config key {key:?} is required for this command")]
    MissingKey { key: &'static str },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

fn bad(key: &str, msg: impl Into<String>) -> CliConfigError {
    CliConfigError::BadValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Where the attention mask for local blocks comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Union of the dataset's adjacency matrices (the default).
    Adjacency,
    /// Every pair connected; local blocks behave like global ones.
    AllTrue,
    /// No mask; valid only for all-global patterns.
    None,
}

/// Which hyperparameter a study sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudySweep {
    EmbedDim,
    TcnGroups,
    Blocks,
}

impl StudySweep {
    pub fn name(self) -> &'static str {
        match self {
            StudySweep::EmbedDim => "embed_dim",
            StudySweep::TcnGroups => "tcn_groups",
            StudySweep::Blocks => "blocks",
        }
    }
}

/// Everything a run needs, parsed from flat key=value text. Paths are
/// kept as written; relative paths resolve against the process working
/// directory.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub values_csv: Option<PathBuf>,
    pub adjacency_csv: Vec<PathBuf>,
    pub mode: TargetMode,
    pub history_len: usize,
    pub horizon: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub mask: MaskSource,
    pub embed_dim: usize,
    pub tcn_layers: usize,
    pub kernel_size: usize,
    pub dilations: Option<Vec<usize>>,
    pub tcn_groups: usize,
    pub se_reduction: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mha_groups: usize,
    pub ffn_groups: usize,
    pub ffn_hidden: Option<usize>,
    pub pattern: Option<Vec<BlockKind>>,
    pub head_hidden: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub patience: Option<usize>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthSpec,
    pub study_sweep: Option<StudySweep>,
    pub study_values: Vec<usize>,
    pub study_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data_path: None,
            values_csv: None,
            adjacency_csv: Vec::new(),
            mode: TargetMode::MultiStep,
            history_len: 12,
            horizon: 12,
            split_train: 0.6,
            split_val: 0.2,
            mask: MaskSource::Adjacency,
            embed_dim: 64,
            tcn_layers: 4,
            kernel_size: 2,
            dilations: None,
            tcn_groups: 4,
            se_reduction: 8,
            blocks: 4,
            heads: 8,
            mha_groups: 2,
            ffn_groups: 2,
            ffn_hidden: None,
            pattern: None,
            head_hidden: None,
            lr: 0.001,
            epochs: 30,
            batch_size: 8,
            grad_clip: None,
            patience: None,
            seed: 0,
            checkpoint: None,
            synth: SynthSpec::default(),
            study_sweep: None,
            study_values: Vec::new(),
            study_epochs: 30,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, format!("{e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, CliConfigError> {
    v.split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = RunConfig::default();
        for (key, v) in &map {
            match key.as_str() {
                "data.path" => cfg.data_path = Some(PathBuf::from(v)),
                "data.values" => cfg.values_csv = Some(PathBuf::from(v)),
                "data.adjacency" => {
                    cfg.adjacency_csv = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| PathBuf::from(s.trim()))
                        .collect()
                }
                "mode" => {
                    cfg.mode = match v.as_str() {
                        "multi" => TargetMode::MultiStep,
                        "single" => TargetMode::SingleStep,
                        other => return Err(bad(key, format!("expected multi or single, got {other:?}"))),
                    }
                }
                "history_len" => cfg.history_len = parse_num(key, v)?,
                "horizon" => cfg.horizon = parse_num(key, v)?,
                "split.train" => cfg.split_train = parse_num(key, v)?,
                "split.val" => cfg.split_val = parse_num(key, v)?,
                "mask" => {
                    cfg.mask = match v.as_str() {
                        "adjacency" => MaskSource::Adjacency,
                        "all-true" => MaskSource::AllTrue,
                        "none" => MaskSource::None,
                        other => {
                            return Err(bad(
                                key,
                                format!("expected adjacency, all-true, or none, got {other:?}"),
                            ))
                        }
                    }
                }
                "model.embed_dim" => cfg.embed_dim = parse_num(key, v)?,
                "model.tcn_layers" => cfg.tcn_layers = parse_num(key, v)?,
                "model.kernel_size" => cfg.kernel_size = parse_num(key, v)?,
                "model.dilations" => cfg.dilations = Some(parse_list(key, v)?),
                "model.tcn_groups" => cfg.tcn_groups = parse_num(key, v)?,
                "model.se_reduction" => cfg.se_reduction = parse_num(key, v)?,
                "model.blocks" => cfg.blocks = parse_num(key, v)?,
                "model.heads" => cfg.heads = parse_num(key, v)?,
                "model.mha_groups" => cfg.mha_groups = parse_num(key, v)?,
                "model.ffn_groups" => cfg.ffn_groups = parse_num(key, v)?,
                "model.ffn_hidden" => cfg.ffn_hidden = Some(parse_num(key, v)?),
                "model.head_hidden" => cfg.head_hidden = Some(parse_num(key, v)?),
                "model.pattern" => {
                    let pattern = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| match s.trim() {
                            "global" => Ok(BlockKind::Global),
                            "local" => Ok(BlockKind::Local),
                            other => Err(bad(key, format!("expected global or local, got {other:?}"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    cfg.pattern = Some(pattern);
                }
                "train.lr" => cfg.lr = parse_num(key, v)?,
                "train.epochs" => cfg.epochs = parse_num(key, v)?,
                "train.batch_size" => cfg.batch_size = parse_num(key, v)?,
                "train.grad_clip" => cfg.grad_clip = Some(parse_num(key, v)?),
                "train.patience" => cfg.patience = Some(parse_num(key, v)?),
                "seed" => cfg.seed = parse_num(key, v)?,
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                "synth.n" => cfg.synth.n = parse_num(key, v)?,
                "synth.t" => cfg.synth.t = parse_num(key, v)?,
                "synth.f" => cfg.synth.f = parse_num(key, v)?,
                "synth.density" => cfg.synth.density = parse_num(key, v)?,
                "synth.coupling" => cfg.synth.coupling = parse_num(key, v)?,
                "synth.noise" => cfg.synth.noise = parse_num(key, v)?,
                "synth.kind" => {
                    cfg.synth.kind = match v.as_str() {
                        "sinusoids" => SynthKind::CoupledSinusoids,
                        "walk" => SynthKind::DiffusedWalk,
                        other => {
                            return Err(bad(key, format!("expected sinusoids or walk, got {other:?}")))
                        }
                    }
                }
                "study.sweep" => {
                    cfg.study_sweep = Some(match v.as_str() {
                        "embed_dim" => StudySweep::EmbedDim,
                        "tcn_groups" => StudySweep::TcnGroups,
                        "blocks" => StudySweep::Blocks,
                        other => {
                            return Err(bad(
                                key,
                                format!("expected embed_dim, tcn_groups, or blocks, got {other:?}"),
                            ))
                        }
                    })
                }
                "study.values" => cfg.study_values = parse_list(key, v)?,
                "study.epochs" => cfg.study_epochs = parse_num(key, v)?,
                _ => {
                    return Err(CliConfigError::UnknownKey {
                        key: key.clone(),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig, CliConfigError> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.dilations
            .clone()
            .unwrap_or_else(|| (0..self.tcn_layers).map(|i| 1usize << i).collect())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.embed_dim)
    }

    pub fn pattern(&self) -> Vec<BlockKind> {
        self.pattern
            .clone()
            .unwrap_or_else(|| GlFormerConfig::alternating_pattern(self.blocks))
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden
            .unwrap_or_else(|| ModelConfig::default_head_hidden(self.mode, self.embed_dim))
    }

    /// Assembles and validates the model configuration for a dataset
    /// with the given shape.
    pub fn model_config(
        &self,
        n_nodes: usize,
        in_features: usize,
    ) -> Result<ModelConfig, CliConfigError> {
        let config = ModelConfig {
            n_nodes,
            in_features,
            history_len: self.history_len,
            horizon: self.horizon,
            mode: self.mode,
            ltcn: LtcnConfig {
                n_layers: self.tcn_layers,
                embed_dim: self.embed_dim,
                kernel_size: self.kernel_size,
                dilations: self.dilations(),
                groups: self.tcn_groups,
                se_reduction: self.se_reduction,
            },
            glformer: GlFormerConfig {
                n_blocks: self.blocks,
                embed_dim: self.embed_dim,
                heads: self.heads,
                mha_groups: self.mha_groups,
                ffn_groups: self.ffn_groups,
                hidden_dim: self.ffn_hidden(),
                pattern: self.pattern(),
            },
            head_hidden: self.head_hidden(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliConfigError> {
        let config = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            grad_clip: self.grad_clip,
            patience: self.patience,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            history_len: self.history_len,
            horizon: self.horizon,
            mode: self.mode,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            val: self.split_val,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_out_a_minimal_file() {
        let cfg = RunConfig::parse("data.path = data.cts\n").unwrap();
        assert_eq!(cfg.data_path.as_deref(), Some(Path::new("data.cts")));
        assert_eq!(cfg.embed_dim, 64);
        assert_eq!(cfg.dilations(), vec![1, 2, 4, 8]);
        assert_eq!(cfg.ffn_hidden(), 256);
        assert_eq!(cfg.head_hidden(), 512);
        assert_eq!(cfg.pattern().len(), 4);
        assert_eq!(cfg.pattern()[0], BlockKind::Global);
        assert_eq!(cfg.pattern()[1], BlockKind::Local);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\nmode = single  # trailing\nseed = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, TargetMode::SingleStep);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("model.embedd_dim = 32\n").unwrap_err();
        assert!(matches!(err, CliConfigError::UnknownKey { .. }), "got: {err}");
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = RunConfig::parse("mode multi\n").unwrap_err();
        match err {
            CliConfigError::BadLine { line, .. } => assert_eq!(line, 1),
            other => panic!("got: {other}"),
        }
    }

    #[test]
    fn bad_numbers_name_the_key() {
        let err = RunConfig::parse("train.lr = fast\n").unwrap_err();
        match err {
            CliConfigError::BadValue { key, .. } => assert_eq!(key, "train.lr"),
            other => panic!("got: {other}"),
        }
    }

    #[test]
    fn model_config_surfaces_divisibility_violations() {
        let cfg = RunConfig::parse("model.embed_dim = 30\n").unwrap();
        // 30 is not divisible by the default 4 temporal groups.
        let err = cfg.model_config(8, 1).unwrap_err();
        assert!(err.to_string().contains("divisible"), "got: {err}");
    }

    #[test]
    fn single_mode_head_defaults_to_embed_dim() {
        let cfg = RunConfig::parse("mode = single\nmodel.embed_dim = 32\n").unwrap();
        assert_eq!(cfg.head_hidden(), 32);
    }

    #[test]
    fn study_fields_parse() {
        let cfg =
            RunConfig::parse("study.sweep = tcn_groups\nstudy.values = 1,2,4\nstudy.epochs = 5\n")
                .unwrap();
        assert_eq!(cfg.study_sweep, Some(StudySweep::TcnGroups));
        assert_eq!(cfg.study_values, vec![1, 2, 4]);
        assert_eq!(cfg.study_epochs, 5);
    }
}
