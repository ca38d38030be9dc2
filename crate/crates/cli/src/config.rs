//! Run configuration files. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use petkit::adapters::{HoulsbyPlacement, HoulsbySpec};
use petkit::train::{ExperimentSpec, DEFAULT_FRACTIONS};
use petkit::{BackboneConfig, CnnStrategy, ConvBlockSpec, PetStrategy, Precision, SyntheticTaskSpec, TrainConfig};
use serde::Deserialize;

use crate::CliError;

/// Reference for every key and its default; shown by `--help`.
pub const CONFIG_HELP: &str = r#"CONFIG FILE (TOML; unknown keys are errors)

  mode = "verify-64bit"          # or "train-32bit"; gradcheck always uses 64-bit
  out = "runs"                   # output root, overridden by --out

  backbone = "mini"              # "mini" | "hubert-base-shape"; or a table:
  [backbone]
  preset = "mini"                # or the inline keys below instead of a preset:
  # conv_blocks = [{ in_channels = 1, out_channels = 16, kernel = 10, stride = 5 }, ...]
  # n_layers = 2, hidden = 32, n_heads = 4, ff_dim = 64
  seed = 0                       # seed of the fixed backbone weights

  [strategy]
  kind = "chapter"               # fine-tune | frozen | weighted-sum | houlsby
                                 # | cnn-adapter | chapter
  # include_conv_tap = false     # weighted-sum only
  [strategy.cnn]                 # cnn-adapter and chapter only
  top_n = <all conv blocks>      # adapters on the last top_n blocks
  compression = 1                # output channels divided by n, then tiled
  alpha = 1.0                    # branch scale
  [strategy.houlsby]             # houlsby and chapter only
  bottleneck = 32
  placement = "after-second-ff"  # or "after-attention-and-ff"

  [task]                         # synthetic classification task
  n_classes = 10
  samples_per_class = 100        # split 8:1:1 into train/val/test
  wave_length = 400
  snr_db = 30.0                  # inf for no noise
  seed = 0

  [train]
  lr_grid = [1e-3, 1e-4, 1e-5]
  epochs = 50
  batch_size = 8
  optimizer = "adam"             # or "sgd-momentum" (momentum 0.9)
  seed = 0                       # overridden by --seed
  subset_fraction = 1.0

  [sweep]                        # used by `sweep` instead of [strategy]
  strategies = [{ kind = "fine-tune" }, { kind = "chapter" }]
  fractions = [1.0, 0.5, 0.25, 0.1]
  seeds = [0, 1, 2]              # at least 3
"#;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "verify-64bit")]
    Verify64,
    #[serde(rename = "train-32bit")]
    Train32,
}

impl Mode {
    pub fn precision(self) -> Precision {
        match self {
            Mode::Verify64 => Precision::F64,
            Mode::Train32 => Precision::F32,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneTable {
    pub preset: Option<String>,
    pub conv_blocks: Option<Vec<ConvBlockSpec>>,
    pub n_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub n_heads: Option<usize>,
    pub ff_dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// `backbone = "name"` or a `[backbone]` table.
#[derive(Clone, Debug, Default)]
pub struct BackboneSection(pub BackboneTable);

impl<'de> Deserialize<'de> for BackboneSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visit;
        impl<'de> serde::de::Visitor<'de> for Visit {
            type Value = BackboneSection;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a preset name or a backbone table")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Self::Value, E> {
                Ok(BackboneSection(BackboneTable {
                    preset: Some(v.to_string()),
                    ..BackboneTable::default()
                }))
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(self, map: A) -> Result<Self::Value, A::Error> {
                BackboneTable::deserialize(serde::de::value::MapAccessDeserializer::new(map)).map(BackboneSection)
            }
        }
        d.deserialize_any(Visit)
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSection {
    pub top_n: Option<usize>,
    pub compression: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoulsbySection {
    pub bottleneck: Option<usize>,
    pub placement: Option<HoulsbyPlacement>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: String,
    pub cnn: Option<CnnSection>,
    pub houlsby: Option<HoulsbySection>,
    pub include_conv_tap: Option<bool>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub strategies: Vec<StrategySection>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub mode: Mode,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub backbone: BackboneSection,
    pub strategy: Option<StrategySection>,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweep: Option<SweepSection>,
}

impl RunConfigFile {
    /// Reads, parses and validates every table present.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file = Self::parse(&text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let (_, backbone) = self.backbone()?;
        if self.strategy.is_some() {
            self.strategy(&backbone)?;
        }
        if self.sweep.is_some() {
            let (_, sweep) = self.sweep_experiments()?;
            if sweep.seeds.len() < 3 {
                return Err(CliError::Config(format!("sweep.seeds needs at least 3 seeds, got {}", sweep.seeds.len())));
            }
            if let Some(f) = sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return Err(CliError::Config(format!("sweep fraction {f} outside (0, 1]")));
            }
        }
        self.task.validate()?;
        if backbone.output_length(self.task.wave_length) == 0 {
            return Err(CliError::Config(format!(
                "task.wave_length {} is shorter than the backbone's receptive field",
                self.task.wave_length
            )));
        }
        self.train_config()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if raw.get("train").and_then(|t| t.get("precision")).is_some() {
            return Err(CliError::Config("train.precision is not a config key; use the top-level `mode`".into()));
        }
        Ok(file)
    }

    /// Backbone shape and a name for reports.
    pub fn backbone(&self) -> Result<(String, BackboneConfig), CliError> {
        let b = &self.backbone.0;
        let inline = b.conv_blocks.is_some() || b.n_layers.is_some() || b.hidden.is_some() || b.n_heads.is_some() || b.ff_dim.is_some();
        let (name, config) = match (&b.preset, inline) {
            (Some(_), true) => return Err(CliError::Config("backbone: give either preset or inline keys, not both".into())),
            (Some(p), false) => (p.clone(), BackboneConfig::preset(p)?),
            (None, false) => ("mini".to_string(), BackboneConfig::mini()),
            (None, true) => {
                let missing = |k: &str| CliError::Config(format!("backbone: inline spec is missing {k}"));
                let config = BackboneConfig {
                    conv_blocks: b.conv_blocks.clone().ok_or_else(|| missing("conv_blocks"))?,
                    n_layers: b.n_layers.ok_or_else(|| missing("n_layers"))?,
                    hidden: b.hidden.ok_or_else(|| missing("hidden"))?,
                    n_heads: b.n_heads.ok_or_else(|| missing("n_heads"))?,
                    ff_dim: b.ff_dim.ok_or_else(|| missing("ff_dim"))?,
                };
                ("inline".to_string(), config)
            }
        };
        config.validate()?;
        Ok((name, config))
    }

    pub fn strategy(&self, backbone: &BackboneConfig) -> Result<PetStrategy, CliError> {
        let s = self
            .strategy
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [strategy] table".into()))?;
        s.resolve(backbone)
    }

    pub fn experiment(&self) -> Result<ExperimentSpec, CliError> {
        let (name, backbone) = self.backbone()?;
        let strategy = self.strategy(&backbone)?;
        Ok(ExperimentSpec {
            backbone_name: name,
            backbone,
            backbone_seed: self.backbone.0.seed,
            strategy,
        })
    }

    pub fn sweep_experiments(&self) -> Result<(Vec<ExperimentSpec>, &SweepSection), CliError> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [sweep] table".into()))?;
        let (name, backbone) = self.backbone()?;
        let exps = sweep
            .strategies
            .iter()
            .map(|s| {
                Ok(ExperimentSpec {
                    backbone_name: name.clone(),
                    backbone: backbone.clone(),
                    backbone_seed: self.backbone.0.seed,
                    strategy: s.resolve(&backbone)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok((exps, sweep))
    }

    /// Training settings with the file's mode applied.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut t = self.train.clone();
        t.precision = self.mode.precision();
        t.validate()?;
        Ok(t)
    }
}

impl StrategySection {
    pub fn resolve(&self, backbone: &BackboneConfig) -> Result<PetStrategy, CliError> {
        let reject = |key: &str, present: bool| {
            if present {
                Err(CliError::Config(format!("strategy {:?} does not take `{key}`", self.kind)))
            } else {
                Ok(())
            }
        };
        let uses_cnn = matches!(self.kind.as_str(), "cnn-adapter" | "chapter");
        let uses_houlsby = matches!(self.kind.as_str(), "houlsby" | "chapter");
        reject("cnn", self.cnn.is_some() && !uses_cnn)?;
        reject("houlsby", self.houlsby.is_some() && !uses_houlsby)?;
        reject("include_conv_tap", self.include_conv_tap.is_some() && self.kind != "weighted-sum")?;
        let cnn = || {
            let c = self.cnn.unwrap_or_default();
            CnnStrategy {
                top_n: c.top_n.unwrap_or(backbone.conv_blocks.len()),
                compression: c.compression.unwrap_or(1),
                alpha: c.alpha.unwrap_or(1.0),
            }
        };
        let houlsby = || {
            let h = self.houlsby.unwrap_or_default();
            let d = HoulsbySpec::default();
            HoulsbySpec {
                bottleneck: h.bottleneck.unwrap_or(d.bottleneck),
                placement: h.placement.unwrap_or(d.placement),
            }
        };
        let strategy = match self.kind.as_str() {
            "fine-tune" => PetStrategy::FineTune,
            "frozen" => PetStrategy::Frozen,
            "weighted-sum" => PetStrategy::WeightedSum {
                include_conv_tap: self.include_conv_tap.unwrap_or(false),
            },
            "houlsby" => PetStrategy::Houlsby { houlsby: houlsby() },
            "cnn-adapter" => PetStrategy::CnnAdapter { cnn: cnn() },
            "chapter" => PetStrategy::Chapter { cnn: cnn(), houlsby: houlsby() },
            other => return Err(CliError::Config(format!("unknown strategy kind {other:?}"))),
        };
        strategy.validate(backbone)?;
        Ok(strategy)
    }
}
