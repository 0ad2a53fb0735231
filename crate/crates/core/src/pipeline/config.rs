use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::LabelSchema;
use crate::calibration::CalibrationConfig;
use crate::mlp::TrainConfig;
use crate::synth::SynthConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Baseline,
    Uncnet,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Baseline => "baseline",
            Model::Uncnet => "uncnet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Uncnet,
    #[default]
    Both,
}

impl Mode {
    pub fn models(self) -> &'static [Model] {
        match self {
            Mode::Baseline => &[Model::Baseline],
            Mode::Uncnet => &[Model::Uncnet],
            Mode::Both => &[Model::Baseline, Model::Uncnet],
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "uncnet" => Ok(Mode::Uncnet),
            "both" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
    All,
}

impl EvalSplit {
    pub fn contains(self, split: Split) -> bool {
        match self {
            EvalSplit::All => true,
            EvalSplit::Train => split == Split::Train,
            EvalSplit::Val => split == Split::Val,
            EvalSplit::Test => split == Split::Test,
        }
    }
}

/// File locations. Unset entries default to fixed names inside `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub predictions_baseline: Option<PathBuf>,
    pub predictions_uncnet: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            features: None,
            labels: None,
            sidecar: None,
            predictions_baseline: None,
            predictions_uncnet: None,
        }
    }
}

impl Paths {
    fn in_out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn features(&self) -> PathBuf {
        self.features
            .clone()
            .unwrap_or_else(|| self.in_out("features.csv"))
    }

    pub fn labels(&self) -> PathBuf {
        self.labels
            .clone()
            .unwrap_or_else(|| self.in_out("labels.csv"))
    }

    pub fn sidecar(&self) -> PathBuf {
        self.sidecar
            .clone()
            .unwrap_or_else(|| self.in_out("synth.json"))
    }

    pub fn params(&self, model: Model) -> PathBuf {
        self.in_out(&format!("params_{}.json", model.name()))
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.in_out("loss_trace.csv")
    }

    pub fn predictions(&self, model: Model) -> PathBuf {
        let explicit = match model {
            Model::Baseline => &self.predictions_baseline,
            Model::Uncnet => &self.predictions_uncnet,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.in_out(&format!("predictions_{}.jsonl", model.name())))
    }

    pub fn report(&self) -> PathBuf {
        self.in_out("report.json")
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.features,
            &mut self.labels,
            &mut self.sidecar,
            &mut self.predictions_baseline,
            &mut self.predictions_uncnet,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
        }
    }
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train_fraction")]
    pub train: f64,
    #[serde(default = "default_val_fraction")]
    pub val: f64,
    /// Which samples `analyze` reports on.
    #[serde(default)]
    pub eval: EvalSplit,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: default_train_fraction(),
            val: default_val_fraction(),
            eval: EvalSplit::default(),
        }
    }
}

fn default_bins() -> usize {
    10
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_quantiles() -> usize {
    10
}
fn default_histogram_bins() -> usize {
    20
}
fn default_coverages() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 1.0]
}
fn default_k_extremes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Equal-width reliability bins (ECE, MCE, SCE).
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Equal-count ranges (ACE, TACE).
    #[serde(default = "default_bins")]
    pub ranges: usize,
    /// TACE confidence threshold.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Number of equal-count uncertainty groups for the BCE curve.
    #[serde(default = "default_quantiles")]
    pub quantiles: usize,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_coverages")]
    pub coverages: Vec<f64>,
    #[serde(default = "default_k_extremes")]
    pub k_extremes: usize,
}

impl AnalysisConfig {
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            bins: self.bins,
            ranges: self.ranges,
            epsilon: self.epsilon,
        }
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            ranges: default_bins(),
            epsilon: default_epsilon(),
            quantiles: default_quantiles(),
            histogram_bins: default_histogram_bins(),
            coverages: default_coverages(),
            k_extremes: default_k_extremes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub paths: Paths,
    pub schema: LabelSchema,
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Read a TOML config; relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve_against(base);
        Ok(config)
    }

    /// Seed override: replaces both the data and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
            if s.n_classes != self.schema.num_classes() {
                return Err(Error::Config(format!(
                    "synth has {} classes but schema names {}",
                    s.n_classes,
                    self.schema.num_classes()
                )));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        let sp = &self.split;
        if !(sp.train > 0.0 && sp.val >= 0.0 && sp.train + sp.val <= 1.0) {
            return Err(Error::Config(
                "split fractions need train > 0, val >= 0, train + val <= 1".into(),
            ));
        }
        let a = &self.analysis;
        if a.bins == 0 || a.ranges == 0 || a.histogram_bins == 0 {
            return Err(Error::Config(
                "bin and range counts must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.epsilon) {
            return Err(Error::Config("epsilon must be in [0, 1)".into()));
        }
        if a.quantiles < 2 {
            return Err(Error::Config("quantiles must be at least 2".into()));
        }
        if a.coverages.is_empty() || a.coverages.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
            return Err(Error::Config("coverages must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Deterministic train/val/test assignment from a hash of the sample id.
///
/// FNV-1a over the UTF-8 bytes, finalized with SplitMix64; the top 53 bits
/// give a uniform value `u` in `[0, 1)`: `u < train` is train, `u < train +
/// val` is val, the rest is test.
pub fn assign_split(sample_id: &str, split: &SplitConfig) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let u = (crate::rng::splitmix64(h) >> 11) as f64 / (1u64 << 53) as f64;
    if u < split.train {
        Split::Train
    } else if u < split.train + split.val {
        Split::Val
    } else {
        Split::Test
    }
}
