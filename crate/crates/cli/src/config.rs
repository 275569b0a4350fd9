//! Experiment configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use arepas_core::augment::AugmentSpec;
use arepas_core::canny::CannyParams;
use arepas_core::recon::{DiscriminatorSpec, GeneratorSpec, ReconTrainConfig};
use arepas_core::siamese::{ScorerTrainConfig, SiameseSpec};
use arepas_core::synth::SynthConfig;
use arepas_core::Modality;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconStage {
    /// Fraction of the train split held out for validation (reconstruction L1, scorer accuracy).
    pub holdout_fraction: f64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: ReconTrainConfig,
}

impl Default for ReconStage {
    fn default() -> Self {
        ReconStage {
            holdout_fraction: 0.1,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            train: ReconTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Patch grid stride; half the patch size when unset.
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Restrict AUPRC to foreground pixels. Unset means on for CT only.
    pub auprc_foreground_only: Option<bool>,
    pub sweep_patch_sizes: Vec<usize>,
    /// Resamples for the bootstrap interval of the per-image DICE mean.
    pub bootstrap_resamples: usize,
    /// Number of test images rendered as overlays in the report (0 = all).
    pub max_overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            auprc_foreground_only: None,
            sweep_patch_sizes: vec![8, 12, 16, 20, 24],
            bootstrap_resamples: 1000,
            max_overlays: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Output directory of `synth-generate`.
    pub synth_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub modality: Modality,
    pub image_size: usize,
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    #[serde(default)]
    pub canny: CannyParams,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default)]
    pub recon: ReconStage,
    #[serde(default)]
    pub siamese: SiameseSpec,
    #[serde(default)]
    pub scorer: ScorerTrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            modality: Modality::Synth,
            image_size: 64,
            seed: 0,
            canny: CannyParams::default(),
            augment: AugmentSpec::default(),
            recon: ReconStage::default(),
            siamese: SiameseSpec::default(),
            scorer: ScorerTrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Settings that finish the synthetic experiment on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = ExperimentConfig::default();
        c.augment.max_augmentations_per_image = 2;
        c.recon.generator.ngf = 8;
        c.recon.generator.resnet_blocks = 3;
        c.recon.discriminator.ndf = 8;
        c.recon.train.lambda_perceptual = 0.0;
        c.scorer.positives_per_image = 8;
        c.scorer.negatives_per_image = 8;
        c.scorer.batch_size = 128;
        c
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(CliError::Config(format!("image_size {} must be a positive multiple of 4", self.image_size)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if !(0.0..1.0).contains(&self.recon.holdout_fraction) {
            return Err(CliError::Config("recon.holdout_fraction must lie in [0, 1)".into()));
        }
        if self.inference.stride == Some(0) {
            return Err(CliError::Config("inference.stride must be positive".into()));
        }
        if self.eval.sweep_patch_sizes.iter().any(|&s| s == 0 || s > self.image_size) {
            return Err(CliError::Config("sweep patch sizes must lie in [1, image_size]".into()));
        }
        if self.siamese.patch_size > self.image_size {
            return Err(CliError::Config("siamese.patch_size exceeds image_size".into()));
        }
        self.canny.validate().map_err(invalid)?;
        self.augment.validate().map_err(invalid)?;
        self.recon.generator.validate().map_err(invalid)?;
        self.recon.discriminator.validate().map_err(invalid)?;
        self.recon.train.validate().map_err(invalid)?;
        self.scorer.validate().map_err(invalid)?;
        self.siamese.validate().map_err(invalid)?;
        if self.modality == Modality::Synth {
            self.synth.validate().map_err(invalid)?;
            if self.synth.image_size != self.image_size {
                return Err(CliError::Config("synth.image_size must equal image_size".into()));
            }
        }
        Ok(())
    }

    /// AUPRC pixel restriction after applying the modality default.
    pub fn auprc_foreground_only(&self) -> bool {
        self.eval.auprc_foreground_only.unwrap_or(self.modality == Modality::Ct)
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.augment.seed = self.seed;
        c.recon.train.seed = self.seed;
        c.scorer.seed = self.seed;
        c.synth.seed = self.seed;
        c
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(invalid)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
