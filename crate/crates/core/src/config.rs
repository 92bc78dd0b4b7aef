//! TOML run configuration. Every section has defaults, unknown keys are
//! rejected, and errors carry the dotted path of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io;
use crate::error::{Error, Result};
use crate::evaluation::{EvalOptions, ScenarioSpec, DEFAULT_ENSEMBLE_SIZES, DEFAULT_LAMBDA2_GRID};
use crate::losses::{AdversarialForm, LossWeights};
use crate::nets::{self, DiscriminatorConfig, GeneratorConfig, DEFAULT_FRAME_LEN};
use crate::surrogates::{SurrogateFamily, SurrogateSpec};
use crate::training::TrainConfig;
use crate::transcription::{Embedder, TranscriptionBackend};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub frame_len: usize,
    pub sample_rate: u32,
    /// Clip count for `prepare-toy`.
    pub toy_clips: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            frame_len: DEFAULT_FRAME_LEN,
            sample_rate: audio_io::DEFAULT_SAMPLE_RATE,
            toy_clips: 2000,
        }
    }
}

/// Attack ensemble plus the recipe for training toy surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub members: Vec<SurrogateSpec>,
    pub surrogate_epochs: usize,
    pub surrogate_lr: f64,
    pub surrogate_batch_size: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        // Weights resolve against the working directory, then SPOOFBREAK_CACHE.
        let members = [SurrogateFamily::ResTssdnetLike, SurrogateFamily::IncTssdnetLike]
            .into_iter()
            .map(|f| SurrogateSpec::with_weights(f, format!("{}.safetensors", f.name())))
            .collect();
        EnsembleSection { members, surrogate_epochs: 20, surrogate_lr: 3e-3, surrogate_batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscriptionSection {
    /// `mock` or `asr_plugin`.
    pub backend: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_command: Option<Vec<String>>,
    /// `hashed` or `plugin`.
    pub embedder: String,
    pub embedding_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder_command: Option<Vec<String>>,
}

impl Default for TranscriptionSection {
    fn default() -> Self {
        TranscriptionSection {
            backend: "mock".into(),
            asr_command: None,
            embedder: "hashed".into(),
            embedding_dim: crate::transcription::DEFAULT_EMBED_DIM,
            embedder_command: None,
        }
    }
}

fn command(cmd: &Option<Vec<String>>, path: &str) -> Result<Vec<String>> {
    match cmd {
        Some(c) if !c.is_empty() => Ok(c.clone()),
        _ => Err(Error::config(path, "a nonempty command is required")),
    }
}

impl TranscriptionSection {
    pub fn backend(&self) -> Result<TranscriptionBackend> {
        match self.backend.as_str() {
            "mock" => Ok(TranscriptionBackend::Mock),
            "asr_plugin" => Ok(TranscriptionBackend::AsrPlugin {
                command: command(&self.asr_command, "transcription.asr_command")?,
            }),
            other => Err(Error::config("transcription.backend", format!("unknown backend `{other}`"))),
        }
    }

    pub fn embedder(&self) -> Result<Embedder> {
        match self.embedder.as_str() {
            "hashed" if self.embedding_dim > 0 => Ok(Embedder::Hashed { dim: self.embedding_dim }),
            "hashed" => Err(Error::config("transcription.embedding_dim", "must be positive")),
            "plugin" => Ok(Embedder::Plugin { command: command(&self.embedder_command, "transcription.embedder_command")? }),
            other => Err(Error::config("transcription.embedder", format!("unknown embedder `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub adversarial_form: AdversarialForm,
}

impl Default for LossesSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossesSection {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            adversarial_form: AdversarialForm::default(),
        }
    }
}

impl LossesSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3, lambda4: self.lambda4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub train_discriminator: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            train_discriminator: t.train_discriminator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub threshold: f64,
    pub scenarios: Vec<ScenarioSpec>,
    pub lambda2_grid: Vec<f64>,
    pub ensemble_sizes: Vec<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            threshold: 0.5,
            scenarios: Vec::new(),
            lambda2_grid: DEFAULT_LAMBDA2_GRID.to_vec(),
            ensemble_sizes: DEFAULT_ENSEMBLE_SIZES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub ensemble: EnsembleSection,
    pub transcription: TranscriptionSection,
    pub losses: LossesSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// Parses TOML text, fills defaults, and validates.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { origin.to_string() } else { path };
            Error::config(path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Writes the fully resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }

    /// Cross-field checks on top of per-field parsing.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if nets::pooled_len(self.data.frame_len).is_none() {
            return Err(Error::config("data.frame_len", format!("{} is too short for the discriminator", self.data.frame_len)));
        }
        if self.generator.highpass_taps % 2 == 0 || self.generator.highpass_taps > self.data.frame_len {
            return Err(Error::config(
                "generator.highpass_taps",
                format!("must be odd and at most data.frame_len ({})", self.data.frame_len),
            ));
        }
        if self.generator.channels.contains(&0) {
            return Err(Error::config("generator.channels", "widths must be positive"));
        }
        if self.discriminator.channels == 0 || self.discriminator.fc.contains(&0) {
            return Err(Error::config("discriminator", "widths must be positive"));
        }
        if self.data.toy_clips < 4 || self.data.toy_clips % 2 != 0 {
            return Err(Error::config("data.toy_clips", "must be even and at least 4"));
        }
        for (i, m) in self.ensemble.members.iter().enumerate() {
            m.family().map_err(|_| Error::config(format!("ensemble.members[{i}].family"), format!("unknown family `{}`", m.family)))?;
        }
        if self.ensemble.surrogate_epochs == 0 || self.ensemble.surrogate_batch_size < 2 {
            return Err(Error::config("ensemble", "surrogate_epochs must be positive and surrogate_batch_size at least 2"));
        }
        if !(self.ensemble.surrogate_lr > 0.0 && self.ensemble.surrogate_lr.is_finite()) {
            return Err(Error::config("ensemble.surrogate_lr", "must be positive"));
        }
        self.transcription.backend()?;
        self.transcription.embedder()?;
        let t = self.evaluation.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config("evaluation.threshold", format!("must lie in [0, 1], got {t}")));
        }
        if let Some(v) = self.evaluation.lambda2_grid.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::config("evaluation.lambda2_grid", format!("entries must be finite and >= 0, got {v}")));
        }
        if self.evaluation.ensemble_sizes.contains(&0) {
            return Err(Error::config("evaluation.ensemble_sizes", "sizes must be positive"));
        }
        for (i, s) in self.evaluation.scenarios.iter().enumerate() {
            for (j, v) in s.victims.iter().enumerate() {
                v.family().map_err(|_| {
                    Error::config(format!("evaluation.scenarios[{i}].victims[{j}].family"), format!("unknown family `{}`", v.family))
                })?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            frame_len: self.data.frame_len,
            sample_rate: self.data.sample_rate,
            batch_size: self.training.batch_size,
            total_steps: self.training.total_steps,
            lr_g: self.training.lr_g,
            lr_d: self.training.lr_d,
            weights: self.losses.weights(),
            adversarial_form: self.losses.adversarial_form,
            seed: self.training.seed,
            checkpoint_every: self.training.checkpoint_every,
            ensemble: self.ensemble.members.clone(),
            transcription: self.transcription.backend().unwrap_or(TranscriptionBackend::Mock),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            train_discriminator: self.training.train_discriminator,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { threshold: self.evaluation.threshold, frame_len: self.data.frame_len, sample_rate: self.data.sample_rate }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_path(text: &str) -> String {
        match RunConfig::from_toml_str(text, "t.toml") {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", "t.toml").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.losses.lambda2, 1e-4);
        assert_eq!(c.data.frame_len, 5980);
        let families: Vec<_> = c.ensemble.members.iter().map(|m| m.family.as_str()).collect();
        assert_eq!(families, ["res_tssdnet_like", "inc_tssdnet_like"]);
    }

    #[test]
    fn negative_weight_reports_dotted_path() {
        assert_eq!(err_path("[losses]\nlambda1 = -1.0\n"), "losses.lambda1");
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        assert_eq!(err_path("[training]\nlearning_rate = 0.1\n"), "training.learning_rate");
        assert_eq!(err_path("[bogus]\nx = 1\n"), "bogus");
    }

    #[test]
    fn type_errors_name_the_key() {
        assert_eq!(err_path("[data]\nframe_len = \"long\"\n"), "data.frame_len");
        assert_eq!(err_path("[generator]\nchannels = [1, 2]\n"), "generator.channels");
    }

    #[test]
    fn cross_field_checks() {
        assert_eq!(err_path("[data]\nframe_len = 10\n"), "data.frame_len");
        assert_eq!(err_path("[data]\nframe_len = 64\n"), "generator.highpass_taps");
        assert_eq!(err_path("[[ensemble.members]]\nfamily = \"nope\"\n"), "ensemble.members[0].family");
        assert_eq!(err_path("[transcription]\nbackend = \"asr_plugin\"\n"), "transcription.asr_command");
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = r#"
            [data]
            frame_len = 1024
            [generator]
            channels = [8, 8, 8, 8]
            [losses]
            lambda2 = 0.01
            adversarial_form = "paper"
            [[ensemble.members]]
            family = "toy_cnn_small"
            weights_path = "s.safetensors"
            [[evaluation.scenarios]]
            scenario = "black"
            victims = [{ family = "res_tssdnet_like" }]
        "#;
        let c = RunConfig::from_toml_str(text, "t.toml").unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap(), "r.toml").unwrap();
        assert_eq!(c, again);
        assert_eq!(c.train_config().weights.lambda2, 0.01);
    }
}
