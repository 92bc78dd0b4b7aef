//! Frozen detectors scoring P(real): toy re-implementations of several
//! detector families, toy training, persistence, and an external adapter.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{self, AudioClip, DatasetManifest, Label, ManifestRecord, Subset};
use crate::error::{Error, Result};
use crate::external;
use crate::nn::{Activation, Adam, AdamConfig, BatchNorm1d, Conv1d, Layer, Linear, Module, Residual, Sequential, Real};
use crate::tensor_io;

pub const SURROGATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateFamily {
    ToyCnnSmall,
    ToyCnnLarge,
    ResTssdnetLike,
    IncTssdnetLike,
    External,
}

impl SurrogateFamily {
    pub const ALL: [SurrogateFamily; 5] = [
        SurrogateFamily::ToyCnnSmall,
        SurrogateFamily::ToyCnnLarge,
        SurrogateFamily::ResTssdnetLike,
        SurrogateFamily::IncTssdnetLike,
        SurrogateFamily::External,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateFamily::ToyCnnSmall => "toy_cnn_small",
            SurrogateFamily::ToyCnnLarge => "toy_cnn_large",
            SurrogateFamily::ResTssdnetLike => "res_tssdnet_like",
            SurrogateFamily::IncTssdnetLike => "inc_tssdnet_like",
            SurrogateFamily::External => "external",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            SurrogateFamily::ToyCnnSmall => 4,
            SurrogateFamily::ToyCnnLarge => 8,
            SurrogateFamily::ResTssdnetLike | SurrogateFamily::IncTssdnetLike => 8,
            SurrogateFamily::External => 0,
        }
    }

    /// Families bundled with the library (everything but `external`).
    pub fn is_builtin(self) -> bool {
        self != SurrogateFamily::External
    }
}

impl fmt::Display for SurrogateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurrogateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("family", format!("unknown surrogate family `{s}`")))
    }
}

/// Scaled second difference. Every built-in family starts with this fixed
/// pre-emphasis so that broadband residue is not drowned out by the tonal
/// content.
pub const FRONT_END_TAPS: [f64; 3] = [8.0, -16.0, 8.0];

fn stem<R: rand::Rng>(w: usize, rng: &mut R) -> Vec<Layer<f32>> {
    vec![
        Layer::Conv(Conv1d::new(1, w, 9, 4, 4, rng)),
        Layer::BatchNorm(BatchNorm1d::new(w)),
        Layer::Act(Activation::Relu),
    ]
}

fn conv_bn(in_c: usize, out_c: usize, k: usize, act: Activation, rng: &mut ChaCha8Rng) -> Vec<Layer<f32>> {
    vec![
        Layer::Conv(Conv1d::same(in_c, out_c, k, rng)),
        Layer::BatchNorm(BatchNorm1d::new(out_c)),
        Layer::Act(act),
    ]
}

/// Builds the two-logit network of a built-in family.
pub fn build_network(family: SurrogateFamily, width: usize, seed: u64) -> Result<Sequential<f32>> {
    if width == 0 {
        return Err(Error::config("width", "surrogate width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let w = width;
    let mut layers = vec![Layer::FixedFir(FRONT_END_TAPS.to_vec())];
    match family {
        SurrogateFamily::ResTssdnetLike => {
            layers.extend(stem(w, rng));
            for _ in 0..2 {
                let mut body = conv_bn(w, w, 3, Activation::Relu, rng);
                body.push(Layer::Conv(Conv1d::same(w, w, 3, rng)));
                body.push(Layer::BatchNorm(BatchNorm1d::new(w)));
                layers.push(Layer::Residual(Box::new(Residual {
                    body: Sequential::new(body),
                    shortcut: None,
                    act: Activation::Relu,
                })));
                layers.push(Layer::MaxPool(4));
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(w, w, rng)));
            layers.push(Layer::Act(Activation::Relu));
            layers.push(Layer::Linear(Linear::new(w, 2, rng)));
        }
        SurrogateFamily::IncTssdnetLike => {
            layers.extend(stem(w, rng));
            let b = (w / 2).max(1);
            for _ in 0..2 {
                let branches = [1usize, 3, 5].iter().map(|&k| Sequential::new(conv_bn(w, b, k, Activation::Relu, rng))).collect();
                layers.push(Layer::Concat(branches));
                layers.extend(conv_bn(3 * b, w, 1, Activation::Relu, rng));
                layers.push(Layer::MaxPool(4));
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(w, 2, rng)));
        }
        SurrogateFamily::ToyCnnSmall => {
            layers.push(Layer::Conv(Conv1d::new(1, w, 15, 8, 7, rng)));
            layers.push(Layer::BatchNorm(BatchNorm1d::new(w)));
            layers.push(Layer::Act(Activation::Tanh));
            layers.push(Layer::MaxPool(4));
            layers.extend(conv_bn(w, w, 5, Activation::Tanh, rng));
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(w, 2, rng)));
        }
        SurrogateFamily::ToyCnnLarge => {
            layers.push(Layer::Conv(Conv1d::new(1, w, 15, 8, 7, rng)));
            layers.push(Layer::BatchNorm(BatchNorm1d::new(w)));
            layers.push(Layer::Act(Activation::Tanh));
            layers.push(Layer::MaxPool(4));
            layers.extend(conv_bn(w, 2 * w, 5, Activation::Tanh, rng));
            layers.push(Layer::MaxPool(2));
            layers.extend(conv_bn(2 * w, 2 * w, 5, Activation::Tanh, rng));
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Flatten);
            layers.push(Layer::Linear(Linear::new(2 * w, 2 * w, rng)));
            layers.push(Layer::Act(Activation::Tanh));
            layers.push(Layer::Linear(Linear::new(2 * w, 2, rng)));
        }
        SurrogateFamily::External => {
            return Err(Error::config("family", "external detectors have no built-in network"));
        }
    }
    Ok(Sequential::new(layers))
}

/// P(real) from two-class logits `[B, 2, 1]`.
fn p_real<T: Real>(logits: &Array3<T>, real_index: usize) -> Array1<f64> {
    let b = logits.dim().0;
    Array1::from_shape_fn(b, |i| {
        let zr = logits[[i, real_index, 0]].to_f64_lossy();
        let zf = logits[[i, 1 - real_index, 0]].to_f64_lossy();
        crate::nn::sigmoid(zr - zf)
    })
}

/// Persisted description of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub family: SurrogateFamily,
    pub width: usize,
    pub real_index: usize,
    pub heldout_accuracy: Option<f64>,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetDetector {
    pub net: Sequential<f32>,
    pub meta: SurrogateMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDetector {
    /// Program and leading arguments; the WAV path is appended.
    pub command: Vec<String>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    Net(NetDetector),
    External(ExternalDetector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub model_id: String,
    pub family: SurrogateFamily,
    pub frozen: bool,
    pub detector: Detector,
}

impl SurrogateModel {
    pub fn from_network(model_id: impl Into<String>, net: Sequential<f32>, meta: SurrogateMeta) -> Self {
        SurrogateModel {
            model_id: model_id.into(),
            family: meta.family,
            frozen: true,
            detector: Detector::Net(NetDetector { net, meta }),
        }
    }

    pub fn meta(&self) -> Option<&SurrogateMeta> {
        match &self.detector {
            Detector::Net(n) => Some(&n.meta),
            Detector::External(_) => None,
        }
    }

    pub fn width(&self) -> Option<usize> {
        self.meta().map(|m| m.width)
    }

    pub fn num_parameters(&self) -> usize {
        match &self.detector {
            Detector::Net(n) => n.net.num_parameters(),
            Detector::External(_) => 0,
        }
    }

    fn shape_err(&self, msg: impl fmt::Display) -> Error {
        Error::shape(format!("{}: {msg}", self.model_id))
    }

    fn check_batch<T>(&self, batch: &Array3<T>) -> Result<()> {
        let (b, c, l) = batch.dim();
        if b == 0 || c != 1 {
            return Err(self.shape_err(format!("expected [B, 1, L] with B > 0, got {:?}", batch.dim())));
        }
        if let Detector::Net(n) = &self.detector {
            if n.net.out_shape(1, l) != Some((2, 1)) {
                return Err(self.shape_err(format!("frame length {l} is too short")));
            }
        }
        Ok(())
    }

    /// P(real) for each item of a `[B, 1, L]` batch.
    pub fn score(&self, batch: &Array3<f32>) -> Result<Array1<f64>> {
        self.check_batch(batch)?;
        match &self.detector {
            Detector::Net(n) => Ok(p_real(&n.net.infer(batch), n.meta.real_index)),
            Detector::External(ext) => {
                let mut out = Array1::zeros(batch.dim().0);
                for (i, row) in batch.outer_iter().enumerate() {
                    let samples: Vec<f32> = row.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                    let clip = AudioClip::new(format!("{}_{i}", self.model_id), samples, ext.sample_rate)?;
                    out[i] = ext.score_clip(&clip)?;
                }
                Ok(out)
            }
        }
    }

    /// Clip-level P(real): the mean over the clip's frames.
    pub fn score_clip(&self, clip: &AudioClip, frame_len: usize) -> Result<f64> {
        match &self.detector {
            Detector::External(ext) => ext.score_clip(clip),
            Detector::Net(_) => {
                let frames = audio_io::chunk(&clip.samples, frame_len)?;
                let n = frames.len();
                let batch = Array3::from_shape_fn((n, 1, frame_len), |(i, _, t)| frames[i][t]);
                Ok(self.score(&batch)?.mean().expect("nonempty"))
            }
        }
    }

    /// A differentiable copy in element type `T`.
    pub fn differentiable<T: Real>(&self) -> Result<DiffSurrogate<T>> {
        match &self.detector {
            Detector::Net(n) => Ok(DiffSurrogate {
                model_id: self.model_id.clone(),
                net: n.net.cast(),
                real_index: n.meta.real_index,
            }),
            Detector::External(_) => Err(Error::Backend(format!(
                "{}: external detectors provide no gradients and cannot join the attack ensemble",
                self.model_id
            ))),
        }
    }

    /// Serialized weights and metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match &self.detector {
            Detector::Net(n) => {
                let mut tensors = BTreeMap::new();
                tensor_io::collect(&n.net, "net", &mut tensors);
                let meta = serde_json::to_value(&n.meta)?;
                tensor_io::to_bytes(&tensors, &meta).map_err(Error::Checkpoint)
            }
            Detector::External(e) => Ok(serde_json::to_vec(&e.command)?),
        }
    }

    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !matches!(self.detector, Detector::Net(_)) {
            return Err(Error::invalid("only network detectors can be saved"));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

impl ExternalDetector {
    pub fn score_clip(&self, clip: &AudioClip) -> Result<f64> {
        let out = external::run_on_wav(&self.command, clip).map_err(Error::Load)?;
        let line = out.lines().map(str::trim).find(|l| !l.is_empty()).ok_or_else(|| {
            Error::Load(format!("`{}` printed no score", self.command.join(" ")))
        })?;
        let p: f64 = line.parse().map_err(|e| Error::Load(format!("bad score `{line}`: {e}")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Load(format!("score {p} outside [0, 1]")));
        }
        Ok(p)
    }
}

/// Network copy used inside the attack's backward pass.
#[derive(Debug, Clone)]
pub struct DiffSurrogate<T> {
    pub model_id: String,
    pub net: Sequential<T>,
    pub real_index: usize,
}

pub struct SurrogateCache<T> {
    caches: Vec<crate::nn::Cache<T>>,
    probs: Array1<f64>,
    logits_dim: (usize, usize, usize),
}

impl<T: Real> DiffSurrogate<T> {
    /// P(real) per item. Batch norm runs with its frozen running statistics.
    pub fn forward(&self, batch: &Array3<T>) -> Result<(Array1<f64>, SurrogateCache<T>)> {
        let l = batch.dim().2;
        if batch.dim().1 != 1 || self.net.out_shape(1, l) != Some((2, 1)) {
            return Err(Error::shape(format!("{}: cannot score batch of shape {:?}", self.model_id, batch.dim())));
        }
        let (logits, caches) = self.net.forward(batch, false);
        let probs = p_real(&logits, self.real_index);
        Ok((probs.clone(), SurrogateCache { caches, probs, logits_dim: logits.dim() }))
    }

    /// `d(sum_i upstream_i * p_i) / d batch`.
    pub fn backward(&self, cache: SurrogateCache<T>, upstream: &Array1<f64>) -> Array3<T> {
        let p = &cache.probs;
        let mut dlogits = Array3::<T>::zeros(cache.logits_dim);
        for i in 0..p.len() {
            let g = upstream[i] * p[i] * (1.0 - p[i]);
            dlogits[[i, self.real_index, 0]] = T::lit(g);
            dlogits[[i, 1 - self.real_index, 0]] = T::lit(-g);
        }
        self.net.backward(cache.caches, dlogits, None)
    }

    pub fn score_with_grad(&self, batch: &Array3<T>, upstream: &Array1<f64>) -> Result<(Array1<f64>, Array3<T>)> {
        let (p, cache) = self.forward(batch)?;
        Ok((p, self.backward(cache, upstream)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEnsemble {
    pub members: Vec<SurrogateModel>,
}

impl SurrogateEnsemble {
    pub fn new(members: Vec<SurrogateModel>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("ensemble", "ensemble needs at least one member"));
        }
        Ok(SurrogateEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn fingerprints(&self) -> Result<Vec<[u8; 32]>> {
        self.members.iter().map(|m| m.fingerprint()).collect()
    }
}

/// `[M, B]` matrix whose row `i` is member `i`'s P(real).
pub fn ensemble_score(ensemble: &SurrogateEnsemble, batch: &Array3<f32>) -> Result<Array2<f64>> {
    let b = batch.dim().0;
    let mut out = Array2::zeros((ensemble.len(), b));
    for (i, m) in ensemble.members.iter().enumerate() {
        out.row_mut(i).assign(&m.score(batch)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassIndexMap {
    /// Logit index of the real (bonafide) class.
    pub real: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index_map: Option<ClassIndexMap>,
    /// Command for the external family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// Width used when a built-in family is instantiated without weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl SurrogateSpec {
    pub fn family(&self) -> Result<SurrogateFamily> {
        self.family.parse()
    }

    pub fn with_weights(family: SurrogateFamily, path: impl Into<PathBuf>) -> Self {
        SurrogateSpec {
            family: family.name().into(),
            model_id: None,
            weights_path: Some(path.into()),
            class_index_map: None,
            command: None,
            width: None,
        }
    }
}

/// Instantiates a detector from its spec.
///
/// Built-in families load weights from `weights_path`; toy families
/// without weights fall back to a seed-0 initialization. `class_index_map`
/// overrides the stored real-class index.
pub fn load_surrogate(spec: &SurrogateSpec) -> Result<SurrogateModel> {
    let family = spec.family()?;
    let default_id = || {
        spec.weights_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| family.name().to_string())
    };
    let model_id = spec.model_id.clone().unwrap_or_else(default_id);
    if family == SurrogateFamily::External {
        let command = spec
            .command
            .clone()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::config("command", "external detectors need a command"))?;
        return Ok(SurrogateModel {
            model_id,
            family,
            frozen: true,
            detector: Detector::External(ExternalDetector { command, sample_rate: audio_io::DEFAULT_SAMPLE_RATE }),
        });
    }
    let real_override = spec.class_index_map.as_ref().map(|m| m.real);
    if let Some(r) = real_override {
        if r > 1 {
            return Err(Error::config("class_index_map.real", "two-class detectors use index 0 or 1"));
        }
    }
    let toy = matches!(family, SurrogateFamily::ToyCnnSmall | SurrogateFamily::ToyCnnLarge);
    let Some(path) = &spec.weights_path else {
        if !toy {
            return Err(Error::Load(format!("{family} requires weights_path")));
        }
        let width = spec.width.unwrap_or(family.default_width());
        let meta = SurrogateMeta {
            family,
            width,
            real_index: real_override.unwrap_or(0),
            heldout_accuracy: None,
            seed: 0,
            format_version: SURROGATE_FORMAT_VERSION,
        };
        return Ok(SurrogateModel::from_network(model_id, build_network(family, width, 0)?, meta));
    };
    let mut model = load_weights(path, model_id)?;
    if model.family != family {
        return Err(Error::Load(format!("{}: weights are for {}, spec says {family}", path.display(), model.family)));
    }
    if let (Some(r), Detector::Net(n)) = (real_override, &mut model.detector) {
        n.meta.real_index = r;
    }
    Ok(model)
}

fn load_weights(path: &Path, model_id: String) -> Result<SurrogateModel> {
    if !path.exists() {
        return Err(Error::Load(format!("weights not found: {}", path.display())));
    }
    let (tensors, meta) = tensor_io::read(path).map_err(Error::Load)?;
    let meta: SurrogateMeta =
        serde_json::from_value(meta).map_err(|e| Error::Load(format!("{}: metadata: {e}", path.display())))?;
    if meta.format_version != SURROGATE_FORMAT_VERSION {
        return Err(Error::Load(format!("{}: unsupported format version {}", path.display(), meta.format_version)));
    }
    let mut net = build_network(meta.family, meta.width, 0).map_err(|e| Error::Load(e.to_string()))?;
    tensor_io::restore(&mut net, "net", &tensors).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(SurrogateModel::from_network(model_id, net, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateTrainConfig {
    pub family: SurrogateFamily,
    /// Defaults to the family's standard width.
    pub width: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub frame_len: usize,
    pub sample_rate: u32,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            family: SurrogateFamily::ToyCnnSmall,
            width: None,
            epochs: 20,
            lr: 3e-3,
            seed: 7,
            batch_size: 16,
            frame_len: crate::nets::DEFAULT_FRAME_LEN,
            sample_rate: audio_io::DEFAULT_SAMPLE_RATE,
        }
    }
}

fn labeled_records(manifest: &DatasetManifest, subset: Subset) -> Vec<&ManifestRecord> {
    manifest.subset(subset).collect()
}

fn require_both_labels(records: &[&ManifestRecord], subset: Subset) -> Result<()> {
    for label in [Label::Real, Label::Fake] {
        if !records.iter().any(|r| r.label == label) {
            return Err(Error::data(format!("{subset:?} subset has no {label:?} clips; both labels are required")));
        }
    }
    Ok(())
}

/// Trains a built-in family as a real/fake classifier on the train subset
/// and records its clip-level accuracy on the eval subset.
pub fn train_toy_surrogate(manifest: &DatasetManifest, config: &SurrogateTrainConfig) -> Result<SurrogateModel> {
    let family = config.family;
    if !family.is_builtin() {
        return Err(Error::config("family", "external detectors cannot be trained"));
    }
    if config.batch_size < 2 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Error::config("surrogate", "batch_size >= 2, epochs >= 1 and lr > 0 are required"));
    }
    let train_recs = labeled_records(manifest, Subset::Train);
    let eval_recs = labeled_records(manifest, Subset::Eval);
    require_both_labels(&train_recs, Subset::Train)?;
    require_both_labels(&eval_recs, Subset::Eval)?;

    let dev = load_labeled(manifest, &labeled_records(manifest, Subset::Dev), config.sample_rate)?;
    let width = config.width.unwrap_or(family.default_width());
    let meta = SurrogateMeta {
        family,
        width,
        real_index: 0,
        heldout_accuracy: None,
        seed: config.seed,
        format_version: SURROGATE_FORMAT_VERSION,
    };
    let mut net = build_network(family, width, config.seed)?;
    if net.out_shape(1, config.frame_len) != Some((2, 1)) {
        return Err(Error::config("frame_len", format!("{family} cannot process frames of {}", config.frame_len)));
    }
    let train = audio_io::load_frames(manifest, &train_recs, config.frame_len, config.sample_rate)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let real_index = 0usize;
    let l = config.frame_len;
    let mut best: Option<(f64, Sequential<f32>)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let batch = Array3::from_shape_fn((idx.len(), 1, l), |(i, _, t)| train.frames[idx[i]][t]);
            let (logits, caches) = net.forward(&batch, true);
            // Softmax cross-entropy on two logits.
            let mut dlogits = Array3::<f32>::zeros(logits.raw_dim());
            let p = p_real(&logits, real_index);
            let n = idx.len() as f64;
            for (i, &k) in idx.iter().enumerate() {
                let y = if train.labels[k] == Label::Real { 1.0 } else { 0.0 };
                let pi = p[i].clamp(1e-12, 1.0 - 1e-12);
                epoch_loss -= y * pi.ln() + (1.0 - y) * (1.0 - pi).ln();
                let g = ((p[i] - y) / n) as f32;
                dlogits[[i, real_index, 0]] = g;
                dlogits[[i, 1 - real_index, 0]] = -g;
            }
            let mut grads = net.zero_grads();
            net.backward(caches.clone(), dlogits, Some(&mut grads));
            net.commit_stats(&caches);
            adam.step(&mut net, &grads);
        }
        // Keep the epoch that does best on the dev split; later epochs win ties.
        let dev_acc = if dev.is_empty() {
            None
        } else {
            let probe = SurrogateModel::from_network(String::new(), net.clone(), meta.clone());
            Some(clip_accuracy(&probe, &dev, l)?)
        };
        log::debug!("{family} epoch {epoch}: loss {:.4}, dev accuracy {dev_acc:?}", epoch_loss / train.len() as f64);
        if let Some(acc) = dev_acc {
            if best.as_ref().map_or(true, |(b, _)| acc >= *b) {
                best = Some((acc, net.clone()));
            }
        }
    }
    if let Some((_, chosen)) = best {
        net = chosen;
    }

    let mut model = SurrogateModel::from_network(format!("{family}_w{width}_s{}", config.seed), net, meta);
    let eval = load_labeled(manifest, &eval_recs, config.sample_rate)?;
    let acc = clip_accuracy(&model, &eval, l)?;
    if let Detector::Net(n) = &mut model.detector {
        n.meta.heldout_accuracy = Some(acc);
    }
    log::info!("{} held-out accuracy {acc:.4}", model.model_id);
    Ok(model)
}

fn load_labeled(manifest: &DatasetManifest, records: &[&ManifestRecord], sample_rate: u32) -> Result<Vec<(AudioClip, Label)>> {
    records.iter().map(|r| Ok((audio_io::load_clip(manifest.resolve(r), sample_rate)?, r.label))).collect()
}

fn clip_accuracy(model: &SurrogateModel, clips: &[(AudioClip, Label)], frame_len: usize) -> Result<f64> {
    let mut correct = 0usize;
    for (clip, label) in clips {
        let p = model.score_clip(clip, frame_len)?;
        if (p >= 0.5) == (*label == Label::Real) {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Slices a `[B, 1, L]` batch to its first `n` items.
pub fn head<T: Clone>(batch: &Array3<T>, n: usize) -> Array3<T> {
    batch.slice(s![..n, .., ..]).to_owned()
}
