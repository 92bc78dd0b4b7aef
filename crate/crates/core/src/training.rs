//! Alternating generator/discriminator training against a frozen
//! surrogate ensemble, checkpointing, and corpus attacking.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{self, DatasetManifest, FrameSet, Label, ManifestRecord, Subset};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialForm, GeneratorTerms, LossBreakdown, LossWeights};
use crate::nets::{Discriminator, DiscriminatorCache, DiscriminatorConfig, Generator, GeneratorConfig, DEFAULT_FRAME_LEN};
use crate::nn::{Adam, AdamConfig, Grads, Module, Real};
use crate::surrogates::{self, DiffSurrogate, SurrogateEnsemble, SurrogateSpec};
use crate::tensor_io;
use crate::transcription::{self, FrameEncoder, TranscriptionBackend};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PAIRS_FILE: &str = "pairs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub frame_len: usize,
    pub sample_rate: u32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub adversarial_form: AdversarialForm,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub ensemble: Vec<SurrogateSpec>,
    pub transcription: TranscriptionBackend,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// When false the discriminator is held fixed (diagnostic runs).
    pub train_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            frame_len: DEFAULT_FRAME_LEN,
            sample_rate: audio_io::DEFAULT_SAMPLE_RATE,
            batch_size: 16,
            total_steps: 1000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            weights: LossWeights::default(),
            adversarial_form: AdversarialForm::default(),
            seed: 7,
            checkpoint_every: 500,
            ensemble: Vec::new(),
            transcription: TranscriptionBackend::Mock,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train_discriminator: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("training.{name}"), "must be positive"))
            }
        };
        if self.frame_len == 0 {
            return Err(Error::config("data.frame_len", "must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("data.sample_rate", "must be positive"));
        }
        pos("total_steps", self.total_steps > 0)?;
        pos("checkpoint_every", self.checkpoint_every > 0)?;
        pos("lr_g", self.lr_g > 0.0 && self.lr_g.is_finite())?;
        pos("lr_d", self.lr_d > 0.0 && self.lr_d.is_finite())?;
        if self.batch_size < 2 {
            return Err(Error::config("training.batch_size", "must be at least 2 for batch normalization"));
        }
        self.weights.validate()
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
}

impl<T: Real> TrainState<T> {
    /// Fresh networks seeded from `config.seed`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen = Generator::new(&config.generator, config.frame_len, config.sample_rate, &mut rng)?;
        let disc = Discriminator::new(&config.discriminator, config.frame_len, &mut rng)?;
        let opt_g = Adam::new(AdamConfig::with_lr(config.lr_g), &gen);
        let opt_d = Adam::new(AdamConfig::with_lr(config.lr_d), &disc);
        Ok(TrainState { step: 0, gen, disc, opt_g, opt_d })
    }
}

/// Frozen, differentiable view of the ensemble plus the transcription
/// frame encoder.
pub struct AttackContext<T> {
    pub ensemble: Vec<DiffSurrogate<T>>,
    pub encoder: FrameEncoder<T>,
}

impl<T: Real> AttackContext<T> {
    pub fn new(ensemble: &SurrogateEnsemble, _backend: &TranscriptionBackend) -> Result<Self> {
        let members = ensemble.members.iter().map(|m| m.differentiable()).collect::<Result<Vec<_>>>()?;
        Ok(AttackContext { ensemble: members, encoder: FrameEncoder::new() })
    }
}

/// Generator objective terms and gradients for one batch.
pub struct GeneratorPass<T> {
    pub terms: GeneratorTerms,
    pub total: f64,
    pub grads: Grads<T>,
    pub attacked: Array3<T>,
    /// Discriminator output on `attacked` in training mode, with its cache,
    /// so the discriminator update need not recompute it.
    pub disc_attacked: (Array1<T>, DiscriminatorCache<T>),
}

fn to_f64<T: Real>(x: &Array1<T>) -> Array1<f64> {
    x.mapv(|v| v.to_f64_lossy())
}

fn row<T: Real>(x: &Array3<T>, b: usize) -> Vec<T> {
    x.slice(s![b, 0, ..]).to_vec()
}

/// Weighted generator loss and its gradient with respect to every
/// generator parameter. The discriminator runs with batch statistics and
/// is not modified.
pub fn generator_pass<T: Real>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    ctx: &AttackContext<T>,
    fake: &Array3<T>,
    weights: &LossWeights,
    form: AdversarialForm,
) -> Result<GeneratorPass<T>> {
    let (attacked, gcache) = gen.forward(fake)?;
    let bsz = fake.dim().0;

    let perceptual = losses::perceptual_loss(fake, &attacked)?;
    let mut dy = losses::perceptual_loss_grad(fake, &attacked)? * T::lit(weights.lambda1);

    let m = ctx.ensemble.len();
    let mut probs = ndarray::Array2::<f64>::zeros((m, bsz));
    let mut caches = Vec::with_capacity(m);
    for (i, member) in ctx.ensemble.iter().enumerate() {
        let (p, c) = member.forward(&attacked)?;
        probs.row_mut(i).assign(&p);
        caches.push(c);
    }
    let forensics = if m > 0 { losses::forensics_loss(&probs) } else { 0.0 };
    if m > 0 && weights.lambda2 != 0.0 {
        let up = losses::forensics_loss_grad(&probs) * weights.lambda2;
        for ((member, cache), u) in ctx.ensemble.iter().zip(caches).zip(up.outer_iter()) {
            dy += &member.backward(cache, &u.to_owned());
        }
    }

    let mut transcription_sum = 0.0;
    let tscale = T::lit(weights.lambda3 / bsz as f64);
    for b in 0..bsz {
        let sa = ctx.encoder.encode(&row(fake, b));
        let (sb, cache) = ctx.encoder.forward(&row(&attacked, b));
        let (loss, g) = transcription::transcription_loss_train_grad(&sa, &sb)?;
        transcription_sum += loss;
        if weights.lambda3 != 0.0 {
            let dx = ctx.encoder.backward(&cache, &g);
            let mut lane = dy.slice_mut(s![b, 0, ..]);
            for (d, v) in lane.iter_mut().zip(dx) {
                *d += v * tscale;
            }
        }
    }
    let transcription = transcription_sum / bsz as f64;

    let (d_att_t, dcache) = disc.forward(&attacked, true)?;
    let d_att = to_f64(&d_att_t);
    let adversarial = losses::adversarial_loss_g(&d_att, form);
    if weights.lambda4 != 0.0 {
        let up = losses::adversarial_loss_g_grad(&d_att, form) * weights.lambda4;
        let up_t: Array1<T> = up.mapv(T::lit);
        dy += &disc.backward(dcache.clone(), &up_t, None);
    }

    let mut grads = gen.zero_grads();
    gen.backward(gcache, &dy, &mut grads);
    let terms = GeneratorTerms { perceptual, forensics, transcription, adversarial };
    Ok(GeneratorPass {
        total: losses::total_generator_loss(&terms, weights),
        terms,
        grads,
        attacked,
        disc_attacked: (d_att_t, dcache),
    })
}

/// One generator update followed by one discriminator update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    fake: &Array3<T>,
    real: &Array3<T>,
    ctx: &AttackContext<T>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if fake.dim() != real.dim() {
        return Err(Error::shape(format!("fake batch {:?} and real batch {:?} differ", fake.dim(), real.dim())));
    }
    let pass = generator_pass(&state.gen, &state.disc, ctx, fake, &config.weights, config.adversarial_form)?;

    let (d_real, c_real) = state.disc.forward(real, true)?;
    let (d_att, c_att) = pass.disc_attacked;
    let (d_real, d_att) = (to_f64(&d_real), to_f64(&d_att));
    let disc_loss = losses::discriminator_loss(&d_real, &d_att);
    let breakdown = losses::breakdown(&pass.terms, &config.weights, disc_loss);
    if !breakdown.is_finite() {
        return Err(Error::Numerical { step: state.step, breakdown: Box::new(breakdown) });
    }

    state.opt_g.step(&mut state.gen, &pass.grads);

    if config.train_discriminator {
        let (gr, ga) = losses::discriminator_loss_grad(&d_real, &d_att);
        let mut grads = state.disc.zero_grads();
        state.disc.commit_stats(&c_real);
        state.disc.commit_stats(&c_att);
        state.disc.backward(c_real, &gr.mapv(T::lit), Some(&mut grads));
        state.disc.backward(c_att, &ga.mapv(T::lit), Some(&mut grads));
        state.opt_d.step(&mut state.disc, &grads);
        state.disc.project_constraint();
    }
    state.step += 1;
    Ok(breakdown)
}

/// Frames of the train subset split by label.
pub struct TrainingData {
    pub fake: FrameSet,
    pub real: FrameSet,
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest, frame_len: usize, sample_rate: u32) -> Result<Self> {
        let pick = |label: Label| -> Vec<&ManifestRecord> {
            manifest.subset(Subset::Train).filter(|r| r.label == label).collect()
        };
        let (fakes, reals) = (pick(Label::Fake), pick(Label::Real));
        if fakes.is_empty() || reals.is_empty() {
            return Err(Error::data("training needs both real and fake clips in the train subset"));
        }
        Ok(TrainingData {
            fake: audio_io::load_frames(manifest, &fakes, frame_len, sample_rate)?,
            real: audio_io::load_frames(manifest, &reals, frame_len, sample_rate)?,
        })
    }

    /// Batches for `step`, a pure function of `(seed, step)`.
    pub fn batches(&self, seed: u64, step: u64, batch_size: usize) -> (Array3<f32>, Array3<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let mut draw = |set: &FrameSet| {
            let l = set.frames[0].len();
            let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..set.len())).collect();
            Array3::from_shape_fn((batch_size, 1, l), |(i, _, t)| set.frames[idx[i]][t])
        };
        let fake = draw(&self.fake);
        let real = draw(&self.real);
        (fake, real)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    step: u64,
    adam_g_step: u64,
    adam_d_step: u64,
    config: TrainConfig,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:07}.safetensors"))
}

fn adam_tensors<T: Real, M: Module<T>>(
    module: &M,
    adam: &Adam<T>,
    prefix: &str,
    out: &mut BTreeMap<String, ArrayD<f32>>,
) {
    let mut ps = Vec::new();
    module.params("", &mut ps);
    for ((name, _), (m, v)) in ps.iter().zip(adam.state.m.iter().zip(&adam.state.v)) {
        out.insert(format!("{prefix}.m.{name}"), m.mapv(|x| x.to_f64_lossy() as f32));
        out.insert(format!("{prefix}.v.{name}"), v.mapv(|x| x.to_f64_lossy() as f32));
    }
}

fn restore_adam<T: Real, M: Module<T>>(
    module: &M,
    adam: &mut Adam<T>,
    prefix: &str,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<()> {
    let mut ps = Vec::new();
    module.params("", &mut ps);
    for (i, (name, p)) in ps.iter().enumerate() {
        for (kind, slot) in [("m", &mut adam.state.m[i]), ("v", &mut adam.state.v[i])] {
            let key = format!("{prefix}.{kind}.{name}");
            let t = tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has wrong shape")));
            }
            *slot = t.mapv(|x| T::lit(x as f64));
        }
    }
    Ok(())
}

/// Serializes the full training state; bytes depend only on the state.
pub fn checkpoint_bytes(state: &TrainState<f32>, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    tensor_io::collect(&state.gen, "gen", &mut tensors);
    tensor_io::collect(&state.disc, "disc", &mut tensors);
    adam_tensors(&state.gen, &state.opt_g, "opt_g", &mut tensors);
    adam_tensors(&state.disc, &state.opt_d, "opt_d", &mut tensors);
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step: state.step,
        adam_g_step: state.opt_g.state.step,
        adam_d_step: state.opt_d.state.step,
        config: config.clone(),
    };
    tensor_io::to_bytes(&tensors, &serde_json::to_value(&meta)?).map_err(Error::Checkpoint)
}

pub fn save_checkpoint(path: &Path, state: &TrainState<f32>, config: &TrainConfig) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(state, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, TrainConfig)> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let (tensors, meta) = tensor_io::read(path).map_err(Error::Checkpoint)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.format_version)));
    }
    let mut state = TrainState::<f32>::init(&meta.config)?;
    let ctx = |e: String| Error::Checkpoint(format!("{}: {e}", path.display()));
    tensor_io::restore(&mut state.gen, "gen", &tensors).map_err(ctx)?;
    tensor_io::restore(&mut state.disc, "disc", &tensors).map_err(ctx)?;
    restore_adam(&state.gen, &mut state.opt_g, "opt_g", &tensors)?;
    restore_adam(&state.disc, &mut state.opt_d, "opt_d", &tensors)?;
    state.step = meta.step;
    state.opt_g.state.step = meta.adam_g_step;
    state.opt_d.state.step = meta.adam_d_step;
    Ok((state, meta.config))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

pub fn load_ensemble(specs: &[SurrogateSpec]) -> Result<SurrogateEnsemble> {
    SurrogateEnsemble::new(specs.iter().map(surrogates::load_surrogate).collect::<Result<Vec<_>>>()?)
}

/// Runs `config.total_steps` alternating updates from scratch.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let state = TrainState::<f32>::init(config)?;
    run(state, config, manifest, out_dir)
}

/// Continues from `checkpoint` up to `total_steps` (the checkpoint's own
/// target when `None`).
pub fn resume(checkpoint: &Path, manifest: &DatasetManifest, out_dir: &Path, total_steps: Option<u64>) -> Result<TrainOutcome> {
    let (state, mut config) = load_checkpoint(checkpoint)?;
    if let Some(t) = total_steps {
        config.total_steps = t;
    }
    config.validate()?;
    run(state, &config, manifest, out_dir)
}

fn run(mut state: TrainState<f32>, config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    let ensemble = load_ensemble(&config.ensemble)?;
    let ctx = AttackContext::<f32>::new(&ensemble, &config.transcription)?;
    let data = TrainingData::load(manifest, config.frame_len, config.sample_rate)?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = previous_metrics(&metrics_path, state.step)?;
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    for line in kept {
        writeln!(log, "{line}")?;
    }
    let before = ensemble.fingerprints()?;
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    while state.step < config.total_steps {
        let (fake, real) = data.batches(config.seed, state.step, config.batch_size);
        let losses = train_step(&mut state, &fake, &real, &ctx, config)?;
        let line = MetricsLine { step: state.step, losses, wall_ms: start.elapsed().as_millis() as u64 };
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n")?;
        if state.step % 50 == 0 {
            log::info!(
                "step {} total {:.5} perc {:.5} for {:.4} tr {:.4} adv {:.4} d {:.4} alpha {:.4}",
                state.step,
                losses.total,
                losses.perceptual,
                losses.forensics,
                losses.transcription,
                losses.adversarial,
                losses.disc_loss,
                state.gen.alpha()
            );
        }
        if state.step % config.checkpoint_every == 0 || state.step == config.total_steps {
            let path = checkpoint_path(out_dir, state.step);
            save_checkpoint(&path, &state, config)?;
            checkpoints.push(path);
        }
    }
    log.flush()?;
    if ensemble.fingerprints()? != before {
        return Err(Error::Backend("surrogate parameters changed during training".into()));
    }
    let final_checkpoint = checkpoint_path(out_dir, state.step);
    if !final_checkpoint.exists() {
        save_checkpoint(&final_checkpoint, &state, config)?;
        checkpoints.push(final_checkpoint.clone());
    }
    Ok(TrainOutcome { final_checkpoint, checkpoints, metrics_path })
}

/// Metrics lines up to and including `step`, kept when resuming.
fn previous_metrics(path: &Path, step: u64) -> Result<Vec<String>> {
    if step == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let parsed: MetricsLine = serde_json::from_str(&line)?;
        if parsed.step <= step {
            kept.push(line);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub clip_id: String,
    pub original_path: String,
    pub attacked_path: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingIndex {
    pub pairs: Vec<PairRecord>,
}

impl PairingIndex {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Relative paths resolve against the index file's directory.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut p: PairRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            for field in [&mut p.original_path, &mut p.attacked_path] {
                if Path::new(field.as_str()).is_relative() {
                    *field = root.join(&*field).to_string_lossy().into_owned();
                }
            }
            pairs.push(p);
        }
        Ok(PairingIndex { pairs })
    }

    pub fn get(&self, clip_id: &str) -> Option<&PairRecord> {
        self.pairs.iter().find(|p| p.clip_id == clip_id)
    }
}

/// Runs the generator over one waveform frame by frame.
pub fn attack_samples(gen: &Generator<f32>, samples: &[f32]) -> Result<Vec<f32>> {
    let l = gen.frame_len;
    let frames = audio_io::chunk(samples, l)?;
    let mut out = Vec::with_capacity(frames.len());
    for group in frames.chunks(16) {
        let batch = Array3::from_shape_fn((group.len(), 1, l), |(i, _, t)| group[i][t]);
        let y = gen.infer(&batch)?;
        for b in 0..group.len() {
            out.push(y.slice(s![b, 0, ..]).to_vec());
        }
    }
    Ok(audio_io::reassemble(&out, samples.len()).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Attacks every fake clip (optionally one subset) and copies real clips.
/// Writes `attacked/`, `real/`, and the pairing index into `out_dir`.
pub fn attack_corpus(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    out_dir: &Path,
    expected_frame_len: Option<usize>,
    subset: Option<Subset>,
) -> Result<PairingIndex> {
    let (state, config) = load_checkpoint(checkpoint)?;
    if let Some(l) = expected_frame_len {
        if l != config.frame_len {
            return Err(Error::config(
                "data.frame_len",
                format!("checkpoint was trained with frame length {}, config asks for {l}", config.frame_len),
            ));
        }
    }
    let attacked_dir = out_dir.join("attacked");
    let real_dir = out_dir.join("real");
    fs::create_dir_all(&attacked_dir)?;
    fs::create_dir_all(&real_dir)?;
    let mut pairs = Vec::new();
    for r in manifest.records.iter().filter(|r| subset.map_or(true, |s| r.subset == s)) {
        let original = manifest.resolve(r);
        let attacked = match r.label {
            Label::Fake => {
                let clip = audio_io::load_clip(&original, config.sample_rate)?;
                let y = attack_samples(&state.gen, &clip.samples)?;
                let path = attacked_dir.join(format!("{}.wav", r.clip_id));
                audio_io::write_wav_i16(&path, &y, clip.sample_rate)?;
                path
            }
            Label::Real => {
                let ext = original.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "wav".into());
                let path = real_dir.join(format!("{}.{ext}", r.clip_id));
                fs::copy(&original, &path)?;
                path
            }
        };
        let rel = attacked.strip_prefix(out_dir).unwrap_or(&attacked).to_string_lossy().into_owned();
        pairs.push(PairRecord {
            clip_id: r.clip_id.clone(),
            original_path: fs::canonicalize(&original)?.to_string_lossy().into_owned(),
            attacked_path: rel,
            label: r.label,
        });
    }
    let index = PairingIndex { pairs };
    index.write_jsonl(&out_dir.join(PAIRS_FILE))?;
    PairingIndex::read_jsonl(&out_dir.join(PAIRS_FILE))
}
