//! Transcription backends, text embedders, and the transcription losses.
//!
//! The mock backend is a reproducible stand-in ASR: each 0.25 s window is
//! reduced to its two strongest frequency bands and that pair is spelled as
//! a word. Its frame encoder (windowed DFT band energies) is differentiable
//! and also serves as the training-time feature extractor for plugin ASRs.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};
use crate::external;
use crate::nn::Real;

pub const ENCODER_N_FFT: usize = 256;
pub const ENCODER_HOP: usize = 128;
pub const NUM_BANDS: usize = 16;
const ENERGY_SCALE: f64 = 1e3;
pub const WORD_WINDOW_SECS: f64 = 0.25;
/// A trailing partial window shorter than this is dropped.
pub const MIN_WINDOW_SECS: f64 = 0.1;
/// Windows with RMS below this are silence and produce no word.
pub const SILENCE_RMS: f64 = 1e-3;
pub const DEFAULT_EMBED_DIM: usize = 64;

const SYLLABLES: [&str; NUM_BANDS] =
    ["BA", "KE", "LO", "MU", "NI", "PA", "RE", "SO", "TU", "VI", "DA", "FE", "GO", "HU", "JI", "ZA"];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
}

impl Transcript {
    /// Uppercases and collapses whitespace.
    pub fn normalized(raw: &str) -> Self {
        let words: Vec<String> = raw.split_whitespace().map(|w| w.to_uppercase()).collect();
        Transcript { text: words.join(" ") }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// True for the all-zero sentinel produced by empty text.
    pub empty: bool,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn sentinel(dim: usize) -> Self {
        TextEmbedding { vector: vec![0.0; dim], empty: true }
    }

    /// Cosine similarity; defined as 0 when either side is the sentinel.
    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        if self.empty || other.empty {
            return 0.0;
        }
        cosine(&self.vector, &other.vector)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Differentiable band-energy frame encoder.
///
/// Frames of 256 samples (hop 128, periodic Hann, no centering) are
/// transformed with explicit cosine/sine matrices; the power spectrum
/// (bins 1..=128) is summed in 16 equal bands and mapped through
/// `log1p(1e3 * E)`. Inputs shorter than one frame are zero-padded.
#[derive(Debug, Clone)]
pub struct FrameEncoder<T> {
    window: Array1<T>,
    cos: Array2<T>,
    sin: Array2<T>,
}

pub struct EncoderCache<T> {
    len: usize,
    re: Array2<T>,
    im: Array2<T>,
    energy: Array2<T>,
}

impl<T: Real> Default for FrameEncoder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FrameEncoder<T> {
    pub fn new() -> Self {
        let n = ENCODER_N_FFT;
        let bins = NUM_BANDS * band_width();
        let tau = std::f64::consts::TAU;
        let window = Array1::from_shape_fn(n, |i| T::lit(0.5 - 0.5 * (tau * i as f64 / n as f64).cos()));
        let cos = Array2::from_shape_fn((n, bins), |(i, k)| T::lit((tau * ((k + 1) * i) as f64 / n as f64).cos()));
        let sin = Array2::from_shape_fn((n, bins), |(i, k)| T::lit(-(tau * ((k + 1) * i) as f64 / n as f64).sin()));
        FrameEncoder { window, cos, sin }
    }

    pub fn num_frames(len: usize) -> usize {
        if len <= ENCODER_N_FFT {
            1
        } else {
            1 + (len - ENCODER_N_FFT) / ENCODER_HOP
        }
    }

    fn framed(&self, x: &[T]) -> Array2<T> {
        let nf = Self::num_frames(x.len());
        Array2::from_shape_fn((nf, ENCODER_N_FFT), |(f, i)| {
            let t = f * ENCODER_HOP + i;
            if t < x.len() {
                x[t] * self.window[i]
            } else {
                T::zero()
            }
        })
    }

    /// States `[frames, 16]` plus the cache needed by [`Self::backward`].
    pub fn forward(&self, x: &[T]) -> (Array2<T>, EncoderCache<T>) {
        let frames = self.framed(x);
        let re = frames.dot(&self.cos);
        let im = frames.dot(&self.sin);
        let nf = frames.nrows();
        let norm = T::lit(1.0 / (ENCODER_N_FFT * ENCODER_N_FFT) as f64);
        let bw = band_width();
        let mut energy = Array2::<T>::zeros((nf, NUM_BANDS));
        for f in 0..nf {
            for b in 0..NUM_BANDS {
                let mut e = T::zero();
                for k in b * bw..(b + 1) * bw {
                    e += re[[f, k]] * re[[f, k]] + im[[f, k]] * im[[f, k]];
                }
                energy[[f, b]] = e * norm;
            }
        }
        let scale = T::lit(ENERGY_SCALE);
        let states = energy.mapv(|e| (e * scale).ln_1p());
        (states, EncoderCache { len: x.len(), re, im, energy })
    }

    pub fn encode(&self, x: &[T]) -> Array2<T> {
        self.forward(x).0
    }

    /// Gradient with respect to the input samples.
    pub fn backward(&self, cache: &EncoderCache<T>, dstates: &Array2<T>) -> Vec<T> {
        let scale = T::lit(ENERGY_SCALE);
        let norm = T::lit(1.0 / (ENCODER_N_FFT * ENCODER_N_FFT) as f64);
        let two = T::lit(2.0);
        let bw = band_width();
        let (nf, bins) = cache.re.dim();
        let mut dre = Array2::<T>::zeros((nf, bins));
        let mut dim = Array2::<T>::zeros((nf, bins));
        for f in 0..nf {
            for b in 0..NUM_BANDS {
                let de = dstates[[f, b]] * scale / (T::one() + scale * cache.energy[[f, b]]) * norm;
                for k in b * bw..(b + 1) * bw {
                    dre[[f, k]] = two * cache.re[[f, k]] * de;
                    dim[[f, k]] = two * cache.im[[f, k]] * de;
                }
            }
        }
        let dframes = dre.dot(&self.cos.t()) + dim.dot(&self.sin.t());
        let mut dx = vec![T::zero(); cache.len];
        for f in 0..nf {
            for i in 0..ENCODER_N_FFT {
                let t = f * ENCODER_HOP + i;
                if t < cache.len {
                    dx[t] += dframes[[f, i]] * self.window[i];
                }
            }
        }
        dx
    }
}

fn band_width() -> usize {
    (ENCODER_N_FFT / 2) / NUM_BANDS
}

fn window_word(states: &Array2<f64>) -> String {
    let mean = states.mean_axis(Axis(0)).expect("nonempty window");
    let mut order: Vec<usize> = (0..NUM_BANDS).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    format!("{}{}", SYLLABLES[order[0]], SYLLABLES[order[1]])
}

/// Deterministic stand-in ASR.
pub fn mock_transcribe(clip: &AudioClip) -> Transcript {
    let enc = FrameEncoder::<f64>::new();
    let rate = clip.sample_rate as f64;
    let win = ((WORD_WINDOW_SECS * rate).round() as usize).max(1);
    let min_len = (MIN_WINDOW_SECS * rate).round() as usize;
    let mut words = Vec::new();
    for w in clip.samples.chunks(win) {
        if w.len() < min_len.max(1) {
            continue;
        }
        let rms = (w.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / w.len() as f64).sqrt();
        if rms < SILENCE_RMS {
            continue;
        }
        let x: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        words.push(window_word(&enc.encode(&x)));
    }
    Transcript { text: words.join(" ") }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum TranscriptionBackend {
    Mock,
    /// Command that receives a WAV path as its last argument and prints one
    /// line of transcript.
    AsrPlugin { command: Vec<String> },
}

impl Default for TranscriptionBackend {
    fn default() -> Self {
        TranscriptionBackend::Mock
    }
}

impl TranscriptionBackend {
    pub fn backend_id(&self) -> &'static str {
        match self {
            TranscriptionBackend::Mock => "mock",
            TranscriptionBackend::AsrPlugin { .. } => "asr_plugin",
        }
    }

    pub fn transcribe(&self, clip: &AudioClip) -> Result<Transcript> {
        clip.validate()?;
        match self {
            TranscriptionBackend::Mock => Ok(mock_transcribe(clip)),
            TranscriptionBackend::AsrPlugin { command } => {
                let out = external::run_on_wav(command, clip).map_err(Error::Backend)?;
                Ok(Transcript::normalized(out.lines().next().unwrap_or("")))
            }
        }
    }

    /// Continuous frame states used by the training-time loss. Plugins share
    /// the band-energy encoder since their internals are opaque.
    pub fn encode_frames(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        clip.validate()?;
        let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
        Ok(FrameEncoder::<f64>::new().encode(&x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "embedder", rename_all = "snake_case", deny_unknown_fields)]
pub enum Embedder {
    /// Sum of per-word Gaussian vectors seeded by each word's SHA-256.
    Hashed { dim: usize },
    /// Command reading text on stdin and printing `dim` then `dim` floats.
    Plugin { command: Vec<String> },
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::Hashed { dim: DEFAULT_EMBED_DIM }
    }
}

impl Embedder {
    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        match self {
            Embedder::Hashed { dim } => Ok(hashed_embedding(text, *dim)),
            Embedder::Plugin { command } => {
                let out = external::run_with_stdin(command, text).map_err(Error::Backend)?;
                let mut it = out.split_whitespace();
                let dim: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Backend("embedder output must start with its dimension".into()))?;
                let vector: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Backend(format!("embedder output: {e}")))?;
                if vector.len() != dim {
                    return Err(Error::Backend(format!("embedder declared {dim} values, printed {}", vector.len())));
                }
                if text.trim().is_empty() {
                    return Ok(TextEmbedding::sentinel(dim));
                }
                Ok(normalize(vector))
            }
        }
    }
}

fn normalize(mut v: Vec<f64>) -> TextEmbedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        let dim = v.len();
        return TextEmbedding::sentinel(dim);
    }
    v.iter_mut().for_each(|x| *x /= n);
    TextEmbedding { vector: v, empty: false }
}

pub fn hashed_embedding(text: &str, dim: usize) -> TextEmbedding {
    let mut acc = vec![0.0; dim];
    let mut any = false;
    for word in text.split_whitespace() {
        any = true;
        let digest = Sha256::digest(word.to_uppercase().as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        for a in acc.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *a += g;
        }
    }
    if !any {
        return TextEmbedding::sentinel(dim);
    }
    normalize(acc)
}

/// Convenience wrapper around [`Embedder::embed`].
pub fn embed_text(text: &str, embedder: &Embedder) -> Result<TextEmbedding> {
    embedder.embed(text)
}

/// `1 - cos` between transcript embeddings: 0 when both transcripts are
/// empty, 1 when exactly one is.
pub fn transcription_loss_metric(
    a: &AudioClip,
    b: &AudioClip,
    backend: &TranscriptionBackend,
    embedder: &Embedder,
) -> Result<f64> {
    let ta = backend.transcribe(a)?;
    let tb = backend.transcribe(b)?;
    metric_from_transcripts(&ta, &tb, embedder)
}

pub fn metric_from_transcripts(ta: &Transcript, tb: &Transcript, embedder: &Embedder) -> Result<f64> {
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(1.0),
        _ => {
            let ea = embedder.embed(&ta.text)?;
            let eb = embedder.embed(&tb.text)?;
            Ok(1.0 - ea.cosine(&eb))
        }
    }
}

/// Cosine similarity of transcript embeddings; always `1 - metric`.
pub fn text_similarity(a: &AudioClip, b: &AudioClip, backend: &TranscriptionBackend, embedder: &Embedder) -> Result<f64> {
    Ok(1.0 - transcription_loss_metric(a, b, backend, embedder)?)
}

const POOL_NORM_FLOOR: f64 = 1e-12;

fn check_dims<T>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.ncols() != b.ncols() || a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::shape(format!(
            "frame states must be nonempty with equal feature dims: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `1 - cos` between time-mean-pooled frame states.
pub fn transcription_loss_train<T: Real>(states_a: &Array2<T>, states_b: &Array2<T>) -> Result<f64> {
    Ok(transcription_loss_train_grad(states_a, states_b)?.0)
}

/// Loss value and its gradient with respect to `states_b`.
pub fn transcription_loss_train_grad<T: Real>(states_a: &Array2<T>, states_b: &Array2<T>) -> Result<(f64, Array2<T>)> {
    check_dims(states_a, states_b)?;
    let pa: Vec<f64> = states_a.mean_axis(Axis(0)).expect("rows").iter().map(|v| v.to_f64_lossy()).collect();
    let pb: Vec<f64> = states_b.mean_axis(Axis(0)).expect("rows").iter().map(|v| v.to_f64_lossy()).collect();
    let na = pa.iter().map(|x| x * x).sum::<f64>().sqrt().max(POOL_NORM_FLOOR);
    let nb = pb.iter().map(|x| x * x).sum::<f64>().sqrt().max(POOL_NORM_FLOOR);
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    // d(-cos)/d pb = -(pa / (na nb) - cos * pb / nb^2)
    let rows = states_b.nrows() as f64;
    let gpool: Vec<f64> = pa.iter().zip(&pb).map(|(a, b)| -(a / (na * nb) - cos * b / (nb * nb)) / rows).collect();
    let grad = Array2::from_shape_fn(states_b.raw_dim(), |(_, j)| T::lit(gpool[j]));
    Ok((1.0 - cos, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn tone(freq: f64, secs: f64, amp: f32) -> AudioClip {
        let n = (secs * 16000.0) as usize;
        let s = (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / 16000.0).sin() as f32 * amp).collect();
        AudioClip::new("tone", s, 16000).unwrap()
    }

    #[test]
    fn mock_is_deterministic_and_silent_on_zeros() {
        let c = tone(1200.0, 1.0, 0.5);
        let t1 = mock_transcribe(&c);
        assert_eq!(t1, mock_transcribe(&c));
        assert_eq!(t1.text.split(' ').count(), 4);
        assert!(!t1.text.starts_with(' ') && !t1.text.ends_with(' '));
        let z = AudioClip::new("z", vec![0.0; 16000], 16000).unwrap();
        assert!(mock_transcribe(&z).is_empty());
    }

    #[test]
    fn partial_windows_need_a_tenth_of_a_second() {
        // 0.25 s + 0.09 s: the tail is dropped. 0.25 s + 0.1 s: kept.
        assert_eq!(mock_transcribe(&tone(700.0, 0.34, 0.5)).text.split(' ').count(), 1);
        assert_eq!(mock_transcribe(&tone(700.0, 0.35, 0.5)).text.split(' ').count(), 2);
    }

    #[test]
    fn tone_band_determines_word() {
        // 1200 Hz lies in the third 500 Hz band.
        let t = mock_transcribe(&tone(1200.0, 0.25, 0.5));
        assert!(t.text.starts_with("LO"), "{}", t.text);
    }

    #[test]
    fn embedding_contract() {
        let e = embed_text("HELLO WORLD", &Embedder::default()).unwrap();
        let n: f64 = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(e.dim(), DEFAULT_EMBED_DIM);
        assert_eq!(e, embed_text("HELLO WORLD", &Embedder::default()).unwrap());
        let s = embed_text("", &Embedder::default()).unwrap();
        assert!(s.empty && s.vector.iter().all(|&v| v == 0.0));
        assert_eq!(s.cosine(&e), 0.0);
    }

    #[test]
    fn metric_conventions() {
        let emb = Embedder::default();
        let c = tone(900.0, 1.0, 0.5);
        assert_eq!(transcription_loss_metric(&c, &c, &TranscriptionBackend::Mock, &emb).unwrap(), 0.0);
        assert_eq!(text_similarity(&c, &c, &TranscriptionBackend::Mock, &emb).unwrap(), 1.0);
        let z = AudioClip::new("z", vec![0.0; 16000], 16000).unwrap();
        assert_eq!(transcription_loss_metric(&z, &z, &TranscriptionBackend::Mock, &emb).unwrap(), 0.0);
        assert_eq!(transcription_loss_metric(&c, &z, &TranscriptionBackend::Mock, &emb).unwrap(), 1.0);
    }

    #[test]
    fn noise_corruption_lowers_similarity() {
        let c = tone(900.0, 1.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<f32> = c.samples.iter().map(|&v| (v + rng.gen_range(-0.6f32..0.6)).clamp(-1.0, 1.0)).collect();
        let n = AudioClip::new("n", noisy, 16000).unwrap();
        let s = text_similarity(&c, &n, &TranscriptionBackend::Mock, &Embedder::default()).unwrap();
        assert!(s < 1.0, "similarity {s}");
    }

    #[test]
    fn train_loss_examples() {
        let a = array![[1.0f64, 2.0], [3.0, 4.0]];
        assert!(transcription_loss_train(&a, &a).unwrap().abs() < 1e-12);
        let x = array![[1.0f64, 0.0]];
        let y = array![[0.0f64, 2.0], [0.0, 4.0]];
        assert!((transcription_loss_train(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg = array![[-1.0f64, 0.0]];
        assert!((transcription_loss_train(&x, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(transcription_loss_train(&x, &array![[1.0f64, 0.0, 0.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn train_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_simple_fn((5, 16), || rng.gen_range(0.0..3.0));
        let b = Array2::from_shape_simple_fn((7, 16), || rng.gen_range(0.0..3.0));
        let (_, g) = transcription_loss_train_grad(&a, &b).unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 7), (6, 15)] {
            let mut bp = b.clone();
            bp[[i, j]] += h;
            let mut bm = b.clone();
            bm[[i, j]] -= h;
            let fd = (transcription_loss_train(&a, &bp).unwrap() - transcription_loss_train(&a, &bm).unwrap()) / (2.0 * h);
            let rel = (fd - g[[i, j]]).abs() / fd.abs().max(g[[i, j]].abs()).max(1e-8);
            assert!(rel < 1e-4, "({i},{j}) fd {fd} an {}", g[[i, j]]);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..700).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let enc = FrameEncoder::<f64>::new();
        let probe = Array2::from_shape_simple_fn((FrameEncoder::<f64>::num_frames(700), NUM_BANDS), || rng.gen_range(-1.0..1.0));
        let (_, cache) = enc.forward(&x);
        let dx = enc.backward(&cache, &probe);
        let loss = |x: &[f64]| (enc.encode(x) * &probe).sum();
        let h = 1e-5;
        for i in [0usize, 130, 255, 400, 699] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let rel = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "x[{i}] fd {fd} an {}", dx[i]);
        }
    }

    #[test]
    fn encoder_matches_direct_band_energies() {
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin() * 0.4 + (i as f64 * 1.9).cos() * 0.2).collect();
        let s = FrameEncoder::<f64>::new().encode(&x);
        assert_eq!(s.dim(), (1, NUM_BANDS));
        for b in 0..NUM_BANDS {
            let mut e = 0.0;
            for k in b * 8 + 1..=b * 8 + 8 {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let w = 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / 256.0).cos();
                    let ph = std::f64::consts::TAU * (k * n) as f64 / 256.0;
                    re += v * w * ph.cos();
                    im -= v * w * ph.sin();
                }
                e += re * re + im * im;
            }
            let expected = (e / 65536.0 * 1e3).ln_1p();
            assert!((s[[0, b]] - expected).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn train_loss_invariant_to_frame_order(
            seed in 0u64..500,
            ra in 1usize..9,
            rb in 1usize..9,
            shift in 0usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_simple_fn((ra, 6), || rng.gen_range(-1.0..2.0));
            let b = Array2::from_shape_simple_fn((rb, 6), || rng.gen_range(-1.0..2.0));
            let base = transcription_loss_train(&a, &b).unwrap();
            let rot = |m: &Array2<f64>| {
                let n = m.nrows();
                Array2::from_shape_fn(m.raw_dim(), |(i, j)| m[[(i + shift) % n, j]])
            };
            prop_assert!((transcription_loss_train(&rot(&a), &b).unwrap() - base).abs() < 1e-9);
            prop_assert!((transcription_loss_train(&a, &rot(&b)).unwrap() - base).abs() < 1e-9);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
        }

        #[test]
        fn similarity_is_one_minus_metric(f1 in 200.0f64..7000.0, f2 in 200.0f64..7000.0) {
            let emb = Embedder::default();
            let a = tone(f1, 0.5, 0.4);
            let b = tone(f2, 0.5, 0.4);
            let m = transcription_loss_metric(&a, &b, &TranscriptionBackend::Mock, &emb).unwrap();
            let s = text_similarity(&a, &b, &TranscriptionBackend::Mock, &emb).unwrap();
            prop_assert_eq!(s, 1.0 - m);
            prop_assert!((0.0..=2.0).contains(&m));
            prop_assert_eq!(transcription_loss_metric(&a, &a, &TranscriptionBackend::Mock, &emb).unwrap(), 0.0);
        }
    }
}
