//! Synthetic corpus: harmonic tones as real audio, and the same tones with
//! per-frame phase jitter and 8-bit quantization as fakes.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::{self, DatasetManifest, Label, ManifestRecord, Subset};
use crate::error::{Error, Result};

pub const TOY_TAG: &str = "toy";
pub const TOY_SAMPLE_RATE: u32 = 16_000;
/// Jitter is redrawn every 20 ms.
const JITTER_FRAME: usize = 320;
const JITTER_RAD: f64 = 0.5;
const FADE_SECS: f64 = 0.03;
const QUANT_LEVELS: f64 = 127.0;

/// Harmonic tone with a slow tremolo and short fades at both ends. With
/// `jitter`, each harmonic's phase is offset by a fresh random amount in
/// every 20 ms frame.
fn synthesize(len: usize, rng: &mut ChaCha8Rng, jitter: bool) -> Vec<f32> {
    let rate = TOY_SAMPLE_RATE as f64;
    let f0 = rng.gen_range(500.0..900.0);
    let harmonics = rng.gen_range(3..=5usize);
    let amps: Vec<f64> = (1..=harmonics).map(|k| rng.gen_range(0.3..1.0) / k as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..TAU)).collect();
    let trem_hz = rng.gen_range(2.0..5.0);
    let trem_phase = rng.gen_range(0.0..TAU);
    let peak = rng.gen_range(0.4..0.7);
    let norm: f64 = amps.iter().sum();
    let fade = ((FADE_SECS * rate) as usize).max(1);
    let mut offsets = vec![0.0; harmonics];
    (0..len)
        .map(|n| {
            if jitter && n % JITTER_FRAME == 0 {
                for o in offsets.iter_mut() {
                    *o = rng.gen_range(-JITTER_RAD..JITTER_RAD);
                }
            }
            let t = n as f64 / rate;
            let tone: f64 = (0..harmonics)
                .map(|k| amps[k] * (TAU * f0 * (k + 1) as f64 * t + phases[k] + offsets[k]).sin())
                .sum();
            let edge = n.min(len - 1 - n);
            let ramp = if edge < fade { 0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos() } else { 1.0 };
            let trem = 0.8 + 0.2 * (TAU * trem_hz * t + trem_phase).sin();
            (peak * ramp * trem * tone / norm) as f32
        })
        .collect()
}

fn quantize_8bit(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = ((*v as f64 * QUANT_LEVELS).round() / QUANT_LEVELS) as f32;
    }
}

fn subset_for(i: usize, per_label: usize) -> Subset {
    let train = per_label * 70 / 100;
    let dev = per_label * 15 / 100;
    if i < train {
        Subset::Train
    } else if i < train + dev {
        Subset::Dev
    } else {
        Subset::Eval
    }
}

/// Writes `n_clips` clips of `frame_len` samples plus `manifest.jsonl` into
/// `out_dir`. Each label gets a 70/15/15 train/dev/eval split.
pub fn build_toy_dataset(n_clips: usize, frame_len: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n_clips < 4 || n_clips % 2 != 0 {
        return Err(Error::invalid(format!("n_clips must be even and at least 4, got {n_clips}")));
    }
    if frame_len < 2 {
        return Err(Error::invalid("frame_len must be at least 2"));
    }
    let per_label = n_clips / 2;
    let mut records = Vec::with_capacity(n_clips);
    for (li, label) in [Label::Real, Label::Fake].into_iter().enumerate() {
        let name = if label == Label::Real { "real" } else { "fake" };
        fs::create_dir_all(out_dir.join(name))?;
        for i in 0..per_label {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((i * 2 + li) as u64);
            let mut samples = synthesize(frame_len, &mut rng, label == Label::Fake);
            if label == Label::Fake {
                quantize_8bit(&mut samples);
            }
            let clip_id = format!("toy_{name}_{i:05}");
            let rel = format!("{name}/{clip_id}.wav");
            audio_io::write_wav_i16(out_dir.join(&rel), &samples, TOY_SAMPLE_RATE)?;
            records.push(ManifestRecord {
                clip_id,
                path: rel,
                label,
                subset: subset_for(i, per_label),
                dataset_tag: TOY_TAG.into(),
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    manifest.write_jsonl(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_toy_dataset(40, 600, 7, dir.path()).unwrap();
        assert_eq!(m.records.len(), 40);
        assert_eq!(m.count(Subset::Train, Label::Real), 14);
        assert_eq!(m.count(Subset::Dev, Label::Fake), 3);
        assert_eq!(m.subset(Subset::Eval).count(), 6);
        let clip = audio_io::load_clip(m.resolve(&m.records[25]), TOY_SAMPLE_RATE).unwrap();
        assert_eq!(clip.samples.len(), 600);
    }

    #[test]
    fn invalid_sizes() {
        let dir = tempfile::tempdir().unwrap();
        for n in [0, 2, 5] {
            assert!(matches!(build_toy_dataset(n, 100, 1, dir.path()), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn fakes_sit_on_the_8bit_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = synthesize(2000, &mut rng, true);
        quantize_8bit(&mut x);
        for v in x {
            let q = v as f64 * QUANT_LEVELS;
            assert!((q - q.round()).abs() < 1e-4);
        }
    }

    #[test]
    fn clips_fade_to_silence_at_the_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = synthesize(5980, &mut rng, false);
        assert!(x[0].abs() < 1e-6 && x[5979].abs() < 1e-3);
        assert!(x.iter().all(|v| v.abs() <= 0.7));
        assert!(x.iter().any(|v| v.abs() > 0.2));
    }
}
