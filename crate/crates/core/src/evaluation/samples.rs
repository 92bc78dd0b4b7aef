//! Per-clip sample bundles: both transcripts plus waveform and spectrogram
//! images of the original (top) and attacked (bottom) audio.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::audio_io::{self, AudioClip};
use crate::dsp::{self, Spectrogram};
use crate::error::{Error, Result};
use crate::training::PairingIndex;
use crate::transcription::TranscriptionBackend;

const WAVE_WIDTH: u32 = 800;
const WAVE_HEIGHT: u32 = 120;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub clip_id: String,
    pub dir: PathBuf,
    pub transcript_before: String,
    pub transcript_after: String,
    pub marked_words: usize,
}

/// Wraps words that differ by position in brackets, in both transcripts.
/// Words past the end of the shorter transcript count as differing.
pub fn mark_differences(before: &str, after: &str) -> (String, String, usize) {
    let a: Vec<&str> = before.split_whitespace().collect();
    let b: Vec<&str> = after.split_whitespace().collect();
    let mark = |words: &[&str], other: &[&str]| -> (String, usize) {
        let mut n = 0;
        let out: Vec<String> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                if other.get(i) == Some(w) {
                    w.to_string()
                } else {
                    n += 1;
                    format!("[{w}]")
                }
            })
            .collect();
        (out.join(" "), n)
    };
    let (ma, na) = mark(&a, &b);
    let (mb, nb) = mark(&b, &a);
    (ma, mb, na.max(nb))
}

fn draw_waveform(img: &mut GrayImage, samples: &[f32], y0: u32) {
    let mid = y0 + WAVE_HEIGHT / 2;
    for x in 0..WAVE_WIDTH {
        img.put_pixel(x, mid, Luma([200]));
    }
    if samples.is_empty() {
        return;
    }
    let per_col = samples.len().div_ceil(WAVE_WIDTH as usize).max(1);
    let half = (WAVE_HEIGHT / 2 - 1) as f32;
    for (x, col) in samples.chunks(per_col).enumerate().take(WAVE_WIDTH as usize) {
        let lo = col.iter().copied().fold(f32::INFINITY, f32::min).clamp(-1.0, 1.0);
        let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max).clamp(-1.0, 1.0);
        let top = (mid as f32 - hi * half).round() as u32;
        let bottom = (mid as f32 - lo * half).round() as u32;
        for y in top..=bottom {
            img.put_pixel(x as u32, y, Luma([0]));
        }
    }
}

fn render_waveforms(a: &[f32], b: &[f32]) -> GrayImage {
    let mut img = GrayImage::from_pixel(WAVE_WIDTH, WAVE_HEIGHT * 2, Luma([255]));
    draw_waveform(&mut img, a, 0);
    draw_waveform(&mut img, b, WAVE_HEIGHT);
    img
}

/// Low frequencies at the bottom; both panels share one intensity scale.
fn render_spectrograms(a: &Spectrogram, b: &Spectrogram) -> GrayImage {
    let bins = a.freq_bins() as u32;
    let frames = a.frames().max(b.frames()) as u32;
    let (lo, hi) = a
        .values
        .iter()
        .chain(b.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    let mut img = GrayImage::from_pixel(frames.max(1), bins * 2, Luma([0]));
    for (panel, s) in [a, b].into_iter().enumerate() {
        for ((f, t), &v) in s.values.indexed_iter() {
            let level = (255.0 * (v - lo) / span).round() as u8;
            let y = panel as u32 * bins + (bins - 1 - f as u32);
            img.put_pixel(t as u32, y, Luma([level]));
        }
    }
    img
}

fn load_pair(index: &PairingIndex, clip_id: &str, sample_rate: u32) -> Result<(AudioClip, AudioClip)> {
    let p = index.get(clip_id).ok_or_else(|| Error::NotFound(PathBuf::from(clip_id)))?;
    Ok((audio_io::load_clip(&p.original_path, sample_rate)?, audio_io::load_clip(&p.attacked_path, sample_rate)?))
}

/// Writes one bundle per clip under `out_dir/{clip_id}/`. All ids are
/// checked before anything is written.
pub fn dump_samples(
    index: &PairingIndex,
    clip_ids: &[String],
    out_dir: &Path,
    backend: &TranscriptionBackend,
    sample_rate: u32,
) -> Result<Vec<SampleBundle>> {
    if let Some(missing) = clip_ids.iter().find(|id| index.get(id).is_none()) {
        return Err(Error::NotFound(PathBuf::from(missing)));
    }
    let mut bundles = Vec::with_capacity(clip_ids.len());
    for id in clip_ids {
        let (orig, att) = load_pair(index, id, sample_rate)?;
        let before = backend.transcribe(&orig)?;
        let after = backend.transcribe(&att)?;
        let (tb, ta, marked) = mark_differences(&before.text, &after.text);
        let dir = out_dir.join(id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("transcript_before.txt"), format!("{tb}\n"))?;
        std::fs::write(dir.join("transcript_after.txt"), format!("{ta}\n"))?;
        render_waveforms(&orig.samples, &att.samples)
            .save(dir.join("waveform.png"))
            .map_err(|e| Error::Image(e.to_string()))?;
        let sa = dsp::stft_logmag(&orig, dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP)?;
        let sb = dsp::stft_logmag(&att, dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP)?;
        render_spectrograms(&sa, &sb)
            .save(dir.join("spectrogram.png"))
            .map_err(|e| Error::Image(e.to_string()))?;
        bundles.push(SampleBundle {
            clip_id: id.clone(),
            dir,
            transcript_before: tb,
            transcript_after: ta,
            marked_words: marked,
        });
    }
    Ok(bundles)
}
