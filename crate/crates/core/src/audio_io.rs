//! Audio loading, normalization, chunking, and dataset manifests.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let clip = AudioClip { clip_id: clip_id.into(), samples, sample_rate, source_path: String::new() };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if self.samples.is_empty() {
            return Err(Error::EmptyAudio(PathBuf::from(&self.source_path)));
        }
        if let Some(bad) = self.samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {bad} outside [-1, 1] in clip {}", self.clip_id)));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes a WAV or FLAC file, downmixes to mono, resamples to
/// `target_rate`, and peak-normalizes only when some sample exceeds 1.
pub fn load_clip(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    let (channels, rate, interleaved) = decode(path)?;
    if interleaved.is_empty() || channels == 0 {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    let mut samples = if rate == target_rate { mono } else { resample(&mono, rate, target_rate) };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Decode { path: path.to_path_buf(), msg: "non-finite samples".into() });
    }
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    let clip_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioClip { clip_id, samples, sample_rate: target_rate, source_path: path.to_string_lossy().into_owned() })
}

fn decode(path: &Path) -> Result<(usize, u32, Vec<f32>)> {
    let decode_err = |msg: String| Error::Decode { path: path.to_path_buf(), msg };
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = File::open(path)?;
        let n = f.read(&mut magic)?;
        if n < 4 {
            return Err(decode_err("file too short".into()));
        }
    }
    match &magic {
        b"RIFF" => {
            let reader = hound::WavReader::open(path).map_err(|e| decode_err(e.to_string()))?;
            let spec = reader.spec();
            let samples: Vec<f32> = match spec.sample_format {
                hound::SampleFormat::Float => reader
                    .into_samples::<f32>()
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| decode_err(e.to_string()))?,
                hound::SampleFormat::Int => {
                    let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                    reader
                        .into_samples::<i32>()
                        .map(|s| s.map(|v| v as f32 / scale))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| decode_err(e.to_string()))?
                }
            };
            Ok((spec.channels as usize, spec.sample_rate, samples))
        }
        b"fLaC" => {
            let mut reader = claxon::FlacReader::open(path).map_err(|e| decode_err(e.to_string()))?;
            let info = reader.streaminfo();
            let scale = (1i64 << (info.bits_per_sample - 1)) as f32;
            let samples: Vec<f32> = reader
                .samples()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_err(e.to_string()))?;
            Ok((info.channels as usize, info.sample_rate, samples))
        }
        _ => Err(decode_err("unrecognized container (expected WAV or FLAC)".into())),
    }
}

/// Band-limited resampling by windowed-sinc interpolation.
///
/// Output length is `round(len * to / from)`, which keeps the duration within
/// one output sample of the input's.
pub fn resample(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    const HALF_WIDTH: f64 = 16.0;
    let ratio = to as f64 / from as f64;
    let out_len = ((x.len() as f64) * ratio).round() as usize;
    // Cutoff relative to the input rate; lowered when downsampling.
    let cutoff = ratio.min(1.0);
    let support = HALF_WIDTH / cutoff;
    (0..out_len)
        .map(|k| {
            let t = k as f64 / ratio;
            let lo = (t - support).ceil().max(0.0) as usize;
            let hi = ((t + support).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (n, &xn) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - n as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let win = 0.5 + 0.5 * (PI * d / support).cos();
                acc += xn as f64 * cutoff * sinc * win;
            }
            acc as f32
        })
        .collect()
}

/// Writes 16-bit PCM mono, clipping to `[-1, 1]` and rounding half away from
/// zero. `read(write(x)) == x` for samples on the 1/32768 grid.
pub fn write_wav_i16(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let path = path.as_ref();
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for &s in samples {
        w.write_sample(quantize_i16(s)).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.finalize().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn quantize_i16(s: f32) -> i16 {
    let v = (s.clamp(-1.0, 1.0) as f64 * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

/// Splits a clip into `frame_len` frames over the clip tiled end to end:
/// a short clip is repeated then cut, and the last frame of a long clip is
/// padded by wrapping around to the clip's beginning.
pub fn chunk(samples: &[f32], frame_len: usize) -> Result<Vec<Vec<f32>>> {
    if frame_len == 0 {
        return Err(Error::invalid("frame_len must be positive"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("cannot chunk an empty clip"));
    }
    let n_frames = samples.len().div_ceil(frame_len);
    Ok((0..n_frames)
        .map(|f| (0..frame_len).map(|i| samples[(f * frame_len + i) % samples.len()]).collect())
        .collect())
}

/// Concatenates frames and trims to `original_len`.
pub fn reassemble(frames: &[Vec<f32>], original_len: usize) -> Vec<f32> {
    let mut out: Vec<f32> = frames.iter().flatten().copied().collect();
    out.truncate(original_len);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Dev,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub path: String,
    pub label: Label,
    pub subset: Subset,
    pub dataset_tag: String,
}

/// Ordered, duplicate-free list of clips. Relative record paths resolve
/// against `root_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub root_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, root_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::data(format!("duplicate clip_id {}", r.clip_id)));
            }
        }
        Ok(DatasetManifest { records, root_dir: root_dir.into() })
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root_dir.join(p)
        }
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.subset == subset)
    }

    pub fn find(&self, clip_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }

    pub fn count(&self, subset: Subset, label: Label) -> usize {
        self.subset(subset).filter(|r| r.label == label).count()
    }

    /// Newline-delimited JSON, one record per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest; relative paths resolve against the file's directory.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, root)
    }
}

/// Frames of several clips, each tagged with its clip position and label.
#[derive(Debug, Clone, Default)]
pub struct FrameSet {
    pub frames: Vec<Vec<f32>>,
    pub labels: Vec<Label>,
    /// Index into the record list the frames were loaded from.
    pub clip_index: Vec<usize>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Loads and chunks every record in `records`.
pub fn load_frames(
    manifest: &DatasetManifest,
    records: &[&ManifestRecord],
    frame_len: usize,
    sample_rate: u32,
) -> Result<FrameSet> {
    let mut set = FrameSet::default();
    for (i, r) in records.iter().enumerate() {
        let clip = load_clip(manifest.resolve(r), sample_rate)?;
        for f in chunk(&clip.samples, frame_len)? {
            set.frames.push(f);
            set.labels.push(r.label);
            set.clip_index.push(i);
        }
    }
    Ok(set)
}

pub const ASVSPOOF_TAG: &str = "asvspoof2019-la";

/// Parses an ASVspoof 2019 LA countermeasure protocol:
/// `SPEAKER_ID AUDIO_FILE - SYSTEM_ID KEY` with `KEY` in `{bonafide, spoof}`.
///
/// The subset follows the file-name convention (`LA_T_` train, `LA_D_` dev,
/// `LA_E_` eval; anything else is treated as eval). Audio paths point at
/// `flac/<AUDIO_FILE>.flac` under `root_dir`, the corpus' own layout.
pub fn parse_asvspoof_protocol(text: &str, root_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 5 {
            return Err(Error::Parse { line: line_no, msg: format!("expected at least 5 fields, found {}", fields.len()) });
        }
        let label = match fields[4] {
            "bonafide" => Label::Real,
            "spoof" => Label::Fake,
            other => return Err(Error::Parse { line: line_no, msg: format!("unknown key `{other}`") }),
        };
        let clip_id = fields[1].to_string();
        if !seen.insert(clip_id.clone()) {
            return Err(Error::Parse { line: line_no, msg: format!("duplicate clip id {clip_id}") });
        }
        let subset = if clip_id.starts_with("LA_T_") {
            Subset::Train
        } else if clip_id.starts_with("LA_D_") {
            Subset::Dev
        } else {
            Subset::Eval
        };
        records.push(ManifestRecord {
            path: format!("flac/{clip_id}.flac"),
            clip_id,
            label,
            subset,
            dataset_tag: ASVSPOOF_TAG.to_string(),
        });
    }
    DatasetManifest::new(records, root_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_wav(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn upsampling_one_second_gives_target_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<i16> = (0..8000).map(|i| ((i as f64 * 0.05).sin() * 8000.0) as i16).collect();
        write_wav(&p, 1, 8000, &x);
        let clip = load_clip(&p, 16000).unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert_eq!(clip.sample_rate, 16000);
        assert_eq!(clip.clip_id, "a");
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let inter: Vec<i16> = (0..2000).flat_map(|i| {
            let v = ((i * 37) % 2000) as i16 - 1000;
            [v, -v]
        }).collect();
        write_wav(&p, 2, 16000, &inter);
        let clip = load_clip(&p, 16000).unwrap();
        assert_eq!(clip.samples.len(), 2000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_clip(dir.path().join("missing.wav"), 16000), Err(Error::NotFound(_))));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"not audio at all").unwrap();
        assert!(matches!(load_clip(&junk, 16000), Err(Error::Decode { .. })));
        let empty = dir.path().join("empty.wav");
        write_wav(&empty, 1, 16000, &[]);
        assert!(matches!(load_clip(&empty, 16000), Err(Error::EmptyAudio(_))));
    }

    #[test]
    fn float_wav_above_unity_is_peak_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [0.5f32, -2.0, 1.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_clip(&p, 16000).unwrap();
        assert_eq!(clip.samples, vec![0.25, -1.0, 0.5]);
    }

    #[test]
    fn wav_round_trip_is_exact_on_16_bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let x: Vec<f32> = (-100..100).map(|i| i as f32 * 37.0 / 32768.0).collect();
        write_wav_i16(&p, &x, 16000).unwrap();
        assert_eq!(load_clip(&p, 16000).unwrap().samples, x);
        assert_eq!(quantize_i16(1.0), 32767);
        assert_eq!(quantize_i16(-1.5), -32768);
        assert_eq!(quantize_i16(0.5 / 32768.0), 1);
        assert_eq!(quantize_i16(-0.5 / 32768.0), -1);
    }

    #[test]
    fn protocol_lines_map_to_records() {
        let text = "LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1271820 - A01 spoof\n\n";
        let m = parse_asvspoof_protocol(text, "/data/LA").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].clip_id, "LA_T_1138215");
        assert_eq!(m.records[0].label, Label::Real);
        assert_eq!(m.records[0].subset, Subset::Train);
        assert_eq!(m.records[1].clip_id, "LA_T_1271820");
        assert_eq!(m.records[1].label, Label::Fake);
        assert_eq!(m.resolve(&m.records[1]), PathBuf::from("/data/LA/flac/LA_T_1271820.flac"));
    }

    #[test]
    fn protocol_errors_carry_line_numbers() {
        match parse_asvspoof_protocol("LA_0079 LA_T_1 - - bonafide\nLA_0079 LA_T_2 -\n", ".") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_asvspoof_protocol("LA_0079 LA_T_1 - - maybe\n", ".") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_jsonl_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str, label| ManifestRecord {
            clip_id: id.into(),
            path: format!("{id}.wav"),
            label,
            subset: Subset::Train,
            dataset_tag: "toy".into(),
        };
        let m = DatasetManifest::new(vec![rec("a", Label::Real), rec("b", Label::Fake)], dir.path()).unwrap();
        let p = dir.path().join("manifest.jsonl");
        m.write_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"clip_id":"a","path":"a.wav","label":"real","subset":"train","dataset_tag":"toy"}"#
        );
        assert_eq!(DatasetManifest::read_jsonl(&p).unwrap(), m);
        assert!(DatasetManifest::new(vec![rec("a", Label::Real), rec("a", Label::Fake)], ".").is_err());
    }

    #[test]
    fn chunk_examples() {
        let x: Vec<f32> = (0..5980).map(|i| i as f32 / 6000.0).collect();
        let f = chunk(&x, 5980).unwrap();
        assert_eq!(f, vec![x.clone()]);

        let short: Vec<f32> = (0..3000).map(|i| i as f32 / 3000.0).collect();
        let f = chunk(&short, 5980).unwrap();
        assert_eq!(f.len(), 1);
        let expected: Vec<f32> = short.iter().chain(short.iter()).take(5980).copied().collect();
        assert_eq!(f[0], expected);

        let long: Vec<f32> = (0..12000).map(|i| (i % 977) as f32 / 977.0).collect();
        let f = chunk(&long, 5980).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(reassemble(&f, 12000), long);

        assert!(matches!(chunk(&x, 0), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn chunk_reassemble_round_trip(len in 1usize..3000, frame in 1usize..700) {
            let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
            let frames = chunk(&x, frame).unwrap();
            prop_assert_eq!(frames.len(), len.div_ceil(frame));
            prop_assert!(frames.iter().all(|f| f.len() == frame));
            prop_assert_eq!(reassemble(&frames, len), x);
        }

        #[test]
        fn resampling_preserves_duration(len in 1usize..4000, from in prop::sample::select(vec![8000u32, 11025, 16000, 22050, 44100, 48000]), to in prop::sample::select(vec![8000u32, 16000, 22050, 48000])) {
            let x = vec![0.1f32; len];
            let y = resample(&x, from, to);
            let d = (y.len() as f64 / to as f64 - len as f64 / from as f64).abs();
            prop_assert!(d <= 1.0 / to as f64 + 1e-12);
        }
    }

    #[test]
    fn resampled_sine_keeps_its_shape() {
        let x: Vec<f32> = (0..8000).map(|n| (2.0 * PI * 440.0 * n as f64 / 8000.0).sin() as f32 * 0.5).collect();
        let y = resample(&x, 8000, 16000);
        for n in 200..15800 {
            let expect = (2.0 * PI * 440.0 * n as f64 / 16000.0).sin() * 0.5;
            assert!((y[n] as f64 - expect).abs() < 5e-3, "n={n}");
        }
    }
}
