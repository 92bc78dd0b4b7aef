//! Attack evaluation: detector accuracy before and after the attack,
//! quality metrics, ablation sweeps, and per-clip sample dumps.

mod samples;
mod toy;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{self, AudioClip, DatasetManifest, Label, Subset};
use crate::dsp;
use crate::error::{Error, Result};
use crate::surrogates::{self, SurrogateModel, SurrogateSpec};
use crate::training::{self, PairingIndex, TrainConfig};
use crate::transcription::{self, Embedder, TranscriptionBackend};

pub use samples::{dump_samples, mark_differences, SampleBundle};
pub use toy::{build_toy_dataset, MANIFEST_FILE, TOY_SAMPLE_RATE, TOY_TAG};

pub const REPORT_CSV_HEADER: &str = "victim_id,dataset_tag,scenario,acc_ba,acc_aa,drop,success_rate";
pub const ABLATION_CSV_HEADER: &str = "lambda2,ensemble_size,psnr,ssim,acc_ba,acc_aa";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    White,
    Gray,
    Black,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::White => "white",
            Scenario::Gray => "gray",
            Scenario::Black => "black",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub victims: Vec<SurrogateSpec>,
}

/// A scenario whose victims are loaded.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub victims: Vec<SurrogateModel>,
}

impl ScenarioSpec {
    pub fn load(&self) -> Result<LoadedScenario> {
        Ok(LoadedScenario {
            scenario: self.scenario,
            victims: self.victims.iter().map(surrogates::load_surrogate).collect::<Result<_>>()?,
        })
    }
}

/// Checks the knowledge relation between victims and the attack ensemble:
/// white-box victims share a family and width with some ensemble member,
/// gray-box victims share only a family, black-box victims share neither.
pub fn check_scenario(scenario: &LoadedScenario, ensemble: &[SurrogateModel]) -> Result<()> {
    let same = |v: &SurrogateModel, m: &SurrogateModel| v.family == m.family && v.width() == m.width();
    for v in &scenario.victims {
        let family_known = ensemble.iter().any(|m| m.family == v.family);
        let exact = ensemble.iter().any(|m| same(v, m));
        let ok = match scenario.scenario {
            Scenario::White => exact,
            Scenario::Gray => family_known && !exact,
            Scenario::Black => !family_known,
        };
        if !ok {
            return Err(Error::config(
                format!("evaluation.scenarios.{}", scenario.scenario.name()),
                format!("victim {} ({}) does not fit the {} scenario", v.model_id, v.family, scenario.scenario.name()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub threshold: f64,
    pub frame_len: usize,
    pub sample_rate: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            frame_len: crate::nets::DEFAULT_FRAME_LEN,
            sample_rate: audio_io::DEFAULT_SAMPLE_RATE,
        }
    }
}

fn correct(p: f64, label: Label, threshold: f64) -> bool {
    (p >= threshold) == (label == Label::Real)
}

/// Fraction of eval clips classified correctly over both classes.
pub fn detector_accuracy(victim: &SurrogateModel, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<f64> {
    let recs: Vec<_> = manifest.subset(Subset::Eval).collect();
    if recs.is_empty() {
        return Err(Error::data("eval subset is empty"));
    }
    let mut hits = 0usize;
    for r in &recs {
        let clip = audio_io::load_clip(manifest.resolve(r), opts.sample_rate)?;
        if correct(victim.score_clip(&clip, opts.frame_len)?, r.label, opts.threshold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / recs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub victim_id: String,
    pub dataset_tag: String,
    pub scenario: Scenario,
    pub acc_ba: f64,
    pub acc_aa: f64,
    pub drop: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAverage {
    pub acc_ba: f64,
    pub acc_aa: f64,
    pub drop: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_text_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub scenario_averages: BTreeMap<Scenario, ScenarioAverage>,
    pub quality: Option<QualityReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReportRow>, quality: Option<QualityReport>) -> Self {
        let mut scenario_averages = BTreeMap::new();
        for sc in [Scenario::White, Scenario::Gray, Scenario::Black] {
            let rs: Vec<&ReportRow> = rows.iter().filter(|r| r.scenario == sc).collect();
            if rs.is_empty() {
                continue;
            }
            scenario_averages.insert(
                sc,
                ScenarioAverage {
                    acc_ba: mean(rs.iter().map(|r| r.acc_ba)),
                    acc_aa: mean(rs.iter().map(|r| r.acc_aa)),
                    drop: mean(rs.iter().map(|r| r.drop)),
                    success_rate: mean(rs.iter().map(|r| r.success_rate)),
                },
            );
        }
        EvalReport { rows, scenario_averages, quality }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.victim_id),
                csv_field(&r.dataset_tag),
                r.scenario.name(),
                r.acc_ba,
                r.acc_aa,
                r.drop,
                r.success_rate
            ));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        let csv = dir.join("report.csv");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Clip pairs drawn from the eval subset, loaded once.
struct EvalCorpus {
    /// (clip, attacked clip, label, dataset tag)
    items: Vec<(AudioClip, AudioClip, Label, String)>,
}

impl EvalCorpus {
    fn load(manifest: &DatasetManifest, pairs: &PairingIndex, opts: &EvalOptions) -> Result<Self> {
        let mut items = Vec::new();
        for r in manifest.subset(Subset::Eval) {
            let original = audio_io::load_clip(manifest.resolve(r), opts.sample_rate)?;
            let attacked = match r.label {
                Label::Real => original.clone(),
                Label::Fake => {
                    let pair = pairs
                        .get(&r.clip_id)
                        .ok_or_else(|| Error::data(format!("no attacked version of {}", r.clip_id)))?;
                    let path = Path::new(&pair.attacked_path);
                    if !path.exists() {
                        return Err(Error::data(format!("attacked file for {} is missing: {}", r.clip_id, path.display())));
                    }
                    audio_io::load_clip(path, opts.sample_rate)?
                }
            };
            items.push((original, attacked, r.label, r.dataset_tag.clone()));
        }
        if items.is_empty() {
            return Err(Error::data("eval subset is empty"));
        }
        Ok(EvalCorpus { items })
    }
}

fn victim_rows(victim: &SurrogateModel, scenario: Scenario, corpus: &EvalCorpus, opts: &EvalOptions) -> Result<Vec<ReportRow>> {
    // tag -> (n, hits before, hits after, fakes, fakes scored real)
    let mut stats: BTreeMap<&str, [usize; 5]> = BTreeMap::new();
    for (orig, att, label, tag) in &corpus.items {
        let before = victim.score_clip(orig, opts.frame_len)?;
        let after = if *label == Label::Real { before } else { victim.score_clip(att, opts.frame_len)? };
        let s = stats.entry(tag.as_str()).or_default();
        s[0] += 1;
        s[1] += correct(before, *label, opts.threshold) as usize;
        s[2] += correct(after, *label, opts.threshold) as usize;
        if *label == Label::Fake {
            s[3] += 1;
            s[4] += (after >= opts.threshold) as usize;
        }
    }
    Ok(stats
        .into_iter()
        .map(|(tag, [n, hb, ha, nf, sr])| {
            let acc_ba = hb as f64 / n as f64;
            let acc_aa = ha as f64 / n as f64;
            ReportRow {
                victim_id: victim.model_id.clone(),
                dataset_tag: tag.to_string(),
                scenario,
                acc_ba,
                acc_aa,
                drop: acc_ba - acc_aa,
                success_rate: if nf == 0 { 0.0 } else { sr as f64 / nf as f64 },
            }
        })
        .collect())
}

/// Scores every victim on the eval subset before and after fakes are
/// swapped for their attacked versions. Quality metrics are included when
/// `quality_backend` is given.
pub fn evaluate_attack(
    scenarios: &[LoadedScenario],
    manifest: &DatasetManifest,
    pairs: &PairingIndex,
    opts: &EvalOptions,
    quality_backend: Option<(&TranscriptionBackend, &Embedder)>,
) -> Result<EvalReport> {
    let corpus = EvalCorpus::load(manifest, pairs, opts)?;
    let mut rows = Vec::new();
    for sc in scenarios {
        for v in &sc.victims {
            rows.extend(victim_rows(v, sc.scenario, &corpus, opts)?);
        }
    }
    let quality = match quality_backend {
        Some((b, e)) => {
            let fakes = PairingIndex {
                pairs: pairs
                    .pairs
                    .iter()
                    .filter(|p| p.label == Label::Fake && manifest.find(&p.clip_id).is_some_and(|r| r.subset == Subset::Eval))
                    .cloned()
                    .collect(),
            };
            Some(quality_report(&fakes, b, e, opts.sample_rate)?)
        }
        None => None,
    };
    Ok(EvalReport::from_rows(rows, quality))
}

/// Per-pair PSNR (peak 1), spectrogram SSIM, and transcript similarity,
/// averaged over all pairs.
pub fn quality_report(
    pairs: &PairingIndex,
    backend: &TranscriptionBackend,
    embedder: &Embedder,
    sample_rate: u32,
) -> Result<QualityReport> {
    if pairs.pairs.is_empty() {
        return Err(Error::data("pairing index is empty"));
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut sims = Vec::new();
    for p in &pairs.pairs {
        let a = audio_io::load_clip(&p.original_path, sample_rate)?;
        let b = audio_io::load_clip(&p.attacked_path, sample_rate)?;
        if a.samples.len() != b.samples.len() {
            return Err(Error::data(format!(
                "{}: original has {} samples, attacked has {}",
                p.clip_id,
                a.samples.len(),
                b.samples.len()
            )));
        }
        let (q, s, t) = pair_quality(&a, &b, backend, embedder)?;
        psnrs.push(q);
        ssims.push(s);
        sims.push(t);
    }
    Ok(QualityReport {
        mean_psnr: mean(psnrs.into_iter()),
        mean_ssim: mean(ssims.into_iter()),
        mean_text_similarity: mean(sims.into_iter()),
    })
}

pub fn pair_quality(a: &AudioClip, b: &AudioClip, backend: &TranscriptionBackend, embedder: &Embedder) -> Result<(f64, f64, f64)> {
    let psnr = dsp::psnr(&a.samples, &b.samples, 1.0)?;
    let sa = dsp::stft_logmag(a, dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP)?;
    let sb = dsp::stft_logmag(b, dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP)?;
    let ssim = dsp::ssim(&sa, &sb)?;
    let sim = transcription::text_similarity(a, b, backend, embedder)?;
    Ok((psnr, ssim, sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda2: f64,
    pub ensemble_size: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub acc_ba: f64,
    pub acc_aa: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.lambda2, r.ensemble_size, r.psnr, r.ssim, r.acc_ba, r.acc_aa));
    }
    out
}

pub const DEFAULT_LAMBDA2_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];
pub const DEFAULT_ENSEMBLE_SIZES: [usize; 2] = [2, 3];

/// One train, attack, evaluate run per `(lambda2, M)` cell. The first `M`
/// entries of `ensemble_pool` form each cell's ensemble; `victim` is fixed.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &TrainConfig,
    lambda2_grid: &[f64],
    ensemble_sizes: &[usize],
    ensemble_pool: &[SurrogateSpec],
    victim: &SurrogateModel,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
    backend: &TranscriptionBackend,
    embedder: &Embedder,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if lambda2_grid.is_empty() || ensemble_sizes.is_empty() {
        return Err(Error::invalid("ablation grids must be nonempty"));
    }
    let acc_ba = detector_accuracy(victim, manifest, opts)?;
    let scenario = [LoadedScenario { scenario: Scenario::White, victims: vec![victim.clone()] }];
    let mut rows = Vec::new();
    for &m in ensemble_sizes {
        if m == 0 || m > ensemble_pool.len() {
            return Err(Error::config(
                "ablation.ensemble_sizes",
                format!("ensemble size {m} needs 1..={} pool members", ensemble_pool.len()),
            ));
        }
        for &lambda2 in lambda2_grid {
            let mut cfg = base.clone();
            cfg.weights.lambda2 = lambda2;
            cfg.ensemble = ensemble_pool[..m].to_vec();
            let cell = out_dir.join(format!("lambda2_{lambda2}_m{m}"));
            let outcome = training::train(&cfg, manifest, &cell)?;
            let pairs = training::attack_corpus(&outcome.final_checkpoint, manifest, &cell, Some(cfg.frame_len), Some(Subset::Eval))?;
            let report = evaluate_attack(&scenario, manifest, &pairs, opts, Some((backend, embedder)))?;
            report.write(&cell)?;
            let q = report.quality.expect("quality requested");
            let aa = mean(report.rows.iter().map(|r| r.acc_aa));
            rows.push(AblationRow { lambda2, ensemble_size: m, psnr: q.mean_psnr, ssim: q.mean_ssim, acc_ba, acc_aa: aa });
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join("ablation.csv"))?);
    w.write_all(ablation_csv(&rows).as_bytes())?;
    w.flush()?;
    Ok(rows)
}
