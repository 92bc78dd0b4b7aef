use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use spoofbreak::audio_io::DatasetManifest;
use spoofbreak::config::{self, RunConfig};
use spoofbreak::evaluation::{self, EvalReport, LoadedScenario, Scenario, ScenarioSpec};
use spoofbreak::surrogates::{self, SurrogateFamily, SurrogateSpec, SurrogateTrainConfig};
use spoofbreak::training::{self, PairingIndex};
use spoofbreak::Error;

/// Directory consulted for relative model weights and plugin paths.
const CACHE_ENV: &str = "SPOOFBREAK_CACHE";

#[derive(Parser, Debug)]
#[command(name = "spoofbreak", version, about = "Transferable adversarial attacks on audio deepfake detectors")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic real/fake corpus.
    PrepareToy {
        /// Number of clips (even, at least 4).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one toy surrogate detector.
    TrainSurrogate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        family: String,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train the generator against the configured ensemble.
    TrainAttack {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained generator over every fake clip of a corpus.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score victims before and after the attack.
    Evaluate(EvaluateArgs),
    /// Sweep lambda2 and ensemble size.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Fixed victim as `family:weights_path`.
        #[arg(long)]
        victim: String,
        #[arg(long, value_delimiter = ',')]
        grid_lambda2: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        grid_ensemble: Option<Vec<usize>>,
    },
    /// Write transcripts and images for selected pairs.
    DumpSamples {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        clips: Vec<String>,
    },
    /// Print a saved evaluation report as a table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Victims as `scenario:family:weights_path`; replaces evaluation.scenarios.
    #[arg(long, value_delimiter = ',')]
    victims: Vec<String>,
    /// Defaults to data.manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Skip PSNR/SSIM/transcript metrics.
    #[arg(long)]
    no_quality: bool,
}

/// Marks failures that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Relative paths that do not exist locally are looked up in the cache.
fn resolve_cached(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = cache_dir() {
            return dir.join(path);
        }
    }
    path.to_path_buf()
}

fn resolve_spec(spec: &SurrogateSpec) -> SurrogateSpec {
    let mut s = spec.clone();
    s.weights_path = s.weights_path.as_deref().map(resolve_cached);
    if let Some(cmd) = s.command.as_mut() {
        if let Some(first) = cmd.first_mut() {
            *first = resolve_cached(Path::new(first)).display().to_string();
        }
    }
    s
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => config::load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    cfg.ensemble.members = cfg.ensemble.members.iter().map(resolve_spec).collect();
    for sc in &mut cfg.evaluation.scenarios {
        sc.victims = sc.victims.iter().map(resolve_spec).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_family(name: &str) -> Result<SurrogateFamily> {
    name.parse().map_err(|_| usage(format!("unknown surrogate family `{name}`")))
}

fn parse_victim(text: &str) -> Result<(Scenario, SurrogateSpec)> {
    let mut parts = text.splitn(3, ':');
    let (Some(sc), Some(fam), path) = (parts.next(), parts.next(), parts.next()) else {
        bail!(usage(format!("--victims entry `{text}` must look like scenario:family:weights_path")));
    };
    let scenario = match sc {
        "white" => Scenario::White,
        "gray" => Scenario::Gray,
        "black" => Scenario::Black,
        _ => bail!(usage(format!("unknown scenario `{sc}` in --victims"))),
    };
    let family = parse_family(fam)?;
    let spec = match path {
        Some(p) if !p.is_empty() => SurrogateSpec::with_weights(family, resolve_cached(Path::new(p))),
        _ => SurrogateSpec { weights_path: None, ..SurrogateSpec::with_weights(family, "") },
    };
    Ok((scenario, spec))
}

/// Digest over the manifest and every clip file it lists.
fn corpus_digest(dir: &Path) -> Result<Option<String>> {
    let manifest_path = dir.join(evaluation::MANIFEST_FILE);
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest = DatasetManifest::read_jsonl(&manifest_path)?;
    let mut h = Sha256::new();
    h.update(fs::read(&manifest_path)?);
    for r in &manifest.records {
        let mut buf = Vec::new();
        fs::File::open(manifest.resolve(r))
            .and_then(|mut f| f.read_to_end(&mut buf))
            .with_context(|| format!("reading {}", r.path))?;
        h.update(&buf);
    }
    Ok(Some(format!("{:x}", h.finalize())))
}

fn manifest_from(path: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::read_jsonl(path)?)
}

fn prepare_toy(cfg: &mut RunConfig, out: &Path, n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        cfg.data.toy_clips = n;
        cfg.validate()?;
    }
    let before = corpus_digest(out)?;
    let manifest = evaluation::build_toy_dataset(cfg.data.toy_clips, cfg.data.frame_len, cfg.training.seed, out)?;
    let after = corpus_digest(out)?.expect("manifest was just written");
    cfg.data.manifest = Some(out.join(evaluation::MANIFEST_FILE));
    println!("wrote {} clips to {}", manifest.records.len(), out.display());
    println!("corpus sha256 {after}");
    match before {
        Some(b) if b == after => println!("corpus is byte-identical to the previous run"),
        Some(_) => println!("corpus differs from the previous contents of {}", out.display()),
        None => {}
    }
    Ok(())
}

fn train_surrogate(cfg: &RunConfig, out: &Path, manifest: &Path, family: &str, width: Option<usize>) -> Result<()> {
    let family = parse_family(family)?;
    if !family.is_builtin() {
        bail!(usage("external detectors cannot be trained here"));
    }
    let manifest = manifest_from(manifest)?;
    let tc = SurrogateTrainConfig {
        family,
        width,
        epochs: cfg.ensemble.surrogate_epochs,
        lr: cfg.ensemble.surrogate_lr,
        seed: cfg.training.seed,
        batch_size: cfg.ensemble.surrogate_batch_size,
        frame_len: cfg.data.frame_len,
        sample_rate: cfg.data.sample_rate,
    };
    let model = surrogates::train_toy_surrogate(&manifest, &tc)?;
    let path = out.join(format!("{}.safetensors", model.model_id));
    model.save(&path)?;
    let acc = model.meta().and_then(|m| m.heldout_accuracy).unwrap_or(f64::NAN);
    println!("{} saved to {} (held-out accuracy {acc:.4})", model.model_id, path.display());
    Ok(())
}

fn train_attack(cfg: &RunConfig, out: &Path, manifest: &Path, resume: Option<&Path>) -> Result<()> {
    let manifest = manifest_from(manifest)?;
    let outcome = match resume {
        Some(ckpt) => training::resume(ckpt, &manifest, out, Some(cfg.training.total_steps))?,
        None => {
            if cfg.ensemble.members.is_empty() {
                bail!(Error::config("ensemble.members", "at least one surrogate is required"));
            }
            training::train(&cfg.train_config(), &manifest, out)?
        }
    };
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    println!("metrics {}", outcome.metrics_path.display());
    Ok(())
}

fn attack(cfg: &RunConfig, out: &Path, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let manifest = manifest_from(manifest)?;
    let index = training::attack_corpus(checkpoint, &manifest, out, Some(cfg.data.frame_len), None)?;
    println!("attacked {} clips; index at {}", index.pairs.len(), out.join(training::PAIRS_FILE).display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Path, args: &EvaluateArgs) -> Result<()> {
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| usage("--manifest is required when data.manifest is not configured"))?;
    let manifest = manifest_from(&manifest_path)?;
    let pairs = PairingIndex::read_jsonl(&args.pairs)?;
    let specs: Vec<ScenarioSpec> = if args.victims.is_empty() {
        cfg.evaluation.scenarios.clone()
    } else {
        let mut grouped: Vec<ScenarioSpec> = Vec::new();
        for v in &args.victims {
            let (scenario, spec) = parse_victim(v)?;
            match grouped.iter_mut().find(|g| g.scenario == scenario) {
                Some(g) => g.victims.push(spec),
                None => grouped.push(ScenarioSpec { scenario, victims: vec![spec] }),
            }
        }
        grouped
    };
    if specs.is_empty() {
        bail!(usage("no victims: pass --victims or configure evaluation.scenarios"));
    }
    let scenarios: Vec<LoadedScenario> = specs.iter().map(ScenarioSpec::load).collect::<Result<_, _>>()?;
    // Scenario labels are only checked when the attack ensemble is loadable here.
    match training::load_ensemble(&cfg.ensemble.members) {
        Ok(ensemble) => {
            for s in &scenarios {
                if let Err(e) = evaluation::check_scenario(s, &ensemble.members) {
                    log::warn!("{e}");
                }
            }
        }
        Err(e) => log::warn!("skipping scenario check: {e}"),
    }
    let backend = cfg.transcription.backend()?;
    let embedder = cfg.transcription.embedder()?;
    let quality = (!args.no_quality).then_some((&backend, &embedder));
    let report = evaluation::evaluate_attack(&scenarios, &manifest, &pairs, &cfg.eval_options(), quality)?;
    let (json, csv) = report.write(out)?;
    print!("{}", render_report(&report));
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn ablate(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    victim: &str,
    grid_lambda2: Option<&[f64]>,
    grid_ensemble: Option<&[usize]>,
) -> Result<()> {
    let manifest = manifest_from(manifest)?;
    let (family, path) = victim
        .split_once(':')
        .ok_or_else(|| usage(format!("--victim `{victim}` must look like family:weights_path")))?;
    let spec = SurrogateSpec::with_weights(parse_family(family)?, resolve_cached(Path::new(path)));
    let victim = surrogates::load_surrogate(&spec)?;
    let lambda2 = grid_lambda2.unwrap_or(&cfg.evaluation.lambda2_grid);
    let sizes = grid_ensemble.unwrap_or(&cfg.evaluation.ensemble_sizes);
    let backend = cfg.transcription.backend()?;
    let embedder = cfg.transcription.embedder()?;
    let rows = evaluation::ablate(
        &cfg.train_config(),
        lambda2,
        sizes,
        &cfg.ensemble.members,
        &victim,
        &manifest,
        &cfg.eval_options(),
        &backend,
        &embedder,
        out,
    )?;
    print!("{}", evaluation::ablation_csv(&rows));
    Ok(())
}

fn dump_samples(cfg: &RunConfig, out: &Path, pairs: &Path, clips: &[String]) -> Result<()> {
    let index = PairingIndex::read_jsonl(pairs)?;
    let bundles = evaluation::dump_samples(&index, clips, out, &cfg.transcription.backend()?, cfg.data.sample_rate)?;
    for b in bundles {
        println!("{}: {} marked word(s) -> {}", b.clip_id, b.marked_words, b.dir.display());
    }
    Ok(())
}

fn render_report(report: &EvalReport) -> String {
    let mut s = format!(
        "{:<28} {:<16} {:<6} {:>7} {:>7} {:>7} {:>8}\n",
        "victim", "dataset", "scen.", "acc_ba", "acc_aa", "drop", "success"
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{:<28} {:<16} {:<6} {:>7.4} {:>7.4} {:>7.4} {:>8.4}\n",
            r.victim_id,
            r.dataset_tag,
            r.scenario.name(),
            r.acc_ba,
            r.acc_aa,
            r.drop,
            r.success_rate
        ));
    }
    for (sc, a) in &report.scenario_averages {
        s.push_str(&format!(
            "{:<28} {:<16} {:<6} {:>7.4} {:>7.4} {:>7.4} {:>8.4}\n",
            "average",
            "",
            sc.name(),
            a.acc_ba,
            a.acc_aa,
            a.drop,
            a.success_rate
        ));
    }
    if let Some(q) = &report.quality {
        s.push_str(&format!(
            "quality: psnr {:.2} dB, ssim {:.4}, text similarity {:.4}\n",
            q.mean_psnr, q.mean_ssim, q.mean_text_similarity
        ));
    }
    s
}

fn report(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", render_report(&report));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_run_config(&cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::PrepareToy { n } => prepare_toy(&mut cfg, out, *n)?,
        Command::TrainSurrogate { manifest, family, width } => train_surrogate(&cfg, out, manifest, family, *width)?,
        Command::TrainAttack { manifest, resume } => train_attack(&cfg, out, manifest, resume.as_deref())?,
        Command::Attack { checkpoint, manifest } => attack(&cfg, out, checkpoint, manifest)?,
        Command::Evaluate(args) => evaluate(&cfg, out, args)?,
        Command::Ablate { manifest, victim, grid_lambda2, grid_ensemble } => {
            ablate(&cfg, out, manifest, victim, grid_lambda2.as_deref(), grid_ensemble.as_deref())?
        }
        Command::DumpSamples { pairs, clips } => dump_samples(&cfg, out, pairs, clips)?,
        Command::Report { report: path } => report(path)?,
    }
    cfg.write_resolved(out)?;
    Ok(())
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. } | Error::InvalidArgument(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
