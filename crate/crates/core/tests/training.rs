use std::path::Path;

mod common;

use common::{random_surrogate, worst_gradient_error, small_config, smooth_ensemble, tone_batch};
use spoofbreak::audio_io::{self, DatasetManifest, Label, Subset};
use spoofbreak::dsp;
use spoofbreak::evaluation::build_toy_dataset;
use spoofbreak::losses::LossWeights;
use spoofbreak::nets::{DiscriminatorConfig, GeneratorConfig};
use spoofbreak::surrogates::{SurrogateFamily, SurrogateSpec};
use spoofbreak::training::{
    attack_corpus, checkpoint_bytes, checkpoint_path, load_checkpoint, resume, save_checkpoint,
    train, train_step, AttackContext, MetricsLine, TrainConfig, TrainState,
};
use spoofbreak::transcription::TranscriptionBackend;
use spoofbreak::Error;

#[test]
fn whole_loss_gradient_matches_finite_differences() {
    let worst = worst_gradient_error(512, 120);
    println!("worst relative error {worst:e}");
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn forensics_alone_decreases_on_a_fixed_batch() {
    let l = 1024;
    let mut cfg = small_config(l);
    cfg.weights = LossWeights { lambda1: 0.0, lambda2: 1.0, lambda3: 0.0, lambda4: 0.0 };
    cfg.train_discriminator = false;
    cfg.lr_g = 1e-3;
    let mut state = TrainState::<f32>::init(&cfg).unwrap();
    let ctx = AttackContext::<f32>::new(&smooth_ensemble(), &TranscriptionBackend::Mock).unwrap();
    let fake = tone_batch::<f32>(4, l, 5);
    let real = tone_batch::<f32>(4, l, 6);
    let first = train_step(&mut state, &fake, &real, &ctx, &cfg).unwrap().forensics;
    let mut last = first;
    for _ in 0..50 {
        last = train_step(&mut state, &fake, &real, &ctx, &cfg).unwrap().forensics;
    }
    println!("forensics {first} -> {last}");
    assert!(last < first, "forensics went from {first} to {last}");
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    manifest: DatasetManifest,
    config: TrainConfig,
}

/// A tiny corpus whose clips span several generator frames, plus two saved
/// random surrogates.
fn fixture(total_steps: u64, checkpoint_every: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let manifest = build_toy_dataset(16, 1300, 2, &root.join("data")).unwrap();
    let mut ensemble = Vec::new();
    for (k, family) in [SurrogateFamily::ToyCnnSmall, SurrogateFamily::ResTssdnetLike].into_iter().enumerate() {
        let path = root.join(format!("s{k}.safetensors"));
        random_surrogate(family, 2, k as u64).save(&path).unwrap();
        ensemble.push(SurrogateSpec::with_weights(family, path));
    }
    let config = TrainConfig {
        frame_len: 512,
        batch_size: 2,
        total_steps,
        checkpoint_every,
        ensemble,
        generator: GeneratorConfig { channels: [2, 2, 2, 2], ..Default::default() },
        discriminator: DiscriminatorConfig { channels: 2, fc: [4, 4] },
        ..TrainConfig::default()
    };
    Fixture { _dir: dir, root, manifest, config }
}

fn metric_lines(path: &Path) -> Vec<MetricsLine> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn schedule_metrics_and_determinism() {
    let fx = fixture(10, 5);
    let a = train(&fx.config, &fx.manifest, &fx.root.join("a")).unwrap();
    let names: Vec<_> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["step_0000005.safetensors", "step_0000010.safetensors"]);
    assert_eq!(a.final_checkpoint, checkpoint_path(&fx.root.join("a"), 10));
    let lines = metric_lines(&a.metrics_path);
    assert_eq!(lines.len(), 10);
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<u64>>());

    let b = train(&fx.config, &fx.manifest, &fx.root.join("b")).unwrap();
    assert_eq!(std::fs::read(&a.final_checkpoint).unwrap(), std::fs::read(&b.final_checkpoint).unwrap());
    for (x, y) in lines.iter().zip(metric_lines(&b.metrics_path)) {
        assert_eq!(x.losses, y.losses);
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let fx = fixture(10, 5);
    let whole = train(&fx.config, &fx.manifest, &fx.root.join("whole")).unwrap();
    let mut half = fx.config.clone();
    half.total_steps = 5;
    let first = train(&half, &fx.manifest, &fx.root.join("split")).unwrap();
    let resumed = resume(&first.final_checkpoint, &fx.manifest, &fx.root.join("split"), Some(10)).unwrap();
    let (sa, _) = load_checkpoint(&whole.final_checkpoint).unwrap();
    let (sb, cb) = load_checkpoint(&resumed.final_checkpoint).unwrap();
    assert_eq!(sa.step, 10);
    assert_eq!(sa, sb);
    assert_eq!(checkpoint_bytes(&sa, &fx.config).unwrap(), checkpoint_bytes(&sb, &cb).unwrap());
    assert_eq!(metric_lines(&resumed.metrics_path).len(), 10);
}

#[test]
fn ensemble_is_frozen_and_kernel_stays_constrained() {
    let cfg = small_config(512);
    let ensemble = smooth_ensemble();
    let before: Vec<Vec<u8>> = ensemble.members.iter().map(|m| m.to_bytes().unwrap()).collect();
    let ctx = AttackContext::<f32>::new(&ensemble, &TranscriptionBackend::Mock).unwrap();
    let mut state = TrainState::<f32>::init(&cfg).unwrap();
    for k in 0..5 {
        let fake = tone_batch::<f32>(4, 512, 20 + k);
        let real = tone_batch::<f32>(4, 512, 40 + k);
        train_step(&mut state, &fake, &real, &ctx, &cfg).unwrap();
        let taps = state.disc.kernel();
        assert!((taps[2] + 1.0).abs() <= 1e-6);
        let others: f32 = taps.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, v)| v).sum();
        assert!((others - 1.0).abs() <= 1e-5);
    }
    let after: Vec<Vec<u8>> = ensemble.members.iter().map(|m| m.to_bytes().unwrap()).collect();
    assert_eq!(before, after);

    let short = tone_batch::<f32>(4, 256, 1);
    let full = tone_batch::<f32>(4, 512, 2);
    assert!(matches!(train_step(&mut state, &short, &full, &ctx, &cfg), Err(Error::Shape(_))));
}

#[test]
fn attack_corpus_contracts() {
    let fx = fixture(2, 2);
    let run = train(&fx.config, &fx.manifest, &fx.root.join("run")).unwrap();
    let (mut state, config) = load_checkpoint(&run.final_checkpoint).unwrap();
    state.gen.set_alpha(0.0);
    let identity = fx.root.join("identity.safetensors");
    save_checkpoint(&identity, &state, &config).unwrap();

    let out = fx.root.join("attacked");
    let index = attack_corpus(&identity, &fx.manifest, &out, Some(512), None).unwrap();
    assert_eq!(index.pairs.len(), fx.manifest.records.len());
    let mut worst = f64::INFINITY;
    for p in &index.pairs {
        let a = audio_io::load_clip(&p.original_path, 16_000).unwrap();
        let b = audio_io::load_clip(&p.attacked_path, 16_000).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        match p.label {
            Label::Real => assert_eq!(std::fs::read(&p.original_path).unwrap(), std::fs::read(&p.attacked_path).unwrap()),
            Label::Fake => worst = worst.min(dsp::psnr(&a.samples, &b.samples, 1.0).unwrap()),
        }
    }
    println!("worst identity-attack psnr {worst:.2} dB");
    assert!(worst >= 40.0, "psnr {worst}");

    let eval_only = attack_corpus(&identity, &fx.manifest, &fx.root.join("eval"), None, Some(Subset::Eval)).unwrap();
    assert_eq!(eval_only.pairs.len(), fx.manifest.subset(Subset::Eval).count());

    let err = attack_corpus(&identity, &fx.manifest, &fx.root.join("bad"), Some(1024), None).unwrap_err();
    assert!(matches!(err, Error::Config { ref path, .. } if path == "data.frame_len"), "{err}");
}
