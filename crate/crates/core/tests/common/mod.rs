//! Helpers shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spoofbreak::losses::{AdversarialForm, LossWeights};
use spoofbreak::nets::{DiscriminatorConfig, GeneratorConfig};
use spoofbreak::nn::{Module, Real};
use spoofbreak::surrogates::{
    build_network, SurrogateEnsemble, SurrogateFamily, SurrogateMeta, SurrogateModel, SURROGATE_FORMAT_VERSION,
};
use spoofbreak::training::{generator_pass, AttackContext, TrainConfig, TrainState};
use spoofbreak::transcription::TranscriptionBackend;

pub fn random_surrogate(family: SurrogateFamily, width: usize, seed: u64) -> SurrogateModel {
    let net = build_network(family, width, seed).unwrap();
    let meta = SurrogateMeta {
        family,
        width,
        real_index: 0,
        heldout_accuracy: None,
        seed,
        format_version: SURROGATE_FORMAT_VERSION,
    };
    SurrogateModel::from_network(format!("{family}_{seed}"), net, meta)
}

/// Tanh-only members keep the loss smooth enough for finite differences.
pub fn smooth_ensemble() -> SurrogateEnsemble {
    SurrogateEnsemble::new(vec![
        random_surrogate(SurrogateFamily::ToyCnnSmall, 4, 1),
        random_surrogate(SurrogateFamily::ToyCnnLarge, 4, 2),
    ])
    .unwrap()
}

pub fn tone_batch<T: Real>(b: usize, l: usize, seed: u64) -> Array3<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64, f64)> =
        (0..b).map(|_| (rng.gen_range(300.0..3000.0), rng.gen_range(0.0..6.28), rng.gen_range(0.1..0.5))).collect();
    Array3::from_shape_fn((b, 1, l), |(i, _, t)| {
        let (f, ph, a) = params[i];
        let noise: f64 = ((i * 7919 + t * 104729) % 1000) as f64 / 1000.0 - 0.5;
        T::lit(a * (std::f64::consts::TAU * f * t as f64 / 16_000.0 + ph).sin() + 0.01 * noise)
    })
}

pub fn small_config(l: usize) -> TrainConfig {
    TrainConfig {
        frame_len: l,
        batch_size: 4,
        generator: GeneratorConfig { channels: [4, 4, 4, 4], ..Default::default() },
        discriminator: DiscriminatorConfig { channels: 4, fc: [8, 8] },
        ..TrainConfig::default()
    }
}


/// Largest relative error between analytic and central-difference
/// gradients of the whole generator loss over `n_coords` sampled
/// generator parameters, always including the residual scale.
pub fn worst_gradient_error(l: usize, n_coords: usize) -> f64 {
    let cfg = small_config(l);
    let mut state = TrainState::<f64>::init(&cfg).unwrap();
    // A larger residual scale makes every branch parameter matter.
    state.gen.set_alpha(0.3);
    let ctx = AttackContext::<f64>::new(&smooth_ensemble(), &TranscriptionBackend::Mock).unwrap();
    let fake = tone_batch::<f64>(4, l, 3);
    let weights = LossWeights { lambda1: 1.0, lambda2: 0.5, lambda3: 1.0, lambda4: 0.5 };
    let form = AdversarialForm::NonSaturating;
    let pass = generator_pass(&state.gen, &state.disc, &ctx, &fake, &weights, form).unwrap();

    let mut coords = vec![(0usize, 0usize)];
    {
        let mut ps = Vec::new();
        state.gen.params("", &mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        while coords.len() < n_coords {
            let pi = rng.gen_range(0..ps.len());
            let k = rng.gen_range(0..ps[pi].1.value.len());
            coords.push((pi, k));
        }
    }
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &(pi, k) in &coords {
        let mut eval = |delta: f64| {
            let mut ps = Vec::new();
            state.gen.params_mut("", &mut ps);
            ps[pi].1.value.as_slice_mut().unwrap()[k] += delta;
            drop(ps);
            generator_pass(&state.gen, &state.disc, &ctx, &fake, &weights, form).unwrap().total
        };
        let plus = eval(h);
        let minus = eval(-2.0 * h);
        eval(h);
        let fd = (plus - minus) / (2.0 * h);
        let an = pass.grads[pi].as_slice().unwrap()[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}
