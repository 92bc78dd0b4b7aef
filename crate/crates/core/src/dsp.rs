//! Filtering, spectrograms and the waveform/spectrogram quality metrics.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// PSNR reported when the two signals are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Magnitude floor applied before `log10`.
pub const LOG_FLOOR: f64 = 1e-10;

pub const DEFAULT_HIGHPASS_HZ: f64 = 30.0;
pub const DEFAULT_HIGHPASS_TAPS: usize = 101;
pub const DEFAULT_N_FFT: usize = 512;
pub const DEFAULT_HOP: usize = 128;

/// Linear-phase FIR filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub taps: Vec<f64>,
    pub cutoff_hz: f64,
    pub sample_rate: u32,
}

impl FilterSpec {
    pub fn dc_gain(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Magnitude response at `freq_hz`, evaluated directly from the taps.
    pub fn gain_at(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate as f64;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, &h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()));
        re.hypot(im)
    }
}

/// Windowed-sinc high-pass: a Hamming-windowed low-pass normalized to unit DC
/// gain, spectrally inverted.
pub fn design_highpass(cutoff_hz: f64, sample_rate: u32, num_taps: usize) -> Result<FilterSpec> {
    if num_taps < 3 || num_taps % 2 == 0 {
        return Err(Error::invalid(format!("num_taps must be odd and >= 3, got {num_taps}")));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::invalid(format!("cutoff {cutoff_hz} Hz outside (0, {nyquist}) Hz")));
    }
    let fc = cutoff_hz / sample_rate as f64;
    let m = (num_taps - 1) as f64;
    let center = num_taps / 2;
    let mut lowpass: Vec<f64> = (0..num_taps)
        .map(|n| {
            let t = n as f64 - m / 2.0;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / m).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = lowpass.iter().sum();
    lowpass.iter_mut().for_each(|h| *h /= sum);
    // Symmetrize explicitly so rounding cannot break linear phase.
    for i in 0..center {
        let avg = 0.5 * (lowpass[i] + lowpass[num_taps - 1 - i]);
        lowpass[i] = avg;
        lowpass[num_taps - 1 - i] = avg;
    }
    let mut taps: Vec<f64> = lowpass.iter().map(|h| -h).collect();
    taps[center] += 1.0;
    Ok(FilterSpec { taps, cutoff_hz, sample_rate })
}

/// Center-aligned FIR filtering with zero padding; output length equals
/// input length.
pub fn apply_fir(x: &[f32], filter: &FilterSpec) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::invalid("cannot filter an empty signal"));
    }
    let taps: Vec<f32> = filter.taps.iter().map(|&t| t as f32).collect();
    let mut y = vec![0.0; x.len()];
    fir_same(x, &taps, &mut y);
    Ok(y)
}

/// `y[i] = sum_j taps[j] * x[i + j - center]`, zero outside `x`.
pub(crate) fn fir_same<T>(x: &[T], taps: &[T], y: &mut [T])
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Add<Output = T> + Default,
{
    let n = x.len();
    let c = taps.len() / 2;
    for (i, out) in y.iter_mut().enumerate() {
        let j0 = c.saturating_sub(i);
        let j1 = taps.len().min(n + c - i);
        let mut acc = T::default();
        for j in j0..j1 {
            acc = acc + taps[j] * x[i + j - c];
        }
        *out = acc;
    }
}

/// Adjoint of [`fir_same`]: accumulates `dx[i + j - center] += taps[j] * dy[i]`.
pub(crate) fn fir_same_adjoint<T>(dy: &[T], taps: &[T], dx: &mut [T])
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Add<Output = T> + Default,
{
    let n = dy.len();
    let c = taps.len() / 2;
    for (i, &g) in dy.iter().enumerate() {
        let j0 = c.saturating_sub(i);
        let j1 = taps.len().min(n + c - i);
        for j in j0..j1 {
            let k = i + j - c;
            dx[k] = dx[k] + taps[j] * g;
        }
    }
}

/// Log-magnitude STFT, `freq_bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn stft_logmag(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    stft_logmag_samples(&clip.samples, clip.sample_rate, n_fft, hop)
}

/// Periodic-Hann STFT magnitude, `log10(max(|X|, 1e-10))`, no centering
/// pad: frame `t` covers samples `[t*hop, t*hop + n_fft)`.
pub fn stft_logmag_samples(samples: &[f32], sample_rate: u32, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(Error::invalid(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::invalid(format!("hop must be in 1..={n_fft}, got {hop}")));
    }
    if samples.len() < n_fft {
        return Err(Error::invalid(format!("signal of {} samples is shorter than n_fft {n_fft}", samples.len())));
    }
    let frames = 1 + (samples.len() - n_fft) / hop;
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos()).collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut values = Array2::<f64>::zeros((bins, frames));
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + n] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            values[[k, t]] = buf[k].norm().max(LOG_FLOOR).log10();
        }
    }
    Ok(Spectrogram { values, n_fft, hop, sample_rate })
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`] when MSE < 1e-12.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("psnr length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("psnr of empty signals"));
    }
    if peak <= 0.0 {
        return Err(Error::invalid("peak must be positive"));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM between two spectrograms.
///
/// Local statistics use a 7x7 Gaussian window (sigma 1.5) evaluated only at
/// positions where the window fits entirely inside the image. The window
/// shrinks to the largest odd size that fits when an axis is shorter than 7.
/// The dynamic range is `max - min` over both inputs, or 1 for a constant pair.
pub fn ssim(sa: &Spectrogram, sb: &Spectrogram) -> Result<f64> {
    if sa.values.dim() != sb.values.dim() {
        return Err(Error::shape(format!("ssim shape mismatch: {:?} vs {:?}", sa.values.dim(), sb.values.dim())));
    }
    if (sa.n_fft, sa.hop) != (sb.n_fft, sb.hop) {
        return Err(Error::shape("ssim inputs use different STFT settings"));
    }
    ssim_2d(sa.values.view(), sb.values.view())
}

pub(crate) fn ssim_2d(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("ssim of empty image"));
    }
    let lo = a.iter().chain(b.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);

    let odd_fit = |n: usize| if n % 2 == 1 { n } else { n - 1 };
    let wh = SSIM_WINDOW.min(odd_fit(h));
    let ww = SSIM_WINDOW.min(odd_fit(w));
    let gh = gaussian_window(wh, SSIM_SIGMA);
    let gw = gaussian_window(ww, SSIM_SIGMA);

    let filt = |m: &Array2<f64>| -> Array2<f64> {
        let (oh, ow) = (h - wh + 1, w - ww + 1);
        let mut rows = Array2::<f64>::zeros((h, ow));
        for i in 0..h {
            for j in 0..ow {
                rows[[i, j]] = (0..ww).map(|k| gw[k] * m[[i, j + k]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros((oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                out[[i, j]] = (0..wh).map(|k| gh[k] * rows[[i + k, j]]).sum();
            }
        }
        out
    };
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filt(&a);
    let mu_b = filt(&b);
    let e_aa = filt(&(&a * &a));
    let e_bb = filt(&(&b * &b));
    let e_ab = filt(&(&a * &b));
    let n = mu_a.len() as f64;
    let total: f64 = ndarray::Zip::from(&mu_a)
        .and(&mu_b)
        .and(&e_aa)
        .and(&e_bb)
        .and(&e_ab)
        .fold(0.0, |acc, &ma, &mb, &eaa, &ebb, &eab| {
            let va = eaa - ma * ma;
            let vb = ebb - mb * mb;
            let cov = eab - ma * mb;
            acc + ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        });
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(values: Array2<f64>) -> Spectrogram {
        Spectrogram { values, n_fft: 512, hop: 128, sample_rate: 16000 }
    }

    #[test]
    fn highpass_rejects_dc_and_is_symmetric() {
        let f = design_highpass(30.0, 16000, 101).unwrap();
        assert!(f.dc_gain().abs() <= 1e-3);
        let n = f.taps.len();
        for i in 0..n {
            assert_eq!(f.taps[i], f.taps[n - 1 - i]);
        }
        let y = apply_fir(&vec![0.5; 4000], &f).unwrap();
        // Away from the zero-padded edges the DC input is removed.
        let interior = &y[60..y.len() - 60];
        assert!(interior.iter().all(|v| v.abs() <= 0.5e-2));
    }

    #[test]
    fn highpass_argument_errors() {
        assert!(matches!(design_highpass(30.0, 16000, 100), Err(Error::InvalidArgument(_))));
        assert!(matches!(design_highpass(8000.0, 16000, 101), Err(Error::InvalidArgument(_))));
        assert!(matches!(design_highpass(30.0, 16000, 1), Err(Error::InvalidArgument(_))));
    }

    /// Frequency response by direct DFT of the taps, independent of
    /// `FilterSpec::gain_at`.
    fn gain_db_oracle(taps: &[f64], freq: f64, rate: f64) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, h) in taps.iter().enumerate() {
            let phase = -2.0 * PI * freq * n as f64 / rate;
            re += h * phase.cos();
            im += h * phase.sin();
        }
        20.0 * (re * re + im * im).sqrt().log10()
    }

    #[test]
    fn gain_at_4khz_is_within_one_db() {
        let f = design_highpass(30.0, 16000, 101).unwrap();
        let g = gain_db_oracle(&f.taps, 4000.0, 16000.0);
        assert!((-1.0..=1.0).contains(&g), "gain {g} dB");
        assert!((20.0 * f.gain_at(4000.0).log10() - g).abs() < 1e-9);
    }

    #[test]
    fn gain_at_twice_cutoff_when_transition_band_fits() {
        // With 101 taps the Hamming transition width is about 3.3 * fs / 101,
        // so the one-octave passband edge holds once the cutoff clears it.
        let f = design_highpass(1000.0, 16000, 101).unwrap();
        let g = gain_db_oracle(&f.taps, 2000.0, 16000.0);
        assert!(g.abs() <= 1.0, "gain {g} dB");
    }

    #[test]
    fn fir_impulse_returns_taps() {
        let f = design_highpass(300.0, 16000, 11).unwrap();
        let mut x = vec![0.0f32; 21];
        x[10] = 1.0;
        let y = apply_fir(&x, &f).unwrap();
        for (j, &t) in f.taps.iter().enumerate() {
            assert!((y[5 + j] - t as f32).abs() < 1e-7);
        }
        assert!(apply_fir(&vec![0.0; 30], &f).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(apply_fir(&[], &f), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fir_adjoint_matches_transpose() {
        let taps = [0.1f64, -0.3, 0.7, 0.2, -0.05];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 9];
        fir_same(&x, &taps, &mut y);
        let mut dx = vec![0.0; 9];
        fir_same_adjoint(&g, &taps, &mut dx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fir_is_linear(xs in prop::collection::vec(-1.0f32..1.0, 1..200), c in -3.0f32..3.0) {
            let f = design_highpass(30.0, 16000, 101).unwrap();
            let ys: Vec<f32> = xs.iter().map(|v| v * 0.5 - 0.1).collect();
            let sum: Vec<f32> = xs.iter().zip(&ys).map(|(a, b)| a + b).collect();
            let fx = apply_fir(&xs, &f).unwrap();
            let fy = apply_fir(&ys, &f).unwrap();
            let fs = apply_fir(&sum, &f).unwrap();
            for i in 0..xs.len() {
                prop_assert!((fs[i] - fx[i] - fy[i]).abs() <= 1e-5);
            }
            let scaled: Vec<f32> = xs.iter().map(|v| v * c).collect();
            let fc = apply_fir(&scaled, &f).unwrap();
            for i in 0..xs.len() {
                prop_assert!((fc[i] - c * fx[i]).abs() <= 1e-5 * (1.0 + c.abs()));
            }
        }

        #[test]
        fn psnr_is_symmetric(pairs in prop::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 1..100)) {
            let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn ssim_self_and_symmetric(seed in 0u64..1000, h in 7usize..20, w in 7usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = spec(Array2::from_shape_simple_fn((h, w), || rng.gen_range(-10.0..0.0)));
            let b = spec(Array2::from_shape_simple_fn((h, w), || rng.gen_range(-10.0..0.0)));
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_bin_centered_sine_peaks_at_its_bin() {
        let rate = 16000;
        let k = 37usize;
        let freq = k as f64 * rate as f64 / 512.0;
        let x: Vec<f32> = (0..4096).map(|n| (2.0 * PI * freq * n as f64 / rate as f64).sin() as f32 * 0.5).collect();
        let s = stft_logmag_samples(&x, rate, 512, 128).unwrap();
        assert_eq!(s.freq_bins(), 257);
        assert_eq!(s.frames(), 1 + (4096 - 512) / 128);
        // Direct DFT of the first windowed frame as the reference.
        let direct: Vec<f64> = (0..257)
            .map(|bin| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..512 {
                    let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / 512.0).cos();
                    let ph = -2.0 * PI * bin as f64 * n as f64 / 512.0;
                    re += x[n] as f64 * w * ph.cos();
                    im += x[n] as f64 * w * ph.sin();
                }
                (re * re + im * im).sqrt().max(LOG_FLOOR).log10()
            })
            .collect();
        let argmax = |v: &mut dyn Iterator<Item = f64>| {
            v.enumerate().fold((0, f64::MIN), |best, (i, x)| if x > best.1 { (i, x) } else { best }).0
        };
        assert_eq!(argmax(&mut direct.iter().copied()), k);
        for t in 0..s.frames() {
            assert_eq!(argmax(&mut s.values.column(t).iter().copied()), k);
        }
        // Off-peak bins are rounding noise; compare only the resolved ones.
        for bin in 0..257 {
            if direct[bin] > -3.0 {
                assert!((s.values[[bin, 0]] - direct[bin]).abs() < 1e-4, "bin {bin}");
            } else {
                assert!(s.values[[bin, 0]] < -2.0, "bin {bin}");
            }
        }
    }

    #[test]
    fn stft_silence_and_frame_count() {
        let s = stft_logmag_samples(&[0.0; 512], 16000, 512, 128).unwrap();
        assert_eq!(s.frames(), 1);
        assert!(s.values.iter().all(|&v| v == -10.0));
        assert!(stft_logmag_samples(&[0.0; 100], 16000, 512, 128).is_err());
        assert!(stft_logmag_samples(&[0.0; 1000], 16000, 500, 128).is_err());
    }

    #[test]
    fn psnr_reference_values() {
        let a: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
        assert!(matches!(psnr(&a, &b[1..], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_degenerate_and_shape_cases() {
        let a = spec(Array2::from_elem((9, 9), -3.0));
        assert!((ssim(&a, &a.clone()).unwrap() - 1.0).abs() < 1e-12);
        let b = spec(Array2::zeros((9, 8)));
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    }

    /// Brute-force SSIM: explicit weighted sums per window position.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let (h, w) = a.dim();
        let g = gaussian_window(7, 1.5);
        let lo = a.iter().chain(b.iter()).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(b.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        let r = hi - lo;
        let (c1, c2) = ((0.01 * r).powi(2), (0.03 * r).powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=h - 7 {
            for j in 0..=w - 7 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..7 {
                    for v in 0..7 {
                        ma += g[u] * g[v] * a[[i + u, j + v]];
                        mb += g[u] * g[v] * b[[i + u, j + v]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..7 {
                    for v in 0..7 {
                        let wt = g[u] * g[v];
                        let da = a[[i + u, j + v]] - ma;
                        let db = b[[i + u, j + v]] - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_brute_force_and_is_near_zero_for_independent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_simple_fn((64, 48), || rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_simple_fn((64, 48), || rng.gen_range(0.0..1.0));
        let fast = ssim(&spec(a.clone()), &spec(b.clone())).unwrap();
        let slow = ssim_oracle(&a, &b);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        assert!(fast.abs() < 0.2, "independent noise ssim {fast}");
        let c = &a * 0.9 + &b * 0.1;
        assert!((ssim(&spec(a.clone()), &spec(c.clone())).unwrap() - ssim_oracle(&a, &c)).abs() < 1e-10);
    }
}
