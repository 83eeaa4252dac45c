//! Forward and inverse short-time Fourier transform for dual-channel audio.
//!
//! Conventions (fixed so shapes are deterministic and the round trip is exact
//! away from the signal edges):
//! - periodic Hann analysis window, synthesis window equal to the analysis
//!   window, weighted overlap-add with per-sample window-square normalization;
//! - `center = true` reflect-pads `n_fft/2` samples at both ends, giving
//!   `T = floor(L/hop) + 1` frames;
//! - spectra are onesided with `F = n_fft/2 + 1` bins.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::fft;
use crate::mat::Mat;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    #[serde(default = "default_window")]
    pub window: WindowKind,
    pub sample_rate: u32,
    #[serde(default = "default_center")]
    pub center: bool,
}

fn default_window() -> WindowKind {
    WindowKind::Hann
}

fn default_center() -> bool {
    true
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 2048,
            hop: 512,
            window: WindowKind::Hann,
            sample_rate: 44100,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft == 0 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "n_fft must be positive and even, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= n_fft, got {}",
                self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn frames_for_len(&self, len: usize) -> usize {
        if self.center {
            len / self.hop + 1
        } else {
            (len.saturating_sub(self.n_fft)) / self.hop + 1
        }
    }

    pub fn window_values<T: Scalar>(&self) -> Vec<T> {
        match self.window {
            WindowKind::Hann => {
                let n = self.n_fft;
                (0..n)
                    .map(|j| {
                        let phase = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                        T::of(0.5 * (1.0 - phase.cos()))
                    })
                    .collect()
            }
        }
    }
}

/// Dual-channel complex spectrogram. Real and imaginary planes are stored as
/// `[2*T, F]` matrices with rows ordered (channel, frame) and columns being
/// frequency bins, which is also the layout the band-split front end consumes.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram<T> {
    pub cfg: StftConfig,
    frames: usize,
    re: Mat<T>,
    im: Mat<T>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn zeros(cfg: StftConfig, frames: usize) -> Self {
        let bins = cfg.bins();
        ComplexSpectrogram {
            cfg,
            frames,
            re: Mat::zeros(CHANNELS * frames, bins),
            im: Mat::zeros(CHANNELS * frames, bins),
        }
    }

    pub fn from_planes(cfg: StftConfig, frames: usize, re: Mat<T>, im: Mat<T>) -> Result<Self> {
        let bins = cfg.bins();
        if re.shape() != (CHANNELS * frames, bins) || im.shape() != re.shape() {
            return Err(Error::shape(
                "ComplexSpectrogram::from_planes",
                format!(
                    "expected [{}, {}], got re {:?} im {:?}",
                    CHANNELS * frames,
                    bins,
                    re.shape(),
                    im.shape()
                ),
            ));
        }
        Ok(ComplexSpectrogram { cfg, frames, re, im })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn re(&self) -> &Mat<T> {
        &self.re
    }

    pub fn im(&self) -> &Mat<T> {
        &self.im
    }

    #[inline]
    pub fn row_index(&self, channel: usize, frame: usize) -> usize {
        channel * self.frames + frame
    }

    pub fn at(&self, channel: usize, bin: usize, frame: usize) -> Complex<T> {
        let r = self.row_index(channel, frame);
        Complex::new(self.re.at(r, bin), self.im.at(r, bin))
    }

    pub fn set(&mut self, channel: usize, bin: usize, frame: usize, v: Complex<T>) {
        let r = self.row_index(channel, frame);
        self.re.set(r, bin, v.re);
        self.im.set(r, bin, v.im);
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// Elementwise complex product `self * other` (mask application).
    pub fn complex_mul(&self, other: &ComplexSpectrogram<T>) -> Result<ComplexSpectrogram<T>> {
        if self.re.shape() != other.re.shape() {
            return Err(Error::shape(
                "ComplexSpectrogram::complex_mul",
                format!("{:?} vs {:?}", self.re.shape(), other.re.shape()),
            ));
        }
        let mut out = self.clone();
        let (ar, ai) = (self.re.data(), self.im.data());
        let (br, bi) = (other.re.data(), other.im.data());
        for idx in 0..ar.len() {
            out.re.data_mut()[idx] = ar[idx] * br[idx] - ai[idx] * bi[idx];
            out.im.data_mut()[idx] = ar[idx] * bi[idx] + ai[idx] * br[idx];
        }
        Ok(out)
    }

    pub fn add(&self, other: &ComplexSpectrogram<T>) -> Result<ComplexSpectrogram<T>> {
        if self.re.shape() != other.re.shape() {
            return Err(Error::shape(
                "ComplexSpectrogram::add",
                format!("{:?} vs {:?}", self.re.shape(), other.re.shape()),
            ));
        }
        let mut out = self.clone();
        out.re.add_assign(&other.re);
        out.im.add_assign(&other.im);
        Ok(out)
    }

    pub fn scale(&mut self, s: T) {
        self.re.scale_in_place(s);
        self.im.scale_in_place(s);
    }

    pub fn max_abs_diff(&self, other: &ComplexSpectrogram<T>) -> T {
        self.re
            .max_abs_diff(&other.re)
            .max(self.im.max_abs_diff(&other.im))
    }

    /// Writes one channel's magnitude as CSV: rows are frequency bins,
    /// columns are frames.
    pub fn write_magnitude_csv(&self, channel: usize, out: &mut impl Write) -> Result<()> {
        for f in 0..self.bins() {
            let mut line = String::new();
            for t in 0..self.frames {
                if t > 0 {
                    line.push(',');
                }
                let v = self.at(channel, f, t);
                let mag = (v.re * v.re + v.im * v.im).sqrt();
                line.push_str(&format!("{:e}", mag.as_f64()));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Reflect an out-of-range index back into `[0, len)` without repeating the
/// edge sample.
fn reflect_index(idx: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

/// Padded sample lookup used by the framing loop.
#[inline]
fn padded_sample<T: Scalar>(x: &[T], idx: isize) -> T {
    if idx >= 0 && (idx as usize) < x.len() {
        x[idx as usize]
    } else {
        x[reflect_index(idx, x.len())]
    }
}

/// Forward STFT of dual-channel audio.
pub fn stft<T: Scalar>(wave: &[Vec<T>; CHANNELS], cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    cfg.validate()?;
    let len = wave[0].len();
    if len == 0 || wave[1].len() != len {
        return Err(Error::Audio(format!(
            "stft needs two equal-length non-empty channels, got {} and {}",
            wave[0].len(),
            wave[1].len()
        )));
    }
    if !cfg.center && len < cfg.n_fft {
        return Err(Error::Audio(format!(
            "stft without centering needs at least n_fft={} samples, got {len}",
            cfg.n_fft
        )));
    }
    for ch in wave {
        if ch.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("stft input".into()));
        }
    }

    let frames = cfg.frames_for_len(len);
    let bins = cfg.bins();
    let window = cfg.window_values::<T>();
    let plans = fft::plans::<T>(cfg.n_fft);
    let offset = if cfg.center {
        -(cfg.n_fft as isize / 2)
    } else {
        0
    };

    let mut spec = ComplexSpectrogram::zeros(*cfg, frames);
    let mut frame_buf = vec![T::zero(); cfg.n_fft];
    let mut spec_buf = vec![Complex::new(T::zero(), T::zero()); bins];
    for (c, channel) in wave.iter().enumerate() {
        for t in 0..frames {
            let start = t as isize * cfg.hop as isize + offset;
            for (j, slot) in frame_buf.iter_mut().enumerate() {
                *slot = padded_sample(channel, start + j as isize) * window[j];
            }
            plans.rfft(&frame_buf, &mut spec_buf);
            let row = spec.row_index(c, t);
            for (f, v) in spec_buf.iter().enumerate() {
                spec.re.set(row, f, v.re);
                spec.im.set(row, f, v.im);
            }
        }
    }
    Ok(spec)
}

/// Floor below which a window-square overlap sum is treated as zero.
fn wsum_floor<T: Scalar>() -> T {
    T::of(1e-8)
}

/// Window-square overlap-add sums for `frames` frames (padded-signal domain).
pub fn window_square_sums<T: Scalar>(cfg: &StftConfig, frames: usize) -> Vec<T> {
    let window = cfg.window_values::<T>();
    let padded_len = (frames - 1) * cfg.hop + cfg.n_fft;
    let mut wsum = vec![T::zero(); padded_len];
    for t in 0..frames {
        for (j, &w) in window.iter().enumerate() {
            wsum[t * cfg.hop + j] += w * w;
        }
    }
    wsum
}

/// ISTFT of a single channel plane. `re`/`im` hold `frames` rows of `bins`
/// onesided spectra; returns exactly `length` samples (trimmed or zero-padded).
pub fn istft_plane<T: Scalar>(
    re: &[T],
    im: &[T],
    frames: usize,
    cfg: &StftConfig,
    length: usize,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Audio("istft of zero-length spectrogram".into()));
    }
    let bins = cfg.bins();
    if re.len() != frames * bins || im.len() != re.len() {
        return Err(Error::shape(
            "istft_plane",
            format!("expected {} values, got {}", frames * bins, re.len()),
        ));
    }
    let window = cfg.window_values::<T>();
    let plans = fft::plans::<T>(cfg.n_fft);
    let padded_len = (frames - 1) * cfg.hop + cfg.n_fft;
    let mut acc = vec![T::zero(); padded_len];
    let wsum = window_square_sums::<T>(cfg, frames);

    let mut spec_buf = vec![Complex::new(T::zero(), T::zero()); bins];
    let mut time_buf = vec![T::zero(); cfg.n_fft];
    for t in 0..frames {
        for f in 0..bins {
            spec_buf[f] = Complex::new(re[t * bins + f], im[t * bins + f]);
        }
        plans.irfft(&spec_buf, &mut time_buf);
        for (j, &w) in window.iter().enumerate() {
            acc[t * cfg.hop + j] += time_buf[j] * w;
        }
    }

    let floor = wsum_floor::<T>();
    let start = if cfg.center { cfg.n_fft / 2 } else { 0 };
    let mut out = vec![T::zero(); length];
    for (n, slot) in out.iter_mut().enumerate() {
        let m = start + n;
        if m < padded_len && wsum[m] > floor {
            *slot = acc[m] / wsum[m];
        }
    }
    Ok(out)
}

/// Adjoint of [`istft_plane`] in its spectrogram argument: maps a cotangent of
/// the output signal to cotangents of the real/imaginary planes.
pub fn istft_plane_adjoint<T: Scalar>(
    grad_wave: &[T],
    frames: usize,
    cfg: &StftConfig,
) -> (Vec<T>, Vec<T>) {
    let bins = cfg.bins();
    let window = cfg.window_values::<T>();
    let plans = fft::plans::<T>(cfg.n_fft);
    let padded_len = (frames - 1) * cfg.hop + cfg.n_fft;
    let wsum = window_square_sums::<T>(cfg, frames);
    let floor = wsum_floor::<T>();
    let start = if cfg.center { cfg.n_fft / 2 } else { 0 };

    let mut grad_acc = vec![T::zero(); padded_len];
    for (n, &g) in grad_wave.iter().enumerate() {
        let m = start + n;
        if m < padded_len && wsum[m] > floor {
            grad_acc[m] = g / wsum[m];
        }
    }

    let mut grad_re = vec![T::zero(); frames * bins];
    let mut grad_im = vec![T::zero(); frames * bins];
    let mut v = vec![T::zero(); cfg.n_fft];
    let mut spec_buf = vec![Complex::new(T::zero(), T::zero()); bins];
    for t in 0..frames {
        for (j, &w) in window.iter().enumerate() {
            v[j] = grad_acc[t * cfg.hop + j] * w;
        }
        plans.irfft_adjoint(&v, &mut spec_buf);
        for (f, s) in spec_buf.iter().enumerate() {
            grad_re[t * bins + f] = s.re;
            grad_im[t * bins + f] = s.im;
        }
    }
    (grad_re, grad_im)
}

/// Inverse STFT of a dual-channel spectrogram; output is trimmed or padded to
/// `length_hint` samples per channel.
pub fn istft<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    length_hint: usize,
) -> Result<[Vec<T>; CHANNELS]> {
    let frames = spec.frames();
    let bins = spec.bins();
    let plane = frames * bins;
    let mut out: [Vec<T>; CHANNELS] = [Vec::new(), Vec::new()];
    for (c, slot) in out.iter_mut().enumerate() {
        let re = &spec.re().data()[c * plane..(c + 1) * plane];
        let im = &spec.im().data()[c * plane..(c + 1) * plane];
        *slot = istft_plane(re, im, frames, &spec.cfg, length_hint)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_wave(len: usize, seed: u64) -> [Vec<f64>; 2] {
        let mut r = rng(seed);
        [
            (0..len).map(|_| r.random_range(-1.0..1.0)).collect(),
            (0..len).map(|_| r.random_range(-1.0..1.0)).collect(),
        ]
    }

    #[test]
    fn framing_arithmetic_matches_contract() {
        let cfg = StftConfig::default();
        let wave = random_wave(44100, 1);
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.bins(), 1025);
        assert_eq!(spec.frames(), 87);
        assert_eq!(spec.re().shape(), (2 * 87, 1025));
    }

    #[test]
    fn zero_wave_gives_zero_spectrogram() {
        let cfg = StftConfig {
            n_fft: 256,
            hop: 64,
            sample_rate: 8000,
            ..Default::default()
        };
        let wave = [vec![0.0f64; 1000], vec![0.0f64; 1000]];
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.re().max_abs(), 0.0);
        assert_eq!(spec.im().max_abs(), 0.0);
        assert_eq!(spec.frames(), cfg.frames_for_len(1000));
    }

    #[test]
    fn cosine_at_bin_16_peaks_at_bin_16() {
        // Oracle: a direct DFT of one windowed frame (naive O(n^2) sum).
        let cfg = StftConfig::default();
        let sr = cfg.sample_rate as f64;
        let freq = 16.0 * sr / cfg.n_fft as f64;
        let len = 44100;
        let tone: Vec<f64> = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / sr).cos())
            .collect();
        let wave = [tone.clone(), tone.clone()];
        let spec = stft(&wave, &cfg).unwrap();

        for t in 4..spec.frames() - 4 {
            let mut best = (0usize, -1.0f64);
            for f in 0..spec.bins() {
                let v = spec.at(0, f, t);
                let mag = (v.re * v.re + v.im * v.im).sqrt();
                if mag > best.1 {
                    best = (f, mag);
                }
            }
            assert_eq!(best.0, 16, "frame {t}");
        }

        // Cross-check one interior frame against the naive windowed DFT.
        let t = 10;
        let window = cfg.window_values::<f64>();
        let start = t as isize * cfg.hop as isize - cfg.n_fft as isize / 2;
        let frame: Vec<f64> = (0..cfg.n_fft)
            .map(|j| padded_sample(&tone, start + j as isize) * window[j])
            .collect();
        for f in [0usize, 5, 16, 100] {
            let mut re = 0.0;
            let mut im = 0.0;
            for (j, &x) in frame.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * f as f64 * j as f64 / cfg.n_fft as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            let v = spec.at(0, f, t);
            assert!((v.re - re).abs() < 1e-8 && (v.im - im).abs() < 1e-8, "bin {f}");
        }
    }

    #[test]
    fn round_trip_is_exact_to_1e6_peak_relative() {
        let cfg = StftConfig::default();
        let wave = random_wave(44100, 7);
        let spec = stft(&wave, &cfg).unwrap();
        let back = istft(&spec, 44100).unwrap();
        let peak = wave[0]
            .iter()
            .chain(wave[1].iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        for c in 0..2 {
            for (a, b) in wave[c].iter().zip(back[c].iter()) {
                assert!((a - b).abs() <= 1e-6 * peak);
            }
        }
    }

    #[test]
    fn zero_spectrogram_gives_zero_wave_and_zero_frames_error() {
        let cfg = StftConfig {
            n_fft: 512,
            hop: 128,
            sample_rate: 16000,
            ..Default::default()
        };
        let spec = ComplexSpectrogram::<f64>::zeros(cfg, 20);
        let wave = istft(&spec, 2000).unwrap();
        assert!(wave[0].iter().chain(wave[1].iter()).all(|&x| x == 0.0));

        let empty = ComplexSpectrogram::<f64>::zeros(cfg, 0);
        assert!(istft(&empty, 100).is_err());
    }

    #[test]
    fn cola_window_square_sum_is_constant_mid_signal() {
        // Oracle: direct summation of shifted squared windows.
        let cfg = StftConfig::default(); // 75% overlap Hann
        let frames = 40;
        let wsum = window_square_sums::<f64>(&cfg, frames);
        let interior = &wsum[cfg.n_fft..wsum.len() - cfg.n_fft];
        let expected = 1.5; // periodic Hann at 4x overlap
        for &w in interior {
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig {
            n_fft: 128,
            hop: 32,
            sample_rate: 8000,
            ..Default::default()
        };
        let x = random_wave(1000, 2);
        let y = random_wave(1000, 3);
        let (a, b) = (0.7f64, -1.3f64);
        let combined = [
            x[0].iter().zip(&y[0]).map(|(u, v)| a * u + b * v).collect::<Vec<_>>(),
            x[1].iter().zip(&y[1]).map(|(u, v)| a * u + b * v).collect::<Vec<_>>(),
        ];
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let sc = stft(&combined, &cfg).unwrap();
        let mut worst = 0.0f64;
        for t in 0..sc.frames() {
            for f in 0..sc.bins() {
                for c in 0..2 {
                    let lhs = sc.at(c, f, t);
                    let rhs = sx.at(c, f, t) * a + sy.at(c, f, t) * b;
                    worst = worst.max((lhs - rhs).norm());
                }
            }
        }
        assert!(worst < 1e-9, "linearity violation {worst}");
    }

    #[test]
    fn parseval_energy_consistency_for_white_noise() {
        let cfg = StftConfig::default();
        let len = 44100;
        let wave = random_wave(len, 11);
        let spec = stft(&wave, &cfg).unwrap();

        // Mean power from the spectrogram, normalized by the exact window
        // weight integral, vs mean power from the waveform.
        let mut spec_energy = 0.0f64;
        for t in 0..spec.frames() {
            for f in 0..spec.bins() {
                let ck = if f == 0 || f == spec.bins() - 1 { 1.0 } else { 2.0 };
                for c in 0..2 {
                    let v = spec.at(c, f, t);
                    spec_energy += ck * (v.re * v.re + v.im * v.im);
                }
            }
        }
        spec_energy /= cfg.n_fft as f64;
        let wsum = window_square_sums::<f64>(&cfg, spec.frames());
        let weight_integral: f64 = wsum.iter().sum();
        let spec_mean_power = spec_energy / (2.0 * weight_integral);

        let wave_mean_power = wave
            .iter()
            .flat_map(|c| c.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            / (2 * len) as f64;

        let rel = (spec_mean_power - wave_mean_power).abs() / wave_mean_power;
        assert!(rel < 0.01, "relative energy mismatch {rel}");
    }

    #[test]
    fn errors_on_bad_input() {
        let cfg = StftConfig::default();
        assert!(stft::<f64>(&[vec![], vec![]], &cfg).is_err());
        assert!(stft(&[vec![0.0, f64::NAN], vec![0.0, 0.0]], &cfg).is_err());
        let bad = StftConfig {
            hop: 4096,
            ..Default::default()
        };
        assert!(stft(&[vec![0.0; 100], vec![0.0; 100]], &bad).is_err());
    }

    #[test]
    fn istft_adjoint_matches_finite_differences() {
        let cfg = StftConfig {
            n_fft: 32,
            hop: 8,
            sample_rate: 8000,
            ..Default::default()
        };
        let frames = 5;
        let bins = cfg.bins();
        let length = 30;
        let mut r = rng(5);
        let re: Vec<f64> = (0..frames * bins).map(|_| r.random_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..frames * bins).map(|_| r.random_range(-1.0..1.0)).collect();
        let gw: Vec<f64> = (0..length).map(|_| r.random_range(-1.0..1.0)).collect();

        let (gre, gim) = istft_plane_adjoint(&gw, frames, &cfg);
        let loss = |re: &[f64], im: &[f64]| -> f64 {
            istft_plane(re, im, frames, &cfg, length)
                .unwrap()
                .iter()
                .zip(gw.iter())
                .map(|(x, g)| x * g)
                .sum()
        };
        let eps = 1e-6;
        for idx in (0..frames * bins).step_by(17) {
            for im_part in [false, true] {
                let (mut rp, mut ip) = (re.clone(), im.clone());
                let (mut rm, mut imn) = (re.clone(), im.clone());
                if im_part {
                    ip[idx] += eps;
                    imn[idx] -= eps;
                } else {
                    rp[idx] += eps;
                    rm[idx] -= eps;
                }
                let fd = (loss(&rp, &ip) - loss(&rm, &imn)) / (2.0 * eps);
                let an = if im_part { gim[idx] } else { gre[idx] };
                assert!((fd - an).abs() < 1e-7, "idx {idx} im={im_part}: {fd} vs {an}");
            }
        }
    }
}
