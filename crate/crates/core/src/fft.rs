//! Real-input FFT helpers on top of `rustfft`, with a thread-local plan cache.
//!
//! Spectra are stored onesided (`F = n/2 + 1` bins). The inverse enforces the
//! Hermitian symmetry of a real signal, so imaginary parts at DC and Nyquist
//! are ignored on reconstruction.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Scalar;

pub struct PlanPair<T: Scalar> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    n: usize,
}

thread_local! {
    static PLAN_CACHE: RefCell<HashMap<(TypeId, usize), Arc<dyn Any + Send + Sync>>> =
        RefCell::new(HashMap::new());
}

/// Fetch (or build and cache) the forward/inverse complex FFT plans for `n`.
pub fn plans<T: Scalar>(n: usize) -> Arc<PlanPair<T>> {
    PLAN_CACHE.with(|cache| {
        let key = (TypeId::of::<T>(), n);
        let mut cache = cache.borrow_mut();
        if let Some(entry) = cache.get(&key) {
            return entry
                .clone()
                .downcast::<PlanPair<T>>()
                .expect("plan cache type");
        }
        let mut planner = FftPlanner::<T>::new();
        let pair = Arc::new(PlanPair {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            n,
        });
        cache.insert(key, pair.clone() as Arc<dyn Any + Send + Sync>);
        pair
    })
}

impl<T: Scalar> PlanPair<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Forward real FFT: `frame` has `n` samples, `out` receives the onesided
    /// spectrum (`n/2 + 1` unnormalized bins).
    pub fn rfft(&self, frame: &[T], out: &mut [Complex<T>]) {
        assert_eq!(frame.len(), self.n);
        assert_eq!(out.len(), self.bins());
        let mut buf: Vec<Complex<T>> = frame
            .iter()
            .map(|&x| Complex::new(x, T::zero()))
            .collect();
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.bins()]);
    }

    /// Inverse of [`Self::rfft`] including the `1/n` normalization. Imaginary
    /// parts of the DC and Nyquist bins are discarded (Hermitian symmetry).
    pub fn irfft(&self, spec: &[Complex<T>], out: &mut [T]) {
        let n = self.n;
        let bins = self.bins();
        assert_eq!(spec.len(), bins);
        assert_eq!(out.len(), n);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        buf[0] = Complex::new(spec[0].re, T::zero());
        for k in 1..bins - 1 {
            buf[k] = spec[k];
            buf[n - k] = spec[k].conj();
        }
        buf[n / 2] = Complex::new(spec[bins - 1].re, T::zero());
        self.inverse.process(&mut buf);
        let inv_n = T::one() / T::of(n as f64);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.re * inv_n;
        }
    }

    /// Adjoint of [`Self::irfft`] as a linear map from the onesided spectrum
    /// (real and imaginary parts as independent reals) to the time signal.
    ///
    /// For `x = irfft(X)`: `d/dRe(X_k) x_j = (c_k/n) cos(2πkj/n)` and
    /// `d/dIm(X_k) x_j = -(c_k/n) sin(2πkj/n)` with `c_k = 1` at DC/Nyquist
    /// and `2` elsewhere, which is exactly a forward FFT of the cotangent
    /// scaled by `c_k/n` (imaginary parts at DC/Nyquist are zero because the
    /// forward map ignores them).
    pub fn irfft_adjoint(&self, grad_time: &[T], out: &mut [Complex<T>]) {
        let n = self.n;
        let bins = self.bins();
        assert_eq!(grad_time.len(), n);
        assert_eq!(out.len(), bins);
        self.rfft(grad_time, out);
        let inv_n = T::one() / T::of(n as f64);
        let two = T::of(2.0);
        out[0] = Complex::new(out[0].re * inv_n, T::zero());
        for v in out.iter_mut().take(bins - 1).skip(1) {
            *v = Complex::new(v.re * two * inv_n, v.im * two * inv_n);
        }
        out[bins - 1] = Complex::new(out[bins - 1].re * inv_n, T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfft_of_known_cosine_peaks_at_its_bin() {
        let n = 64;
        let p = plans::<f64>(n);
        let frame: Vec<f64> = (0..n)
            .map(|j| (2.0 * std::f64::consts::PI * 4.0 * j as f64 / n as f64).cos())
            .collect();
        let mut spec = vec![Complex::new(0.0, 0.0); n / 2 + 1];
        p.rfft(&frame, &mut spec);
        // cos at bin 4 -> X_4 = n/2, everything else ~0.
        assert!((spec[4].re - n as f64 / 2.0).abs() < 1e-9);
        assert!(spec[4].im.abs() < 1e-9);
        assert!(spec[3].norm() < 1e-9);
    }

    #[test]
    fn irfft_round_trips_rfft() {
        let n = 128;
        let p = plans::<f64>(n);
        let frame: Vec<f64> = (0..n).map(|j| ((j * 37 + 11) % 101) as f64 / 50.0 - 1.0).collect();
        let mut spec = vec![Complex::new(0.0, 0.0); n / 2 + 1];
        let mut back = vec![0.0; n];
        p.rfft(&frame, &mut spec);
        p.irfft(&spec, &mut back);
        for (a, b) in frame.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn irfft_adjoint_matches_finite_differences() {
        let n = 16;
        let bins = n / 2 + 1;
        let p = plans::<f64>(n);
        // Random-ish spectrum and cotangent.
        let spec: Vec<Complex<f64>> = (0..bins)
            .map(|k| Complex::new((k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()))
            .collect();
        let gt: Vec<f64> = (0..n).map(|j| (j as f64 * 0.31).sin()).collect();

        let mut adj = vec![Complex::new(0.0, 0.0); bins];
        p.irfft_adjoint(&gt, &mut adj);

        let loss = |s: &[Complex<f64>]| -> f64 {
            let mut out = vec![0.0; n];
            p.irfft(s, &mut out);
            out.iter().zip(gt.iter()).map(|(x, g)| x * g).sum()
        };
        let eps = 1e-6;
        for k in 0..bins {
            for im in [false, true] {
                let mut plus = spec.clone();
                let mut minus = spec.clone();
                if im {
                    plus[k].im += eps;
                    minus[k].im -= eps;
                } else {
                    plus[k].re += eps;
                    minus[k].re -= eps;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = if im { adj[k].im } else { adj[k].re };
                assert!(
                    (fd - an).abs() < 1e-7,
                    "bin {k} im={im}: fd {fd} vs adjoint {an}"
                );
            }
        }
    }
}
