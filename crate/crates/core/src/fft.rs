//! Real-input DFT helpers on top of `rustfft`.
//!
//! Convention: the forward transform is unnormalized and returns the
//! `n / 2 + 1` non-negative frequencies; the inverse carries `1 / n` and
//! ignores the imaginary parts of the DC and Nyquist bins.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct RealFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Shared plan for length `n`.
pub fn plan(n: usize) -> Arc<RealFft> {
    static PLANS: OnceLock<Mutex<HashMap<usize, Arc<RealFft>>>> = OnceLock::new();
    let mut plans = PLANS.get_or_init(Default::default).lock().expect("fft plan cache");
    plans
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(RealFft {
                n,
                forward: planner.plan_fft_forward(n),
                inverse: planner.plan_fft_inverse(n),
            })
        })
        .clone()
}

impl RealFft {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Number of non-negative frequencies, `n / 2 + 1`.
    pub fn modes(&self) -> usize {
        self.n / 2 + 1
    }

    /// Full complex spectrum of a real signal.
    pub fn full_forward(&self, x: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.n);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Real part of the unnormalized inverse of a full spectrum, times 1/n.
    pub fn full_inverse_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        debug_assert_eq!(spectrum.len(), self.n);
        self.inverse.process(&mut spectrum);
        let scale = 1.0 / self.n as f64;
        spectrum.iter().map(|c| c.re * scale).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let mut full = self.full_forward(x);
        full.truncate(self.modes());
        full
    }

    /// Inverse of a half spectrum; missing high modes are treated as zero.
    pub fn inverse(&self, half: &[Complex64]) -> Vec<f64> {
        let n = self.n;
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        for (m, &c) in half.iter().enumerate().take(self.modes()) {
            full[m] = c;
            if m > 0 && n - m != m {
                full[n - m] = c.conj();
            }
        }
        full[0].im = 0.0;
        if n % 2 == 0 && half.len() > n / 2 {
            full[n / 2].im = 0.0;
        }
        self.full_inverse_real(full)
    }

    /// `Re sum_m y_m e^{2 pi i m u / n}` over the supplied modes, no scaling:
    /// the adjoint of [`RealFft::forward`] truncated to `y.len()` modes.
    pub fn forward_adjoint(&self, y: &[Complex64]) -> Vec<f64> {
        let mut full = vec![Complex64::new(0.0, 0.0); self.n];
        full[..y.len()].copy_from_slice(y);
        self.inverse.process(&mut full);
        full.iter().map(|c| c.re).collect()
    }

    /// Adjoint of [`RealFft::inverse`] restricted to the first `modes` modes:
    /// `(c_m / n) * forward(x)_m`.
    pub fn inverse_adjoint(&self, x: &[f64], modes: usize) -> Vec<Complex64> {
        let mut spec = self.forward(x);
        spec.truncate(modes);
        let n = self.n as f64;
        for (m, c) in spec.iter_mut().enumerate() {
            *c *= self.mode_multiplicity(m) / n;
        }
        spec
    }

    /// Weight `c_m` of mode `m` in the inverse: 1 for DC and Nyquist, else 2.
    pub fn mode_multiplicity(&self, m: usize) -> f64 {
        if m == 0 || (self.n % 2 == 0 && m == self.n / 2) {
            1.0
        } else {
            2.0
        }
    }
}
