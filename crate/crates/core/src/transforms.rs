//! Unitary transforms and prefix handling.
//!
//! All transforms use the symmetric `1/sqrt(N)` normalisation, so DFT, IDFT,
//! DAFT and IDAFT are unitary and power bookkeeping across domains is exact.
//!
//! The discrete affine Fourier transform is evaluated as
//! `chirp(c2) . FFT . chirp(c1)`, two pointwise quadratic-phase multiplies
//! around a single FFT, never as a dense matrix.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Which transform domain a block of samples lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Time,
    Frequency,
    Affine,
    DelayDoppler,
}

/// A block of complex baseband samples tagged with its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    samples: Vec<Complex64>,
    domain: Domain,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>, domain: Domain) -> Self {
        Self { samples, domain }
    }

    pub fn zeros(len: usize, domain: Domain) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], domain)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Complex64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    /// Largest absolute sample-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &ComplexSignal) -> f64 {
        assert_eq!(self.len(), other.len(), "signals differ in length");
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub(crate) fn retag(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

/// DAFT chirp parameters.
///
/// `c1` sets the chirp rate seen by the channel. For the affine-shift
/// identity to hold on an `N`-point grid `2 N c1` has to be an integer,
/// see [`ChirpParams::is_integer_scaled`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpParams {
    pub c1: f64,
    pub c2: f64,
}

impl ChirpParams {
    pub fn new(c1: f64, c2: f64) -> Self {
        Self { c1, c2 }
    }

    /// `c1 = (2 kappa_max + 1) / (2N)`, `c2 = 0`.
    ///
    /// This separates every integer (delay, Doppler) pair with
    /// `|doppler| <= kappa_max` onto a distinct affine-domain shift.
    pub fn for_max_doppler(n: usize, kappa_max: usize) -> Self {
        Self::new((2 * kappa_max + 1) as f64 / (2 * n) as f64, 0.0)
    }

    /// `2 N c1`, the affine-domain shift per sample of delay.
    pub fn delay_shift(&self, n: usize) -> f64 {
        2.0 * n as f64 * self.c1
    }

    /// Whether `2 N c1` is a (non-negative) integer.
    pub fn is_integer_scaled(&self, n: usize) -> bool {
        let k = self.delay_shift(n);
        k >= 0.0 && (k - k.round()).abs() < 1e-9
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unitary FFT (`inverse = false`) or IFFT on `buf`.
pub(crate) fn unitary_fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    plan(n, inverse).process(buf);
    let scale = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Normalised `N`-point DFT, `y[m] = 1/sqrt(N) sum_n x[n] e^{-j 2 pi m n / N}`.
pub fn dft(x: &ComplexSignal, n: usize) -> Result<ComplexSignal> {
    check_len(n, x.len())?;
    let mut buf = x.samples.clone();
    unitary_fft_in_place(&mut buf, false);
    Ok(ComplexSignal::new(buf, Domain::Frequency))
}

/// Normalised inverse DFT, the adjoint of [`dft`].
pub fn idft(x: &ComplexSignal, n: usize) -> Result<ComplexSignal> {
    check_len(n, x.len())?;
    let mut buf = x.samples.clone();
    unitary_fft_in_place(&mut buf, true);
    Ok(ComplexSignal::new(buf, Domain::Time))
}

/// `e^{-j 2 pi c n^2}`, with the phase reduced modulo one cycle first.
pub(crate) fn chirp_phase(c: f64, n: usize) -> Complex64 {
    let nn = (n as f64) * (n as f64);
    let cycles = c * nn;
    let frac = cycles - cycles.floor();
    Complex64::from_polar(1.0, -2.0 * PI * frac)
}

fn chirp_in_place(buf: &mut [Complex64], c: f64, conjugate: bool) {
    if c == 0.0 {
        return;
    }
    for (n, v) in buf.iter_mut().enumerate() {
        let ph = chirp_phase(c, n);
        *v *= if conjugate { ph.conj() } else { ph };
    }
}

/// Multiplies by the chirp diagonal `diag(e^{-j 2 pi c n^2})`, or by its
/// conjugate when `conjugate` is set. The domain tag is left unchanged.
pub fn chirp_diag_apply(x: &ComplexSignal, c: f64, conjugate: bool) -> ComplexSignal {
    let mut out = x.clone();
    chirp_in_place(&mut out.samples, c, conjugate);
    out
}

/// Forward DAFT, `chirp(c2) . F_N . chirp(c1)`.
pub fn daft(x: &ComplexSignal, p: &ChirpParams, n: usize) -> Result<ComplexSignal> {
    check_len(n, x.len())?;
    let mut buf = x.samples.clone();
    daft_in_place(&mut buf, p);
    Ok(ComplexSignal::new(buf, Domain::Affine))
}

/// Inverse DAFT, `chirp(c1)^H . F_N^H . chirp(c2)^H`.
pub fn idaft(y: &ComplexSignal, p: &ChirpParams, n: usize) -> Result<ComplexSignal> {
    check_len(n, y.len())?;
    let mut buf = y.samples.clone();
    idaft_in_place(&mut buf, p);
    Ok(ComplexSignal::new(buf, Domain::Time))
}

pub(crate) fn daft_in_place(buf: &mut [Complex64], p: &ChirpParams) {
    chirp_in_place(buf, p.c1, false);
    unitary_fft_in_place(buf, false);
    chirp_in_place(buf, p.c2, false);
}

pub(crate) fn idaft_in_place(buf: &mut [Complex64], p: &ChirpParams) {
    chirp_in_place(buf, p.c2, true);
    unitary_fft_in_place(buf, true);
    chirp_in_place(buf, p.c1, true);
}

fn check_prefix(prefix: usize, n: usize) -> Result<()> {
    if prefix >= n {
        return Err(Error::InvalidArgument(format!(
            "prefix length {prefix} must be smaller than the block length {n}"
        )));
    }
    Ok(())
}

/// Prepends the last `cp_len` samples of `x`.
pub fn add_cp(x: &ComplexSignal, cp_len: usize) -> Result<ComplexSignal> {
    let n = x.len();
    check_prefix(cp_len, n)?;
    let mut out = Vec::with_capacity(n + cp_len);
    out.extend_from_slice(&x.samples[n - cp_len..]);
    out.extend_from_slice(&x.samples);
    Ok(ComplexSignal::new(out, x.domain))
}

/// Drops the first `cp_len` samples.
pub fn remove_cp(x: &ComplexSignal, cp_len: usize) -> Result<ComplexSignal> {
    strip_prefix(x, cp_len)
}

/// Phase applied to prefix sample `r` (`0 <= r < cpp_len`) of a chirp-periodic
/// prefix: `e^{-j 2 pi c1 (N^2 - 2 N (cpp_len - r))}`.
pub(crate) fn cpp_phase(c1: f64, n: usize, cpp_len: usize, r: usize) -> Complex64 {
    if c1 == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let nf = n as f64;
    let k = (cpp_len - r) as f64;
    let cycles = c1 * (nf * nf - 2.0 * nf * k);
    let frac = cycles - cycles.floor();
    Complex64::from_polar(1.0, -2.0 * PI * frac)
}

/// Prepends a chirp-periodic prefix: the last `cpp_len` samples, each
/// weighted by the matching entry of the CPP phase diagonal.
pub fn add_cpp(
    x: &ComplexSignal,
    cpp_len: usize,
    p: &ChirpParams,
    n: usize,
) -> Result<ComplexSignal> {
    check_len(n, x.len())?;
    check_prefix(cpp_len, n)?;
    let mut out = Vec::with_capacity(n + cpp_len);
    out.extend((0..cpp_len).map(|r| x.samples[n - cpp_len + r] * cpp_phase(p.c1, n, cpp_len, r)));
    out.extend_from_slice(&x.samples);
    Ok(ComplexSignal::new(out, x.domain))
}

/// Drops a chirp-periodic prefix of `cpp_len` samples from an `N + cpp_len` frame.
pub fn remove_cpp(x: &ComplexSignal, cpp_len: usize, n: usize) -> Result<ComplexSignal> {
    check_len(n + cpp_len, x.len())?;
    strip_prefix(x, cpp_len)
}

fn strip_prefix(x: &ComplexSignal, prefix: usize) -> Result<ComplexSignal> {
    if x.len() <= prefix {
        return Err(Error::InvalidArgument(format!(
            "frame of {} samples is too short for a {prefix}-sample prefix",
            x.len()
        )));
    }
    check_prefix(prefix, x.len() - prefix)?;
    Ok(ComplexSignal::new(x.samples[prefix..].to_vec(), x.domain))
}
