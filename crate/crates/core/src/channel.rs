//! Delay-Doppler channels, AWGN and the superimposed receive signal.
//!
//! A path `(h, tau, nu)` acts on a prefixed frame of length `L` as
//! `h Pi^tau Delta^nu`: a phase ramp followed by a cyclic delay of `tau`
//! samples. Doppler is expressed in subcarrier-spacing units (cycles per `N`
//! samples), so the ramp is `e^{-j 2 pi nu m / N}` for frame sample `m`.
//! Integer `nu` then moves energy by whole bins in every transform domain.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::transforms::ComplexSignal;
use crate::waveforms::SystemConfig;
use crate::SPEED_OF_LIGHT;

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    /// Delay in samples.
    pub delay: usize,
    /// Doppler in subcarrier-spacing units.
    pub doppler: f64,
}

impl Path {
    pub fn new(gain: Complex64, delay: usize, doppler: f64) -> Self {
        Self {
            gain,
            delay,
            doppler,
        }
    }
}

/// A multipath channel bound to a frame geometry (`N` plus prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    paths: Vec<Path>,
    block_len: usize,
    frame_len: usize,
    ramps: Vec<Vec<Complex64>>,
}

fn doppler_ramp(doppler: f64, block_len: usize, frame_len: usize) -> Vec<Complex64> {
    (0..frame_len)
        .map(|m| {
            let cycles = doppler * m as f64 / block_len as f64;
            Complex64::from_polar(1.0, -2.0 * PI * (cycles - cycles.floor()))
        })
        .collect()
}

impl PathSet {
    /// `block_len` is `N`, `prefix_len` the CP/CPP length of the frames
    /// the channel will be applied to.
    pub fn new(paths: Vec<Path>, block_len: usize, prefix_len: usize) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::InvalidArgument(
                "a channel needs at least one path".into(),
            ));
        }
        if block_len == 0 {
            return Err(Error::InvalidArgument(
                "block length must be positive".into(),
            ));
        }
        let frame_len = block_len + prefix_len;
        if let Some(p) = paths.iter().find(|p| p.delay >= frame_len) {
            return Err(Error::InvalidArgument(format!(
                "path delay {} exceeds the {frame_len}-sample frame",
                p.delay
            )));
        }
        let ramps = paths
            .iter()
            .map(|p| doppler_ramp(p.doppler, block_len, frame_len))
            .collect();
        Ok(Self {
            paths,
            block_len,
            frame_len,
            ramps,
        })
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn prefix_len(&self) -> usize {
        self.frame_len - self.block_len
    }

    pub fn max_delay(&self) -> usize {
        self.paths.iter().map(|p| p.delay).max().unwrap_or(0)
    }

    pub fn max_abs_doppler(&self) -> f64 {
        self.paths
            .iter()
            .map(|p| p.doppler.abs())
            .fold(0.0, f64::max)
    }

    /// Same paths with every gain multiplied by `factor`.
    pub fn scaled(&self, factor: Complex64) -> PathSet {
        let mut out = self.clone();
        for p in &mut out.paths {
            p.gain *= factor;
        }
        out
    }

    /// The frame-length (time-domain) applied form, written into `out`.
    pub(crate) fn apply_into(&self, s: &[Complex64], out: &mut [Complex64]) {
        let l = self.frame_len;
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (p, ramp) in self.paths.iter().zip(&self.ramps) {
            let tau = p.delay;
            // r[n] = h ramp[m] s[m], m = (n - tau) mod L
            for n in 0..l {
                let m = if n >= tau { n - tau } else { n + l - tau };
                out[n] += p.gain * ramp[m] * s[m];
            }
        }
    }
}

/// Applies `sum_p h_p Pi^{tau_p} Delta^{nu_p}` to a frame without forming the matrix.
pub fn apply_dd_channel(s: &ComplexSignal, ch: &PathSet) -> Result<ComplexSignal> {
    check_len(ch.frame_len, s.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); s.len()];
    ch.apply_into(s.samples(), &mut out);
    Ok(ComplexSignal::new(out, s.domain()))
}

/// A point target in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalTarget {
    pub range_m: f64,
    pub velocity_mps: f64,
    pub rcs_gain: Complex64,
}

/// Round-trip delay (s) and Doppler (Hz): `tau = 2r/c`, `nu = 2 f_c v / c`.
pub fn round_trip_delay_doppler(t: &PhysicalTarget, carrier_freq_hz: f64) -> (f64, f64) {
    (
        2.0 * t.range_m / SPEED_OF_LIGHT,
        2.0 * carrier_freq_hz * t.velocity_mps / SPEED_OF_LIGHT,
    )
}

/// Maps a target onto the integer delay/Doppler grid of the frame.
///
/// Delay is rounded to the nearest sample at rate `N * delta_f`, Doppler to
/// the nearest multiple of the subcarrier spacing.
pub fn target_to_path(t: &PhysicalTarget, cfg: &SystemConfig) -> Result<Path> {
    let (tau_s, nu_hz) = round_trip_delay_doppler(t, cfg.carrier_freq_hz);
    let delay = (tau_s * cfg.sample_rate_hz()).round();
    if delay < 0.0 || delay as usize > cfg.cp_len {
        return Err(Error::Config(format!(
            "target at {:.1} m maps to delay {delay} samples, beyond the {}-sample prefix",
            t.range_m, cfg.cp_len
        )));
    }
    let doppler = (nu_hz / cfg.subcarrier_spacing_hz).round();
    Ok(Path::new(t.rcs_gain, delay as usize, doppler))
}

/// Unit-variance circularly-symmetric complex Gaussian samples.
pub fn complex_gaussian<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// `taps` Rayleigh paths at delays `0..taps` with total average power one,
/// each given a Doppler drawn uniformly from `doppler_bins`.
pub fn build_uplink_channel<R: Rng + ?Sized>(
    taps: usize,
    doppler_bins: &[i32],
    block_len: usize,
    prefix_len: usize,
    rng: &mut R,
) -> Result<PathSet> {
    if taps == 0 {
        return Err(Error::InvalidArgument(
            "uplink channel needs at least one tap".into(),
        ));
    }
    if taps > prefix_len.max(1) {
        return Err(Error::Config(format!(
            "{taps} taps do not fit inside a {prefix_len}-sample prefix"
        )));
    }
    if doppler_bins.is_empty() {
        return Err(Error::InvalidArgument("empty Doppler bin set".into()));
    }
    let gains = complex_gaussian(taps, rng);
    let scale = (taps as f64).sqrt().recip();
    let paths = gains
        .into_iter()
        .enumerate()
        .map(|(delay, g)| {
            let nu = doppler_bins[rng.random_range(0..doppler_bins.len())];
            Path::new(g * scale, delay, nu as f64)
        })
        .collect();
    PathSet::new(paths, block_len, prefix_len)
}

/// Adds complex AWGN of total variance `sigma2` per sample.
pub fn awgn<R: Rng + ?Sized>(s: &ComplexSignal, sigma2: f64, rng: &mut R) -> Result<ComplexSignal> {
    if sigma2.is_nan() || sigma2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise variance {sigma2} is negative"
        )));
    }
    let mut out = s.clone();
    if sigma2 == 0.0 {
        return Ok(out);
    }
    let sd = sigma2.sqrt();
    for (v, w) in out
        .samples_mut()
        .iter_mut()
        .zip(complex_gaussian(s.len(), rng))
    {
        *v += w * sd;
    }
    Ok(out)
}

/// Amplitude factor for a power offset in dB. `-inf` gives zero.
pub fn db_to_amplitude(offset_db: f64) -> f64 {
    10f64.powf(offset_db / 20.0)
}

/// `r = r_ul + g r_dl + noise` with `g = 10^(offset_db / 20)`.
///
/// `noise` is added as given; see [`compose_received`] for the sampled form.
pub fn superimpose(
    r_ul: &ComplexSignal,
    r_dl: &ComplexSignal,
    offset_db: f64,
    noise: Option<&[Complex64]>,
) -> Result<ComplexSignal> {
    check_len(r_ul.len(), r_dl.len())?;
    let g = db_to_amplitude(offset_db);
    let mut out: Vec<Complex64> = r_ul
        .samples()
        .iter()
        .zip(r_dl.samples())
        .map(|(u, d)| u + d * g)
        .collect();
    if let Some(w) = noise {
        check_len(out.len(), w.len())?;
        out.iter_mut().zip(w).for_each(|(v, w)| *v += w);
    }
    Ok(ComplexSignal::new(out, r_ul.domain()))
}

/// Received signal at the base station: uplink plus scaled echo plus AWGN.
///
/// Frames must already be sample-aligned (equal CP and CPP lengths).
pub fn compose_received<R: Rng + ?Sized>(
    r_ul: &ComplexSignal,
    r_dl: &ComplexSignal,
    offset_db: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<ComplexSignal> {
    let clean = superimpose(r_ul, r_dl, offset_db, None)?;
    awgn(&clean, sigma2, rng)
}
