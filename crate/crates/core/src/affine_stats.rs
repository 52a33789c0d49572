//! Second-order statistics of OFDM frames seen through the DAFT.
//!
//! A unit-power i.i.d. OFDM frame stays white after the chirp transforms,
//! before and after an integer delay/Doppler channel, which is what makes
//! the downlink echo look like extra Gaussian noise to the uplink receiver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::PathSet;
use crate::error::{check_len, Error, Result};
use crate::transforms::{
    add_cp, daft_in_place, remove_cp, unitary_fft_in_place, ComplexSignal, Domain,
};
use crate::waveforms::{qam_map, BitBlock, SystemConfig};

/// `s_A = A F^H x`: the CP-free OFDM frame expressed in the affine domain.
pub fn affine_view_ofdm(x_dl: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    check_len(cfg.n, x_dl.len())?;
    let mut buf = x_dl.samples().to_vec();
    unitary_fft_in_place(&mut buf, true);
    daft_in_place(&mut buf, &cfg.chirp);
    Ok(ComplexSignal::new(buf, Domain::Affine))
}

/// Fixed-range histogram of the real and imaginary parts.
///
/// Values beyond the range are counted in the outermost bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub real_counts: Vec<u64>,
    pub imag_counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            real_counts: vec![0; bins],
            imag_counts: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.real_counts.len()
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * (self.hi - self.lo) / self.bins() as f64
    }

    fn bin_of(&self, v: f64) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo) * self.bins() as f64;
        (t.max(0.0) as usize).min(self.bins() - 1)
    }

    fn push(&mut self, v: Complex64) {
        let (a, b) = (self.bin_of(v.re), self.bin_of(v.im));
        self.real_counts[a] += 1;
        self.imag_counts[b] += 1;
    }

    fn merge(&mut self, other: &Histogram) {
        self.real_counts
            .iter_mut()
            .zip(&other.real_counts)
            .for_each(|(a, b)| *a += b);
        self.imag_counts
            .iter_mut()
            .zip(&other.imag_counts)
            .for_each(|(a, b)| *a += b);
    }
}

/// Knobs for [`empirical_stats_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    /// Largest autocorrelation lag tracked.
    pub max_lag: usize,
    pub hist_bins: usize,
    /// Cap on retained raw samples (per component) for distribution tests.
    pub max_samples: usize,
    /// Full covariance is accumulated only up to this block length.
    pub max_covariance_n: usize,
    /// Trials per independently seeded work unit.
    pub chunk_trials: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            max_lag: 8,
            hist_bins: 64,
            max_samples: 100_000,
            max_covariance_n: 64,
            chunk_trials: 250,
        }
    }
}

/// Sufficient statistics of a stream of length-`N` frames; merging is
/// associative so chunks can be filled in parallel.
#[derive(Debug, Clone)]
pub struct StatAccumulator {
    n: usize,
    count: u64,
    sum: Vec<Complex64>,
    sum_sq: Vec<f64>,
    // lag-major: lag * n + bin
    lag_sum: Vec<Complex64>,
    max_lag: usize,
    cov: Option<Vec<Complex64>>,
    hist: Histogram,
    real_samples: Vec<f64>,
    imag_samples: Vec<f64>,
    max_samples: usize,
}

impl StatAccumulator {
    /// `hist_half_width` fixes the histogram range to `[-w, w]`.
    pub fn new(n: usize, opts: &StatsOptions, hist_half_width: f64) -> Self {
        let max_lag = opts.max_lag.min(n.saturating_sub(1));
        Self {
            n,
            count: 0,
            sum: vec![Complex64::default(); n],
            sum_sq: vec![0.0; n],
            lag_sum: vec![Complex64::default(); (max_lag + 1) * n],
            max_lag,
            cov: (n <= opts.max_covariance_n).then(|| vec![Complex64::default(); n * n]),
            hist: Histogram::new(-hist_half_width, hist_half_width, opts.hist_bins.max(1)),
            real_samples: Vec::new(),
            imag_samples: Vec::new(),
            max_samples: opts.max_samples,
        }
    }

    pub fn push(&mut self, s: &[Complex64]) -> Result<()> {
        check_len(self.n, s.len())?;
        let n = self.n;
        self.count += 1;
        for (k, &v) in s.iter().enumerate() {
            self.sum[k] += v;
            self.sum_sq[k] += v.norm_sqr();
            self.hist.push(v);
        }
        for lag in 0..=self.max_lag {
            let row = &mut self.lag_sum[lag * n..(lag + 1) * n];
            for (k, acc) in row.iter_mut().enumerate() {
                *acc += s[(k + lag) % n] * s[k].conj();
            }
        }
        if let Some(cov) = self.cov.as_mut() {
            for a in 0..n {
                for b in 0..n {
                    cov[a * n + b] += s[a] * s[b].conj();
                }
            }
        }
        for &v in s {
            if self.real_samples.len() >= self.max_samples {
                break;
            }
            self.real_samples.push(v.re);
            self.imag_samples.push(v.im);
        }
        Ok(())
    }

    /// Appends `other`; order matters only for which raw samples are kept.
    pub fn merge(&mut self, other: &StatAccumulator) -> Result<()> {
        check_len(self.n, other.n)?;
        check_len(self.lag_sum.len(), other.lag_sum.len())?;
        self.count += other.count;
        self.sum
            .iter_mut()
            .zip(&other.sum)
            .for_each(|(a, b)| *a += b);
        self.sum_sq
            .iter_mut()
            .zip(&other.sum_sq)
            .for_each(|(a, b)| *a += b);
        self.lag_sum
            .iter_mut()
            .zip(&other.lag_sum)
            .for_each(|(a, b)| *a += b);
        if let (Some(a), Some(b)) = (self.cov.as_mut(), other.cov.as_ref()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        self.hist.merge(&other.hist);
        let room = self.max_samples.saturating_sub(self.real_samples.len());
        let take = room.min(other.real_samples.len());
        self.real_samples
            .extend_from_slice(&other.real_samples[..take]);
        self.imag_samples
            .extend_from_slice(&other.imag_samples[..take]);
        Ok(())
    }

    pub fn finish(&self) -> StatReport {
        let n = self.n;
        let t = self.count.max(1) as f64;
        let per_bin_mean: Vec<Complex64> = self.sum.iter().map(|s| s / t).collect();
        let per_bin_variance: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&per_bin_mean)
            .map(|(sq, m)| sq / t - m.norm_sqr())
            .collect();
        let trace = per_bin_variance.iter().sum();
        let max = per_bin_variance
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = per_bin_variance
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let mut autocorr = BTreeMap::new();
        let mut autocorr_spread = BTreeMap::new();
        for lag in 0..=self.max_lag {
            let row = &self.lag_sum[lag * n..(lag + 1) * n];
            let mean = row.iter().sum::<Complex64>() / (t * n as f64);
            let spread = row
                .iter()
                .map(|v| (v / t - mean).norm())
                .fold(0.0, f64::max);
            autocorr.insert(lag, mean);
            autocorr_spread.insert(lag, spread);
        }
        let covariance = self.cov.as_ref().map(|c| {
            DMatrix::from_fn(n, n, |a, b| {
                c[a * n + b] / t - per_bin_mean[a] * per_bin_mean[b].conj()
            })
        });
        StatReport {
            n,
            trials: self.count,
            mean_abs: per_bin_mean.iter().map(|m| m.norm()).fold(0.0, f64::max),
            per_bin_mean,
            trace,
            flatness_ratio: max / min,
            per_bin_variance,
            autocorr,
            autocorr_spread,
            covariance,
            histogram: self.hist.clone(),
            real_samples: self.real_samples.clone(),
            imag_samples: self.imag_samples.clone(),
        }
    }
}

/// Empirical moments of affine-domain frames.
#[derive(Debug, Clone)]
pub struct StatReport {
    pub n: usize,
    pub trials: u64,
    pub per_bin_mean: Vec<Complex64>,
    pub per_bin_variance: Vec<f64>,
    /// Largest per-bin `|sample mean|`.
    pub mean_abs: f64,
    /// Sum of the per-bin variances.
    pub trace: f64,
    /// Largest over smallest per-bin variance.
    pub flatness_ratio: f64,
    /// `R[lag] = E{s[n + lag] s*[n]}` averaged over `n` (cyclic).
    pub autocorr: BTreeMap<usize, Complex64>,
    /// Largest deviation of the per-`n` estimate from `R[lag]`.
    pub autocorr_spread: BTreeMap<usize, f64>,
    /// Sample covariance, kept only for small `N`.
    pub covariance: Option<DMatrix<Complex64>>,
    pub histogram: Histogram,
    pub real_samples: Vec<f64>,
    pub imag_samples: Vec<f64>,
}

impl StatReport {
    /// `trace / N`, the average symbol power.
    pub fn mean_power(&self) -> f64 {
        self.trace / self.n as f64
    }
}

/// [`empirical_stats_with`] with default options.
pub fn empirical_stats<R: RngCore + ?Sized>(
    trials: usize,
    cfg: &SystemConfig,
    channel: Option<&PathSet>,
    rng: &mut R,
) -> Result<StatReport> {
    empirical_stats_with(trials, cfg, channel, &StatsOptions::default(), rng)
}

/// Draws i.i.d. QAM frequency-domain frames, optionally sends them (with
/// CP) through `channel`, and accumulates affine-domain statistics.
///
/// One seed is drawn from `rng`; chunk `k` runs on stream `k` of that seed
/// and chunks are merged in order, so the result does not depend on the
/// thread count.
pub fn empirical_stats_with<R: RngCore + ?Sized>(
    trials: usize,
    cfg: &SystemConfig,
    channel: Option<&PathSet>,
    opts: &StatsOptions,
    rng: &mut R,
) -> Result<StatReport> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "statistics need at least one trial".into(),
        ));
    }
    if let Some(ch) = channel {
        if ch.block_len() != cfg.n || ch.prefix_len() != cfg.cp_len {
            return Err(Error::InvalidArgument(format!(
                "channel built for N = {}, prefix {} but the system uses N = {}, CP {}",
                ch.block_len(),
                ch.prefix_len(),
                cfg.n,
                cfg.cp_len
            )));
        }
    }
    let power: f64 = channel.map_or(1.0, |ch| ch.paths().iter().map(|p| p.gain.norm_sqr()).sum());
    let half_width = 4.0 * (power / 2.0).sqrt().max(f64::MIN_POSITIVE);
    let seed: u64 = rng.next_u64();
    let chunk = opts.chunk_trials.max(1);
    let chunks = trials.div_ceil(chunk);
    let parts: Vec<Result<StatAccumulator>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            local.set_stream(c as u64);
            let mut acc = StatAccumulator::new(cfg.n, opts, half_width);
            let count = chunk.min(trials - c * chunk);
            for _ in 0..count {
                let s = draw_affine_frame(cfg, channel, &mut local)?;
                acc.push(s.samples())?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = StatAccumulator::new(cfg.n, opts, half_width);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total.finish())
}

/// One random QAM frame in the affine domain, with or without the channel.
pub fn draw_affine_frame<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    channel: Option<&PathSet>,
    rng: &mut R,
) -> Result<ComplexSignal> {
    let bits = BitBlock::new(
        (0..cfg.n * cfg.bits_per_symbol())
            .map(|_| rng.random_range(0..2u8))
            .collect(),
    )?;
    let x = qam_map(&bits, cfg.qam_order)?;
    let Some(ch) = channel else {
        return affine_view_ofdm(&x, cfg);
    };
    let mut t = x.into_samples();
    unitary_fft_in_place(&mut t, true);
    let framed = add_cp(&ComplexSignal::new(t, Domain::Time), cfg.cp_len)?;
    let mut out = vec![Complex64::default(); framed.len()];
    ch.apply_into(framed.samples(), &mut out);
    let mut body = remove_cp(&ComplexSignal::new(out, Domain::Time), cfg.cp_len)?.into_samples();
    daft_in_place(&mut body, &cfg.chirp);
    Ok(ComplexSignal::new(body, Domain::Affine))
}

/// Distance of the real and imaginary parts from a fitted Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianitySummary {
    pub n_samples: usize,
    pub ks_real: f64,
    pub ks_imag: f64,
    /// `max(ks_real, ks_imag)`.
    pub statistic: f64,
    /// Asymptotic 1% critical value `1.628 / sqrt(n)`; advisory.
    pub critical_1pct: f64,
}

impl GaussianitySummary {
    pub fn below_critical(&self) -> bool {
        self.statistic < self.critical_1pct
    }
}

/// Kolmogorov-Smirnov statistic of `samples` against a normal with the
/// sample mean and standard deviation. A degenerate sample scores 1.
pub fn ks_statistic(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let Ok(dist) = Normal::new(mean, var.sqrt()) else {
        return 1.0;
    };
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return 1.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max)
}

pub fn gaussianity_check(report: &StatReport) -> GaussianitySummary {
    let n = report.real_samples.len();
    let ks_real = ks_statistic(&report.real_samples);
    let ks_imag = ks_statistic(&report.imag_samples);
    GaussianitySummary {
        n_samples: n,
        ks_real,
        ks_imag,
        statistic: ks_real.max(ks_imag),
        critical_1pct: 1.628 / (n.max(1) as f64).sqrt(),
    }
}

/// Smallest diagonal entry over the largest off-diagonal magnitude of the
/// sample covariance, when it was kept.
pub fn covariance_dominance(report: &StatReport) -> Option<f64> {
    let c = report.covariance.as_ref()?;
    let n = c.nrows();
    let diag = (0..n).map(|k| c[(k, k)].re).fold(f64::INFINITY, f64::min);
    let mut off: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                off = off.max(c[(a, b)].norm());
            }
        }
    }
    Some(if off > 0.0 { diag / off } else { f64::INFINITY })
}

/// CSV with one row per bin (`variance`) followed by one row per histogram
/// bin (`histogram`).
pub fn stats_csv(report: &StatReport) -> String {
    let mut out = String::from("section,index,a,b,c\n");
    for (k, (v, m)) in report
        .per_bin_variance
        .iter()
        .zip(&report.per_bin_mean)
        .enumerate()
    {
        let _ = writeln!(out, "variance,{k},{v},{},{}", m.re, m.im);
    }
    let h = &report.histogram;
    for b in 0..h.bins() {
        let _ = writeln!(
            out,
            "histogram,{b},{},{},{}",
            h.bin_center(b),
            h.real_counts[b],
            h.imag_counts[b]
        );
    }
    out
}

pub fn write_stats_csv(report: &StatReport, path: &FsPath) -> Result<()> {
    std::fs::write(path, stats_csv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Path;
    use crate::transforms::{daft, idft};

    fn cfg(n: usize) -> SystemConfig {
        SystemConfig {
            n,
            cp_len: 4,
            cpp_len: 4,
            chirp: crate::transforms::ChirpParams::for_max_doppler(n, 1),
            ..SystemConfig::desk_scale()
        }
    }

    #[test]
    fn affine_view_matches_composition() {
        let c = cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ComplexSignal::new(
            crate::channel::complex_gaussian(32, &mut rng),
            Domain::Frequency,
        );
        let a = affine_view_ofdm(&x, &c).unwrap();
        let b = daft(&idft(&x, 32).unwrap(), &c.chirp, 32).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!((a.energy() - x.energy()).abs() < 1e-10);
        assert_eq!(
            affine_view_ofdm(&ComplexSignal::zeros(32, Domain::Frequency), &c)
                .unwrap()
                .energy(),
            0.0
        );
        assert!(affine_view_ofdm(&ComplexSignal::zeros(31, Domain::Frequency), &c).is_err());
    }

    #[test]
    fn trace_equals_sum_of_variances() {
        let c = cfg(16);
        let r = empirical_stats(200, &c, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((r.trace - r.per_bin_variance.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(r.trials, 200);
        assert!(r.covariance.is_some());
    }

    #[test]
    fn result_is_independent_of_thread_count() {
        let c = cfg(16);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let opts = StatsOptions {
                    chunk_trials: 37,
                    ..Default::default()
                };
                stats_csv(
                    &empirical_stats_with(300, &c, None, &opts, &mut ChaCha8Rng::seed_from_u64(9))
                        .unwrap(),
                )
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn channel_geometry_must_match() {
        let c = cfg(16);
        let ch = PathSet::new(vec![Path::new(Complex64::new(1.0, 0.0), 1, 0.0)], 16, 2).unwrap();
        assert!(empirical_stats(100, &c, Some(&ch), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn ks_of_constant_is_one() {
        assert_eq!(ks_statistic(&[0.3; 1000]), 1.0);
        assert_eq!(ks_statistic(&[]), 1.0);
    }

    #[test]
    fn csv_row_count() {
        let c = cfg(16);
        let opts = StatsOptions {
            hist_bins: 10,
            ..Default::default()
        };
        let r =
            empirical_stats_with(100, &c, None, &opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(stats_csv(&r).lines().count(), 1 + 16 + 10);
    }
}
