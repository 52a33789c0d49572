//! Delay-Doppler target extraction from the post-cancellation signal.
//!
//! Each dictionary atom is the transmitted downlink frame passed through a
//! single unit path `(tau_i, nu_j)` of the channel model, i.e. a cyclically
//! delayed, Doppler-ramped replica. A noiseless echo is then an exact
//! linear combination of atoms and the greedy search can recover it.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::PhysicalTarget;
use crate::error::{check_len, Error, Result};
use crate::transforms::ComplexSignal;
use crate::waveforms::SystemConfig;
use crate::SPEED_OF_LIGHT;

/// Pre-generated delay-Doppler atoms of one downlink frame.
#[derive(Debug, Clone)]
pub struct Dictionary {
    tau_grid: Vec<usize>,
    nu_grid: Vec<f64>,
    frame_len: usize,
    atoms: Vec<Complex64>,
    norms: Vec<f64>,
    source_frame: ComplexSignal,
}

impl Dictionary {
    pub fn tau_grid(&self) -> &[usize] {
        &self.tau_grid
    }

    pub fn nu_grid(&self) -> &[f64] {
        &self.nu_grid
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn source_frame(&self) -> &ComplexSignal {
        &self.source_frame
    }

    /// Number of atoms, `N_tau * N_nu`.
    pub fn size(&self) -> usize {
        self.tau_grid.len() * self.nu_grid.len()
    }

    /// Atom for delay index `i` and Doppler index `j`.
    pub fn atom(&self, i: usize, j: usize) -> &[Complex64] {
        let k = i * self.nu_grid.len() + j;
        &self.atoms[k * self.frame_len..(k + 1) * self.frame_len]
    }

    pub fn atom_norm(&self, i: usize, j: usize) -> f64 {
        self.norms[i * self.nu_grid.len() + j]
    }

    fn flat_atom(&self, k: usize) -> &[Complex64] {
        &self.atoms[k * self.frame_len..(k + 1) * self.frame_len]
    }
}

/// Builds `phi_ij[n] = e^{-j 2 pi nu_j m / N} s[m]` with `m = (n - tau_i) mod L`.
///
/// `block_len` is the `N` the Doppler grid is expressed against.
pub fn build_dictionary(
    s_dl: &ComplexSignal,
    tau_grid: &[usize],
    nu_grid: &[f64],
    block_len: usize,
) -> Result<Dictionary> {
    let l = s_dl.len();
    if tau_grid.is_empty() || nu_grid.is_empty() {
        return Err(Error::InvalidArgument("dictionary grid is empty".into()));
    }
    if block_len == 0 || l == 0 {
        return Err(Error::InvalidArgument(
            "dictionary needs a non-empty frame".into(),
        ));
    }
    if let Some(t) = tau_grid.iter().find(|&&t| t >= l) {
        return Err(Error::InvalidArgument(format!(
            "grid delay {t} exceeds the {l}-sample frame"
        )));
    }
    let s = s_dl.samples();
    let mut atoms = Vec::with_capacity(tau_grid.len() * nu_grid.len() * l);
    let mut norms = Vec::with_capacity(tau_grid.len() * nu_grid.len());
    for &tau in tau_grid {
        for &nu in nu_grid {
            let start = atoms.len();
            atoms.extend((0..l).map(|n| {
                let m = (n + l - tau) % l;
                let cycles = nu * m as f64 / block_len as f64;
                s[m] * Complex64::from_polar(1.0, -2.0 * PI * (cycles - cycles.floor()))
            }));
            norms.push(
                atoms[start..]
                    .iter()
                    .map(|v| v.norm_sqr())
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    Ok(Dictionary {
        tau_grid: tau_grid.to_vec(),
        nu_grid: nu_grid.to_vec(),
        frame_len: l,
        atoms,
        norms,
        source_frame: s_dl.clone(),
    })
}

/// One detected target.
///
/// `range_m` and `velocity_mps` are zero until [`estimate_to_physical`] fills them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEstimate {
    pub tau_index: usize,
    pub nu_index: usize,
    /// Delay in samples.
    pub tau_hat: usize,
    /// Doppler in subcarrier-spacing units.
    pub nu_hat: f64,
    pub gain_hat: Complex64,
    pub range_m: f64,
    pub velocity_mps: f64,
}

/// When the greedy search stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmpStop {
    /// Exactly this many atoms (the known target count).
    Targets(usize),
    /// Stop once the residual energy drops below `rel_energy` times the
    /// input energy, or after `max_targets` atoms.
    ResidualThreshold { max_targets: usize, rel_energy: f64 },
}

#[derive(Debug, Clone)]
pub struct OmpResult {
    /// Estimates in detection order; gains are the joint least-squares fit
    /// over the final support.
    pub estimates: Vec<TargetEstimate>,
    /// Residual energy after each iteration.
    pub residual_energy: Vec<f64>,
    pub residual: ComplexSignal,
}

impl OmpResult {
    pub fn final_residual_energy(&self) -> f64 {
        self.residual_energy.last().copied().unwrap_or(0.0)
    }
}

/// 2D-OMP with a fixed number of targets.
pub fn omp_2d(residual: &ComplexSignal, dict: &Dictionary, p: usize) -> Result<OmpResult> {
    omp_2d_with(residual, dict, OmpStop::Targets(p))
}

fn correlate(dict: &Dictionary, r: &[Complex64]) -> (usize, f64) {
    (0..dict.size())
        .into_par_iter()
        .map(|k| {
            let norm = dict.norms[k];
            if norm == 0.0 {
                return (k, 0.0);
            }
            let c: Complex64 = dict
                .flat_atom(k)
                .iter()
                .zip(r)
                .map(|(a, v)| a.conj() * v)
                .sum();
            (k, c.norm() / norm)
        })
        .reduce(
            || (usize::MAX, f64::NEG_INFINITY),
            |a, b| {
                // larger score wins, ties go to the lower index
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            },
        )
}

/// Greedy delay-Doppler search: correlate against every normalised atom,
/// take the argmax, re-fit all selected gains by least squares and subtract.
pub fn omp_2d_with(
    residual: &ComplexSignal,
    dict: &Dictionary,
    stop: OmpStop,
) -> Result<OmpResult> {
    check_len(dict.frame_len, residual.len())?;
    let (max_targets, rel) = match stop {
        OmpStop::Targets(p) => (p, None),
        OmpStop::ResidualThreshold {
            max_targets,
            rel_energy,
        } => (max_targets, Some(rel_energy)),
    };
    if max_targets == 0 {
        return Err(Error::InvalidArgument(
            "at least one target must be requested".into(),
        ));
    }
    if max_targets > dict.size() {
        return Err(Error::InvalidArgument(format!(
            "{max_targets} targets requested from a grid of {} atoms",
            dict.size()
        )));
    }
    let y = DVector::from_column_slice(residual.samples());
    let initial = residual.energy();
    let mut r = residual.samples().to_vec();
    let mut support: Vec<usize> = Vec::new();
    let mut gains = DVector::<Complex64>::zeros(0);
    let mut energies = Vec::new();
    while support.len() < max_targets {
        if let Some(rel) = rel {
            let current = r.iter().map(|v| v.norm_sqr()).sum::<f64>();
            if current <= rel * initial {
                break;
            }
        }
        let (best, _) = correlate(dict, &r);
        if support.contains(&best) {
            // residual already orthogonal to everything selected
            break;
        }
        support.push(best);
        let phi = DMatrix::from_fn(dict.frame_len, support.len(), |n, c| {
            dict.flat_atom(support[c])[n]
        });
        gains = phi
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::Solver(e.to_string()))?;
        let fit = &phi * &gains;
        for (v, (yv, fv)) in r.iter_mut().zip(y.iter().zip(fit.iter())) {
            *v = yv - fv;
        }
        energies.push(r.iter().map(|v| v.norm_sqr()).sum());
    }
    let n_nu = dict.nu_grid.len();
    let estimates = support
        .iter()
        .zip(gains.iter())
        .map(|(&k, &g)| TargetEstimate {
            tau_index: k / n_nu,
            nu_index: k % n_nu,
            tau_hat: dict.tau_grid[k / n_nu],
            nu_hat: dict.nu_grid[k % n_nu],
            gain_hat: g,
            range_m: 0.0,
            velocity_mps: 0.0,
        })
        .collect();
    Ok(OmpResult {
        estimates,
        residual_energy: energies,
        residual: ComplexSignal::new(r, residual.domain()),
    })
}

/// Fills in range and radial velocity; the exact inverse of the grid
/// quantisation in [`crate::channel::target_to_path`].
pub fn estimate_to_physical(e: &TargetEstimate, cfg: &SystemConfig) -> TargetEstimate {
    TargetEstimate {
        range_m: SPEED_OF_LIGHT * e.tau_hat as f64 / (2.0 * cfg.sample_rate_hz()),
        velocity_mps: SPEED_OF_LIGHT * e.nu_hat * cfg.subcarrier_spacing_hz
            / (2.0 * cfg.carrier_freq_hz),
        ..*e
    }
}

/// Per-parameter normalised mean square error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    pub range: f64,
    pub velocity: f64,
}

/// Greedy nearest-neighbour pairing of estimates to truths in the
/// (range, velocity) plane, each axis scaled by the largest truth magnitude.
/// Returns `(estimate index, truth index)` pairs.
pub fn match_targets(
    estimates: &[TargetEstimate],
    truths: &[PhysicalTarget],
) -> Vec<(usize, usize)> {
    let scale = |f: &dyn Fn(&PhysicalTarget) -> f64| {
        let s = truths.iter().map(|t| f(t).abs()).fold(0.0, f64::max);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let rs = scale(&|t| t.range_m);
    let vs = scale(&|t| t.velocity_mps);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (a, e) in estimates.iter().enumerate() {
        for (b, t) in truths.iter().enumerate() {
            let d = ((e.range_m - t.range_m) / rs).powi(2)
                + ((e.velocity_mps - t.velocity_mps) / vs).powi(2);
            pairs.push((d, a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_e = vec![false; estimates.len()];
    let mut used_t = vec![false; truths.len()];
    let mut out = Vec::new();
    for (_, a, b) in pairs {
        if !used_e[a] && !used_t[b] {
            used_e[a] = true;
            used_t[b] = true;
            out.push((a, b));
        }
    }
    out.sort_unstable();
    out
}

/// Running NMSE sums across trials.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmseAccumulator {
    pub range_err: f64,
    pub range_ref: f64,
    pub velocity_err: f64,
    pub velocity_ref: f64,
    /// Sums of squared per-trial errors, for confidence intervals.
    pub range_err_sq: f64,
    pub velocity_err_sq: f64,
    pub trials: usize,
}

impl NmseAccumulator {
    /// Adds one trial's matched estimates.
    pub fn add(&mut self, estimates: &[TargetEstimate], truths: &[PhysicalTarget]) -> Result<()> {
        if estimates.is_empty() || truths.is_empty() {
            return Err(Error::InvalidArgument(
                "NMSE needs non-empty estimate and truth lists".into(),
            ));
        }
        if estimates.len() != truths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} estimates cannot be matched to {} truths",
                estimates.len(),
                truths.len()
            )));
        }
        let (mut re, mut ve) = (0.0, 0.0);
        for (a, b) in match_targets(estimates, truths) {
            re += (estimates[a].range_m - truths[b].range_m).powi(2);
            ve += (estimates[a].velocity_mps - truths[b].velocity_mps).powi(2);
        }
        self.range_err += re;
        self.velocity_err += ve;
        self.range_err_sq += re * re;
        self.velocity_err_sq += ve * ve;
        self.range_ref += truths.iter().map(|t| t.range_m * t.range_m).sum::<f64>();
        self.velocity_ref += truths
            .iter()
            .map(|t| t.velocity_mps * t.velocity_mps)
            .sum::<f64>();
        self.trials += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &NmseAccumulator) {
        self.range_err += other.range_err;
        self.range_ref += other.range_ref;
        self.velocity_err += other.velocity_err;
        self.velocity_ref += other.velocity_ref;
        self.range_err_sq += other.range_err_sq;
        self.velocity_err_sq += other.velocity_err_sq;
        self.trials += other.trials;
    }

    pub fn nmse(&self) -> Nmse {
        Nmse {
            range: ratio(self.range_err, self.range_ref),
            velocity: ratio(self.velocity_err, self.velocity_ref),
        }
    }

    /// 95% half-widths of the two NMSE values, treating per-trial error
    /// sums as i.i.d. and the reference energy as fixed.
    pub fn halfwidths(&self) -> Nmse {
        let t = self.trials as f64;
        let hw = |sum: f64, sq: f64, reference: f64| {
            if self.trials < 2 || reference == 0.0 {
                return 0.0;
            }
            let mean = sum / t;
            let var = ((sq / t - mean * mean) * t / (t - 1.0)).max(0.0);
            1.96 * (var / t).sqrt() / (reference / t)
        };
        Nmse {
            range: hw(self.range_err, self.range_err_sq, self.range_ref),
            velocity: hw(self.velocity_err, self.velocity_err_sq, self.velocity_ref),
        }
    }
}

fn ratio(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else if err == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `sum |x_hat - x|^2 / sum |x|^2` per parameter over one matched list.
pub fn nmse(estimates: &[TargetEstimate], truths: &[PhysicalTarget]) -> Result<Nmse> {
    let mut acc = NmseAccumulator::default();
    acc.add(estimates, truths)?;
    Ok(acc.nmse())
}
