//! Uplink receiver: affine-domain demodulation, guard-aided noise power
//! estimation, MMSE detection and reconstruction/cancellation of the uplink.
//!
//! The equivalent channel is built by probing: unit impulses in the data
//! domain are pushed through `modulate -> channel -> demodulate`, one column
//! at a time. This works for any [`Waveform`], so the OTFS and OFDM
//! baselines share the same detector.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::PathSet;
use crate::error::{check_len, Error, Result};
use crate::frame::{embed_data, extract_data, FrameLayout};
use crate::transforms::ComplexSignal;
use crate::waveforms::{qam_slice, Afdm, SystemConfig, Waveform};

/// Estimated interference-plus-noise power per affine bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseEstimate {
    pub sigma2_hat: f64,
    /// Number of guard samples averaged.
    pub n_samples: usize,
}

/// Removes the CPP and applies the DAFT: `d = chirp(c2) F chirp(c1) B_cpp r`.
pub fn demodulate_frame(r: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Afdm::from_config(cfg).demodulate(r)
}

/// Mean `|d[k]|^2` over the NPE window of `layout`.
pub fn estimate_noise_power(
    d_tilde: &ComplexSignal,
    layout: &FrameLayout,
) -> Result<NoiseEstimate> {
    check_len(layout.n(), d_tilde.len())?;
    let window = layout.npe_window();
    if window.is_empty() {
        return Err(Error::Config("layout has no NPE window".into()));
    }
    let s = d_tilde.samples();
    let sum: f64 = window.iter().map(|&k| s[k].norm_sqr()).sum();
    Ok(NoiseEstimate {
        sigma2_hat: sum / window.len() as f64,
        n_samples: window.len(),
    })
}

/// Data-domain equivalent channel `H_eq` of a waveform over a path set.
#[derive(Debug, Clone)]
pub struct EquivalentChannel {
    matrix: DMatrix<Complex64>,
    source: PathSet,
}

impl EquivalentChannel {
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn source(&self) -> &PathSet {
        &self.source
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Wraps an arbitrary square matrix, e.g. for detector tests.
    pub fn from_matrix(matrix: DMatrix<Complex64>, source: PathSet) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidArgument(format!(
                "equivalent channel must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix, source })
    }

    /// `H_eq x` for a data-domain frame.
    pub fn apply(&self, x: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.size(), x.len())?;
        let v = &self.matrix * DVector::from_column_slice(x.samples());
        Ok(ComplexSignal::new(v.as_slice().to_vec(), x.domain()))
    }
}

fn check_channel_fits<W: Waveform + ?Sized>(wf: &W, ch: &PathSet) -> Result<()> {
    if ch.frame_len() != wf.frame_len() || ch.block_len() != wf.block_len() {
        return Err(Error::InvalidArgument(format!(
            "channel built for {}+{} frames, waveform uses {}+{}",
            ch.block_len(),
            ch.prefix_len(),
            wf.block_len(),
            wf.prefix_len()
        )));
    }
    if ch.max_delay() > wf.prefix_len() {
        return Err(Error::Config(format!(
            "channel delay {} exceeds the {}-sample prefix",
            ch.max_delay(),
            wf.prefix_len()
        )));
    }
    Ok(())
}

/// Equivalent channel of any waveform, probed column by column.
pub fn equivalent_channel<W: Waveform + ?Sized>(wf: &W, ch: &PathSet) -> Result<EquivalentChannel> {
    check_channel_fits(wf, ch)?;
    let n = wf.block_len();
    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    let mut probe = ComplexSignal::zeros(n, crate::transforms::Domain::Affine);
    let mut through = vec![Complex64::new(0.0, 0.0); wf.frame_len()];
    for q in 0..n {
        probe.samples_mut()[q] = Complex64::new(1.0, 0.0);
        let s = wf.modulate(&probe)?;
        ch.apply_into(s.samples(), &mut through);
        let col = wf.demodulate(&ComplexSignal::new(through.clone(), s.domain()))?;
        matrix.column_mut(q).copy_from_slice(col.samples());
        probe.samples_mut()[q] = Complex64::new(0.0, 0.0);
    }
    Ok(EquivalentChannel {
        matrix,
        source: ch.clone(),
    })
}

/// AFDM equivalent channel `chirp(c2) F chirp(c1) B_cpp H A_cpp chirp(c1)^H F^H chirp(c2)^H`.
pub fn build_equivalent_channel(ch: &PathSet, cfg: &SystemConfig) -> Result<EquivalentChannel> {
    equivalent_channel(&Afdm::from_config(cfg), ch)
}

/// MMSE detector with the Gram matrix `H^H H` cached, so one channel can be
/// equalised at several noise levels.
#[derive(Debug, Clone)]
pub struct MmseDetector {
    h: DMatrix<Complex64>,
    gram: DMatrix<Complex64>,
    /// Columns of `H` being solved for; `None` means all of them.
    columns: Option<Vec<usize>>,
    n: usize,
}

impl MmseDetector {
    pub fn new(h_eq: &EquivalentChannel) -> Self {
        let h = h_eq.matrix.clone();
        let gram = h.ad_mul(&h);
        let n = h.ncols();
        Self {
            h,
            gram,
            columns: None,
            n,
        }
    }

    /// Detector that treats every symbol outside `columns` as a known zero,
    /// i.e. MMSE under a prior with unit power on `columns` only. The output
    /// is still a full frame with zeros off `columns`.
    pub fn on_columns(h_eq: &EquivalentChannel, columns: &[usize]) -> Result<Self> {
        let n = h_eq.size();
        if columns.is_empty() || columns.iter().any(|&c| c >= n) {
            return Err(Error::InvalidArgument(format!(
                "detector columns must be a non-empty subset of 0..{n}"
            )));
        }
        let h = h_eq.matrix.select_columns(columns);
        let gram = h.ad_mul(&h);
        Ok(Self {
            h,
            gram,
            columns: Some(columns.to_vec()),
            n,
        })
    }

    /// `x = (H^H H + sigma2 I)^{-1} H^H d` via a Cholesky solve.
    pub fn detect(&self, d_tilde: &ComplexSignal, sigma2_hat: f64) -> Result<ComplexSignal> {
        check_len(self.h.nrows(), d_tilde.len())?;
        let n = self.h.ncols();
        if !sigma2_hat.is_finite() || sigma2_hat < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise power {sigma2_hat} is not a valid variance"
            )));
        }
        let mut a = self.gram.clone();
        for k in 0..n {
            a[(k, k)] += Complex64::new(sigma2_hat, 0.0);
        }
        let scale = (0..n).map(|k| a[(k, k)].re).fold(0.0, f64::max);
        let chol = a.cholesky().ok_or_else(|| {
            Error::Solver("regularised normal matrix is not positive definite".into())
        })?;
        let floor = scale * n as f64 * f64::EPSILON;
        if (0..n).any(|k| chol.l_dirty()[(k, k)].norm_sqr() <= floor) {
            return Err(Error::Solver(
                "regularised normal matrix is numerically singular".into(),
            ));
        }
        let rhs = self
            .h
            .ad_mul(&DVector::from_column_slice(d_tilde.samples()));
        let x = chol.solve(&rhs);
        let out = match &self.columns {
            None => x.as_slice().to_vec(),
            Some(cols) => {
                let mut full = vec![Complex64::new(0.0, 0.0); self.n];
                cols.iter().zip(x.iter()).for_each(|(&c, v)| full[c] = *v);
                full
            }
        };
        Ok(ComplexSignal::new(out, d_tilde.domain()))
    }
}

/// One-shot MMSE detection, `((H^H H + sigma2 I)^{-1} H^H d)`.
pub fn mmse_detect(
    d_tilde: &ComplexSignal,
    h_eq: &EquivalentChannel,
    sigma2_hat: f64,
) -> Result<ComplexSignal> {
    MmseDetector::new(h_eq).detect(d_tilde, sigma2_hat)
}

/// Hard-decides the data part of `x_hat`, re-embeds it with zero guards,
/// remodulates, passes it through the known uplink channel and subtracts it
/// from `r`.
pub fn reconstruct_and_cancel_with<W: Waveform + ?Sized>(
    wf: &W,
    r: &ComplexSignal,
    ch: &PathSet,
    x_hat: &ComplexSignal,
    layout: &FrameLayout,
    qam_order: usize,
) -> Result<ComplexSignal> {
    check_channel_fits(wf, ch)?;
    check_len(wf.frame_len(), r.len())?;
    let decided = qam_slice(&extract_data(x_hat, layout)?, qam_order)?;
    subtract_uplink(wf, r, ch, &embed_data(&decided, layout)?)
}

/// `r - H W x` for a full data-domain frame `x`, no decisions applied.
pub fn subtract_uplink<W: Waveform + ?Sized>(
    wf: &W,
    r: &ComplexSignal,
    ch: &PathSet,
    x: &ComplexSignal,
) -> Result<ComplexSignal> {
    check_len(wf.frame_len(), r.len())?;
    let s = wf.modulate(x)?;
    let mut through = vec![Complex64::new(0.0, 0.0); s.len()];
    ch.apply_into(s.samples(), &mut through);
    let out = r
        .samples()
        .iter()
        .zip(&through)
        .map(|(a, b)| a - b)
        .collect();
    Ok(ComplexSignal::new(out, r.domain()))
}

/// AFDM form of [`reconstruct_and_cancel_with`]: `r - H_UL W_AFDM x_hat`.
pub fn reconstruct_and_cancel(
    r: &ComplexSignal,
    ch: &PathSet,
    x_hat: &ComplexSignal,
    layout: &FrameLayout,
    cfg: &SystemConfig,
) -> Result<ComplexSignal> {
    reconstruct_and_cancel_with(&Afdm::from_config(cfg), r, ch, x_hat, layout, cfg.qam_order)
}
