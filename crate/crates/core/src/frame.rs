//! Guard layout of the uplink frame.
//!
//! The `N` subcarriers split into a channel guard `G1`, an NPE guard `G2`
//! and the data set `D`. After an integer delay/Doppler channel a data
//! symbol at affine index `q` leaks onto `[q - kappa_max - 2 N c1 l_max,
//! q + kappa_max]`, so only the interior of `G2` stays free of data and can
//! be used to measure echo-plus-noise power.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::transforms::{ComplexSignal, Domain};

/// Contiguous run of `len` indices starting at `start`, modulo `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardBlock {
    pub start: usize,
    pub len: usize,
}

impl GuardBlock {
    pub fn indices(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let start = self.start;
        (0..self.len).map(move |o| (start + o) % n)
    }
}

/// Partition of one frame into guards, data and the NPE sampling window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayout {
    n: usize,
    domain: Domain,
    guard1: GuardBlock,
    guard2: GuardBlock,
    kappa_max: usize,
    data: Vec<usize>,
    npe_window: Vec<usize>,
}

impl FrameLayout {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Domain of the frames this layout describes.
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn guard1(&self) -> GuardBlock {
        self.guard1
    }

    pub fn guard2(&self) -> GuardBlock {
        self.guard2
    }

    pub fn kappa_max(&self) -> usize {
        self.kappa_max
    }

    /// Data indices in ascending order.
    pub fn data(&self) -> &[usize] {
        &self.data
    }

    /// Indices of `G2` that no data symbol can leak onto.
    pub fn npe_window(&self) -> &[usize] {
        &self.npe_window
    }

    pub fn guard_len(&self) -> usize {
        self.guard1.len + self.guard2.len
    }

    /// Layout with every index carrying data and no NPE window, as used by
    /// the OFDM uplink baseline.
    pub fn unguarded(n: usize, domain: Domain) -> Self {
        Self {
            n,
            domain,
            guard1: GuardBlock { start: 0, len: 0 },
            guard2: GuardBlock { start: 0, len: 0 },
            kappa_max: 0,
            data: (0..n).collect(),
            npe_window: Vec::new(),
        }
    }

    fn from_guards(
        n: usize,
        domain: Domain,
        guard1: GuardBlock,
        guard2: GuardBlock,
        kappa_max: usize,
        npe_window: Vec<usize>,
    ) -> Result<Self> {
        let mut used = vec![false; n];
        for k in guard1.indices(n) {
            used[k] = true;
        }
        for k in guard2.indices(n) {
            if used[k] {
                return Err(Error::InvalidArgument(format!(
                    "guard blocks overlap at index {k}"
                )));
            }
            used[k] = true;
        }
        let data = (0..n).filter(|&k| !used[k]).collect();
        Ok(Self {
            n,
            domain,
            guard1,
            guard2,
            kappa_max,
            data,
            npe_window,
        })
    }

    /// OTFS layout: `guard_cols` Doppler columns straddling the two edges of
    /// the `N1 x N2` grid (wrapping through column 0). The `kappa_max`
    /// columns at each side of the block are excluded from the NPE window.
    pub fn otfs(
        delay_bins: usize,
        doppler_bins: usize,
        guard_cols: usize,
        kappa_max: usize,
    ) -> Result<Self> {
        let n = delay_bins * doppler_bins;
        if guard_cols >= doppler_bins {
            return Err(Error::InvalidArgument(format!(
                "{guard_cols} guard columns leave no data on a {doppler_bins}-column grid"
            )));
        }
        if guard_cols <= 2 * kappa_max {
            return Err(Error::Config(format!(
                "{guard_cols} guard columns cannot absorb a Doppler spread of +-{kappa_max} columns; the NPE window is empty"
            )));
        }
        let start_col = doppler_bins - guard_cols / 2;
        let guard1 = GuardBlock {
            start: (start_col % doppler_bins) * delay_bins,
            len: kappa_max * delay_bins,
        };
        let guard2 = GuardBlock {
            start: ((start_col + kappa_max) % doppler_bins) * delay_bins,
            len: (guard_cols - kappa_max) * delay_bins,
        };
        let window_len = (guard_cols - 2 * kappa_max) * delay_bins;
        let mut window: Vec<usize> = guard2.indices(n).take(window_len).collect();
        window.sort_unstable();
        Self::from_guards(n, Domain::DelayDoppler, guard1, guard2, kappa_max, window)
    }
}

/// Builds the AFDM layout `G1 = [i, i + K1)`, `G2 = [j, j + K2)` (mod `N`)
/// and its NPE window
/// `{k in G2 : j + kappa_max < k < j + K2 - kappa_max - 2 N c1 max_delay}`.
#[allow(clippy::too_many_arguments)]
pub fn allocate_frame(
    n: usize,
    i: usize,
    k1: usize,
    j: usize,
    k2: usize,
    kappa_max: usize,
    c1: f64,
    max_delay: usize,
) -> Result<FrameLayout> {
    if k1 + k2 >= n {
        return Err(Error::InvalidArgument(format!(
            "guards of {k1} + {k2} leave no data on {n} subcarriers"
        )));
    }
    let guard1 = GuardBlock {
        start: i % n,
        len: k1,
    };
    let guard2 = GuardBlock {
        start: j % n,
        len: k2,
    };
    let leak = 2.0 * n as f64 * c1 * max_delay as f64;
    let upper = k2 as f64 - kappa_max as f64 - leak;
    let window: Vec<usize> = (0..k2)
        .filter(|&o| o > kappa_max && (o as f64) < upper)
        .map(|o| (j + o) % n)
        .collect();
    if window.is_empty() {
        return Err(Error::Config(format!(
            "NPE guard of {k2} subcarriers is too short: Doppler spread {kappa_max} on both sides plus a \
             delay leakage of {leak} leaves no uncontaminated subcarrier"
        )));
    }
    let mut window = window;
    window.sort_unstable();
    FrameLayout::from_guards(n, Domain::Affine, guard1, guard2, kappa_max, window)
}

/// Places `symbols` on the data indices (ascending) and zeros on the guards.
pub fn embed_data(symbols: &ComplexSignal, layout: &FrameLayout) -> Result<ComplexSignal> {
    check_len(layout.data.len(), symbols.len())?;
    let mut out = ComplexSignal::zeros(layout.n, layout.domain);
    let buf = out.samples_mut();
    for (&k, &s) in layout.data.iter().zip(symbols.samples()) {
        buf[k] = s;
    }
    Ok(out)
}

/// Reads the data indices back out in ascending order.
pub fn extract_data(frame: &ComplexSignal, layout: &FrameLayout) -> Result<ComplexSignal> {
    check_len(layout.n, frame.len())?;
    let s = frame.samples();
    Ok(ComplexSignal::new(
        layout.data.iter().map(|&k| s[k]).collect(),
        frame.domain(),
    ))
}
