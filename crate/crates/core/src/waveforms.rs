//! QAM mapping and the OFDM, AFDM and OTFS modulators.
//!
//! Every modulator is `prefix . unitary transform` and every demodulator is
//! the matching `unitary transform . prefix removal`, so a mod/demod pair is
//! the identity over an ideal channel.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::transforms::{
    add_cp, add_cpp, daft_in_place, idaft_in_place, remove_cp, remove_cpp, unitary_fft_in_place,
    ChirpParams, ComplexSignal, Domain,
};

/// Scalar system parameters shared by the transmitters and the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Subcarriers per block.
    pub n: usize,
    /// Square QAM order.
    pub qam_order: usize,
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub cp_len: usize,
    pub cpp_len: usize,
    pub chirp: ChirpParams,
    /// OTFS delay bins `N1`.
    pub otfs_delay_bins: usize,
    /// OTFS Doppler bins `N2`.
    pub otfs_doppler_bins: usize,
    /// Sensing echo power relative to the uplink, in dB.
    pub echo_power_offset_db: f64,
}

impl SystemConfig {
    /// Full-scale parameter set: N = 1024, QPSK, 28 GHz carrier, 30 kHz spacing.
    pub fn full_scale() -> Self {
        let n = 1024;
        Self {
            n,
            qam_order: 4,
            carrier_freq_hz: 28e9,
            subcarrier_spacing_hz: 30e3,
            cp_len: 64,
            cpp_len: 64,
            chirp: ChirpParams::for_max_doppler(n, 1),
            otfs_delay_bins: 64,
            otfs_doppler_bins: 16,
            echo_power_offset_db: -20.0,
        }
    }

    /// Desk-scale parameter set used by the default sweeps: N = 256.
    pub fn desk_scale() -> Self {
        let n = 256;
        Self {
            n,
            cp_len: 16,
            cpp_len: 16,
            chirp: ChirpParams::for_max_doppler(n, 1),
            otfs_delay_bins: 16,
            otfs_doppler_bins: 16,
            ..Self::full_scale()
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.qam_order.trailing_zeros() as usize
    }

    /// Baseband sample rate `N * delta_f`.
    pub fn sample_rate_hz(&self) -> f64 {
        self.n as f64 * self.subcarrier_spacing_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("N = {} is too small", self.n)));
        }
        validate_qam_order(self.qam_order)?;
        if self.cp_len >= self.n || self.cpp_len >= self.n {
            return Err(Error::Config(format!(
                "prefix lengths (cp {}, cpp {}) must be below N = {}",
                self.cp_len, self.cpp_len, self.n
            )));
        }
        if !self.chirp.is_integer_scaled(self.n) {
            return Err(Error::Config(format!(
                "2 N c1 = {} must be a non-negative integer",
                self.chirp.delay_shift(self.n)
            )));
        }
        if !(self.carrier_freq_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::Config(
                "carrier frequency and subcarrier spacing must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Extra check needed before OTFS is used: `N = N1 * N2`.
    pub fn validate_otfs(&self) -> Result<()> {
        if self.otfs_delay_bins * self.otfs_doppler_bins != self.n {
            return Err(Error::Config(format!(
                "OTFS grid {}x{} does not match N = {}",
                self.otfs_delay_bins, self.otfs_doppler_bins, self.n
            )));
        }
        Ok(())
    }
}

fn validate_qam_order(m: usize) -> Result<()> {
    // square QAM: M = 4^k, k >= 1
    if m < 4 || !m.is_power_of_two() || !m.trailing_zeros().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "QAM order {m} is not a square power of two"
        )));
    }
    Ok(())
}

/// Source bits for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitBlock(Vec<u8>);

impl BitBlock {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming_distance(&self, other: &BitBlock) -> usize {
        assert_eq!(self.len(), other.len(), "bit blocks differ in length");
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

fn gray_to_index(g: usize) -> usize {
    let mut i = g;
    let mut shift = g >> 1;
    while shift != 0 {
        i ^= shift;
        shift >>= 1;
    }
    i
}

fn index_to_gray(i: usize) -> usize {
    i ^ (i >> 1)
}

fn qam_scale(m: usize) -> f64 {
    (2.0 * (m as f64 - 1.0) / 3.0).sqrt().recip()
}

/// Gray-coded square QAM with unit average energy.
///
/// Each symbol takes `log2 M` bits; the first half select the in-phase level
/// and the second half the quadrature level, each with its own Gray code.
/// Bit pattern `0..0` maps to the `(+, +)` corner.
pub fn qam_map(b: &BitBlock, m: usize) -> Result<ComplexSignal> {
    validate_qam_order(m)?;
    let k = m.trailing_zeros() as usize;
    if !b.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} bits do not divide into {k}-bit symbols",
            b.len()
        )));
    }
    let half = k / 2;
    let side = 1usize << half;
    let scale = qam_scale(m);
    let level = |bits: &[u8]| {
        let g = bits.iter().fold(0usize, |acc, &v| (acc << 1) | v as usize);
        (side - 1) as f64 - 2.0 * gray_to_index(g) as f64
    };
    let symbols =
        b.0.chunks(k)
            .map(|chunk| Complex64::new(level(&chunk[..half]), level(&chunk[half..])) * scale)
            .collect();
    Ok(ComplexSignal::new(symbols, Domain::Frequency))
}

fn nearest_level(v: f64, side: usize) -> usize {
    let idx = (((side - 1) as f64 - v) / 2.0).round();
    idx.clamp(0.0, (side - 1) as f64) as usize
}

/// Nearest-point hard decision back to bits.
pub fn qam_demap_hard(y: &ComplexSignal, m: usize) -> Result<BitBlock> {
    validate_qam_order(m)?;
    let k = m.trailing_zeros() as usize;
    let half = k / 2;
    let side = 1usize << half;
    let scale = qam_scale(m);
    let mut bits = Vec::with_capacity(y.len() * k);
    let mut push = |idx: usize| {
        let g = index_to_gray(idx);
        for s in (0..half).rev() {
            bits.push(((g >> s) & 1) as u8);
        }
    };
    for s in y.samples() {
        let v = s / scale;
        push(nearest_level(v.re, side));
        push(nearest_level(v.im, side));
    }
    Ok(BitBlock(bits))
}

/// Replaces every sample by the nearest constellation point.
pub fn qam_slice(y: &ComplexSignal, m: usize) -> Result<ComplexSignal> {
    validate_qam_order(m)?;
    let side = 1usize << (m.trailing_zeros() / 2);
    let scale = qam_scale(m);
    let level = |v: f64| ((side - 1) as f64 - 2.0 * nearest_level(v, side) as f64) * scale;
    let out = y
        .samples()
        .iter()
        .map(|s| {
            let v = s / scale;
            Complex64::new(level(v.re), level(v.im))
        })
        .collect();
    Ok(ComplexSignal::new(out, y.domain()))
}

/// A block modulator and its matched demodulator.
pub trait Waveform: Send + Sync {
    /// Symbols per block (`N`).
    fn block_len(&self) -> usize;
    fn prefix_len(&self) -> usize;
    fn frame_len(&self) -> usize {
        self.block_len() + self.prefix_len()
    }
    /// Data-domain symbols to a prefixed time-domain frame.
    fn modulate(&self, x: &ComplexSignal) -> Result<ComplexSignal>;
    /// Prefixed time-domain frame back to the data domain.
    fn demodulate(&self, r: &ComplexSignal) -> Result<ComplexSignal>;
}

/// CP-OFDM, `s = A_cp F^H x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ofdm {
    pub n: usize,
    pub cp_len: usize,
}

impl Ofdm {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            n: cfg.n,
            cp_len: cfg.cp_len,
        }
    }
}

impl Waveform for Ofdm {
    fn block_len(&self) -> usize {
        self.n
    }

    fn prefix_len(&self) -> usize {
        self.cp_len
    }

    fn modulate(&self, x: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.n, x.len())?;
        let mut buf = x.samples().to_vec();
        unitary_fft_in_place(&mut buf, true);
        add_cp(&ComplexSignal::new(buf, Domain::Time), self.cp_len)
    }

    fn demodulate(&self, r: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.frame_len(), r.len())?;
        let mut buf = remove_cp(r, self.cp_len)?.into_samples();
        unitary_fft_in_place(&mut buf, false);
        Ok(ComplexSignal::new(buf, Domain::Frequency))
    }
}

/// AFDM with a chirp-periodic prefix, `s = A_cpp chirp(c1)^H F^H chirp(c2)^H x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Afdm {
    pub n: usize,
    pub cpp_len: usize,
    pub chirp: ChirpParams,
}

impl Afdm {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            n: cfg.n,
            cpp_len: cfg.cpp_len,
            chirp: cfg.chirp,
        }
    }
}

impl Waveform for Afdm {
    fn block_len(&self) -> usize {
        self.n
    }

    fn prefix_len(&self) -> usize {
        self.cpp_len
    }

    fn modulate(&self, x: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.n, x.len())?;
        let mut buf = x.samples().to_vec();
        idaft_in_place(&mut buf, &self.chirp);
        add_cpp(
            &ComplexSignal::new(buf, Domain::Time),
            self.cpp_len,
            &self.chirp,
            self.n,
        )
    }

    fn demodulate(&self, r: &ComplexSignal) -> Result<ComplexSignal> {
        let mut buf = remove_cpp(r, self.cpp_len, self.n)?.into_samples();
        daft_in_place(&mut buf, &self.chirp);
        Ok(ComplexSignal::new(buf, Domain::Affine))
    }
}

/// OTFS on an `N1 x N2` delay-Doppler grid, `s = A_cp (F_{N2}^H kron I_{N1}) x`.
///
/// Grid element (delay `m`, Doppler `l`) sits at vector index `l * N1 + m`,
/// i.e. the delay index runs fastest. Time sample `t * N1 + m` carries the
/// inverse DFT over Doppler of delay row `m`, evaluated at slot `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otfs {
    pub delay_bins: usize,
    pub doppler_bins: usize,
    pub cp_len: usize,
}

impl Otfs {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        cfg.validate_otfs()?;
        Ok(Self {
            delay_bins: cfg.otfs_delay_bins,
            doppler_bins: cfg.otfs_doppler_bins,
            cp_len: cfg.cp_len,
        })
    }

    fn doppler_transform(&self, data: &mut [Complex64], inverse: bool) {
        let (n1, n2) = (self.delay_bins, self.doppler_bins);
        let mut row = vec![Complex64::new(0.0, 0.0); n2];
        for m in 0..n1 {
            for (l, v) in row.iter_mut().enumerate() {
                *v = data[l * n1 + m];
            }
            unitary_fft_in_place(&mut row, inverse);
            for (l, v) in row.iter().enumerate() {
                data[l * n1 + m] = *v;
            }
        }
    }
}

impl Waveform for Otfs {
    fn block_len(&self) -> usize {
        self.delay_bins * self.doppler_bins
    }

    fn prefix_len(&self) -> usize {
        self.cp_len
    }

    fn modulate(&self, x: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.block_len(), x.len())?;
        let mut buf = x.samples().to_vec();
        self.doppler_transform(&mut buf, true);
        add_cp(&ComplexSignal::new(buf, Domain::Time), self.cp_len)
    }

    fn demodulate(&self, r: &ComplexSignal) -> Result<ComplexSignal> {
        check_len(self.frame_len(), r.len())?;
        let mut buf = remove_cp(r, self.cp_len)?.into_samples();
        self.doppler_transform(&mut buf, false);
        Ok(ComplexSignal::new(buf, Domain::DelayDoppler))
    }
}

pub fn ofdm_modulate(x: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Ofdm::from_config(cfg).modulate(x)
}

pub fn ofdm_demodulate(r: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Ofdm::from_config(cfg).demodulate(r)
}

pub fn afdm_modulate(x: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Afdm::from_config(cfg).modulate(x)
}

pub fn afdm_demodulate(r: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Afdm::from_config(cfg).demodulate(r)
}

pub fn otfs_modulate(x: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Otfs::from_config(cfg)?.modulate(x)
}

pub fn otfs_demodulate(r: &ComplexSignal, cfg: &SystemConfig) -> Result<ComplexSignal> {
    Otfs::from_config(cfg)?.demodulate(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_bit_patterns(m: usize) -> BitBlock {
        let k = m.trailing_zeros() as usize;
        let bits = (0..m)
            .flat_map(|s| (0..k).rev().map(move |b| ((s >> b) & 1) as u8))
            .collect();
        BitBlock::new(bits).unwrap()
    }

    #[test]
    fn qpsk_zero_bits_map_to_first_quadrant() {
        let s = qam_map(&BitBlock::new(vec![0, 0]).unwrap(), 4).unwrap();
        let want = Complex64::new(1.0, 1.0) / 2f64.sqrt();
        assert!((s.samples()[0] - want).norm() < 1e-15);
    }

    #[test]
    fn constellations_are_zero_mean_unit_energy() {
        for m in [4, 16, 64] {
            let pts = qam_map(&all_bit_patterns(m), m).unwrap();
            let mean: Complex64 = pts.samples().iter().sum::<Complex64>() / m as f64;
            assert!(mean.norm() < 1e-14, "M={m}");
            assert!((pts.energy() / m as f64 - 1.0).abs() < 1e-14, "M={m}");
        }
    }

    #[test]
    fn neighbouring_points_differ_in_one_bit() {
        let m = 16;
        let pts = qam_map(&all_bit_patterns(m), m).unwrap();
        let dmin = 2.0 / 10f64.sqrt();
        for a in 0..m {
            for b in 0..m {
                let d = (pts.samples()[a] - pts.samples()[b]).norm();
                if (d - dmin).abs() < 1e-9 {
                    assert_eq!((a ^ b).count_ones(), 1, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn qpsk_decision_quadrants() {
        let cases = [
            (Complex64::new(0.3, 0.2), [0, 0]),
            (Complex64::new(-0.3, 0.2), [1, 0]),
            (Complex64::new(0.3, -0.2), [0, 1]),
            (Complex64::new(-0.3, -0.2), [1, 1]),
        ];
        for (pt, bits) in cases {
            let y = ComplexSignal::new(vec![pt], Domain::Affine);
            assert_eq!(qam_demap_hard(&y, 4).unwrap().bits(), &bits);
        }
    }

    #[test]
    fn noisy_points_inside_decision_region_decode() {
        let m = 16;
        let bits = all_bit_patterns(m);
        let mut pts = qam_map(&bits, m).unwrap();
        let half_dmin = 1.0 / 10f64.sqrt();
        for (i, s) in pts.samples_mut().iter_mut().enumerate() {
            let ang = i as f64;
            *s += Complex64::from_polar(0.99 * half_dmin, ang) * std::f64::consts::FRAC_1_SQRT_2;
        }
        assert_eq!(qam_demap_hard(&pts, m).unwrap(), bits);
    }

    #[test]
    fn invalid_orders_and_lengths() {
        let b = BitBlock::new(vec![0, 1, 1]).unwrap();
        assert!(qam_map(&b, 4).is_err());
        assert!(qam_map(&BitBlock::new(vec![0; 8]).unwrap(), 8).is_err());
        assert!(qam_map(&BitBlock::new(vec![0; 8]).unwrap(), 2).is_err());
        assert!(BitBlock::new(vec![2]).is_err());
    }

    #[test]
    fn slicer_snaps_to_constellation() {
        let y = ComplexSignal::new(vec![Complex64::new(0.9, -0.1)], Domain::Affine);
        let s = qam_slice(&y, 4).unwrap();
        let want = Complex64::new(1.0, -1.0) / 2f64.sqrt();
        assert!((s.samples()[0] - want).norm() < 1e-15);
    }

    #[test]
    fn ofdm_impulse_gives_flat_frame() {
        let cfg = SystemConfig {
            n: 16,
            cp_len: 4,
            ..SystemConfig::desk_scale()
        };
        let mut x = ComplexSignal::zeros(16, Domain::Frequency);
        x.samples_mut()[0] = Complex64::new(1.0, 0.0);
        let s = ofdm_modulate(&x, &cfg).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s
            .samples()
            .iter()
            .all(|v| (v - Complex64::new(0.25, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn modulators_reject_bad_lengths() {
        let cfg = SystemConfig {
            n: 16,
            cp_len: 4,
            cpp_len: 4,
            otfs_delay_bins: 4,
            otfs_doppler_bins: 4,
            ..SystemConfig::desk_scale()
        };
        let short = ComplexSignal::zeros(15, Domain::Frequency);
        assert!(ofdm_modulate(&short, &cfg).is_err());
        assert!(afdm_modulate(&short, &cfg).is_err());
        assert!(otfs_modulate(&short, &cfg).is_err());
        assert!(ofdm_demodulate(&short, &cfg).is_err());
        let bad = SystemConfig {
            otfs_doppler_bins: 3,
            ..cfg
        };
        assert!(matches!(
            otfs_modulate(&ComplexSignal::zeros(16, Domain::DelayDoppler), &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SystemConfig::desk_scale().validate().is_ok());
        assert!(SystemConfig::full_scale().validate().is_ok());
        assert!(SystemConfig::full_scale().validate_otfs().is_ok());
        let bad_chirp = SystemConfig {
            chirp: ChirpParams::new(0.0013, 0.0),
            ..SystemConfig::desk_scale()
        };
        assert!(bad_chirp.validate().is_err());
        let bad_cp = SystemConfig {
            cp_len: 256,
            ..SystemConfig::desk_scale()
        };
        assert!(bad_cp.validate().is_err());
        let bad_qam = SystemConfig {
            qam_order: 32,
            ..SystemConfig::desk_scale()
        };
        assert!(bad_qam.validate().is_err());
    }
}
