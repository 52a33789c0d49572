//! Seeded Monte Carlo sweeps: uplink BER per receiver mode, sensing NMSE
//! after cancellation, and affine-domain statistics.
//!
//! Every trial draws its own scenario (uplink channel, targets, data,
//! unit-variance noise) from a stream keyed by `(seed, trial)`. All modes
//! and SNR points of a trial reuse that scenario, so curves are paired, and
//! results are merged in trial order so the worker count never changes the
//! numbers.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affine_stats::{empirical_stats_with, write_stats_csv, StatReport, StatsOptions};
use crate::channel::{
    build_uplink_channel, complex_gaussian, db_to_amplitude, target_to_path, Path, PathSet,
    PhysicalTarget,
};
use crate::error::{Error, Result};
use crate::frame::{allocate_frame, embed_data, extract_data, FrameLayout};
use crate::receiver::{
    equivalent_channel, estimate_noise_power, reconstruct_and_cancel_with, subtract_uplink,
    MmseDetector,
};
use crate::sensing::{
    build_dictionary, estimate_to_physical, omp_2d, NmseAccumulator, TargetEstimate,
};
use crate::transforms::{ChirpParams, ComplexSignal, Domain};
use crate::waveforms::{
    qam_demap_hard, qam_map, Afdm, BitBlock, Ofdm, Otfs, SystemConfig, Waveform,
};
use crate::SPEED_OF_LIGHT;

/// Receiver configurations compared in the BER and sensing sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// AFDM uplink, MMSE with the guard-window noise estimate.
    WdnomaAfdmNpe,
    /// AFDM uplink, MMSE with the channel noise only (echo ignored).
    WdnomaAfdmNoNpe,
    /// AFDM uplink, MMSE with the true noise-plus-echo power.
    WdnomaAfdmGenie,
    /// OTFS uplink, noise estimated on the edge Doppler columns.
    WdnomaOtfsNpe,
    /// OFDM uplink on every subcarrier, MMSE with the true noise-plus-echo power.
    PdnomaOfdm,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::WdnomaAfdmNpe,
        Mode::WdnomaAfdmNoNpe,
        Mode::WdnomaAfdmGenie,
        Mode::WdnomaOtfsNpe,
        Mode::PdnomaOfdm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::WdnomaAfdmNpe => "wdnoma_afdm_npe",
            Mode::WdnomaAfdmNoNpe => "wdnoma_afdm_no_npe",
            Mode::WdnomaAfdmGenie => "wdnoma_afdm_genie",
            Mode::WdnomaOtfsNpe => "wdnoma_otfs_npe",
            Mode::PdnomaOfdm => "pdnoma_ofdm",
        }
    }

    fn kind(self) -> WaveKind {
        match self {
            Mode::WdnomaAfdmNpe | Mode::WdnomaAfdmNoNpe | Mode::WdnomaAfdmGenie => WaveKind::Afdm,
            Mode::WdnomaOtfsNpe => WaveKind::Otfs,
            Mode::PdnomaOfdm => WaveKind::Ofdm,
        }
    }

    fn noise_policy(self) -> NoisePolicy {
        match self {
            Mode::WdnomaAfdmNpe | Mode::WdnomaOtfsNpe => NoisePolicy::Estimated,
            Mode::WdnomaAfdmNoNpe => NoisePolicy::ChannelOnly,
            Mode::WdnomaAfdmGenie | Mode::PdnomaOfdm => NoisePolicy::Genie,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WaveKind {
    Afdm,
    Otfs,
    Ofdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NoisePolicy {
    Estimated,
    ChannelOnly,
    Genie,
}

fn default_c2() -> f64 {
    0.0
}

fn default_offset() -> f64 {
    -20.0
}

/// `[system]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub qam_order: usize,
    pub carrier_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub cp_len: usize,
    pub cpp_len: usize,
    /// Largest integer Doppler the frame must absorb.
    pub kappa_max: usize,
    /// Defaults to `(2 kappa_max + 1) / (2N)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default = "default_c2")]
    pub c2: f64,
    pub otfs_delay_bins: usize,
    pub otfs_doppler_bins: usize,
    #[serde(default = "default_offset")]
    pub echo_power_offset_db: f64,
}

/// `[frame]` section: the AFDM guards and the OTFS guard width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSection {
    pub guard1_start: usize,
    pub guard1_len: usize,
    pub guard2_start: usize,
    pub guard2_len: usize,
    /// Doppler columns reserved at the OTFS grid edges.
    pub otfs_guard_cols: usize,
}

/// `[channel]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub uplink_taps: usize,
    /// Integer Doppler values (subcarrier units) drawn per uplink tap.
    pub doppler_bins: Vec<i32>,
    pub targets: usize,
    pub range_m: [f64; 2],
    pub velocity_kmh: [f64; 2],
}

/// `[sweep]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// SNR points in dB; `inf` is allowed and means no channel noise.
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub modes: Vec<Mode>,
}

/// `[sensing]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SensingSection {
    /// Delay grid `0..tau_bins`; defaults to the CP length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_bins: Option<usize>,
    /// Doppler grid `-nu_max..=nu_max`; defaults to `kappa_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_max: Option<i32>,
    /// Cancel with the transmitted uplink symbols instead of the decisions.
    #[serde(default)]
    pub perfect_cancellation: bool,
}

fn default_stats_trials() -> usize {
    10_000
}

fn default_hist_bins() -> usize {
    64
}

fn default_max_lag() -> usize {
    8
}

/// `[stats]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_stats_trials")]
    pub trials: usize,
    /// Single-path channel `(delay, doppler)`; omitted means no channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<(usize, f64)>,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            trials: default_stats_trials(),
            path: None,
            hist_bins: default_hist_bins(),
            max_lag: default_max_lag(),
        }
    }
}

/// Whole experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub frame: FrameSection,
    pub channel: ChannelSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub sensing: SensingSection,
    #[serde(default)]
    pub stats: StatsSection,
}

impl ExperimentConfig {
    /// N = 256 desk-scale setup with all five modes.
    pub fn desk() -> Self {
        let sys = SystemConfig::desk_scale();
        Self {
            system: SystemSection {
                n: sys.n,
                qam_order: sys.qam_order,
                carrier_freq_hz: sys.carrier_freq_hz,
                subcarrier_spacing_hz: sys.subcarrier_spacing_hz,
                cp_len: sys.cp_len,
                cpp_len: sys.cpp_len,
                kappa_max: 1,
                c1: None,
                c2: 0.0,
                otfs_delay_bins: sys.otfs_delay_bins,
                otfs_doppler_bins: sys.otfs_doppler_bins,
                echo_power_offset_db: -20.0,
            },
            frame: FrameSection {
                guard1_start: 96,
                guard1_len: 32,
                guard2_start: 128,
                guard2_len: 32,
                otfs_guard_cols: 4,
            },
            channel: ChannelSection {
                uplink_taps: 3,
                doppler_bins: vec![-1, 0, 1],
                targets: 2,
                range_m: [0.0, 50.0],
                velocity_kmh: [0.0, 500.0],
            },
            sweep: SweepSection {
                snr_db: (0..=7).map(|k| 5.0 * k as f64).collect(),
                trials: 2000,
                seed: 1,
                modes: Mode::ALL.to_vec(),
            },
            sensing: SensingSection::default(),
            stats: StatsSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn system_config(&self) -> SystemConfig {
        let s = &self.system;
        let c1 =
            s.c1.unwrap_or((2 * s.kappa_max + 1) as f64 / (2.0 * s.n as f64));
        SystemConfig {
            n: s.n,
            qam_order: s.qam_order,
            carrier_freq_hz: s.carrier_freq_hz,
            subcarrier_spacing_hz: s.subcarrier_spacing_hz,
            cp_len: s.cp_len,
            cpp_len: s.cpp_len,
            chirp: ChirpParams::new(c1, s.c2),
            otfs_delay_bins: s.otfs_delay_bins,
            otfs_doppler_bins: s.otfs_doppler_bins,
            echo_power_offset_db: s.echo_power_offset_db,
        }
    }

    /// AFDM guard layout for the configured uplink delay spread.
    pub fn afdm_layout(&self) -> Result<FrameLayout> {
        let f = &self.frame;
        let sys = self.system_config();
        allocate_frame(
            sys.n,
            f.guard1_start,
            f.guard1_len,
            f.guard2_start,
            f.guard2_len,
            self.system.kappa_max,
            sys.chirp.c1,
            self.channel.uplink_taps.saturating_sub(1),
        )
    }

    pub fn otfs_layout(&self) -> Result<FrameLayout> {
        FrameLayout::otfs(
            self.system.otfs_delay_bins,
            self.system.otfs_doppler_bins,
            self.frame.otfs_guard_cols,
            self.system.kappa_max,
        )
    }

    pub fn tau_grid(&self) -> Vec<usize> {
        (0..self.sensing.tau_bins.unwrap_or(self.system.cp_len)).collect()
    }

    pub fn nu_grid(&self) -> Vec<f64> {
        let m = self.sensing.nu_max.unwrap_or(self.system.kappa_max as i32);
        (-m..=m).map(f64::from).collect()
    }

    /// Checks everything a sweep needs, so no trial can fail on configuration.
    pub fn validate(&self) -> Result<()> {
        let sys = self.system_config();
        sys.validate()?;
        if sys.cp_len != sys.cpp_len {
            return Err(Error::Config(format!(
                "cp_len {} and cpp_len {} must match so uplink and echo frames align",
                sys.cp_len, sys.cpp_len
            )));
        }
        if self.sweep.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.sweep.snr_db.is_empty()
            || self
                .sweep
                .snr_db
                .iter()
                .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return Err(Error::Config(
                "SNR list must be non-empty and finite or +inf".into(),
            ));
        }
        if self.sweep.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        let ch = &self.channel;
        if ch.uplink_taps == 0 || ch.uplink_taps > sys.cp_len {
            return Err(Error::Config(format!(
                "{} uplink taps do not fit inside a {}-sample prefix",
                ch.uplink_taps, sys.cp_len
            )));
        }
        if ch.doppler_bins.is_empty() {
            return Err(Error::Config("uplink Doppler set is empty".into()));
        }
        if let Some(d) = ch
            .doppler_bins
            .iter()
            .find(|d| d.unsigned_abs() as usize > self.system.kappa_max)
        {
            return Err(Error::Config(format!(
                "uplink Doppler {d} exceeds kappa_max {}",
                self.system.kappa_max
            )));
        }
        if ch.targets == 0 {
            return Err(Error::Config(
                "at least one sensing target is required".into(),
            ));
        }
        let ordered =
            |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[0] <= r[1];
        if !ordered(ch.range_m) || !ordered(ch.velocity_kmh) {
            return Err(Error::Config(
                "target range and velocity bounds must be ordered and non-negative".into(),
            ));
        }
        let (tau_max, nu_max) = self.target_grid_extent();
        let tau_grid = self.tau_grid();
        let nu_grid = self.nu_grid();
        if tau_max >= tau_grid.len() || tau_max > sys.cp_len {
            return Err(Error::Config(format!(
                "target delays up to {tau_max} samples fall outside the delay grid of {} bins or the prefix",
                tau_grid.len()
            )));
        }
        if nu_grid.last().copied().unwrap_or(0.0) < nu_max as f64 {
            return Err(Error::Config(format!(
                "target Doppler up to {nu_max} falls outside the Doppler grid"
            )));
        }
        let (tau_lo, nu_lo) = self.target_grid_lower();
        let cells = (tau_max - tau_lo + 1) * (nu_max - nu_lo + 1) as usize;
        if ch.targets > cells {
            return Err(Error::Config(format!(
                "{} targets cannot occupy distinct cells among {cells} reachable delay-Doppler cells",
                ch.targets
            )));
        }
        if ch.targets > tau_grid.len() * nu_grid.len() {
            return Err(Error::Config("more targets than dictionary atoms".into()));
        }
        if self.sensing.tau_bins == Some(0) || self.sensing.nu_max.is_some_and(|m| m < 0) {
            return Err(Error::Config("sensing grid must be non-empty".into()));
        }
        self.afdm_layout()?;
        if self.sweep.modes.contains(&Mode::WdnomaOtfsNpe) {
            sys.validate_otfs()?;
            self.otfs_layout()?;
        }
        if self.stats.trials == 0 || self.stats.hist_bins == 0 {
            return Err(Error::Config(
                "stats trials and histogram bins must be positive".into(),
            ));
        }
        if let Some((delay, _)) = self.stats.path {
            if delay > sys.cp_len {
                return Err(Error::Config(format!(
                    "stats path delay {delay} exceeds the CP"
                )));
            }
        }
        Ok(())
    }

    fn target_path(&self, range_m: f64, velocity_kmh: f64) -> Result<Path> {
        let t = PhysicalTarget {
            range_m,
            velocity_mps: velocity_kmh / 3.6,
            rcs_gain: Complex64::new(1.0, 0.0),
        };
        target_to_path(&t, &self.system_config())
    }

    fn target_grid_extent(&self) -> (usize, i64) {
        let ch = &self.channel;
        match self.target_path(ch.range_m[1], ch.velocity_kmh[1]) {
            Ok(p) => (p.delay, p.doppler as i64),
            Err(_) => (usize::MAX / 4, i64::MAX / 4),
        }
    }

    fn target_grid_lower(&self) -> (usize, i64) {
        let ch = &self.channel;
        match self.target_path(ch.range_m[0], ch.velocity_kmh[0]) {
            Ok(p) => (p.delay, p.doppler as i64),
            Err(_) => (0, 0),
        }
    }
}

/// One row of an output curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub snr_db: f64,
    /// BER, or NMSE for sensing curves.
    pub metric: f64,
    pub trials: usize,
    /// Bit errors for BER curves; trials with a wrong target set for NMSE curves.
    pub errors_counted: u64,
    pub confidence_halfwidth: f64,
}

/// Variance of one complex noise sample for an SNR in dB (unit symbol energy).
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Mean and 95% half-width `1.96 s / sqrt(T)` of per-trial values.
///
/// Bits of one trial share a channel, so BER intervals are taken over trials
/// rather than over bits.
pub fn mean_halfwidth(values: &[f64]) -> (f64, f64) {
    let t = values.len() as f64;
    if values.len() < 2 {
        return (values.first().copied().unwrap_or(0.0), 0.0);
    }
    let mean = values.iter().sum::<f64>() / t;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
    (mean, 1.96 * (var / t).sqrt())
}

/// Per-trial RNG keyed by `sha256(seed || trial)`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(trial.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Everything random about one trial.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub uplink: PathSet,
    pub sensing: PathSet,
    /// On-grid truths, in the order of the sensing paths.
    pub truths: Vec<PhysicalTarget>,
    /// Transmitted downlink frame (with CP).
    pub s_dl: ComplexSignal,
    /// Echo at unit average power, before the power offset.
    pub r_dl: ComplexSignal,
    /// `N` uplink symbols; a mode uses as many as it has data slots.
    pub ul_bits: Vec<u8>,
    /// Unit-variance complex noise over one frame.
    pub noise: Vec<Complex64>,
}

/// Draws the scenario of `trial` under `cfg`.
pub fn draw_scenario(cfg: &ExperimentConfig, trial: u64) -> Result<Scenario> {
    let sys = cfg.system_config();
    let mut rng = trial_rng(cfg.sweep.seed, trial);
    let ch = &cfg.channel;
    let uplink = build_uplink_channel(
        ch.uplink_taps,
        &ch.doppler_bins,
        sys.n,
        sys.cpp_len,
        &mut rng,
    )?;

    let mut paths: Vec<Path> = Vec::with_capacity(ch.targets);
    let mut attempts = 0;
    while paths.len() < ch.targets {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(
                "could not place targets in distinct delay-Doppler cells".into(),
            ));
        }
        let r = rng.random_range(ch.range_m[0]..=ch.range_m[1]);
        let v = rng.random_range(ch.velocity_kmh[0]..=ch.velocity_kmh[1]);
        let p = cfg.target_path(r, v)?;
        if paths
            .iter()
            .all(|q| (q.delay, q.doppler) != (p.delay, p.doppler))
        {
            paths.push(p);
        }
    }
    let amp = (ch.targets as f64).sqrt().recip();
    for p in &mut paths {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        p.gain = Complex64::from_polar(amp, phase);
    }
    let truths = paths
        .iter()
        .map(|p| PhysicalTarget {
            range_m: SPEED_OF_LIGHT * p.delay as f64 / (2.0 * sys.sample_rate_hz()),
            velocity_mps: SPEED_OF_LIGHT * p.doppler * sys.subcarrier_spacing_hz
                / (2.0 * sys.carrier_freq_hz),
            rcs_gain: p.gain,
        })
        .collect();
    let sensing = PathSet::new(paths, sys.n, sys.cp_len)?;

    let bps = sys.bits_per_symbol();
    let dl_bits = BitBlock::new((0..sys.n * bps).map(|_| rng.random_range(0..2u8)).collect())?;
    let x_dl = qam_map(&dl_bits, sys.qam_order)?.retag(Domain::Frequency);
    let s_dl = Ofdm::from_config(&sys).modulate(&x_dl)?;
    let mut echo = vec![Complex64::default(); s_dl.len()];
    sensing.apply_into(s_dl.samples(), &mut echo);
    let r_dl = ComplexSignal::new(echo, Domain::Time);

    let ul_bits = (0..sys.n * bps).map(|_| rng.random_range(0..2u8)).collect();
    let noise = complex_gaussian(s_dl.len(), &mut rng);
    Ok(Scenario {
        uplink,
        sensing,
        truths,
        s_dl,
        r_dl,
        ul_bits,
        noise,
    })
}

/// Transmit side and detector of one uplink waveform within a trial.
struct Link {
    wf: Box<dyn Waveform>,
    layout: FrameLayout,
    x: ComplexSignal,
    r_ul: ComplexSignal,
    bits: BitBlock,
    detector: MmseDetector,
}

impl Link {
    fn new(
        wf: Box<dyn Waveform>,
        layout: FrameLayout,
        sc: &Scenario,
        sys: &SystemConfig,
    ) -> Result<Self> {
        let nbits = layout.data().len() * sys.bits_per_symbol();
        let bits = BitBlock::new(sc.ul_bits[..nbits].to_vec())?;
        let symbols = qam_map(&bits, sys.qam_order)?.retag(layout.domain());
        let x = embed_data(&symbols, &layout)?;
        let s = wf.modulate(&x)?;
        let mut r = vec![Complex64::default(); s.len()];
        sc.uplink.apply_into(s.samples(), &mut r);
        let detector =
            MmseDetector::on_columns(&equivalent_channel(wf.as_ref(), &sc.uplink)?, layout.data())?;
        Ok(Self {
            wf,
            layout,
            x,
            r_ul: ComplexSignal::new(r, Domain::Time),
            bits,
            detector,
        })
    }
}

/// Outcome of one (mode, SNR) cell of one trial.
#[derive(Debug, Clone)]
struct Cell {
    bit_errors: u64,
    estimates: Vec<TargetEstimate>,
}

#[derive(Debug, Clone)]
struct TrialOutcome {
    // [mode][snr]
    cells: Vec<Vec<Cell>>,
    truths: Vec<PhysicalTarget>,
}

fn run_trial(
    cfg: &ExperimentConfig,
    modes: &[Mode],
    trial: u64,
    sensing: bool,
) -> Result<TrialOutcome> {
    let sys = cfg.system_config();
    let sc = draw_scenario(cfg, trial)?;
    let g = db_to_amplitude(sys.echo_power_offset_db);
    let lp = sys.cp_len;
    let echo_bin_power = g
        * g
        * sc.r_dl.samples()[lp..]
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
        / sys.n as f64;

    let mut links: Vec<(WaveKind, Link)> = Vec::new();
    for kind in [WaveKind::Afdm, WaveKind::Otfs, WaveKind::Ofdm] {
        if !modes.iter().any(|m| m.kind() == kind) {
            continue;
        }
        let link = match kind {
            WaveKind::Afdm => Link::new(
                Box::new(Afdm::from_config(&sys)),
                cfg.afdm_layout()?,
                &sc,
                &sys,
            )?,
            WaveKind::Otfs => Link::new(
                Box::new(Otfs::from_config(&sys)?),
                cfg.otfs_layout()?,
                &sc,
                &sys,
            )?,
            WaveKind::Ofdm => Link::new(
                Box::new(Ofdm::from_config(&sys)),
                FrameLayout::unguarded(sys.n, Domain::Frequency),
                &sc,
                &sys,
            )?,
        };
        links.push((kind, link));
    }
    let dict = if sensing {
        Some(build_dictionary(
            &sc.s_dl,
            &cfg.tau_grid(),
            &cfg.nu_grid(),
            sys.n,
        )?)
    } else {
        None
    };

    let mut cells = vec![Vec::with_capacity(cfg.sweep.snr_db.len()); modes.len()];
    for &snr in &cfg.sweep.snr_db {
        let sigma2 = noise_variance(snr);
        let sd = sigma2.sqrt();
        for (mi, &mode) in modes.iter().enumerate() {
            let link = &links
                .iter()
                .find(|(k, _)| *k == mode.kind())
                .expect("link built for every mode kind")
                .1;
            let r: Vec<Complex64> = link
                .r_ul
                .samples()
                .iter()
                .zip(sc.r_dl.samples())
                .zip(&sc.noise)
                .map(|((u, d), w)| u + d * g + w * sd)
                .collect();
            let r = ComplexSignal::new(r, Domain::Time);
            let d = link.wf.demodulate(&r)?;
            let sigma2_hat = match mode.noise_policy() {
                NoisePolicy::Estimated => estimate_noise_power(&d, &link.layout)?.sigma2_hat,
                NoisePolicy::ChannelOnly => sigma2,
                NoisePolicy::Genie => sigma2 + echo_bin_power,
            };
            let x_hat = link.detector.detect(&d, sigma2_hat)?;
            let data = extract_data(&x_hat, &link.layout)?;
            let bits = qam_demap_hard(&data, sys.qam_order)?;
            let bit_errors = bits.hamming_distance(&link.bits) as u64;
            let estimates = match &dict {
                Some(dict) => {
                    let residual = if cfg.sensing.perfect_cancellation {
                        subtract_uplink(link.wf.as_ref(), &r, &sc.uplink, &link.x)?
                    } else {
                        reconstruct_and_cancel_with(
                            link.wf.as_ref(),
                            &r,
                            &sc.uplink,
                            &x_hat,
                            &link.layout,
                            sys.qam_order,
                        )?
                    };
                    omp_2d(&residual, dict, cfg.channel.targets)?
                        .estimates
                        .iter()
                        .map(|e| estimate_to_physical(e, &sys))
                        .collect()
                }
                None => Vec::new(),
            };
            cells[mi].push(Cell {
                bit_errors,
                estimates,
            });
        }
    }
    Ok(TrialOutcome {
        cells,
        truths: sc.truths,
    })
}

/// Curves of a combined BER and sensing sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub snr_db: Vec<f64>,
    pub modes: Vec<Mode>,
    /// Data bits per trial for each mode.
    pub bits_per_trial: Vec<u64>,
    /// `[mode][snr]`.
    pub ber: Vec<Vec<CurvePoint>>,
    /// `[mode][snr][trial]` bit errors, for paired comparisons.
    pub trial_errors: Vec<Vec<Vec<u64>>>,
    /// Empty when sensing was not run.
    pub velocity_nmse: Vec<Vec<CurvePoint>>,
    pub distance_nmse: Vec<Vec<CurvePoint>>,
    /// `[mode][snr]` trials whose estimated delay-Doppler set equals the truth.
    pub index_hits: Vec<Vec<usize>>,
}

impl SweepResult {
    pub fn mode_index(&self, m: Mode) -> Option<usize> {
        self.modes.iter().position(|&x| x == m)
    }

    /// Mean and 95% half-width of the per-trial BER difference `a - b` at
    /// SNR index `k`.
    pub fn paired_ber_difference(&self, a: Mode, b: Mode, k: usize) -> Option<(f64, f64)> {
        let (ia, ib) = (self.mode_index(a)?, self.mode_index(b)?);
        let (na, nb) = (
            self.bits_per_trial[ia] as f64,
            self.bits_per_trial[ib] as f64,
        );
        let diffs: Vec<f64> = self.trial_errors[ia][k]
            .iter()
            .zip(&self.trial_errors[ib][k])
            .map(|(&x, &y)| x as f64 / na - y as f64 / nb)
            .collect();
        Some(mean_halfwidth(&diffs))
    }
}

/// Runs every trial of `cfg` for `modes`; BER always, sensing when asked.
pub fn run_sweep(cfg: &ExperimentConfig, modes: &[Mode], sensing: bool) -> Result<SweepResult> {
    let mut cfg = cfg.clone();
    cfg.sweep.modes = modes.to_vec();
    cfg.validate()?;
    let cfg = &cfg;
    let outcomes: Vec<Result<TrialOutcome>> = (0..cfg.sweep.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, modes, t, sensing))
        .collect();

    let sys = cfg.system_config();
    let n_snr = cfg.sweep.snr_db.len();
    let bits_per_trial: Vec<u64> = modes
        .iter()
        .map(|m| {
            let data = match m.kind() {
                WaveKind::Afdm => cfg.afdm_layout().map(|l| l.data().len()),
                WaveKind::Otfs => cfg.otfs_layout().map(|l| l.data().len()),
                WaveKind::Ofdm => Ok(sys.n),
            };
            data.map(|d| (d * sys.bits_per_symbol()) as u64)
        })
        .collect::<Result<_>>()?;
    let mut trial_errors = vec![vec![Vec::with_capacity(cfg.sweep.trials); n_snr]; modes.len()];
    let mut nmse = vec![vec![NmseAccumulator::default(); n_snr]; modes.len()];
    let mut hits = vec![vec![0usize; n_snr]; modes.len()];
    let mut misses = vec![vec![0u64; n_snr]; modes.len()];
    for outcome in outcomes {
        let o = outcome?;
        for (mi, row) in o.cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                trial_errors[mi][k].push(cell.bit_errors);
                if sensing {
                    nmse[mi][k].add(&cell.estimates, &o.truths)?;
                    if same_cells(&cell.estimates, &o.truths, &sys) {
                        hits[mi][k] += 1;
                    } else {
                        misses[mi][k] += 1;
                    }
                }
            }
        }
    }
    let trials = cfg.sweep.trials;
    let ber = trial_errors
        .iter()
        .zip(&bits_per_trial)
        .map(|(rows, &bits)| {
            rows.iter()
                .zip(&cfg.sweep.snr_db)
                .map(|(errs, &snr)| {
                    let errors: u64 = errs.iter().sum();
                    let p = errors as f64 / (bits * trials as u64) as f64;
                    let per_trial: Vec<f64> =
                        errs.iter().map(|&e| e as f64 / bits as f64).collect();
                    CurvePoint {
                        snr_db: snr,
                        metric: p,
                        trials,
                        errors_counted: errors,
                        confidence_halfwidth: mean_halfwidth(&per_trial).1,
                    }
                })
                .collect()
        })
        .collect();
    let curve = |pick: fn(&NmseAccumulator) -> (f64, f64)| -> Vec<Vec<CurvePoint>> {
        if !sensing {
            return Vec::new();
        }
        nmse.iter()
            .zip(&misses)
            .map(|(row, miss)| {
                row.iter()
                    .zip(miss)
                    .zip(&cfg.sweep.snr_db)
                    .map(|((acc, &m), &snr)| {
                        let (metric, hw) = pick(acc);
                        CurvePoint {
                            snr_db: snr,
                            metric,
                            trials,
                            errors_counted: m,
                            confidence_halfwidth: hw,
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let velocity_nmse = curve(|a| (a.nmse().velocity, a.halfwidths().velocity));
    let distance_nmse = curve(|a| (a.nmse().range, a.halfwidths().range));
    Ok(SweepResult {
        snr_db: cfg.sweep.snr_db.clone(),
        modes: modes.to_vec(),
        bits_per_trial,
        ber,
        trial_errors,
        velocity_nmse,
        distance_nmse,
        index_hits: hits,
    })
}

fn same_cells(estimates: &[TargetEstimate], truths: &[PhysicalTarget], sys: &SystemConfig) -> bool {
    let key = |r: f64, v: f64| {
        let tau = (2.0 * r / SPEED_OF_LIGHT * sys.sample_rate_hz()).round() as i64;
        let nu = (2.0 * sys.carrier_freq_hz * v / SPEED_OF_LIGHT / sys.subcarrier_spacing_hz)
            .round() as i64;
        (tau, nu)
    };
    let mut a: Vec<_> = estimates
        .iter()
        .map(|e| key(e.range_m, e.velocity_mps))
        .collect();
    let mut b: Vec<_> = truths
        .iter()
        .map(|t| key(t.range_m, t.velocity_mps))
        .collect();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// BER curve of the first configured mode.
pub fn run_ber(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>> {
    let mode = *cfg
        .sweep
        .modes
        .first()
        .ok_or_else(|| Error::Config("no mode configured".into()))?;
    Ok(run_sweep(cfg, &[mode], false)?.ber.remove(0))
}

/// Velocity and distance NMSE curves of the first configured mode.
pub fn run_sensing(cfg: &ExperimentConfig) -> Result<(Vec<CurvePoint>, Vec<CurvePoint>)> {
    let mode = *cfg
        .sweep
        .modes
        .first()
        .ok_or_else(|| Error::Config("no mode configured".into()))?;
    let mut r = run_sweep(cfg, &[mode], true)?;
    Ok((r.velocity_nmse.remove(0), r.distance_nmse.remove(0)))
}

/// Affine-domain statistics of the downlink, optionally through the
/// configured single-path channel.
pub fn run_stats(cfg: &ExperimentConfig) -> Result<StatReport> {
    cfg.validate()?;
    let sys = cfg.system_config();
    let channel = cfg
        .stats
        .path
        .map(|(delay, doppler)| {
            PathSet::new(
                vec![Path::new(Complex64::new(1.0, 0.0), delay, doppler)],
                sys.n,
                sys.cp_len,
            )
        })
        .transpose()?;
    let opts = StatsOptions {
        hist_bins: cfg.stats.hist_bins,
        max_lag: cfg.stats.max_lag,
        ..Default::default()
    };
    let mut rng = trial_rng(cfg.sweep.seed, u64::MAX);
    empirical_stats_with(cfg.stats.trials, &sys, channel.as_ref(), &opts, &mut rng)
}

/// Curve CSV with header `snr_db,metric,trials,errors,ci_halfwidth`.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("snr_db,metric,trials,errors,ci_halfwidth\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.snr_db, p.metric, p.trials, p.errors_counted, p.confidence_halfwidth
        );
    }
    out
}

pub fn write_curve_csv(points: &[CurvePoint], path: &FsPath) -> Result<()> {
    std::fs::write(path, curve_csv(points))?;
    Ok(())
}

/// CLI subcommands that produce files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Ber,
    Sense,
    Stats,
}

/// Run record written next to the curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    pub workers: Option<usize>,
    pub outputs: Vec<String>,
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument(
            "worker count must be positive".into(),
        )),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs one subcommand, writes its CSVs and `manifest.json` into `out`.
pub fn execute(
    command: Command,
    cfg: &ExperimentConfig,
    out: &FsPath,
    workers: Option<usize>,
) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut outputs: Vec<PathBuf> = Vec::new();
    match command {
        Command::Ber | Command::Sense => {
            let sensing = command == Command::Sense;
            let res = with_workers(workers, || run_sweep(cfg, &cfg.sweep.modes, sensing))??;
            for (mi, mode) in res.modes.iter().enumerate() {
                if sensing {
                    let v = out.join(format!("velocity_nmse_{mode}.csv"));
                    write_curve_csv(&res.velocity_nmse[mi], &v)?;
                    let d = out.join(format!("distance_nmse_{mode}.csv"));
                    write_curve_csv(&res.distance_nmse[mi], &d)?;
                    outputs.extend([v, d]);
                } else {
                    let p = out.join(format!("ber_{mode}.csv"));
                    write_curve_csv(&res.ber[mi], &p)?;
                    outputs.push(p);
                }
            }
        }
        Command::Stats => {
            let report = with_workers(workers, || run_stats(cfg))??;
            let p = out.join("stats.csv");
            write_stats_csv(&report, &p)?;
            outputs.push(p);
        }
    }
    let manifest = Manifest {
        command,
        config_hash: cfg.hash()?,
        seed: cfg.sweep.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        workers,
        outputs: outputs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
