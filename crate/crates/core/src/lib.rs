//! Link-level simulator for a waveform-domain NOMA uplink with integrated
//! sensing.
//!
//! A base station transmits an OFDM downlink frame and listens to its own
//! echoes while a user sends an AFDM (or OTFS) uplink frame in the same
//! time/frequency resources. The receiver demodulates in the affine domain,
//! where the OFDM echo looks like white noise, estimates the total
//! interference-plus-noise power on reserved guard subcarriers, detects the
//! uplink with an MMSE equaliser, cancels the reconstructed uplink, and
//! finally extracts the targets with a delay-Doppler 2D-OMP search.
//!
//! ```text
//!  x_DL ─ OFDM ─ H_DL ─┐
//!                      ├─(+ w)─ r ─ DAFT ─ NPE ─ MMSE ─ x̂_UL
//!  x_UL ─ AFDM ─ H_UL ─┘                           │
//!                           r - H_UL W x̂_UL ─ 2D-OMP ─ targets
//! ```
//!
//! Module map:
//!
//! * [`transforms`]: DFT, chirp diagonals, DAFT and prefix handling.
//! * [`waveforms`]: QAM mapping plus OFDM/AFDM/OTFS modulators.
//! * [`channel`]: delay-Doppler channels, AWGN and the superimposed receive signal.
//! * [`frame`]: AFDM guard layout and the noise-estimation window.
//! * [`receiver`]: noise power estimation, equivalent channel, MMSE and cancellation.
//! * [`sensing`]: dictionary construction and 2D-OMP target extraction.
//! * [`affine_stats`]: empirical statistics of OFDM viewed in the affine domain.
//! * [`harness`]: seeded Monte Carlo sweeps, config files and CSV output.

pub mod affine_stats;
pub mod channel;
pub mod error;
pub mod frame;
pub mod harness;
pub mod receiver;
pub mod sensing;
pub mod transforms;
pub mod waveforms;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
