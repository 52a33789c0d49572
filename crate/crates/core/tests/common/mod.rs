//! Dense-matrix reference implementations, built straight from the matrix
//! definitions and used only to check the fast paths.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdnoma::channel::Path;
use wdnoma::transforms::{ChirpParams, ComplexSignal, Domain};
use wdnoma::Complex64;

pub type CMat = DMatrix<Complex64>;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(len: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    (0..len)
        .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn signal(v: Vec<Complex64>, domain: Domain) -> ComplexSignal {
    ComplexSignal::new(v, domain)
}

pub fn mul(m: &CMat, x: &[Complex64]) -> Vec<Complex64> {
    (m * DVector::from_column_slice(x)).as_slice().to_vec()
}

pub fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn mat_max_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// `F[m, n] = exp(-j 2 pi m n / N) / sqrt(N)`.
pub fn dft_matrix(n: usize) -> CMat {
    let s = (n as f64).sqrt().recip();
    CMat::from_fn(n, n, |m, k| {
        Complex64::from_polar(s, -2.0 * PI * ((m * k) % n) as f64 / n as f64)
    })
}

/// `Lambda_c = diag(exp(-j 2 pi c n^2))`.
pub fn chirp_matrix(cr: f64, n: usize) -> CMat {
    CMat::from_diagonal(&DVector::from_fn(n, |k, _| {
        Complex64::from_polar(1.0, -2.0 * PI * cr * (k * k) as f64)
    }))
}

/// `Lambda_c2 F Lambda_c1`.
pub fn daft_matrix(p: &ChirpParams, n: usize) -> CMat {
    chirp_matrix(p.c2, n) * dft_matrix(n) * chirp_matrix(p.c1, n)
}

/// `A_cp = [G_cp; I_N]`.
pub fn cp_matrix(n: usize, cp: usize) -> CMat {
    CMat::from_fn(n + cp, n, |r, k| {
        let src = if r < cp { n - cp + r } else { r - cp };
        if src == k {
            c(1.0, 0.0)
        } else {
            c(0.0, 0.0)
        }
    })
}

/// `A_cpp`: prefix rows weighted by
/// `Omega = diag(exp(-j 2 pi c1 (N^2 - 2 N (L_cpp - r))))`, `r = 0..L_cpp`.
pub fn cpp_matrix(n: usize, cpp: usize, c1: f64) -> CMat {
    let mut a = cp_matrix(n, cpp);
    for r in 0..cpp {
        let k = (cpp - r) as f64;
        let w = Complex64::from_polar(1.0, -2.0 * PI * c1 * ((n * n) as f64 - 2.0 * n as f64 * k));
        for col in 0..n {
            a[(r, col)] *= w;
        }
    }
    a
}

/// `B = [0_{N x L}, I_N]`.
pub fn prefix_removal(n: usize, prefix: usize) -> CMat {
    CMat::from_fn(n, n + prefix, |r, k| {
        if k == r + prefix {
            c(1.0, 0.0)
        } else {
            c(0.0, 0.0)
        }
    })
}

pub fn ofdm_w(n: usize, cp: usize) -> CMat {
    cp_matrix(n, cp) * dft_matrix(n).adjoint()
}

pub fn afdm_w(n: usize, cpp: usize, p: &ChirpParams) -> CMat {
    cpp_matrix(n, cpp, p.c1) * daft_matrix(p, n).adjoint()
}

/// `A_cp (F_{N2}^H kron I_{N1})`.
pub fn otfs_w(n1: usize, n2: usize, cp: usize) -> CMat {
    cp_matrix(n1 * n2, cp) * dft_matrix(n2).adjoint().kronecker(&CMat::identity(n1, n1))
}

pub fn otfs_demod(n1: usize, n2: usize, cp: usize) -> CMat {
    dft_matrix(n2).kronecker(&CMat::identity(n1, n1)) * prefix_removal(n1 * n2, cp)
}

/// Unit cyclic permutation, `(Pi s)[n] = s[n - 1 mod L]`.
pub fn perm_matrix(l: usize) -> CMat {
    CMat::from_fn(l, l, |r, k| {
        if k == (r + l - 1) % l {
            c(1.0, 0.0)
        } else {
            c(0.0, 0.0)
        }
    })
}

/// `Delta^nu` with the Doppler expressed in subcarrier units of an
/// `N`-point block: `diag(exp(-j 2 pi nu n / N))`.
pub fn doppler_matrix(nu: f64, n: usize, l: usize) -> CMat {
    CMat::from_diagonal(&DVector::from_fn(l, |k, _| {
        Complex64::from_polar(1.0, -2.0 * PI * nu * k as f64 / n as f64)
    }))
}

/// `sum_p h_p Pi^tau_p Delta^nu_p` over an `L`-sample frame.
pub fn channel_matrix(paths: &[Path], n: usize, l: usize) -> CMat {
    let mut h = CMat::zeros(l, l);
    let pi = perm_matrix(l);
    for p in paths {
        let mut shift = CMat::identity(l, l);
        for _ in 0..p.delay {
            shift = &pi * shift;
        }
        h += shift * doppler_matrix(p.doppler, n, l) * p.gain;
    }
    h
}

/// `Lambda_c2 F Lambda_c1 B_cpp H A_cpp Lambda_c1^H F^H Lambda_c2^H`.
pub fn afdm_equivalent(paths: &[Path], n: usize, cpp: usize, p: &ChirpParams) -> CMat {
    daft_matrix(p, n)
        * prefix_removal(n, cpp)
        * channel_matrix(paths, n, n + cpp)
        * afdm_w(n, cpp, p)
}

/// Solves `(H^H H + s I) x = H^H d` by LU on the explicit normal matrix.
pub fn mmse_dense(h: &CMat, d: &[Complex64], sigma2: f64) -> Vec<Complex64> {
    let n = h.ncols();
    let a = h.adjoint() * h + CMat::identity(n, n) * c(sigma2, 0.0);
    let rhs = h.adjoint() * DVector::from_column_slice(d);
    a.lu()
        .solve(&rhs)
        .expect("normal matrix is invertible")
        .as_slice()
        .to_vec()
}

/// Random integer-Doppler paths with delays in `0..=max_delay`.
pub fn random_paths(count: usize, max_delay: usize, kappa: i32, rng: &mut impl Rng) -> Vec<Path> {
    (0..count)
        .map(|_| {
            Path::new(
                c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rng.random_range(0..=max_delay),
                rng.random_range(-kappa..=kappa) as f64,
            )
        })
        .collect()
}

/// Small random system: `N` in {8, 16, 32, 64}, integer-scaled chirp.
pub struct Case {
    pub cfg: wdnoma::waveforms::SystemConfig,
    pub kappa: i32,
}

pub fn random_case(rng: &mut impl Rng) -> Case {
    let n = [8usize, 16, 32, 64][rng.random_range(0..4)];
    let kappa = rng.random_range(0..=2);
    let prefix = rng.random_range(1..=n / 4);
    let n1 = [2usize, 4][rng.random_range(0..2)];
    let cfg = wdnoma::waveforms::SystemConfig {
        n,
        cp_len: prefix,
        cpp_len: prefix,
        chirp: ChirpParams::new(
            (2 * kappa + 1) as f64 / (2.0 * n as f64),
            rng.random_range(0.0..1.0) / n as f64,
        ),
        otfs_delay_bins: n1,
        otfs_doppler_bins: n / n1,
        ..wdnoma::waveforms::SystemConfig::desk_scale()
    };
    Case { cfg, kappa }
}

/// Largest fast-path versus dense-oracle deviation per operation over
/// `cases` random systems.
pub fn oracle_sweep(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use wdnoma::channel::{apply_dd_channel, PathSet};
    use wdnoma::receiver::{build_equivalent_channel, mmse_detect, EquivalentChannel};
    use wdnoma::transforms::{add_cp, add_cpp, daft, dft, idaft, idft, remove_cp, remove_cpp};
    use wdnoma::waveforms::{Afdm, Ofdm, Otfs, Waveform};

    let names = [
        "dft",
        "idft",
        "daft",
        "idaft",
        "add_cp",
        "remove_cp",
        "add_cpp",
        "remove_cpp",
        "ofdm_mod",
        "ofdm_demod",
        "afdm_mod",
        "afdm_demod",
        "otfs_mod",
        "otfs_demod",
        "channel",
        "h_eq",
        "mmse",
    ];
    let mut worst = vec![0.0f64; names.len()];
    let mut r = rng(seed);
    for _ in 0..cases {
        let Case { cfg, kappa } = random_case(&mut r);
        let (n, lp, p) = (cfg.n, cfg.cp_len, cfg.chirp);
        let x = random_vec(n, &mut r);
        let xs = signal(x.clone(), Domain::Time);
        let framed = random_vec(n + lp, &mut r);
        let fs = signal(framed.clone(), Domain::Time);
        let f = dft_matrix(n);
        let a = daft_matrix(&p, n);
        let mut e = vec![
            max_diff(dft(&xs, n).unwrap().samples(), &mul(&f, &x)),
            max_diff(idft(&xs, n).unwrap().samples(), &mul(&f.adjoint(), &x)),
            max_diff(daft(&xs, &p, n).unwrap().samples(), &mul(&a, &x)),
            max_diff(idaft(&xs, &p, n).unwrap().samples(), &mul(&a.adjoint(), &x)),
            max_diff(
                add_cp(&xs, lp).unwrap().samples(),
                &mul(&cp_matrix(n, lp), &x),
            ),
            max_diff(
                remove_cp(&fs, lp).unwrap().samples(),
                &mul(&prefix_removal(n, lp), &framed),
            ),
            max_diff(
                add_cpp(&xs, lp, &p, n).unwrap().samples(),
                &mul(&cpp_matrix(n, lp, p.c1), &x),
            ),
            max_diff(
                remove_cpp(&fs, lp, n).unwrap().samples(),
                &mul(&prefix_removal(n, lp), &framed),
            ),
        ];
        let ofdm = Ofdm::from_config(&cfg);
        e.push(max_diff(
            ofdm.modulate(&xs).unwrap().samples(),
            &mul(&ofdm_w(n, lp), &x),
        ));
        e.push(max_diff(
            ofdm.demodulate(&fs).unwrap().samples(),
            &mul(&(f.clone() * prefix_removal(n, lp)), &framed),
        ));
        let afdm = Afdm::from_config(&cfg);
        e.push(max_diff(
            afdm.modulate(&xs).unwrap().samples(),
            &mul(&afdm_w(n, lp, &p), &x),
        ));
        e.push(max_diff(
            afdm.demodulate(&fs).unwrap().samples(),
            &mul(&(a.clone() * prefix_removal(n, lp)), &framed),
        ));
        let otfs = Otfs::from_config(&cfg).unwrap();
        let (n1, n2) = (cfg.otfs_delay_bins, cfg.otfs_doppler_bins);
        e.push(max_diff(
            otfs.modulate(&xs).unwrap().samples(),
            &mul(&otfs_w(n1, n2, lp), &x),
        ));
        e.push(max_diff(
            otfs.demodulate(&fs).unwrap().samples(),
            &mul(&otfs_demod(n1, n2, lp), &framed),
        ));

        // the channel check also covers fractional Doppler values
        let count = r.random_range(1..=4);
        let mut paths = random_paths(count, lp, kappa, &mut r);
        if r.random_bool(0.5) {
            paths[0].doppler += r.random_range(-0.5..0.5);
        }
        let ch = PathSet::new(paths.clone(), n, lp).unwrap();
        e.push(max_diff(
            apply_dd_channel(&fs, &ch).unwrap().samples(),
            &mul(&channel_matrix(&paths, n, n + lp), &framed),
        ));

        let int_paths = random_paths(count, lp, kappa, &mut r);
        let ich = PathSet::new(int_paths.clone(), n, lp).unwrap();
        let heq = build_equivalent_channel(&ich, &cfg).unwrap();
        e.push(mat_max_diff(
            heq.matrix(),
            &afdm_equivalent(&int_paths, n, lp, &p),
        ));

        let hr = CMat::from_fn(n, n, |i, j| {
            let d = if i == j { c(2.0, 0.0) } else { c(0.0, 0.0) };
            d + c(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)) / (n as f64).sqrt()
        });
        let sigma2 = r.random_range(0.01..1.0);
        let d = random_vec(n, &mut r);
        let h = EquivalentChannel::from_matrix(hr.clone(), ich).unwrap();
        let got = mmse_detect(&signal(d.clone(), Domain::Affine), &h, sigma2).unwrap();
        e.push(max_diff(got.samples(), &mmse_dense(&hr, &d, sigma2)));

        for (w, v) in worst.iter_mut().zip(e) {
            *w = w.max(v);
        }
    }
    names.into_iter().zip(worst).collect()
}

/// One guarded AFDM uplink frame of the desk setup: payload bits, the
/// embedded data-domain frame and its noiseless received signal.
pub struct UplinkFrame {
    pub bits: wdnoma::waveforms::BitBlock,
    pub x: ComplexSignal,
    pub r_ul: ComplexSignal,
}

pub fn afdm_uplink(
    cfg: &wdnoma::waveforms::SystemConfig,
    layout: &wdnoma::frame::FrameLayout,
    ch: &wdnoma::channel::PathSet,
    rng: &mut impl Rng,
) -> UplinkFrame {
    use wdnoma::waveforms::{afdm_modulate, qam_map, BitBlock};
    let nbits = layout.data().len() * cfg.bits_per_symbol();
    let bits = BitBlock::new((0..nbits).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
    let symbols = signal(
        qam_map(&bits, cfg.qam_order).unwrap().into_samples(),
        Domain::Affine,
    );
    let x = wdnoma::frame::embed_data(&symbols, layout).unwrap();
    let r_ul = wdnoma::channel::apply_dd_channel(&afdm_modulate(&x, cfg).unwrap(), ch).unwrap();
    UplinkFrame { bits, x, r_ul }
}

/// Desk setup cut down to a few trials and SNR points.
pub fn small_experiment() -> wdnoma::harness::ExperimentConfig {
    let mut cfg = wdnoma::harness::ExperimentConfig::desk();
    cfg.sweep.trials = 6;
    cfg.sweep.snr_db = vec![10.0, 30.0];
    cfg.stats.trials = 300;
    cfg.stats.path = Some((5, 2.0));
    cfg
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}
