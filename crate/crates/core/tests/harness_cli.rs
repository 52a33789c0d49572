mod common;

use std::path::Path;
use std::process::Command as Process;

use common::*;
use wdnoma::harness::{
    execute, run_ber, run_sensing, run_stats, Command, ExperimentConfig, Manifest, Mode,
};

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_wdnoma"))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn shipped_configs_parse_and_validate() {
    let desk = ExperimentConfig::load(&configs_dir().join("desk.toml")).unwrap();
    desk.validate().unwrap();
    let built_in = ExperimentConfig::desk();
    assert_eq!(desk.system, built_in.system);
    assert_eq!(desk.frame, built_in.frame);
    assert_eq!(desk.channel, built_in.channel);
    assert_eq!(desk.sweep, built_in.sweep);

    let full = ExperimentConfig::load(&configs_dir().join("full.toml")).unwrap();
    full.validate().unwrap();
    assert_eq!(full.system_config().n, 1024);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let text = ExperimentConfig::desk().to_toml_string().unwrap();
    assert!(
        ExperimentConfig::from_toml_str(&text.replace("[sweep]", "[sweep]\nbogus = 1")).is_err()
    );
    assert_eq!(
        ExperimentConfig::from_toml_str(&text).unwrap(),
        ExperimentConfig::desk()
    );

    let mut cfg = ExperimentConfig::desk();
    cfg.channel.doppler_bins = vec![0, 2];
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::desk();
    cfg.system.cpp_len = 8;
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::desk();
    cfg.frame.guard2_len = 8;
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::desk();
    cfg.sweep.snr_db.clear();
    assert!(cfg.validate().is_err());
}

#[test]
fn validate_config_command() {
    let ok = bin()
        .args(["validate-config", "--config"])
        .arg(configs_dir().join("desk.toml"))
        .output()
        .unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("ok"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[system]\nn = 256\n").unwrap();
    let out = bin()
        .args(["validate-config", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn cli_writes_curves_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, small_experiment().to_toml_string().unwrap()).unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args([
            "ber",
            "--mode",
            "wdnoma_afdm_npe",
            "--snr",
            "0,20",
            "--trials",
            "3",
            "--seed",
            "9",
            "--config",
        ])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let csv = read(&out, "ber_wdnoma_afdm_npe.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "snr_db,metric,trials,errors,ci_halfwidth");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("20,"));
    let manifest: Manifest = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest.seed, 9);
    assert_eq!(manifest.config_hash.len(), 64);
    assert_eq!(
        manifest.outputs,
        vec!["ber_wdnoma_afdm_npe.csv".to_string()]
    );
}

#[test]
fn stats_csv_has_one_row_per_bin_and_histogram_cell() {
    let cfg = small_experiment();
    let dir = tempfile::tempdir().unwrap();
    execute(Command::Stats, &cfg, dir.path(), Some(1)).unwrap();
    let csv = read(dir.path(), "stats.csv");
    assert_eq!(csv.lines().count(), 1 + cfg.system.n + cfg.stats.hist_bins);
    let rep = run_stats(&cfg).unwrap();
    assert_eq!(rep.trials, cfg.stats.trials as u64);
}

#[test]
fn same_seed_gives_identical_files_for_any_worker_count() {
    let mut cfg = small_experiment();
    cfg.sweep.modes = vec![Mode::WdnomaAfdmNpe, Mode::PdnomaOfdm];
    let runs: Vec<tempfile::TempDir> = [Some(1), Some(3), Some(1)]
        .into_iter()
        .map(|w| {
            let dir = tempfile::tempdir().unwrap();
            execute(Command::Ber, &cfg, dir.path(), w).unwrap();
            dir
        })
        .collect();
    for name in ["ber_wdnoma_afdm_npe.csv", "ber_pdnoma_ofdm.csv"] {
        let first = read(runs[0].path(), name);
        assert!(runs.iter().all(|d| read(d.path(), name) == first), "{name}");
    }
    let mut other = cfg.clone();
    other.sweep.seed += 1;
    let dir = tempfile::tempdir().unwrap();
    execute(Command::Ber, &other, dir.path(), Some(1)).unwrap();
    assert_ne!(
        read(dir.path(), "ber_wdnoma_afdm_npe.csv"),
        read(runs[0].path(), "ber_wdnoma_afdm_npe.csv")
    );
}

#[test]
fn high_snr_without_echo_decodes_exactly() {
    let mut cfg = small_experiment();
    cfg.system.echo_power_offset_db = f64::NEG_INFINITY;
    cfg.sweep.snr_db = vec![60.0, f64::INFINITY];
    cfg.sweep.trials = 10;
    for mode in [Mode::WdnomaAfdmGenie, Mode::WdnomaAfdmNpe] {
        cfg.sweep.modes = vec![mode];
        for p in run_ber(&cfg).unwrap() {
            assert_eq!(p.errors_counted, 0, "{mode} at {} dB", p.snr_db);
        }
    }
}

#[test]
fn noiseless_sensing_with_perfect_cancellation_is_exact() {
    let mut cfg = small_experiment();
    cfg.sweep.snr_db = vec![f64::INFINITY];
    cfg.sweep.trials = 10;
    cfg.sensing.perfect_cancellation = true;
    cfg.sweep.modes = vec![Mode::WdnomaAfdmNpe];
    let (vel, dist) = run_sensing(&cfg).unwrap();
    assert_eq!(vel[0].metric, 0.0);
    assert_eq!(dist[0].metric, 0.0);
    assert_eq!(vel[0].errors_counted, 0);
}
