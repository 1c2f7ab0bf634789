//! Acceptance gate. Every criterion prints a single `PASS`/`FAIL` line
//! (run with `--nocapture` to see them) and then asserts.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvep_core::analysis::{self, StimulusLayout};
use ssvep_core::dataset::{self, SsvepArchive};
use ssvep_core::evaluation::{self, EvalReport, ProtocolConfig};
use ssvep_core::filterbank::{self, BandpassSpec, FilterBankSpec};
use ssvep_core::network::{DropoutSpec, NetworkConfig};
use ssvep_core::training::StageConfig;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let configs = [
        (NetworkConfig::new(3, 24, 2, 3).unwrap(), DropoutSpec::DISABLED, 0),
        (NetworkConfig::new(2, 25, 1, 4).unwrap(), DropoutSpec::DISABLED, 1),
        (
            NetworkConfig::new(4, 30, 3, 2).unwrap(),
            DropoutSpec::new(0.3, 0.2, 0.5).unwrap(),
            2,
        ),
        (
            NetworkConfig::new(3, 26, 2, 5)
                .unwrap()
                .with_combinations(2)
                .unwrap(),
            DropoutSpec::DISABLED,
            3,
        ),
        (
            NetworkConfig::new(1, 40, 2, 3).unwrap(),
            DropoutSpec::new(0.1, 0.1, 0.95).unwrap(),
            4,
        ),
    ];
    let worst = configs
        .iter()
        .map(|&(cfg, dropout, seed)| common::gradient_check(cfg, seed, dropout, 1e-3, 1e-4, 1e-7))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        "gradient oracle",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        &format!("max relative error {worst:.2e} over 5 configs in {elapsed:.2?}"),
    );
}

#[test]
fn itr_identities() {
    let mut worst_chance: f64 = 0.0;
    for m in [2, 3, 8, 12, 40] {
        for t in [0.2, 0.9, 1.5] {
            let v = evaluation::itr_bits_per_min(1.0 / m as f64, m, t).unwrap();
            worst_chance = worst_chance.max(v.abs());
        }
    }
    let perfect = evaluation::itr_bits_per_min(1.0, 40, 0.9).unwrap();
    verdict(
        "ITR identities",
        worst_chance < 1e-12 && (perfect - 354.80).abs() <= 0.01,
        &format!("max |ITR at chance| {worst_chance:.1e}, ITR(P=1, M=40, T=0.9) = {perfect:.4}"),
    );
}

#[test]
fn filter_suite() {
    let start = Instant::now();
    let fs = 250.0;
    let coeffs = filterbank::design_cheby1_bandpass(&BandpassSpec::new(6.0, 90.0), fs).unwrap();
    let n = 500;
    let interior = n / 4..3 * n / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

    // lag 0: a pass-band tone comes out in phase, so the cross-correlation
    // peaks at zero shift and the interior matches |H|^2 x
    let tone: Vec<f64> = (0..n)
        .map(|i| (std::f64::consts::TAU * 20.0 * i as f64 / fs).sin())
        .collect();
    let out = filterbank::filtfilt(&coeffs, &tone).unwrap();
    let xcorr = |lag: i64| -> f64 {
        interior
            .clone()
            .map(|i| tone[i] * out[(i as i64 + lag) as usize])
            .sum()
    };
    let best_lag = (-20..=20i64)
        .max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b)))
        .unwrap();
    let gain = coeffs.magnitude(20.0, fs).powi(2);
    let shape_err = interior
        .clone()
        .map(|i| (out[i] - gain * tone[i]).abs())
        .fold(0.0, f64::max);

    let (a, b) = (1.7, -0.4);
    let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let fx = filterbank::filtfilt(&coeffs, &x).unwrap();
    let fy = filterbank::filtfilt(&coeffs, &y).unwrap();
    let fm = filterbank::filtfilt(&coeffs, &mixed).unwrap();
    let linearity = fm
        .iter()
        .zip(fx.iter().zip(&fy))
        .map(|(m, (p, q))| (m - (a * p + b * q)).abs())
        .fold(0.0, f64::max);

    let reversed: Vec<f64> = x.iter().rev().copied().collect();
    let fr = filterbank::filtfilt(&coeffs, &reversed).unwrap();
    let reversal = fr
        .iter()
        .rev()
        .zip(&fx)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);

    let dc = filterbank::filtfilt(&coeffs, &vec![1.0; n]).unwrap();
    let dc_leak = interior.clone().map(|i| dc[i].abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();

    let pass = best_lag == 0
        && shape_err < 1e-3
        && linearity < 1e-9
        && reversal < 1e-9
        && dc_leak < 1e-3
        && elapsed < Duration::from_secs(10);
    verdict(
        "filter suite",
        pass,
        &format!(
            "lag {best_lag}, tone error {shape_err:.1e}, linearity {linearity:.1e}, \
             reversal {reversal:.1e}, DC leak {dc_leak:.1e}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn distance_matrix_pattern() {
    let start = Instant::now();
    let layout = StimulusLayout::speller40(5.0);
    assert_eq!(layout.frame_count().unwrap(), 300);
    let matrix = analysis::sinusoid_distance_matrix(&layout).unwrap();
    let by_gap = analysis::distance_by_gap(&layout, &matrix, 0.2);
    let at = |gap: f64| {
        by_gap
            .iter()
            .find(|(g, _)| (g - gap).abs() < 1e-9)
            .map(|(_, d)| *d)
            .unwrap()
    };
    let low = at(0.6).max(at(0.8));
    let high = at(0.2).min(at(0.4)).min(at(1.0));
    let elapsed = start.elapsed();
    verdict(
        "distance-matrix pattern (300 frames)",
        low < high && elapsed < Duration::from_secs(5),
        &format!(
            "mean distance by gap 0.2..1.0 Hz: {:.4} {:.4} {:.4} {:.4} {:.4}; {elapsed:.2?}",
            at(0.2),
            at(0.4),
            at(0.6),
            at(0.8),
            at(1.0)
        ),
    );
}

fn synthetic_protocol(epochs: usize) -> ProtocolConfig {
    let mut stage1 = StageConfig::new(epochs, 100, DropoutSpec::new(0.1, 0.1, 0.95).unwrap(), 7).unwrap();
    let mut stage2 = StageConfig::new(epochs, 200, DropoutSpec::new(0.6, 0.6, 0.95).unwrap(), 8).unwrap();
    // 48 training trials give one Adam step per epoch, too few at 1e-4
    stage1.learning_rate = 1e-3;
    stage2.learning_rate = 1e-3;
    ProtocolConfig {
        durations_s: vec![0.5],
        channels: None,
        bank: FilterBankSpec::new(3, 8.0),
        stage1,
        stage2,
        gaze_shift_s: evaluation::GAZE_SHIFT_S,
        keep_models: true,
    }
}

fn synthetic_pair() -> [SsvepArchive; 2] {
    [
        common::synthetic_subject("S01", false, 1.0, 1),
        common::synthetic_subject("S02", true, 1.0, 2),
    ]
}

fn run_on_pool(threads: usize, archives: &[SsvepArchive], cfg: &ProtocolConfig) -> EvalReport {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| evaluation::run_protocol(archives, cfg).unwrap())
}

#[test]
fn end_to_end_synthetic() {
    let start = Instant::now();
    let report = run_on_pool(1, &synthetic_pair(), &synthetic_protocol(1000));
    let elapsed = start.elapsed();
    let row = &report.rows[0];
    let beats = row.subjects.iter().all(|s| s.accuracy > s.global_accuracy);
    let per_subject: Vec<String> = row
        .subjects
        .iter()
        .map(|s| {
            format!(
                "{} {:.3} vs global {:.3}",
                s.subject_id, s.accuracy, s.global_accuracy
            )
        })
        .collect();
    verdict(
        "end-to-end synthetic",
        row.mean_acc >= 0.95 && beats && elapsed < Duration::from_secs(600),
        &format!(
            "mean accuracy {:.3} ({}), {elapsed:.1?} on one thread",
            row.mean_acc,
            per_subject.join(", ")
        ),
    );
}

fn artifacts(report: &EvalReport) -> Vec<Vec<u8>> {
    let mut out = vec![
        report.to_csv().into_bytes(),
        report.rows[0].confusion.to_csv().into_bytes(),
        report.accuracy_table_csv("synthetic").into_bytes(),
    ];
    for cp in report.models.iter().flatten() {
        out.push(cp.to_bytes().unwrap());
    }
    out
}

#[test]
fn determinism() {
    // a shortened schedule; one and four worker threads must agree
    let cfg = synthetic_protocol(40);
    let first = artifacts(&run_on_pool(1, &synthetic_pair(), &cfg));
    let second = artifacts(&run_on_pool(4, &synthetic_pair(), &cfg));
    let checkpoints = first.len() - 3;
    verdict(
        "determinism",
        first == second && checkpoints == 4 * 3,
        &format!("{checkpoints} checkpoints and 3 CSVs compared byte for byte"),
    );
}

/// Needs converted benchmark archives in `$SSVEP_BENCHMARK_DIR`.
#[test]
fn real_data_reduced_run() {
    let Ok(dir) = std::env::var("SSVEP_BENCHMARK_DIR") else {
        println!("SKIP real-data reduced run: SSVEP_BENCHMARK_DIR not set");
        return;
    };
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ssvep"))
        .collect();
    paths.sort();
    paths.truncate(5);
    assert!(!paths.is_empty(), "no .ssvep archives in {dir}");
    let archives: Vec<_> = paths.iter().map(|p| dataset::read_archive(p).unwrap()).collect();
    let mut stage1 = StageConfig::benchmark_stage1(1);
    stage1.epochs = 200;
    let cfg = ProtocolConfig {
        durations_s: vec![0.4],
        channels: Some(dataset::CHANNELS_9.map(String::from).to_vec()),
        bank: FilterBankSpec::new(3, 8.0),
        stage1,
        stage2: StageConfig::benchmark_stage2(2),
        gaze_shift_s: evaluation::GAZE_SHIFT_S,
        keep_models: false,
    };
    let start = Instant::now();
    let report = evaluation::run_protocol(&archives, &cfg).unwrap();
    print!("{}", report.accuracy_table_csv("benchmark"));
    let acc = report.rows[0].mean_acc;
    verdict(
        "real-data reduced run",
        acc >= 0.55,
        &format!(
            "{} subjects, mean fold accuracy {:.2}% at T=0.4 s, 9 channels, {:.1?}",
            archives.len(),
            100.0 * acc,
            start.elapsed()
        ),
    );
}
