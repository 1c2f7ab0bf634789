//! Stimulus distance matrices, channel-importance extraction and a synthetic
//! SSVEP generator.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, RecordingMeta, SsvepArchive};
use crate::error::{ensure, Error, Result};
use crate::filterbank::{self, FilterBankSpec};
use crate::network::{self, NetworkConfig, Parameters};
use crate::training::{self, Examples, StageConfig, StageOutcome};

pub const MONITOR_REFRESH_HZ: f64 = 60.0;

/// Frequencies and phases of the flickering targets as shown on screen.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusLayout {
    pub freqs_hz: Vec<f64>,
    pub phases_rad: Vec<f64>,
    pub refresh_rate_hz: f64,
    pub duration_s: f64,
}

impl StimulusLayout {
    /// Joint frequency-phase layout: `f_j = start + j*step` and
    /// `theta_j = (j * phase_step) mod 2pi`, `theta_0 = 0`.
    pub fn joint_frequency_phase(
        start_hz: f64,
        step_hz: f64,
        n_targets: usize,
        phase_step_rad: f64,
        refresh_rate_hz: f64,
        duration_s: f64,
    ) -> Self {
        Self {
            freqs_hz: (0..n_targets).map(|j| start_hz + step_hz * j as f64).collect(),
            phases_rad: (0..n_targets)
                .map(|j| (phase_step_rad * j as f64).rem_euclid(TAU))
                .collect(),
            refresh_rate_hz,
            duration_s,
        }
    }

    /// The 40-target speller layout: 8 to 15.8 Hz in 0.2 Hz steps with
    /// quarter-cycle phase increments, on a 60 Hz monitor.
    pub fn speller40(duration_s: f64) -> Self {
        Self::joint_frequency_phase(8.0, 0.2, 40, FRAC_PI_2, MONITOR_REFRESH_HZ, duration_s)
    }

    /// Number of monitor frames shown during `duration_s`.
    pub fn frame_count(&self) -> Result<usize> {
        let frames = self.duration_s * self.refresh_rate_hz;
        ensure!(
            frames >= 1.0 - 1e-9 && (frames - frames.round()).abs() < 1e-9,
            Argument,
            "{} s at {} Hz is not a whole number of frames",
            self.duration_s,
            self.refresh_rate_hz
        );
        Ok(frames.round() as usize)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.freqs_hz.len() == self.phases_rad.len() && !self.freqs_hz.is_empty(),
            Argument,
            "need one phase per frequency"
        );
        ensure!(
            self.refresh_rate_hz > 0.0,
            Argument,
            "refresh rate must be positive"
        );
        Ok(())
    }
}

/// Luminance modulation of a target at frame `k`: `(1 + sin(2 pi f k/R + theta)) / 2`.
pub fn luminance(freq_hz: f64, phase_rad: f64, frame: usize, refresh_rate_hz: f64) -> f64 {
    0.5 * (1.0 + (TAU * freq_hz * frame as f64 / refresh_rate_hz + phase_rad).sin())
}

/// Mean absolute difference between the frame-sampled luminance sequences of
/// every pair of targets. Row-major `M x M`.
pub fn sinusoid_distance_matrix(layout: &StimulusLayout) -> Result<Vec<Vec<f64>>> {
    layout.validate()?;
    let frames = layout.frame_count()?;
    let seqs: Vec<Vec<f64>> = layout
        .freqs_hz
        .iter()
        .zip(&layout.phases_rad)
        .map(|(&f, &th)| {
            (0..frames)
                .map(|k| luminance(f, th, k, layout.refresh_rate_hz))
                .collect()
        })
        .collect();
    let m = seqs.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = seqs[i]
                .iter()
                .zip(&seqs[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / frames as f64;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Mean off-diagonal distance per frequency gap, gaps rounded to `resolution_hz`.
/// Sorted by gap.
pub fn distance_by_gap(layout: &StimulusLayout, matrix: &[Vec<f64>], resolution_hz: f64) -> Vec<(f64, f64)> {
    let mut buckets: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for (i, row) in matrix.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            let gap = ((layout.freqs_hz[i] - layout.freqs_hz[j]).abs() / resolution_hz).round() as i64;
            let e = buckets.entry(gap).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
        }
    }
    buckets
        .into_iter()
        .map(|(g, (sum, n))| (g as f64 * resolution_hz, sum / n as f64))
        .collect()
}

pub fn distance_matrix_csv(layout: &StimulusLayout, matrix: &[Vec<f64>]) -> String {
    let mut s = String::from("freq_hz");
    for f in &layout.freqs_hz {
        write!(s, ",{f:.1}").unwrap();
    }
    s.push('\n');
    for (f, row) in layout.freqs_hz.iter().zip(matrix) {
        write!(s, "{f:.1}").unwrap();
        for d in row {
            write!(s, ",{d:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parameters of the harmonic SSVEP model
/// `x_c(t) = sum_k mixing[c][k] * A_k sin(2 pi k f t + phi_k) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub subject_id: String,
    pub n_channels: usize,
    pub sampling_rate_hz: f64,
    /// Raw trial length, including the cue and latency lead-in.
    pub trial_duration_s: f64,
    pub cue_duration_s: f64,
    pub visual_latency_s: f64,
    pub harmonic_amplitudes: Vec<f64>,
    pub harmonic_phases: Vec<f64>,
    pub noise_std: f64,
    /// `n_channels x n_harmonics` projection of each harmonic onto the scalp.
    pub channel_mixing: Vec<Vec<f64>>,
    pub channel_names: Vec<String>,
    pub n_blocks: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Identity-like mixing: harmonic `k` lands on channel `k` (if any).
    pub fn identity_mixing(n_channels: usize, n_harmonics: usize) -> Vec<Vec<f64>> {
        (0..n_channels)
            .map(|c| (0..n_harmonics).map(|k| if c == k { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn validate(&self, freqs: &[f64]) -> Result<()> {
        let k = self.harmonic_amplitudes.len();
        ensure!(k > 0, Argument, "need at least one harmonic");
        ensure!(
            self.harmonic_phases.len() == k,
            Argument,
            "{} harmonic phases for {k} amplitudes",
            self.harmonic_phases.len()
        );
        ensure!(
            self.harmonic_amplitudes.iter().all(|a| *a >= 0.0),
            Argument,
            "harmonic amplitudes must be nonnegative"
        );
        ensure!(
            self.channel_mixing.len() == self.n_channels && self.channel_mixing.iter().all(|r| r.len() == k),
            Argument,
            "channel mixing must be {}x{k}",
            self.n_channels
        );
        ensure!(
            self.channel_mixing.iter().flatten().any(|v| *v != 0.0),
            Argument,
            "channel mixing is all zeros"
        );
        ensure!(
            self.channel_names.len() == self.n_channels,
            Argument,
            "need {} channel names",
            self.n_channels
        );
        ensure!(self.noise_std >= 0.0, Argument, "noise std must be nonnegative");
        let top = freqs.iter().copied().fold(0.0, f64::max) * k as f64;
        ensure!(
            top < self.sampling_rate_hz / 2.0,
            Argument,
            "harmonic {k} of {} Hz aliases at f_s = {} Hz",
            top / k as f64,
            self.sampling_rate_hz
        );
        Ok(())
    }
}

/// Generates one synthetic subject. Target `j` flickers at `freqs_hz[j]`;
/// the response starts at `cue + latency` (time zero of the model) and only
/// noise precedes it.
pub fn generate_synthetic(spec: &SynthSpec, freqs_hz: &[f64], phases_rad: &[f64]) -> Result<SsvepArchive> {
    spec.validate(freqs_hz)?;
    ensure!(
        phases_rad.len() == freqs_hz.len(),
        Argument,
        "need one stimulus phase per frequency"
    );
    let fs = spec.sampling_rate_hz;
    let n_samples = dataset::seconds_to_samples(spec.trial_duration_s, fs);
    let onset = dataset::seconds_to_samples(spec.cue_duration_s + spec.visual_latency_s, fs);
    let meta = RecordingMeta {
        subject_id: spec.subject_id.clone(),
        sampling_rate_hz: fs,
        n_blocks: spec.n_blocks,
        n_targets: freqs_hz.len(),
        n_channels: spec.n_channels,
        n_samples,
        stimulus_freqs_hz: freqs_hz.to_vec(),
        stimulus_phases_rad: phases_rad.to_vec(),
        channel_names: spec.channel_names.clone(),
        cue_duration_s: spec.cue_duration_s,
        visual_latency_s: spec.visual_latency_s,
    };
    meta.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let mut data = Vec::with_capacity(meta.tensor_len());
    let mut harmonics = vec![0.0; spec.harmonic_amplitudes.len()];
    for _block in 0..spec.n_blocks {
        for &f in freqs_hz {
            for mixing in &spec.channel_mixing {
                for n in 0..n_samples {
                    let mut v = 0.0;
                    if n >= onset {
                        let t = (n - onset) as f64 / fs;
                        for (k, h) in harmonics.iter_mut().enumerate() {
                            let degree = (k + 1) as f64;
                            *h = spec.harmonic_amplitudes[k]
                                * (2.0 * PI * degree * f * t + spec.harmonic_phases[k]).sin();
                        }
                        v = mixing.iter().zip(&harmonics).map(|(m, h)| m * h).sum();
                    }
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v as f32);
                }
            }
        }
    }
    SsvepArchive::new(meta, data)
}

/// Absolute combination weights of one channel after the 3-combination
/// retrain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeight {
    pub channel: String,
    pub weights: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ImportanceOutcome {
    pub weights: Vec<ChannelWeight>,
    pub training: StageOutcome,
}

pub const IMPORTANCE_COMBINATIONS: usize = 3;

/// Trains the network with only three channel combinations on every block
/// of every archive and reports `|w2|` per channel.
pub fn channel_importance(
    archives: &[SsvepArchive],
    duration_s: f64,
    bank: &FilterBankSpec,
    stage1: &StageConfig,
) -> Result<ImportanceOutcome> {
    let first = archives
        .first()
        .ok_or_else(|| Error::Argument("channel importance needs at least one archive".into()))?;
    let names = first.meta().channel_names.clone();
    for a in archives {
        ensure!(
            a.meta().channel_names == names,
            Argument,
            "archive {} has a different channel set",
            a.meta().subject_id
        );
    }
    let sets = archives
        .iter()
        .map(|a| dataset::extract_epochs(a, duration_s))
        .collect::<Result<Vec<_>>>()?;
    let pooled = dataset::merge_trialsets(&sets)?;
    let stacks = filterbank::make_stacks(&pooled, bank)?;
    let config = NetworkConfig::new(
        pooled.n_channels,
        pooled.n_samples,
        bank.n_subbands,
        pooled.n_classes,
    )?
    .with_combinations(IMPORTANCE_COMBINATIONS)?;
    let init = network::init_params(
        &config,
        &mut ChaCha8Rng::seed_from_u64(training::init_seed(stage1.seed)),
    );
    let examples = Examples::from_trials(&pooled, &stacks)?;
    let outcome = training::train_stage(&examples, init, stage1)?;
    Ok(ImportanceOutcome {
        weights: combination_weights(&outcome.params, &names),
        training: outcome,
    })
}

/// Per-channel absolute layer-2 weights and their sum.
pub fn combination_weights(params: &Parameters, channel_names: &[String]) -> Vec<ChannelWeight> {
    let k = params.config().n_combinations;
    params
        .w2
        .chunks_exact(k)
        .zip(channel_names)
        .map(|(row, name)| {
            let weights: Vec<f64> = row.iter().map(|w| w.abs()).collect();
            ChannelWeight {
                channel: name.clone(),
                total: weights.iter().sum(),
                weights,
            }
        })
        .collect()
}

pub fn importance_csv(weights: &[ChannelWeight]) -> String {
    let k = weights.first().map_or(0, |w| w.weights.len());
    let mut s = String::from("channel");
    for i in 1..=k {
        write!(s, ",w{i}").unwrap();
    }
    s.push_str(",sum\n");
    for w in weights {
        s.push_str(&w.channel);
        for v in &w.weights {
            write!(s, ",{v:.9}").unwrap();
        }
        writeln!(s, ",{:.9}", w.total).unwrap();
    }
    s
}
