use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ssvep_core::analysis::SynthSpec;
use ssvep_core::dataset;
use ssvep_core::filterbank::FilterBankSpec;
use ssvep_core::seed;
use ssvep_core::training::StageConfig;

/// Either a named set (`"9"`, `"all"`, ...) or explicit channel names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelChoice {
    Named(String),
    List(Vec<String>),
}

impl Default for ChannelChoice {
    fn default() -> Self {
        ChannelChoice::Named("all".into())
    }
}

impl ChannelChoice {
    /// Command-line form: a set name, or a comma-separated list of channels.
    pub fn parse(arg: &str) -> Self {
        if arg.contains(',') {
            ChannelChoice::List(arg.split(',').map(|s| s.trim().to_string()).collect())
        } else {
            ChannelChoice::Named(arg.to_string())
        }
    }

    /// `None` keeps every channel.
    pub fn resolve(&self) -> Result<Option<Vec<String>>> {
        match self {
            ChannelChoice::List(names) if names.is_empty() => bail!("empty channel list"),
            ChannelChoice::List(names) => Ok(Some(names.clone())),
            ChannelChoice::Named(n) if matches!(n.as_str(), "all" | "64") => Ok(None),
            ChannelChoice::Named(n) => match dataset::named_channel_set(n) {
                Some(set) => Ok(Some(set.iter().map(|s| s.to_string()).collect())),
                // a single channel given by name
                None => Ok(Some(vec![n.clone()])),
            },
        }
    }
}

/// Synthetic cohort: one spec per subject sharing a frequency layout.
/// `reversed` subjects get the frequencies in reverse target order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCohort {
    pub freqs_hz: Vec<f64>,
    #[serde(default)]
    pub phases_rad: Vec<f64>,
    pub subjects: Vec<SynthSpec>,
    #[serde(default)]
    pub reversed: Vec<String>,
}

impl SynthCohort {
    /// Two four-channel subjects with 8 targets at 8..15 Hz; the second one
    /// maps the frequencies to targets in reverse order.
    pub fn demo(seed: u64) -> Self {
        let subject = |id: &str, k: u64| SynthSpec {
            subject_id: id.into(),
            n_channels: 4,
            sampling_rate_hz: 250.0,
            trial_duration_s: 1.5,
            cue_duration_s: 0.5,
            visual_latency_s: 0.14,
            harmonic_amplitudes: vec![1.0, 0.6, 0.3],
            harmonic_phases: vec![0.0, 0.7, 1.4],
            noise_std: 1.0,
            channel_mixing: vec![
                vec![1.0, 0.5, 0.2],
                vec![0.8, 0.7, 0.3],
                vec![0.5, 0.4, 0.6],
                vec![0.2, 0.3, 0.1],
            ],
            channel_names: ["POz", "O1", "Oz", "O2"].map(String::from).to_vec(),
            n_blocks: 4,
            seed: seed::derive(seed, &["synth", &k.to_string()]),
        };
        SynthCohort {
            freqs_hz: (8..16).map(f64::from).collect(),
            phases_rad: vec![0.0; 8],
            subjects: vec![subject("S01", 1), subject("S02", 2)],
            reversed: vec!["S02".into()],
        }
    }
}

fn default_subbands() -> usize {
    3
}
fn default_base_freq() -> f64 {
    8.0
}
fn default_durations() -> Vec<f64> {
    vec![0.4]
}
fn default_stage1() -> StageConfig {
    StageConfig::benchmark_stage1(0)
}
fn default_stage2() -> StageConfig {
    StageConfig::benchmark_stage2(0)
}
fn default_gaze_shift() -> f64 {
    0.5
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subject archives, relative to the config file.
    #[serde(default)]
    pub archives: Vec<PathBuf>,
    #[serde(default)]
    pub channels: ChannelChoice,
    #[serde(default = "default_subbands")]
    pub n_subbands: usize,
    #[serde(default = "default_base_freq")]
    pub base_freq_hz: f64,
    #[serde(default = "default_durations")]
    pub durations_s: Vec<f64>,
    #[serde(default = "default_stage1")]
    pub stage1: StageConfig,
    #[serde(default = "default_stage2")]
    pub stage2: StageConfig,
    #[serde(default = "default_gaze_shift")]
    pub gaze_shift_s: f64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: Option<SynthCohort>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for a in &mut cfg.archives {
            if a.is_relative() {
                *a = base.join(&*a);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subbands == 0 {
            bail!("n_subbands must be at least 1");
        }
        if self.durations_s.is_empty() || self.durations_s.iter().any(|d| !(*d > 0.0)) {
            bail!("durations_s must be a nonempty list of positive values");
        }
        if !(self.gaze_shift_s >= 0.0) {
            bail!("gaze_shift_s must be nonnegative");
        }
        self.channels.resolve()?;
        Ok(())
    }

    pub fn bank(&self) -> FilterBankSpec {
        FilterBankSpec::new(self.n_subbands, self.base_freq_hz)
    }

    /// Stage configs with seeds derived from the global seed and `command`.
    pub fn stages_for(&self, command: &str) -> (StageConfig, StageConfig) {
        (
            self.stage1
                .with_seed(seed::derive(self.seed, &[command, "stage1"])),
            self.stage2
                .with_seed(seed::derive(self.seed, &[command, "stage2"])),
        )
    }

    pub fn require_archives(&self) -> Result<()> {
        if self.archives.is_empty() {
            bail!("the config lists no archives");
        }
        Ok(())
    }

    pub fn single_duration(&self) -> Result<f64> {
        match self.durations_s.as_slice() {
            [d] => Ok(*d),
            other => bail!(
                "this command trains at one duration, got {} ({other:?})",
                other.len()
            ),
        }
    }
}

pub fn parse_durations(arg: &str) -> Result<Vec<f64>> {
    arg.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad duration `{s}`"))
        })
        .collect()
}
