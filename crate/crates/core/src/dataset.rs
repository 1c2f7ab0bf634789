//! Recording archives, epoch extraction, channel subsetting and
//! leave-one-block-out fold planning.
//!
//! An archive file is laid out as
//!
//! ```text
//! "SSVEPAR1" | u64 LE header length | JSON RecordingMeta | f32 LE tensor
//! ```
//!
//! with the tensor in `[block][target][channel][sample]` row-major order and
//! no trailing bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SSVEPAR1";

/// The 64-electrode montage used by the public benchmark and BETA recordings,
/// in recording order.
pub const MONTAGE_64: [&str; 64] = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "FT7", "FC5",
    "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8",
    "M1", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "M2", "P7", "P5", "P3", "P1", "PZ",
    "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1", "OZ", "O2", "CB2",
];

/// Occipital/parietal channels conventionally used by SSVEP spellers.
pub const CHANNELS_9: [&str; 9] = ["Pz", "PO3", "PO5", "PO4", "PO6", "POz", "O1", "Oz", "O2"];
pub const CHANNELS_6: [&str; 6] = ["O1", "Oz", "O2", "POz", "PO3", "PO4"];
pub const CHANNELS_3: [&str; 3] = ["O1", "Oz", "O2"];

/// Resolves a named channel set (`3`, `6`, `9`, `occipital`, `all`).
/// Returns `None` for `all` (meaning "keep every channel") and for unknown
/// names the caller should treat as a single explicit channel.
pub fn named_channel_set(name: &str) -> Option<&'static [&'static str]> {
    match name.to_ascii_lowercase().as_str() {
        "3" | "o3" | "occipital3" => Some(&CHANNELS_3),
        "6" | "six" => Some(&CHANNELS_6),
        "9" | "nine" | "occipital" => Some(&CHANNELS_9),
        "64" | "all" => Some(&MONTAGE_64),
        _ => None,
    }
}

/// Converts a duration in seconds to a sample count, rounding half away from
/// zero.
pub fn seconds_to_samples(seconds: f64, sampling_rate_hz: f64) -> usize {
    (seconds * sampling_rate_hz).round().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingMeta {
    pub subject_id: String,
    pub sampling_rate_hz: f64,
    pub n_blocks: usize,
    pub n_targets: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub stimulus_freqs_hz: Vec<f64>,
    pub stimulus_phases_rad: Vec<f64>,
    pub channel_names: Vec<String>,
    pub cue_duration_s: f64,
    pub visual_latency_s: f64,
}

impl RecordingMeta {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0,
            Data,
            "sampling rate must be positive, got {}",
            self.sampling_rate_hz
        );
        ensure!(
            self.n_blocks > 0 && self.n_targets > 0 && self.n_channels > 0 && self.n_samples > 0,
            Data,
            "archive dimensions must be positive: {}x{}x{}x{}",
            self.n_blocks,
            self.n_targets,
            self.n_channels,
            self.n_samples
        );
        ensure!(
            self.stimulus_freqs_hz.len() == self.n_targets
                && self.stimulus_phases_rad.len() == self.n_targets,
            Data,
            "expected {} stimulus frequencies and phases, got {} and {}",
            self.n_targets,
            self.stimulus_freqs_hz.len(),
            self.stimulus_phases_rad.len()
        );
        ensure!(
            self.channel_names.len() == self.n_channels,
            Data,
            "expected {} channel names, got {}",
            self.n_channels,
            self.channel_names.len()
        );
        ensure!(
            self.stimulus_freqs_hz.iter().all(|f| f.is_finite() && *f > 0.0),
            Data,
            "stimulus frequencies must be positive"
        );
        ensure!(
            self.stimulus_phases_rad.iter().all(|p| p.is_finite()),
            Data,
            "stimulus phases must be finite"
        );
        for (i, a) in self.stimulus_freqs_hz.iter().enumerate() {
            ensure!(
                !self.stimulus_freqs_hz[i + 1..].contains(a),
                Data,
                "duplicate stimulus frequency {a} Hz"
            );
        }
        ensure!(
            self.cue_duration_s >= 0.0 && self.visual_latency_s >= 0.0,
            Data,
            "cue duration and visual latency must be nonnegative"
        );
        Ok(())
    }

    pub fn tensor_len(&self) -> usize {
        self.n_blocks * self.n_targets * self.n_channels * self.n_samples
    }
}

/// One subject's raw recordings, `[block][target][channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsvepArchive {
    meta: RecordingMeta,
    data: Vec<f32>,
}

impl SsvepArchive {
    pub fn new(meta: RecordingMeta, data: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        ensure!(
            data.len() == meta.tensor_len(),
            Shape,
            "tensor has {} values, metadata implies {}",
            data.len(),
            meta.tensor_len()
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self { meta, data })
    }

    pub fn meta(&self) -> &RecordingMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, block: usize, target: usize, channel: usize) -> usize {
        let m = &self.meta;
        ((block * m.n_targets + target) * m.n_channels + channel) * m.n_samples
    }

    /// The raw samples of one channel of one trial.
    pub fn series(&self, block: usize, target: usize, channel: usize) -> &[f32] {
        let start = self.offset(block, target, channel);
        &self.data[start..start + self.meta.n_samples]
    }

    pub fn get(&self, block: usize, target: usize, channel: usize, sample: usize) -> f32 {
        self.data[self.offset(block, target, channel) + sample]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Ok(io::join_container(ARCHIVE_MAGIC, &header, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::split_container(bytes, ARCHIVE_MAGIC)?;
        let meta: RecordingMeta =
            serde_json::from_slice(header).map_err(|e| Error::Corruption(format!("archive header: {e}")))?;
        meta.validate()?;
        let expected = meta.tensor_len() * 4;
        if payload.len() != expected {
            return Err(Error::Corruption(format!(
                "tensor payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(meta, data)
    }
}

pub fn read_archive(path: &Path) -> Result<SsvepArchive> {
    SsvepArchive::from_bytes(&io::read_file(path)?)
}

pub fn write_archive(archive: &SsvepArchive, path: &Path) -> Result<()> {
    // `SsvepArchive` can only be built through `new`, which already
    // validated it; recheck anyway since the tensor is cheap to scan.
    if archive.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("refusing to write non-finite samples".into()));
    }
    io::write_atomic(path, &archive.to_bytes()?)
}

/// One epoched trial: a `C x N` row-major matrix and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub epoch: Vec<f64>,
    pub label: usize,
    pub subject_id: String,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub channel_names: Vec<String>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Trials whose block index satisfies `keep`, cloned into a new set.
    pub fn filter_blocks(&self, keep: impl Fn(usize) -> bool) -> TrialSet {
        TrialSet {
            trials: self.trials.iter().filter(|t| keep(t.block)).cloned().collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> TrialSet {
        TrialSet {
            trials: Vec::new(),
            duration_s: self.duration_s,
            sampling_rate_hz: self.sampling_rate_hz,
            n_channels: self.n_channels,
            n_samples: self.n_samples,
            n_classes: self.n_classes,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Cuts one epoch per (block, target), starting after the cue and the
/// visual latency.
pub fn extract_epochs(archive: &SsvepArchive, duration_s: f64) -> Result<TrialSet> {
    let m = archive.meta();
    ensure!(
        duration_s.is_finite() && duration_s > 0.0,
        Argument,
        "epoch duration must be positive, got {duration_s}"
    );
    let start = seconds_to_samples(m.cue_duration_s + m.visual_latency_s, m.sampling_rate_hz);
    let len = seconds_to_samples(duration_s, m.sampling_rate_hz);
    ensure!(
        len > 0,
        Range,
        "duration {duration_s} s is shorter than one sample"
    );
    ensure!(
        start + len <= m.n_samples,
        Range,
        "window [{start}, {}) exceeds the {}-sample trial",
        start + len,
        m.n_samples
    );
    let mut trials = Vec::with_capacity(m.n_blocks * m.n_targets);
    for block in 0..m.n_blocks {
        for target in 0..m.n_targets {
            let mut epoch = Vec::with_capacity(m.n_channels * len);
            for ch in 0..m.n_channels {
                let series = archive.series(block, target, ch);
                epoch.extend(series[start..start + len].iter().map(|&v| f64::from(v)));
            }
            trials.push(Trial {
                epoch,
                label: target,
                subject_id: m.subject_id.clone(),
                block,
            });
        }
    }
    Ok(TrialSet {
        trials,
        duration_s,
        sampling_rate_hz: m.sampling_rate_hz,
        n_channels: m.n_channels,
        n_samples: len,
        n_classes: m.n_targets,
        channel_names: m.channel_names.clone(),
    })
}

fn find_channel(available: &[String], name: &str) -> Option<usize> {
    available.iter().position(|c| c == name).or_else(|| {
        let mut hits = available
            .iter()
            .enumerate()
            .filter(|(_, c)| c.eq_ignore_ascii_case(name));
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    })
}

/// Resolves channel names to row indices. Exact matches win; otherwise a
/// unique case-insensitive match is accepted (`Oz` vs `OZ`).
pub fn channel_indices<S: AsRef<str>>(available: &[String], names: &[S]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| find_channel(available, n.as_ref()).ok_or_else(|| Error::Lookup(n.as_ref().into())))
        .collect()
}

/// Restricts every epoch to the named channels, in the given order.
pub fn select_channels<S: AsRef<str>>(trials: &TrialSet, names: &[S]) -> Result<TrialSet> {
    ensure!(!names.is_empty(), Argument, "empty channel selection");
    let rows = channel_indices(&trials.channel_names, names)?;
    let n = trials.n_samples;
    let selected = trials
        .trials
        .iter()
        .map(|t| {
            let mut epoch = Vec::with_capacity(rows.len() * n);
            for &r in &rows {
                epoch.extend_from_slice(&t.epoch[r * n..(r + 1) * n]);
            }
            Trial { epoch, ..t.clone() }
        })
        .collect();
    Ok(TrialSet {
        trials: selected,
        n_channels: rows.len(),
        channel_names: rows.iter().map(|&r| trials.channel_names[r].clone()).collect(),
        ..trials.empty_like()
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test_block: usize,
    pub train_blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

pub fn plan_leave_one_block_out(n_blocks: usize) -> Result<FoldPlan> {
    ensure!(
        n_blocks >= 2,
        Argument,
        "leave-one-block-out needs at least 2 blocks, got {n_blocks}"
    );
    Ok(FoldPlan {
        folds: (0..n_blocks)
            .map(|test_block| Fold {
                test_block,
                train_blocks: (0..n_blocks).filter(|&b| b != test_block).collect(),
            })
            .collect(),
    })
}

/// Concatenates trial sets that share channel count, epoch length and class
/// count, keeping subject and block provenance.
pub fn merge_trialsets(sets: &[TrialSet]) -> Result<TrialSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Argument("nothing to merge".into()))?;
    for s in &sets[1..] {
        ensure!(
            s.n_channels == first.n_channels
                && s.n_samples == first.n_samples
                && s.n_classes == first.n_classes,
            Argument,
            "cannot merge sets shaped C={} N={} M={} and C={} N={} M={}",
            first.n_channels,
            first.n_samples,
            first.n_classes,
            s.n_channels,
            s.n_samples,
            s.n_classes
        );
    }
    let mut merged = first.empty_like();
    merged.trials = sets.iter().flat_map(|s| s.trials.iter().cloned()).collect();
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(blocks: usize, targets: usize, channels: usize, samples: usize) -> RecordingMeta {
        RecordingMeta {
            subject_id: "S01".into(),
            sampling_rate_hz: 250.0,
            n_blocks: blocks,
            n_targets: targets,
            n_channels: channels,
            n_samples: samples,
            stimulus_freqs_hz: (0..targets).map(|j| 8.0 + 0.2 * j as f64).collect(),
            stimulus_phases_rad: vec![0.0; targets],
            channel_names: (0..channels).map(|c| format!("C{c}")).collect(),
            cue_duration_s: 0.5,
            visual_latency_s: 0.14,
        }
    }

    fn ramp_archive(blocks: usize, targets: usize, channels: usize, samples: usize) -> SsvepArchive {
        let m = meta(blocks, targets, channels, samples);
        let data = (0..m.tensor_len()).map(|i| i as f32).collect();
        SsvepArchive::new(m, data).unwrap()
    }

    #[test]
    fn minimal_archive_round_trip() {
        let mut m = meta(1, 1, 1, 4);
        m.cue_duration_s = 0.0;
        m.visual_latency_s = 0.0;
        let a = SsvepArchive::new(m, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let back = SsvepArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn header_payload_mismatch_is_corruption() {
        let a = ramp_archive(1, 1, 1, 4);
        let mut m2 = a.meta().clone();
        m2.n_channels = 2;
        m2.channel_names.push("C1".into());
        let header = serde_json::to_vec(&m2).unwrap();
        let payload: Vec<u8> = a.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = io::join_container(ARCHIVE_MAGIC, &header, &payload);
        assert!(matches!(
            SsvepArchive::from_bytes(&bytes),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = ramp_archive(1, 1, 1, 4).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(SsvepArchive::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let m = meta(1, 1, 1, 4);
        assert!(matches!(
            SsvepArchive::new(m.clone(), vec![0.0, f32::NAN, 0.0, 0.0]),
            Err(Error::Data(_))
        ));
        // a NaN smuggled into the payload is caught on read as well
        let mut bytes = SsvepArchive::new(m, vec![0.0; 4]).unwrap().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(SsvepArchive::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn duplicate_frequencies_rejected() {
        let mut m = meta(1, 2, 1, 4);
        m.stimulus_freqs_hz = vec![8.0, 8.0];
        assert!(SsvepArchive::new(m, vec![0.0; 8]).is_err());
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn tensor_index_formula() {
        let a = ramp_archive(2, 3, 4, 5);
        // ((b*T + t)*C + c)*N + n
        assert_eq!(a.get(1, 2, 3, 4), (((1 * 3 + 2) * 4 + 3) * 5 + 4) as f32);
    }

    #[test]
    fn benchmark_epoch_window() {
        let a = ramp_archive(1, 2, 1, 1500);
        let ts = extract_epochs(&a, 0.4).unwrap();
        assert_eq!(ts.n_samples, 100);
        assert_eq!(ts.trials[0].epoch[0], 160.0);
        assert_eq!(ts.trials[0].epoch[99], 259.0);
        assert_eq!(ts.trials[1].label, 1);
    }

    #[test]
    fn full_remaining_window_ends_at_last_sample() {
        let a = ramp_archive(1, 1, 1, 1500);
        let ts = extract_epochs(&a, (1500.0 - 160.0) / 250.0).unwrap();
        assert_eq!(*ts.trials[0].epoch.last().unwrap(), 1499.0);
        assert!(matches!(extract_epochs(&a, 5.4), Err(Error::Range(_))));
    }

    #[test]
    fn label_balance() {
        let a = ramp_archive(6, 5, 2, 400);
        let ts = extract_epochs(&a, 0.5).unwrap();
        for label in 0..5 {
            assert_eq!(ts.trials.iter().filter(|t| t.label == label).count(), 6);
        }
    }

    #[test]
    fn channel_selection() {
        let mut m = meta(1, 1, 64, 300);
        m.channel_names = MONTAGE_64.iter().map(|s| s.to_string()).collect();
        let data = (0..m.tensor_len()).map(|i| i as f32).collect();
        let a = SsvepArchive::new(m, data).unwrap();
        let ts = extract_epochs(&a, 0.4).unwrap();
        let nine = select_channels(&ts, &CHANNELS_9).unwrap();
        assert_eq!(nine.n_channels, 9);
        assert_eq!(nine.channel_names[0], "PZ");
        assert_eq!(nine.channel_names[8], "O2");
        // first sample of Pz row equals channel 47's first epoch sample
        assert_eq!(nine.trials[0].epoch[0], (47 * 300 + 160) as f64);

        let all: Vec<String> = ts.channel_names.clone();
        assert_eq!(select_channels(&ts, &all).unwrap(), ts);
        assert!(matches!(select_channels(&ts, &["XX"]), Err(Error::Lookup(_))));
    }

    #[test]
    fn fold_plans() {
        let p = plan_leave_one_block_out(2).unwrap();
        assert_eq!(
            p.folds,
            vec![
                Fold {
                    test_block: 0,
                    train_blocks: vec![1]
                },
                Fold {
                    test_block: 1,
                    train_blocks: vec![0]
                }
            ]
        );
        let p6 = plan_leave_one_block_out(6).unwrap();
        assert_eq!(p6.folds.len(), 6);
        assert!(p6.folds.iter().all(|f| f.train_blocks.len() == 5));
        assert!(plan_leave_one_block_out(1).is_err());
    }

    #[test]
    fn merging() {
        let a = extract_epochs(&ramp_archive(2, 3, 2, 300), 0.4).unwrap();
        assert_eq!(merge_trialsets(std::slice::from_ref(&a)).unwrap(), a);
        let b = extract_epochs(&ramp_archive(2, 3, 2, 300), 0.5).unwrap();
        assert!(matches!(
            merge_trialsets(&[a.clone(), b]),
            Err(Error::Argument(_))
        ));
        let sets: Vec<TrialSet> = (0..35).map(|_| a.clone()).collect();
        assert_eq!(merge_trialsets(&sets).unwrap().len(), 35 * 6);
    }
}
