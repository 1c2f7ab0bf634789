//! Accuracy, information transfer rate and the leave-one-block-out protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, SsvepArchive, TrialSet};
use crate::error::{ensure, Error, Result};
use crate::filterbank::{self, FilterBankSpec, SubbandStack};
use crate::network::{self, NetworkConfig, Parameters};
use crate::seed;
use crate::training::{self, Checkpoint, Examples, Provenance, StageConfig};

pub const GAZE_SHIFT_S: f64 = 0.5;

fn xlog2x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Information transfer rate in bits per minute for accuracy `p` over `m`
/// classes with `t_total_s` seconds per selection.
pub fn itr_bits_per_min(p: f64, m: usize, t_total_s: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&p), Argument, "accuracy {p} outside [0, 1]");
    ensure!(m >= 2, Argument, "ITR needs at least 2 classes");
    ensure!(t_total_s > 0.0, Argument, "selection time must be positive");
    let m_f = m as f64;
    let bits = if p == 1.0 {
        m_f.log2()
    } else {
        m_f.log2() + xlog2x(p) + (1.0 - p) * ((1.0 - p) / (m_f - 1.0)).log2()
    };
    Ok(bits * 60.0 / t_total_s)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(!labels.is_empty(), Argument, "accuracy of an empty set");
    ensure!(
        preds.len() == labels.len(),
        Argument,
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn add(&mut self, label: usize, pred: usize) -> Result<()> {
        ensure!(
            label < self.n_classes && pred < self.n_classes,
            Argument,
            "class ({label}, {pred}) outside [0, {})",
            self.n_classes
        );
        self.counts[label][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.n_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.n_classes {
            write!(s, ",{j}").unwrap();
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            write!(s, "{i}").unwrap();
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    ensure!(preds.len() == labels.len(), Argument, "length mismatch");
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(l, p)?;
    }
    Ok(cm)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`; zero
/// for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub durations_s: Vec<f64>,
    /// `None` keeps every channel.
    pub channels: Option<Vec<String>>,
    pub bank: FilterBankSpec,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub gaze_shift_s: f64,
    /// Keep every trained model in the report (memory heavy on real data).
    pub keep_models: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDetail {
    pub subject_id: String,
    pub fold_accuracies: Vec<f64>,
    pub accuracy: f64,
    pub itr_bits_per_min: f64,
    pub global_fold_accuracies: Vec<f64>,
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationReport {
    pub duration_s: f64,
    pub n_channels: usize,
    pub n_subbands: usize,
    pub mean_acc: f64,
    pub acc_se: f64,
    pub mean_itr: f64,
    pub itr_se: f64,
    pub mean_global_acc: f64,
    pub confusion: ConfusionMatrix,
    pub subjects: Vec<SubjectDetail>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub gaze_shift_s: f64,
    pub rows: Vec<DurationReport>,
    /// Trained models keyed by duration row, when requested.
    #[serde(skip)]
    pub models: Vec<Vec<Checkpoint>>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("duration_s,mean_acc,acc_se,mean_itr,itr_se\n");
        for r in &self.rows {
            writeln!(
                s,
                "{:.2},{:.6},{:.6},{:.6},{:.6}",
                r.duration_s, r.mean_acc, r.acc_se, r.mean_itr, r.itr_se
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Accuracy table in percent, one row per duration, labelled like
    /// `9 channels, 3 sub-bands, T=0.40 s`.
    pub fn accuracy_table_csv(&self, dataset: &str) -> String {
        let mut s = String::from("setting,dataset,mean_acc_pct,acc_se_pct,cell\n");
        for r in &self.rows {
            let (m, e) = (100.0 * r.mean_acc, 100.0 * r.acc_se);
            writeln!(
                s,
                "\"{} channels, {} sub-bands, T={:.2} s\",{dataset},{m:.2},{e:.2},{m:.2}±{e:.2}",
                r.n_channels, r.n_subbands, r.duration_s
            )
            .unwrap();
        }
        s
    }
}

struct PreparedSubject {
    subject_id: String,
    trials: TrialSet,
    stacks: Vec<SubbandStack>,
}

impl PreparedSubject {
    fn examples_where(&self, keep: impl Fn(usize) -> bool) -> Examples<'_> {
        let (stacks, labels) = self
            .trials
            .trials
            .iter()
            .zip(&self.stacks)
            .filter(|(t, _)| keep(t.block))
            .map(|(t, s)| (s, t.label))
            .unzip();
        Examples::new(stacks, labels).expect("aligned by construction")
    }
}

struct FoldOutcome {
    /// Per subject: (fine-tuned preds, global preds, labels).
    per_subject: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>,
    models: Vec<Checkpoint>,
}

fn check_archives(archives: &[SsvepArchive]) -> Result<()> {
    let first = archives
        .first()
        .ok_or_else(|| Error::Argument("no archives to evaluate".into()))?
        .meta();
    let mut seen = std::collections::BTreeSet::new();
    for a in archives {
        let m = a.meta();
        ensure!(
            m.n_targets == first.n_targets
                && m.sampling_rate_hz == first.sampling_rate_hz
                && m.channel_names == first.channel_names
                && m.n_blocks == first.n_blocks,
            Argument,
            "archive {} disagrees with {} on targets, rate, channels or block count",
            m.subject_id,
            first.subject_id
        );
        ensure!(
            seen.insert(m.subject_id.clone()),
            Argument,
            "duplicate subject id {}",
            m.subject_id
        );
    }
    Ok(())
}

fn duration_tag(t: f64) -> String {
    format!("T{t:.3}")
}

/// Leave-one-block-out evaluation over every duration. For each fold the
/// global model is trained on the training blocks of all subjects, then
/// fine-tuned per subject and scored on that subject's held-out block.
pub fn run_protocol(archives: &[SsvepArchive], cfg: &ProtocolConfig) -> Result<EvalReport> {
    check_archives(archives)?;
    ensure!(!cfg.durations_s.is_empty(), Argument, "no durations requested");
    let meta = archives[0].meta();
    let n_classes = meta.n_targets;
    let plan = dataset::plan_leave_one_block_out(meta.n_blocks)?;

    let mut rows = Vec::with_capacity(cfg.durations_s.len());
    let mut models = Vec::new();
    for &duration in &cfg.durations_s {
        let subjects = archives
            .iter()
            .map(|a| {
                let mut trials = dataset::extract_epochs(a, duration)?;
                if let Some(names) = &cfg.channels {
                    trials = dataset::select_channels(&trials, names)?;
                }
                let stacks = filterbank::make_stacks(&trials, &cfg.bank)?;
                Ok(PreparedSubject {
                    subject_id: a.meta().subject_id.clone(),
                    trials,
                    stacks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkConfig::new(
            subjects[0].trials.n_channels,
            subjects[0].trials.n_samples,
            cfg.bank.n_subbands,
            n_classes,
        )?;

        let run_fold = |fold: &dataset::Fold| -> Result<FoldOutcome> {
            let test = fold.test_block;
            let mut global = Examples::new(Vec::new(), Vec::new())?;
            let mut per_subject = BTreeMap::new();
            for s in &subjects {
                let ex = s.examples_where(|b| b != test);
                global.extend(&ex);
                per_subject.insert(s.subject_id.clone(), ex);
            }
            let fold_tag = format!("fold{test}");
            let dtag = duration_tag(duration);
            let stage1 = cfg
                .stage1
                .with_seed(seed::derive(cfg.stage1.seed, &["stage1", &dtag, &fold_tag]));
            let stage2 = cfg
                .stage2
                .with_seed(seed::derive(cfg.stage2.seed, &["stage2", &dtag, &fold_tag]));
            let trained = training::two_stage_train(&net, &global, &per_subject, &stage1, &stage2)?;

            let mut per = Vec::with_capacity(subjects.len());
            let mut kept = Vec::new();
            if cfg.keep_models {
                kept.push(Checkpoint {
                    config: net,
                    stage_config: stage1,
                    params: trained.global.params.clone(),
                    provenance: Provenance {
                        stage: "global".into(),
                        subject_id: "global".into(),
                        fold: Some(test),
                        final_loss: trained.global.final_loss(),
                    },
                });
            }
            for s in &subjects {
                let tuned = &trained.subjects[&s.subject_id];
                let test_ex = s.examples_where(|b| b == test);
                let preds = predict_all(&tuned.params, test_ex.stacks())?;
                let global_preds = predict_all(&trained.global.params, test_ex.stacks())?;
                per.push((preds, global_preds, test_ex.labels().to_vec()));
                if cfg.keep_models {
                    kept.push(Checkpoint {
                        config: net,
                        stage_config: stage2.with_seed(training::subject_seed(stage2.seed, &s.subject_id)),
                        params: tuned.params.clone(),
                        provenance: Provenance {
                            stage: "finetune".into(),
                            subject_id: s.subject_id.clone(),
                            fold: Some(test),
                            final_loss: tuned.final_loss(),
                        },
                    });
                }
            }
            Ok(FoldOutcome {
                per_subject: per,
                models: kept,
            })
        };

        #[cfg(feature = "parallel")]
        let folds: Vec<FoldOutcome> = {
            use rayon::prelude::*;
            plan.folds.par_iter().map(run_fold).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let folds: Vec<FoldOutcome> = plan.folds.iter().map(run_fold).collect::<Result<_>>()?;

        let mut confusion_all = ConfusionMatrix::new(n_classes);
        let mut details = Vec::with_capacity(subjects.len());
        for (si, s) in subjects.iter().enumerate() {
            let mut fold_acc = Vec::with_capacity(folds.len());
            let mut global_acc = Vec::with_capacity(folds.len());
            for f in &folds {
                let (preds, gpreds, labels) = &f.per_subject[si];
                fold_acc.push(accuracy(preds, labels)?);
                global_acc.push(accuracy(gpreds, labels)?);
                confusion_all.merge(&confusion(preds, labels, n_classes)?);
            }
            let acc = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
            details.push(SubjectDetail {
                subject_id: s.subject_id.clone(),
                itr_bits_per_min: itr_bits_per_min(acc, n_classes, duration + cfg.gaze_shift_s)?,
                accuracy: acc,
                fold_accuracies: fold_acc,
                global_accuracy: global_acc.iter().sum::<f64>() / global_acc.len() as f64,
                global_fold_accuracies: global_acc,
            });
        }
        let accs: Vec<f64> = details.iter().map(|d| d.accuracy).collect();
        let itrs: Vec<f64> = details.iter().map(|d| d.itr_bits_per_min).collect();
        let globals: Vec<f64> = details.iter().map(|d| d.global_accuracy).collect();
        let (mean_acc, acc_se) = mean_and_se(&accs);
        let (mean_itr, itr_se) = mean_and_se(&itrs);
        rows.push(DurationReport {
            duration_s: duration,
            n_channels: net.n_channels,
            n_subbands: net.n_subbands,
            mean_acc,
            acc_se,
            mean_itr,
            itr_se,
            mean_global_acc: mean_and_se(&globals).0,
            confusion: confusion_all,
            subjects: details,
        });
        models.push(folds.into_iter().flat_map(|f| f.models).collect());
    }
    Ok(EvalReport {
        n_classes,
        gaze_shift_s: cfg.gaze_shift_s,
        rows,
        models: if cfg.keep_models { models } else { Vec::new() },
    })
}

pub fn predict_all(params: &Parameters, stacks: &[&SubbandStack]) -> Result<Vec<usize>> {
    stacks.iter().map(|s| network::predict(params, s)).collect()
}
