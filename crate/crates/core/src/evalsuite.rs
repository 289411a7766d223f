//! Classification reports, deployment scoring and feature-map exports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Segment;
use crate::ingest::{aggregate_setpoint, format_tons, window_contents, Aggregated, ClassId, ClassVocab, ImageRecord, Minute, ProductionLog};
use crate::patch_net::{argmax, PatchNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: ClassId,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Wrong class taking the largest share of this class's instances.
    pub most_misclassified: Option<(ClassId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub rows: Vec<ClassRow>,
    pub accuracy: f64,
    pub total: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `"0.98 / 0.79 / 0.87"`.
pub fn format_prf(p: f64, r: f64, f: f64) -> String {
    format!("{p:.2} / {r:.2} / {f:.2}")
}

pub fn classification_report(preds: &[ClassId], labels: &[ClassId], vocab: &ClassVocab) -> Result<ClassReport> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::precondition("classification report of an empty set"));
    }
    if let Some(bad) = labels.iter().chain(preds).find(|c| !vocab.contains(**c)) {
        return Err(Error::precondition(format!("class {bad} is not in the vocabulary")));
    }
    let classes: Vec<ClassId> = labels.iter().chain(preds).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let pos = |c: ClassId| classes.binary_search(&c).expect("listed");
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, l) in preds.iter().zip(labels) {
        confusion[pos(*l)][pos(*p)] += 1;
    }
    let rows = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let tp = confusion[i][i];
            let support: usize = confusion[i].iter().sum();
            let predicted: usize = (0..k).map(|r| confusion[r][i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let most_misclassified = (0..k)
                .filter(|&j| j != i && confusion[i][j] > 0)
                .max_by(|&a, &b| confusion[i][a].cmp(&confusion[i][b]).then(b.cmp(&a)))
                .map(|j| (classes[j], ratio(confusion[i][j], support)));
            ClassRow {
                class: c,
                name: vocab.name(c),
                precision,
                recall,
                f1,
                support,
                most_misclassified,
            }
        })
        .collect();
    let correct = (0..k).map(|i| confusion[i][i]).sum();
    Ok(ClassReport {
        rows,
        accuracy: ratio(correct, labels.len()),
        total: labels.len(),
    })
}

impl ClassReport {
    pub fn render(&self, vocab: &ClassVocab) -> String {
        let mut out = String::from("class  P / R / F1            support  most misclassified\n");
        for r in &self.rows {
            let mis = match r.most_misclassified {
                Some((c, f)) => format!("{} ({:.2})", vocab.name(c), f),
                None => "-".into(),
            };
            let flag = if r.support == 0 { " (no support)" } else { "" };
            let _ = writeln!(
                out,
                "{:<6} {:<20}  {:>7}  {}{}",
                r.name,
                format_prf(r.precision, r.recall, r.f1),
                r.support,
                mis,
                flag
            );
        }
        let _ = writeln!(out, "accuracy {:.4} over {}", self.accuracy, self.total);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MpOutcome {
    #[serde(rename = "MP_c")]
    Correct,
    #[serde(rename = "MP_c+")]
    PossibleHigher,
    #[serde(rename = "MP_c-")]
    PossibleLower,
    #[serde(rename = "MP_w")]
    Wrong,
}

impl MpOutcome {
    pub const ALL: [MpOutcome; 4] = [MpOutcome::Correct, MpOutcome::PossibleHigher, MpOutcome::PossibleLower, MpOutcome::Wrong];

    pub fn label(self) -> &'static str {
        match self {
            MpOutcome::Correct => "MP_c",
            MpOutcome::PossibleHigher => "MP_c+",
            MpOutcome::PossibleLower => "MP_c-",
            MpOutcome::Wrong => "MP_w",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Verdict for one lab result. With good quality a prediction at or above
/// the running setpoint is (possibly) right; with failed quality only a
/// lower prediction is.
pub fn mp_classify(q: f64, q_m: f64, s_actual: f64, s_pred: f64) -> MpOutcome {
    if q >= q_m {
        if s_pred == s_actual {
            MpOutcome::Correct
        } else if s_pred > s_actual {
            MpOutcome::PossibleHigher
        } else {
            MpOutcome::Wrong
        }
    } else if s_pred < s_actual {
        MpOutcome::PossibleLower
    } else {
        MpOutcome::Wrong
    }
}

/// Positions where the setpoint differs from the one before.
pub fn count_changes(seq: &[f64]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeployRecord {
    pub lab_t: Minute,
    pub q: f64,
    pub s_actual: f64,
    pub s_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployEvalReport {
    pub counts: [usize; 4],
    pub fractions: [f64; 4],
    pub n_labs: usize,
    pub n_qualified: usize,
    pub human_changes: usize,
    pub model_changes: usize,
    pub throughput_human: f64,
    pub throughput_model: f64,
    pub boost_percent: f64,
}

/// Scores predictions against the running setpoints.
///
/// Throughput crediting is a modelling choice: the operators get the
/// setpoint of every lab that passed; the model gets its prediction for
/// every MP_c, MP_c+ and MP_c- record, the last because lowering the feed
/// may have rescued a failed lab.
pub fn deploy_eval(records: &[DeployRecord], pred_sequence: &[f64], actual_sequence: &[f64], q_m: f64) -> Result<DeployEvalReport> {
    if records.is_empty() {
        return Err(Error::precondition("deploy evaluation needs at least one record"));
    }
    let mut counts = [0usize; 4];
    let mut credited = Vec::new();
    let mut human = Vec::new();
    for r in records {
        let o = mp_classify(r.q, q_m, r.s_actual, r.s_pred);
        counts[o.index()] += 1;
        if o != MpOutcome::Wrong {
            credited.push(r.s_pred);
        }
        if r.q >= q_m {
            human.push(r.s_actual);
        }
    }
    // sorted sums keep totals independent of record order
    let total = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>()
    };
    let throughput_model = total(&mut credited);
    let throughput_human = total(&mut human);
    let n = records.len();
    let boost_percent = if throughput_human > 0.0 {
        100.0 * (throughput_model - throughput_human) / throughput_human
    } else {
        0.0
    };
    Ok(DeployEvalReport {
        counts,
        fractions: counts.map(|c| c as f64 / n as f64),
        n_labs: n,
        n_qualified: records.iter().filter(|r| r.q >= q_m).count(),
        human_changes: count_changes(actual_sequence),
        model_changes: count_changes(pred_sequence),
        throughput_human,
        throughput_model,
        boost_percent,
    })
}

impl DeployEvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in MpOutcome::ALL {
            let _ = writeln!(out, "{:<6} {:>5}  {:>5.1}%", o.label(), self.counts[o.index()], 100.0 * self.fractions[o.index()]);
        }
        let _ = writeln!(out, "labs {} (qualified {})", self.n_labs, self.n_qualified);
        let _ = writeln!(out, "changes: human {}, model {}", self.human_changes, self.model_changes);
        let _ = writeln!(
            out,
            "throughput: human {} t, model {} t, boost {:.1}%",
            format_tons(self.throughput_human),
            format_tons(self.throughput_model),
            self.boost_percent
        );
        out
    }
}

pub fn records_csv(records: &[DeployRecord], q_m: f64) -> String {
    let mut out = String::from("lab_t,Q,s_actual,s_pred,outcome\n");
    for r in records {
        let o = mp_classify(r.q, q_m, r.s_actual, r.s_pred);
        let _ = writeln!(out, "{},{},{},{},{}", r.lab_t, r.q, format_tons(r.s_actual), format_tons(r.s_pred), o.label());
    }
    out
}

/// Window placement for deployment scoring: predictions and the running
/// setpoint both come from the window ending `offset` minutes before the lab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeployWindow {
    pub offset: i64,
    pub window_w: i64,
}

impl Default for DeployWindow {
    fn default() -> Self {
        DeployWindow {
            offset: 120,
            window_w: 20,
        }
    }
}

/// Builds one record per lab whose window has images and an unambiguous
/// setpoint; returns the records and the number of labs skipped.
/// `predict` gets the window's images and returns a setpoint.
pub fn deploy_records(
    log: &ProductionLog,
    win: &DeployWindow,
    mut predict: impl FnMut(Minute, &[ImageRecord]) -> Result<f64>,
) -> Result<(Vec<DeployRecord>, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for lab in &log.labs {
        let end = lab.t.minus(win.offset);
        let (feed, images) = window_contents(log, end.minus(win.window_w), end);
        let actual = match (images.is_empty(), aggregate_setpoint(feed)?) {
            (false, Aggregated::Setpoint(s)) => s,
            _ => {
                skipped += 1;
                continue;
            }
        };
        records.push(DeployRecord {
            lab_t: lab.t,
            q: lab.quality,
            s_actual: actual,
            s_pred: predict(end, images)?,
        });
    }
    Ok((records, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExport {
    pub rows: usize,
    pub bin_edges: Vec<f64>,
    /// Classes without a single true positive.
    pub omitted: Vec<usize>,
}

/// Pooled activations of every head's channel group, per class, for the most
/// and least confident true positive. Writes CSV rows
/// `class,sample,head,bin,bin_lo,bin_hi,count`.
pub fn export_feature_distributions(
    net: &PatchNet,
    samples: &[(Vec<Segment>, usize)],
    class_names: &[String],
    bins: usize,
    out: &Path,
) -> Result<FeatureExport> {
    if samples.is_empty() {
        return Err(Error::precondition("no samples to export"));
    }
    if bins == 0 {
        return Err(Error::precondition("need at least one histogram bin"));
    }
    let c = net.config().num_classes;
    let d = net.config().per_class_channels;
    if class_names.len() != c {
        return Err(Error::shape(format!("{} class names for {c} classes", class_names.len())));
    }
    // (class, best, worst) as (prob, features)
    let mut picks: Vec<Option<((f64, Vec<f64>), (f64, Vec<f64>))>> = vec![None; c];
    for (segs, label) in samples {
        let o = net.forward(segs)?;
        if argmax(&o.probs) != *label {
            continue;
        }
        let feats = net.extract_features(segs)?.0;
        let p = o.probs[*label];
        let slot = &mut picks[*label];
        match slot {
            None => *slot = Some(((p, feats.clone()), (p, feats))),
            Some((best, worst)) => {
                if p > best.0 {
                    *best = (p, feats.clone());
                }
                if p < worst.0 {
                    *worst = (p, feats);
                }
            }
        }
    }
    let all = picks.iter().flatten().flat_map(|(b, w)| b.1.iter().chain(&w.1));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut csv = String::from("class,sample,head,bin,bin_lo,bin_hi,count\n");
    let mut rows = 0;
    let mut omitted = Vec::new();
    for (cls, pick) in picks.iter().enumerate() {
        let Some((best, worst)) = pick else {
            omitted.push(cls);
            continue;
        };
        for (which, feats) in [("best", &best.1), ("worst", &worst.1)] {
            for head in 0..c {
                let mut counts = vec![0usize; bins];
                for v in &feats[head * d..(head + 1) * d] {
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    counts[b] += 1;
                }
                for (b, n) in counts.iter().enumerate() {
                    let _ = writeln!(csv, "{},{which},{head},{b},{},{},{n}", class_names[cls], edges[b], edges[b + 1]);
                    rows += 1;
                }
            }
        }
    }
    if !omitted.is_empty() {
        let names: Vec<&str> = omitted.iter().map(|&i| class_names[i].as_str()).collect();
        let _ = writeln!(csv, "# no true positives for: {}", names.join(" "));
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    Ok(FeatureExport {
        rows,
        bin_edges: edges,
        omitted,
    })
}
