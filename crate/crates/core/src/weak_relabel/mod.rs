//! Iterative relabelling of weakly labelled patches, then bag-model training.
//!
//! Stage one starts every patch with its bag's setpoint label and trains the
//! patch network on it. Its pooled features are reduced with PCA and
//! clustered; the cluster structure replaces the inherited labels and the
//! network is rebuilt for the new class set. Later rounds relabel with the
//! network's own predictions until few labels move. Stage two freezes the
//! patch network and trains the bag network on its fused feature maps.

pub mod elbow;
pub mod kmeans;
pub mod pca;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag_net::{BagInput, BagNet, BagNetConfig};
use crate::error::{Error, Result};
use crate::imaging::{extract_segments, Geometry, PatchImage};
use crate::ingest::{Bag, ClassId, ClassVocab};
use crate::optimizer::{accuracy, train, Model, TrainConfig, TrainHistory};
use crate::patch_net::{mix_seed, Aggregation, EncoderConfig, PatchClassifier, PatchNet, PatchNetConfig};
use crate::synthgen::oracle_scores;
use crate::tensor::Tensor;

pub use elbow::{elbow_select, ElbowChoice, ElbowCurve};
pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use pca::{fit_pca, PcaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelMode {
    /// Every cluster becomes its own class.
    ClusterId,
    /// Members take their cluster's most common label; impure clusters mint
    /// a new class.
    ClusterMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relabeled {
    pub labels: Vec<ClassId>,
    pub minted: Vec<ClassId>,
    pub change_fraction: f64,
}

/// Most common label (smallest id on ties) and its count.
fn modal(labels: impl IntoIterator<Item = ClassId>) -> (ClassId, usize) {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold((ClassId(0), 0), |best, (l, c)| if c > best.1 { (l, c) } else { best })
}

/// Rewrites labels from cluster assignments.
///
/// Under `ClusterId` the change fraction counts instances whose old label
/// differs from the modal old label of their new cluster, since the class
/// ids themselves are all new.
pub fn relabel(
    assignments: &[usize],
    current: &[ClassId],
    vocab: &mut ClassVocab,
    mode: RelabelMode,
    purity_threshold: f64,
) -> Result<Relabeled> {
    if assignments.len() != current.len() {
        return Err(Error::shape(format!(
            "relabel: {} assignments for {} labels",
            assignments.len(),
            current.len()
        )));
    }
    if current.is_empty() {
        return Err(Error::precondition("relabel: no instances"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        members.entry(a).or_default().push(i);
    }
    let mut labels = current.to_vec();
    let mut minted = Vec::new();
    let mut changed = 0usize;
    for idx in members.values() {
        let (mode_label, count) = modal(idx.iter().map(|&i| current[i]));
        let target = match mode {
            RelabelMode::ClusterId => {
                changed += idx.len() - count;
                let id = vocab.mint();
                minted.push(id);
                id
            }
            RelabelMode::ClusterMode => {
                let target = if (count as f64) / (idx.len() as f64) < purity_threshold {
                    let id = vocab.mint();
                    minted.push(id);
                    id
                } else {
                    mode_label
                };
                changed += idx.iter().filter(|&&i| current[i] != target).count();
                target
            }
        };
        for &i in idx {
            labels[i] = target;
        }
    }
    Ok(Relabeled {
        labels,
        minted,
        change_fraction: changed as f64 / current.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub max_outer_iterations: usize,
    pub epsilon: f64,
    pub mode: RelabelMode,
    pub purity_threshold: f64,
    pub variance_target: f64,
    pub kmeans_restarts: usize,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig {
            k_min: 10,
            k_max: 31,
            max_outer_iterations: 4,
            epsilon: 0.01,
            mode: RelabelMode::ClusterId,
            purity_threshold: 0.5,
            variance_target: 0.95,
            kmeans_restarts: 3,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k_max < self.k_min + 2 {
            return Err(Error::Config(format!(
                "k range [{}, {}] must hold at least 3 values starting at 1 or more",
                self.k_min, self.k_max
            )));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::Config("max_outer_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.purity_threshold) {
            return Err(Error::Config("epsilon and purity_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Patch network shape minus the class count, which stage one decides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchModelSpec {
    pub geometry: Geometry,
    pub encoder: EncoderConfig,
    pub per_class_channels: usize,
    pub aggregation: Aggregation,
    pub augment: bool,
}

impl PatchModelSpec {
    pub fn config(&self, num_classes: usize) -> PatchNetConfig {
        PatchNetConfig {
            num_classes,
            per_class_channels: self.per_class_channels,
            encoder: self.encoder,
            segment_count: self.geometry.segment_count,
            segment_size: self.geometry.segment_size,
            aggregation: self.aggregation,
        }
    }
}

/// Patches entering stage one, in a fixed order.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub ids: Vec<u64>,
    pub patches: Vec<PatchImage>,
    pub labels: Vec<ClassId>,
    pub is_val: Vec<bool>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Instances of `train` then `val` bags, each labelled with its bag's
    /// label. `patch` looks a patch up by image id.
    pub fn from_bags(train: &[Bag], val: &[Bag], mut patch: impl FnMut(u64) -> Result<PatchImage>) -> Result<InstanceSet> {
        let mut set = InstanceSet {
            ids: Vec::new(),
            patches: Vec::new(),
            labels: Vec::new(),
            is_val: Vec::new(),
        };
        for (bags, is_val) in [(train, false), (val, true)] {
            for b in bags {
                for &id in &b.instance_ids {
                    set.ids.push(id);
                    set.patches.push(patch(id)?);
                    set.labels.push(b.label);
                    set.is_val.push(is_val);
                }
            }
        }
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let n = self.ids.len();
        if self.patches.len() != n || self.labels.len() != n || self.is_val.len() != n {
            return Err(Error::shape("instance set columns differ in length"));
        }
        if !self.is_val.iter().any(|v| *v) || self.is_val.iter().all(|v| *v) {
            return Err(Error::precondition("stage one needs both training and validation instances"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub val_accuracy: f64,
    pub num_classes: usize,
    pub selected_k: Option<usize>,
    pub no_knee: bool,
    pub pca_components: Option<usize>,
    pub label_change_fraction: Option<f64>,
    pub minted_classes: usize,
    pub epochs_trained: usize,
    pub purity: Option<f64>,
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneReport {
    pub iterations: Vec<IterationReport>,
    pub converged: bool,
    pub elbow_curve: Option<ElbowCurve>,
}

#[derive(Debug, Clone)]
pub struct StageOneOutput {
    pub net: PatchNet,
    pub vocab: ClassVocab,
    /// Class id of each network output.
    pub classes: Vec<ClassId>,
    pub labels: Vec<ClassId>,
    /// Labels before the first round and after every round.
    pub label_history: Vec<Vec<ClassId>>,
    pub report: StageOneReport,
}

#[derive(Serialize)]
struct AuditLine {
    iteration: usize,
    instance_id: u64,
    old_label: ClassId,
    new_label: ClassId,
    cluster: Option<usize>,
}

fn class_list(labels: &[ClassId]) -> Vec<ClassId> {
    labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

fn index_of(classes: &[ClassId]) -> HashMap<ClassId, usize> {
    classes.iter().enumerate().map(|(i, c)| (*c, i)).collect()
}

/// Trains `model` on the current labels. Returns validation accuracy and
/// epochs run.
fn fit(model: &mut PatchClassifier, set: &InstanceSet, labels: &[ClassId], classes: &[ClassId], cfg: &TrainConfig) -> Result<TrainHistory> {
    let idx = index_of(classes);
    let mut tr = Vec::new();
    let mut va = Vec::new();
    for (i, p) in set.patches.iter().enumerate() {
        let pair = (p, idx[&labels[i]]);
        if set.is_val[i] {
            va.push(pair);
        } else {
            tr.push(pair);
        }
    }
    train(model, &tr, &va, cfg, None)
}

fn features(model: &PatchClassifier, set: &InstanceSet) -> Result<Vec<Vec<f64>>> {
    set.patches
        .par_iter()
        .map(|p| Ok(model.net.extract_features(&model.segments(p, None)?)?.0))
        .collect()
}

fn scores(labels: &[ClassId], truth: Option<&[usize]>) -> Result<(Option<f64>, Option<f64>)> {
    match truth {
        Some(t) => {
            let l: Vec<usize> = labels.iter().map(|c| c.0 as usize).collect();
            let s = oracle_scores(&l, t)?;
            Ok((Some(s.purity), Some(s.adjusted_rand_index)))
        }
        None => Ok((None, None)),
    }
}

fn audit_round(
    out: &mut Option<&mut dyn Write>,
    iteration: usize,
    set: &InstanceSet,
    old: &[ClassId],
    new: &[ClassId],
    clusters: Option<&[usize]>,
) -> Result<()> {
    if let Some(w) = out.as_deref_mut() {
        for i in 0..set.len() {
            let line = AuditLine {
                iteration,
                instance_id: set.ids[i],
                old_label: old[i],
                new_label: new[i],
                cluster: clusters.map(|c| c[i]),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("relabel audit log", e))?;
        }
    }
    Ok(())
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::TrainingAborted(m) => Error::TrainingAborted(format!("stage one iteration {iteration}: {m}")),
        other => other,
    }
}

/// Runs the relabelling loop. `truth`, when given, holds each instance's
/// planted class and fills the purity/ARI columns of the report.
#[allow(clippy::too_many_arguments)]
pub fn stage_one(
    set: &InstanceSet,
    vocab: &ClassVocab,
    spec: &PatchModelSpec,
    train_cfg: &TrainConfig,
    cfg: &RelabelConfig,
    seed: u64,
    truth: Option<&[usize]>,
    mut audit: Option<&mut dyn Write>,
) -> Result<StageOneOutput> {
    cfg.validate()?;
    set.check()?;
    if truth.is_some_and(|t| t.len() != set.len()) {
        return Err(Error::shape("truth length differs from instance count"));
    }
    let mut vocab = vocab.clone();
    let mut labels = set.labels.clone();
    let mut classes = class_list(&labels);
    if classes.len() < 2 {
        return Err(Error::precondition("stage one needs at least two distinct bag labels"));
    }
    let mut model = PatchClassifier {
        net: PatchNet::new(spec.config(classes.len()), mix_seed(seed, 0))?,
        geometry: spec.geometry,
        augment: spec.augment,
    };
    let tc = TrainConfig { seed: mix_seed(seed, 100), ..*train_cfg };
    let hist = fit(&mut model, set, &labels, &classes, &tc).map_err(|e| with_iteration(e, 0))?;
    let (purity, ari) = scores(&labels, truth)?;
    let mut report = StageOneReport {
        iterations: vec![IterationReport {
            iteration: 0,
            val_accuracy: hist.best_val_accuracy,
            num_classes: classes.len(),
            selected_k: None,
            no_knee: false,
            pca_components: None,
            label_change_fraction: None,
            minted_classes: 0,
            epochs_trained: hist.epochs.len(),
            purity,
            ari,
        }],
        converged: false,
        elbow_curve: None,
    };
    let mut history = vec![labels.clone()];

    for it in 1..=cfg.max_outer_iterations {
        let mut entry = IterationReport {
            iteration: it,
            val_accuracy: 0.0,
            num_classes: 0,
            selected_k: None,
            no_knee: false,
            pca_components: None,
            label_change_fraction: None,
            minted_classes: 0,
            epochs_trained: 0,
            purity: None,
            ari: None,
        };
        let (new_labels, change) = if it == 1 {
            let feats = features(&model, set)?;
            let pca = fit_pca(&feats, cfg.variance_target)?;
            let reduced: Vec<Vec<f64>> = feats.iter().map(|f| pca.transform(f)).collect();
            let k_hi = cfg.k_max.min(set.len());
            let mut curve = ElbowCurve { ks: Vec::new(), inertias: Vec::new() };
            let mut fits = Vec::new();
            for k in cfg.k_min..=k_hi {
                let r = kmeans_restarts(&reduced, k, mix_seed(seed, 1000 + k as u64), cfg.kmeans_restarts)?;
                curve.ks.push(k);
                curve.inertias.push(r.inertia);
                fits.push(r);
            }
            let choice = elbow_select(&curve)?;
            let chosen = &fits[choice.k - cfg.k_min];
            let r = relabel(&chosen.assignments, &labels, &mut vocab, cfg.mode, cfg.purity_threshold)?;
            audit_round(&mut audit, it, set, &labels, &r.labels, Some(&chosen.assignments))?;
            entry.selected_k = Some(choice.k);
            entry.no_knee = choice.no_knee;
            entry.pca_components = Some(pca.n_components());
            entry.minted_classes = r.minted.len();
            report.elbow_curve = Some(curve);
            (r.labels, r.change_fraction)
        } else {
            let preds = set
                .patches
                .par_iter()
                .map(|p| model.predict(p))
                .collect::<Result<Vec<_>>>()?;
            let new: Vec<ClassId> = preds.iter().map(|&p| classes[p]).collect();
            let changed = new.iter().zip(&labels).filter(|(a, b)| a != b).count();
            audit_round(&mut audit, it, set, &labels, &new, None)?;
            (new, changed as f64 / set.len() as f64)
        };
        entry.label_change_fraction = Some(change);
        let mut new_classes = class_list(&new_labels);
        if new_classes.len() < 2 {
            // a collapse to one label keeps the old outputs so the head stays a classifier
            new_classes.extend(classes.iter().copied());
            new_classes.sort_unstable();
            new_classes.dedup();
        }
        let settled = change < cfg.epsilon;
        if new_classes != classes {
            // the class set changed: start from fresh weights
            classes = new_classes;
            model.net = PatchNet::new(spec.config(classes.len()), mix_seed(seed, it as u64))?;
        }
        labels = new_labels;
        if settled && entry.minted_classes == 0 {
            entry.val_accuracy = {
                let idx = index_of(&classes);
                let va: Vec<(&PatchImage, usize)> = set
                    .patches
                    .iter()
                    .zip(&labels)
                    .zip(&set.is_val)
                    .filter(|(_, v)| **v)
                    .map(|((p, l), _)| (p, idx[l]))
                    .collect();
                accuracy(&model, &va)?
            };
        } else {
            let tc = TrainConfig { seed: mix_seed(seed, 100 + it as u64), ..*train_cfg };
            let hist = fit(&mut model, set, &labels, &classes, &tc).map_err(|e| with_iteration(e, it))?;
            entry.val_accuracy = hist.best_val_accuracy;
            entry.epochs_trained = hist.epochs.len();
        }
        entry.num_classes = classes.len();
        let (purity, ari) = scores(&labels, truth)?;
        entry.purity = purity;
        entry.ari = ari;
        report.iterations.push(entry);
        history.push(labels.clone());
        if settled {
            report.converged = true;
            break;
        }
    }
    Ok(StageOneOutput {
        net: model.net,
        vocab,
        classes,
        labels,
        label_history: history,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BagModelSpec {
    pub reduced_dim: usize,
    pub hidden_dim: usize,
    pub patch_dropout: f64,
}

impl Default for BagModelSpec {
    fn default() -> Self {
        BagModelSpec {
            reduced_dim: 64,
            hidden_dim: 128,
            patch_dropout: 0.0,
        }
    }
}

/// Fused patch maps keyed by image id, computed once per patch network.
pub fn patch_map_cache(
    tau: &PatchNet,
    geom: &Geometry,
    ids: &[u64],
    mut patch: impl FnMut(u64) -> Result<PatchImage>,
) -> Result<HashMap<u64, Tensor>> {
    let mut unique: Vec<u64> = ids.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let patches = unique.iter().map(|&id| patch(id)).collect::<Result<Vec<_>>>()?;
    let maps = patches
        .par_iter()
        .map(|p| Ok(tau.forward(&extract_segments(p, geom)?)?.gfm2))
        .collect::<Result<Vec<_>>>()?;
    Ok(unique.into_iter().zip(maps).collect())
}

/// Bag inputs with their setpoint-class index.
pub fn bag_samples(bags: &[Bag], maps: &HashMap<u64, Tensor>, vocab: &ClassVocab) -> Result<Vec<(BagInput, usize)>> {
    bags.iter()
        .map(|b| {
            if !vocab.is_setpoint(b.label) {
                return Err(Error::precondition(format!("bag {} is not labelled with a setpoint", b.id)));
            }
            let maps = b
                .instance_ids
                .iter()
                .map(|id| {
                    maps.get(id)
                        .cloned()
                        .ok_or_else(|| Error::precondition(format!("no feature map for image {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((BagInput { maps }, b.label.0 as usize))
        })
        .collect()
}

/// Inverse RMS of every training map value, or 1 for all-zero maps.
pub fn input_scale(train_set: &[(BagInput, usize)]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for m in train_set.iter().flat_map(|(x, _)| &x.maps) {
        sum += m.data.iter().map(|v| v * v).sum::<f64>();
        n += m.data.len();
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        1.0 / rms
    } else {
        1.0
    }
}

/// Trains the bag network on a frozen patch network's maps.
pub fn stage_two(
    train_set: &[(BagInput, usize)],
    val_set: &[(BagInput, usize)],
    input_channels: usize,
    vocab: &ClassVocab,
    spec: &BagModelSpec,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(BagNet, TrainHistory)> {
    let mut cfg = BagNetConfig::new(input_channels, vocab.num_setpoints());
    cfg.reduced_dim = spec.reduced_dim;
    cfg.hidden_dim = spec.hidden_dim;
    cfg.input_scale = input_scale(train_set);
    cfg.patch_dropout = spec.patch_dropout;
    let mut net = BagNet::new(cfg, vocab.setpoints().to_vec(), seed)?;
    let tr: Vec<(&BagInput, usize)> = train_set.iter().map(|(x, y)| (x, *y)).collect();
    let va: Vec<(&BagInput, usize)> = val_set.iter().map(|(x, y)| (x, *y)).collect();
    let hist = train(&mut net, &tr, &va, train_cfg, None)?;
    Ok((net, hist))
}
