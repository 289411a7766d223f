//! Production log loading and bag assembly.
//!
//! Three timestamped series come off the plant: delayed lab quality results,
//! per-minute feed-load readings, and per-minute conveyor images. A lab result
//! at time `t` grades material that was on the belt roughly `n` minutes
//! earlier, so each qualifying result becomes a bag holding every image from
//! the window that ends `n` minutes before it, labelled with the setpoint that
//! dominated that window.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use ordered_float::OrderedFloat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minutes since the Unix epoch. Sub-minute information is floored away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Minute(pub i64);

impl Minute {
    pub fn parse(s: &str) -> Option<Minute> {
        let s = s.trim();
        let formats = [
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%dT%H:%M:%S%.f",
            "%Y-%m-%d %H:%M",
            "%Y-%m-%d %H:%M:%S",
        ];
        let s = s.strip_suffix('Z').unwrap_or(s);
        let dt = formats
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())?;
        let dt = dt.with_second(0)?.with_nanosecond(0)?;
        Some(Minute(dt.and_utc().timestamp().div_euclid(60)))
    }

    pub fn plus(self, minutes: i64) -> Minute {
        Minute(self.0 + minutes)
    }

    pub fn minus(self, minutes: i64) -> Minute {
        Minute(self.0 - minutes)
    }
}

impl fmt::Display for Minute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid epoch");
        let dt = epoch + chrono::Duration::minutes(self.0);
        write!(f, "{}", dt.format("%Y-%m-%dT%H:%M"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabSample {
    pub t: Minute,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedReading {
    pub t: Minute,
    /// Tons. Either 0 (empty belt) or inside the controllable range.
    pub setpoint: f64,
}

pub const SETPOINT_MIN: f64 = 120.0;
pub const SETPOINT_MAX: f64 = 146.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub t: Minute,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Default)]
pub struct ProductionLog {
    pub labs: Vec<LabSample>,
    pub feed: Vec<FeedReading>,
    pub images: Vec<ImageRecord>,
}

/// Opaque class identifier. Setpoint classes occupy `0..n_setpoints`; ids
/// minted by clustering are appended after them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocab {
    setpoints: Vec<f64>,
    cluster_classes: Vec<ClassId>,
}

impl ClassVocab {
    /// Builds the setpoint part of the vocabulary. Values are sorted and
    /// deduplicated.
    pub fn from_setpoints(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        ClassVocab {
            setpoints: v,
            cluster_classes: Vec::new(),
        }
    }

    pub fn setpoints(&self) -> &[f64] {
        &self.setpoints
    }

    pub fn num_setpoints(&self) -> usize {
        self.setpoints.len()
    }

    pub fn setpoint_classes(&self) -> Vec<ClassId> {
        (0..self.setpoints.len() as u32).map(ClassId).collect()
    }

    pub fn cluster_classes(&self) -> &[ClassId] {
        &self.cluster_classes
    }

    pub fn len(&self) -> usize {
        self.setpoints.len() + self.cluster_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_of(&self, setpoint: f64) -> Option<ClassId> {
        self.setpoints
            .iter()
            .position(|s| *s == setpoint)
            .map(|i| ClassId(i as u32))
    }

    /// Setpoint value for a setpoint class; `None` for cluster classes.
    pub fn setpoint_of(&self, id: ClassId) -> Option<f64> {
        self.setpoints.get(id.0 as usize).copied()
    }

    pub fn is_setpoint(&self, id: ClassId) -> bool {
        (id.0 as usize) < self.setpoints.len()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.is_setpoint(id) || self.cluster_classes.contains(&id)
    }

    pub fn mint(&mut self) -> ClassId {
        let id = ClassId(self.len() as u32);
        self.cluster_classes.push(id);
        id
    }

    /// Human-readable name: the tonnage for setpoint classes, `C<n>` for
    /// minted ones (numbered from 1 in minting order).
    pub fn name(&self, id: ClassId) -> String {
        match self.setpoint_of(id) {
            Some(s) => format_tons(s),
            None => match self.cluster_classes.iter().position(|c| *c == id) {
                Some(i) => format!("C{}", i + 1),
                None => format!("?{}", id.0),
            },
        }
    }
}

pub fn format_tons(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    /// Index of the originating lab sample in the production log, so the
    /// same lab yields the same id for every window width.
    pub id: u64,
    pub t_start: Minute,
    pub t_end: Minute,
    pub instance_ids: Vec<u64>,
    pub label: ClassId,
    pub setpoint: f64,
    pub lab: LabSample,
    pub latency: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub bag_id: u64,
    pub label: ClassId,
}

/// Instances of `bags`, labelled with their bag's label.
pub fn instances_of(bags: &[Bag]) -> Vec<Instance> {
    bags.iter()
        .flat_map(|b| {
            b.instance_ids.iter().map(move |&id| Instance {
                id,
                bag_id: b.id,
                label: b.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub below_qm: usize,
    pub empty_window: usize,
    pub ambiguous_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleConfig {
    pub n_latency: i64,
    pub window_w: i64,
    pub q_m: f64,
    /// Shifts the window end relative to `lab.t - n_latency`.
    pub window_shift: i64,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        AssembleConfig {
            n_latency: 90,
            window_w: 20,
            q_m: 66.0,
            window_shift: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregated {
    Setpoint(f64),
    Reject,
}

/// Minimum share of readings the modal setpoint needs before a window is
/// given a label.
pub const MODE_DOMINANCE: f64 = 0.8;

/// Collapses a window of feed readings into one setpoint. The modal value
/// wins if it covers at least 80% of the readings; mixed windows are
/// rejected rather than averaged into an off-vocabulary tonnage.
pub fn aggregate_setpoint(readings: &[FeedReading]) -> Result<Aggregated> {
    if readings.is_empty() {
        return Err(Error::precondition("aggregate_setpoint: no readings"));
    }
    let mut counts: BTreeMap<OrderedFloat<f64>, usize> = BTreeMap::new();
    for r in readings {
        *counts.entry(OrderedFloat(r.setpoint)).or_default() += 1;
    }
    // first maximum in ascending setpoint order
    let (mode, n) = counts
        .iter()
        .fold((0.0, 0usize), |(bm, bn), (k, &c)| if c > bn { (k.0, c) } else { (bm, bn) });
    if n as f64 >= MODE_DOMINANCE * readings.len() as f64 {
        Ok(Aggregated::Setpoint(mode))
    } else {
        Ok(Aggregated::Reject)
    }
}

pub fn load_production_logs(
    lab_csv: &Path,
    feed_csv: &Path,
    image_manifest: &Path,
) -> Result<ProductionLog> {
    let labs = read_two_column_csv(lab_csv, "quality")?
        .into_iter()
        .map(|(line, t, quality)| {
            if quality < 0.0 || !quality.is_finite() {
                return Err(Error::Parse {
                    path: lab_csv.display().to_string(),
                    line,
                    msg: format!("quality must be finite and non-negative, got {quality}"),
                });
            }
            Ok((line, LabSample { t, quality }))
        })
        .collect::<Result<Vec<_>>>()?;
    check_increasing(lab_csv, labs.iter().map(|(l, s)| (*l, s.t)))?;

    let feed = read_two_column_csv(feed_csv, "setpoint_tons")?
        .into_iter()
        .map(|(line, t, setpoint)| {
            let ok = setpoint == 0.0 || (SETPOINT_MIN..=SETPOINT_MAX).contains(&setpoint);
            if !ok {
                return Err(Error::Parse {
                    path: feed_csv.display().to_string(),
                    line,
                    msg: format!("setpoint {setpoint} outside {{0}} ∪ [120, 146]"),
                });
            }
            Ok((line, FeedReading { t, setpoint }))
        })
        .collect::<Result<Vec<_>>>()?;
    check_increasing(feed_csv, feed.iter().map(|(l, s)| (*l, s.t)))?;

    let images = read_image_manifest(image_manifest)?;
    check_increasing(image_manifest, images.iter().map(|(l, r)| (*l, r.t)))?;

    Ok(ProductionLog {
        labs: labs.into_iter().map(|(_, s)| s).collect(),
        feed: feed.into_iter().map(|(_, s)| s).collect(),
        images: images.into_iter().map(|(_, r)| r).collect(),
    })
}

/// Loads `labs.csv`, `feed.csv` and `images.jsonl` from one directory.
pub fn load_data_dir(dir: &Path) -> Result<ProductionLog> {
    load_production_logs(
        &dir.join("labs.csv"),
        &dir.join("feed.csv"),
        &dir.join("images.jsonl"),
    )
}

fn read_two_column_csv(path: &Path, value_col: &str) -> Result<Vec<(usize, Minute, f64)>> {
    let pstr = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(&pstr, 1, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&pstr, 1, e))?.clone();
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != value_col {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("expected header `t,{value_col}`"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            csv_err(&pstr, line, e)
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let t = Minute::parse(&rec[0]).ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            line,
            msg: format!("bad timestamp {:?}", &rec[0]),
        })?;
        let v: f64 = rec[1].parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line,
            msg: format!("bad {value_col} {:?}", &rec[1]),
        })?;
        out.push((line, t, v));
    }
    Ok(out)
}

fn csv_err(path: &str, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: e.to_string(),
    }
}

#[derive(Deserialize)]
struct ManifestLine {
    #[serde(default)]
    id: Option<u64>,
    t: String,
    path: PathBuf,
    w: u32,
    h: u32,
}

fn read_image_manifest(path: &Path) -> Result<Vec<(usize, ImageRecord)>> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let t = Minute::parse(&rec.t).ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            line: line_no,
            msg: format!("bad timestamp {:?}", rec.t),
        })?;
        if rec.w == 0 || rec.h == 0 {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: "image dimensions must be positive".into(),
            });
        }
        let resolved = if rec.path.is_absolute() {
            rec.path
        } else {
            base.join(rec.path)
        };
        out.push((
            line_no,
            ImageRecord {
                id: rec.id.unwrap_or(out.len() as u64),
                t,
                path: resolved,
                width: rec.w,
                height: rec.h,
            },
        ));
    }
    Ok(out)
}

fn check_increasing(path: &Path, ts: impl Iterator<Item = (usize, Minute)>) -> Result<()> {
    let mut prev: Option<Minute> = None;
    for (line, t) in ts {
        if let Some(p) = prev {
            if t <= p {
                return Err(Error::Ordering {
                    path: path.display().to_string(),
                    line,
                    msg: if t == p {
                        format!("duplicate timestamp {t}")
                    } else {
                        format!("{t} follows {p}")
                    },
                });
            }
        }
        prev = Some(t);
    }
    Ok(())
}

/// Indices of the time-sorted `ts` that fall in `[start, end)`.
fn window_range(ts: impl Fn(usize) -> Minute, len: usize, start: Minute, end: Minute) -> std::ops::Range<usize> {
    let lo = partition_point(len, |i| ts(i) < start);
    let hi = partition_point(len, |i| ts(i) < end);
    lo..hi.max(lo)
}

fn partition_point(len: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Window `[start, end)` whose end sits `n_latency` minutes before `lab_t`.
pub fn window_for(lab_t: Minute, cfg: &AssembleConfig) -> (Minute, Minute) {
    let end = lab_t.minus(cfg.n_latency).plus(cfg.window_shift);
    (end.minus(cfg.window_w), end)
}

/// Feed readings and images falling inside a window.
pub fn window_contents(log: &ProductionLog, start: Minute, end: Minute) -> (&[FeedReading], &[ImageRecord]) {
    let f = window_range(|i| log.feed[i].t, log.feed.len(), start, end);
    let im = window_range(|i| log.images[i].t, log.images.len(), start, end);
    (&log.feed[f], &log.images[im])
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub bags: Vec<Bag>,
    pub vocab: ClassVocab,
    pub report: DropReport,
}

pub fn assemble_bags(log: &ProductionLog, cfg: &AssembleConfig) -> Result<Assembled> {
    if cfg.n_latency <= 0 || cfg.window_w <= 0 {
        return Err(Error::precondition(
            "assemble_bags: n_latency and window_w must be positive",
        ));
    }
    let mut report = DropReport::default();
    let mut kept: Vec<(u64, Minute, Minute, Vec<u64>, f64, LabSample)> = Vec::new();
    for (idx, lab) in log.labs.iter().enumerate() {
        if lab.quality < cfg.q_m {
            report.below_qm += 1;
            continue;
        }
        let (start, end) = window_for(lab.t, cfg);
        let (feed, images) = window_contents(log, start, end);
        if images.is_empty() {
            report.empty_window += 1;
            continue;
        }
        let setpoint = match feed.is_empty() {
            true => None,
            false => match aggregate_setpoint(feed)? {
                Aggregated::Setpoint(s) => Some(s),
                Aggregated::Reject => None,
            },
        };
        let Some(setpoint) = setpoint else {
            report.ambiguous_label += 1;
            continue;
        };
        kept.push((
            idx as u64,
            start,
            end,
            images.iter().map(|r| r.id).collect(),
            setpoint,
            *lab,
        ));
    }
    let vocab = ClassVocab::from_setpoints(kept.iter().map(|k| k.4));
    let bags = kept
        .into_iter()
        .map(|(id, t_start, t_end, instance_ids, setpoint, lab)| Bag {
            id,
            t_start,
            t_end,
            instance_ids,
            label: vocab.class_of(setpoint).expect("setpoint is in vocab"),
            setpoint,
            lab,
            latency: cfg.n_latency - cfg.window_shift,
        })
        .collect();
    Ok(Assembled {
        bags,
        vocab,
        report,
    })
}

/// Splits at bag level so every instance of a bag lands on the same side.
/// Both sides keep the input order.
pub fn split_bags(bags: &[Bag], ratio: f64, seed: u64) -> Result<(Vec<Bag>, Vec<Bag>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::precondition(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    if bags.len() < 2 {
        return Err(Error::precondition(format!(
            "need at least 2 bags to split, got {}",
            bags.len()
        )));
    }
    let n = bags.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = bags.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(b, _)| b).collect(),
        test.into_iter().map(|(b, _)| b).collect(),
    ))
}

#[derive(Serialize, Deserialize)]
pub struct BagLine {
    pub bag_id: u64,
    pub t_start: String,
    pub t_end: String,
    pub label: f64,
    pub lab_t: String,
    pub lab_q: f64,
    pub instances: Vec<u64>,
}

impl From<&Bag> for BagLine {
    fn from(b: &Bag) -> Self {
        BagLine {
            bag_id: b.id,
            t_start: b.t_start.to_string(),
            t_end: b.t_end.to_string(),
            label: b.setpoint,
            lab_t: b.lab.t.to_string(),
            lab_q: b.lab.quality,
            instances: b.instance_ids.clone(),
        }
    }
}

pub fn write_bags_jsonl(bags: &[Bag], mut out: impl Write) -> std::io::Result<()> {
    for b in bags {
        let line = serde_json::to_string(&BagLine::from(b)).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
