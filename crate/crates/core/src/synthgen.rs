//! Synthetic production data with known ground truth.
//!
//! Time is cut into regimes of constant feed load. Each regime has a dominant
//! ore type (latent class) that fixes the best setpoint; every camera frame
//! in the regime shows pellets of the dominant type, or of a random other
//! type with probability `instance_noise_rate`. Pellet size and hue depend on
//! the type. Type 0 is an empty belt at setpoint 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_png, RawImage};
use crate::ingest::{format_tons, Minute};
use crate::patch_net::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthScenario {
    pub n_latent_classes: usize,
    /// Best setpoint per latent class, strictly increasing.
    pub setpoints: Vec<f64>,
    pub image_width: usize,
    pub image_height: usize,
    pub pellets_min: usize,
    pub pellets_max: usize,
    pub radius_mean: Vec<f64>,
    pub radius_sigma: f64,
    /// Hue in degrees per latent class.
    pub hue: Vec<f64>,
    pub hue_jitter: f64,
    pub instance_noise_rate: f64,
    /// Probability that a regime runs at a wrong (random other) setpoint.
    pub operator_error_rate: f64,
    /// Number of regimes; each yields one lab result and so one bag.
    pub bags: usize,
    pub regime_minutes: i64,
    pub image_interval: i64,
    pub feed_interval: i64,
    pub lab_latency: i64,
    pub quality_base: f64,
    pub quality_step_penalty: f64,
    pub quality_sigma: f64,
    pub start: String,
    pub seed: u64,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario::desk()
    }
}

impl SynthScenario {
    /// Desk-scale scenario: 6 ore types, 64x64 frames, 300 regimes whose
    /// 20 minute windows hold 10 frames each, 40% instance noise.
    pub fn desk() -> Self {
        SynthScenario {
            n_latent_classes: 6,
            setpoints: vec![0.0, 120.0, 125.0, 130.0, 135.0, 140.0],
            image_width: 64,
            image_height: 64,
            pellets_min: 14,
            pellets_max: 24,
            radius_mean: vec![0.0, 3.0, 4.0, 5.5, 7.0, 9.0],
            radius_sigma: 0.6,
            hue: vec![0.0, 15.0, 50.0, 110.0, 190.0, 260.0],
            hue_jitter: 8.0,
            instance_noise_rate: 0.4,
            operator_error_rate: 0.0,
            bags: 300,
            regime_minutes: 60,
            image_interval: 2,
            feed_interval: 5,
            lab_latency: 90,
            quality_base: 70.0,
            quality_step_penalty: 4.0,
            quality_sigma: 1.0,
            start: "2024-01-01T00:00".into(),
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_latent_classes;
        let bad = |m: String| Err(Error::Config(format!("scenario: {m}")));
        if l < 2 {
            return bad(format!("need at least 2 latent classes, got {l}"));
        }
        if self.setpoints.len() != l || self.radius_mean.len() != l || self.hue.len() != l {
            return bad(format!("setpoints, radius_mean and hue need {l} entries each"));
        }
        if self.setpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("setpoints must be strictly increasing".into());
        }
        for rate in [self.instance_noise_rate, self.operator_error_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("rate {rate} outside [0, 1]"));
            }
        }
        if self.pellets_min > self.pellets_max || self.image_width == 0 || self.image_height == 0 {
            return bad("bad pellet count range or image size".into());
        }
        if self.image_interval <= 0 || self.feed_interval <= 0 || self.regime_minutes <= 0 || self.lab_latency < 0 {
            return bad("intervals must be positive".into());
        }
        if self.bags == 0 {
            return bad("need at least one regime".into());
        }
        if Minute::parse(&self.start).is_none() {
            return bad(format!("bad start time {:?}", self.start));
        }
        Ok(())
    }

    /// Lab quality for a regime run at `actual` when `optimal` was best:
    /// each setpoint step of over-feeding costs `quality_step_penalty`.
    pub fn quality(&self, actual_idx: usize, optimal_idx: usize, noise: f64) -> f64 {
        let over = actual_idx.saturating_sub(optimal_idx) as f64;
        self.quality_base - self.quality_step_penalty * over - noise
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Pellet disks drawn for an image, as `(cx, cy, r)`.
pub fn pellet_layout(latent: usize, sc: &SynthScenario, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    if sc.radius_mean[latent] <= 0.0 {
        return Vec::new();
    }
    let n = rng.random_range(sc.pellets_min..=sc.pellets_max);
    let radius = Normal::new(sc.radius_mean[latent], sc.radius_sigma.max(1e-9)).expect("finite sigma");
    let (w, h) = (sc.image_width as f64, sc.image_height as f64);
    (0..n)
        .map(|_| {
            let r = radius.sample(rng).max(1.0);
            let cx = if 2.0 * r < w { rng.random_range(r..w - r) } else { w / 2.0 };
            let cy = if 2.0 * r < h { rng.random_range(r..h - r) } else { h / 2.0 };
            (cx, cy, r)
        })
        .collect()
}

/// Renders one frame. Same `(latent, seed)` gives the same pixels.
pub fn gen_image(latent: usize, sc: &SynthScenario, seed: u64) -> Result<RawImage> {
    if latent >= sc.n_latent_classes {
        return Err(Error::precondition(format!("latent {latent} >= {}", sc.n_latent_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sc.image_width, sc.image_height);
    let mut img = RawImage::new(w, h);
    let mut px = vec![[0.0f64; 3]; w * h];
    for p in px.iter_mut() {
        let v = 0.07 + rng.random_range(0.0..0.03);
        *p = [v, v, v * 1.1];
    }
    for (cx, cy, r) in pellet_layout(latent, sc, &mut rng) {
        let hue = sc.hue[latent] + rng.random_range(-sc.hue_jitter..=sc.hue_jitter);
        let sat = rng.random_range(0.55..0.8);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let d2 = (dx * dx + dy * dy) / (r * r);
                if d2 <= 1.0 {
                    // spherical shading, brightest at the centre
                    px[y * w + x] = hsv_to_rgb(hue, sat, 0.45 + 0.45 * (1.0 - d2).sqrt());
                }
            }
        }
    }
    let gain = rng.random_range(0.85..=1.0);
    for y in 0..h {
        for x in 0..w {
            let c = px[y * w + x];
            let q = |v: f64| (v * gain * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put(x, y, [q(c[0]), q(c[1]), q(c[2])]);
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTruth {
    pub regime: usize,
    pub t_start: Minute,
    pub t_end: Minute,
    pub dominant: usize,
    pub optimal_setpoint: f64,
    pub setpoint: f64,
    pub lab_t: Minute,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthLine {
    Instance { image_id: u64, t: Minute, latent: usize },
    Regime(RegimeTruth),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// `(image id, latent)` in image order.
    pub instances: Vec<(u64, usize)>,
    pub regimes: Vec<RegimeTruth>,
}

impl GroundTruth {
    pub fn latent_of(&self, image_id: u64) -> Option<usize> {
        self.instances
            .binary_search_by_key(&image_id, |(id, _)| *id)
            .ok()
            .map(|i| self.instances[i].1)
    }

    /// Best setpoint of the regime running at `t`.
    pub fn optimal_setpoint_at(&self, t: Minute) -> Option<f64> {
        let i = self.regimes.partition_point(|r| r.t_end <= t);
        self.regimes.get(i).filter(|r| r.t_start <= t).map(|r| r.optimal_setpoint)
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut gt = GroundTruth::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TruthLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            match rec {
                TruthLine::Instance { image_id, latent, .. } => gt.instances.push((image_id, latent)),
                TruthLine::Regime(r) => gt.regimes.push(r),
            }
        }
        gt.instances.sort_unstable();
        Ok(gt)
    }
}

struct PlannedImage {
    id: u64,
    t: Minute,
    latent: usize,
}

fn other_than(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    let v = rng.random_range(0..n - 1);
    if v >= not {
        v + 1
    } else {
        v
    }
}

/// Writes `labs.csv`, `feed.csv`, `images.jsonl`, `images/*.png` and
/// `truth.jsonl` into `out`.
pub fn gen_dataset(sc: &SynthScenario, out: &Path) -> Result<GroundTruth> {
    sc.validate()?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let t0 = Minute::parse(&sc.start).expect("validated");
    let l = sc.n_latent_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let quality_noise = Normal::new(0.0, sc.quality_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut labs = String::from("t,quality\n");
    let mut feed = String::from("t,setpoint_tons\n");
    let mut planned = Vec::new();
    let mut gt = GroundTruth::default();
    for r in 0..sc.bags {
        let start = t0.plus(r as i64 * sc.regime_minutes);
        let end = start.plus(sc.regime_minutes);
        let dominant = rng.random_range(0..l);
        let actual = if rng.random::<f64>() < sc.operator_error_rate {
            other_than(&mut rng, l, dominant)
        } else {
            dominant
        };
        let mut t = start;
        while t < end {
            feed.push_str(&format!("{t},{}\n", format_tons(sc.setpoints[actual])));
            t = t.plus(sc.feed_interval);
        }
        let mut t = start;
        while t < end {
            let latent = if rng.random::<f64>() < sc.instance_noise_rate {
                other_than(&mut rng, l, dominant)
            } else {
                dominant
            };
            planned.push(PlannedImage {
                id: planned.len() as u64,
                t,
                latent,
            });
            t = t.plus(sc.image_interval);
        }
        let lab_t = end.plus(sc.lab_latency);
        let q = (sc.quality(actual, dominant, quality_noise.sample(&mut rng)) * 100.0).round() / 100.0;
        labs.push_str(&format!("{lab_t},{q}\n"));
        gt.regimes.push(RegimeTruth {
            regime: r,
            t_start: start,
            t_end: end,
            dominant,
            optimal_setpoint: sc.setpoints[dominant],
            setpoint: sc.setpoints[actual],
            lab_t,
            quality: q,
        });
    }
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("labs.csv", &labs)?;
    write("feed.csv", &feed)?;

    planned.par_iter().try_for_each(|p| {
        let img = gen_image(p.latent, sc, mix_seed(sc.seed, p.id))?;
        save_png(&img, &img_dir.join(format!("{:06}.png", p.id)))
    })?;

    let manifest_path = out.join("images.jsonl");
    let truth_path = out.join("truth.jsonl");
    let mut manifest = BufWriter::new(File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let mut truth = BufWriter::new(File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?);
    for p in &planned {
        let line = serde_json::json!({
            "id": p.id,
            "t": p.t.to_string(),
            "path": format!("images/{:06}.png", p.id),
            "w": sc.image_width,
            "h": sc.image_height,
        });
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
        let tl = TruthLine::Instance {
            image_id: p.id,
            t: p.t,
            latent: p.latent,
        };
        writeln!(truth, "{}", serde_json::to_string(&tl)?).map_err(|e| Error::io(&truth_path, e))?;
        gt.instances.push((p.id, p.latent));
    }
    for r in &gt.regimes {
        writeln!(truth, "{}", serde_json::to_string(&TruthLine::Regime(r.clone()))?).map_err(|e| Error::io(&truth_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    truth.flush().map_err(|e| Error::io(&truth_path, e))?;
    Ok(gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub purity: f64,
    pub adjusted_rand_index: f64,
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Purity maps each predicted label to its most common true class; ARI is
/// the Hubert-Arabie adjusted Rand index.
pub fn oracle_scores(labels: &[usize], truth: &[usize]) -> Result<OracleScores> {
    if labels.len() != truth.len() {
        return Err(Error::shape(format!("{} labels vs {} truth entries", labels.len(), truth.len())));
    }
    if labels.is_empty() {
        return Err(Error::precondition("oracle scores of an empty labelling"));
    }
    let mut table: std::collections::BTreeMap<(usize, usize), u64> = Default::default();
    let mut rows: std::collections::BTreeMap<usize, u64> = Default::default();
    let mut cols: std::collections::BTreeMap<usize, u64> = Default::default();
    for (&a, &b) in labels.iter().zip(truth) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let n = labels.len() as u64;
    let mut best: std::collections::BTreeMap<usize, u64> = Default::default();
    for (&(a, _), &c) in &table {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    let purity = best.values().sum::<u64>() as f64 / n as f64;
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max_index = 0.5 * (sa + sb);
    let ari = if (max_index - expected).abs() < 1e-12 {
        // both partitions trivial in the same way
        if (index - expected).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (index - expected) / (max_index - expected)
    };
    Ok(OracleScores {
        purity,
        adjusted_rand_index: ari,
    })
}
