use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub ks: Vec<usize>,
    pub inertias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowChoice {
    pub k: usize,
    /// True when no point stands out from the chord; `k` is then the smallest k.
    pub no_knee: bool,
    pub distance: f64,
}

/// Below this normalised chord distance a curve counts as having no knee.
pub const MIN_KNEE_DISTANCE: f64 = 0.01;

/// Picks the k farthest from the chord joining the first and last points of
/// the curve after scaling both axes to [0, 1].
pub fn elbow_select(curve: &ElbowCurve) -> Result<ElbowChoice> {
    let n = curve.ks.len();
    if n != curve.inertias.len() {
        return Err(Error::shape("elbow curve: ks and inertias differ in length"));
    }
    if n < 3 {
        return Err(Error::precondition(format!("elbow needs at least 3 points, got {n}")));
    }
    if curve.ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::precondition("elbow curve: ks must be strictly increasing"));
    }
    let (k0, k1) = (curve.ks[0] as f64, curve.ks[n - 1] as f64);
    let lo = curve.inertias.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = curve.inertias.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = ElbowChoice {
        k: curve.ks[0],
        no_knee: true,
        distance: 0.0,
    };
    if hi - lo <= 0.0 {
        return Ok(flat);
    }
    let pts: Vec<(f64, f64)> = curve
        .ks
        .iter()
        .zip(&curve.inertias)
        .map(|(&k, &i)| ((k as f64 - k0) / (k1 - k0), (i - lo) / (hi - lo)))
        .collect();
    let (x0, y0) = pts[0];
    let (x1, y1) = pts[n - 1];
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = flat;
    for (i, &(x, y)) in pts.iter().enumerate() {
        let d = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / len;
        if d > best.distance {
            best = ElbowChoice {
                k: curve.ks[i],
                no_knee: false,
                distance: d,
            };
        }
    }
    if best.distance < MIN_KNEE_DISTANCE {
        return Ok(ElbowChoice { distance: best.distance, ..flat });
    }
    Ok(best)
}
