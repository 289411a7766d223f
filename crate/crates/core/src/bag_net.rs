//! Bag-level fusion classifier.
//!
//! Each patch's fused feature map is squeezed by a 1x1 convolution and pooled
//! to a short vector. A bag of any size is summarised by the element-wise
//! mean and max of those vectors, and a two-layer classifier maps the summary
//! to a feed-load setpoint. Only real setpoints can come out; classes minted
//! by clustering never reach this model.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{extract_segments, Geometry, PatchImage};

use crate::optimizer::Model;
use crate::patch_net::{argmax, loss, PatchNet};
use crate::tensor::{
    channel_means, conv2d_backward, conv2d_forward, order_free_sum, relu_backward_inplace, relu_inplace,
    softmax, ParamSet, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagNetConfig {
    pub input_channels: usize,
    pub reduced_dim: usize,
    pub hidden_dim: usize,
    pub num_setpoint_classes: usize,
    /// ReLU after the 1x1 reduction. Off only for linearity checks.
    pub reduce_activation: bool,
    /// Fixed multiplier on incoming maps, fitted once from the training set
    /// so the learning rate does not depend on the patch network's scale.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
    /// Training only: each patch of a bag is left out with this probability
    /// (at least one always stays).
    #[serde(default)]
    pub patch_dropout: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl BagNetConfig {
    pub fn new(input_channels: usize, num_setpoint_classes: usize) -> Self {
        BagNetConfig {
            input_channels,
            reduced_dim: 64,
            hidden_dim: 128,
            num_setpoint_classes,
            reduce_activation: true,
            input_scale: 1.0,
            patch_dropout: 0.0,
        }
    }
}

/// Reduced per-patch feature (length `r`). The fusion stage only accepts
/// these, never patch-level class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeature(pub Vec<f64>);

/// One bag's worth of fused patch maps, `[G][h][w]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct BagInput {
    pub maps: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagNet {
    cfg: BagNetConfig,
    setpoints: Vec<f64>,
    params: ParamSet,
}

struct ReduceCache {
    act: Vec<f64>,
    pooled: Vec<f64>,
}

struct Fused {
    reduced: Vec<ReduceCache>,
    summary: Vec<f64>,
    argmax_patch: Vec<usize>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl BagNet {
    /// `setpoints` must be ascending; index `i` is output class `i`.
    pub fn new(cfg: BagNetConfig, setpoints: Vec<f64>, seed: u64) -> Result<BagNet> {
        if cfg.num_setpoint_classes != setpoints.len() || setpoints.is_empty() {
            return Err(Error::precondition(format!(
                "bag net: {} setpoint classes but {} setpoint values",
                cfg.num_setpoint_classes,
                setpoints.len()
            )));
        }
        if setpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::precondition("bag net: setpoints must be strictly ascending"));
        }
        if cfg.reduced_dim == 0 || cfg.hidden_dim == 0 || cfg.input_channels == 0 {
            return Err(Error::precondition("bag net: dimensions must be positive"));
        }
        if !(cfg.input_scale.is_finite() && cfg.input_scale > 0.0) {
            return Err(Error::precondition("bag net: input scale must be positive and finite"));
        }
        if !(0.0..1.0).contains(&cfg.patch_dropout) {
            return Err(Error::precondition("bag net: patch dropout must be in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor {
                shape: shape.to_vec(),
                data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            }
        };
        let (g, r, h, c) = (cfg.input_channels, cfg.reduced_dim, cfg.hidden_dim, cfg.num_setpoint_classes);
        let mut p = ParamSet::new();
        p.push("reduce.w", init(&[r, g, 1, 1], g));
        p.push("reduce.b", Tensor::zeros(&[r]));
        p.push("fc1.w", init(&[h, 2 * r], 2 * r));
        p.push("fc1.b", Tensor::zeros(&[h]));
        p.push("fc2.w", init(&[c, h], h));
        p.push("fc2.b", Tensor::zeros(&[c]));
        Ok(BagNet {
            cfg,
            setpoints,
            params: p,
        })
    }

    pub fn from_params(cfg: BagNetConfig, setpoints: Vec<f64>, params: ParamSet) -> Result<BagNet> {
        let fresh = BagNet::new(cfg, setpoints, 0)?;
        fresh.params.check_layout(&params, "bag net")?;
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(BagNet { params, ..fresh })
    }

    pub fn config(&self) -> &BagNetConfig {
        &self.cfg
    }

    pub fn setpoints(&self) -> &[f64] {
        &self.setpoints
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn scaled<'a>(&self, data: &'a [f64]) -> Cow<'a, [f64]> {
        if self.cfg.input_scale == 1.0 {
            Cow::Borrowed(data)
        } else {
            Cow::Owned(data.iter().map(|v| v * self.cfg.input_scale).collect())
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params.get(name).expect("parameter exists").data
    }

    fn reduce_cached(&self, gfm2: &Tensor) -> Result<ReduceCache> {
        if gfm2.shape.len() != 3 || gfm2.shape[0] != self.cfg.input_channels || gfm2.data.len() != gfm2.shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "bag net expects [{}, h, w] maps, got {:?}",
                self.cfg.input_channels, gfm2.shape
            )));
        }
        let (h, w) = (gfm2.shape[1], gfm2.shape[2]);
        let r = self.cfg.reduced_dim;
        let mut act = conv2d_forward(&self.scaled(&gfm2.data), self.cfg.input_channels, h, w, self.p("reduce.w"), self.p("reduce.b"), r, 1);
        if self.cfg.reduce_activation {
            relu_inplace(&mut act);
        }
        let pooled = channel_means(&act, r, h * w);
        Ok(ReduceCache { act, pooled })
    }

    /// 1x1 convolution to `r` channels, then spatial mean.
    pub fn reduce(&self, gfm2: &Tensor) -> Result<PatchFeature> {
        Ok(PatchFeature(self.reduce_cached(gfm2)?.pooled))
    }

    fn fuse(&self, feats: &[&[f64]]) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>)> {
        if feats.is_empty() {
            return Err(Error::precondition("fuse_predict: bag has no patches"));
        }
        let r = self.cfg.reduced_dim;
        if let Some(bad) = feats.iter().find(|f| f.len() != r) {
            return Err(Error::shape(format!("patch feature of length {}, expected {r}", bad.len())));
        }
        let m = feats.len() as f64;
        let mut summary = vec![0.0; 2 * r];
        let mut argmax_patch = vec![0; r];
        let mut column = vec![0.0; feats.len()];
        for j in 0..r {
            for (slot, f) in column.iter_mut().zip(feats) {
                *slot = f[j];
            }
            let mut best = 0;
            for (i, f) in feats.iter().enumerate() {
                if f[j] > feats[best][j] {
                    best = i;
                }
            }
            summary[r + j] = feats[best][j];
            argmax_patch[j] = best;
            summary[j] = order_free_sum(&mut column) / m;
        }
        let (hd, c) = (self.cfg.hidden_dim, self.cfg.num_setpoint_classes);
        let w1 = self.p("fc1.w");
        let b1 = self.p("fc1.b");
        let mut hidden: Vec<f64> = (0..hd)
            .map(|i| b1[i] + w1[i * 2 * r..(i + 1) * 2 * r].iter().zip(&summary).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        relu_inplace(&mut hidden);
        let w2 = self.p("fc2.w");
        let b2 = self.p("fc2.b");
        let logits: Vec<f64> = (0..c)
            .map(|k| b2[k] + w2[k * hd..(k + 1) * hd].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok((summary, argmax_patch, hidden, logits))
    }

    /// Probabilities over setpoint classes and the recommended setpoint.
    /// Ties go to the lower setpoint.
    pub fn fuse_predict(&self, feats: &[PatchFeature]) -> Result<(Vec<f64>, f64)> {
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.0.as_slice()).collect();
        let (_, _, _, logits) = self.fuse(&refs)?;
        let probs = softmax(&logits);
        let k = argmax(&probs);
        Ok((probs, self.setpoints[k]))
    }

    fn forward_cached(&self, input: &BagInput) -> Result<Fused> {
        let reduced = input
            .maps
            .iter()
            .map(|m| self.reduce_cached(m))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = reduced.iter().map(|r| r.pooled.as_slice()).collect();
        let (summary, argmax_patch, hidden, logits) = self.fuse(&refs)?;
        Ok(Fused {
            reduced,
            summary,
            argmax_patch,
            hidden,
            probs: softmax(&logits),
        })
    }

    pub fn predict_probs(&self, input: &BagInput) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.probs)
    }

    pub fn loss_and_grad(&self, input: &BagInput, label: usize) -> Result<(f64, ParamSet)> {
        let c = self.cfg.num_setpoint_classes;
        if label >= c {
            return Err(Error::precondition(format!("label {label} out of range for {c} setpoint classes")));
        }
        let fc = self.forward_cached(input)?;
        let loss = -fc.probs[label].max(f64::MIN_POSITIVE).ln();
        let mut d_logits = fc.probs.clone();
        d_logits[label] -= 1.0;

        let (r, hd) = (self.cfg.reduced_dim, self.cfg.hidden_dim);
        let mut grads = self.params.zeros_like();
        let w2 = self.p("fc2.w");
        let mut d_hidden = vec![0.0; hd];
        {
            let g = &mut grads.get_mut("fc2.w").expect("grad").data;
            for k in 0..c {
                for i in 0..hd {
                    g[k * hd + i] += d_logits[k] * fc.hidden[i];
                    d_hidden[i] += d_logits[k] * w2[k * hd + i];
                }
            }
        }
        for (b, d) in grads.get_mut("fc2.b").expect("grad").data.iter_mut().zip(&d_logits) {
            *b += d;
        }
        relu_backward_inplace(&mut d_hidden, &fc.hidden);
        let w1 = self.p("fc1.w");
        let mut d_summary = vec![0.0; 2 * r];
        {
            let g = &mut grads.get_mut("fc1.w").expect("grad").data;
            for i in 0..hd {
                if d_hidden[i] == 0.0 {
                    continue;
                }
                for j in 0..2 * r {
                    g[i * 2 * r + j] += d_hidden[i] * fc.summary[j];
                    d_summary[j] += d_hidden[i] * w1[i * 2 * r + j];
                }
            }
        }
        for (b, d) in grads.get_mut("fc1.b").expect("grad").data.iter_mut().zip(&d_hidden) {
            *b += d;
        }
        let m = fc.reduced.len();
        let mut gw = std::mem::take(&mut grads.get_mut("reduce.w").expect("grad").data);
        let mut gb = std::mem::take(&mut grads.get_mut("reduce.b").expect("grad").data);
        for (pi, (cache, map)) in fc.reduced.iter().zip(&input.maps).enumerate() {
            let mut d_pooled: Vec<f64> = d_summary[..r].iter().map(|v| v / m as f64).collect();
            for j in 0..r {
                if fc.argmax_patch[j] == pi {
                    d_pooled[j] += d_summary[r + j];
                }
            }
            let (h, w) = (map.shape[1], map.shape[2]);
            let plane = (h * w) as f64;
            let mut d_act = vec![0.0; r * h * w];
            for j in 0..r {
                let v = d_pooled[j] / plane;
                d_act[j * h * w..(j + 1) * h * w].iter_mut().for_each(|x| *x = v);
            }
            if self.cfg.reduce_activation {
                relu_backward_inplace(&mut d_act, &cache.act);
            }
            conv2d_backward(
                &self.scaled(&map.data),
                self.cfg.input_channels,
                h,
                w,
                self.p("reduce.w"),
                r,
                1,
                &d_act,
                &mut gw,
                &mut gb,
                None,
            );
        }
        grads.get_mut("reduce.w").expect("grad").data = gw;
        grads.get_mut("reduce.b").expect("grad").data = gb;
        Ok((loss, grads))
    }
}

impl Model for BagNet {
    type Input = BagInput;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, input: &BagInput, label: usize, aug: Option<u64>) -> Result<(f64, ParamSet)> {
        match aug {
            Some(seed) if self.cfg.patch_dropout > 0.0 && input.maps.len() > 1 => {
                BagNet::loss_and_grad(self, &drop_patches(input, self.cfg.patch_dropout, seed), label)
            }
            _ => BagNet::loss_and_grad(self, input, label),
        }
    }

    fn predict(&self, input: &BagInput) -> Result<usize> {
        Ok(argmax(&self.forward_cached(input)?.probs))
    }

    fn evaluate(&self, input: &BagInput, label: usize) -> Result<(usize, f64)> {
        let probs = self.forward_cached(input)?.probs;
        Ok((argmax(&probs), loss(&probs, label)?))
    }
}

fn drop_patches(input: &BagInput, p: f64, seed: u64) -> BagInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<bool> = input.maps.iter().map(|_| rng.random::<f64>() >= p).collect();
    let mut maps: Vec<Tensor> = input.maps.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| m.clone()).collect();
    if maps.is_empty() {
        maps.push(input.maps[rng.random_range(0..input.maps.len())].clone());
    }
    BagInput { maps }
}

/// Fused patch maps for a set of patches under a trained patch network.
pub fn patch_maps(tau: &PatchNet, geom: &Geometry, patches: &[PatchImage]) -> Result<Vec<Tensor>> {
    patches
        .iter()
        .map(|p| Ok(tau.forward(&extract_segments(p, geom)?)?.gfm2))
        .collect()
}

/// Recommended feed-load setpoint (tons) for a window of patches.
pub fn predict_window(tau: &PatchNet, omega: &BagNet, geom: &Geometry, patches: &[PatchImage]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::precondition("predict_window: no patches in window"));
    }
    let feats = patch_maps(tau, geom, patches)?
        .iter()
        .map(|m| omega.reduce(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(omega.fuse_predict(&feats)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(activation: bool) -> BagNet {
        let mut cfg = BagNetConfig::new(6, 3);
        cfg.reduced_dim = 4;
        cfg.hidden_dim = 5;
        cfg.reduce_activation = activation;
        BagNet::new(cfg, vec![0.0, 125.0, 130.0], 9).unwrap()
    }

    fn map(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            shape: vec![6, side, side],
            data: (0..6 * side * side).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn reduce_shape_and_bias_only_output() {
        let n = net(true);
        for side in [1, 3, 5] {
            assert_eq!(n.reduce(&map(side as u64, side)).unwrap().0.len(), 4);
        }
        let zero = Tensor::zeros(&[6, 2, 2]);
        let out = n.reduce(&zero).unwrap().0;
        let bias = n.params().get("reduce.b").unwrap().data.clone();
        assert_eq!(out, bias.iter().map(|b| b.max(0.0)).collect::<Vec<_>>());
        let bad = Tensor::zeros(&[5, 2, 2]);
        assert!(matches!(n.reduce(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_is_linear_without_activation() {
        let mut n = net(false);
        n.params_mut().get_mut("reduce.b").unwrap().data.iter_mut().for_each(|b| *b = 0.3);
        let x = map(4, 3);
        let a = 2.5;
        let scaled = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v * a).collect() };
        let bias = 0.3;
        let rx = n.reduce(&x).unwrap().0;
        let rax = n.reduce(&scaled).unwrap().0;
        for (p, q) in rx.iter().zip(&rax) {
            assert!(((q - bias) - a * (p - bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_single_and_duplicates_and_permutations() {
        let n = net(true);
        let feats: Vec<PatchFeature> = (0..5).map(|s| n.reduce(&map(s, 2)).unwrap()).collect();
        let (p1, s1) = n.fuse_predict(&feats[..1]).unwrap();
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let dup = vec![feats[0].clone(); 4];
        let (pd, sd) = n.fuse_predict(&dup).unwrap();
        assert_eq!(s1, sd);
        for (a, b) in p1.iter().zip(&pd) {
            assert!((a - b).abs() < 1e-15);
        }
        let (base, _) = n.fuse_predict(&feats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut perm = feats.clone();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let (p, _) = n.fuse_predict(&perm).unwrap();
            assert_eq!(p, base);
        }
        assert!(n.fuse_predict(&[]).is_err());
    }

    #[test]
    fn ties_go_to_the_lower_setpoint() {
        let mut n = net(true);
        for name in ["fc2.w", "fc2.b"] {
            n.params_mut().get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = n.reduce(&map(1, 2)).unwrap();
        assert_eq!(n.fuse_predict(&[f]).unwrap().1, 0.0);
    }

    #[test]
    fn input_scale_matches_prescaled_maps() {
        let mut cfg = BagNetConfig::new(6, 3);
        cfg.reduced_dim = 4;
        cfg.hidden_dim = 5;
        let plain = BagNet::new(cfg, vec![0.0, 125.0, 130.0], 9).unwrap();
        cfg.input_scale = 0.25;
        let scaled = BagNet::new(cfg, vec![0.0, 125.0, 130.0], 9).unwrap();
        let maps: Vec<Tensor> = (0..3).map(|s| map(30 + s, 2)).collect();
        let pre: Vec<Tensor> = maps
            .iter()
            .map(|m| Tensor { shape: m.shape.clone(), data: m.data.iter().map(|v| v * 0.25).collect() })
            .collect();
        let (la, ga) = scaled.loss_and_grad(&BagInput { maps }, 1).unwrap();
        let (lb, gb) = plain.loss_and_grad(&BagInput { maps: pre }, 1).unwrap();
        assert!((la - lb).abs() < 1e-12);
        for ti in 0..ga.len() {
            for (a, b) in ga.tensor(ti).data.iter().zip(&gb.tensor(ti).data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        cfg.input_scale = 0.0;
        assert!(BagNet::new(cfg, vec![0.0, 125.0], 9).is_err());
    }

    #[test]
    fn dropout_keeps_a_nonempty_subset() {
        let input = BagInput { maps: (0..6).map(|s| map(s, 2)).collect() };
        let mut total = 0;
        for seed in 0..200 {
            let kept = drop_patches(&input, 0.9, seed);
            assert!(!kept.maps.is_empty());
            assert!(kept.maps.iter().all(|m| input.maps.contains(m)));
            total += kept.maps.len();
        }
        assert!(total < 200 * 2, "p=0.9 should drop most patches, kept {total}");
        assert_eq!(drop_patches(&input, 0.0, 3).maps, input.maps);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = net(true);
        let input = BagInput { maps: (0..3).map(|s| map(20 + s, 2)).collect() };
        let (_, g) = n.loss_and_grad(&input, 2).unwrap();
        let eps = 1e-5;
        for ti in 0..n.params().len() {
            for i in 0..n.params().tensor(ti).len() {
                let mut plus = n.clone();
                plus.params_mut().tensor_mut(ti).data[i] += eps;
                let mut minus = n.clone();
                minus.params_mut().tensor_mut(ti).data[i] -= eps;
                let fd = (plus.loss_and_grad(&input, 2).unwrap().0 - minus.loss_and_grad(&input, 2).unwrap().0) / (2.0 * eps);
                let an = g.tensor(ti).data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "tensor {ti}[{i}]: fd {fd} vs {an}");
            }
        }
    }
}
