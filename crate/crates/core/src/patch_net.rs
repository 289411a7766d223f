//! Patch-level classifier.
//!
//! Every segment of a patch goes through the same dense-connectivity encoder.
//! The per-segment feature maps are averaged into one global map (so segment
//! order cannot matter), a 1x1 convolution fuses that into `C * d` channels,
//! and the fused map is split into `C` contiguous groups of `d` channels, one
//! per class. Head `c` only ever sees group `c`: it pools the group spatially
//! and applies a linear read-out to get logit `c`.
//!
//! The pooled fused map doubles as the patch feature vector used for
//! clustering, and gradients can be pushed back to the input pixels for
//! saliency maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{apply_augment, extract_segments, AugmentDraw, Geometry, PatchImage, Segment};
use crate::optimizer::Model;
use crate::tensor::{
    avgpool2_backward, avgpool2_forward, channel_means, conv2d_backward, conv2d_forward, order_free_sum,
    relu_backward_inplace, relu_inplace, softmax, ParamSet, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub stem_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            blocks: 3,
            layers_per_block: 4,
            growth: 12,
            stem_channels: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchNetConfig {
    pub num_classes: usize,
    pub per_class_channels: usize,
    pub encoder: EncoderConfig,
    pub segment_count: usize,
    pub segment_size: usize,
    pub aggregation: Aggregation,
}

impl PatchNetConfig {
    pub fn new(num_classes: usize, segment_count: usize, segment_size: usize) -> Self {
        PatchNetConfig {
            num_classes,
            per_class_channels: 60,
            encoder: EncoderConfig::default(),
            segment_count,
            segment_size,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn for_geometry(num_classes: usize, geom: &Geometry) -> Self {
        Self::new(num_classes, geom.segment_count, geom.segment_size)
    }

    /// Channels of the fused map, `C * d`.
    pub fn fused_channels(&self) -> usize {
        self.num_classes * self.per_class_channels
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if self.num_classes < 2 {
            return Err(Error::precondition("patch net needs at least 2 classes"));
        }
        if self.per_class_channels == 0 || self.segment_count == 0 {
            return Err(Error::precondition(
                "per_class_channels and segment_count must be positive",
            ));
        }
        if e.blocks == 0 || e.growth == 0 || e.stem_channels == 0 {
            return Err(Error::precondition("encoder sizes must be positive"));
        }
        // stem pool plus one pool per transition
        if self.segment_size >> e.blocks == 0 {
            return Err(Error::precondition(format!(
                "segment size {} too small for {} downsampling stages",
                self.segment_size, e.blocks
            )));
        }
        Ok(())
    }
}

/// Channel and spatial bookkeeping derived from the config.
#[derive(Debug, Clone)]
struct Plan {
    /// (in channels, spatial side) per block
    blocks: Vec<(usize, usize)>,
    /// (in channels, out channels) per transition
    transitions: Vec<(usize, usize)>,
    out_channels: usize,
    out_side: usize,
}

impl Plan {
    fn new(cfg: &PatchNetConfig) -> Plan {
        let e = &cfg.encoder;
        let mut side = cfg.segment_size / 2;
        let mut ch = e.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..e.blocks {
            blocks.push((ch, side));
            ch += e.layers_per_block * e.growth;
            if b + 1 < e.blocks {
                let out = (ch / 2).max(1);
                transitions.push((ch, out));
                ch = out;
                side /= 2;
            }
        }
        Plan {
            blocks,
            transitions,
            out_channels: ch,
            out_side: side,
        }
    }
}

/// Pooled fused map, length `C * d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutput {
    /// Fused map `[C * d][h][w]`.
    pub gfm2: Tensor,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchNet {
    cfg: PatchNetConfig,
    plan_out: (usize, usize),
    params: ParamSet,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    }
}

struct EncoderCache {
    input: Vec<f64>,
    stem_act: Vec<f64>,
    /// Final concatenated tensor of each block; layer `l` reads its leading
    /// channels and writes the `growth` channels after them.
    block_out: Vec<Vec<f64>>,
    /// Post-activation, pre-pool output of each transition.
    trans_act: Vec<Vec<f64>>,
    output: Vec<f64>,
}

struct ForwardCache {
    segments: Vec<EncoderCache>,
    gfm1: Vec<f64>,
    gfm2: Vec<f64>,
    features: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl PatchNet {
    pub fn new(cfg: PatchNetConfig, seed: u64) -> Result<PatchNet> {
        cfg.validate()?;
        let plan = Plan::new(&cfg);
        let e = &cfg.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("stem.w", he_uniform(&mut rng, &[e.stem_channels, 3, 3, 3], 27));
        p.push("stem.b", Tensor::zeros(&[e.stem_channels]));
        for (b, &(cin, _)) in plan.blocks.iter().enumerate() {
            for l in 0..e.layers_per_block {
                let c = cin + l * e.growth;
                p.push(
                    format!("block{b}.layer{l}.w"),
                    he_uniform(&mut rng, &[e.growth, c, 3, 3], c * 9),
                );
                p.push(format!("block{b}.layer{l}.b"), Tensor::zeros(&[e.growth]));
            }
            if let Some(&(tin, tout)) = plan.transitions.get(b) {
                p.push(format!("trans{b}.w"), he_uniform(&mut rng, &[tout, tin, 1, 1], tin));
                p.push(format!("trans{b}.b"), Tensor::zeros(&[tout]));
            }
        }
        let g = cfg.fused_channels();
        p.push(
            "fusion.w",
            he_uniform(&mut rng, &[g, plan.out_channels, 1, 1], plan.out_channels),
        );
        p.push("fusion.b", Tensor::zeros(&[g]));
        let d = cfg.per_class_channels;
        p.push("heads.w", he_uniform(&mut rng, &[cfg.num_classes, d], d));
        p.push("heads.b", Tensor::zeros(&[cfg.num_classes]));
        Ok(PatchNet {
            cfg,
            plan_out: (plan.out_channels, plan.out_side),
            params: p,
        })
    }

    /// Rebuilds a network around existing parameters (e.g. from a
    /// checkpoint). The layout must match what `new` would produce.
    pub fn from_params(cfg: PatchNetConfig, params: ParamSet) -> Result<PatchNet> {
        let fresh = PatchNet::new(cfg, 0)?;
        fresh.params.check_layout(&params, "patch net")?;
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(PatchNet { params, ..fresh })
    }

    /// Network with hand-set weights in which class `c < 3` responds only to
    /// colour channel `c`: the encoder passes RGB through unchanged (up to
    /// pooling) and fusion group `c` copies channel `c`. Other classes read
    /// nothing. For checking saliency and feature exports.
    pub fn colour_probe(cfg: PatchNetConfig) -> Result<PatchNet> {
        let mut net = PatchNet::new(cfg, 0)?;
        let plan = Plan::new(&cfg);
        if cfg.encoder.stem_channels < 3 || plan.transitions.iter().any(|&(_, out)| out < 3) {
            return Err(Error::precondition("colour probe needs at least 3 channels at every stage"));
        }
        for (_, t) in net.params.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let stem = &mut net.params.get_mut("stem.w").expect("stem").data;
        for c in 0..3 {
            // centre tap of the 3x3 kernel
            stem[(c * 3 + c) * 9 + 4] = 1.0;
        }
        for (b, &(tin, _)) in plan.transitions.iter().enumerate() {
            let w = &mut net.params.get_mut(&format!("trans{b}.w")).expect("transition").data;
            for c in 0..3 {
                w[c * tin + c] = 1.0;
            }
        }
        let (enc_c, _) = net.plan_out;
        let d = cfg.per_class_channels;
        let fusion = &mut net.params.get_mut("fusion.w").expect("fusion").data;
        for c in 0..cfg.num_classes.min(3) {
            for j in 0..d {
                fusion[(c * d + j) * enc_c + c] = 1.0;
            }
        }
        net.params.get_mut("heads.w").expect("heads").data.iter_mut().for_each(|v| *v = 1.0);
        Ok(net)
    }

    pub fn config(&self) -> &PatchNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Encoder output channels and spatial side.
    pub fn encoder_output(&self) -> (usize, usize) {
        self.plan_out
    }

    /// Spatial side of the fused map.
    pub fn gfm2_side(&self) -> usize {
        self.plan_out.1
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params.get(name).expect("parameter exists").data
    }

    fn check_segments(&self, segs: &[Segment]) -> Result<()> {
        if segs.len() != self.cfg.segment_count {
            return Err(Error::shape(format!(
                "expected {} segments, got {}",
                self.cfg.segment_count,
                segs.len()
            )));
        }
        let s = self.cfg.segment_size;
        for (i, seg) in segs.iter().enumerate() {
            if seg.size != s || seg.pixels.len() != 3 * s * s {
                return Err(Error::shape(format!(
                    "segment {i}: expected 3x{s}x{s}, got size {} with {} values",
                    seg.size,
                    seg.pixels.len()
                )));
            }
        }
        Ok(())
    }

    fn encode(&self, input: &[f64]) -> EncoderCache {
        let e = &self.cfg.encoder;
        let plan = Plan::new(&self.cfg);
        let s = self.cfg.segment_size;
        let mut stem_act = conv2d_forward(input, 3, s, s, self.p("stem.w"), self.p("stem.b"), e.stem_channels, 3);
        relu_inplace(&mut stem_act);
        let (mut x, _, _) = avgpool2_forward(&stem_act, e.stem_channels, s, s);
        let mut block_out = Vec::with_capacity(plan.blocks.len());
        let mut trans_act = Vec::with_capacity(plan.transitions.len());
        for (b, &(cin, side)) in plan.blocks.iter().enumerate() {
            let plane = side * side;
            let total = cin + e.layers_per_block * e.growth;
            let mut buf = vec![0.0; total * plane];
            buf[..cin * plane].copy_from_slice(&x);
            for l in 0..e.layers_per_block {
                let c = cin + l * e.growth;
                let mut y = conv2d_forward(
                    &buf[..c * plane],
                    c,
                    side,
                    side,
                    self.p(&format!("block{b}.layer{l}.w")),
                    self.p(&format!("block{b}.layer{l}.b")),
                    e.growth,
                    3,
                );
                relu_inplace(&mut y);
                buf[c * plane..(c + e.growth) * plane].copy_from_slice(&y);
            }
            if let Some(&(tin, tout)) = plan.transitions.get(b) {
                let mut t = conv2d_forward(
                    &buf,
                    tin,
                    side,
                    side,
                    self.p(&format!("trans{b}.w")),
                    self.p(&format!("trans{b}.b")),
                    tout,
                    1,
                );
                relu_inplace(&mut t);
                x = avgpool2_forward(&t, tout, side, side).0;
                trans_act.push(t);
            } else {
                x = buf.clone();
            }
            block_out.push(buf);
        }
        EncoderCache {
            input: input.to_vec(),
            stem_act,
            block_out,
            trans_act,
            output: x,
        }
    }

    /// Accumulates encoder parameter gradients for one segment given the
    /// gradient at its output. Returns the input-pixel gradient when asked.
    fn encode_backward(&self, cache: &EncoderCache, grad_out: &[f64], grads: &mut ParamSet, want_input: bool) -> Option<Vec<f64>> {
        let e = &self.cfg.encoder;
        let plan = Plan::new(&self.cfg);
        let s = self.cfg.segment_size;
        let mut g_x = grad_out.to_vec();
        for b in (0..plan.blocks.len()).rev() {
            let (cin, side) = plan.blocks[b];
            let plane = side * side;
            let total = cin + e.layers_per_block * e.growth;
            let buf = &cache.block_out[b];
            // gradient w.r.t. the whole concatenated block tensor
            let mut g_buf = if let Some(&(tin, tout)) = plan.transitions.get(b) {
                let mut g_t = avgpool2_backward(&g_x, tout, side, side);
                relu_backward_inplace(&mut g_t, &cache.trans_act[b]);
                let mut g_in = vec![0.0; tin * plane];
                let (wn, bn) = (format!("trans{b}.w"), format!("trans{b}.b"));
                let w = self.p(&wn).to_vec();
                let mut gw = std::mem::take(&mut grads.get_mut(&wn).expect("grad").data);
                let mut gb = std::mem::take(&mut grads.get_mut(&bn).expect("grad").data);
                conv2d_backward(buf, tin, side, side, &w, tout, 1, &g_t, &mut gw, &mut gb, Some(&mut g_in));
                grads.get_mut(&wn).expect("grad").data = gw;
                grads.get_mut(&bn).expect("grad").data = gb;
                g_in
            } else {
                debug_assert_eq!(g_x.len(), total * plane);
                g_x
            };
            for l in (0..e.layers_per_block).rev() {
                let c = cin + l * e.growth;
                let mut g_y = g_buf[c * plane..(c + e.growth) * plane].to_vec();
                relu_backward_inplace(&mut g_y, &buf[c * plane..(c + e.growth) * plane]);
                let (wn, bn) = (format!("block{b}.layer{l}.w"), format!("block{b}.layer{l}.b"));
                let mut gw = std::mem::take(&mut grads.get_mut(&wn).expect("grad").data);
                let mut gb = std::mem::take(&mut grads.get_mut(&bn).expect("grad").data);
                conv2d_backward(
                    &buf[..c * plane],
                    c,
                    side,
                    side,
                    self.p(&wn),
                    e.growth,
                    3,
                    &g_y,
                    &mut gw,
                    &mut gb,
                    Some(&mut g_buf[..c * plane]),
                );
                grads.get_mut(&wn).expect("grad").data = gw;
                grads.get_mut(&bn).expect("grad").data = gb;
            }
            g_buf.truncate(cin * plane);
            g_x = g_buf;
        }
        let mut g_stem = avgpool2_backward(&g_x, e.stem_channels, s, s);
        relu_backward_inplace(&mut g_stem, &cache.stem_act);
        let mut gw = std::mem::take(&mut grads.get_mut("stem.w").expect("grad").data);
        let mut gb = std::mem::take(&mut grads.get_mut("stem.b").expect("grad").data);
        let mut g_in = want_input.then(|| vec![0.0; cache.input.len()]);
        conv2d_backward(
            &cache.input,
            3,
            s,
            s,
            self.p("stem.w"),
            e.stem_channels,
            3,
            &g_stem,
            &mut gw,
            &mut gb,
            g_in.as_deref_mut(),
        );
        grads.get_mut("stem.w").expect("grad").data = gw;
        grads.get_mut("stem.b").expect("grad").data = gb;
        g_in
    }

    fn forward_cached(&self, segs: &[Segment]) -> Result<ForwardCache> {
        self.check_segments(segs)?;
        let caches: Vec<EncoderCache> = segs.iter().map(|s| self.encode(&s.pixels)).collect();
        let (c_enc, side) = self.plan_out;
        let plane = side * side;
        let n = c_enc * plane;
        let div = match self.cfg.aggregation {
            Aggregation::Mean => segs.len() as f64,
            Aggregation::Sum => 1.0,
        };
        let mut column = vec![0.0; caches.len()];
        let gfm1: Vec<f64> = (0..n)
            .map(|i| {
                for (slot, c) in column.iter_mut().zip(&caches) {
                    *slot = c.output[i];
                }
                order_free_sum(&mut column) / div
            })
            .collect();
        let g = self.cfg.fused_channels();
        let mut gfm2 = conv2d_forward(&gfm1, c_enc, side, side, self.p("fusion.w"), self.p("fusion.b"), g, 1);
        relu_inplace(&mut gfm2);
        let features = channel_means(&gfm2, g, plane);
        let d = self.cfg.per_class_channels;
        let hw = self.p("heads.w");
        let hb = self.p("heads.b");
        let logits: Vec<f64> = (0..self.cfg.num_classes)
            .map(|c| {
                hb[c]
                    + hw[c * d..(c + 1) * d]
                        .iter()
                        .zip(&features[c * d..(c + 1) * d])
                        .map(|(w, f)| w * f)
                        .sum::<f64>()
            })
            .collect();
        let probs = softmax(&logits);
        Ok(ForwardCache {
            segments: caches,
            gfm1,
            gfm2,
            features,
            logits,
            probs,
        })
    }

    /// Backpropagates `d_logits`; returns parameter gradients and, when
    /// requested, per-segment input gradients.
    fn backward(&self, fc: &ForwardCache, d_logits: &[f64], want_input: bool) -> (ParamSet, Vec<Vec<f64>>) {
        let mut grads = self.params.zeros_like();
        let d = self.cfg.per_class_channels;
        let g = self.cfg.fused_channels();
        let (c_enc, side) = self.plan_out;
        let plane = side * side;
        let hw = self.p("heads.w");
        let mut d_feat = vec![0.0; g];
        {
            let gw = &mut grads.get_mut("heads.w").expect("grad").data;
            for c in 0..self.cfg.num_classes {
                for j in 0..d {
                    gw[c * d + j] += d_logits[c] * fc.features[c * d + j];
                    d_feat[c * d + j] = d_logits[c] * hw[c * d + j];
                }
            }
        }
        {
            let gb = &mut grads.get_mut("heads.b").expect("grad").data;
            for (b, dl) in gb.iter_mut().zip(d_logits) {
                *b += dl;
            }
        }
        let mut d_gfm2 = vec![0.0; g * plane];
        for ch in 0..g {
            let v = d_feat[ch] / plane as f64;
            d_gfm2[ch * plane..(ch + 1) * plane].iter_mut().for_each(|x| *x = v);
        }
        relu_backward_inplace(&mut d_gfm2, &fc.gfm2);
        let mut d_gfm1 = vec![0.0; c_enc * plane];
        {
            let mut gw = std::mem::take(&mut grads.get_mut("fusion.w").expect("grad").data);
            let mut gb = std::mem::take(&mut grads.get_mut("fusion.b").expect("grad").data);
            conv2d_backward(
                &fc.gfm1,
                c_enc,
                side,
                side,
                self.p("fusion.w"),
                g,
                1,
                &d_gfm2,
                &mut gw,
                &mut gb,
                Some(&mut d_gfm1),
            );
            grads.get_mut("fusion.w").expect("grad").data = gw;
            grads.get_mut("fusion.b").expect("grad").data = gb;
        }
        if self.cfg.aggregation == Aggregation::Mean {
            let s = fc.segments.len() as f64;
            d_gfm1.iter_mut().for_each(|v| *v /= s);
        }
        let mut inputs = Vec::new();
        for cache in &fc.segments {
            if let Some(gi) = self.encode_backward(cache, &d_gfm1, &mut grads, want_input) {
                inputs.push(gi);
            }
        }
        (grads, inputs)
    }

    pub fn forward(&self, segs: &[Segment]) -> Result<PatchOutput> {
        let fc = self.forward_cached(segs)?;
        let side = self.plan_out.1;
        Ok(PatchOutput {
            gfm2: Tensor {
                shape: vec![self.cfg.fused_channels(), side, side],
                data: fc.gfm2,
            },
            logits: fc.logits,
            probs: fc.probs,
        })
    }

    /// Spatially pooled fused map; the concatenation of every head's input.
    pub fn extract_features(&self, segs: &[Segment]) -> Result<FeatureVec> {
        Ok(FeatureVec(self.forward_cached(segs)?.features))
    }

    /// Encoder output for each segment, before aggregation.
    pub fn segment_feature_maps(&self, segs: &[Segment]) -> Result<Vec<Vec<f64>>> {
        self.check_segments(segs)?;
        Ok(segs.iter().map(|s| self.encode(&s.pixels).output).collect())
    }

    /// Cross-entropy loss of one example and its parameter gradient.
    pub fn loss_and_grad(&self, segs: &[Segment], label: usize) -> Result<(f64, ParamSet)> {
        if label >= self.cfg.num_classes {
            return Err(Error::precondition(format!(
                "label {label} out of range for {} classes",
                self.cfg.num_classes
            )));
        }
        let fc = self.forward_cached(segs)?;
        let l = loss(&fc.probs, label)?;
        let mut d_logits = fc.probs.clone();
        d_logits[label] -= 1.0;
        let (grads, _) = self.backward(&fc, &d_logits, false);
        Ok((l, grads))
    }

    /// `|d logit[class] / d pixel|` for every segment pixel and channel.
    pub fn saliency(&self, segs: &[Segment], class: usize) -> Result<Vec<Vec<f64>>> {
        if class >= self.cfg.num_classes {
            return Err(Error::precondition(format!("class {class} out of range")));
        }
        Ok(self
            .input_gradient(segs, class)?
            .into_iter()
            .map(|g| g.into_iter().map(f64::abs).collect())
            .collect())
    }

    /// Signed `d logit[class] / d pixel` per segment.
    pub fn input_gradient(&self, segs: &[Segment], class: usize) -> Result<Vec<Vec<f64>>> {
        let fc = self.forward_cached(segs)?;
        let mut d_logits = vec![0.0; self.cfg.num_classes];
        d_logits[class] = 1.0;
        Ok(self.backward(&fc, &d_logits, true).1)
    }
}

/// Negative log-likelihood of `label` under `probs`.
pub fn loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::precondition(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Model for PatchNet {
    type Input = Vec<Segment>;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_grad(&self, input: &Vec<Segment>, label: usize, _aug: Option<u64>) -> Result<(f64, ParamSet)> {
        PatchNet::loss_and_grad(self, input, label)
    }

    fn predict(&self, input: &Vec<Segment>) -> Result<usize> {
        Ok(argmax(&self.forward(input)?.logits))
    }

    fn evaluate(&self, input: &Vec<Segment>, label: usize) -> Result<(usize, f64)> {
        let out = self.forward(input)?;
        Ok((argmax(&out.logits), loss(&out.probs, label)?))
    }
}

/// Patch classifier over whole patch images: cuts segments on the fly and
/// augments them during training.
#[derive(Debug, Clone)]
pub struct PatchClassifier {
    pub net: PatchNet,
    pub geometry: Geometry,
    pub augment: bool,
}

impl PatchClassifier {
    pub fn segments(&self, patch: &PatchImage, aug: Option<u64>) -> Result<Vec<Segment>> {
        let segs = extract_segments(patch, &self.geometry)?;
        Ok(match (self.augment, aug) {
            (true, Some(seed)) => segs
                .iter()
                .enumerate()
                .map(|(k, s)| apply_augment(s, AugmentDraw::from_seed(mix_seed(seed, k as u64))))
                .collect(),
            _ => segs,
        })
    }
}

/// SplitMix64-style combination of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model for PatchClassifier {
    type Input = PatchImage;

    fn params(&self) -> &ParamSet {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    fn loss_and_grad(&self, input: &PatchImage, label: usize, aug: Option<u64>) -> Result<(f64, ParamSet)> {
        self.net.loss_and_grad(&self.segments(input, aug)?, label)
    }

    fn predict(&self, input: &PatchImage) -> Result<usize> {
        Ok(argmax(&self.net.forward(&self.segments(input, None)?)?.logits))
    }

    fn evaluate(&self, input: &PatchImage, label: usize) -> Result<(usize, f64)> {
        Model::evaluate(&self.net, &self.segments(input, None)?, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> PatchNetConfig {
        PatchNetConfig {
            num_classes: 3,
            per_class_channels: 4,
            encoder: EncoderConfig {
                blocks: 2,
                layers_per_block: 2,
                growth: 3,
                stem_channels: 4,
            },
            segment_count: 2,
            segment_size: 16,
            aggregation: Aggregation::Mean,
        }
    }

    fn random_segments(cfg: &PatchNetConfig, seed: u64) -> Vec<Segment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.segment_size;
        (0..cfg.segment_count)
            .map(|k| Segment {
                size: s,
                offset_x: k,
                pixels: (0..3 * s * s).map(|_| rng.random::<f64>()).collect(),
            })
            .collect()
    }

    #[test]
    fn shapes_and_softmax() {
        let cfg = tiny_cfg();
        let net = PatchNet::new(cfg, 1).unwrap();
        let out = net.forward(&random_segments(&cfg, 2)).unwrap();
        assert_eq!(out.gfm2.shape[0], 12);
        assert_eq!(out.logits.len(), 3);
        let s: f64 = out.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn seventeen_classes_give_1020_channels() {
        let mut cfg = PatchNetConfig::for_geometry(17, &Geometry::PLANT);
        cfg.encoder = EncoderConfig { blocks: 1, layers_per_block: 1, growth: 2, stem_channels: 2 };
        assert_eq!(cfg.fused_channels(), 1020);
        let net = PatchNet::new(cfg, 0).unwrap();
        assert_eq!(net.params().get("fusion.w").unwrap().shape[0], 1020);
        assert_eq!(net.params().get("heads.w").unwrap().shape, vec![17, 60]);
    }

    #[test]
    fn wrong_segment_count_is_shape_error() {
        let cfg = tiny_cfg();
        let net = PatchNet::new(cfg, 1).unwrap();
        let mut segs = random_segments(&cfg, 2);
        segs.pop();
        assert!(matches!(net.forward(&segs), Err(Error::Shape(_))));
    }

    #[test]
    fn permutation_gives_bit_identical_logits() {
        let mut cfg = tiny_cfg();
        cfg.segment_count = 4;
        let net = PatchNet::new(cfg, 3).unwrap();
        let segs = random_segments(&cfg, 4);
        let base = net.forward(&segs).unwrap().logits;
        let mut perm = segs.clone();
        perm.reverse();
        perm.swap(0, 2);
        let other = net.forward(&perm).unwrap().logits;
        for (a, b) in base.iter().zip(&other) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn features_are_pooled_head_inputs() {
        let cfg = tiny_cfg();
        let net = PatchNet::new(cfg, 5).unwrap();
        let segs = random_segments(&cfg, 6);
        let out = net.forward(&segs).unwrap();
        let f = net.extract_features(&segs).unwrap();
        assert_eq!(f.0.len(), cfg.fused_channels());
        let plane = out.gfm2.shape[1] * out.gfm2.shape[2];
        for c in 0..cfg.num_classes {
            for j in 0..cfg.per_class_channels {
                let ch = c * cfg.per_class_channels + j;
                let mean = out.gfm2.data[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
                assert!((mean - f.0[ch]).abs() < 1e-12);
            }
        }
        let zero: Vec<Segment> = segs
            .iter()
            .map(|s| Segment { pixels: vec![0.0; s.pixels.len()], ..s.clone() })
            .collect();
        assert_eq!(net.extract_features(&zero).unwrap(), net.extract_features(&zero).unwrap());
    }

    #[test]
    fn shared_encoder_treats_identical_segments_identically() {
        let cfg = tiny_cfg();
        let mut net = PatchNet::new(cfg, 7).unwrap();
        let one = random_segments(&cfg, 8).remove(0);
        let segs = vec![one.clone(), one];
        net.params_mut().get_mut("block0.layer1.w").unwrap().data[5] += 0.3;
        let maps = net.segment_feature_maps(&segs).unwrap();
        assert_eq!(maps[0], maps[1]);
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let u = vec![1.0 / 17.0; 17];
        assert!((loss(&u, 3).unwrap() - 17f64.ln()).abs() < 1e-12);
        assert!((loss(&u, 3).unwrap() - 2.833).abs() < 1e-3);
        assert!(loss(&[0.5, 0.3, 0.2], 0).unwrap() < loss(&[0.4, 0.35, 0.25], 0).unwrap());
        assert!(loss(&[0.5, 0.5], 2).is_err());
    }

    fn max_rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let cfg = tiny_cfg();
        let net = PatchNet::new(cfg, 11).unwrap();
        let segs = random_segments(&cfg, 12);
        let class = 1;
        let grad = net.input_gradient(&segs, class).unwrap();
        let sal = net.saliency(&segs, class).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eps = 1e-5;
        for _ in 0..20 {
            let k = rng.random_range(0..segs.len());
            let i = rng.random_range(0..segs[k].pixels.len());
            let mut plus = segs.clone();
            plus[k].pixels[i] += eps;
            let mut minus = segs.clone();
            minus[k].pixels[i] -= eps;
            let fd = (net.forward(&plus).unwrap().logits[class] - net.forward(&minus).unwrap().logits[class]) / (2.0 * eps);
            assert!(max_rel_err(fd, grad[k][i]) < 1e-3, "seg {k} px {i}: fd {fd} vs {}", grad[k][i]);
            assert!(sal[k][i] >= 0.0);
            assert_eq!(sal[k][i], grad[k][i].abs());
        }
    }

    #[test]
    fn probe_saliency_stays_on_the_class_colour() {
        let net = PatchNet::colour_probe(tiny_cfg()).unwrap();
        let segs = random_segments(&tiny_cfg(), 21);
        let plane = 16 * 16;
        for class in 0..3 {
            let sal = net.saliency(&segs, class).unwrap();
            for seg in &sal {
                for c in 0..3 {
                    let mass: f64 = seg[c * plane..(c + 1) * plane].iter().sum();
                    if c == class {
                        assert!(mass > 0.0);
                    } else {
                        assert_eq!(mass, 0.0);
                    }
                }
            }
        }
        // class 0 logit grows with the red channel
        let mut red = segs.clone();
        red.iter_mut().for_each(|s| s.pixels[..plane].iter_mut().for_each(|v| *v += 0.5));
        assert!(net.forward(&red).unwrap().logits[0] > net.forward(&segs).unwrap().logits[0]);
    }
}
