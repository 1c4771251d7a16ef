//! The full detector: backbone, circling pyramid and shared heads, with the
//! training-target plan, the combined loss and inference.
//!
//! A training step runs in three phases. The feature and RPN forward pass
//! is recorded on a tape; a [`TrainPlan`] is then derived from the recorded
//! values (anchor labels, proposals, sampled RoIs and their targets); the
//! loss is finally assembled on the same tape from the plan. Because the
//! plan is plain data, it can be frozen and reused, which is what the
//! finite-difference gradient checks do.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;

use crate::backbone::{backbone_forward, build_backbone, BackboneConfig};
use crate::boxes::{nms, score_order, BBox, Detection, GroundTruth};
use crate::circle::{build_circle_params, run_circles, CircleConfig, TapeOps};
use crate::decompose::{hardness_weights, DecompositionPlan, HardnessBands, Instance, Strategy};
use crate::error::{Error, Result};
use crate::heads::{
    assign_anchors, build_heads, foreground_probability, generate_anchors, make_pseudo_mask, predictor_forward,
    roi_level_assign, rpn_forward, segmentation_forward, to_feature_roi, AnchorLabel, HeadConfig, LevelRule, RpnOutput,
};
use crate::init::{derive_seed, rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, ParamVars, RoiBox, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetConfig {
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    /// Sampled anchors per image and circle.
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub pre_nms_top: usize,
    pub proposal_nms: f64,
    pub post_nms_top: usize,
    /// Sampled RoIs per image and circle.
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    pub min_proposal_size: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch: 128,
            rpn_fg_fraction: 0.5,
            pre_nms_top: 1000,
            proposal_nms: 0.7,
            post_nms_top: 200,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            min_proposal_size: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub proposals: usize,
    pub score_threshold: f64,
    pub nms: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { proposals: 200, score_threshold: 0.05, nms: 0.5, max_detections: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionConfig {
    pub strategy: Strategy,
    pub bands: HardnessBands,
    pub alpha: f64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig { strategy: Strategy::EasyToHard, bands: HardnessBands::default(), alpha: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub circle: CircleConfig,
    pub head: HeadConfig,
    pub level_rule: LevelRule,
    pub targets: TargetConfig,
    pub decomposition: DecompositionConfig,
    pub inference: InferenceConfig,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.circle.validate()?;
        self.head.validate()?;
        if self.backbone.levels != self.circle.levels || self.level_rule.levels != self.circle.levels {
            return Err(Error::Config(format!(
                "level counts disagree: backbone {}, pyramid {}, roi rule {}",
                self.backbone.levels, self.circle.levels, self.level_rule.levels
            )));
        }
        let t = &self.targets;
        if !(0.0 < t.rpn_bg_iou && t.rpn_bg_iou <= t.rpn_fg_iou && t.rpn_fg_iou <= 1.0) {
            return Err(Error::Config("rpn IoU thresholds must satisfy 0 < bg <= fg <= 1".into()));
        }
        if t.rpn_batch == 0 || t.roi_batch == 0 || t.post_nms_top == 0 {
            return Err(Error::Config("sample budgets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decomposition.alpha) {
            return Err(Error::Config("decomposition alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The per-circle loss components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    RpnCls,
    RpnReg,
    Cls,
    Reg,
    Seg,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::RpnCls, Term::RpnReg, Term::Cls, Term::Reg, Term::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Term::RpnCls => "rpn_cls",
            Term::RpnReg => "rpn_reg",
            Term::Cls => "cls",
            Term::Reg => "reg",
            Term::Seg => "seg",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Keyed by (detection circle, term); level terms are summed.
    pub terms: BTreeMap<(usize, Term), f64>,
}

impl LossBreakdown {
    pub fn circle_total(&self, circle: usize) -> f64 {
        self.terms.iter().filter(|((c, _), _)| *c == circle).map(|(_, v)| v).sum()
    }
}

/// Inputs of one step: images `B x C x H x W` and per-image ground truth.
pub struct Batch<'a, S> {
    pub images: Tensor<S>,
    pub gts: &'a [Vec<GroundTruth>],
}

/// Pyramid features of every detection circle on a tape.
#[derive(Clone, Debug)]
pub struct Features {
    pub batch: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// `(circle index, level features finest first)`.
    pub circles: Vec<(usize, Vec<Var>)>,
    pub rpn: Vec<Vec<RpnOutput>>,
}

/// Sampled anchors of one level in one circle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnLevelPlan {
    pub level: usize,
    /// Flat indices of (background, foreground) logits per sample.
    pub cls_index: Vec<usize>,
    pub labels: Vec<usize>,
    /// Flat indices of the four deltas per foreground sample.
    pub reg_index: Vec<usize>,
    pub reg_target: Vec<f64>,
    pub cls_share: f64,
    pub reg_share: f64,
}

/// Sampled RoIs of one level in one circle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiLevelPlan {
    pub level: usize,
    pub rois: Vec<RoiBox>,
    /// Image-space boxes of the RoIs.
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    /// Positions (within `rois`) of foreground samples.
    pub fg: Vec<usize>,
    pub reg_target: Vec<f64>,
    pub cls_share: f64,
    pub reg_share: f64,
    /// Per-RoI hardness weights; `None` means unweighted.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CirclePlan {
    pub circle: usize,
    pub rpn: Vec<RpnLevelPlan>,
    pub rois: Vec<RoiLevelPlan>,
    /// Whether hardness weights apply to this circle's RoIs.
    pub weighted: bool,
    pub mask: Vec<f64>,
}

/// All targets of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainPlan {
    pub circles: Vec<CirclePlan>,
    pub warnings: Vec<String>,
    /// Per image, the decomposition that produced the targets.
    pub decompositions: Vec<DecompositionPlan>,
}

#[derive(Clone, Debug)]
pub struct Detector<S> {
    pub config: DetectorConfig,
    pub params: ParamStore<S>,
}

/// Maps raw `[0, 1]` pixel values to roughly zero-mean inputs.
pub fn normalize_image<S: Scalar>(image: &Tensor<f32>) -> Tensor<S> {
    Tensor::from_fn(image.shape(), |i| S::of((image.at(i) as f64 - 0.5) * 4.0))
}

impl<S: Scalar> Detector<S> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Detector<S>> {
        config.validate()?;
        let mut params = ParamStore::new();
        build_backbone(&config.backbone, &mut rng(derive_seed(seed, 1)), &mut params)?;
        build_circle_params(&config.circle, &config.backbone.channels_per_level, &mut rng(derive_seed(seed, 2)), &mut params)?;
        build_heads(&config.head, config.circle.channels, &mut rng(derive_seed(seed, 3)), &mut params)?;
        Ok(Detector { config, params })
    }

    pub fn from_params(config: DetectorConfig, params: ParamStore<S>) -> Result<Detector<S>> {
        config.validate()?;
        let reference = Detector::<S>::new(config.clone(), 0)?;
        let want = reference.params.shapes();
        let got = params.shapes();
        for (name, shape) in &want {
            match got.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(s) if s != shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {s:?}, expected {shape:?}"
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Detector { config, params })
    }

    /// Backbone, pyramid and RPN forward pass.
    pub fn forward_features(&self, tape: &mut Tape<S>, pv: &ParamVars, images: Var) -> Result<Features> {
        let [batch, _, image_h, image_w] = tape.shape(images);
        let c = backbone_forward(tape, pv, &self.config.backbone, images)?;
        let state = {
            let mut ops = TapeOps { tape: &mut *tape, params: pv };
            run_circles(&mut ops, &c, &self.config.circle)?
        };
        let circles = state.detection_features();
        let mut rpn = Vec::with_capacity(circles.len());
        for (_, levels) in &circles {
            let mut per_level = Vec::with_capacity(levels.len());
            for &f in levels {
                per_level.push(rpn_forward(tape, pv, f)?);
            }
            rpn.push(per_level);
        }
        Ok(Features { batch, image_h, image_w, circles, rpn })
    }

    fn anchors_for(&self, tape: &Tape<S>, feats: &Features, level_idx: usize) -> Vec<BBox> {
        let [_, _, h, w] = tape.shape(feats.circles[0].1[level_idx]);
        generate_anchors(level_idx + 1, h, w, &self.config.head.anchors)
    }

    /// Scored proposals of one image in one circle, best first.
    fn proposals(&self, tape: &Tape<S>, feats: &Features, pos: usize, b: usize, anchors: &[Vec<BBox>], keep: usize) -> Vec<(BBox, f64)> {
        let a_per = self.config.head.anchors.per_cell();
        let coder = self.config.head.rpn_coder;
        let mut cands: Vec<(BBox, f64)> = Vec::new();
        for (li, out) in feats.rpn[pos].iter().enumerate() {
            let cls = tape.value(out.cls);
            let reg = tape.value(out.reg);
            let w = cls.shape()[3];
            for (k, anchor) in anchors[li].iter().enumerate() {
                let cell = k / a_per;
                let a = k % a_per;
                let (y, x) = (cell / w, cell % w);
                let bg = cls.at([b, 2 * a, y, x]).as_f64();
                let fg = cls.at([b, 2 * a + 1, y, x]).as_f64();
                let d = [0, 1, 2, 3].map(|j| reg.at([b, 4 * a + j, y, x]).as_f64());
                let bx = coder.decode(anchor, d).clip(feats.image_w as f64, feats.image_h as f64);
                if bx.width() >= self.config.targets.min_proposal_size && bx.height() >= self.config.targets.min_proposal_size {
                    cands.push((bx, foreground_probability(bg, fg)));
                }
            }
        }
        let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
        let mut order = score_order(&scores);
        order.truncate(self.config.targets.pre_nms_top);
        let boxes: Vec<BBox> = order.iter().map(|&i| cands[i].0).collect();
        let top: Vec<f64> = order.iter().map(|&i| cands[i].1).collect();
        let mut kept = nms(&boxes, &top, self.config.targets.proposal_nms);
        kept.truncate(keep);
        kept.into_iter().map(|i| (boxes[i], top[i])).collect()
    }

    /// Derives the training targets of one step from the recorded forward
    /// values. `rng` drives anchor and RoI sampling.
    pub fn build_plan(&self, tape: &Tape<S>, feats: &Features, gts: &[Vec<GroundTruth>], rng: &mut Rng) -> Result<TrainPlan> {
        let cfg = &self.config;
        let t = &cfg.targets;
        let n_levels = cfg.circle.levels;
        let a_per = cfg.head.anchors.per_cell();
        if gts.len() != feats.batch {
            return Err(Error::invalid("build_plan", format!("{} annotation lists for {} images", gts.len(), feats.batch)));
        }
        let anchors: Vec<Vec<BBox>> = (0..n_levels).map(|li| self.anchors_for(tape, feats, li)).collect();

        let mut plan = TrainPlan::default();
        for image_gts in gts {
            let instances: Vec<Instance> = image_gts
                .iter()
                .enumerate()
                .map(|(id, g)| Instance { id, bbox: g.bbox, visibility: g.visibility })
                .collect();
            let d = DecompositionPlan::build(
                &instances,
                cfg.decomposition.strategy,
                cfg.circle.circles,
                &cfg.decomposition.bands,
                &cfg.level_rule,
                cfg.decomposition.alpha,
            )?;
            plan.warnings.extend(d.warnings.iter().cloned());
            plan.decompositions.push(d);
        }

        for (pos, (circle, levels)) in feats.circles.iter().enumerate() {
            let mut cp = CirclePlan {
                circle: *circle,
                weighted: cfg.decomposition.strategy == Strategy::ByLoss && pos > 0,
                ..CirclePlan::default()
            };

            // RPN anchors: level n is supervised by the instances assigned to
            // it; every other instance of the image is an ignore region.
            let mut rpn_levels: Vec<RpnLevelPlan> = (1..=n_levels).map(|n| RpnLevelPlan { level: n, ..Default::default() }).collect();
            let mut fg_cands: Vec<(usize, usize, usize, BBox)> = Vec::new();
            let mut bg_cands: Vec<(usize, usize, usize)> = Vec::new();
            for (b, image_gts) in gts.iter().enumerate() {
                let dec = &plan.decompositions[b];
                for li in 0..n_levels {
                    let bucket = dec.level_bucket(*circle, li + 1);
                    let kept: Vec<BBox> = bucket.iter().map(|&i| image_gts[i].bbox).collect();
                    let ignored: Vec<BBox> = (0..image_gts.len())
                        .filter(|i| !bucket.contains(i))
                        .map(|i| image_gts[i].bbox)
                        .collect();
                    let labels = assign_anchors(&anchors[li], &kept, &ignored, t.rpn_fg_iou, t.rpn_bg_iou);
                    for (k, l) in labels.into_iter().enumerate() {
                        match l {
                            AnchorLabel::Foreground { gt } => fg_cands.push((b, li, k, kept[gt])),
                            AnchorLabel::Background => bg_cands.push((b, li, k)),
                            AnchorLabel::Ignore => {}
                        }
                    }
                }
            }
            let budget = t.rpn_batch * gts.len();
            fg_cands.shuffle(rng);
            fg_cands.truncate(((budget as f64) * t.rpn_fg_fraction).round() as usize);
            bg_cands.shuffle(rng);
            bg_cands.truncate(budget - fg_cands.len());
            let mut fg_sorted = fg_cands;
            fg_sorted.sort_by_key(|c| (c.0, c.1, c.2));
            bg_cands.sort_unstable();
            let total_samples = (fg_sorted.len() + bg_cands.len()).max(1) as f64;
            let total_fg = fg_sorted.len().max(1) as f64;

            let index_of = |b: usize, li: usize, k: usize, ch: usize, chans: usize| -> usize {
                let [_, _, h, w] = tape.shape(levels[li]);
                let cell = k / a_per;
                let (y, x) = (cell / w, cell % w);
                ((b * chans + ch) * h + y) * w + x
            };
            for &(b, li, k, gt) in &fg_sorted {
                let a = k % a_per;
                let lp = &mut rpn_levels[li];
                lp.cls_index.push(index_of(b, li, k, 2 * a, 2 * a_per));
                lp.cls_index.push(index_of(b, li, k, 2 * a + 1, 2 * a_per));
                lp.labels.push(1);
                for j in 0..4 {
                    lp.reg_index.push(index_of(b, li, k, 4 * a + j, 4 * a_per));
                }
                lp.reg_target.extend(cfg.head.rpn_coder.encode(&anchors[li][k], &gt));
            }
            for &(b, li, k) in &bg_cands {
                let a = k % a_per;
                let lp = &mut rpn_levels[li];
                lp.cls_index.push(index_of(b, li, k, 2 * a, 2 * a_per));
                lp.cls_index.push(index_of(b, li, k, 2 * a + 1, 2 * a_per));
                lp.labels.push(0);
            }
            for lp in &mut rpn_levels {
                lp.cls_share = lp.labels.len() as f64 / total_samples;
                lp.reg_share = (lp.reg_index.len() / 4) as f64 / total_fg;
            }
            cp.rpn = rpn_levels;

            // RoIs: proposals plus the circle's own ground truth, labelled
            // against the circle bucket.
            let mut roi_levels: Vec<RoiLevelPlan> = (1..=n_levels).map(|n| RoiLevelPlan { level: n, ..Default::default() }).collect();
            let mut n_rois = 0usize;
            let mut n_fg = 0usize;
            for (b, image_gts) in gts.iter().enumerate() {
                let bucket = plan.decompositions[b].circle_bucket(*circle).cloned().unwrap_or_default();
                let kept: Vec<BBox> = bucket.iter().map(|&i| image_gts[i].bbox).collect();
                let ignored: Vec<BBox> = (0..image_gts.len()).filter(|i| !bucket.contains(i)).map(|i| image_gts[i].bbox).collect();
                let mut boxes: Vec<BBox> = self.proposals(tape, feats, pos, b, &anchors, t.post_nms_top).into_iter().map(|p| p.0).collect();
                boxes.extend(kept.iter().copied());
                let mut fg: Vec<(BBox, BBox)> = Vec::new();
                let mut bg: Vec<BBox> = Vec::new();
                for bx in boxes {
                    let best = kept
                        .iter()
                        .map(|g| (bx.iou(g), *g))
                        .fold(None, |acc: Option<(f64, BBox)>, c| match acc {
                            Some(a) if a.0 >= c.0 => Some(a),
                            _ => Some(c),
                        });
                    match best {
                        Some((v, g)) if v >= t.roi_fg_iou => fg.push((bx, g)),
                        _ if ignored.iter().any(|ig| bx.iou(ig) >= t.roi_fg_iou) => {}
                        _ => bg.push(bx),
                    }
                }
                fg.shuffle(rng);
                fg.truncate(((t.roi_batch as f64) * t.roi_fg_fraction).round() as usize);
                bg.shuffle(rng);
                bg.truncate(t.roi_batch - fg.len());
                let labelled = fg.iter().map(|&(bx, g)| (bx, Some(g))).chain(bg.iter().map(|&bx| (bx, None)));
                for (bx, g) in labelled {
                    let n = roi_level_assign(&bx, &cfg.level_rule)?;
                    let lp = &mut roi_levels[n - 1];
                    if let Some(g) = g {
                        lp.fg.push(lp.rois.len());
                        lp.reg_target.extend(cfg.head.roi_coder.encode(&bx, &g));
                        n_fg += 1;
                    }
                    lp.labels.push(usize::from(g.is_some()));
                    lp.rois.push(to_feature_roi(&bx, n, b));
                    lp.boxes.push(bx);
                    n_rois += 1;
                }
            }
            for lp in &mut roi_levels {
                lp.cls_share = lp.rois.len() as f64 / n_rois.max(1) as f64;
                lp.reg_share = lp.fg.len() as f64 / n_fg.max(1) as f64;
            }
            cp.rois = roi_levels;

            // Segmentation mask at the finest level from every instance.
            let [_, _, h1, w1] = tape.shape(levels[0]);
            for image_gts in gts {
                let boxes: Vec<BBox> = image_gts.iter().map(|g| g.bbox).collect();
                let m: Tensor<f64> = make_pseudo_mask(&boxes, feats.image_h, feats.image_w, h1, w1);
                cp.mask.extend_from_slice(m.data());
            }
            plan.circles.push(cp);
        }
        Ok(plan)
    }

    /// Assembles the combined loss from a plan. Hardness weights missing
    /// from a weighted circle are computed from the current predictor
    /// outputs and stored in the plan.
    pub fn assemble_loss(&self, tape: &mut Tape<S>, pv: &ParamVars, feats: &Features, plan: &mut TrainPlan) -> Result<(Var, BTreeMap<(usize, Term), Var>)> {
        let p = self.config.head.pool_size;
        let mut terms: BTreeMap<(usize, Term), Vec<Var>> = BTreeMap::new();
        for (pos, cp) in plan.circles.iter_mut().enumerate() {
            let (circle, levels) = &feats.circles[pos];
            let c = *circle;
            for (li, lp) in cp.rpn.iter().enumerate() {
                let out = feats.rpn[pos][li];
                let m = lp.labels.len();
                if m > 0 {
                    let logits = tape.gather(out.cls, lp.cls_index.clone(), [m, 2, 1, 1])?;
                    let ce = tape.softmax_cross_entropy(logits, &lp.labels, None)?;
                    let v = tape.scale(ce.var, S::of(lp.cls_share));
                    terms.entry((c, Term::RpnCls)).or_default().push(v);
                }
                let f = lp.reg_index.len() / 4;
                if f > 0 {
                    let pred = tape.gather(out.reg, lp.reg_index.clone(), [f, 4, 1, 1])?;
                    let target = Tensor::new([f, 4, 1, 1], lp.reg_target.iter().map(|&v| S::of(v)).collect())?;
                    let l1 = tape.smooth_l1(pred, &target, None)?;
                    let v = tape.scale(l1.var, S::of(lp.reg_share));
                    terms.entry((c, Term::RpnReg)).or_default().push(v);
                }
            }

            let mut heads = Vec::with_capacity(cp.rois.len());
            for (li, rp) in cp.rois.iter().enumerate() {
                if rp.rois.is_empty() {
                    heads.push(None);
                    continue;
                }
                let (pooled, _) = tape.roi_pool(levels[li], &rp.rois, p, p)?;
                heads.push(Some(predictor_forward(tape, pv, pooled)?));
            }
            if cp.weighted && cp.rois.iter().any(|r| !r.rois.is_empty() && r.weights.is_none()) {
                let mut losses = Vec::new();
                for (rp, h) in cp.rois.iter().zip(&heads) {
                    if let Some((cls, _)) = h {
                        let z = tape.value(*cls).data();
                        for (i, &l) in rp.labels.iter().enumerate() {
                            let (bg, fg) = (z[2 * i].as_f64(), z[2 * i + 1].as_f64());
                            let lse = bg.max(fg) + ((bg - bg.max(fg)).exp() + (fg - bg.max(fg)).exp()).ln();
                            losses.push(lse - if l == 1 { fg } else { bg });
                        }
                    }
                }
                let w = hardness_weights(&losses, self.config.decomposition.alpha)?;
                let mut it = w.into_iter();
                for rp in cp.rois.iter_mut().filter(|r| !r.rois.is_empty()) {
                    rp.weights = Some(it.by_ref().take(rp.rois.len()).collect());
                }
            }
            for (rp, h) in cp.rois.iter().zip(heads) {
                let Some((cls, reg)) = h else { continue };
                let w: Option<Vec<S>> = rp.weights.as_ref().map(|w| w.iter().map(|&v| S::of(v)).collect());
                let ce = tape.softmax_cross_entropy(cls, &rp.labels, w.as_deref())?;
                let v = tape.scale(ce.var, S::of(rp.cls_share));
                terms.entry((c, Term::Cls)).or_default().push(v);
                if !rp.fg.is_empty() {
                    let idx: Vec<usize> = rp.fg.iter().flat_map(|&i| (0..4).map(move |j| i * 4 + j)).collect();
                    let pred = tape.gather(reg, idx, [rp.fg.len(), 4, 1, 1])?;
                    let target = Tensor::new([rp.fg.len(), 4, 1, 1], rp.reg_target.iter().map(|&v| S::of(v)).collect())?;
                    let fw: Option<Vec<S>> = w.as_ref().map(|w| rp.fg.iter().map(|&i| w[i]).collect());
                    let l1 = tape.smooth_l1(pred, &target, fw.as_deref())?;
                    let v = tape.scale(l1.var, S::of(rp.reg_share));
                    terms.entry((c, Term::Reg)).or_default().push(v);
                }
            }

            let probs = segmentation_forward(tape, pv, levels[0])?;
            let mask = Tensor::new(tape.shape(probs), cp.mask.iter().map(|&v| S::of(v)).collect())?;
            let bce = tape.binary_cross_entropy(probs, &mask)?;
            terms.entry((c, Term::Seg)).or_default().push(bce.var);
        }
        let mut named = BTreeMap::new();
        let mut all = Vec::new();
        for (key, vars) in terms {
            let v = tape.add_all(&vars)?;
            named.insert(key, v);
            all.push(v);
        }
        let total = tape.add_all(&all)?;
        Ok((total, named))
    }

    /// Full loss of a batch on a fresh tape. With `plan` given, it is used
    /// (and completed) instead of a freshly derived one.
    pub fn loss(&self, tape: &mut Tape<S>, pv: &ParamVars, batch: &Batch<'_, S>, plan: &mut Option<TrainPlan>, rng: &mut Rng) -> Result<(Var, LossBreakdown)> {
        let images = tape.constant(batch.images.clone());
        let feats = self.forward_features(tape, pv, images)?;
        if plan.is_none() {
            *plan = Some(self.build_plan(tape, &feats, batch.gts, rng)?);
        }
        let plan = plan.as_mut().expect("plan present");
        let (total, named) = self.assemble_loss(tape, pv, &feats, plan)?;
        let breakdown = LossBreakdown {
            total: tape.value(total).data()[0].as_f64(),
            terms: named.iter().map(|(k, &v)| (*k, tape.value(v).data()[0].as_f64())).collect(),
        };
        Ok((total, breakdown))
    }

    /// Detections per image, fused across circles.
    pub fn detect(&self, images: &Tensor<S>) -> Result<Vec<Vec<Detection>>> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let pv = tape.bind(&self.params);
        let x = tape.constant(images.clone());
        let feats = self.forward_features(&mut tape, &pv, x)?;
        let anchors: Vec<Vec<BBox>> = (0..cfg.circle.levels).map(|li| self.anchors_for(&tape, &feats, li)).collect();
        let p = cfg.head.pool_size;
        let mut out = Vec::with_capacity(feats.batch);
        for b in 0..feats.batch {
            let mut pooled_all = Vec::new();
            for (pos, (circle, levels)) in feats.circles.iter().enumerate() {
                let props = self.proposals(&tape, &feats, pos, b, &anchors, cfg.inference.proposals);
                let mut by_level: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
                for (bx, _) in props {
                    by_level.entry(roi_level_assign(&bx, &cfg.level_rule)?).or_default().push(bx);
                }
                let mut dets = Vec::new();
                for (n, boxes) in by_level {
                    let rois: Vec<RoiBox> = boxes.iter().map(|bx| to_feature_roi(bx, n, b)).collect();
                    let (pooled, _) = tape.roi_pool(levels[n - 1], &rois, p, p)?;
                    let (cls, reg) = predictor_forward(&mut tape, &pv, pooled)?;
                    let z = tape.value(cls).data();
                    let r = tape.value(reg).data();
                    for (i, bx) in boxes.iter().enumerate() {
                        let score = foreground_probability(z[2 * i].as_f64(), z[2 * i + 1].as_f64());
                        if score < cfg.inference.score_threshold {
                            continue;
                        }
                        let d = [0, 1, 2, 3].map(|j| r[4 * i + j].as_f64());
                        let decoded = cfg.head.roi_coder.decode(bx, d).clip(feats.image_w as f64, feats.image_h as f64);
                        if decoded.is_valid() {
                            dets.push(Detection { bbox: decoded, score, circle: Some(*circle) });
                        }
                    }
                }
                let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
                let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                pooled_all.extend(nms(&boxes, &scores, cfg.inference.nms).into_iter().map(|i| dets[i]));
            }
            let mut fused = crate::boxes::fuse_detections(&pooled_all, cfg.inference.nms);
            fused.truncate(cfg.inference.max_detections);
            out.push(fused);
        }
        Ok(out)
    }
}

/// Level of every RoI in a plan, for auditing the level rule.
pub fn roi_levels(plan: &TrainPlan) -> Vec<(usize, BBox, usize)> {
    plan.circles
        .iter()
        .flat_map(|cp| cp.rois.iter().flat_map(move |rp| rp.boxes.iter().map(move |b| (cp.circle, *b, rp.level))))
        .collect()
}
