//! Anchors, target assignment, RoI level selection, and the shared RPN,
//! predictor and segmentation heads.

use crate::boxes::{BBox, BoxCoder};
use crate::error::{Error, Result};
use crate::init::{he_normal, normal, Rng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, ParamVars, RoiBox, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Side of a square anchor at level `n` is `base_size * 2^n`.
    pub base_size: f64,
    /// Width over height.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { base_size: 8.0, ratios: vec![0.41, 1.0] }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.ratios.len()
    }
}

/// Feature stride of pyramid level `n` relative to the image.
pub fn level_stride(level: usize) -> f64 {
    (1u64 << (level + 1)) as f64
}

/// Anchors for a `height x width` feature map at `level`, ordered by cell
/// (row-major) and then by ratio.
pub fn generate_anchors(level: usize, height: usize, width: usize, config: &AnchorConfig) -> Vec<BBox> {
    let stride = level_stride(level);
    let side = config.base_size * (1u64 << level) as f64;
    let mut out = Vec::with_capacity(height * width * config.ratios.len());
    for y in 0..height {
        for x in 0..width {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &r in &config.ratios {
                let s = r.sqrt();
                out.push(BBox::from_center(cx, cy, side * s, side / s));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground { gt: usize },
    Background,
    Ignore,
}

/// Labels anchors against the supervised boxes `gts`. An anchor is
/// foreground when its IoU with some box reaches `fg_iou` or it is the best
/// anchor of some box, background when every IoU stays below `bg_iou`, and
/// ignored otherwise. Background anchors that overlap an `ignored` box by at
/// least `bg_iou` are ignored as well.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], ignored: &[BBox], fg_iou: f64, bg_iou: f64) -> Vec<AnchorLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![0.0f64; gts.len()];
    for a in anchors {
        let mut best = (0.0, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            let v = a.iou(gt);
            if v > best.0 {
                best = (v, g);
            }
            if v > best_for_gt[g] {
                best_for_gt[g] = v;
            }
        }
        let label = if best.0 >= fg_iou {
            AnchorLabel::Foreground { gt: best.1 }
        } else if best.0 < bg_iou {
            if ignored.iter().any(|ig| a.iou(ig) >= bg_iou) {
                AnchorLabel::Ignore
            } else {
                AnchorLabel::Background
            }
        } else {
            AnchorLabel::Ignore
        };
        labels.push(label);
    }
    // Every box claims its best-matching anchors.
    for (i, a) in anchors.iter().enumerate() {
        if matches!(labels[i], AnchorLabel::Foreground { .. }) {
            continue;
        }
        for (g, gt) in gts.iter().enumerate() {
            if best_for_gt[g] > 0.0 && a.iou(gt) == best_for_gt[g] {
                labels[i] = AnchorLabel::Foreground { gt: g };
                break;
            }
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// `s = sqrt(w * h)`.
    SqrtArea,
    /// `s = w * h`.
    Area,
}

/// Maps a region's scale to a pyramid level:
/// `n = floor(k0 + theta * log2(s / canonical))`, clamped to `[1, levels]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelRule {
    pub k0: i64,
    pub theta: f64,
    pub canonical: f64,
    pub mode: ScaleMode,
    pub levels: usize,
}

impl Default for LevelRule {
    fn default() -> Self {
        LevelRule { k0: 4, theta: 1.0, canonical: 224.0, mode: ScaleMode::SqrtArea, levels: 4 }
    }
}

/// Splits a positive finite `x` into `(e, log2(m))` with `x = m * 2^e`,
/// `m` in `[1, 2)`, so halving `x` changes `e` by exactly one.
fn log2_split(x: f64) -> (i64, f64) {
    let bits = x.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    if raw_exp == 0 {
        // subnormal: rescale into the normal range first
        let (e, f) = log2_split(x * 2f64.powi(64));
        return (e - 64, f);
    }
    let mantissa = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    (raw_exp - 1023, mantissa.log2())
}

impl LevelRule {
    pub fn scale(&self, b: &BBox) -> f64 {
        match self.mode {
            ScaleMode::SqrtArea => (b.width() * b.height()).sqrt(),
            ScaleMode::Area => b.width() * b.height(),
        }
    }

    /// Level before clamping.
    pub fn raw_level(&self, s: f64) -> i64 {
        let (es, fs) = log2_split(s);
        let (ec, fc) = log2_split(self.canonical);
        let exp = (es - ec) as f64;
        (self.k0 as f64 + self.theta * exp + self.theta * (fs - fc)).floor() as i64
    }

    pub fn level_of_scale(&self, s: f64) -> usize {
        self.raw_level(s).clamp(1, self.levels as i64) as usize
    }
}

pub fn roi_level_assign(b: &BBox, rule: &LevelRule) -> Result<usize> {
    if !b.is_valid() {
        return Err(Error::invalid("roi_level_assign", format!("degenerate box {b:?}")));
    }
    Ok(rule.level_of_scale(rule.scale(b)))
}

/// Maps an image-space box onto the feature map of `level`.
pub fn to_feature_roi(b: &BBox, level: usize, batch: usize) -> RoiBox {
    let f = 1.0 / level_stride(level);
    RoiBox { batch, x1: b.x1 * f, y1: b.y1 * f, x2: b.x2 * f, y2: b.y2 * f }
}

/// Binary mask at `level_h x level_w` resolution: a cell is set when its
/// centre, mapped back to the `image_h x image_w` image, lies inside a box.
pub fn make_pseudo_mask<S: Scalar>(boxes: &[BBox], image_h: usize, image_w: usize, level_h: usize, level_w: usize) -> Tensor<S> {
    let sy = image_h as f64 / level_h as f64;
    let sx = image_w as f64 / level_w as f64;
    Tensor::from_fn([1, 1, level_h, level_w], |[_, _, y, x]| {
        let (px, py) = ((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
        let inside = boxes.iter().any(|b| px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2);
        if inside {
            S::one()
        } else {
            S::zero()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub anchors: AnchorConfig,
    pub pool_size: usize,
    pub fc_hidden: usize,
    pub rpn_coder: BoxCoder,
    pub roi_coder: BoxCoder,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            anchors: AnchorConfig::default(),
            pool_size: 7,
            fc_hidden: 128,
            rpn_coder: BoxCoder::UNIT,
            roi_coder: BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] },
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.ratios.is_empty() || self.anchors.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("anchor ratios must be positive and nonempty".into()));
        }
        if !(self.anchors.base_size > 0.0) {
            return Err(Error::Config("anchor base size must be positive".into()));
        }
        if self.pool_size == 0 || self.fc_hidden == 0 {
            return Err(Error::Config("pool size and hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of the head parameters for `d` input channels.
    pub fn parameter_shapes(&self, d: usize) -> Vec<(String, [usize; 4])> {
        let a = self.anchors.per_cell();
        let h = self.fc_hidden;
        let p = self.pool_size;
        let mut out = Vec::new();
        let mut layer = |name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.w"), [o, i, k, k]));
            out.push((format!("{name}.b"), [1, o, 1, 1]));
        };
        layer("rpn.conv", d, d, 3);
        layer("rpn.cls", 2 * a, d, 1);
        layer("rpn.reg", 4 * a, d, 1);
        layer("pred.fc1", h, d * p * p, 1);
        layer("pred.fc2", h, h, 1);
        layer("pred.cls", 2, h, 1);
        layer("pred.reg", 4, h, 1);
        layer("seg.conv", d, d, 3);
        layer("seg.out", 1, d, 1);
        out
    }
}

/// Initializes head parameters: He-normal hidden layers, small Gaussian
/// output layers, zero biases.
pub fn build_heads<S: Scalar>(config: &HeadConfig, d: usize, rng: &mut Rng, store: &mut ParamStore<S>) -> Result<()> {
    config.validate()?;
    for (name, shape) in config.parameter_shapes(d) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else if ["rpn.cls", "rpn.reg", "seg.out", "pred.cls"].iter().any(|p| name.starts_with(p)) {
            normal(shape, 0.01, rng)
        } else if name.starts_with("pred.reg") {
            normal(shape, 0.001, rng)
        } else {
            he_normal(shape, rng)
        };
        store.insert(name, t);
    }
    Ok(())
}

fn affine<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, 1, pad)?;
    tape.add_bias(y, b)
}

fn dense<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.linear(x, w)?;
    tape.add_bias(y, b)
}

/// Raw RPN outputs: objectness logits `B x 2A x H x W` (anchor `a` uses
/// channels `2a` and `2a + 1`, background first) and deltas `B x 4A x H x W`.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    pub cls: Var,
    pub reg: Var,
}

pub fn rpn_forward<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, feature: Var) -> Result<RpnOutput> {
    let h = affine(tape, params, "rpn.conv", feature, 1)?;
    let h = tape.relu(h);
    let cls = affine(tape, params, "rpn.cls", h, 0)?;
    let reg = affine(tape, params, "rpn.reg", h, 0)?;
    Ok(RpnOutput { cls, reg })
}

/// Per-RoI class logits `R x 2` (background, pedestrian) and deltas `R x 4`.
pub fn predictor_forward<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, pooled: Var) -> Result<(Var, Var)> {
    let h = dense(tape, params, "pred.fc1", pooled)?;
    let h = tape.relu(h);
    let h = dense(tape, params, "pred.fc2", h)?;
    let h = tape.relu(h);
    let cls = dense(tape, params, "pred.cls", h)?;
    let reg = dense(tape, params, "pred.reg", h)?;
    Ok((cls, reg))
}

/// Per-pixel foreground probability `B x 1 x H x W`.
pub fn segmentation_forward<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, feature: Var) -> Result<Var> {
    let h = affine(tape, params, "seg.conv", feature, 1)?;
    let h = tape.relu(h);
    let logits = affine(tape, params, "seg.out", h, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Foreground probability of a two-way logit pair.
pub fn foreground_probability(bg: f64, fg: f64) -> f64 {
    1.0 / (1.0 + (bg - fg).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;

    #[test]
    fn anchor_counts_and_sizes() {
        let one = AnchorConfig { base_size: 8.0, ratios: vec![1.0] };
        let a = generate_anchors(1, 1, 1, &one);
        assert_eq!(a, vec![BBox::from_center(2.0, 2.0, 16.0, 16.0)]);
        let cfg = AnchorConfig::default();
        assert_eq!(generate_anchors(2, 8, 8, &cfg).len(), 4 * generate_anchors(2, 4, 4, &cfg).len());
        let l1 = generate_anchors(1, 1, 1, &one)[0];
        let l2 = generate_anchors(2, 1, 1, &one)[0];
        assert_eq!(l2.width(), 2.0 * l1.width());
    }

    #[test]
    fn assignment_rules() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let same = assign_anchors(&[gt], &[gt], &[], 0.7, 0.3);
        assert_eq!(same, vec![AnchorLabel::Foreground { gt: 0 }]);
        assert_eq!(BoxCoder::UNIT.encode(&gt, &gt), [0.0; 4]);

        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(50.0, 50.0, 60.0, 60.0)];
        assert!(assign_anchors(&anchors, &[], &[], 0.7, 0.3).iter().all(|l| *l == AnchorLabel::Background));

        // intersection 50, union 100
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g = BBox::new(0.0, 0.0, 10.0, 5.0);
        assert_eq!(a.iou(&g), 0.5);
        let other = BBox::new(100.0, 100.0, 110.0, 105.0);
        let labels = assign_anchors(&[a, other], &[g], &[], 0.7, 0.3);
        // alone, `a` is the best anchor of g and gets claimed
        assert_eq!(labels[0], AnchorLabel::Foreground { gt: 0 });
        // with a better competitor it stays ignored
        let labels = assign_anchors(&[a, g], &[g], &[], 0.7, 0.3);
        assert_eq!(labels[0], AnchorLabel::Ignore);
    }

    #[test]
    fn ignored_boxes_shield_background() {
        let ig = BBox::new(0.0, 0.0, 10.0, 10.0);
        let labels = assign_anchors(&[ig, BBox::new(40.0, 40.0, 50.0, 50.0)], &[], &[ig], 0.7, 0.3);
        assert_eq!(labels, vec![AnchorLabel::Ignore, AnchorLabel::Background]);
    }

    #[test]
    fn level_formula() {
        let rule = LevelRule::default();
        assert_eq!(rule.level_of_scale(224.0), 4);
        assert_eq!(rule.level_of_scale(112.0), 3);
        assert_eq!(rule.raw_level(14.0), 0);
        assert_eq!(rule.level_of_scale(14.0), 1);
        assert_eq!(rule.level_of_scale(10_000.0), 4);
        let b = BBox::new(0.0, 0.0, 224.0, 224.0);
        assert_eq!(roi_level_assign(&b, &rule).unwrap(), 4);
        assert!(roi_level_assign(&BBox::new(0.0, 0.0, 0.0, 5.0), &rule).is_err());
        let area = LevelRule { mode: ScaleMode::Area, ..rule };
        assert_eq!(area.scale(&BBox::new(0.0, 0.0, 4.0, 56.0)), 224.0);
    }

    #[test]
    fn pseudo_masks() {
        let m: Tensor<f64> = make_pseudo_mask(&[], 32, 32, 8, 8);
        assert_eq!(m.sum(), 0.0);
        let m: Tensor<f64> = make_pseudo_mask(&[BBox::new(0.0, 0.0, 32.0, 32.0)], 32, 32, 8, 8);
        assert_eq!(m.sum(), 64.0);
        let m: Tensor<f64> = make_pseudo_mask(&[BBox::new(0.0, 0.0, 16.0, 32.0)], 32, 32, 8, 8);
        assert_eq!(m.sum(), 32.0);
    }

    #[test]
    fn head_shapes() {
        let cfg = HeadConfig { fc_hidden: 16, ..HeadConfig::default() };
        let mut store = ParamStore::<f64>::new();
        build_heads(&cfg, 8, &mut rng(0), &mut store).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let f = tape.constant(Tensor::from_fn([1, 8, 6, 5], |[_, c, y, x]| (c + y * x) as f64 * 0.1));
        let rpn = rpn_forward(&mut tape, &pv, f).unwrap();
        assert_eq!(tape.shape(rpn.cls), [1, 4, 6, 5]);
        assert_eq!(tape.shape(rpn.reg), [1, 8, 6, 5]);
        let (pooled, _) = tape.roi_pool(f, &[RoiBox { batch: 0, x1: 0.0, y1: 0.0, x2: 3.0, y2: 4.0 }; 3], 7, 7).unwrap();
        let (cls, reg) = predictor_forward(&mut tape, &pv, pooled).unwrap();
        assert_eq!(tape.shape(cls), [3, 2, 1, 1]);
        assert_eq!(tape.shape(reg), [3, 4, 1, 1]);
        let seg = segmentation_forward(&mut tape, &pv, f).unwrap();
        assert_eq!(tape.shape(seg), [1, 1, 6, 5]);
        assert!(tape.value(seg).data().iter().all(|&p| p > 0.0 && p < 1.0));
        let bad = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        assert!(rpn_forward(&mut tape, &pv, bad).is_err());
    }
}
