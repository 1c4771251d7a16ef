//! Caltech-style evaluation: subsets, greedy matching, FPPI/miss-rate curves
//! and the log-average miss rate.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::boxes::{score_order, BBox, Detection, GroundTruth};
use crate::error::{Error, Result};

/// Ground truth kept by a subset: visibility in `[vis_lo, vis_hi)` and
/// height at least `min_height`. Everything else becomes an ignore region.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSpec {
    pub name: String,
    pub vis_lo: f64,
    pub vis_hi: f64,
    pub min_height: f64,
}

impl SubsetSpec {
    pub fn new(name: &str, vis_lo: f64, vis_hi: f64, min_height: f64) -> SubsetSpec {
        SubsetSpec { name: name.to_string(), vis_lo, vis_hi, min_height }
    }

    pub fn reasonable() -> SubsetSpec {
        SubsetSpec::new("reasonable", 0.65, f64::INFINITY, 50.0)
    }

    pub fn none(min_height: f64) -> SubsetSpec {
        SubsetSpec::new(&suffixed("none", min_height), 1.0, f64::INFINITY, min_height)
    }

    pub fn partial(min_height: f64) -> SubsetSpec {
        SubsetSpec::new(&suffixed("partial", min_height), 0.65, 1.0, min_height)
    }

    pub fn heavy(min_height: f64) -> SubsetSpec {
        SubsetSpec::new(&suffixed("heavy", min_height), 0.2, 0.65, min_height)
    }

    pub fn all(min_height: f64) -> SubsetSpec {
        SubsetSpec::new(&suffixed("all", min_height), 0.2, f64::INFINITY, min_height)
    }

    pub fn keeps(&self, gt: &GroundTruth) -> bool {
        gt.visibility >= self.vis_lo && gt.visibility < self.vis_hi && gt.bbox.height() >= self.min_height
    }

    /// Looks up a canonical subset by name, e.g. `heavy`, `heavy@20`.
    pub fn by_name(name: &str) -> Result<SubsetSpec> {
        let (base, h) = match name.split_once('@') {
            Some((b, h)) => {
                let h: f64 = h.parse().map_err(|_| Error::Config(format!("bad subset height in `{name}`")))?;
                (b, h)
            }
            None => (name, 50.0),
        };
        Ok(match base {
            "reasonable" if h == 50.0 => SubsetSpec::reasonable(),
            "none" => SubsetSpec::none(h),
            "partial" => SubsetSpec::partial(h),
            "heavy" => SubsetSpec::heavy(h),
            "all" => SubsetSpec::all(h),
            _ => return Err(Error::Config(format!("unknown subset `{name}`"))),
        })
    }
}

fn suffixed(base: &str, min_height: f64) -> String {
    if min_height == 50.0 {
        base.to_string()
    } else {
        format!("{base}@{min_height}")
    }
}

/// Reasonable plus None/Partial/Heavy in both height regimes and All.
pub fn canonical_subsets() -> Vec<SubsetSpec> {
    let mut out = vec![SubsetSpec::reasonable()];
    for h in [50.0, 20.0] {
        out.push(SubsetSpec::none(h));
        out.push(SubsetSpec::partial(h));
        out.push(SubsetSpec::heavy(h));
    }
    out.push(SubsetSpec::all(20.0));
    out
}

/// Splits ground truth into kept boxes and ignore regions.
pub fn subset_filter(gts: &[GroundTruth], spec: &SubsetSpec) -> (Vec<BBox>, Vec<BBox>) {
    let mut kept = Vec::new();
    let mut ignored = Vec::new();
    for g in gts {
        if spec.keeps(g) {
            kept.push(g.bbox);
        } else {
            ignored.push(g.bbox);
        }
    }
    (kept, ignored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched only an ignore region; counts as neither.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub scores: Vec<f64>,
    pub outcomes: Vec<Outcome>,
    /// Per kept ground truth: index of the matching detection.
    pub gt_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn kept_gt(&self) -> usize {
        self.gt_match.len()
    }
}

/// Greedy matching in descending score order (input order breaks ties). A
/// detection takes the unmatched kept box it overlaps most if that IoU
/// reaches `threshold`; otherwise it is ignored if it reaches `threshold`
/// with an ignore region (these can absorb any number of detections), and
/// is a false positive if not.
pub fn match_detections(scores: &[f64], boxes: &[BBox], kept: &[BBox], ignored: &[BBox], threshold: f64) -> MatchResult {
    let mut outcomes = vec![Outcome::FalsePositive; scores.len()];
    let mut gt_match = vec![None; kept.len()];
    for d in score_order(scores) {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in kept.iter().enumerate() {
            if gt_match[g].is_some() {
                continue;
            }
            let v = boxes[d].iou(gt);
            if v >= threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        outcomes[d] = match best {
            Some((_, g)) => {
                gt_match[g] = Some(d);
                Outcome::TruePositive
            }
            None if ignored.iter().any(|ig| boxes[d].iou(ig) >= threshold) => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
    }
    MatchResult { scores: scores.to_vec(), outcomes, gt_match }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    /// Ordered by descending threshold, hence non-decreasing FPPI.
    pub points: Vec<CurvePoint>,
    pub images: usize,
    pub gt: usize,
    /// Set when there is no ground truth; miss rates are then 0.
    pub degenerate: bool,
}

/// FPPI and miss rate at every threshold. Detections count at thresholds
/// they meet (`score >= t`). Without explicit thresholds, every distinct
/// score is used; the curve always starts at `t = +inf`.
pub fn fppi_missrate_curve(results: &[MatchResult], thresholds: Option<&[f64]>) -> Result<Curve> {
    if results.is_empty() {
        return Err(Error::invalid("fppi_missrate_curve", "no images"));
    }
    let images = results.len();
    let gt: usize = results.iter().map(MatchResult::kept_gt).sum();
    let mut scored: Vec<(f64, Outcome)> = results
        .iter()
        .flat_map(|r| r.scores.iter().copied().zip(r.outcomes.iter().copied()))
        .filter(|(_, o)| *o != Outcome::Ignored)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut ts: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => scored.iter().map(|s| s.0).collect(),
    };
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    if ts.first() != Some(&f64::INFINITY) {
        ts.insert(0, f64::INFINITY);
    }

    let mut points = Vec::with_capacity(ts.len());
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    for t in ts {
        while i < scored.len() && scored[i].0 >= t {
            match scored[i].1 {
                Outcome::TruePositive => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        let miss_rate = if gt == 0 { 0.0 } else { (gt - tp) as f64 / gt as f64 };
        points.push(CurvePoint { threshold: t, fppi: fp as f64 / images as f64, miss_rate, tp, fp, fn_: gt - tp });
    }
    Ok(Curve { points, images, gt, degenerate: gt == 0 })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn fppi_references(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// Miss rate sampled at `reference`: the point with the largest FPPI not
/// above it (lowest miss rate among equal FPPI), or the lowest-FPPI point
/// when the whole curve lies above.
pub fn sample_miss_rate(curve: &Curve, reference: f64) -> f64 {
    let mut best: Option<&CurvePoint> = None;
    for p in curve.points.iter().filter(|p| p.fppi <= reference) {
        best = match best {
            Some(b) if b.fppi > p.fppi || (b.fppi == p.fppi && b.miss_rate <= p.miss_rate) => Some(b),
            _ => Some(p),
        };
    }
    match best {
        Some(p) => p.miss_rate,
        None => curve
            .points
            .iter()
            .min_by(|a, b| a.fppi.total_cmp(&b.fppi).then(a.miss_rate.total_cmp(&b.miss_rate)))
            .map_or(1.0, |p| p.miss_rate),
    }
}

/// Geometric mean of the miss rates sampled at `references`, each clamped
/// to at least [`MISS_RATE_FLOOR`].
pub fn log_avg_miss_rate(curve: &Curve, references: &[f64]) -> Result<f64> {
    if curve.points.is_empty() || references.is_empty() {
        return Err(Error::invalid("log_avg_miss_rate", "empty curve or reference list"));
    }
    let rates: Vec<f64> = references.iter().map(|&r| sample_miss_rate(curve, r).max(MISS_RATE_FLOOR)).collect();
    Ok(geometric_mean(&rates))
}

/// Geometric mean, computed relative to the first value so that a constant
/// sequence returns that constant exactly.
pub fn geometric_mean(values: &[f64]) -> f64 {
    let base = values[0];
    let mean_log = values.iter().map(|v| (v / base).ln()).sum::<f64>() / values.len() as f64;
    base * mean_log.exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub fppi_lo: f64,
    pub fppi_hi: f64,
    pub fppi_points: usize,
    pub subsets: Vec<SubsetSpec>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { iou_threshold: 0.5, fppi_lo: 0.1, fppi_hi: 1.0, fppi_points: 9, subsets: canonical_subsets() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    pub spec: SubsetSpec,
    pub lamr: f64,
    pub curve: Curve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub subsets: Vec<SubsetReport>,
    pub references: Vec<f64>,
    /// Number of final detections produced by each circle.
    pub origin_counts: Vec<(Option<usize>, usize)>,
    /// True positives on the first subset, by originating circle.
    pub origin_tp: Vec<(Option<usize>, usize)>,
}

impl EvalReport {
    pub fn lamr(&self, subset: &str) -> Option<f64> {
        self.subsets.iter().find(|s| s.spec.name == subset).map(|s| s.lamr)
    }

    /// References, per-subset LAMR and origin statistics.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let refs: Vec<String> = self.references.iter().map(|r| format!("{r:.6}")).collect();
        let _ = writeln!(s, "fppi_references {}", refs.join(" "));
        for sub in &self.subsets {
            let _ = writeln!(
                s,
                "subset {} lamr {:.6} gt {} images {}{}",
                sub.spec.name,
                sub.lamr,
                sub.curve.gt,
                sub.curve.images,
                if sub.curve.degenerate { " degenerate" } else { "" }
            );
        }
        for (c, n) in &self.origin_counts {
            let _ = writeln!(s, "origin {} detections {n}", c.map_or("-".to_string(), |c| c.to_string()));
        }
        for (c, n) in &self.origin_tp {
            let _ = writeln!(s, "origin {} true_positives {n}", c.map_or("-".to_string(), |c| c.to_string()));
        }
        s
    }

    /// The summary followed by every subset's full curve.
    pub fn to_text(&self) -> String {
        let mut s = self.summary();
        for sub in &self.subsets {
            let _ = writeln!(s, "curve {} threshold fppi miss_rate tp fp fn", sub.spec.name);
            for p in &sub.curve.points {
                let _ = writeln!(s, "{} {:.6} {:.6} {} {} {}", p.threshold, p.fppi, p.miss_rate, p.tp, p.fp, p.fn_);
            }
        }
        s
    }
}

/// Evaluates per-image detections against per-image ground truth.
/// Matching runs in parallel per image; results are reduced in image order.
pub fn evaluate(images: &[(Vec<Detection>, Vec<GroundTruth>)], settings: &EvalSettings) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::invalid("evaluate", "no images"));
    }
    let references = fppi_references(settings.fppi_lo, settings.fppi_hi, settings.fppi_points);
    let mut subsets = Vec::with_capacity(settings.subsets.len());
    let mut first_matches = None;
    for spec in &settings.subsets {
        let matches: Vec<MatchResult> = images
            .par_iter()
            .map(|(dets, gts)| {
                let (kept, ignored) = subset_filter(gts, spec);
                let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
                match_detections(&scores, &boxes, &kept, &ignored, settings.iou_threshold)
            })
            .collect();
        let curve = fppi_missrate_curve(&matches, None)?;
        let lamr = log_avg_miss_rate(&curve, &references)?;
        subsets.push(SubsetReport { spec: spec.clone(), lamr, curve });
        if first_matches.is_none() {
            first_matches = Some(matches);
        }
    }
    let mut counts = std::collections::BTreeMap::new();
    let mut tps = std::collections::BTreeMap::new();
    for (i, (dets, _)) in images.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            *counts.entry(d.circle).or_insert(0) += 1;
            if let Some(m) = &first_matches {
                if m[i].outcomes[j] == Outcome::TruePositive {
                    *tps.entry(d.circle).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        subsets,
        references,
        origin_counts: counts.into_iter().collect(),
        origin_tp: tps.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, h: f64, vis: f64) -> GroundTruth {
        GroundTruth { bbox: BBox::new(x, 0.0, x + 0.41 * h, h), visibility: vis }
    }

    #[test]
    fn subset_membership() {
        let r = SubsetSpec::reasonable();
        assert!(r.keeps(&gt(0.0, 60.0, 0.7)));
        assert!(!r.keeps(&gt(0.0, 60.0, 0.5)));
        assert!(SubsetSpec::heavy(50.0).keeps(&gt(0.0, 60.0, 0.5)));
        assert!(!SubsetSpec::heavy(50.0).keeps(&gt(0.0, 30.0, 0.5)));
        assert!(SubsetSpec::heavy(20.0).keeps(&gt(0.0, 30.0, 0.5)));
        assert_eq!(SubsetSpec::by_name("heavy@20").unwrap(), SubsetSpec::heavy(20.0));
        assert!(SubsetSpec::by_name("bogus").is_err());
    }

    #[test]
    fn one_exact_detection() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let m = match_detections(&[0.9], &[b], &[b], &[], 0.5);
        assert_eq!(m.outcomes, vec![Outcome::TruePositive]);
        assert_eq!(m.gt_match, vec![Some(0)]);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let m = match_detections(&[0.8, 0.9], &[b, b], &[b], &[], 0.5);
        assert_eq!(m.outcomes, vec![Outcome::FalsePositive, Outcome::TruePositive]);
    }

    #[test]
    fn ignore_regions_absorb_detections() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let m = match_detections(&[0.9, 0.8], &[b, b], &[], &[b], 0.5);
        assert_eq!(m.outcomes, vec![Outcome::Ignored, Outcome::Ignored]);
    }

    #[test]
    fn curve_counts_two_images() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let far = BBox::new(50.0, 50.0, 60.0, 70.0);
        let a = match_detections(&[0.9, 0.4], &[b, far], &[b], &[], 0.5);
        let c = match_detections(&[0.7], &[far], &[b], &[], 0.5);
        let curve = fppi_missrate_curve(&[a, c], None).unwrap();
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fppi, p.miss_rate)).collect();
        assert_eq!(pts, vec![(0.0, 1.0), (0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]);
    }

    #[test]
    fn empty_and_perfect_detectors() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        let empty = fppi_missrate_curve(&[match_detections(&[], &[], &[b], &[], 0.5)], None).unwrap();
        assert_eq!(empty.points.len(), 1);
        assert_eq!(empty.points[0].miss_rate, 1.0);
        let refs = fppi_references(0.1, 1.0, 9);
        assert_eq!(log_avg_miss_rate(&empty, &refs).unwrap(), 1.0);

        let perfect = fppi_missrate_curve(&[match_detections(&[1.0], &[b], &[b], &[], 0.5)], None).unwrap();
        assert_eq!(log_avg_miss_rate(&perfect, &refs).unwrap(), MISS_RATE_FLOOR);

        let none = fppi_missrate_curve(&[match_detections(&[], &[], &[], &[], 0.5)], None).unwrap();
        assert!(none.degenerate);
        assert_eq!(none.points[0].miss_rate, 0.0);
    }

    #[test]
    fn geometric_mean_hand_value() {
        let mut v = vec![0.1; 9];
        v[4] = 0.4;
        // exp((8 ln 0.1 + ln 0.4) / 9) = 0.1 * 4^(1/9)
        let want = 0.1 * 4f64.powf(1.0 / 9.0);
        assert!((geometric_mean(&v) - want).abs() < 1e-15);
        assert_eq!(geometric_mean(&[0.37; 9]), 0.37);
    }

    #[test]
    fn references_span_range() {
        let r = fppi_references(0.1, 1.0, 9);
        assert_eq!(r.len(), 9);
        assert!((r[0] - 0.1).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15);
        assert!((r[4] - 10f64.powf(-0.5)).abs() < 1e-15);
    }
}
