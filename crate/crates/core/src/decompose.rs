//! Assignment of training instances to circles (by hardness) and to pyramid
//! levels (by scale), plus loss-based hardness weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::boxes::BBox;
use crate::circle::Circles;
use crate::error::{Error, Result};
use crate::heads::{roi_level_assign, LevelRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    None,
    ByLoss,
    AllToHard,
    EasyToHard,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::ByLoss => "by_loss",
            Strategy::AllToHard => "all_to_hard",
            Strategy::EasyToHard => "easy_to_hard",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "none" => Strategy::None,
            "by_loss" => Strategy::ByLoss,
            "all_to_hard" => Strategy::AllToHard,
            "easy_to_hard" => Strategy::EasyToHard,
            other => return Err(Error::Config(format!("unknown decomposition strategy `{other}`"))),
        })
    }
}

/// Visibility cut-offs. Instances at or above `easy` are easy; those in
/// `[hard, easy)` form the hard band; anything below `hard` lies beyond the
/// band and is trained by the deepest circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardnessBands {
    pub easy: f64,
    pub hard: f64,
}

impl Default for HardnessBands {
    fn default() -> Self {
        HardnessBands { easy: 0.80, hard: 0.65 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hardness {
    Easy,
    Hard,
    BeyondBand,
}

impl HardnessBands {
    pub fn classify(&self, visibility: f64) -> Hardness {
        if visibility >= self.easy {
            Hardness::Easy
        } else if visibility >= self.hard {
            Hardness::Hard
        } else {
            Hardness::BeyondBand
        }
    }
}

pub fn occlusion_of(visibility: f64) -> f64 {
    1.0 - visibility
}

/// A training instance as seen by the decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub bbox: BBox,
    pub visibility: f64,
}

pub type Bucket = BTreeSet<usize>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CircleBuckets {
    /// Keyed by detection circle index.
    pub buckets: BTreeMap<usize, Bucket>,
    pub warnings: Vec<String>,
}

/// Splits instances across the detection circles of `circles`.
///
/// `none` and `by_loss` give every circle all instances. `all_to_hard`
/// gives the first circle everything and later circles the hard band.
/// `easy_to_hard` gives the first circle the easy instances and later
/// circles easy plus hard-band instances. Instances beyond the hard band go
/// to the deepest circle (and to the first under `all_to_hard`). With a
/// single detection circle every instance lands in it.
pub fn decompose_by_circle(instances: &[Instance], strategy: Strategy, circles: Circles, bands: &HardnessBands) -> CircleBuckets {
    let order = circles.detection_circles();
    let all: Bucket = instances.iter().map(|i| i.id).collect();
    let mut out = CircleBuckets::default();
    if order.len() == 1 || matches!(strategy, Strategy::None | Strategy::ByLoss) {
        for &t in &order {
            out.buckets.insert(t, all.clone());
        }
    } else {
        let deepest = *order.last().expect("at least one circle");
        for (pos, &t) in order.iter().enumerate() {
            let first = pos == 0;
            let bucket = instances
                .iter()
                .filter(|inst| {
                    let h = bands.classify(inst.visibility);
                    match (strategy, h) {
                        (_, Hardness::BeyondBand) if t == deepest => true,
                        (Strategy::AllToHard, _) if first => true,
                        (Strategy::AllToHard, Hardness::Hard) => true,
                        (Strategy::EasyToHard, Hardness::Easy) => true,
                        (Strategy::EasyToHard, Hardness::Hard) => !first,
                        _ => false,
                    }
                })
                .map(|i| i.id)
                .collect();
            out.buckets.insert(t, bucket);
        }
    }
    if !instances.is_empty() {
        for (t, b) in &out.buckets {
            if b.is_empty() {
                out.warnings.push(format!("circle {t} receives no instances and stays unsupervised"));
            }
        }
        for w in order.windows(2) {
            let (a, b) = (&out.buckets[&w[0]], &out.buckets[&w[1]]);
            if !a.is_empty() && !b.is_empty() && a.is_disjoint(b) {
                out.warnings.push(format!("circles {} and {} share no instances", w[0], w[1]));
            }
        }
    }
    out
}

/// Assigns every instance of `bucket` to exactly one pyramid level.
pub fn decompose_by_level(bucket: &Bucket, instances: &[Instance], rule: &LevelRule) -> Result<BTreeMap<usize, Bucket>> {
    let by_id: BTreeMap<usize, &Instance> = instances.iter().map(|i| (i.id, i)).collect();
    let mut out: BTreeMap<usize, Bucket> = BTreeMap::new();
    for id in bucket {
        let inst = by_id
            .get(id)
            .ok_or_else(|| Error::invalid("decompose_by_level", format!("unknown instance {id}")))?;
        let level = roi_level_assign(&inst.bbox, rule)?;
        out.entry(level).or_default().insert(*id);
    }
    Ok(out)
}

/// `w = (l - l_min) / (l_max - l_min) * (1 - alpha) + alpha`; all weights
/// equal `alpha` when every loss is the same.
pub fn hardness_weights(losses: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::invalid("hardness_weights", "empty loss list"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("hardness_weights", format!("alpha {alpha} outside [0, 1]")));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::invalid("hardness_weights", format!("loss {bad} must be finite and non-negative")));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![alpha; losses.len()]);
    }
    Ok(losses.iter().map(|l| ((l - lo) / (hi - lo)) * (1.0 - alpha) + alpha).collect())
}

/// Circle and level buckets for one set of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionPlan {
    pub strategy: Strategy,
    pub bands: HardnessBands,
    pub alpha: f64,
    pub circle_buckets: BTreeMap<usize, Bucket>,
    pub level_buckets: BTreeMap<(usize, usize), Bucket>,
    pub warnings: Vec<String>,
}

impl DecompositionPlan {
    pub fn build(
        instances: &[Instance],
        strategy: Strategy,
        circles: Circles,
        bands: &HardnessBands,
        rule: &LevelRule,
        alpha: f64,
    ) -> Result<DecompositionPlan> {
        let CircleBuckets { buckets, warnings } = decompose_by_circle(instances, strategy, circles, bands);
        let mut level_buckets = BTreeMap::new();
        for (&t, bucket) in &buckets {
            for (n, b) in decompose_by_level(bucket, instances, rule)? {
                level_buckets.insert((t, n), b);
            }
        }
        Ok(DecompositionPlan { strategy, bands: *bands, alpha, circle_buckets: buckets, level_buckets, warnings })
    }

    pub fn circle_bucket(&self, t: usize) -> Option<&Bucket> {
        self.circle_buckets.get(&t)
    }

    /// Instances supervising level `n` of circle `t` (empty when none).
    pub fn level_bucket(&self, t: usize, n: usize) -> Bucket {
        self.level_buckets.get(&(t, n)).cloned().unwrap_or_default()
    }

    /// One line per (instance, circle) membership with its level.
    pub fn dump(&self) -> String {
        let mut s = String::from("instance circle level\n");
        let mut rows = Vec::new();
        for (&(t, n), b) in &self.level_buckets {
            for &id in b {
                rows.push((id, t, n));
            }
        }
        rows.sort_unstable();
        for (id, t, n) in rows {
            let _ = writeln!(s, "{id} {t} {n}");
        }
        s
    }
}
