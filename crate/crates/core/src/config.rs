//! Run configuration as flat `key=value` text with dotted sections.

use sha2::{Digest, Sha256};

use crate::circle::Circles;
use crate::decompose::Strategy;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, SubsetSpec};
use crate::heads::ScaleMode;
use crate::synth::{SceneConfig, Texture};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub detector: DetectorConfig,
    pub scene: SceneConfig,
    pub scene_count: usize,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            detector: DetectorConfig::default(),
            scene: SceneConfig::default(),
            scene_count: 100,
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Keys that determine the model's parameters and forward pass.
const MODEL_SECTIONS: [&str; 5] = ["backbone.", "circle.", "anchor.", "head.", "roi.level_"];

impl RunConfig {
    /// Every setting as `(key, value)`, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.detector;
        let t = &d.targets;
        let s = &self.scene;
        let tr = &self.train;
        let ev = &self.eval;
        let mut e: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("backbone.levels", d.backbone.levels.to_string()),
            ("backbone.input_channels", d.backbone.input_channels.to_string()),
            ("backbone.stem_channels", d.backbone.stem_channels.to_string()),
            ("backbone.channels", join(&d.backbone.channels_per_level)),
            ("backbone.blocks", d.backbone.blocks_per_level.to_string()),
            ("circle.circles", d.circle.circles.to_string()),
            ("circle.channels", d.circle.channels.to_string()),
            ("circle.encode", d.circle.post_fusion_encode.to_string()),
            ("circle.share_initial_topdown", d.circle.share_initial_topdown.to_string()),
            ("anchor.base_size", d.head.anchors.base_size.to_string()),
            ("anchor.ratios", join(&d.head.anchors.ratios)),
            ("head.pool_size", d.head.pool_size.to_string()),
            ("head.fc_hidden", d.head.fc_hidden.to_string()),
            ("head.rpn_coder", join(&d.head.rpn_coder.weights)),
            ("head.roi_coder", join(&d.head.roi_coder.weights)),
            ("roi.level_k0", d.level_rule.k0.to_string()),
            ("roi.level_theta", d.level_rule.theta.to_string()),
            ("roi.level_canonical", d.level_rule.canonical.to_string()),
            (
                "roi.level_scale",
                match d.level_rule.mode {
                    ScaleMode::SqrtArea => "sqrt_area".into(),
                    ScaleMode::Area => "area".into(),
                },
            ),
            ("rpn.fg_iou", t.rpn_fg_iou.to_string()),
            ("rpn.bg_iou", t.rpn_bg_iou.to_string()),
            ("rpn.batch", t.rpn_batch.to_string()),
            ("rpn.fg_fraction", t.rpn_fg_fraction.to_string()),
            ("rpn.pre_nms_top", t.pre_nms_top.to_string()),
            ("rpn.nms", t.proposal_nms.to_string()),
            ("rpn.post_nms_top", t.post_nms_top.to_string()),
            ("rpn.min_size", t.min_proposal_size.to_string()),
            ("roi.batch", t.roi_batch.to_string()),
            ("roi.fg_fraction", t.roi_fg_fraction.to_string()),
            ("roi.fg_iou", t.roi_fg_iou.to_string()),
            ("decomp.strategy", d.decomposition.strategy.to_string()),
            ("decomp.alpha", d.decomposition.alpha.to_string()),
            ("decomp.easy_visibility", d.decomposition.bands.easy.to_string()),
            ("decomp.hard_visibility", d.decomposition.bands.hard.to_string()),
            ("infer.proposals", d.inference.proposals.to_string()),
            ("infer.score_threshold", d.inference.score_threshold.to_string()),
            ("infer.nms", d.inference.nms.to_string()),
            ("infer.max_detections", d.inference.max_detections.to_string()),
            ("scene.count", self.scene_count.to_string()),
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.min_instances", s.min_instances.to_string()),
            ("scene.max_instances", s.max_instances.to_string()),
            ("scene.min_figure_height", s.min_figure_height.to_string()),
            ("scene.max_figure_height", s.max_figure_height.to_string()),
            ("scene.occluder_probability", s.occluder_probability.to_string()),
            ("scene.min_occlusion", s.min_occlusion.to_string()),
            ("scene.max_occlusion", s.max_occlusion.to_string()),
            ("scene.max_clutter", s.max_clutter.to_string()),
            ("scene.texture", s.texture.to_string()),
            ("train.steps", tr.steps.to_string()),
            ("train.batch_size", tr.batch_size.to_string()),
            ("train.lr", tr.learning_rate.to_string()),
            ("train.momentum", tr.momentum.to_string()),
            ("train.weight_decay", tr.weight_decay.to_string()),
            ("train.clip_norm", tr.clip_norm.to_string()),
            ("train.warmup_steps", tr.warmup_steps.to_string()),
            ("train.decay_steps", join(&tr.decay_steps)),
            ("eval.iou", ev.iou_threshold.to_string()),
            ("eval.fppi_lo", ev.fppi_lo.to_string()),
            ("eval.fppi_hi", ev.fppi_hi.to_string()),
            ("eval.fppi_points", ev.fppi_points.to_string()),
            ("eval.subsets", ev.subsets.iter().map(|s| s.name.clone()).collect::<Vec<_>>().join(",")),
        ];
        e.sort_by(|a, b| a.0.cmp(b.0));
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.detector;
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "backbone.levels" => {
                let n: usize = parse_num(key, v)?;
                d.backbone.levels = n;
                d.circle.levels = n;
                d.level_rule.levels = n;
            }
            "backbone.input_channels" => d.backbone.input_channels = parse_num(key, v)?,
            "backbone.stem_channels" => d.backbone.stem_channels = parse_num(key, v)?,
            "backbone.channels" => d.backbone.channels_per_level = parse_list(key, v)?,
            "backbone.blocks" => d.backbone.blocks_per_level = parse_num(key, v)?,
            "circle.circles" => d.circle.circles = v.parse::<Circles>()?,
            "circle.channels" => d.circle.channels = parse_num(key, v)?,
            "circle.encode" => d.circle.post_fusion_encode = parse_bool(key, v)?,
            "circle.share_initial_topdown" => d.circle.share_initial_topdown = parse_bool(key, v)?,
            "anchor.base_size" => d.head.anchors.base_size = parse_num(key, v)?,
            "anchor.ratios" => d.head.anchors.ratios = parse_list(key, v)?,
            "head.pool_size" => d.head.pool_size = parse_num(key, v)?,
            "head.fc_hidden" => d.head.fc_hidden = parse_num(key, v)?,
            "head.rpn_coder" | "head.roi_coder" => {
                let w: Vec<f64> = parse_list(key, v)?;
                let w: [f64; 4] = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs four weights")))?;
                if key == "head.rpn_coder" {
                    d.head.rpn_coder.weights = w;
                } else {
                    d.head.roi_coder.weights = w;
                }
            }
            "roi.level_k0" => d.level_rule.k0 = parse_num(key, v)?,
            "roi.level_theta" => d.level_rule.theta = parse_num(key, v)?,
            "roi.level_canonical" => d.level_rule.canonical = parse_num(key, v)?,
            "roi.level_scale" => {
                d.level_rule.mode = match v {
                    "sqrt_area" => ScaleMode::SqrtArea,
                    "area" => ScaleMode::Area,
                    _ => return Err(Error::Config(format!("`{key}`: expected sqrt_area or area, got `{v}`"))),
                }
            }
            "rpn.fg_iou" => d.targets.rpn_fg_iou = parse_num(key, v)?,
            "rpn.bg_iou" => d.targets.rpn_bg_iou = parse_num(key, v)?,
            "rpn.batch" => d.targets.rpn_batch = parse_num(key, v)?,
            "rpn.fg_fraction" => d.targets.rpn_fg_fraction = parse_num(key, v)?,
            "rpn.pre_nms_top" => d.targets.pre_nms_top = parse_num(key, v)?,
            "rpn.nms" => d.targets.proposal_nms = parse_num(key, v)?,
            "rpn.post_nms_top" => d.targets.post_nms_top = parse_num(key, v)?,
            "rpn.min_size" => d.targets.min_proposal_size = parse_num(key, v)?,
            "roi.batch" => d.targets.roi_batch = parse_num(key, v)?,
            "roi.fg_fraction" => d.targets.roi_fg_fraction = parse_num(key, v)?,
            "roi.fg_iou" => d.targets.roi_fg_iou = parse_num(key, v)?,
            "decomp.strategy" => d.decomposition.strategy = v.parse::<Strategy>()?,
            "decomp.alpha" => d.decomposition.alpha = parse_num(key, v)?,
            "decomp.easy_visibility" => d.decomposition.bands.easy = parse_num(key, v)?,
            "decomp.hard_visibility" => d.decomposition.bands.hard = parse_num(key, v)?,
            "infer.proposals" => d.inference.proposals = parse_num(key, v)?,
            "infer.score_threshold" => d.inference.score_threshold = parse_num(key, v)?,
            "infer.nms" => d.inference.nms = parse_num(key, v)?,
            "infer.max_detections" => d.inference.max_detections = parse_num(key, v)?,
            "scene.count" => self.scene_count = parse_num(key, v)?,
            "scene.width" => self.scene.width = parse_num(key, v)?,
            "scene.height" => self.scene.height = parse_num(key, v)?,
            "scene.min_instances" => self.scene.min_instances = parse_num(key, v)?,
            "scene.max_instances" => self.scene.max_instances = parse_num(key, v)?,
            "scene.min_figure_height" => self.scene.min_figure_height = parse_num(key, v)?,
            "scene.max_figure_height" => self.scene.max_figure_height = parse_num(key, v)?,
            "scene.occluder_probability" => self.scene.occluder_probability = parse_num(key, v)?,
            "scene.min_occlusion" => self.scene.min_occlusion = parse_num(key, v)?,
            "scene.max_occlusion" => self.scene.max_occlusion = parse_num(key, v)?,
            "scene.max_clutter" => self.scene.max_clutter = parse_num(key, v)?,
            "scene.texture" => self.scene.texture = v.parse::<Texture>()?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => self.train.learning_rate = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse_num(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "train.decay_steps" => self.train.decay_steps = parse_list(key, v)?,
            "eval.iou" => self.eval.iou_threshold = parse_num(key, v)?,
            "eval.fppi_lo" => self.eval.fppi_lo = parse_num(key, v)?,
            "eval.fppi_hi" => self.eval.fppi_hi = parse_num(key, v)?,
            "eval.fppi_points" => self.eval.fppi_points = parse_num(key, v)?,
            "eval.subsets" => {
                self.eval.subsets = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| SubsetSpec::by_name(s.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key=value` lines of `text`. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        let ev = &self.eval;
        if !(ev.fppi_lo > 0.0 && ev.fppi_lo <= ev.fppi_hi) || ev.fppi_points == 0 {
            return Err(Error::Config("eval FPPI range must satisfy 0 < lo <= hi with at least one point".into()));
        }
        Ok(())
    }

    /// Canonical text: every key, sorted.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    /// Hash of the settings that shape the model's parameters and outputs.
    pub fn model_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| MODEL_SECTIONS.iter().any(|s| k.starts_with(s)))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hex_digest(text.as_bytes())
    }

    /// Hash of the scene settings, recorded in dataset manifests.
    pub fn scene_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("scene."))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hex_digest(text.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("circle.circles", "1/2").unwrap();
        cfg.set("train.decay_steps", "100,200").unwrap();
        cfg.set("eval.subsets", "heavy@20,reasonable").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("seed=1\nbogus.key=3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus.key"), "{err}");
        assert!(RunConfig::parse("circle.circles=1.5").is_err());
        assert!(RunConfig::parse("backbone.levels=3").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn levels_propagate() {
        let cfg = RunConfig::parse("backbone.levels=3\nbackbone.channels=8,16,16\n").unwrap();
        assert_eq!(cfg.detector.circle.levels, 3);
        assert_eq!(cfg.detector.level_rule.levels, 3);
    }

    #[test]
    fn model_hash_ignores_training_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("train.steps", "5").unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.hash(), b.hash());
        b.set("circle.channels", "16").unwrap();
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
