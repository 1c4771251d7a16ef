//! The generate, train, eval and inspect commands as library calls.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::boxes::Detection;
use crate::checkpoint::Checkpoint;
use crate::circle::{dataflow_graph, pathway_parameter_count, CircleConfig, Circles, DataflowGraph, NodeLabel, OpKind, Pathway};
use crate::config::RunConfig;
use crate::detector::{normalize_image, Detector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::io::{self, Manifest};
use crate::synth::generate_dataset;
use crate::tensor::Tensor;
use crate::train::{loss_log_header, loss_log_line, train, StepLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const CONFIG_FILE: &str = "config.txt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders `scene.count` scenes into `out` with the run seed.
pub fn generate(config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let scene = crate::synth::SceneConfig { seed: config.seed, ..config.scene.clone() };
    let scenes = generate_dataset(&scene, config.scene_count)?;
    let images: Vec<Tensor<f32>> = scenes.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<_> = scenes.into_iter().map(|s| s.gts).collect();
    let manifest = Manifest {
        count: images.len(),
        width: scene.width,
        height: scene.height,
        seed: config.seed,
        config_hash: config.scene_hash(),
    };
    create_dir(out)?;
    io::save_dataset(out, &manifest, &images, &gts)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub warnings: Vec<String>,
    pub checkpoint: PathBuf,
}

/// Trains on the dataset in `data`, writing the loss log and checkpoint to
/// `out`. The log is flushed line by line, so a run aborted by a
/// non-finite loss keeps every completed step.
pub fn train_run(config: &RunConfig, data: &Path, out: &Path, mut progress: impl FnMut(&StepLog)) -> Result<TrainSummary> {
    config.validate()?;
    let ds = io::load_dataset(data)?;
    let mut detector = Detector::<f32>::new(config.detector.clone(), config.seed)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &config.to_text())?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let circles = config.detector.circle.circles.detection_circles();
    writeln!(log, "{}", loss_log_header(&circles)).map_err(|e| Error::io(&log_path, e))?;
    let mut final_loss = None;
    let warnings = train(&mut detector, &ds.images, &ds.gts, &config.train, config.seed, |step| {
        writeln!(log, "{}", loss_log_line(step, &circles)).map_err(|e| Error::io(&log_path, e))?;
        final_loss = Some(step.loss.total);
        progress(step);
        Ok(())
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::of(&detector, config, config.train.steps as u64).save(&checkpoint)?;
    Ok(TrainSummary { steps: config.train.steps, final_loss, warnings, checkpoint })
}

/// Runs the detector over every image, in parallel across images.
pub fn detect_all(detector: &Detector<f32>, images: &[Tensor<f32>]) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|img| Ok(detector.detect(&normalize_image::<f32>(img))?.remove(0)))
        .collect()
}

/// Where evaluation takes its detections from.
pub enum DetectionSource<'a> {
    Checkpoint(&'a Path),
    File(&'a Path),
}

/// Evaluates detections against the dataset in `data`. A checkpoint is run
/// over the images first; if `config` is given its model settings must
/// match the checkpoint's. Writes the report (and the detections, when
/// produced here) to `out`.
pub fn eval_run(config: Option<&RunConfig>, source: DetectionSource<'_>, data: &Path, out: &Path) -> Result<EvalReport> {
    let ds = io::load_dataset(data)?;
    let (dets, settings) = match source {
        DetectionSource::File(path) => {
            let recs = io::read_records(path)?;
            let dets = io::group_detections(&recs, ds.images.len(), path)?;
            (dets, config.cloned().unwrap_or_default().eval)
        }
        DetectionSource::Checkpoint(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let run = match config {
                Some(c) => {
                    let (want, have) = (c.model_hash(), ck.config.model_hash());
                    if want != have {
                        return Err(Error::Config(format!(
                            "config model hash {want} does not match checkpoint model hash {have} ({})",
                            path.display()
                        )));
                    }
                    c.clone()
                }
                None => ck.config.clone(),
            };
            let mut detector = ck.into_detector()?;
            detector.config = run.detector.clone();
            let dets = detect_all(&detector, &ds.images)?;
            create_dir(out)?;
            io::write_records(&out.join(DETECTIONS_FILE), &io::detection_records(&dets))?;
            (dets, run.eval)
        }
    };
    let pairs: Vec<_> = dets.into_iter().zip(ds.gts).collect();
    let report = evaluate(&pairs, &settings)?;
    create_dir(out)?;
    write_file(&out.join(REPORT_FILE), &report.to_text())?;
    Ok(report)
}

/// Reference FPN dataflow: per-level projection, then one top-down pass.
pub fn reference_fpn(config: &CircleConfig) -> DataflowGraph {
    let mut g = DataflowGraph::default();
    let levels = config.levels;
    let node = |kind, level, circle, pathway, param: Option<String>| NodeLabel { kind, level, circle, pathway, param };
    let conv = |k, s| OpKind::Conv { kernel: k, stride: s };
    let mut proj = BTreeMap::new();
    for n in 1..=levels {
        let i = g.add_node(node(OpKind::Input, n, 0, Pathway::Backbone, None), &[]);
        let p = g.add_node(node(conv(1, 1), n, 0, Pathway::Projection, Some(format!("circle.proj.{n}.w"))), &[i]);
        proj.insert(n, p);
    }
    let prefix = if config.share_initial_topdown { "circle.td" } else { "circle.td0" };
    let mut above: Option<usize> = None;
    for n in (1..=levels).rev() {
        let td = |g: &mut DataflowGraph, kind, param: Option<String>, inputs: &[usize]| {
            g.add_node(node(kind, n, 0, Pathway::TopDown, param), inputs)
        };
        let a = td(&mut g, conv(3, 1), Some(format!("{prefix}.{n}.lat3.w")), &[proj[&n]]);
        let mut s = td(&mut g, conv(1, 1), Some(format!("{prefix}.{n}.lat1.w")), &[a]);
        if let Some(up_src) = above {
            let up = td(&mut g, OpKind::Upsample, None, &[up_src]);
            s = td(&mut g, OpKind::Add, None, &[s, up]);
        }
        if config.post_fusion_encode {
            let e = td(&mut g, conv(3, 1), Some(format!("{prefix}.{n}.enc.w")), &[s]);
            s = td(&mut g, OpKind::Relu, None, &[e]);
        }
        above = Some(s);
    }
    g
}

/// Reference PANet dataflow: FPN followed by one bottom-up pass.
pub fn reference_panet(config: &CircleConfig) -> DataflowGraph {
    let mut g = reference_fpn(config);
    let levels = config.levels;
    let out_of = |g: &DataflowGraph, level: usize| {
        g.nodes
            .iter()
            .rposition(|n| n.pathway == Pathway::TopDown && n.level == level && n.circle == 0)
            .expect("top-down output")
    };
    let conv = |k, s| OpKind::Conv { kernel: k, stride: s };
    let mut below = out_of(&g, 1);
    for n in 2..=levels {
        let lateral = out_of(&g, n);
        let bu = |g: &mut DataflowGraph, kind, param: Option<String>, inputs: &[usize]| {
            g.add_node(NodeLabel { kind, level: n, circle: 1, pathway: Pathway::BottomUp, param }, inputs)
        };
        let a = bu(&mut g, conv(3, 1), Some(format!("circle.bu.{n}.lat3.w")), &[lateral]);
        let b = bu(&mut g, conv(1, 1), Some(format!("circle.bu.{n}.lat1.w")), &[a]);
        let d = bu(&mut g, conv(3, 2), Some(format!("circle.bu.{n}.down.w")), &[below]);
        let mut s = bu(&mut g, OpKind::Add, None, &[b, d]);
        if config.post_fusion_encode {
            let e = bu(&mut g, conv(3, 1), Some(format!("circle.bu.{n}.enc.w")), &[s]);
            s = bu(&mut g, OpKind::Relu, None, &[e]);
        }
        below = s;
    }
    g
}

/// Isomorphism for graphs whose node labels are unique: equal node and edge
/// label multisets.
pub fn isomorphic(a: &DataflowGraph, b: &DataflowGraph) -> bool {
    let (na, ea) = a.label_multisets();
    let (nb, eb) = b.label_multisets();
    let unique = na.values().all(|&c| c == 1) && nb.values().all(|&c| c == 1);
    unique && na == nb && ea == eb
}

/// Structural name of the configured module.
pub fn structure_label(config: &CircleConfig) -> Result<String> {
    let g = dataflow_graph(config)?;
    Ok(if isomorphic(&g, &reference_fpn(config)) {
        "FPN".into()
    } else if isomorphic(&g, &reference_panet(config)) {
        "PANet".into()
    } else {
        format!("circle T={}", config.circles)
    })
}

/// Human-readable model summary followed by the dataflow graph dump.
pub fn inspect(config: &RunConfig) -> Result<String> {
    config.validate()?;
    let d = &config.detector;
    let cc = &d.circle;
    let graph = dataflow_graph(cc)?;
    let counts = pathway_parameter_count(cc, &d.backbone.channels_per_level);
    let detector = Detector::<f32>::new(d.clone(), config.seed)?;
    let mut s = String::new();
    let _ = writeln!(s, "circles {}", cc.circles);
    let _ = writeln!(s, "structure {}", structure_label(cc)?);
    let _ = writeln!(s, "parameters.total {}", detector.params.scalar_count());
    let _ = writeln!(s, "parameters.circle {}", counts.total());
    let _ = writeln!(s, "parameters.pathway_shared {}", counts.pathway());
    let _ = writeln!(s, "parameters.pathway_unshared {}", counts.unshared_pathway(cc.circles));
    let _ = writeln!(s, "ops.total {}", graph.op_count());
    for (c, n) in graph.ops_per_circle() {
        let _ = writeln!(s, "ops.circle{c} {n}");
    }
    let series: Vec<usize> = (0..=3u32)
        .map(|t| dataflow_graph(&CircleConfig { circles: Circles::whole(t), ..cc.clone() }).map(|g| g.op_count()))
        .collect::<Result<_>>()?;
    let _ = writeln!(
        s,
        "ops.by_circles {}",
        series.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(s, "graph");
    s.push_str(&graph.dump());
    Ok(s)
}
