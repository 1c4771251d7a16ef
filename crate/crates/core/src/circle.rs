//! The circling feature pyramid.
//!
//! Backbone features are projected to `d` channels and fused by an initial
//! top-down pass (`o^0`). Each circle `t` then runs a bottom-up pass over
//! `o^{t-1}` producing `e^t`, followed by a top-down pass over `e^t`
//! producing `o^t`. A half circle stops after the bottom-up pass. All passes
//! reuse one set of pathway filters, so the number of trainable parameters
//! does not depend on the number of circles.
//!
//! The dataflow is written once against [`FusionOps`]; executing it on a
//! [`Tape`] computes features, executing it on a [`GraphRecorder`] yields the
//! dataflow graph used for inspection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::init::{he_normal, Rng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, ParamVars, Tape, Var};

/// Number of circles, in steps of one half. Valid values are 0, 1/2 and
/// any whole number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Circles {
    halves: u32,
}

impl Circles {
    pub const ZERO: Circles = Circles { halves: 0 };
    pub const HALF: Circles = Circles { halves: 1 };

    pub fn whole(t: u32) -> Circles {
        Circles { halves: 2 * t }
    }

    pub fn from_halves(halves: u32) -> Result<Circles> {
        if halves == 1 || halves.is_multiple_of(2) {
            Ok(Circles { halves })
        } else {
            Err(Error::Config(format!("circle count must be 0, 1/2 or whole, got {halves}/2")))
        }
    }

    pub fn halves(self) -> u32 {
        self.halves
    }

    pub fn is_half(self) -> bool {
        self.halves == 1
    }

    /// Number of bottom-up passes after the initial top-down pass.
    pub fn bottom_up_passes(self) -> usize {
        self.halves.div_ceil(2) as usize
    }

    /// Number of top-down passes after the initial one.
    pub fn top_down_passes(self) -> usize {
        (self.halves / 2) as usize
    }

    /// Whole circle count as a real (1/2 maps to 0.5).
    pub fn as_f64(self) -> f64 {
        self.halves as f64 / 2.0
    }

    /// Indices of the circles whose features carry detection heads: the
    /// initial top-down pass for FPN (`[0]`), the augmented bottom-up pass
    /// for a half circle (`[1]`), otherwise the top-down pass of every
    /// circle (`1..=T`).
    pub fn detection_circles(self) -> Vec<usize> {
        match self.halves {
            0 => vec![0],
            1 => vec![1],
            h => (1..=(h / 2) as usize).collect(),
        }
    }
}

impl fmt::Display for Circles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.halves == 1 {
            write!(f, "1/2")
        } else {
            write!(f, "{}", self.halves / 2)
        }
    }
}

impl FromStr for Circles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" | "½" => Ok(Circles::HALF),
            other => other
                .parse::<u32>()
                .map(Circles::whole)
                .map_err(|_| Error::Config(format!("cannot parse circle count `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleConfig {
    pub levels: usize,
    pub circles: Circles,
    pub channels: usize,
    pub post_fusion_encode: bool,
    /// When false the initial top-down pass owns a separate copy of the
    /// top-down filters.
    pub share_initial_topdown: bool,
}

impl Default for CircleConfig {
    fn default() -> Self {
        CircleConfig {
            levels: 4,
            circles: Circles::whole(2),
            channels: 32,
            post_fusion_encode: true,
            share_initial_topdown: true,
        }
    }
}

impl CircleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("pyramid needs at least 2 levels, got {}", self.levels)));
        }
        if self.channels == 0 {
            return Err(Error::Config("pyramid channel count must be positive".into()));
        }
        Ok(())
    }

    fn topdown_prefix(&self, circle: usize) -> &'static str {
        if circle == 0 && !self.share_initial_topdown {
            "circle.td0"
        } else {
            "circle.td"
        }
    }
}

/// Which part of the module an operation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathway {
    Backbone,
    Projection,
    TopDown,
    BottomUp,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::Backbone => "backbone",
            Pathway::Projection => "projection",
            Pathway::TopDown => "topdown",
            Pathway::BottomUp => "bottomup",
        }
    }

    fn parse(s: &str) -> Option<Pathway> {
        Some(match s {
            "backbone" => Pathway::Backbone,
            "projection" => Pathway::Projection,
            "topdown" => Pathway::TopDown,
            "bottomup" => Pathway::BottomUp,
            _ => return None,
        })
    }
}

/// Location of an operation in the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub level: usize,
    pub circle: usize,
    pub pathway: Pathway,
}

/// The primitive operations the fusion dataflow is written against.
pub trait FusionOps {
    type Feat: Clone;

    fn conv(&mut self, x: &Self::Feat, param: &str, kernel: usize, stride: usize, site: Site) -> Result<Self::Feat>;
    fn upsample(&mut self, x: &Self::Feat, site: Site) -> Result<Self::Feat>;
    fn add(&mut self, a: &Self::Feat, b: &Self::Feat, site: Site) -> Result<Self::Feat>;
    fn relu(&mut self, x: &Self::Feat, site: Site) -> Result<Self::Feat>;
}

/// Executes the dataflow on a gradient tape.
pub struct TapeOps<'a, S> {
    pub tape: &'a mut Tape<S>,
    pub params: &'a ParamVars,
}

impl<S: Scalar> FusionOps for TapeOps<'_, S> {
    type Feat = Var;

    fn conv(&mut self, x: &Var, param: &str, kernel: usize, stride: usize, _: Site) -> Result<Var> {
        let w = self.params.get(param)?;
        let ws = self.tape.shape(w);
        let xs = self.tape.shape(*x);
        if ws[1] != xs[1] || ws[2] != kernel {
            return Err(Error::ShapeMismatch { op: "circle conv", left: xs.to_vec(), right: ws.to_vec() });
        }
        self.tape.conv2d(*x, w, stride, kernel / 2)
    }

    fn upsample(&mut self, x: &Var, _: Site) -> Result<Var> {
        self.tape.upsample_nearest(*x, 2)
    }

    fn add(&mut self, a: &Var, b: &Var, _: Site) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn relu(&mut self, x: &Var, _: Site) -> Result<Var> {
        Ok(self.tape.relu(*x))
    }
}

/// Top-down fusion at one level:
/// `o_n = lat1_n * (lat3_n * e_n) + up(o_{n+1})`, optionally followed by an
/// encode convolution and ReLU. `above` is absent at the top level.
pub fn topdown_step<O: FusionOps>(
    ops: &mut O,
    config: &CircleConfig,
    lateral: &O::Feat,
    above: Option<&O::Feat>,
    level: usize,
    circle: usize,
) -> Result<O::Feat> {
    let site = Site { level, circle, pathway: Pathway::TopDown };
    let prefix = config.topdown_prefix(circle);
    let a = ops.conv(lateral, &format!("{prefix}.{level}.lat3.w"), 3, 1, site)?;
    let mut s = ops.conv(&a, &format!("{prefix}.{level}.lat1.w"), 1, 1, site)?;
    if let Some(above) = above {
        let up = ops.upsample(above, site)?;
        s = ops.add(&s, &up, site)?;
    }
    if config.post_fusion_encode {
        s = ops.conv(&s, &format!("{prefix}.{level}.enc.w"), 3, 1, site)?;
        s = ops.relu(&s, site)?;
    }
    Ok(s)
}

/// Bottom-up fusion into level `level` (>= 2):
/// `e_level = lat1 * (lat3 * o_level) + down(e_{level-1})`, where `down` is
/// a stride-2 3x3 convolution; optionally encoded as in [`topdown_step`].
pub fn bottomup_step<O: FusionOps>(
    ops: &mut O,
    config: &CircleConfig,
    below: &O::Feat,
    lateral: &O::Feat,
    level: usize,
    circle: usize,
) -> Result<O::Feat> {
    let site = Site { level, circle, pathway: Pathway::BottomUp };
    let a = ops.conv(lateral, &format!("circle.bu.{level}.lat3.w"), 3, 1, site)?;
    let b = ops.conv(&a, &format!("circle.bu.{level}.lat1.w"), 1, 1, site)?;
    let d = ops.conv(below, &format!("circle.bu.{level}.down.w"), 3, 2, site)?;
    let mut s = ops.add(&b, &d, site)?;
    if config.post_fusion_encode {
        s = ops.conv(&s, &format!("circle.bu.{level}.enc.w"), 3, 1, site)?;
        s = ops.relu(&s, site)?;
    }
    Ok(s)
}

/// Features of every pathway, keyed by `(circle, level)`; levels count
/// from 1 (finest). `e[(0, n)]` holds the projected backbone features.
#[derive(Clone, Debug)]
pub struct PyramidState<F> {
    pub o: BTreeMap<(usize, usize), F>,
    pub e: BTreeMap<(usize, usize), F>,
    pub levels: usize,
    pub circles: Circles,
}

impl<F: Clone> PyramidState<F> {
    fn level_list(map: &BTreeMap<(usize, usize), F>, circle: usize, levels: usize) -> Option<Vec<F>> {
        (1..=levels).map(|n| map.get(&(circle, n)).cloned()).collect()
    }

    pub fn topdown(&self, circle: usize) -> Option<Vec<F>> {
        Self::level_list(&self.o, circle, self.levels)
    }

    pub fn bottomup(&self, circle: usize) -> Option<Vec<F>> {
        Self::level_list(&self.e, circle, self.levels)
    }

    /// Per detection circle, the level features the heads read.
    pub fn detection_features(&self) -> Vec<(usize, Vec<F>)> {
        self.circles
            .detection_circles()
            .into_iter()
            .map(|c| {
                let feats = if self.circles.is_half() { self.bottomup(c) } else { self.topdown(c) };
                (c, feats.expect("detection circle features present"))
            })
            .collect()
    }
}

/// Runs the whole circling module over backbone features `c_1 .. c_N`.
pub fn run_circles<O: FusionOps>(ops: &mut O, backbone: &[O::Feat], config: &CircleConfig) -> Result<PyramidState<O::Feat>> {
    config.validate()?;
    let n_levels = config.levels;
    if backbone.len() != n_levels {
        return Err(Error::invalid(
            "run_circles",
            format!("expected {n_levels} backbone levels, got {}", backbone.len()),
        ));
    }
    let mut state = PyramidState { o: BTreeMap::new(), e: BTreeMap::new(), levels: n_levels, circles: config.circles };
    for (i, c) in backbone.iter().enumerate() {
        let n = i + 1;
        let site = Site { level: n, circle: 0, pathway: Pathway::Projection };
        let p = ops.conv(c, &format!("circle.proj.{n}.w"), 1, 1, site)?;
        state.e.insert((0, n), p);
    }
    topdown_pass(ops, config, &mut state, 0)?;

    for t in 1..=config.circles.bottom_up_passes() {
        let finest = state.o[&(t - 1, 1)].clone();
        state.e.insert((t, 1), finest);
        for n in 1..n_levels {
            let below = state.e[&(t, n)].clone();
            let lateral = state.o[&(t - 1, n + 1)].clone();
            let e = bottomup_step(ops, config, &below, &lateral, n + 1, t)?;
            state.e.insert((t, n + 1), e);
        }
        if t <= config.circles.top_down_passes() {
            topdown_pass(ops, config, &mut state, t)?;
        }
    }
    Ok(state)
}

fn topdown_pass<O: FusionOps>(ops: &mut O, config: &CircleConfig, state: &mut PyramidState<O::Feat>, t: usize) -> Result<()> {
    for n in (1..=config.levels).rev() {
        let lateral = state.e[&(t, n)].clone();
        let above = state.o.get(&(t, n + 1)).cloned();
        let o = topdown_step(ops, config, &lateral, above.as_ref(), n, t)?;
        state.o.insert((t, n), o);
    }
    Ok(())
}

/// Names and shapes of every circle-module parameter.
pub fn circle_parameter_shapes(config: &CircleConfig, backbone_channels: &[usize]) -> Vec<(String, [usize; 4])> {
    let d = config.channels;
    let mut out = Vec::new();
    for (i, &c) in backbone_channels.iter().enumerate() {
        out.push((format!("circle.proj.{}.w", i + 1), [d, c, 1, 1]));
    }
    let topdown = |prefix: &str, out: &mut Vec<_>| {
        for n in 1..=config.levels {
            out.push((format!("{prefix}.{n}.lat3.w"), [d, d, 3, 3]));
            out.push((format!("{prefix}.{n}.lat1.w"), [d, d, 1, 1]));
            if config.post_fusion_encode {
                out.push((format!("{prefix}.{n}.enc.w"), [d, d, 3, 3]));
            }
        }
    };
    topdown("circle.td", &mut out);
    if !config.share_initial_topdown {
        topdown("circle.td0", &mut out);
    }
    for n in 2..=config.levels {
        out.push((format!("circle.bu.{n}.lat3.w"), [d, d, 3, 3]));
        out.push((format!("circle.bu.{n}.lat1.w"), [d, d, 1, 1]));
        out.push((format!("circle.bu.{n}.down.w"), [d, d, 3, 3]));
        if config.post_fusion_encode {
            out.push((format!("circle.bu.{n}.enc.w"), [d, d, 3, 3]));
        }
    }
    out
}

/// Initializes the circle-module parameters (He-normal, no biases).
pub fn build_circle_params<S: Scalar>(
    config: &CircleConfig,
    backbone_channels: &[usize],
    rng: &mut Rng,
    store: &mut ParamStore<S>,
) -> Result<()> {
    config.validate()?;
    if backbone_channels.len() != config.levels {
        return Err(Error::Config(format!(
            "pyramid has {} levels but backbone provides {}",
            config.levels,
            backbone_channels.len()
        )));
    }
    for (name, shape) in circle_parameter_shapes(config, backbone_channels) {
        store.insert(name, he_normal(shape, rng));
    }
    Ok(())
}

/// Closed-form parameter counts of the circle module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CircleParameterCount {
    pub projection: usize,
    pub topdown: usize,
    pub bottomup: usize,
    /// Extra top-down copy when the initial pass is not shared.
    pub initial_topdown: usize,
}

impl CircleParameterCount {
    /// The shared pathway filters (top-down plus bottom-up).
    pub fn pathway(&self) -> usize {
        self.topdown + self.bottomup
    }

    pub fn total(&self) -> usize {
        self.projection + self.topdown + self.bottomup + self.initial_topdown
    }

    /// Pathway parameters a cascade without sharing would need: one copy
    /// per whole circle.
    pub fn unshared_pathway(&self, circles: Circles) -> usize {
        circles.top_down_passes() * self.pathway()
    }
}

pub fn pathway_parameter_count(config: &CircleConfig, backbone_channels: &[usize]) -> CircleParameterCount {
    let d = config.channels;
    let enc = if config.post_fusion_encode { 9 * d * d } else { 0 };
    let topdown = config.levels * (9 * d * d + d * d + enc);
    let bottomup = (config.levels - 1) * (9 * d * d + d * d + 9 * d * d + enc);
    CircleParameterCount {
        projection: backbone_channels.iter().map(|&c| c * d).sum(),
        topdown,
        bottomup,
        initial_topdown: if config.share_initial_topdown { 0 } else { topdown },
    }
}

// ---------------------------------------------------------------------------
// Dataflow graph

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Conv { kernel: usize, stride: usize },
    Upsample,
    Add,
    Relu,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Input => write!(f, "input"),
            OpKind::Conv { kernel, stride } => write!(f, "conv{kernel}x{kernel}/s{stride}"),
            OpKind::Upsample => write!(f, "upsample"),
            OpKind::Add => write!(f, "add"),
            OpKind::Relu => write!(f, "relu"),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("graph", format!("unknown op kind `{s}`"));
        Ok(match s {
            "input" => OpKind::Input,
            "upsample" => OpKind::Upsample,
            "add" => OpKind::Add,
            "relu" => OpKind::Relu,
            conv => {
                let rest = conv.strip_prefix("conv").ok_or_else(bad)?;
                let (k, stride) = rest.split_once("/s").ok_or_else(bad)?;
                let (k1, k2) = k.split_once('x').ok_or_else(bad)?;
                if k1 != k2 {
                    return Err(bad());
                }
                OpKind::Conv { kernel: k1.parse().map_err(|_| bad())?, stride: stride.parse().map_err(|_| bad())? }
            }
        })
    }
}

/// Structural identity of a node: what it does and where.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeLabel {
    pub kind: OpKind,
    pub level: usize,
    pub circle: usize,
    pub pathway: Pathway,
    pub param: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataflowGraph {
    pub nodes: Vec<NodeLabel>,
    pub edges: Vec<(usize, usize)>,
}

impl DataflowGraph {
    pub fn add_node(&mut self, label: NodeLabel, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(label);
        for &i in inputs {
            self.edges.push((i, id));
        }
        id
    }

    /// Number of operations, excluding inputs.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind != OpKind::Input).count()
    }

    /// Operation count per circle index (inputs excluded).
    pub fn ops_per_circle(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| n.kind != OpKind::Input) {
            *out.entry(n.circle).or_insert(0) += 1;
        }
        out
    }

    /// Distinct parameter names referenced by the graph.
    pub fn parameters(&self) -> BTreeSet<String> {
        self.nodes.iter().filter_map(|n| n.param.clone()).collect()
    }

    /// Node and edge label multisets; equal multisets mean isomorphic graphs
    /// when labels are unique, which holds for every graph built here.
    pub fn label_multisets(&self) -> (BTreeMap<NodeLabel, usize>, BTreeMap<(NodeLabel, NodeLabel), usize>) {
        let mut nodes = BTreeMap::new();
        for n in &self.nodes {
            *nodes.entry(n.clone()).or_insert(0) += 1;
        }
        let mut edges = BTreeMap::new();
        for &(a, b) in &self.edges {
            *edges.entry((self.nodes[a].clone(), self.nodes[b].clone())).or_insert(0) += 1;
        }
        (nodes, edges)
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "node {i} {} level={} circle={} pathway={} param={}",
                n.kind,
                n.level,
                n.circle,
                n.pathway.name(),
                n.param.as_deref().unwrap_or("-")
            );
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "edge {a} {b}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<DataflowGraph> {
        let mut g = DataflowGraph::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::invalid("graph", format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["node", id, kind, level, circle, pathway, param] => {
                    let id: usize = id.parse().map_err(|_| bad("bad node id"))?;
                    if id != g.nodes.len() {
                        return Err(bad("node ids must be consecutive"));
                    }
                    let field = |f: &str, key: &str| f.strip_prefix(key).map(str::to_string).ok_or_else(|| bad(key));
                    let param = field(param, "param=")?;
                    g.nodes.push(NodeLabel {
                        kind: kind.parse()?,
                        level: field(level, "level=")?.parse().map_err(|_| bad("level"))?,
                        circle: field(circle, "circle=")?.parse().map_err(|_| bad("circle"))?,
                        pathway: Pathway::parse(&field(pathway, "pathway=")?).ok_or_else(|| bad("pathway"))?,
                        param: (param != "-").then_some(param),
                    });
                }
                ["edge", a, b] => {
                    let a: usize = a.parse().map_err(|_| bad("bad edge"))?;
                    let b: usize = b.parse().map_err(|_| bad("bad edge"))?;
                    g.edges.push((a, b));
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        if g.edges.iter().any(|&(a, b)| a >= g.nodes.len() || b >= g.nodes.len()) {
            return Err(Error::invalid("graph", "edge references a missing node"));
        }
        Ok(g)
    }
}

/// Records the dataflow symbolically instead of computing it.
#[derive(Default)]
pub struct GraphRecorder {
    pub graph: DataflowGraph,
}

impl GraphRecorder {
    pub fn input(&mut self, level: usize) -> usize {
        self.graph.add_node(
            NodeLabel { kind: OpKind::Input, level, circle: 0, pathway: Pathway::Backbone, param: None },
            &[],
        )
    }

    fn op(&mut self, kind: OpKind, site: Site, param: Option<&str>, inputs: &[usize]) -> usize {
        let label = NodeLabel {
            kind,
            level: site.level,
            circle: site.circle,
            pathway: site.pathway,
            param: param.map(str::to_string),
        };
        self.graph.add_node(label, inputs)
    }
}

impl FusionOps for GraphRecorder {
    type Feat = usize;

    fn conv(&mut self, x: &usize, param: &str, kernel: usize, stride: usize, site: Site) -> Result<usize> {
        Ok(self.op(OpKind::Conv { kernel, stride }, site, Some(param), &[*x]))
    }

    fn upsample(&mut self, x: &usize, site: Site) -> Result<usize> {
        Ok(self.op(OpKind::Upsample, site, None, &[*x]))
    }

    fn add(&mut self, a: &usize, b: &usize, site: Site) -> Result<usize> {
        Ok(self.op(OpKind::Add, site, None, &[*a, *b]))
    }

    fn relu(&mut self, x: &usize, site: Site) -> Result<usize> {
        Ok(self.op(OpKind::Relu, site, None, &[*x]))
    }
}

/// Dataflow graph of the circle module for `config`.
pub fn dataflow_graph(config: &CircleConfig) -> Result<DataflowGraph> {
    let mut rec = GraphRecorder::default();
    let inputs: Vec<usize> = (1..=config.levels).map(|n| rec.input(n)).collect();
    run_circles(&mut rec, &inputs, config)?;
    Ok(rec.graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;
    use crate::tensor::Tensor;

    fn identity_params(config: &CircleConfig) -> ParamStore<f64> {
        let d = config.channels;
        let mut store = ParamStore::new();
        for (name, shape) in circle_parameter_shapes(config, &vec![d; config.levels]) {
            let k = shape[2];
            let t = Tensor::from_fn(shape, |[o, i, y, x]| if o == i && y == k / 2 && x == k / 2 { 1.0 } else { 0.0 });
            store.insert(name, t);
        }
        store
    }

    fn ramp(shape: [usize; 4], offset: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |[_, c, y, x]| offset + (c * 100 + y * 10 + x) as f64)
    }

    #[test]
    fn parse_circle_counts() {
        assert_eq!("0".parse::<Circles>().unwrap(), Circles::ZERO);
        assert_eq!("1/2".parse::<Circles>().unwrap(), Circles::HALF);
        assert_eq!("0.5".parse::<Circles>().unwrap(), Circles::HALF);
        assert_eq!("3".parse::<Circles>().unwrap(), Circles::whole(3));
        assert!("1.5".parse::<Circles>().is_err());
        assert!(Circles::from_halves(3).is_err());
        assert_eq!(Circles::HALF.to_string(), "1/2");
        assert_eq!(Circles::whole(2).detection_circles(), vec![1, 2]);
        assert_eq!(Circles::ZERO.detection_circles(), vec![0]);
        assert_eq!(Circles::HALF.detection_circles(), vec![1]);
    }

    #[test]
    fn topdown_with_zero_lateral_and_no_above_is_zero() {
        let cfg = CircleConfig { channels: 4, ..CircleConfig::default() };
        let mut store = ParamStore::<f64>::new();
        build_circle_params(&cfg, &[4; 4], &mut rng(1), &mut store).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let lat = tape.constant(Tensor::zeros([1, 4, 8, 8]));
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let out = topdown_step(&mut ops, &cfg, &lat, None, 4, 0).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_shapes() {
        let cfg = CircleConfig { channels: 4, ..CircleConfig::default() };
        let mut store = ParamStore::<f64>::new();
        build_circle_params(&cfg, &[4; 4], &mut rng(1), &mut store).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let lat = tape.constant(ramp([1, 4, 8, 8], 0.0));
        let above = tape.constant(ramp([1, 4, 4, 4], 0.0));
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let o = topdown_step(&mut ops, &cfg, &lat, Some(&above), 2, 1).unwrap();
        let e = bottomup_step(&mut ops, &cfg, &lat, &above, 3, 1).unwrap();
        assert_eq!(tape.shape(o), [1, 4, 8, 8]);
        assert_eq!(tape.shape(e), [1, 4, 4, 4]);
    }

    #[test]
    fn bottomup_with_zero_inputs_is_zero() {
        let cfg = CircleConfig { channels: 2, ..CircleConfig::default() };
        let mut store = ParamStore::<f64>::new();
        build_circle_params(&cfg, &[2; 4], &mut rng(5), &mut store).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let below = tape.constant(Tensor::zeros([1, 2, 8, 8]));
        let lat = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let e = bottomup_step(&mut ops, &cfg, &below, &lat, 2, 1).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_filters_reduce_topdown_to_lateral_plus_upsample() {
        let cfg = CircleConfig { channels: 2, post_fusion_encode: false, ..CircleConfig::default() };
        let store = identity_params(&cfg);
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let lat_t = ramp([1, 2, 4, 4], -7.0);
        let above_t = ramp([1, 2, 2, 2], 0.5);
        let lat = tape.constant(lat_t.clone());
        let above = tape.constant(above_t.clone());
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let o = topdown_step(&mut ops, &cfg, &lat, Some(&above), 1, 0).unwrap();
        let want = Tensor::from_fn([1, 2, 4, 4], |[b, c, y, x]| lat_t.at([b, c, y, x]) + above_t.at([b, c, y / 2, x / 2]));
        assert_eq!(tape.value(o), &want);
    }

    #[test]
    fn identity_filters_reduce_bottomup_to_lateral_plus_strided_pick() {
        let cfg = CircleConfig { channels: 1, post_fusion_encode: false, ..CircleConfig::default() };
        let store = identity_params(&cfg);
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        // below 4x4 -> stride-2 centre tap picks rows/cols 0 and 2.
        let below = tape.constant(Tensor::new([1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap());
        let lat = tape.constant(Tensor::new([1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let e = bottomup_step(&mut ops, &cfg, &below, &lat, 2, 1).unwrap();
        // picks below[0][0]=1, below[0][2]=3, below[2][0]=9, below[2][2]=11
        assert_eq!(tape.value(e).data(), &[11.0, 23.0, 39.0, 51.0]);
    }

    fn run_state(circles: Circles) -> (PyramidState<Var>, Tape<f64>) {
        let cfg = CircleConfig { channels: 3, circles, ..CircleConfig::default() };
        let mut store = ParamStore::<f64>::new();
        build_circle_params(&cfg, &[2, 3, 4, 5], &mut rng(2), &mut store).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind(&store);
        let feats: Vec<Var> = [(2, 16), (3, 8), (4, 4), (5, 2)]
            .iter()
            .map(|&(c, s)| tape.constant(ramp([1, c, s, s], 0.1)))
            .collect();
        let mut ops = TapeOps { tape: &mut tape, params: &pv };
        let state = run_circles(&mut ops, &feats, &cfg).unwrap();
        (state, tape)
    }

    #[test]
    fn fpn_case_has_only_initial_topdown() {
        let (state, _) = run_state(Circles::ZERO);
        assert!(state.topdown(0).is_some());
        assert!(state.e.keys().all(|&(t, _)| t == 0));
        assert_eq!(state.detection_features().len(), 1);
    }

    #[test]
    fn shapes_close_over_all_circle_counts() {
        for circles in [Circles::ZERO, Circles::HALF, Circles::whole(1), Circles::whole(2), Circles::whole(3)] {
            let (state, tape) = run_state(circles);
            let base: Vec<_> = state.topdown(0).unwrap().iter().map(|&v| tape.shape(v)).collect();
            for (&(_, n), &v) in state.o.iter().chain(state.e.iter().filter(|((t, _), _)| *t > 0)) {
                assert_eq!(tape.shape(v), base[n - 1], "circles={circles}");
            }
        }
        let (state, _) = run_state(Circles::whole(2));
        for t in 0..=2 {
            assert!(state.topdown(t).is_some());
        }
    }

    #[test]
    fn parameter_count_is_constant_in_circles_and_matches_store() {
        let bb = [16, 32, 64, 64];
        let count = |t| {
            let cfg = CircleConfig { circles: Circles::whole(t), ..CircleConfig::default() };
            pathway_parameter_count(&cfg, &bb)
        };
        assert_eq!(count(1), count(3));
        let c = count(3);
        assert_eq!(c.unshared_pathway(Circles::whole(3)), 3 * c.pathway());

        let cfg = CircleConfig::default();
        let mut store = ParamStore::<f32>::new();
        build_circle_params(&cfg, &bb, &mut rng(0), &mut store).unwrap();
        let enumerated: usize = store.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(pathway_parameter_count(&cfg, &bb).total(), enumerated);
        // d = 32: td 4*(9216+1024+9216), bu 3*(9216+1024+9216+9216), proj 32*176.
        assert_eq!(enumerated, 4 * 19456 + 3 * 28672 + 32 * 176);
    }

    #[test]
    fn graph_dump_round_trips_and_counts_are_affine() {
        let mut counts = Vec::new();
        for t in 0..=3 {
            let cfg = CircleConfig { circles: Circles::whole(t), ..CircleConfig::default() };
            let g = dataflow_graph(&cfg).unwrap();
            assert_eq!(DataflowGraph::parse(&g.dump()).unwrap(), g);
            counts.push(g.op_count() as i64);
        }
        let step = counts[1] - counts[0];
        assert!(step > 0);
        for w in counts.windows(2) {
            assert_eq!(w[1] - w[0], step);
        }
    }

    #[test]
    fn every_circle_uses_the_same_parameter_set() {
        let names = |t| {
            let cfg = CircleConfig { circles: Circles::whole(t), ..CircleConfig::default() };
            dataflow_graph(&cfg).unwrap().parameters()
        };
        assert_eq!(names(1), names(2));
        assert_eq!(names(1), names(3));
    }

    #[test]
    fn unshared_initial_topdown_uses_its_own_filters() {
        let cfg = CircleConfig { share_initial_topdown: false, circles: Circles::whole(1), ..CircleConfig::default() };
        let g = dataflow_graph(&cfg).unwrap();
        let params = g.parameters();
        assert!(params.iter().any(|p| p.starts_with("circle.td0.")));
        assert!(params.iter().any(|p| p.starts_with("circle.td.")));
        let count = pathway_parameter_count(&cfg, &[16, 32, 64, 64]);
        assert_eq!(count.initial_topdown, count.topdown);
    }
}
