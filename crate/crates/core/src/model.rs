//! The n-scale detector graphs, a weighted interpreter for them, and
//! parameter / operation accounting.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{
    C2fBlock, C2fSpec, C2fVariant, ConvBlock, ConvBlockSpec, DetectHead, Form, HeadConfig, HeadKind,
    RepConvForm, SegNextAttention, SppfBlock,
};
use crate::error::{Error, Result};
use crate::fusion::Fuse;
use crate::init::{init_params, rng};
use crate::params::{join, ParamRef, ParamRole, Parameterized, Visit, VisitMut};
use crate::profile::{push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{concat_channels, upsample_nearest2x, Tensor};
use crate::weights::{StoredArray, WeightStore};

/// Name of the graph input.
pub const INPUT: &str = "images";

/// Node count of the baseline graph; the improved graph adds one
/// attention node.
pub const BASELINE_NODE_COUNT: usize = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Improved,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Improved => "improved",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "improved" => Ok(Variant::Improved),
            other => Err(Error::Input(format!(
                "unknown variant {other:?}, expected \"baseline\" or \"improved\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOp {
    Conv(ConvBlockSpec),
    C2f(C2fSpec),
    Sppf { channels: usize },
    Attention { channels: usize },
    Upsample,
    Concat,
    Head { kind: HeadKind, cfg: HeadConfig },
}

impl NodeOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeOp::Conv(_) => "Conv",
            NodeOp::C2f(s) if s.variant == C2fVariant::Emcm => "C2f-EMCM",
            NodeOp::C2f(_) => "C2f",
            NodeOp::Sppf { .. } => "SPPF",
            NodeOp::Attention { .. } => "SegNextAttention",
            NodeOp::Upsample => "Upsample",
            NodeOp::Concat => "Concat",
            NodeOp::Head { kind: HeadKind::Baseline, .. } => "Detect",
            NodeOp::Head { kind: HeadKind::Rldd, .. } => "RLDD",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    /// Producer names, either [`INPUT`] or an earlier node.
    pub inputs: Vec<String>,
}

/// Structure of a detector: nodes in topological order, the last one the
/// detection head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    variant: Variant,
    nc: usize,
    form: Form,
    nodes: Vec<Node>,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, op: NodeOp, inputs: &[&str]) -> String {
        let name = format!("model.{}", self.nodes.len());
        self.nodes.push(Node {
            name: name.clone(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name
    }

    fn conv(&mut self, from: &str, c_in: usize, c_out: usize, k: usize, s: usize) -> String {
        self.push(NodeOp::Conv(ConvBlockSpec::conv_bn_silu(c_in, c_out, k, s)), &[from])
    }

    fn c2f(&mut self, from: &str, c_in: usize, c_out: usize, n: usize, shortcut: bool, emcm: bool) -> String {
        let variant = if emcm { C2fVariant::Emcm } else { C2fVariant::Standard };
        self.push(
            NodeOp::C2f(C2fSpec {
                in_ch: c_in,
                out_ch: c_out,
                n,
                variant,
                shortcut,
            }),
            &[from],
        )
    }
}

/// Builds the baseline or improved graph for `nc` classes.
pub fn build_model(variant: Variant, nc: usize) -> Result<ModelGraph> {
    if nc == 0 {
        return Err(Error::Spec("class count must be positive".into()));
    }
    let improved = variant == Variant::Improved;
    let mut b = Builder { nodes: Vec::new() };

    let x = b.conv(INPUT, 3, 16, 3, 2);
    let x = b.conv(&x, 16, 32, 3, 2);
    let x = b.c2f(&x, 32, 32, 1, true, false);
    let x = b.conv(&x, 32, 64, 3, 2);
    let p3 = b.c2f(&x, 64, 64, 2, true, false);
    let x = b.conv(&p3, 64, 128, 3, 2);
    let p4 = b.c2f(&x, 128, 128, 2, true, improved);
    let x = b.conv(&p4, 128, 256, 3, 2);
    let x = b.c2f(&x, 256, 256, 1, true, improved);
    let mut p5 = b.push(NodeOp::Sppf { channels: 256 }, &[&x]);
    if improved {
        p5 = b.push(NodeOp::Attention { channels: 256 }, &[&p5]);
    }

    let x = b.push(NodeOp::Upsample, &[&p5]);
    let x = b.push(NodeOp::Concat, &[&x, &p4]);
    let n4 = b.c2f(&x, 384, 128, 1, false, improved);
    let x = b.push(NodeOp::Upsample, &[&n4]);
    let x = b.push(NodeOp::Concat, &[&x, &p3]);
    let out3 = b.c2f(&x, 192, 64, 1, false, false);
    let x = b.conv(&out3, 64, 64, 3, 2);
    let x = b.push(NodeOp::Concat, &[&x, &n4]);
    let out4 = b.c2f(&x, 192, 128, 1, false, improved);
    let x = b.conv(&out4, 128, 128, 3, 2);
    let x = b.push(NodeOp::Concat, &[&x, &p5]);
    let out5 = b.c2f(&x, 384, 256, 1, false, improved);

    let kind = if improved { HeadKind::Rldd } else { HeadKind::Baseline };
    b.push(
        NodeOp::Head {
            kind,
            cfg: HeadConfig::new(nc),
        },
        &[&out3, &out4, &out5],
    );

    let g = ModelGraph {
        variant,
        nc,
        form: Form::Train,
        nodes: b.nodes,
    };
    g.validate()?;
    Ok(g)
}

impl ModelGraph {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Same structure in another form.
    pub fn in_form(&self, form: Form) -> ModelGraph {
        ModelGraph { form, ..self.clone() }
    }

    pub fn head_config(&self) -> &HeadConfig {
        match &self.nodes.last().expect("validated graph has a head").op {
            NodeOp::Head { cfg, .. } => cfg,
            _ => unreachable!("validated graph ends in a head"),
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        match &self.nodes.last().expect("validated graph has a head").op {
            NodeOp::Head { kind, .. } => *kind,
            _ => unreachable!("validated graph ends in a head"),
        }
    }

    pub fn count_nodes(&self, kind_name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind_name() == kind_name).count()
    }

    /// Number of multi-scale attention blocks (one per attention node).
    pub fn msca_count(&self) -> usize {
        self.count_nodes("SegNextAttention")
    }

    /// `(distinct RepConv blocks, times they are applied per forward)`.
    pub fn repconv_counts(&self) -> (usize, usize) {
        match self.head_kind() {
            HeadKind::Rldd => (2, 2 * 3),
            HeadKind::Baseline => (0, 0),
        }
    }

    /// Names are unique, every input refers to [`INPUT`] or an earlier node,
    /// and exactly the last node is a head with three inputs.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if inp != INPUT && !seen.contains(inp.as_str()) {
                    return Err(Error::Spec(format!("{} reads {inp}, which is not produced earlier", node.name)));
                }
            }
            if !seen.insert(node.name.as_str()) {
                return Err(Error::Spec(format!("duplicate node name {}", node.name)));
            }
            let is_head = matches!(node.op, NodeOp::Head { .. });
            if is_head != (i + 1 == self.nodes.len()) {
                return Err(Error::Spec(format!("{}: the head must be the last node and only there", node.name)));
            }
            let arity_ok = match node.op {
                NodeOp::Concat => node.inputs.len() >= 2,
                NodeOp::Head { .. } => node.inputs.len() == 3,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Spec(format!("{} has {} inputs", node.name, node.inputs.len())));
            }
        }
        if self.nodes.is_empty() {
            return Err(Error::Spec("graph has no nodes".into()));
        }
        Ok(())
    }
}

// built once per graph and never moved in hot loops
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv(ConvBlock),
    C2f(C2fBlock),
    Sppf(SppfBlock),
    Attention(SegNextAttention),
    Upsample,
    Concat,
    Head(DetectHead),
}

impl Layer {
    fn build(op: &NodeOp, form: Form) -> Result<Layer> {
        Ok(match op {
            NodeOp::Conv(bs) => Layer::Conv(ConvBlock::new(bs.in_form(form))),
            NodeOp::C2f(spec) => Layer::C2f(C2fBlock::new(*spec, form)?),
            NodeOp::Sppf { channels } => Layer::Sppf(SppfBlock::new(*channels, form)),
            NodeOp::Attention { channels } => Layer::Attention(SegNextAttention::new(*channels)),
            NodeOp::Upsample => Layer::Upsample,
            NodeOp::Concat => Layer::Concat,
            NodeOp::Head { kind, cfg } => Layer::Head(DetectHead::new(*kind, cfg.clone(), form)),
        })
    }

    fn params(&self) -> Option<&dyn Parameterized> {
        match self {
            Layer::Conv(b) => Some(b),
            Layer::C2f(b) => Some(b),
            Layer::Sppf(b) => Some(b),
            Layer::Attention(b) => Some(b),
            Layer::Head(b) => Some(b),
            Layer::Upsample | Layer::Concat => None,
        }
    }

    fn params_mut(&mut self) -> Option<&mut dyn Parameterized> {
        match self {
            Layer::Conv(b) => Some(b),
            Layer::C2f(b) => Some(b),
            Layer::Sppf(b) => Some(b),
            Layer::Attention(b) => Some(b),
            Layer::Head(b) => Some(b),
            Layer::Upsample | Layer::Concat => None,
        }
    }

    fn fuse(&self) -> Result<Layer> {
        Ok(match self {
            Layer::Conv(b) => Layer::Conv(b.fuse()?),
            Layer::C2f(b) => Layer::C2f(b.fuse()?),
            Layer::Sppf(b) => Layer::Sppf(b.fuse()?),
            Layer::Attention(b) => Layer::Attention(b.fuse()?),
            Layer::Head(b) => Layer::Head(b.fuse()?),
            Layer::Upsample => Layer::Upsample,
            Layer::Concat => Layer::Concat,
        })
    }
}

/// Map produced by a node: one tensor, or three for the head.
enum Value {
    One(Tensor),
    Three([Tensor; 3]),
}

/// A graph with weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    graph: ModelGraph,
    layers: Vec<Layer>,
    /// Index of each node input: `None` for the graph input.
    sources: Vec<Vec<Option<usize>>>,
}

impl Network {
    /// All conv weights zero, batch norms identity, scales one.
    pub fn new(graph: &ModelGraph) -> Result<Self> {
        graph.validate()?;
        let layers = graph
            .nodes
            .iter()
            .map(|n| Layer::build(&n.op, graph.form))
            .collect::<Result<_>>()?;
        let sources = graph
            .nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .map(|i| (i != INPUT).then(|| graph.nodes.iter().position(|m| &m.name == i).expect("validated")))
                    .collect()
            })
            .collect();
        Ok(Network {
            graph: graph.clone(),
            layers,
            sources,
        })
    }

    /// Deterministic initialisation from `seed`.
    pub fn seeded(graph: &ModelGraph, seed: u64) -> Result<Self> {
        let mut net = Self::new(graph)?;
        init_params(&mut net, &mut rng(seed))?;
        Ok(net)
    }

    /// Fills a fresh network from `store`. Fails, naming the node, when a
    /// tensor is missing or has the wrong shape, and when `store` holds
    /// tensors the graph does not use.
    pub fn from_store(graph: &ModelGraph, store: &WeightStore) -> Result<Self> {
        let mut net = Self::new(graph)?;
        let mut used = std::collections::HashSet::new();
        for (node, layer) in net.graph.nodes.iter().zip(net.layers.iter_mut()) {
            let Some(p) = layer.params_mut() else { continue };
            p.visit_params_mut(&node.name, &mut |param| {
                let arr = store.get(param.name).ok_or_else(|| {
                    Error::Validation(format!("node {}: missing tensor {}", node.name, param.name))
                })?;
                if arr.dims != param.dims {
                    return Err(Error::Validation(format!(
                        "node {}: tensor {} has dims {:?}, expected {:?}",
                        node.name, param.name, arr.dims, param.dims
                    )));
                }
                param.data.copy_from_slice(&arr.data);
                used.insert(param.name.to_string());
                Ok(())
            })?;
        }
        if let Some(extra) = store.names().find(|n| !used.contains(*n)) {
            return Err(Error::Validation(format!(
                "unexpected tensor {extra} for the {} {} graph",
                graph.variant,
                form_name(graph.form)
            )));
        }
        Ok(net)
    }

    /// Loads `store` into whichever form of the variant's graph matches it.
    pub fn from_store_any_form(variant: Variant, nc: usize, store: &WeightStore) -> Result<Self> {
        let g = build_model(variant, nc)?;
        match Self::from_store(&g, store) {
            Ok(n) => Ok(n),
            Err(train_err) => Self::from_store(&g.in_form(Form::Deploy), store).map_err(|_| train_err),
        }
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        self.visit_params("", &mut |p| {
            store.insert(
                p.name,
                StoredArray {
                    dims: p.dims.to_vec(),
                    data: p.data.to_vec(),
                },
            );
        });
        store
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn head(&self) -> &DetectHead {
        match self.layers.last() {
            Some(Layer::Head(h)) => h,
            _ => unreachable!("validated graph ends in a head"),
        }
    }

    pub fn head_mut(&mut self) -> &mut DetectHead {
        match self.layers.last_mut() {
            Some(Layer::Head(h)) => h,
            _ => unreachable!("validated graph ends in a head"),
        }
    }

    /// True when a RepConv is still in multi-branch form.
    pub fn has_unfused_repconv(&self) -> bool {
        match self.head() {
            DetectHead::Rldd(h) => h.rep.iter().any(|r| matches!(r.form, RepConvForm::Train { .. })),
            DetectHead::Baseline(_) => false,
        }
    }

    /// Raw head maps for P3, P4, P5, each `[n, nc + 4·reg_max, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        if x.c() != 3 {
            return Err(Error::shape("input channels", 3, x.c()));
        }
        let n = self.layers.len();
        // Last consumer of each node, so intermediate maps can be dropped.
        let mut last_use = vec![0usize; n];
        for (i, srcs) in self.sources.iter().enumerate() {
            for s in srcs.iter().flatten() {
                last_use[*s] = i;
            }
        }
        let mut values: Vec<Option<Value>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            let ins: Vec<&Tensor> = self.sources[i]
                .iter()
                .map(|s| match s {
                    None => Ok(x),
                    Some(j) => match &values[*j] {
                        Some(Value::One(t)) => Ok(t),
                        _ => Err(Error::State(format!("{} input not available", self.graph.nodes[i].name))),
                    },
                })
                .collect::<Result<_>>()?;
            let out = match &self.layers[i] {
                Layer::Conv(b) => Value::One(b.forward(ins[0])?),
                Layer::C2f(b) => Value::One(b.forward(ins[0])?),
                Layer::Sppf(b) => Value::One(b.forward(ins[0])?),
                Layer::Attention(b) => Value::One(b.forward(ins[0])?),
                Layer::Upsample => Value::One(upsample_nearest2x(ins[0])),
                Layer::Concat => Value::One(concat_channels(&ins)?),
                Layer::Head(h) => Value::Three(h.forward([ins[0], ins[1], ins[2]])?),
            };
            values[i] = Some(out);
            for s in self.sources[i].iter().flatten() {
                if last_use[*s] == i {
                    values[*s] = None;
                }
            }
        }
        match values.pop().flatten() {
            Some(Value::Three(maps)) => Ok(maps),
            _ => Err(Error::State("graph produced no head output".into())),
        }
    }

    /// Inference-form copy with every batch norm and RepConv folded.
    pub fn fuse(&self) -> Result<Network> {
        Ok(Network {
            graph: self.graph.in_form(Form::Deploy),
            layers: self.layers.iter().map(Layer::fuse).collect::<Result<_>>()?,
            sources: self.sources.clone(),
        })
    }

    /// Learnable parameters per node.
    pub fn node_param_counts(&self) -> Vec<(String, usize)> {
        self.graph
            .nodes
            .iter()
            .zip(&self.layers)
            .map(|(n, l)| (n.name.clone(), l.params().map_or(0, |p| p.param_count())))
            .collect()
    }

    /// Primitive layer listing for an input of `hw×hw` (batch 1), grouped by node.
    pub fn profile(&self, input_hw: (usize, usize)) -> Result<Vec<NodeProfile>> {
        let mut dims: Vec<Vec<[usize; 4]>> = Vec::with_capacity(self.layers.len());
        let input = [1, 3, input_hw.0, input_hw.1];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (node, layer)) in self.graph.nodes.iter().zip(&self.layers).enumerate() {
            let ins: Vec<[usize; 4]> = self.sources[i]
                .iter()
                .map(|s| s.map_or(input, |j| dims[j][0]))
                .collect();
            let mut records = Vec::new();
            let p = &node.name;
            let outs = match layer {
                Layer::Conv(b) => vec![b.profile(p, ins[0], &mut records)?],
                Layer::C2f(b) => vec![b.profile(p, ins[0], &mut records)?],
                Layer::Sppf(b) => vec![b.profile(p, ins[0], &mut records)?],
                Layer::Attention(b) => vec![b.profile(p, ins[0], &mut records)?],
                Layer::Upsample => {
                    let d = [ins[0][0], ins[0][1], ins[0][2] * 2, ins[0][3] * 2];
                    push_elementwise(&mut records, p.clone(), LayerKind::Upsample, d);
                    vec![d]
                }
                Layer::Concat => {
                    let first = ins[0];
                    for d in &ins[1..] {
                        if (d[0], d[2], d[3]) != (first[0], first[2], first[3]) {
                            return Err(Error::shape(format!("{p} spatial size"), first[2], d[2]));
                        }
                    }
                    let d = [first[0], ins.iter().map(|d| d[1]).sum(), first[2], first[3]];
                    push_elementwise(&mut records, p.clone(), LayerKind::Concat, d);
                    vec![d]
                }
                Layer::Head(h) => h.profile_levels(p, [ins[0], ins[1], ins[2]], &mut records)?.to_vec(),
            };
            out.push(NodeProfile {
                name: node.name.clone(),
                kind: node.op.kind_name(),
                inputs: node.inputs.clone(),
                out_dims: outs.clone(),
                params: layer.params().map_or(0, |q| q.param_count()),
                macs: records.iter().map(|r| r.macs).sum(),
                elementwise_ops: records.iter().map(|r| r.elementwise_ops).sum(),
                layers: records,
            });
            dims.push(outs);
        }
        Ok(out)
    }
}

fn form_name(form: Form) -> &'static str {
    match form {
        Form::Train => "train-form",
        Form::Deploy => "fused",
    }
}

impl Parameterized for Network {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        for (node, layer) in self.graph.nodes.iter().zip(&self.layers) {
            if let Some(p) = layer.params() {
                p.visit_params(&join(prefix, &node.name), f);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        for (node, layer) in self.graph.nodes.iter().zip(self.layers.iter_mut()) {
            if let Some(p) = layer.params_mut() {
                p.visit_params_mut(&join(prefix, &node.name), f)?;
            }
        }
        Ok(())
    }
}

/// One node's share of a profile.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeProfile {
    pub name: String,
    pub kind: &'static str,
    pub inputs: Vec<String>,
    pub out_dims: Vec<[usize; 4]>,
    pub params: usize,
    pub macs: u64,
    pub elementwise_ops: u64,
    pub layers: Vec<LayerRecord>,
}

/// Per-node and total figures for a graph at one input size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub variant: Variant,
    pub form: Form,
    pub input_hw: (usize, usize),
    pub nodes: Vec<NodeProfile>,
}

impl ModelSummary {
    pub fn total_params(&self) -> usize {
        self.nodes.iter().map(|n| n.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    pub fn total_elementwise_ops(&self) -> u64 {
        self.nodes.iter().map(|n| n.elementwise_ops).sum()
    }

    /// `2·MACs + elementwise ops`.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs() + self.total_elementwise_ops()
    }

    /// Number of primitive layers (convs, norms, activations, pools, ...).
    pub fn layer_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layers.len()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerRecord> {
        self.nodes.iter().flat_map(|n| n.layers.iter())
    }
}

/// Shapes, parameters and operation counts without allocating real weights
/// beyond zero buffers.
pub fn summarize(graph: &ModelGraph, input_hw: (usize, usize)) -> Result<ModelSummary> {
    let net = Network::new(graph)?;
    Ok(ModelSummary {
        variant: graph.variant,
        form: graph.form,
        input_hw,
        nodes: net.profile(input_hw)?,
    })
}

/// `(per-node learnable parameters, total)`.
pub fn param_count(graph: &ModelGraph) -> Result<(Vec<(String, usize)>, usize)> {
    let per = Network::new(graph)?.node_param_counts();
    let total = per.iter().map(|(_, c)| c).sum();
    Ok((per, total))
}

/// `(per-node multiply-accumulates, total)` for a batch-1 input.
pub fn flop_count(graph: &ModelGraph, input_hw: (usize, usize)) -> Result<(Vec<(String, u64)>, u64)> {
    let s = summarize(graph, input_hw)?;
    let per: Vec<(String, u64)> = s.nodes.iter().map(|n| (n.name.clone(), n.macs)).collect();
    Ok((per, s.total_macs()))
}

/// Seeded initial weights for `graph`.
pub fn init_weights(graph: &ModelGraph, seed: u64) -> Result<WeightStore> {
    Ok(Network::seeded(graph, seed)?.to_store())
}

/// Euclidean norm over every learnable value, for spotting drift.
pub fn learnable_norm(p: &dyn Parameterized) -> f64 {
    let mut sum = 0.0f64;
    p.visit_params("", &mut |r: ParamRef<'_>| {
        if r.role.is_learnable() {
            sum += r.data.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
        }
    });
    sum.sqrt()
}

/// Count of learnable scalars with the given role.
pub fn count_role(p: &dyn Parameterized, role: ParamRole) -> usize {
    let mut n = 0;
    p.visit_params("", &mut |r| {
        if r.role == role {
            n += r.data.len();
        }
    });
    n
}
