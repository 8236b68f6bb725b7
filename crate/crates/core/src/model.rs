//! Model assembly: edge-family MDGNNs and vertex-family baselines, their
//! stochastic layers, output heads and checkpoints.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::BasisKind;
use crate::channel::{ChannelTensor, PowerSolution, PrecodingSolution, SystemConfig};
use crate::error::{shape_err, Error, Result};
use crate::gib::{GibConfig, Solution};
use crate::perm::{build_graph, init_scale, EdgeGraph, Entity, Layout, TaskKind};
use crate::tape::{Tape, Var};

const CHECKPOINT_VERSION: u32 = 1;
const VARIANCE_BIAS_INIT: f64 = -4.0;
const SCORE_BIAS_INIT: f64 = 2.0;
const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    EdgeMdgnn,
    EibMdgnn,
    EgibBern,
    VertexGnn,
    VibGnn,
    VgibBern,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::EdgeMdgnn,
        Family::EibMdgnn,
        Family::EgibBern,
        Family::VertexGnn,
        Family::VibGnn,
        Family::VgibBern,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::EdgeMdgnn => "edge-mdgnn",
            Family::EibMdgnn => "eib-mdgnn",
            Family::EgibBern => "egib-bern",
            Family::VertexGnn => "vertex-gnn",
            Family::VibGnn => "vib-gnn",
            Family::VgibBern => "vgib-bern",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Unknown(format!("family `{s}`")))
    }

    pub fn is_vertex(self) -> bool {
        matches!(self, Family::VertexGnn | Family::VibGnn | Family::VgibBern)
    }

    pub fn has_representation_noise(self) -> bool {
        !matches!(self, Family::EdgeMdgnn | Family::VertexGnn)
    }

    pub fn samples_structure(self) -> bool {
        matches!(self, Family::EgibBern | Family::VgibBern)
    }

    /// Default index sets for an `L`-layer model of this family.
    pub fn default_gib(self, layers: usize) -> GibConfig {
        if self.samples_structure() {
            GibConfig::structure_and_representation(layers)
        } else if self.has_representation_noise() {
            GibConfig::representation(layers)
        } else {
            GibConfig {
                beta: 0.0,
                ..GibConfig::representation(layers)
            }
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadKind {
    Precoding,
    Power { basis: BasisKind },
}

impl HeadKind {
    pub fn task(self) -> TaskKind {
        match self {
            HeadKind::Precoding => TaskKind::Precoding,
            HeadKind::Power { .. } => TaskKind::Power,
        }
    }

    /// Real outputs per canonical output position.
    fn parts(self) -> usize {
        match self {
            HeadKind::Precoding => 2,
            HeadKind::Power { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Identity,
}

/// Input feature scaling applied per channel draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScaling {
    None,
    /// Divide by the root-mean-square of `|h|`.
    #[default]
    Rms,
    /// Keep the phase, compress the magnitude to `ln(1 + |h| / sqrt(noise / p))`.
    LogMagnitude,
}

/// Mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Relaxed Bernoulli masks and sampled Gaussian representations.
    Train,
    /// Hard Bernoulli masks and Gaussian means.
    Eval,
    /// Mask probabilities and Gaussian means; deterministic.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub head: HeadKind,
    /// Structure row such as `2D-GNN-L-K`; ignored by vertex families.
    pub row: String,
    pub nested: bool,
    pub topological: bool,
    #[serde(default)]
    pub mean_aggregation: bool,
    /// Widths `C_0..C_L`; `C_0` is the encoded input width.
    pub channels: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub feature_scaling: FeatureScaling,
    pub gib: GibConfig,
}

impl ModelConfig {
    /// `layers` hidden layers of width `hidden` with the family's default index sets.
    pub fn new(
        family: Family,
        head: HeadKind,
        row: &str,
        hidden: usize,
        layers: usize,
        sys: &SystemConfig,
    ) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("need at least one layer of width >= 1".into()));
        }
        let mut cfg = Self {
            family,
            head,
            row: row.to_string(),
            nested: false,
            topological: true,
            mean_aggregation: false,
            channels: vec![0; layers + 1],
            activation: Activation::LeakyRelu,
            feature_scaling: FeatureScaling::Rms,
            gib: family.default_gib(layers),
        };
        cfg.channels[0] = cfg.input_width(sys)?;
        cfg.channels[1..].iter_mut().for_each(|c| *c = hidden);
        Ok(cfg)
    }

    pub fn layers(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Encoded input width for this configuration.
    pub fn input_width(&self, sys: &SystemConfig) -> Result<usize> {
        if self.family.is_vertex() {
            return Ok(VERTEX_FEATURES);
        }
        let g = build_graph(self.head.task(), &self.row, self.nested, self.topological, sys)?;
        Ok(2 * g.folded_in.iter().map(|e| e.size(sys)).product::<usize>())
    }

    pub fn validate(&self, sys: &SystemConfig) -> Result<()> {
        if self.layers() == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!("bad channel widths {:?}", self.channels)));
        }
        let want = self.input_width(sys)?;
        if self.channels[0] != want {
            return Err(Error::InvalidConfig(format!(
                "input width {} does not match encoded width {want}",
                self.channels[0]
            )));
        }
        if self.family.has_representation_noise() || self.family.samples_structure() {
            self.gib.validate(self.layers())?;
        }
        if !self.family.samples_structure() && !self.gib.sampling_layers.is_empty() && self.family.has_representation_noise() {
            return Err(Error::InvalidConfig(format!(
                "family {} does not sample neighbours",
                self.family
            )));
        }
        if self.family.samples_structure() && !self.topological && !self.family.is_vertex() {
            return Err(Error::InvalidConfig("neighbour sampling needs a topological structure".into()));
        }
        Ok(())
    }

    fn gaussian(&self, layer: usize) -> bool {
        self.family.has_representation_noise() && self.gib.is_stochastic(layer)
    }

    fn sampling(&self, layer: usize) -> bool {
        self.family.samples_structure() && self.gib.is_sampling(layer)
    }
}

const VERTEX_FEATURES: usize = 2;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.names.push(name.into());
        self.values.push(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.values[i])
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(shape_err(self.scalar_count(), flat.len()));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of_flat(&self, mut i: usize) -> &str {
        for (n, v) in self.names.iter().zip(&self.values) {
            if i < v.len() {
                return n;
            }
            i -= v.len();
        }
        "<out of range>"
    }
}

/// Per-layer quantities recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// 1-based layer index.
    pub layer: usize,
    pub z: Var,
    pub mu: Option<Var>,
    pub var: Option<Var>,
    pub logits: Option<Var>,
    pub masks: Option<Var>,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    /// One leaf per parameter tensor, in `ParamSet` order.
    pub params: Vec<Var>,
    pub param_names: Vec<String>,
    /// Head output in canonical layout after the feasibility map.
    pub output: Var,
    pub trace: Vec<LayerTrace>,
    /// Basis used by the power head.
    pub basis: Option<ChannelTensor>,
    head: HeadKind,
    dims: (usize, usize, usize),
}

impl Forward {
    pub fn param(&self, name: &str) -> Option<Var> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.params[i])
    }

    pub fn solution(&self) -> Result<Solution> {
        let (aps, ues, ant) = self.dims;
        let out = self.tape.value(self.output);
        match self.head {
            HeadKind::Precoding => {
                let data = out
                    .chunks(2)
                    .map(|c| num_complex::Complex64::new(c[0], c[1]))
                    .collect();
                Ok(Solution::Precoding(PrecodingSolution {
                    w: ChannelTensor::from_vec(aps, ues, ant, data)?,
                }))
            }
            HeadKind::Power { .. } => Ok(Solution::Power(PowerSolution {
                p: out.to_vec(),
                precoder_basis: self
                    .basis
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("power head without basis".into()))?,
            })),
        }
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Edge {
        graph: EdgeGraph,
        layouts: Vec<Arc<Layout>>,
        /// Feature position of every canonical input entry `((m*K+k)*N+n)*2+part`.
        in_index: Vec<usize>,
        out_index: Arc<Vec<usize>>,
    },
    Vertex {
        /// Per canonical output position: (AP-side index, UE-side index, channel).
        ap_index: Arc<Vec<usize>>,
        ue_index: Arc<Vec<usize>>,
        bias_index: Arc<Vec<usize>>,
    },
}

/// An assembled model: configuration plus precomputed index maps. Parameters
/// live outside in a `ParamSet`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sys: SystemConfig,
    backbone: Backbone,
    out_channels: usize,
}

fn mixed_radix(values: &[usize], sizes: &[usize]) -> usize {
    values.iter().zip(sizes).fold(0, |acc, (v, s)| acc * s + v)
}

impl Model {
    pub fn new(config: ModelConfig, sys: SystemConfig) -> Result<Self> {
        sys.validate()?;
        config.validate(&sys)?;
        let (aps, ues, ant) = (sys.aps, sys.ues, sys.antennas);
        let parts = config.head.parts();
        let task = config.head.task();
        if config.family.is_vertex() {
            let out_channels = match task {
                TaskKind::Precoding => 2 * ant,
                TaskKind::Power => 1,
            };
            let v_n = aps + ues;
            let mut ap_index = Vec::new();
            let mut ue_index = Vec::new();
            let mut bias_index = Vec::new();
            for m in 0..aps {
                for k in 0..ues {
                    let channels: Vec<usize> = match task {
                        TaskKind::Precoding => (0..2 * ant).collect(),
                        TaskKind::Power => vec![0],
                    };
                    for o in channels {
                        ap_index.push(o * v_n + m);
                        ue_index.push(o * v_n + aps + k);
                        bias_index.push(o);
                    }
                }
            }
            return Ok(Self {
                config,
                sys,
                backbone: Backbone::Vertex {
                    ap_index: Arc::new(ap_index),
                    ue_index: Arc::new(ue_index),
                    bias_index: Arc::new(bias_index),
                },
                out_channels,
            });
        }

        let graph = build_graph(task, &config.row, config.nested, config.topological, &sys)?;
        let mut base = graph.structure.clone();
        base.mean_aggregation = config.mean_aggregation;
        let mut layouts = Vec::new();
        for l in 1..=config.layers() {
            let width = if config.gaussian(l) {
                2 * config.channels[l]
            } else {
                config.channels[l]
            };
            layouts.push(Arc::new(Layout::new(base.with_channels(config.channels[l - 1], width))?));
        }
        let lay = &graph.layout;
        let e_n = lay.edges();
        let size = |e: Entity| e.size(&sys);
        let value_of = |e: Entity, idx: [usize; 3]| match e {
            Entity::Ap => idx[0],
            Entity::Ue => idx[1],
            Entity::Antenna => idx[2],
        };
        let edge_of = |idx: [usize; 3]| -> usize {
            let vals: Vec<usize> = graph.axes.iter().map(|&a| value_of(a, idx)).collect();
            lay.flat_index(&vals)
        };
        let fold = |ents: &[Entity], idx: [usize; 3]| -> usize {
            let vals: Vec<usize> = ents.iter().map(|&a| value_of(a, idx)).collect();
            let sizes: Vec<usize> = ents.iter().map(|&a| size(a)).collect();
            mixed_radix(&vals, &sizes)
        };
        let mut in_index = Vec::with_capacity(2 * aps * ues * ant);
        for m in 0..aps {
            for k in 0..ues {
                for n in 0..ant {
                    let idx = [m, k, n];
                    let f = fold(&graph.folded_in, idx);
                    for p in 0..2 {
                        in_index.push((f * 2 + p) * e_n + edge_of(idx));
                    }
                }
            }
        }
        let mut out_index = Vec::new();
        let ant_range = if task == TaskKind::Precoding { ant } else { 1 };
        for m in 0..aps {
            for k in 0..ues {
                for n in 0..ant_range {
                    let idx = [m, k, n];
                    let f = fold(&graph.folded_out, idx);
                    for p in 0..parts {
                        out_index.push((f * parts + p) * e_n + edge_of(idx));
                    }
                }
            }
        }
        let out_channels = parts * graph.folded_out.iter().map(|&e| size(e)).product::<usize>();
        Ok(Self {
            config,
            sys,
            backbone: Backbone::Edge {
                graph,
                layouts,
                in_index,
                out_index: Arc::new(out_index),
            },
            out_channels,
        })
    }

    pub fn graph(&self) -> Option<&EdgeGraph> {
        match &self.backbone {
            Backbone::Edge { graph, .. } => Some(graph),
            Backbone::Vertex { .. } => None,
        }
    }

    /// Positions of the hidden representation (edges or vertices).
    pub fn positions(&self) -> usize {
        match &self.backbone {
            Backbone::Edge { graph, .. } => graph.edges(),
            Backbone::Vertex { .. } => self.sys.aps + self.sys.ues,
        }
    }

    /// Fresh parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let cfg = &self.config;
        let mut ps = ParamSet::new();
        let glorot = |rng: &mut R, n: usize, fan: usize, div: f64| -> Vec<f64> {
            let a = (6.0 / fan as f64).sqrt() / div;
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        for l in 1..=cfg.layers() {
            let (cin, c) = (cfg.channels[l - 1], cfg.channels[l]);
            let width = if cfg.gaussian(l) { 2 * c } else { c };
            match &self.backbone {
                Backbone::Edge { layouts, .. } => {
                    let lay = &layouts[l - 1];
                    let a = init_scale(&lay.structure);
                    let w = (0..lay.param_len()).map(|_| rng.random_range(-a..=a)).collect();
                    ps.push(format!("l{l}.w"), w);
                }
                Backbone::Vertex { .. } => {
                    ps.push(format!("l{l}.self"), glorot(rng, cin * width, cin + width, 1.0));
                    ps.push(format!("l{l}.nb"), glorot(rng, cin * width, cin + width, 1.0));
                }
            }
            let mut b = vec![0.0; width];
            if cfg.gaussian(l) {
                b[c..].iter_mut().for_each(|v| *v = VARIANCE_BIAS_INIT);
            }
            ps.push(format!("l{l}.b"), b);
            if cfg.sampling(l) {
                let groups = match &self.backbone {
                    Backbone::Edge { layouts, .. } => layouts[l - 1].neighbour_types(),
                    Backbone::Vertex { .. } => 2,
                };
                let a = 1.0 / (cin as f64).sqrt();
                let mut s = Vec::new();
                for _ in 0..groups {
                    s.extend((0..2 * cin).map(|_| rng.random_range(-a..=a)));
                    s.push(SCORE_BIAS_INIT);
                }
                ps.push(format!("l{l}.score"), s);
            }
        }
        let cl = *cfg.channels.last().unwrap();
        let oc = self.out_channels;
        match &self.backbone {
            Backbone::Edge { .. } => {
                ps.push("head.w", glorot(rng, cl * oc, cl + oc, 1.0));
            }
            Backbone::Vertex { .. } => {
                ps.push("head.ap", glorot(rng, cl * oc, cl + oc, 1.0));
                ps.push("head.ue", glorot(rng, cl * oc, cl + oc, 1.0));
            }
        }
        ps.push("head.b", vec![0.0; oc]);
        if matches!(cfg.head, HeadKind::Power { .. }) {
            ps.push("head.slack", vec![0.0]);
        }
        if (1..=cfg.layers()).any(|l| cfg.gaussian(l)) {
            let x = cfg.gib.mixture_components;
            ps.push("prior.w", vec![0.0; x]);
            ps.push("prior.mu", vec![0.0; x]);
            ps.push("prior.logvar", vec![0.0; x]);
        }
        ps
    }

    fn scaled_channel(&self, h: &ChannelTensor) -> Vec<num_complex::Complex64> {
        let data = h.as_slice();
        match self.config.feature_scaling {
            FeatureScaling::None => data.to_vec(),
            FeatureScaling::Rms => {
                let rms = (data.iter().map(|c| c.norm_sqr()).sum::<f64>() / data.len() as f64).sqrt();
                if rms > 0.0 {
                    data.iter().map(|c| c / rms).collect()
                } else {
                    data.to_vec()
                }
            }
            FeatureScaling::LogMagnitude => {
                let reference = (self.sys.noise_power() / self.sys.p_max_watt).sqrt();
                data.iter()
                    .map(|c| {
                        let r = c.norm();
                        if r == 0.0 {
                            *c
                        } else {
                            c * ((r / reference).ln_1p() / r)
                        }
                    })
                    .collect()
            }
        }
    }

    /// Input features: `[C_0, E]` for edge families, `[2, M + K]` for vertex families.
    pub fn encode(&self, h_observed: &ChannelTensor) -> Result<Vec<f64>> {
        h_observed.check_dims(self.sys.aps, self.sys.ues, self.sys.antennas)?;
        if !h_observed.is_finite() {
            return Err(Error::NonFinite("input channel".into()));
        }
        let h = self.scaled_channel(h_observed);
        match &self.backbone {
            Backbone::Edge { in_index, .. } => {
                let mut x = vec![0.0; in_index.len()];
                for (i, c) in h.iter().enumerate() {
                    x[in_index[2 * i]] = c.re;
                    x[in_index[2 * i + 1]] = c.im;
                }
                Ok(x)
            }
            Backbone::Vertex { .. } => Ok(self.vertex_features(&h)),
        }
    }

    /// Antenna-order-invariant compression: per (m, k) the mean magnitude and
    /// the magnitude of the coherent sum, averaged over partners per vertex.
    fn vertex_features(&self, h: &[num_complex::Complex64]) -> Vec<f64> {
        let (aps, ues, ant) = (self.sys.aps, self.sys.ues, self.sys.antennas);
        let v_n = aps + ues;
        let mut x = vec![0.0; VERTEX_FEATURES * v_n];
        for m in 0..aps {
            for k in 0..ues {
                let v = &h[(m * ues + k) * ant..(m * ues + k + 1) * ant];
                let a = v.iter().map(|c| c.norm()).sum::<f64>() / ant as f64;
                let b = v.iter().sum::<num_complex::Complex64>().norm() / ant as f64;
                x[m] += a / ues as f64;
                x[v_n + m] += b / ues as f64;
                x[aps + k] += a / aps as f64;
                x[v_n + aps + k] += b / aps as f64;
            }
        }
        x
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Var {
        match self.config.activation {
            Activation::LeakyRelu => tape.leaky_relu(x),
            Activation::Identity => x,
        }
    }

    fn check_finite(tape: &Tape, v: Var, layer: usize) -> Result<()> {
        let vals = tape.value(v);
        if vals.iter().all(|x| x.is_finite()) {
            return Ok(());
        }
        let max_abs = vals
            .iter()
            .filter(|x| !x.is_nan())
            .fold(0.0f64, |a, x| a.max(x.abs()));
        Err(Error::Diverged { layer, max_abs })
    }

    /// Masks from neighbour logits according to `mode`.
    fn masks<R: Rng + ?Sized>(&self, tape: &mut Tape, logits: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let n = tape.value(logits).len();
        match mode {
            Mode::Train => {
                let temp = self.config.gib.temperature;
                let noise: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                        (u.ln() - (1.0 - u).ln()) / temp
                    })
                    .collect();
                let pre = tape.affine_const(logits, 1.0 / temp, &noise)?;
                Ok(tape.logistic(pre))
            }
            Mode::Eval => {
                let hard: Vec<f64> = tape
                    .value(logits)
                    .to_vec()
                    .iter()
                    .map(|&l| {
                        let u: f64 = rng.random();
                        if u < crate::tape::logistic(l) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(tape.leaf(hard))
            }
            Mode::Expected => Ok(tape.logistic(logits)),
        }
    }

    /// Records a forward pass for one channel draw. `h_observed` is the
    /// network input; the power head also derives its basis from it.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        h_observed: &ChannelTensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let x0 = self.encode(h_observed)?;
        let mut tape = Tape::new();
        let pvars: Vec<Var> = params.values.iter().map(|v| tape.leaf(v.clone())).collect();
        let p = |name: &str| -> Result<Var> {
            params
                .names
                .iter()
                .position(|n| n == name)
                .map(|i| pvars[i])
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
        };
        let (aps, ues) = (self.sys.aps, self.sys.ues);
        let mut x = tape.leaf(x0);
        let mut trace = Vec::new();
        for l in 1..=cfg.layers() {
            let cin = cfg.channels[l - 1];
            let c = cfg.channels[l];
            if l > 1 {
                x = self.activate(&mut tape, x);
            }
            let mut logits = None;
            let mut masks = None;
            if cfg.sampling(l) {
                let lg = match &self.backbone {
                    Backbone::Edge { layouts, .. } => tape.pair_logits(&layouts[l - 1], p(&format!("l{l}.score"))?, x, cin)?,
                    Backbone::Vertex { .. } => {
                        tape.vertex_pair_logits(x, p(&format!("l{l}.score"))?, aps, ues, cin)?
                    }
                };
                logits = Some(lg);
                masks = Some(self.masks(&mut tape, lg, mode, rng)?);
            }
            let width = if cfg.gaussian(l) { 2 * c } else { c };
            let y = match &self.backbone {
                Backbone::Edge { layouts, .. } => {
                    let w = p(&format!("l{l}.w"))?;
                    match masks {
                        Some(m) => tape.masked_structured(&layouts[l - 1], w, x, m)?,
                        None => tape.structured(&layouts[l - 1], w, x)?,
                    }
                }
                Backbone::Vertex { .. } => {
                    let agg = tape.vertex_aggregate(x, masks, aps, ues, cin)?;
                    let a = tape.linear(p(&format!("l{l}.self"))?, x, cin, width)?;
                    let b = tape.linear(p(&format!("l{l}.nb"))?, agg, cin, width)?;
                    tape.add(a, b)?
                }
            };
            let y = tape.add_bias(y, p(&format!("l{l}.b"))?)?;
            Self::check_finite(&tape, y, l)?;
            let positions = tape.value(y).len() / width;
            let (z, mu, var) = if cfg.gaussian(l) {
                let half = c * positions;
                let mu = tape.gather(y, Arc::new((0..half).collect()))?;
                let pre = tape.gather(y, Arc::new((half..2 * half).collect()))?;
                let sp = tape.softplus(pre);
                let var = tape.affine_const(sp, 1.0, &vec![VARIANCE_FLOOR; half])?;
                let z = match mode {
                    Mode::Train => {
                        let eps: Vec<f64> = (0..half).map(|_| StandardNormal.sample(rng)).collect();
                        tape.reparam(mu, var, eps)?
                    }
                    Mode::Eval | Mode::Expected => mu,
                };
                (z, Some(mu), Some(var))
            } else {
                (y, None, None)
            };
            trace.push(LayerTrace {
                layer: l,
                z,
                mu,
                var,
                logits,
                masks,
            });
            x = z;
        }

        let a = self.activate(&mut tape, x);
        let cl = *cfg.channels.last().unwrap();
        let oc = self.out_channels;
        let raw = match &self.backbone {
            Backbone::Edge { out_index, .. } => {
                let o = tape.linear(p("head.w")?, a, cl, oc)?;
                let o = tape.add_bias(o, p("head.b")?)?;
                tape.gather(o, out_index.clone())?
            }
            Backbone::Vertex {
                ap_index,
                ue_index,
                bias_index,
            } => {
                let oa = tape.linear(p("head.ap")?, a, cl, oc)?;
                let ob = tape.linear(p("head.ue")?, a, cl, oc)?;
                let ga = tape.gather(oa, ap_index.clone())?;
                let gb = tape.gather(ob, ue_index.clone())?;
                let gbias = tape.gather(p("head.b")?, bias_index.clone())?;
                let s = tape.add(ga, gb)?;
                tape.add(s, gbias)?
            }
        };
        Self::check_finite(&tape, raw, cfg.layers() + 1)?;
        let (output, basis) = match cfg.head {
            HeadKind::Precoding => {
                let n = tape.value(raw).len();
                let scale = (self.sys.p_max_watt / (ues * self.sys.antennas) as f64).sqrt();
                let scaled = tape.affine_const(raw, scale, &vec![0.0; n])?;
                let w = tape.project_rows(scaled, self.sys.p_max_watt, 2 * ues * self.sys.antennas)?;
                (w, None)
            }
            HeadKind::Power { basis } => {
                let pw = tape.power_softmax(raw, p("head.slack")?, aps, ues, self.sys.p_max_watt)?;
                (pw, Some(basis.build(h_observed, &self.sys)?))
            }
        };
        Ok(Forward {
            tape,
            params: pvars,
            param_names: params.names.clone(),
            output,
            trace,
            basis,
            head: cfg.head,
            dims: (aps, ues, self.sys.antennas),
        })
    }

    /// Evaluation-mode solution.
    pub fn predict<R: Rng + ?Sized>(&self, params: &ParamSet, h_observed: &ChannelTensor, rng: &mut R) -> Result<Solution> {
        self.forward(params, h_observed, Mode::Eval, rng)?.solution()
    }

    /// Writes a checkpoint: little-endian header length, JSON header, raw `f64` payload.
    pub fn save<W: Write>(&self, params: &ParamSet, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            sys: self.sys.clone(),
            names: params.names.clone(),
            lengths: params.values.iter().map(Vec::len).collect(),
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in params.values.iter().flatten() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<(Model, ParamSet)> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
        }
        if header.names.len() != header.lengths.len() {
            return Err(Error::Format("parameter table mismatch".into()));
        }
        let model = Model::new(header.config, header.sys)?;
        let mut ps = ParamSet::new();
        let mut buf = [0u8; 8];
        for (name, n) in header.names.into_iter().zip(header.lengths) {
            let mut v = vec![0.0; n];
            for x in v.iter_mut() {
                input.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            ps.push(name, v);
        }
        let fresh = model.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        if fresh.names != ps.names || fresh.values.iter().zip(&ps.values).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Format("checkpoint parameters do not match the model".into()));
        }
        Ok((model, ps))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    sys: SystemConfig,
    names: Vec<String>,
    lengths: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_channel;
    use crate::gib::Solution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys() -> SystemConfig {
        SystemConfig::new(3, 2, 2)
    }

    fn model(family: Family, head: HeadKind, row: &str) -> Model {
        let s = sys();
        Model::new(ModelConfig::new(family, head, row, 4, 2, &s).unwrap(), s).unwrap()
    }

    #[test]
    fn real_channel_has_zero_imaginary_features() {
        let m = model(Family::EdgeMdgnn, HeadKind::Precoding, "3D-GNN-L-K-U");
        let h = ChannelTensor::from_fn(3, 2, 2, |a, b, c| num_complex::Complex64::new((a + b + c) as f64 + 1.0, 0.0));
        let x = m.encode(&h).unwrap();
        assert_eq!(x.len(), 2 * 12);
        assert!(x[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_normalization() {
        let m = model(Family::EdgeMdgnn, HeadKind::Precoding, "2D-GNN-L-K");
        let r = generate_channel(&sys(), 0.1, 3).unwrap();
        let x = m.encode(&r.h_observed).unwrap();
        let ms: f64 = x.chunks(2).count() as f64;
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / ms).sqrt();
        assert!((rms - 1.0).abs() < 1e-9, "{rms}");
    }

    #[test]
    fn deterministic_given_seed() {
        let m = model(Family::EgibBern, HeadKind::Precoding, "2D-GNN-L-K");
        let r = generate_channel(&sys(), 0.1, 4).unwrap();
        let ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let a = m.forward(&ps, &r.h_observed, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.forward(&ps, &r.h_observed, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.tape.value(a.output), b.tape.value(b.output));
    }

    #[test]
    fn heads_are_feasible() {
        let s = sys();
        for family in Family::ALL {
            for head in [HeadKind::Precoding, HeadKind::Power { basis: BasisKind::Lmmse }] {
                let m = model(family, head, "2D-GNN-L-K");
                let mut ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
                // Push outputs well past the budget.
                ps.get_mut("head.b").unwrap().iter_mut().for_each(|b| *b = 50.0);
                let r = generate_channel(&s, 0.1, 5).unwrap();
                match m.predict(&ps, &r.h_observed, &mut ChaCha8Rng::seed_from_u64(3)).unwrap() {
                    Solution::Precoding(w) => {
                        for a in 0..3 {
                            assert!(w.w.ap_power(a) <= s.p_max_watt * (1.0 + 1e-12));
                        }
                    }
                    Solution::Power(p) => {
                        for row in p.p.chunks(2) {
                            assert!(row.iter().all(|&v| v >= 0.0));
                            assert!(row.iter().sum::<f64>() <= s.p_max_watt * (1.0 + 1e-12));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_precoder() {
        let m = model(Family::EdgeMdgnn, HeadKind::Precoding, "2D-GNN-L-K");
        let mut ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        ps.get_mut("head.w").unwrap().iter_mut().for_each(|v| *v = 0.0);
        let r = generate_channel(&sys(), 0.1, 5).unwrap();
        let Solution::Precoding(w) = m.predict(&ps, &r.h_observed, &mut ChaCha8Rng::seed_from_u64(0)).unwrap() else {
            panic!()
        };
        assert!(w.w.as_slice().iter().all(|c| c.norm() == 0.0));
        assert_eq!(crate::channel::sum_se_precoding(&r.h_true, &w, &sys()).unwrap(), 0.0);
    }

    #[test]
    fn identity_layer_passes_input() {
        let s = sys();
        let mut cfg = ModelConfig::new(Family::EdgeMdgnn, HeadKind::Precoding, "3D-GNN-L-K-U", 2, 1, &s).unwrap();
        cfg.activation = Activation::LeakyRelu;
        let m = Model::new(cfg, s.clone()).unwrap();
        let mut ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let w = ps.get_mut("l1.w").unwrap();
        w.iter_mut().for_each(|v| *v = 0.0);
        w[0] = 1.0;
        w[3] = 1.0;
        let r = generate_channel(&s, 0.0, 1).unwrap();
        let f = m.forward(&ps, &r.h_observed, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.tape.value(f.trace[0].z), m.encode(&r.h_observed).unwrap().as_slice());
    }

    #[test]
    fn vanishing_variance_matches_mean_path() {
        let s = sys();
        let m = model(Family::EibMdgnn, HeadKind::Precoding, "2D-GNN-L-K");
        let mut ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let b = ps.get_mut("l2.b").unwrap();
        let half = b.len() / 2;
        b[half..].iter_mut().for_each(|v| *v = -800.0);
        let r = generate_channel(&s, 0.1, 1).unwrap();
        let a = m.forward(&ps, &r.h_observed, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let e = m.forward(&ps, &r.h_observed, Mode::Expected, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (x, y) in a.tape.value(a.output).iter().zip(e.tape.value(e.output)) {
            assert!((x - y).abs() < 1e-3 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(Family::VgibBern, HeadKind::Power { basis: BasisKind::Zf }, "2D-GNN-L-K");
        let ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let mut buf = Vec::new();
        m.save(&ps, &mut buf).unwrap();
        let (m2, ps2) = Model::load(buf.as_slice()).unwrap();
        assert_eq!(ps2, ps);
        assert_eq!(m2.config, m.config);
    }

    #[test]
    fn single_pair_vertex_model_runs() {
        let s = SystemConfig::new(1, 1, 2);
        let m = Model::new(ModelConfig::new(Family::VertexGnn, HeadKind::Precoding, "", 3, 2, &s).unwrap(), s.clone()).unwrap();
        let ps = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let r = generate_channel(&s, 0.0, 2).unwrap();
        assert!(m.predict(&ps, &r.h_observed, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(Family::parse(f.name()).unwrap(), f);
        }
        assert!(Family::parse("nope").is_err());
    }
}
