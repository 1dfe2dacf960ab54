//! Soft decision tree used as the gating network.
//!
//! Every internal node `i` computes a gate
//! `g_i = sigmoid(softmax(w_i) · x + b_i)` and sends the fraction `g_i` of
//! its inbound mass to the RIGHT child and `1 - g_i` to the left child. The
//! mass arriving at the leaves is the mixture weight vector.
//!
//! Nodes are stored breadth-first with the root at index 0; the children of
//! node `i` are `2i + 1` (left) and `2i + 2` (right). Leaves are numbered left
//! to right, so leaf 0 is the all-left path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TreeStructure {
    #[default]
    Free,
    /// One shared split per level.
    Oblivious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Sigmoid,
}

impl GateActivation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GateActivation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, g: f64) -> f64 {
        match self {
            GateActivation::Sigmoid => g * (1.0 - g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub depth: usize,
    #[serde(default)]
    pub routing_mode: RoutingMode,
    #[serde(default)]
    pub structure: TreeStructure,
    #[serde(default)]
    pub activation: GateActivation,
}

impl TreeConfig {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            routing_mode: RoutingMode::Soft,
            structure: TreeStructure::Free,
            activation: GateActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 20 {
            return Err(Error::Config(format!(
                "tree depth must be in 1..=20, got {}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn n_internal(&self) -> usize {
        (1 << self.depth) - 1
    }

    /// Number of distinct parameter nodes (internal nodes, or levels for an
    /// oblivious tree).
    pub fn n_param_nodes(&self) -> usize {
        match self.structure {
            TreeStructure::Free => self.n_internal(),
            TreeStructure::Oblivious => self.depth,
        }
    }

    /// Parameter node used by internal node `node` (its level when oblivious).
    #[inline]
    pub fn param_index(&self, node: usize) -> usize {
        match self.structure {
            TreeStructure::Free => node,
            TreeStructure::Oblivious => level_of(node),
        }
    }
}

#[inline]
fn level_of(node: usize) -> usize {
    (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafProbabilities {
    pub alpha: Vec<f64>,
}

/// Gate value of a single node, computed from scratch.
pub fn split_gate(node: &NodeParams, x: &[f64]) -> Result<f64> {
    if node.w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "split gate",
            expected: node.w.len(),
            actual: x.len(),
        });
    }
    let attention = softmax(&node.w)?;
    Ok(sigmoid(dot(&attention, x) + node.b))
}

/// Filter count of a complete tree: `input_len * (2^depth - 1)`, biases
/// excluded.
pub fn tree_param_count(depth: usize, input_len: usize) -> usize {
    input_len * ((1usize << depth) - 1)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Gate values and per-node inbound mass from one soft forward pass.
#[derive(Debug, Clone)]
pub struct RouteTrace {
    /// One gate per parameter node.
    pub gates: Vec<f64>,
    /// Inbound mass of every node, internal nodes first, then leaves.
    pub mass: Vec<f64>,
}

impl RouteTrace {
    pub fn leaves(&self, config: &TreeConfig) -> &[f64] {
        &self.mass[config.n_internal()..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteGradients {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub x: Vec<f64>,
}

/// Result of a hard traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardRoute {
    pub leaf: usize,
    pub gates_evaluated: usize,
}

/// Parameters of a tree together with the softmax of every filter, which is
/// kept in sync on every mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTree {
    config: TreeConfig,
    input_len: usize,
    nodes: Vec<NodeParams>,
    attention: Vec<Vec<f64>>,
}

impl SoftTree {
    pub fn new(config: TreeConfig, nodes: Vec<NodeParams>) -> Result<Self> {
        config.validate()?;
        if nodes.len() != config.n_param_nodes() {
            return Err(Error::DimensionMismatch {
                context: "tree node count",
                expected: config.n_param_nodes(),
                actual: nodes.len(),
            });
        }
        let input_len = nodes[0].w.len();
        if input_len == 0 {
            return Err(Error::Config("tree input length must be positive".into()));
        }
        for node in &nodes {
            if node.w.len() != input_len {
                return Err(Error::DimensionMismatch {
                    context: "tree filter length",
                    expected: input_len,
                    actual: node.w.len(),
                });
            }
            if !node.b.is_finite() || node.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite tree parameter".into()));
            }
        }
        let mut tree = Self {
            config,
            input_len,
            nodes,
            attention: Vec::new(),
        };
        tree.refresh();
        Ok(tree)
    }

    /// Filters uniform in [-0.1, 0.1], biases zero.
    pub fn init<R: Rng + ?Sized>(
        config: TreeConfig,
        input_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let nodes = (0..config.n_param_nodes())
            .map(|_| NodeParams {
                w: (0..input_len).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
                b: 0.0,
            })
            .collect();
        Self::new(config, nodes)
    }

    fn refresh(&mut self) {
        self.attention = self
            .nodes
            .iter()
            .map(|n| softmax(&n.w).expect("non-empty filter"))
            .collect();
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn set_routing_mode(&mut self, mode: RoutingMode) {
        self.config.routing_mode = mode;
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn nodes(&self) -> &[NodeParams] {
        &self.nodes
    }

    /// `softmax(w_i)` for every parameter node.
    pub fn attention(&self) -> &[Vec<f64>] {
        &self.attention
    }

    pub fn n_params(&self) -> usize {
        self.nodes.len() * (self.input_len + 1)
    }

    /// Parameters in the order `[w_0.., b_0, w_1.., b_1, ...]`.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for node in &self.nodes {
            out.extend_from_slice(&node.w);
            out.push(node.b);
        }
    }

    pub fn read_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.n_params());
        let stride = self.input_len + 1;
        for (node, chunk) in self.nodes.iter_mut().zip(flat.chunks_exact(stride)) {
            node.w.copy_from_slice(&chunk[..self.input_len]);
            node.b = chunk[self.input_len];
        }
        self.refresh();
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len {
            return Err(Error::DimensionMismatch {
                context: "tree input",
                expected: self.input_len,
                actual: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn pre_activation(&self, param: usize, x: &[f64]) -> f64 {
        dot(&self.attention[param], x) + self.nodes[param].b
    }

    #[inline]
    fn gate(&self, param: usize, x: &[f64]) -> f64 {
        self.config.activation.apply(self.pre_activation(param, x))
    }

    /// Soft forward pass keeping every gate and node mass.
    pub fn forward_trace(&self, x: &[f64]) -> Result<RouteTrace> {
        self.check_input(x)?;
        let gates: Vec<f64> = (0..self.nodes.len()).map(|p| self.gate(p, x)).collect();
        let n_internal = self.config.n_internal();
        let mut mass = vec![0.0; n_internal + self.config.n_leaves()];
        mass[0] = 1.0;
        for i in 0..n_internal {
            let g = gates[self.config.param_index(i)];
            mass[2 * i + 1] = mass[i] * (1.0 - g);
            mass[2 * i + 2] = mass[i] * g;
        }
        Ok(RouteTrace { gates, mass })
    }

    /// Soft routing: leaf masses as products of gates along each path.
    pub fn route(&self, x: &[f64]) -> Result<LeafProbabilities> {
        let trace = self.forward_trace(x)?;
        Ok(LeafProbabilities {
            alpha: trace.leaves(&self.config).to_vec(),
        })
    }

    /// Path-only traversal with gates thresholded at 0.5; a gate of exactly
    /// 0.5 goes right. Evaluates exactly `depth` gates.
    pub fn route_hard_traced(&self, x: &[f64]) -> Result<HardRoute> {
        self.check_input(x)?;
        let mut node = 0;
        let mut evaluated = 0;
        for _ in 0..self.config.depth {
            let g = self.gate(self.config.param_index(node), x);
            evaluated += 1;
            node = if g >= 0.5 { 2 * node + 2 } else { 2 * node + 1 };
        }
        Ok(HardRoute {
            leaf: node - self.config.n_internal(),
            gates_evaluated: evaluated,
        })
    }

    pub fn route_hard(&self, x: &[f64]) -> Result<LeafProbabilities> {
        let hard = self.route_hard_traced(x)?;
        let mut alpha = vec![0.0; self.config.n_leaves()];
        alpha[hard.leaf] = 1.0;
        Ok(LeafProbabilities { alpha })
    }

    /// Routing according to the configured mode.
    pub fn leaf_probabilities(&self, x: &[f64]) -> Result<LeafProbabilities> {
        match self.config.routing_mode {
            RoutingMode::Soft => self.route(x),
            RoutingMode::Hard => self.route_hard(x),
        }
    }

    /// Gradients of `Σ_m upstream_m · α_m` with respect to every filter,
    /// bias and input coordinate.
    pub fn route_gradients(&self, x: &[f64], upstream: &[f64]) -> Result<RouteGradients> {
        let trace = self.forward_trace(x)?;
        let mut flat = vec![0.0; self.n_params()];
        let mut grad_x = vec![0.0; self.input_len];
        self.accumulate_gradients(x, &trace, upstream, &mut flat, Some(&mut grad_x))?;
        let stride = self.input_len + 1;
        let (w, b) = flat
            .chunks_exact(stride)
            .map(|c| (c[..self.input_len].to_vec(), c[self.input_len]))
            .unzip();
        Ok(RouteGradients { w, b, x: grad_x })
    }

    /// Adds the routing gradients into `grad` (layout of [`write_flat`]) and
    /// optionally into `grad_x`.
    ///
    /// [`write_flat`]: SoftTree::write_flat
    pub fn accumulate_gradients(
        &self,
        x: &[f64],
        trace: &RouteTrace,
        upstream: &[f64],
        grad: &mut [f64],
        grad_x: Option<&mut [f64]>,
    ) -> Result<()> {
        if self.config.routing_mode == RoutingMode::Hard {
            return Err(Error::NonDifferentiableRouting);
        }
        let n_leaves = self.config.n_leaves();
        if upstream.len() != n_leaves {
            return Err(Error::DimensionMismatch {
                context: "routing upstream",
                expected: n_leaves,
                actual: upstream.len(),
            });
        }
        let n_internal = self.config.n_internal();
        // value[i] = Σ over leaves below i of upstream_m × (path product from i)
        let mut value = vec![0.0; n_internal + n_leaves];
        value[n_internal..].copy_from_slice(upstream);
        let mut d_gate = vec![0.0; self.nodes.len()];
        for i in (0..n_internal).rev() {
            let p = self.config.param_index(i);
            let g = trace.gates[p];
            let (left, right) = (value[2 * i + 1], value[2 * i + 2]);
            value[i] = g * right + (1.0 - g) * left;
            d_gate[p] += trace.mass[i] * (right - left);
        }

        let stride = self.input_len + 1;
        let mut grad_x = grad_x;
        for (p, &dg) in d_gate.iter().enumerate() {
            let delta = dg
                * self
                    .config
                    .activation
                    .derivative_from_output(trace.gates[p]);
            let att = &self.attention[p];
            let attended = dot(att, x);
            let chunk = &mut grad[p * stride..(p + 1) * stride];
            for j in 0..self.input_len {
                chunk[j] += delta * att[j] * (x[j] - attended);
            }
            chunk[self.input_len] += delta;
            if let Some(gx) = grad_x.as_deref_mut() {
                for (g, a) in gx.iter_mut().zip(att) {
                    *g += delta * a;
                }
            }
        }
        Ok(())
    }

    pub fn filter_count(&self) -> usize {
        self.nodes.len() * self.input_len
    }
}
