//! The three model variants (baseline MDN, soft tree with constant leaves,
//! tree-gated leaf MLPs), mixture densities and their negative
//! log-likelihood with analytic gradients.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FeatureSchema, Scaler};
use crate::error::{Error, Result};
use crate::leaf_mdn::{
    leaf_forward, log_sigma_slope, mlp_param_count, sigma_from_raw, GaussianParams,
    HiddenActivation, MlpConfig, MlpParams,
};
use crate::numerics::{gaussian_log_pdf, log_sum_exp, softmax_in_place};
use crate::soft_tree::{
    tree_param_count, NodeParams, RoutingMode, SoftTree, TreeConfig, TreeStructure,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub variant: Vec<f64>,
    pub invariant: Vec<f64>,
    pub entity_key: String,
}

impl FeatureVector {
    /// `[variant ++ invariant]`, the tree and trunk input.
    pub fn tree_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.variant.len() + self.invariant.len());
        x.extend_from_slice(&self.variant);
        x.extend_from_slice(&self.invariant);
        x
    }
}

/// A standardized input with its log-space target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: FeatureVector,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDensity {
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl MixtureDensity {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        mixture_log_pdf(self, y)
    }

    /// Draws a component from the weights, then a value from that Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.len() - 1;
        for (m, a) in self.alphas.iter().enumerate() {
            acc += a;
            if u < acc {
                chosen = m;
                break;
            }
        }
        // float slack in the cumulative sum must not select a zero-weight tail
        while self.alphas[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        let z: f64 = StandardNormal.sample(rng);
        self.mus[chosen] + self.sigmas[chosen] * z
    }
}

/// `log Σ_m α_m N(y; μ_m, σ_m)`; zero-weight components contribute `-inf`.
pub fn mixture_log_pdf(d: &MixtureDensity, y: f64) -> Result<f64> {
    if d.alphas.iter().all(|&a| a == 0.0) {
        return Err(Error::AllWeightsZero);
    }
    let terms = d
        .alphas
        .iter()
        .zip(d.mus.iter().zip(&d.sigmas))
        .map(|(&a, (&mu, &sigma))| Ok(a.ln() + gaussian_log_pdf(y, mu, sigma)?))
        .collect::<Result<Vec<f64>>>()?;
    log_sum_exp(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MdnBaseline,
    ConstantLeafTree,
    TreeGated,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::MdnBaseline,
        ModelKind::ConstantLeafTree,
        ModelKind::TreeGated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MdnBaseline => "mdn_baseline",
            ModelKind::ConstantLeafTree => "constant_leaf_tree",
            ModelKind::TreeGated => "tree_gated",
        }
    }
}

/// Architecture choices for building a fresh model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub tree: TreeConfig,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub hidden_activation: HiddenActivation,
    /// Component count of the baseline MDN.
    pub components: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            tree: TreeConfig::new(3),
            mlp_depth: 2,
            mlp_width: 50,
            hidden_activation: HiddenActivation::Relu,
            components: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    MdnBaseline {
        components: usize,
        trunk: MlpParams,
    },
    ConstantLeafTree {
        tree: SoftTree,
        leaves: Vec<GaussianParams>,
    },
    TreeGated {
        tree: SoftTree,
        leaves: Vec<MlpParams>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub tree: usize,
    pub leaves_or_trunk: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    body: ModelBody,
    schema: FeatureSchema,
    scaler: Scaler,
}

/// Upstream gradients of one row's NLL w.r.t. the mixture parameters.
struct RowGradient {
    nll: f64,
    d_alpha: Vec<f64>,
    d_mu: Vec<f64>,
    d_raw: Vec<f64>,
}

/// NLL of one row plus its derivatives w.r.t. each weight, mean and raw log
/// std-dev.
fn row_gradient(alphas: &[f64], mus: &[f64], raws: &[f64], y: f64) -> Result<RowGradient> {
    let m = alphas.len();
    let mut log_n = Vec::with_capacity(m);
    let mut terms = Vec::with_capacity(m);
    for k in 0..m {
        let ln = gaussian_log_pdf(y, mus[k], sigma_from_raw(raws[k]))?;
        log_n.push(ln);
        terms.push(alphas[k].ln() + ln);
    }
    if alphas.iter().all(|&a| a == 0.0) {
        return Err(Error::AllWeightsZero);
    }
    let lse = log_sum_exp(&terms)?;
    let mut d_alpha = Vec::with_capacity(m);
    let mut d_mu = Vec::with_capacity(m);
    let mut d_raw = Vec::with_capacity(m);
    for k in 0..m {
        let resp = (terms[k] - lse).exp();
        let sigma = sigma_from_raw(raws[k]);
        let z = (y - mus[k]) / sigma;
        d_alpha.push(-(log_n[k] - lse).exp());
        d_mu.push(-resp * z / sigma);
        d_raw.push(-resp * (z * z - 1.0) * log_sigma_slope(raws[k]));
    }
    Ok(RowGradient {
        nll: -lse,
        d_alpha,
        d_mu,
        d_raw,
    })
}

fn bits_key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

impl Model {
    pub fn new(body: ModelBody, schema: FeatureSchema, scaler: Scaler) -> Result<Self> {
        let model = Self {
            body,
            schema,
            scaler,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        schema: FeatureSchema,
        scaler: Scaler,
        rng: &mut R,
    ) -> Result<Self> {
        let n_all = schema.n_features();
        let n_inv = schema.invariant_names.len();
        let body = match spec.kind {
            ModelKind::MdnBaseline => {
                if spec.components == 0 {
                    return Err(Error::Config("component count must be positive".into()));
                }
                let cfg = MlpConfig {
                    depth: spec.mlp_depth,
                    width: spec.mlp_width,
                    in_dim: n_all,
                    out_dim: 3 * spec.components,
                    hidden_activation: spec.hidden_activation,
                };
                ModelBody::MdnBaseline {
                    components: spec.components,
                    trunk: MlpParams::init(&cfg, rng)?,
                }
            }
            ModelKind::ConstantLeafTree => {
                let tree = SoftTree::init(spec.tree, n_all, rng)?;
                let leaves = (0..spec.tree.n_leaves())
                    .map(|_| GaussianParams::from_raw(rng.gen_range(-1.0..=1.0), 0.0))
                    .collect();
                ModelBody::ConstantLeafTree { tree, leaves }
            }
            ModelKind::TreeGated => {
                if n_inv == 0 {
                    return Err(Error::Schema(
                        "tree-gated model needs at least one time-invariant feature".into(),
                    ));
                }
                let tree = SoftTree::init(spec.tree, n_all, rng)?;
                let cfg = MlpConfig {
                    depth: spec.mlp_depth,
                    width: spec.mlp_width,
                    in_dim: n_inv,
                    out_dim: 2,
                    hidden_activation: spec.hidden_activation,
                };
                let leaves = (0..spec.tree.n_leaves())
                    .map(|_| MlpParams::init(&cfg, rng))
                    .collect::<Result<_>>()?;
                ModelBody::TreeGated { tree, leaves }
            }
        };
        Self::new(body, schema, scaler)
    }

    fn validate(&self) -> Result<()> {
        let n_all = self.schema.n_features();
        let n_inv = self.schema.invariant_names.len();
        if self.scaler.len() != n_all {
            return Err(Error::Schema(format!(
                "scaler covers {} features, schema has {n_all}",
                self.scaler.len()
            )));
        }
        match &self.body {
            ModelBody::MdnBaseline { components, trunk } => {
                trunk.validate()?;
                if trunk.in_dim() != n_all || trunk.out_dim() != 3 * components {
                    return Err(Error::Schema(format!(
                        "trunk is {}→{}, expected {n_all}→{}",
                        trunk.in_dim(),
                        trunk.out_dim(),
                        3 * components
                    )));
                }
            }
            ModelBody::ConstantLeafTree { tree, leaves } => {
                if tree.input_len() != n_all || leaves.len() != tree.config().n_leaves() {
                    return Err(Error::Schema("tree or leaf count does not match".into()));
                }
            }
            ModelBody::TreeGated { tree, leaves } => {
                if tree.input_len() != n_all || leaves.len() != tree.config().n_leaves() {
                    return Err(Error::Schema("tree or leaf count does not match".into()));
                }
                for leaf in leaves {
                    leaf.validate()?;
                    if leaf.in_dim() != n_inv || leaf.out_dim() != 2 {
                        return Err(Error::Schema(format!(
                            "leaf is {}→{}, expected {n_inv}→2",
                            leaf.in_dim(),
                            leaf.out_dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        match self.body {
            ModelBody::MdnBaseline { .. } => ModelKind::MdnBaseline,
            ModelBody::ConstantLeafTree { .. } => ModelKind::ConstantLeafTree,
            ModelBody::TreeGated { .. } => ModelKind::TreeGated,
        }
    }

    pub fn body(&self) -> &ModelBody {
        &self.body
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn tree(&self) -> Option<&SoftTree> {
        match &self.body {
            ModelBody::MdnBaseline { .. } => None,
            ModelBody::ConstantLeafTree { tree, .. } | ModelBody::TreeGated { tree, .. } => {
                Some(tree)
            }
        }
    }

    pub fn set_routing_mode(&mut self, mode: RoutingMode) {
        match &mut self.body {
            ModelBody::MdnBaseline { .. } => {}
            ModelBody::ConstantLeafTree { tree, .. } | ModelBody::TreeGated { tree, .. } => {
                tree.set_routing_mode(mode)
            }
        }
    }

    pub fn n_components(&self) -> usize {
        match &self.body {
            ModelBody::MdnBaseline { components, .. } => *components,
            ModelBody::ConstantLeafTree { leaves, .. } => leaves.len(),
            ModelBody::TreeGated { leaves, .. } => leaves.len(),
        }
    }

    pub fn check_input(&self, x: &FeatureVector) -> Result<()> {
        let nv = self.schema.variant_names.len();
        let ni = self.schema.invariant_names.len();
        let mut bad = Vec::new();
        if x.variant.len() != nv {
            bad.push(format!(
                "variant has {} values, expected {nv}",
                x.variant.len()
            ));
        }
        if x.invariant.len() != ni {
            bad.push(format!(
                "invariant has {} values, expected {ni}",
                x.invariant.len()
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(bad.join("; ")))
        }
    }

    /// Leaf Gaussians for a time-invariant segment (tree-gated models only).
    pub fn leaf_gaussians(&self, invariant: &[f64]) -> Result<Vec<GaussianParams>> {
        match &self.body {
            ModelBody::TreeGated { leaves, .. } => leaves
                .iter()
                .map(|leaf| leaf_forward(leaf, invariant))
                .collect(),
            _ => Err(Error::KindMismatch(format!(
                "leaf modules require a tree_gated model, got {}",
                self.kind().name()
            ))),
        }
    }

    /// Mixture from tree routing on `tree_input` and precomputed leaf
    /// Gaussians. Shared by the direct and cached prediction paths.
    pub(crate) fn assemble_tree_gated(
        tree: &SoftTree,
        tree_input: &[f64],
        gaussians: &[GaussianParams],
    ) -> Result<MixtureDensity> {
        let alphas = tree.leaf_probabilities(tree_input)?.alpha;
        Ok(MixtureDensity {
            alphas,
            mus: gaussians.iter().map(|g| g.mu).collect(),
            sigmas: gaussians.iter().map(|g| g.sigma).collect(),
        })
    }

    pub fn predict_density(&self, x: &FeatureVector) -> Result<MixtureDensity> {
        self.check_input(x)?;
        match &self.body {
            ModelBody::MdnBaseline { components, trunk } => {
                let m = *components;
                let out = trunk.forward(&x.tree_input())?;
                let mut alphas = out[2 * m..3 * m].to_vec();
                softmax_in_place(&mut alphas)?;
                Ok(MixtureDensity {
                    alphas,
                    mus: out[..m].to_vec(),
                    sigmas: out[m..2 * m].iter().map(|&r| sigma_from_raw(r)).collect(),
                })
            }
            ModelBody::ConstantLeafTree { tree, leaves } => {
                Self::assemble_tree_gated(tree, &x.tree_input(), leaves)
            }
            ModelBody::TreeGated { tree, .. } => {
                let gaussians = self.leaf_gaussians(&x.invariant)?;
                Self::assemble_tree_gated(tree, &x.tree_input(), &gaussians)
            }
        }
    }

    /// Mean NLL over the batch.
    pub fn batch_nll(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for s in batch {
            total -= self.predict_density(&s.x)?.log_pdf(s.y)?;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn n_params(&self) -> usize {
        match &self.body {
            ModelBody::MdnBaseline { trunk, .. } => trunk.n_params(),
            ModelBody::ConstantLeafTree { tree, leaves } => tree.n_params() + 2 * leaves.len(),
            ModelBody::TreeGated { tree, leaves } => {
                tree.n_params() + leaves.iter().map(MlpParams::n_params).sum::<usize>()
            }
        }
    }

    /// Named ranges of the flat parameter vector.
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut groups = Vec::new();
        match &self.body {
            ModelBody::MdnBaseline { trunk, .. } => {
                groups.push(("trunk".to_string(), 0..trunk.n_params()));
            }
            ModelBody::ConstantLeafTree { tree, leaves } => {
                let t = tree.n_params();
                groups.push(("tree".to_string(), 0..t));
                groups.push(("constant_leaves".to_string(), t..t + 2 * leaves.len()));
            }
            ModelBody::TreeGated { tree, leaves } => {
                let mut offset = tree.n_params();
                groups.push(("tree".to_string(), 0..offset));
                for (m, leaf) in leaves.iter().enumerate() {
                    let n = leaf.n_params();
                    groups.push((format!("leaf[{m}]"), offset..offset + n));
                    offset += n;
                }
            }
        }
        groups
    }

    /// Every trainable value: tree first, then leaves (or the trunk).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        match &self.body {
            ModelBody::MdnBaseline { trunk, .. } => trunk.write_flat(&mut out),
            ModelBody::ConstantLeafTree { tree, leaves } => {
                tree.write_flat(&mut out);
                for leaf in leaves {
                    out.push(leaf.mu);
                    out.push(leaf.log_sigma_raw);
                }
            }
            ModelBody::TreeGated { tree, leaves } => {
                tree.write_flat(&mut out);
                for leaf in leaves {
                    leaf.write_flat(&mut out);
                }
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.n_params(),
                actual: flat.len(),
            });
        }
        match &mut self.body {
            ModelBody::MdnBaseline { trunk, .. } => trunk.read_flat(flat),
            ModelBody::ConstantLeafTree { tree, leaves } => {
                let t = tree.n_params();
                tree.read_flat(&flat[..t]);
                for (leaf, pair) in leaves.iter_mut().zip(flat[t..].chunks_exact(2)) {
                    *leaf = GaussianParams::from_raw(pair[0], pair[1]);
                }
            }
            ModelBody::TreeGated { tree, leaves } => {
                let mut offset = tree.n_params();
                tree.read_flat(&flat[..offset]);
                for leaf in leaves.iter_mut() {
                    let n = leaf.n_params();
                    leaf.read_flat(&flat[offset..offset + n]);
                    offset += n;
                }
            }
        }
        Ok(())
    }

    /// Mean NLL over `batch` and its gradient w.r.t. [`Model::flat_params`].
    pub fn nll_and_gradient(&self, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
        let refs: Vec<&Sample> = batch.iter().collect();
        self.nll_and_gradient_refs(&refs)
    }

    pub fn nll_and_gradient_refs(&self, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in batch {
            self.check_input(&s.x)?;
        }
        let mut grad = vec![0.0; self.n_params()];
        let mut total = 0.0;
        match &self.body {
            ModelBody::MdnBaseline { components, trunk } => {
                let m = *components;
                let mut upstream = vec![0.0; 3 * m];
                for s in batch {
                    let trace = trunk.forward_trace(&s.x.tree_input())?;
                    let out = trace.output();
                    let mut alphas = out[2 * m..].to_vec();
                    softmax_in_place(&mut alphas)?;
                    let row = row_gradient(&alphas, &out[..m], &out[m..2 * m], s.y)?;
                    total += row.nll;
                    let weighted: f64 = alphas.iter().zip(&row.d_alpha).map(|(a, d)| a * d).sum();
                    for k in 0..m {
                        upstream[k] = row.d_mu[k];
                        upstream[m + k] = row.d_raw[k];
                        upstream[2 * m + k] = alphas[k] * (row.d_alpha[k] - weighted);
                    }
                    trunk.accumulate_backward(&trace, &upstream, &mut grad)?;
                }
            }
            ModelBody::ConstantLeafTree { tree, leaves } => {
                let t = tree.n_params();
                let mus: Vec<f64> = leaves.iter().map(|g| g.mu).collect();
                let raws: Vec<f64> = leaves.iter().map(|g| g.log_sigma_raw).collect();
                let (tree_grad, leaf_grad) = grad.split_at_mut(t);
                for s in batch {
                    let x = s.x.tree_input();
                    let trace = tree.forward_trace(&x)?;
                    let row = row_gradient(trace.leaves(tree.config()), &mus, &raws, s.y)?;
                    total += row.nll;
                    tree.accumulate_gradients(&x, &trace, &row.d_alpha, tree_grad, None)?;
                    for k in 0..leaves.len() {
                        leaf_grad[2 * k] += row.d_mu[k];
                        leaf_grad[2 * k + 1] += row.d_raw[k];
                    }
                }
            }
            ModelBody::TreeGated { tree, leaves } => {
                // Rows sharing an invariant segment share leaf outputs, so leaf
                // forward and backward passes run once per distinct segment.
                let mut group_of: HashMap<Vec<u64>, usize> = HashMap::new();
                let mut groups: Vec<&[f64]> = Vec::new();
                let row_group: Vec<usize> = batch
                    .iter()
                    .map(|s| {
                        *group_of.entry(bits_key(&s.x.invariant)).or_insert_with(|| {
                            groups.push(&s.x.invariant);
                            groups.len() - 1
                        })
                    })
                    .collect();
                let n_leaves = leaves.len();
                let traces = groups
                    .iter()
                    .map(|inv| leaves.iter().map(|l| l.forward_trace(inv)).collect())
                    .collect::<Result<Vec<Vec<_>>>>()?;
                let outputs: Vec<(Vec<f64>, Vec<f64>)> = traces
                    .iter()
                    .map(|ts| {
                        (
                            ts.iter().map(|t| t.output()[0]).collect(),
                            ts.iter().map(|t| t.output()[1]).collect(),
                        )
                    })
                    .collect();
                let mut leaf_upstream = vec![vec![[0.0f64; 2]; n_leaves]; groups.len()];
                let t = tree.n_params();
                let (tree_grad, leaf_grad) = grad.split_at_mut(t);
                for (s, &gid) in batch.iter().zip(&row_group) {
                    let x = s.x.tree_input();
                    let trace = tree.forward_trace(&x)?;
                    let (mus, raws) = &outputs[gid];
                    let row = row_gradient(trace.leaves(tree.config()), mus, raws, s.y)?;
                    total += row.nll;
                    tree.accumulate_gradients(&x, &trace, &row.d_alpha, tree_grad, None)?;
                    for (up, (dm, dr)) in leaf_upstream[gid]
                        .iter_mut()
                        .zip(row.d_mu.iter().zip(&row.d_raw))
                    {
                        up[0] += dm;
                        up[1] += dr;
                    }
                }
                let mut offset = 0;
                for (k, leaf) in leaves.iter().enumerate() {
                    let n = leaf.n_params();
                    let slot = &mut leaf_grad[offset..offset + n];
                    for (gid, ts) in traces.iter().enumerate() {
                        leaf.accumulate_backward(&ts[k], &leaf_upstream[gid][k], slot)?;
                    }
                    offset += n;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        Ok((total * scale, grad))
    }

    pub fn param_count(&self) -> Result<ParamBreakdown> {
        let (tree, rest) = match &self.body {
            ModelBody::MdnBaseline { trunk, .. } => (0, mlp_param_count(&trunk.config())?),
            ModelBody::ConstantLeafTree { tree, leaves } => {
                (tree_filter_count(tree), 2 * leaves.len())
            }
            ModelBody::TreeGated { tree, leaves } => {
                let mut total = 0;
                for leaf in leaves {
                    total += mlp_param_count(&leaf.config())?;
                }
                (tree_filter_count(tree), total)
            }
        };
        Ok(ParamBreakdown {
            tree,
            leaves_or_trunk: rest,
            total: tree + rest,
        })
    }

    /// SHA-256 over the kind, shapes and parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind().name().as_bytes());
        match &self.body {
            ModelBody::MdnBaseline { components, trunk } => {
                h.update((*components as u64).to_le_bytes());
                hash_mlp_shape(&mut h, trunk);
            }
            ModelBody::ConstantLeafTree { tree, .. } => hash_tree_shape(&mut h, tree),
            ModelBody::TreeGated { tree, leaves } => {
                hash_tree_shape(&mut h, tree);
                for leaf in leaves {
                    hash_mlp_shape(&mut h, leaf);
                }
            }
        }
        for v in self.flat_params() {
            h.update(v.to_le_bytes());
        }
        to_hex(&h.finalize())
    }

    pub fn to_file(&self) -> ModelFile {
        let mut file = ModelFile {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            tree_config: None,
            tree_params: None,
            leaf_params: None,
            trunk_params: None,
            components: None,
            constant_leaves: None,
            feature_schema: self.schema.clone(),
            scaler: self.scaler.clone(),
            target_transform: "log".to_string(),
        };
        match &self.body {
            ModelBody::MdnBaseline { components, trunk } => {
                file.components = Some(*components);
                file.trunk_params = Some(trunk.clone());
            }
            ModelBody::ConstantLeafTree { tree, leaves } => {
                file.tree_config = Some(*tree.config());
                file.tree_params = Some(tree.nodes().to_vec());
                file.constant_leaves = Some(
                    leaves
                        .iter()
                        .map(|g| ConstantLeaf {
                            mu: g.mu,
                            log_sigma_raw: g.log_sigma_raw,
                        })
                        .collect(),
                );
            }
            ModelBody::TreeGated { tree, leaves } => {
                file.tree_config = Some(*tree.config());
                file.tree_params = Some(tree.nodes().to_vec());
                file.leaf_params = Some(leaves.clone());
            }
        }
        file
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(file.format_version));
        }
        if file.target_transform != "log" {
            return Err(Error::Config(format!(
                "unsupported target transform `{}`",
                file.target_transform
            )));
        }
        let missing = |field: &str| Error::Config(format!("model file lacks `{field}`"));
        let tree = |file: &ModelFile| -> Result<SoftTree> {
            let config = file.tree_config.ok_or_else(|| missing("tree_config"))?;
            let nodes = file
                .tree_params
                .clone()
                .ok_or_else(|| missing("tree_params"))?;
            SoftTree::new(config, nodes)
        };
        let body = match file.kind {
            ModelKind::MdnBaseline => ModelBody::MdnBaseline {
                components: file.components.ok_or_else(|| missing("components"))?,
                trunk: file
                    .trunk_params
                    .clone()
                    .ok_or_else(|| missing("trunk_params"))?,
            },
            ModelKind::ConstantLeafTree => ModelBody::ConstantLeafTree {
                tree: tree(&file)?,
                leaves: file
                    .constant_leaves
                    .as_ref()
                    .ok_or_else(|| missing("constant_leaves"))?
                    .iter()
                    .map(|c| GaussianParams::from_raw(c.mu, c.log_sigma_raw))
                    .collect(),
            },
            ModelKind::TreeGated => ModelBody::TreeGated {
                tree: tree(&file)?,
                leaves: file
                    .leaf_params
                    .clone()
                    .ok_or_else(|| missing("leaf_params"))?,
            },
        };
        Self::new(body, file.feature_schema, file.scaler)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn tree_filter_count(tree: &SoftTree) -> usize {
    match tree.config().structure {
        TreeStructure::Free => tree_param_count(tree.config().depth, tree.input_len()),
        TreeStructure::Oblivious => tree.filter_count(),
    }
}

fn hash_tree_shape(h: &mut Sha256, tree: &SoftTree) {
    let c = tree.config();
    h.update((c.depth as u64).to_le_bytes());
    h.update([c.routing_mode as u8, c.structure as u8, c.activation as u8]);
    h.update((tree.input_len() as u64).to_le_bytes());
}

fn hash_mlp_shape(h: &mut Sha256, mlp: &MlpParams) {
    h.update([mlp.hidden_activation as u8]);
    for layer in &mlp.layers {
        h.update((layer.rows as u64).to_le_bytes());
        h.update((layer.cols as u64).to_le_bytes());
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantLeaf {
    pub mu: f64,
    pub log_sigma_raw: f64,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_config: Option<TreeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_params: Option<Vec<NodeParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_params: Option<Vec<MlpParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunk_params: Option<MlpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_leaves: Option<Vec<ConstantLeaf>>,
    pub feature_schema: FeatureSchema,
    pub scaler: Scaler,
    pub target_transform: String,
}
