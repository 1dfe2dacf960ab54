//! Command implementations behind the `treemdn` binary. Every command prints
//! one JSON document on stdout; human-oriented tables go to stderr.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use treemdn::data::{
    generate_synthetic, load_dataset, oracle_nll, temporal_split, write_dataset, FeatureSchema,
    GroundTruth, RawDataset, RawRow, RawSplit, Scaler, SplitBoundaries, SplitDataset,
    SyntheticGenConfig,
};
use treemdn::inference_cache::{bench_inference, build_cache, BenchReport, Request};
use treemdn::leaf_mdn::{mlp_param_count, HiddenActivation, MlpConfig};
use treemdn::mixture::{ModelBody, ModelSpec, Sample};
use treemdn::soft_tree::{tree_param_count, TreeConfig};
use treemdn::training::{init_rng, train, train_and_test, NllStats, TrainConfig};
use treemdn::{Model, ModelKind};

#[derive(Debug, Parser)]
#[command(name = "treemdn", version, about = "Tree-gated mixture density models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic taxi-stand dataset and its ground-truth sidecar.
    GenData(GenDataArgs),
    /// Train one model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Mean NLL of a model on one split.
    Eval(EvalArgs),
    /// Per-row predicted mixtures as JSON lines.
    Predict(PredictArgs),
    /// Train every model kind over several seeds and report test NLL.
    Compare(CompareArgs),
    /// Export tree attention weights, routing masses and leaf densities.
    Inspect(InspectArgs),
    /// Parameter counts and cached versus full inference latency.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(alias = "mdn_baseline")]
    Mdn,
    #[value(alias = "constant_leaf_tree", alias = "const_tree")]
    ConstTree,
    #[value(alias = "tree_gated")]
    TreeGated,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mdn => ModelKind::MdnBaseline,
            KindArg::ConstTree => ModelKind::ConstantLeafTree,
            KindArg::TreeGated => ModelKind::TreeGated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "data/synthetic.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub entities: usize,
    #[arg(long, default_value_t = 2000)]
    pub rows_per_entity: usize,
    #[arg(long, default_value_t = 28)]
    pub days: u32,
}

/// Architecture and optimizer flags shared by `train` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 50)]
    pub leaf_width: usize,
    #[arg(long, default_value_t = 2)]
    pub leaf_depth: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Component count of the baseline MDN.
    #[arg(long, default_value_t = 8)]
    pub components: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2048)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
}

impl ModelArgs {
    pub fn spec(&self, kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            tree: TreeConfig::new(self.depth),
            mlp_depth: self.leaf_depth,
            mlp_width: self.leaf_width,
            hidden_activation: match self.activation {
                ActivationArg::Relu => HiddenActivation::Relu,
                ActivationArg::Tanh => HiddenActivation::Tanh,
            },
            components: self.components,
        }
    }

    pub fn train_config(&self, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            lr_max: lr,
            lr_min: self.lr_min,
            seed,
            eval_every: self.eval_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value = "data/synthetic.csv")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file to write.
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    /// History log; defaults to the model path with a `.history.jsonl` extension.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "model.json")]
    pub model: PathBuf,
    #[arg(long, default_value = "data/synthetic.csv")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also report the generator's oracle NLL from the ground-truth sidecar.
    #[arg(long)]
    pub oracle: bool,
    /// Sidecar path; defaults to the dataset path with a `.truth.json` extension.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, default_value = "model.json")]
    pub model: PathBuf,
    #[arg(long, default_value = "data/synthetic.csv")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Emit at most this many rows.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value = "data/synthetic.csv")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Base seed; run i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Structured report file.
    #[arg(long, default_value = "compare.json")]
    pub out: PathBuf,
    /// Peak learning rate shared by every kind. Lower than the `train`
    /// default: at 0.1 the gated trees on the synthetic workload often
    /// collapse onto a single leaf early in training.
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, default_value = "model.json")]
    pub model: PathBuf,
    /// Dataset supplying `--input-row`.
    #[arg(long, default_value = "data/synthetic.csv")]
    pub data: PathBuf,
    /// 0-based data row whose routing and leaf densities are included.
    #[arg(long)]
    pub input_row: Option<usize>,
    /// Graphviz DOT rendering of the tree.
    #[arg(long)]
    pub graph_out: Option<PathBuf>,
    /// Payload file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained tree_gated model; a freshly initialized one is used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset whose entities (and variant rows) form the workload.
    #[arg(long)]
    pub entities: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    pub requests: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tree depth (ignored with --model).
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Tree input length (ignored with --model).
    #[arg(long, default_value_t = 14)]
    pub features: usize,
    /// Leaf input length, the invariant feature count (ignored with --model).
    #[arg(long, default_value_t = 4)]
    pub leaf_in: usize,
    #[arg(long, default_value_t = 2)]
    pub leaf_depth: usize,
    #[arg(long, default_value_t = 50)]
    pub leaf_width: usize,
    #[arg(long, default_value_t = 2)]
    pub leaf_out: usize,
    /// Skip timing and report parameter counts only.
    #[arg(long)]
    pub params_only: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let text = match cli.command {
        Command::GenData(a) => to_line(&cmd_gen_data(&a)?)?,
        Command::Train(a) => to_line(&cmd_train(&a)?)?,
        Command::Eval(a) => to_line(&cmd_eval(&a)?)?,
        Command::Predict(a) => cmd_predict(&a)?,
        Command::Compare(a) => {
            let report = cmd_compare(&a)?;
            eprint!("{}", report.table());
            to_line(&report)?
        }
        Command::Inspect(a) => cmd_inspect(&a)?,
        Command::Bench(a) => to_line(&cmd_bench(&a)?)?,
    };
    std::io::Write::write_all(&mut stdout, text.as_bytes())?;
    Ok(())
}

fn to_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value)?;
    s.push('\n');
    Ok(s)
}

/// Sidecar path next to a dataset: `x.csv` becomes `x.truth.json`.
pub fn truth_path(data: &Path) -> PathBuf {
    data.with_extension("truth.json")
}

pub fn history_path(model: &Path) -> PathBuf {
    model.with_extension("history.jsonl")
}

fn load_split(path: &Path) -> Result<(RawDataset, RawSplit)> {
    let raw = load_dataset(path, &FeatureSchema::taxi_stand())
        .with_context(|| format!("loading {}", path.display()))?;
    let split = temporal_split(&raw.rows, SplitBoundaries::default_days())?;
    Ok((raw, split))
}

fn split_rows(split: &RawSplit, which: SplitArg) -> &[RawRow] {
    match which {
        SplitArg::Train => &split.train,
        SplitArg::Valid => &split.valid,
        SplitArg::Test => &split.test,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub data: PathBuf,
    pub truth: PathBuf,
    pub rows: usize,
    pub train_rows: usize,
    pub valid_rows: usize,
    pub test_rows: usize,
    pub oracle_test_nll: f64,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<GenDataReport> {
    let config = SyntheticGenConfig {
        n_entities: a.entities,
        rows_per_entity: a.rows_per_entity,
        seed: a.seed,
        days: a.days,
        ..SyntheticGenConfig::default()
    };
    let (data, truth) = generate_synthetic(&config)?;
    let split = temporal_split(&data.rows, SplitBoundaries::default_days())?;
    ensure_parent(&a.out)?;
    write_dataset(&a.out, &data)?;
    let truth_file = truth_path(&a.out);
    truth.save(&truth_file)?;
    Ok(GenDataReport {
        data: a.out.clone(),
        truth: truth_file,
        rows: data.rows.len(),
        train_rows: split.train.len(),
        valid_rows: split.valid.len(),
        test_rows: split.test.len(),
        oracle_test_nll: oracle_nll(&truth, &split.test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub model: PathBuf,
    pub history: PathBuf,
    pub n_params: usize,
    pub steps: usize,
    pub best_valid_step: usize,
    pub best_valid_nll: f64,
    pub test_nll: f64,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainReport> {
    let (raw, split) = load_split(&a.data)?;
    let data = SplitDataset::prepare(&raw.schema, &split)?;
    let kind = ModelKind::from(a.kind);
    let spec = a.model.spec(kind);
    let model = Model::init(
        &spec,
        raw.schema.clone(),
        data.scaler.clone(),
        &mut init_rng(a.seed),
    )?;
    let (best, history) = train(model, &data, &a.model.train_config(a.lr, a.seed))?;
    self_check(&best, &data, a.seed)?;

    ensure_parent(&a.out)?;
    best.save(&a.out)?;
    let history_file = a.history.clone().unwrap_or_else(|| history_path(&a.out));
    ensure_parent(&history_file)?;
    std::fs::write(&history_file, history.to_jsonl()?)?;
    Ok(TrainReport {
        kind,
        model: a.out.clone(),
        history: history_file,
        n_params: best.n_params(),
        steps: history.steps.len(),
        best_valid_step: history.best_valid_step,
        best_valid_nll: history.best_valid_nll,
        test_nll: best.batch_nll(&data.test)?,
    })
}

/// Mixture weights must stay normalized on 100 randomly chosen rows.
fn self_check(model: &Model, data: &SplitDataset, seed: u64) -> Result<()> {
    let rows: Vec<&Sample> = data
        .train
        .iter()
        .chain(&data.valid)
        .chain(&data.test)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let d = model.predict_density(&rows[rng.gen_range(0..rows.len())].x)?;
        let total: f64 = d.alphas.iter().sum();
        if (total - 1.0).abs() > 1e-10 || d.sigmas.iter().any(|s| !(*s > 0.0)) {
            bail!("self-check failed: alphas sum to {total}");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ModelKind,
    pub split: String,
    pub rows: usize,
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_nll: Option<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let model = Model::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (raw, split) = load_split(&a.data)?;
    check_schema(&model, &raw.schema)?;
    let rows = split_rows(&split, a.split);
    let samples = treemdn::data::to_samples(&raw.schema, model.scaler(), rows)?;
    let oracle = if a.oracle {
        let path = a.truth.clone().unwrap_or_else(|| truth_path(&a.data));
        let truth =
            GroundTruth::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Some(oracle_nll(&truth, rows)?)
    } else {
        None
    };
    Ok(EvalReport {
        kind: model.kind(),
        split: format!("{:?}", a.split).to_lowercase(),
        rows: rows.len(),
        nll: model.batch_nll(&samples)?,
        oracle_nll: oracle,
    })
}

fn check_schema(model: &Model, schema: &FeatureSchema) -> Result<()> {
    if model.schema() != schema {
        bail!("schema mismatch: model and dataset feature names differ");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRecord {
    pub row: usize,
    pub entity_key: String,
    pub time: f64,
    /// Log-space target.
    pub y: f64,
    pub log_density: f64,
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
}

pub fn cmd_predict(a: &PredictArgs) -> Result<String> {
    let model = Model::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (raw, split) = load_split(&a.data)?;
    check_schema(&model, &raw.schema)?;
    let rows = split_rows(&split, a.split);
    let take = a.limit.unwrap_or(rows.len()).min(rows.len());
    let mut out = String::new();
    for (i, r) in rows[..take].iter().enumerate() {
        let x = model.scaler().apply(&raw.schema, r)?;
        let y = treemdn::data::transform_target(r.target)?;
        let d = model.predict_density(&x)?;
        let record = PredictRecord {
            row: i,
            entity_key: r.entity_key.clone(),
            time: r.time,
            y,
            log_density: d.log_pdf(y)?,
            alphas: d.alphas,
            mus: d.mus,
            sigmas: d.sigmas,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    match &a.out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, &out)?;
            Ok(to_line(
                &serde_json::json!({ "predictions": take, "out": path }),
            )?)
        }
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub kind: ModelKind,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub oracle_nll: f64,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn row(&self, kind: ModelKind) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>22}", "model", "test NLL (mean ± std)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<20} {:>12.4} ± {:.4}", r.kind.name(), r.mean, r.std);
        }
        let _ = writeln!(s, "{:<20} {:>12.4}", "oracle", self.oracle_nll);
        s
    }
}

/// Test NLL of every kind over seeds `base_seed .. base_seed + n_seeds`.
/// Runs are independent and execute on separate threads; results do not
/// depend on scheduling.
pub fn compare_kinds(
    schema: &FeatureSchema,
    data: &SplitDataset,
    model: &ModelArgs,
    lr: f64,
    base_seed: u64,
    n_seeds: usize,
) -> Result<Vec<CompareRow>> {
    if n_seeds < 2 {
        bail!("compare needs at least two seeds");
    }
    let config = model.train_config(lr, base_seed);
    let results: Vec<Vec<Result<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<Vec<_>> = ModelKind::ALL
            .iter()
            .map(|&kind| {
                (0..n_seeds as u64)
                    .map(|i| {
                        let config = &config;
                        scope.spawn(move || {
                            let spec = model.spec(kind);
                            let factory = |rng: &mut ChaCha8Rng| {
                                Model::init(&spec, schema.clone(), data.scaler.clone(), rng)
                            };
                            train_and_test(&factory, data, config, base_seed + i)
                                .with_context(|| format!("training {}", kind.name()))
                        })
                    })
                    .collect()
            })
            .collect();
        handles
            .into_iter()
            .map(|hs| {
                hs.into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            })
            .collect()
    });
    ModelKind::ALL
        .iter()
        .zip(results)
        .map(|(&kind, runs)| {
            let stats = NllStats::from_values(runs.into_iter().collect::<Result<_>>()?)?;
            Ok(CompareRow {
                kind,
                mean: stats.mean,
                std: stats.std,
                per_seed: stats.per_seed,
            })
        })
        .collect()
}

pub fn cmd_compare(a: &CompareArgs) -> Result<CompareReport> {
    let (raw, split) = load_split(&a.data)?;
    let truth_file = a.truth.clone().unwrap_or_else(|| truth_path(&a.data));
    let truth = GroundTruth::load(&truth_file).with_context(|| {
        format!(
            "compare needs the ground-truth sidecar {}",
            truth_file.display()
        )
    })?;
    let data = SplitDataset::prepare(&raw.schema, &split)?;
    let rows = compare_kinds(&raw.schema, &data, &a.model, a.lr, a.seed, a.seeds)?;
    let report = CompareReport {
        seeds: (0..a.seeds as u64).map(|i| a.seed + i).collect(),
        oracle_nll: oracle_nll(&truth, &split.test)?,
        rows,
    };
    ensure_parent(&a.out)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub weight: f64,
    /// `variant` or `invariant`.
    pub segment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectNode {
    pub id: usize,
    pub level: usize,
    pub weights: Vec<FeatureWeight>,
    pub bias: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectLeaf {
    pub id: usize,
    pub leaf: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectInput {
    pub row: usize,
    pub entity_key: String,
    pub time: f64,
}

/// Tree attention weights, routing masses and leaf densities. Nodes are
/// numbered breadth-first; children of `i` are `2i + 1` (left) and `2i + 2`
/// (right, the gate's share).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectPayload {
    pub kind: ModelKind,
    pub depth: usize,
    pub nodes: Vec<InspectNode>,
    pub leaves: Vec<InspectLeaf>,
    pub edges: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InspectInput>,
}

/// Builds the payload for `model`, adding routing for `input` when given.
pub fn inspect_payload(model: &Model, input: Option<(&RawRow, usize)>) -> Result<InspectPayload> {
    let tree = model.tree().ok_or_else(|| {
        anyhow!(
            "no tree to inspect: {} has no gating tree",
            model.kind().name()
        )
    })?;
    let schema = model.schema();
    let config = *tree.config();
    let names: Vec<(&str, &str)> = schema
        .variant_names
        .iter()
        .map(|n| (n.as_str(), "variant"))
        .chain(
            schema
                .invariant_names
                .iter()
                .map(|n| (n.as_str(), "invariant")),
        )
        .collect();

    let routed = match input {
        Some((row, index)) => {
            let x = model.scaler().apply(schema, row)?;
            let trace = tree.forward_trace(&x.tree_input())?;
            let gaussians = match model.body() {
                ModelBody::TreeGated { .. } => Some(model.leaf_gaussians(&x.invariant)?),
                _ => None,
            };
            Some((trace, gaussians, row, index))
        }
        None => None,
    };

    let n_internal = config.n_internal();
    let mut nodes = Vec::with_capacity(n_internal);
    for id in 0..n_internal {
        let p = config.param_index(id);
        let weights = tree.attention()[p]
            .iter()
            .zip(&names)
            .map(|(&weight, &(name, segment))| FeatureWeight {
                name: name.to_string(),
                weight,
                segment: segment.to_string(),
            })
            .collect();
        nodes.push(InspectNode {
            id,
            level: level_of(id),
            weights,
            bias: tree.nodes()[p].b,
            gate: routed.as_ref().map(|(t, ..)| t.gates[p]),
            mass_percent: routed.as_ref().map(|(t, ..)| 100.0 * t.mass[id]),
        });
    }

    let constant = match model.body() {
        ModelBody::ConstantLeafTree { leaves, .. } => Some(leaves),
        _ => None,
    };
    let mut leaves = Vec::with_capacity(config.n_leaves());
    for leaf in 0..config.n_leaves() {
        let id = n_internal + leaf;
        let mass = routed.as_ref().map(|(t, ..)| t.mass[id]);
        let gaussian = match (constant, &routed) {
            (Some(c), _) => Some(c[leaf]),
            (None, Some((_, Some(g), ..))) => Some(g[leaf]),
            _ => None,
        };
        leaves.push(InspectLeaf {
            id,
            leaf,
            alpha: mass,
            mass_percent: mass.map(|m| 100.0 * m),
            mu: gaussian.map(|g| g.mu),
            sigma: gaussian.map(|g| g.sigma),
        });
    }

    let edges = (0..n_internal)
        .flat_map(|i| [(i, 2 * i + 1), (i, 2 * i + 2)])
        .collect();
    Ok(InspectPayload {
        kind: model.kind(),
        depth: config.depth,
        nodes,
        leaves,
        edges,
        input: routed.map(|(_, _, row, index)| InspectInput {
            row: index,
            entity_key: row.entity_key.clone(),
            time: row.time,
        }),
    })
}

fn level_of(node: usize) -> usize {
    (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
}

/// Graphviz rendering: one record per node with its weight table, red for
/// invariant features and blue for variant ones.
pub fn inspect_dot(p: &InspectPayload) -> String {
    let mut s = String::from("digraph tree {\n  node [shape=plaintext, fontname=\"Helvetica\"];\n");
    for n in &p.nodes {
        let _ = write!(
            s,
            "  n{} [label=<<table border=\"1\" cellborder=\"0\" cellspacing=\"0\"><tr><td colspan=\"2\"><b>node {}</b>",
            n.id, n.id
        );
        if let Some(m) = n.mass_percent {
            let _ = write!(s, " ({m:.1}%)");
        }
        s.push_str("</td></tr>");
        for w in &n.weights {
            let color = if w.segment == "invariant" {
                "red"
            } else {
                "blue"
            };
            let _ = write!(
                s,
                "<tr><td align=\"left\"><font color=\"{color}\">{}</font></td><td align=\"right\">{:.3}</td></tr>",
                w.name, w.weight
            );
        }
        s.push_str("</table>>];\n");
    }
    for l in &p.leaves {
        let mut label = format!("leaf {}", l.leaf);
        if let Some(m) = l.mass_percent {
            let _ = write!(label, "\\n{m:.1}%");
        }
        if let (Some(mu), Some(sigma)) = (l.mu, l.sigma) {
            let _ = write!(label, "\\nmu={mu:.3} sigma={sigma:.3}");
        }
        let _ = writeln!(s, "  n{} [shape=box, label=\"{label}\"];", l.id);
    }
    for (a, b) in &p.edges {
        let side = if b % 2 == 0 { "g" } else { "1-g" };
        let _ = writeln!(s, "  n{a} -> n{b} [label=\"{side}\"];");
    }
    s.push_str("}\n");
    s
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    let model = Model::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if model.tree().is_none() {
        bail!(
            "no tree to inspect: {} has no gating tree",
            model.kind().name()
        );
    }
    let payload = match a.input_row {
        Some(index) => {
            let raw = load_dataset(&a.data, model.schema())
                .with_context(|| format!("loading {}", a.data.display()))?;
            let row = raw.rows.get(index).ok_or_else(|| {
                anyhow!("input row {index} out of range ({} rows)", raw.rows.len())
            })?;
            inspect_payload(&model, Some((row, index)))?
        }
        None => inspect_payload(&model, None)?,
    };
    if let Some(path) = &a.graph_out {
        ensure_parent(path)?;
        std::fs::write(path, inspect_dot(&payload))?;
    }
    let text = serde_json::to_string_pretty(&payload)? + "\n";
    match &a.out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, &text)?;
            to_line(&serde_json::json!({ "payload": path, "graph": a.graph_out }))
        }
        None => Ok(text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Tree filter weights, biases excluded.
    pub tree: usize,
    /// Weights of one leaf network.
    pub leaf_mlp: usize,
    pub n_leaves: usize,
    /// All leaf networks together.
    pub leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub params: ParamReport,
    pub entities: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<BenchReport>,
}

pub fn param_report(a: &BenchArgs) -> Result<ParamReport> {
    let leaf = MlpConfig {
        depth: a.leaf_depth,
        width: a.leaf_width,
        in_dim: a.leaf_in,
        out_dim: a.leaf_out,
        hidden_activation: HiddenActivation::Relu,
    };
    let leaf_mlp = mlp_param_count(&leaf)?;
    let config = TreeConfig::new(a.depth);
    config.validate()?;
    Ok(ParamReport {
        tree: tree_param_count(a.depth, a.features),
        leaf_mlp,
        n_leaves: config.n_leaves(),
        leaves: leaf_mlp * config.n_leaves(),
    })
}

fn model_param_report(model: &Model) -> Result<ParamReport> {
    let (tree, leaves) = match model.body() {
        ModelBody::TreeGated { tree, leaves } => (tree, leaves),
        _ => bail!(
            "bench needs a tree_gated model, got {}",
            model.kind().name()
        ),
    };
    let counts = model.param_count()?;
    Ok(ParamReport {
        tree: counts.tree,
        leaf_mlp: mlp_param_count(&leaves[0].config())?,
        n_leaves: tree.config().n_leaves(),
        leaves: counts.leaves_or_trunk,
    })
}

pub fn cmd_bench(a: &BenchArgs) -> Result<BenchOutput> {
    let model = match &a.model {
        Some(path) => Model::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            if a.leaf_in > a.features {
                bail!(
                    "leaf input ({}) exceeds tree input ({})",
                    a.leaf_in,
                    a.features
                );
            }
            let schema = FeatureSchema {
                variant_names: (0..a.features - a.leaf_in)
                    .map(|i| format!("v{i}"))
                    .collect(),
                invariant_names: (0..a.leaf_in).map(|i| format!("i{i}")).collect(),
                target_name: "y".into(),
                entity_key_name: "entity_key".into(),
                time_name: "time".into(),
            };
            let mut spec = ModelSpec::new(ModelKind::TreeGated);
            spec.tree = TreeConfig::new(a.depth);
            spec.mlp_depth = a.leaf_depth;
            spec.mlp_width = a.leaf_width;
            if a.leaf_out != 2 {
                bail!("leaf networks emit (mu, sigma); --leaf-out must be 2 when timing");
            }
            let n = schema.n_features();
            Model::init(&spec, schema, Scaler::identity(n), &mut init_rng(a.seed))?
        }
    };
    let params = if a.model.is_some() {
        model_param_report(&model)?
    } else {
        param_report(a)?
    };
    if model.kind() != ModelKind::TreeGated {
        bail!(
            "bench needs a tree_gated model, got {}",
            model.kind().name()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (entities, variants) = bench_population(&model, a.entities.as_deref(), &mut rng)?;
    if a.params_only {
        return Ok(BenchOutput {
            params,
            entities: entities.len(),
            latency: None,
        });
    }
    let cache = build_cache(
        &model,
        entities.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
    )?;
    let keys: Vec<&String> = entities.keys().collect();
    let workload: Vec<Request> = (0..a.requests)
        .map(|_| Request {
            entity_key: keys[rng.gen_range(0..keys.len())].clone(),
            variant: variants[rng.gen_range(0..variants.len())].clone(),
        })
        .collect();
    let latency = bench_inference(&model, &cache, &workload, a.reps)?;
    Ok(BenchOutput {
        params,
        entities: entities.len(),
        latency: Some(latency),
    })
}

type Population = (BTreeMap<String, Vec<f64>>, Vec<Vec<f64>>);

/// Entities with their scaled invariant segments plus a pool of variant
/// segments, from a dataset or drawn at random.
fn bench_population(
    model: &Model,
    path: Option<&Path>,
    rng: &mut ChaCha8Rng,
) -> Result<Population> {
    let schema = model.schema();
    let mut entities = BTreeMap::new();
    let mut variants = Vec::new();
    match path {
        Some(path) => {
            let raw = load_dataset(path, schema)
                .with_context(|| format!("loading {}", path.display()))?;
            for row in &raw.rows {
                let x = model.scaler().apply(schema, row)?;
                entities.entry(x.entity_key).or_insert(x.invariant);
                if variants.len() < 10_000 {
                    variants.push(x.variant);
                }
            }
        }
        None => {
            for e in 0..20 {
                let inv = (0..schema.invariant_names.len())
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect();
                entities.insert(format!("entity_{e:02}"), inv);
            }
            for _ in 0..1000 {
                variants.push(
                    (0..schema.variant_names.len())
                        .map(|_| rng.gen_range(-2.0..2.0))
                        .collect(),
                );
            }
        }
    }
    if entities.is_empty() {
        bail!("no entities for the benchmark workload");
    }
    Ok((entities, variants))
}
