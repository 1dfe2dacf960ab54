use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::TempDir;

use treemdn::data::{
    generate_synthetic, load_dataset, write_dataset, FeatureSchema, GroundTruth, Scaler,
    SyntheticGenConfig,
};
use treemdn::mixture::{ModelBody, ModelSpec};
use treemdn::soft_tree::{NodeParams, SoftTree, TreeConfig};
use treemdn::training::TrainHistory;
use treemdn::{Model, ModelKind};
use treemdn_cli::*;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treemdn"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns its single stderr line.
fn fails(args: &[&str]) -> String {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Small generated dataset: 5 entities × 300 rows.
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "gen-data",
            "--out",
            &f.p("d.csv"),
            "--entities",
            "5",
            "--rows-per-entity",
            "300",
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, kind: &str, out: &str, steps: usize, extra: &[&str]) -> TrainReport {
        let data = self.p("d.csv");
        let out = self.p(out);
        let steps = steps.to_string();
        let mut args = vec![
            "train",
            "--kind",
            kind,
            "--data",
            &data,
            "--out",
            &out,
            "--steps",
            &steps,
            "--batch",
            "128",
            "--eval-every",
            "10",
            "--lr",
            "0.03",
        ];
        args.extend_from_slice(extra);
        serde_json::from_str(&ok(&args)).unwrap()
    }
}

fn round_trips<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(value: &T) {
    let text = serde_json::to_string(value).unwrap();
    assert_eq!(&serde_json::from_str::<T>(&text).unwrap(), value);
}

#[test]
fn gen_data_writes_files_and_counts_rows() {
    let f = Fixture::new();
    let report = cmd_gen_data(&GenDataArgs {
        seed: 7,
        out: f.path("full.csv"),
        entities: 20,
        rows_per_entity: 2000,
        days: 28,
    })
    .unwrap();
    assert_eq!(report.rows, 40_000);
    assert_eq!(
        report.train_rows + report.valid_rows + report.test_rows,
        40_000
    );
    assert!(report.truth.ends_with("full.truth.json"));
    let raw = load_dataset(f.path("full.csv"), &FeatureSchema::taxi_stand()).unwrap();
    assert_eq!(raw.rows.len(), 40_000);
    GroundTruth::load(&report.truth).unwrap();
    round_trips(&report);
}

#[test]
fn gen_data_same_seed_identical_files() {
    let f = Fixture::new();
    ok(&[
        "gen-data",
        "--out",
        &f.p("again.csv"),
        "--entities",
        "5",
        "--rows-per-entity",
        "300",
    ]);
    for (a, b) in [("d.csv", "again.csv"), ("d.truth.json", "again.truth.json")] {
        assert_eq!(
            std::fs::read(f.path(a)).unwrap(),
            std::fs::read(f.path(b)).unwrap()
        );
    }
    ok(&[
        "gen-data",
        "--out",
        &f.p("other.csv"),
        "--entities",
        "5",
        "--rows-per-entity",
        "300",
        "--seed",
        "8",
    ]);
    assert_ne!(
        std::fs::read(f.path("d.csv")).unwrap(),
        std::fs::read(f.path("other.csv")).unwrap()
    );
}

#[test]
fn train_writes_model_and_history() {
    let f = Fixture::new();
    let report = f.train("tree-gated", "m.json", 40, &[]);
    round_trips(&report);
    assert_eq!(report.kind, ModelKind::TreeGated);
    assert_eq!(report.steps, 40);
    let model = Model::load(f.path("m.json")).unwrap();
    assert_eq!(model.n_params(), report.n_params);
    let history =
        TrainHistory::from_jsonl(&std::fs::read_to_string(f.path("m.history.jsonl")).unwrap())
            .unwrap();
    assert_eq!(history.steps.len(), 40);
    assert_eq!(history.evals.len(), 4);
    assert_eq!(history.best_valid_nll, report.best_valid_nll);
}

#[test]
fn train_mdn_components_set_trunk_width() {
    let f = Fixture::new();
    f.train("mdn", "mdn.json", 40, &["--components", "8"]);
    let model = Model::load(f.path("mdn.json")).unwrap();
    match model.body() {
        ModelBody::MdnBaseline { trunk, components } => {
            assert_eq!(*components, 8);
            assert_eq!(trunk.out_dim(), 24);
        }
        _ => panic!("expected an mdn model"),
    }
}

#[test]
fn train_single_step_history() {
    let f = Fixture::new();
    f.train("const-tree", "c.json", 1, &["--history", &f.p("h.jsonl")]);
    let history =
        TrainHistory::from_jsonl(&std::fs::read_to_string(f.path("h.jsonl")).unwrap()).unwrap();
    assert_eq!(history.steps.len(), 1);
}

#[test]
fn train_accepts_snake_case_kind_names() {
    let f = Fixture::new();
    let report = f.train("tree_gated", "t.json", 2, &[]);
    assert_eq!(report.kind, ModelKind::TreeGated);
}

#[test]
fn eval_reproduces_best_valid_nll() {
    let f = Fixture::new();
    let report = f.train("tree-gated", "m.json", 40, &[]);
    let eval: EvalReport = serde_json::from_str(&ok(&[
        "eval",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("d.csv"),
        "--split",
        "valid",
    ]))
    .unwrap();
    assert!((eval.nll - report.best_valid_nll).abs() <= 1e-12);
    assert_eq!(eval.oracle_nll, None);
    let test: EvalReport = serde_json::from_str(&ok(&[
        "eval",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("d.csv"),
    ]))
    .unwrap();
    assert!((test.nll - report.test_nll).abs() <= 1e-12);
    round_trips(&test);
}

#[test]
fn eval_oracle_matches_generator_report() {
    let f = Fixture::new();
    let gen: GenDataReport = serde_json::from_str(&ok(&[
        "gen-data",
        "--out",
        &f.p("g.csv"),
        "--entities",
        "5",
        "--rows-per-entity",
        "300",
    ]))
    .unwrap();
    f.train("mdn", "m.json", 40, &[]);
    let eval: EvalReport = serde_json::from_str(&ok(&[
        "eval",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("g.csv"),
        "--oracle",
    ]))
    .unwrap();
    assert_eq!(eval.oracle_nll, Some(gen.oracle_test_nll));
}

#[test]
fn eval_empty_split_is_an_error() {
    let f = Fixture::new();
    f.train("mdn", "m.json", 2, &[]);
    let short = SyntheticGenConfig {
        n_entities: 2,
        rows_per_entity: 50,
        days: 10,
        ..SyntheticGenConfig::default()
    };
    write_dataset(f.path("short.csv"), &generate_synthetic(&short).unwrap().0).unwrap();
    let err = fails(&[
        "eval",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("short.csv"),
    ]);
    assert!(err.contains("valid"), "{err}");
    // gen-data refuses the same layout before writing anything
    let err = fails(&[
        "gen-data",
        "--out",
        &f.p("g.csv"),
        "--days",
        "10",
        "--entities",
        "2",
    ]);
    assert!(err.contains("valid"), "{err}");
    assert!(!f.path("g.csv").exists());
}

#[test]
fn eval_schema_mismatch_is_an_error() {
    let f = Fixture::new();
    let schema = FeatureSchema {
        variant_names: vec!["a".into()],
        invariant_names: vec!["b".into()],
        target_name: "y".into(),
        entity_key_name: "entity_key".into(),
        time_name: "time".into(),
    };
    let model = Model::init(
        &ModelSpec::new(ModelKind::TreeGated),
        schema,
        Scaler::identity(2),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    model.save(f.path("odd.json")).unwrap();
    let err = fails(&["eval", "--model", &f.p("odd.json"), "--data", &f.p("d.csv")]);
    assert!(err.contains("schema mismatch"), "{err}");
}

#[test]
fn missing_files_fail_with_one_line() {
    let f = Fixture::new();
    fails(&[
        "eval",
        "--model",
        &f.p("absent.json"),
        "--data",
        &f.p("d.csv"),
    ]);
    fails(&[
        "train",
        "--kind",
        "mdn",
        "--data",
        &f.p("absent.csv"),
        "--out",
        &f.p("x.json"),
    ]);
}

#[test]
fn diverging_training_fails_with_one_line() {
    let f = Fixture::new();
    let data = f.p("d.csv");
    let out = f.p("x.json");
    fails(&[
        "train", "--kind", "mdn", "--data", &data, "--out", &out, "--steps", "30", "--lr", "1e300",
    ]);
    assert!(!f.path("x.json").exists());
}

#[test]
fn predict_emits_one_record_per_row() {
    let f = Fixture::new();
    f.train("tree-gated", "m.json", 40, &[]);
    let text = ok(&[
        "predict",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("d.csv"),
        "--limit",
        "5",
    ]);
    let model = Model::load(f.path("m.json")).unwrap();
    let records: Vec<PredictRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 5);
    for r in &records {
        round_trips(r);
        assert!((r.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.alphas.len(), model.n_components());
        let d = treemdn::MixtureDensity {
            alphas: r.alphas.clone(),
            mus: r.mus.clone(),
            sigmas: r.sigmas.clone(),
        };
        assert_eq!(d.log_pdf(r.y).unwrap(), r.log_density);
    }
}

#[test]
fn compare_runs_every_kind_deterministically() {
    let f = Fixture::new();
    let args = |out: &str| CompareArgs {
        data: f.path("d.csv"),
        seeds: 2,
        seed: 3,
        truth: None,
        out: f.path(out),
        lr: 0.03,
        model: ModelArgs {
            depth: 2,
            leaf_width: 8,
            leaf_depth: 2,
            activation: ActivationArg::Relu,
            components: 2,
            steps: 15,
            batch: 128,
            lr_min: 0.0,
            eval_every: 5,
        },
    };
    let report = cmd_compare(&args("a.json")).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.seeds, vec![3, 4]);
    for (row, kind) in report.rows.iter().zip(ModelKind::ALL) {
        assert_eq!(row.kind, kind);
        assert_eq!(row.per_seed.len(), 2);
    }
    let on_disk: CompareReport =
        serde_json::from_str(&std::fs::read_to_string(f.path("a.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    assert_eq!(cmd_compare(&args("b.json")).unwrap(), report);
    let table = report.table();
    assert!(table.contains("tree_gated") && table.contains("oracle"));
}

#[test]
fn compare_needs_the_sidecar() {
    let f = Fixture::new();
    std::fs::copy(f.path("d.csv"), f.path("bare.csv")).unwrap();
    let err = fails(&[
        "compare",
        "--data",
        &f.p("bare.csv"),
        "--seeds",
        "2",
        "--steps",
        "2",
        "--out",
        &f.p("c.json"),
    ]);
    assert!(err.contains("sidecar"), "{err}");
}

fn check_payload(p: &InspectPayload) {
    for node in &p.nodes {
        let total: f64 = node.weights.iter().map(|w| w.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(
            node.weights
                .iter()
                .filter(|w| w.segment == "invariant")
                .count(),
            4
        );
    }
    assert_eq!(p.edges.len(), 2 * p.nodes.len());
    if p.input.is_some() {
        for level in 0..p.depth {
            let total: f64 = p
                .nodes
                .iter()
                .filter(|n| n.level == level)
                .map(|n| n.mass_percent.unwrap())
                .sum();
            assert!((total - 100.0).abs() < 1e-6);
        }
        let total: f64 = p.leaves.iter().map(|l| l.mass_percent.unwrap()).sum();
        assert!((total - 100.0).abs() < 1e-6);
    }
}

#[test]
fn inspect_static_and_routed_payloads() {
    let f = Fixture::new();
    f.train("tree-gated", "m.json", 40, &[]);
    let text = ok(&["inspect", "--model", &f.p("m.json")]);
    let static_payload: InspectPayload = serde_json::from_str(&text).unwrap();
    check_payload(&static_payload);
    assert!(static_payload.input.is_none());
    assert!(static_payload
        .leaves
        .iter()
        .all(|l| l.mu.is_none() && l.alpha.is_none()));
    round_trips(&static_payload);

    ok(&[
        "inspect",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("d.csv"),
        "--input-row",
        "7",
        "--graph-out",
        &f.p("t.dot"),
        "--out",
        &f.p("i.json"),
    ]);
    let routed: InspectPayload =
        serde_json::from_str(&std::fs::read_to_string(f.path("i.json")).unwrap()).unwrap();
    check_payload(&routed);
    assert_eq!(routed.input.as_ref().unwrap().row, 7);
    assert!(routed
        .leaves
        .iter()
        .all(|l| l.mu.is_some() && l.sigma.unwrap() > 0.0));
    // attention weights do not depend on the input
    for (a, b) in static_payload.nodes.iter().zip(&routed.nodes) {
        assert_eq!(a.weights, b.weights);
    }
    let dot = std::fs::read_to_string(f.path("t.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches(" -> ").count(), routed.edges.len());
}

#[test]
fn inspect_shared_invariants_give_identical_leaves() {
    let f = Fixture::new();
    f.train("tree-gated", "m.json", 40, &[]);
    let model = Model::load(f.path("m.json")).unwrap();
    let raw = load_dataset(f.path("d.csv"), model.schema()).unwrap();
    let key = &raw.rows[0].entity_key;
    let (i, j) = {
        let same: Vec<usize> = raw
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.entity_key == key)
            .map(|(i, _)| i)
            .collect();
        (same[0], same[same.len() - 1])
    };
    let a = inspect_payload(&model, Some((&raw.rows[i], i))).unwrap();
    let b = inspect_payload(&model, Some((&raw.rows[j], j))).unwrap();
    for (x, y) in a.leaves.iter().zip(&b.leaves) {
        assert_eq!((x.mu, x.sigma), (y.mu, y.sigma));
    }
    assert_ne!(
        a.leaves.iter().map(|l| l.alpha).collect::<Vec<_>>(),
        b.leaves.iter().map(|l| l.alpha).collect::<Vec<_>>()
    );
}

#[test]
fn inspect_confident_gates_bound_leaf_mass() {
    // every gate at sigmoid(3 + x) ≥ 0.95 for inputs in [-0.5, 0.5]: the
    // all-right leaf receives at least 0.9^3
    let schema = FeatureSchema::taxi_stand();
    let n = schema.n_features();
    let config = TreeConfig::new(3);
    let nodes = (0..config.n_param_nodes())
        .map(|i| NodeParams {
            w: (0..n).map(|k| ((i * 7 + k) % 5) as f64 * 0.3).collect(),
            b: 3.0,
        })
        .collect();
    let tree = SoftTree::new(config, nodes).unwrap();
    let spec = ModelSpec::new(ModelKind::ConstantLeafTree);
    let base = Model::init(
        &spec,
        schema.clone(),
        Scaler::identity(n),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let leaves = match base.body() {
        ModelBody::ConstantLeafTree { leaves, .. } => leaves.clone(),
        _ => unreachable!(),
    };
    let model = Model::new(
        ModelBody::ConstantLeafTree { tree, leaves },
        schema,
        Scaler::identity(n),
    )
    .unwrap();
    let row = treemdn::data::RawRow {
        entity_key: "e".into(),
        time: 0.0,
        features: (0..n).map(|k| (k as f64 / n as f64) - 0.5).collect(),
        target: 1.0,
    };
    let p = inspect_payload(&model, Some((&row, 0))).unwrap();
    assert!(p.nodes.iter().all(|node| node.gate.unwrap() >= 0.9));
    let best = p
        .leaves
        .iter()
        .map(|l| l.alpha.unwrap())
        .fold(0.0, f64::max);
    assert!(best >= 0.9f64.powi(3));
    assert_eq!(p.leaves.last().unwrap().alpha.unwrap(), best);
    assert!(p.leaves.iter().all(|l| l.mu.is_some()));
}

#[test]
fn inspect_rejects_mdn() {
    let f = Fixture::new();
    f.train("mdn", "m.json", 2, &[]);
    let err = fails(&["inspect", "--model", &f.p("m.json")]);
    assert!(err.contains("no tree to inspect"), "{err}");
}

#[test]
fn inspect_row_out_of_range() {
    let f = Fixture::new();
    f.train("tree-gated", "m.json", 2, &[]);
    let err = fails(&[
        "inspect",
        "--model",
        &f.p("m.json"),
        "--data",
        &f.p("d.csv"),
        "--input-row",
        "99999",
    ]);
    assert!(err.contains("out of range"), "{err}");
}

fn bench_args() -> BenchArgs {
    BenchArgs {
        model: None,
        entities: None,
        requests: 2000,
        reps: 3,
        seed: 0,
        depth: 3,
        features: 14,
        leaf_in: 4,
        leaf_depth: 2,
        leaf_width: 50,
        leaf_out: 2,
        params_only: false,
    }
}

#[test]
fn bench_default_parameter_breakdown() {
    let out = cmd_bench(&bench_args()).unwrap();
    assert_eq!(
        out.params,
        ParamReport {
            tree: 98,
            leaf_mlp: 300,
            n_leaves: 8,
            leaves: 2400
        }
    );
    let latency = out.latency.as_ref().unwrap();
    assert_eq!(latency.requests, 2000);
    assert_eq!(latency.repetitions.len(), 3);
    round_trips(&out);
}

#[test]
fn bench_worked_example_parameter_counts() {
    let args = BenchArgs {
        features: 30,
        leaf_in: 30,
        leaf_depth: 3,
        leaf_width: 100,
        params_only: true,
        ..bench_args()
    };
    let out = cmd_bench(&args).unwrap();
    assert_eq!((out.params.tree, out.params.leaf_mlp), (210, 13_200));
    assert!(out.latency.is_none());
}

#[test]
fn bench_trained_model_matches_fresh_counts() {
    let f = Fixture::new();
    f.train("tree-gated", "m.json", 2, &[]);
    let text = ok(&[
        "bench",
        "--model",
        &f.p("m.json"),
        "--entities",
        &f.p("d.csv"),
        "--requests",
        "500",
        "--reps",
        "3",
    ]);
    let out: BenchOutput = serde_json::from_str(&text).unwrap();
    assert_eq!(out.entities, 5);
    assert_eq!(
        out.params,
        cmd_bench(&BenchArgs {
            params_only: true,
            ..bench_args()
        })
        .unwrap()
        .params
    );
    let err = {
        f.train("mdn", "mdn.json", 2, &[]);
        fails(&["bench", "--model", &f.p("mdn.json")])
    };
    assert!(err.contains("tree_gated"), "{err}");
}

#[test]
fn default_paths() {
    assert_eq!(
        truth_path(Path::new("data/x.csv")),
        PathBuf::from("data/x.truth.json")
    );
    assert_eq!(
        history_path(Path::new("m/model.json")),
        PathBuf::from("m/model.history.jsonl")
    );
}
