//! Minibatch NLL minimization with Adam and a cosine-annealed learning rate,
//! best-validation checkpointing and multi-seed evaluation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::mixture::{Model, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2048,
            lr_max: 0.1,
            lr_min: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Generator for epoch shuffling.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// `lr_min + (lr_max - lr_min) · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `groups` names ranges of `params` for
/// error reporting; a non-finite gradient aborts before anything changes.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
    groups: &[(String, Range<usize>)],
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::DimensionMismatch {
            context: "Adam step",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let group = groups
            .iter()
            .find(|(_, r)| r.contains(&i))
            .map_or_else(|| format!("#{i}"), |(name, _)| name.clone());
        return Err(Error::NonFiniteGradient { group });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub valid_nll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistoryRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_valid_step: usize,
    pub best_valid_nll: f64,
}

impl TrainHistory {
    /// Step and eval records interleaved in step order.
    pub fn records(&self) -> Vec<HistoryRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + self.evals.len());
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            out.push(HistoryRecord::Step(*s));
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                out.push(HistoryRecord::Eval(*e));
            }
        }
        out.extend(evals.map(|e| HistoryRecord::Eval(*e)));
        out
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records() {
            let _ = writeln!(out, "{}", serde_json::to_string(&r)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                HistoryRecord::Step(s) => steps.push(s),
                HistoryRecord::Eval(e) => evals.push(e),
            }
        }
        let best = evals
            .iter()
            .fold(None::<EvalRecord>, |best, e| match best {
                Some(b) if b.valid_nll <= e.valid_nll => Some(b),
                _ => Some(*e),
            })
            .ok_or_else(|| Error::Config("history has no evaluation records".into()))?;
        Ok(Self {
            steps,
            evals,
            best_valid_step: best.step,
            best_valid_nll: best.valid_nll,
        })
    }
}

/// Runs `config.steps` Adam updates on shuffled minibatches and returns the
/// parameters with the lowest validation NLL.
pub fn train(
    model: Model,
    data: &SplitDataset,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if data.valid.is_empty() {
        return Err(Error::EmptySplit("valid"));
    }
    let mut model = model;
    let groups = model.param_groups();
    let adam = config.adam();
    let mut params = model.flat_params();
    let mut state = AdamState::new(params.len());
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();

    let mut history = TrainHistory {
        steps: Vec::with_capacity(config.steps),
        evals: Vec::new(),
        best_valid_step: 0,
        best_valid_nll: f64::INFINITY,
    };
    let mut best_params = params.clone();

    for step in 1..=config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&Sample> = order[cursor..end].iter().map(|&i| &data.train[i]).collect();
        cursor = end;

        let lr = cosine_lr(step - 1, config.steps, config.lr_max, config.lr_min)?;
        let (loss, grad) = model.nll_and_gradient_refs(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step, lr });
        }
        adam_step(&mut params, &grad, &mut state, lr, &adam, &groups)?;
        model.set_flat_params(&params)?;
        history.steps.push(StepRecord {
            step,
            lr,
            train_nll: loss,
        });

        if step % config.eval_every == 0 || step == config.steps {
            let valid_nll = model.batch_nll(&data.valid)?;
            if !valid_nll.is_finite() {
                return Err(Error::NanLoss { step, lr });
            }
            history.evals.push(EvalRecord { step, valid_nll });
            if valid_nll < history.best_valid_nll {
                history.best_valid_nll = valid_nll;
                history.best_valid_step = step;
                best_params.copy_from_slice(&params);
            }
        }
    }
    model.set_flat_params(&best_params)?;
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllStats {
    pub mean: f64,
    /// Sample (n − 1) standard deviation over seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl NllStats {
    pub fn from_values(per_seed: Vec<f64>) -> Result<Self> {
        if per_seed.len() < 2 {
            return Err(Error::Config("need at least two seeds".into()));
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
            per_seed,
        })
    }
}

/// Trains one model and reports its test NLL. The factory receives the
/// initialization generator for `seed`.
pub fn train_and_test<F>(
    factory: &F,
    data: &SplitDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Model>,
{
    let run = || -> Result<f64> {
        let model = factory(&mut init_rng(seed))?;
        let config = TrainConfig {
            seed,
            ..config.clone()
        };
        let (best, _) = train(model, data, &config)?;
        best.batch_nll(&data.test)
    };
    run().map_err(|e| Error::Seed {
        seed,
        source: Box::new(e),
    })
}

/// Test NLL over seeds `config.seed + 0 .. config.seed + n_seeds`.
pub fn evaluate_multiseed<F>(
    factory: F,
    data: &SplitDataset,
    config: &TrainConfig,
    n_seeds: usize,
) -> Result<NllStats>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Model>,
{
    if n_seeds < 2 {
        return Err(Error::Config("need at least two seeds".into()));
    }
    if data.test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let per_seed = (0..n_seeds as u64)
        .map(|i| train_and_test(&factory, data, config, config.seed + i))
        .collect::<Result<Vec<_>>>()?;
    NllStats::from_values(per_seed)
}
