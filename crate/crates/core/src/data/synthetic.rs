//! Synthetic taxi-stand passage times.
//!
//! Each entity (stand) has fixed location, segment length and total count,
//! and two lognormal passage-time components ("fast" and "slow") whose
//! parameters depend only on the entity. The probability of the slow
//! component depends on the hour of day and on the entity's traffic level:
//!
//! ```text
//! p_slow(e, h) = sigmoid(hour_coef · sin(2πh / 24) + count_coef · c_e)
//! ```
//!
//! where `c_e ∈ [-1, 1]` maps linearly onto the entity's total count. The
//! generator returns the ground truth so the exact log-density of every row
//! can be evaluated.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSchema, RawDataset, RawRow};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_log_pdf, log_sum_exp, sigmoid};

const DAY: f64 = 86_400.0;
const CENTER_LAT: f64 = 35.4583;
const CENTER_LON: f64 = 139.5625;
const TOTAL_COUNT_MID: f64 = 25_000.0;
const TOTAL_COUNT_HALF_RANGE: f64 = 15_000.0;
/// Free-flow speed (m/s) tying the fast component to the segment length.
const FREE_FLOW_SPEED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingRule {
    pub hour_coef: f64,
    pub count_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenConfig {
    pub n_entities: usize,
    pub rows_per_entity: usize,
    pub seed: u64,
    pub days: u32,
    pub segment_length_range: (f64, f64),
    /// Uniform jitter added to the fast component's log-mean.
    pub log_mean_jitter: f64,
    /// Slow log-mean minus fast log-mean.
    pub gap_range: (f64, f64),
    pub fast_log_std_range: (f64, f64),
    /// Slow log-std divided by fast log-std.
    pub slow_std_ratio_range: (f64, f64),
    pub mixing: MixingRule,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_entities: 20,
            rows_per_entity: 2000,
            seed: 7,
            days: 28,
            segment_length_range: (50.0, 400.0),
            log_mean_jitter: 0.2,
            gap_range: (0.8, 1.6),
            fast_log_std_range: (0.15, 0.35),
            slow_std_ratio_range: (1.0, 1.5),
            mixing: MixingRule {
                hour_coef: 1.5,
                count_coef: 1.0,
            },
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_entities == 0 || self.rows_per_entity == 0 {
            return bad("entity and row counts must be positive");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        for (name, (lo, hi)) in [
            ("segment_length_range", self.segment_length_range),
            ("gap_range", self.gap_range),
            ("fast_log_std_range", self.fast_log_std_range),
            ("slow_std_ratio_range", self.slow_std_ratio_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("{name} must be an ordered finite range"));
            }
        }
        if self.segment_length_range.0 <= 0.0
            || self.fast_log_std_range.0 <= 0.0
            || self.slow_std_ratio_range.0 <= 0.0
        {
            return bad("lengths and log-stds must be positive");
        }
        if !(self.log_mean_jitter >= 0.0) {
            return bad("log_mean_jitter must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentTruth {
    pub log_mean: f64,
    pub log_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTruth {
    /// Traffic level in [-1, 1] entering the mixing rule.
    pub traffic_level: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub segment_length: f64,
    pub total_count: f64,
    /// `[fast, slow]`.
    pub components: [ComponentTruth; 2],
}

/// Generator sidecar: everything needed to evaluate the true density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format_version: u32,
    pub config: SyntheticGenConfig,
    pub entities: BTreeMap<String, EntityTruth>,
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let truth: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if truth.format_version != 1 {
            return Err(Error::FormatVersion(truth.format_version));
        }
        Ok(truth)
    }
}

/// Logit of the slow component's probability.
pub fn mixing_logit(rule: &MixingRule, traffic_level: f64, time: f64) -> f64 {
    let hour = time.rem_euclid(DAY) / 3600.0;
    rule.hour_coef * (2.0 * PI * hour / 24.0).sin() + rule.count_coef * traffic_level
}

/// True log-density of a log-space target `y` for one record.
pub fn row_oracle_log_density(
    truth: &GroundTruth,
    entity_key: &str,
    time: f64,
    y: f64,
) -> Result<f64> {
    let e = truth
        .entities
        .get(entity_key)
        .ok_or_else(|| Error::Schema(format!("entity `{entity_key}` missing from ground truth")))?;
    let p_slow = sigmoid(mixing_logit(&truth.config.mixing, e.traffic_level, time));
    let [fast, slow] = e.components;
    log_sum_exp(&[
        (1.0 - p_slow).ln() + gaussian_log_pdf(y, fast.log_mean, fast.log_std)?,
        p_slow.ln() + gaussian_log_pdf(y, slow.log_mean, slow.log_std)?,
    ])
}

/// Mean negative log-density of the rows' log targets under the truth.
pub fn oracle_nll(truth: &GroundTruth, rows: &[RawRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for r in rows {
        total -= row_oracle_log_density(
            truth,
            &r.entity_key,
            r.time,
            super::transform_target(r.target)?,
        )?;
    }
    Ok(total / rows.len() as f64)
}

struct Event {
    time: f64,
    target: f64,
}

/// Trailing-window statistics over earlier events of the same entity.
fn window_features(history: &VecDeque<Event>, now: f64, window: f64, fallback: f64) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for e in history.iter().rev() {
        if now - e.time > window {
            break;
        }
        count += 1;
        sum += e.target;
    }
    let avg = if count > 0 {
        sum / count as f64
    } else {
        fallback
    };
    (count as f64, avg)
}

pub fn generate_synthetic(config: &SyntheticGenConfig) -> Result<(RawDataset, GroundTruth)> {
    config.validate()?;
    let schema = FeatureSchema::taxi_stand();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_entities.saturating_sub(1).to_string().len().max(2);

    let mut entities = BTreeMap::new();
    let mut keys = Vec::with_capacity(config.n_entities);
    for e in 0..config.n_entities {
        let key = format!("stand_{e:0width$}");
        let traffic_level = rng.gen_range(-1.0..=1.0);
        let (lo, hi) = config.segment_length_range;
        let segment_length = rng.gen_range(lo..=hi);
        let fast_mean = (segment_length / FREE_FLOW_SPEED).ln()
            + rng.gen_range(-config.log_mean_jitter..=config.log_mean_jitter);
        let gap = rng.gen_range(config.gap_range.0..=config.gap_range.1);
        let fast_std = rng.gen_range(config.fast_log_std_range.0..=config.fast_log_std_range.1);
        let ratio = rng.gen_range(config.slow_std_ratio_range.0..=config.slow_std_ratio_range.1);
        let truth = EntityTruth {
            traffic_level,
            latitude: CENTER_LAT + rng.gen_range(-0.045..=0.045),
            longitude: CENTER_LON + rng.gen_range(-0.055..=0.055),
            segment_length,
            total_count: (TOTAL_COUNT_MID + TOTAL_COUNT_HALF_RANGE * traffic_level).round(),
            components: [
                ComponentTruth {
                    log_mean: fast_mean,
                    log_std: fast_std,
                },
                ComponentTruth {
                    log_mean: fast_mean + gap,
                    log_std: fast_std * ratio,
                },
            ],
        };
        keys.push(key.clone());
        entities.insert(key, truth);
    }

    let horizon = config.days as f64 * DAY;
    let mut tagged = Vec::with_capacity(config.n_entities * config.rows_per_entity);
    for (e_idx, key) in keys.iter().enumerate() {
        let truth = &entities[key];
        let mut times: Vec<f64> = (0..config.rows_per_entity)
            .map(|_| rng.gen_range(0.0..horizon).floor())
            .collect();
        times.sort_by(f64::total_cmp);
        let [fast, slow] = truth.components;
        let fallback = fast.log_mean.exp();
        let mut history: VecDeque<Event> = VecDeque::new();
        for (seq, &time) in times.iter().enumerate() {
            while history.front().is_some_and(|e| time - e.time > 3600.0) {
                history.pop_front();
            }
            let last = history.back().map_or(fallback, |e| e.target);
            let (c15, d15) = window_features(&history, time, 900.0, last);
            let (c30, d30) = window_features(&history, time, 1800.0, last);
            let (c60, d60) = window_features(&history, time, 3600.0, last);
            let hour = time.rem_euclid(DAY) / 3600.0;
            let dow = (time / DAY).floor() % 7.0;
            let p_slow = sigmoid(mixing_logit(&config.mixing, truth.traffic_level, time));
            let component = if rng.gen::<f64>() < p_slow {
                slow
            } else {
                fast
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            let target = (component.log_mean + component.log_std * z).exp();
            let features = vec![
                (2.0 * PI * hour / 24.0).sin(),
                (2.0 * PI * hour / 24.0).cos(),
                (2.0 * PI * dow / 7.0).sin(),
                (2.0 * PI * dow / 7.0).cos(),
                c15,
                c30,
                c60,
                d15,
                d30,
                d60,
                truth.latitude,
                truth.longitude,
                truth.segment_length,
                truth.total_count,
            ];
            tagged.push((
                (time, e_idx, seq),
                RawRow {
                    entity_key: key.clone(),
                    time,
                    features,
                    target,
                },
            ));
            history.push_back(Event { time, target });
        }
    }
    tagged.sort_by(|a, b| {
        a.0 .0
            .total_cmp(&b.0 .0)
            .then(a.0 .1.cmp(&b.0 .1))
            .then(a.0 .2.cmp(&b.0 .2))
    });
    let rows = tagged.into_iter().map(|(_, r)| r).collect();
    Ok((
        RawDataset { schema, rows },
        GroundTruth {
            format_version: 1,
            config: config.clone(),
            entities,
        },
    ))
}
