//! Shadow-model membership inference against trained client prompts.
//!
//! The attack is a per-class threshold on the target's max-confidence:
//! a query is called a member when its confidence is at least the threshold
//! learned for its class on shadow models with known membership. Thresholds
//! are applied to the log-odds of the max-confidence, a monotone transform
//! that gives the same decisions without saturating at 1.0 for sharp
//! temperatures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, VariantMode};
use crate::data::{self, Sample, SyntheticDataset};
use crate::encoder::{FrozenEncoders, TextFeatures};
use crate::error::{Error, Result};
use crate::federation::{self, Overrides, Simulation, TrainingOutcome};
use crate::numeric::{stream, Matrix, RngStream};

pub const DEFAULT_SHADOWS: usize = 8;

/// Human-readable name of the attack, echoed in every report.
pub const ATTACK_NAME: &str = "per-class max-confidence threshold (shadow-calibrated)";

const Z_95: f64 = 1.959_963_984_540_054;

/// What the attacker sees for one query, plus the ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub class: usize,
    pub confidences: Vec<f64>,
    /// `ln(p_max / (1 − p_max))`, computed from logits.
    pub log_odds: f64,
    pub member: bool,
}

/// Shadow records with equal member and non-member counts per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDataset {
    records: Vec<AttackRecord>,
}

impl AttackDataset {
    pub fn new(records: Vec<AttackRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("attack dataset is empty".into()));
        }
        let classes = records.iter().map(|r| r.class).max().unwrap_or(0) + 1;
        let mut balance = vec![0i64; classes];
        for r in &records {
            balance[r.class] += if r.member { 1 } else { -1 };
        }
        if let Some(c) = balance.iter().position(|&b| b != 0) {
            return Err(Error::InvalidArgument(format!(
                "attack dataset is unbalanced for class {c} (members minus non-members = {})",
                balance[c]
            )));
        }
        Ok(AttackDataset { records })
    }

    pub fn records(&self) -> &[AttackRecord] {
        &self.records
    }

    pub fn members(&self) -> usize {
        self.records.iter().filter(|r| r.member).count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Black-box view of one trained client: confidences only.
#[derive(Debug, Clone)]
pub struct TargetModel<'a> {
    encoders: &'a FrozenEncoders,
    text: TextFeatures,
}

impl<'a> TargetModel<'a> {
    pub fn new(encoders: &'a FrozenEncoders, prompt: &Matrix) -> Result<Self> {
        Ok(TargetModel {
            encoders,
            text: encoders.text_features(prompt)?,
        })
    }

    /// Softmax confidences and max-class log-odds of a raw sample.
    pub fn query(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let g = self.encoders.image_feature(x)?;
        let logits = self.encoders.logits(&self.text, &g);
        let top = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let m = logits[top];
        // ln p_max − ln(1 − p_max) = −ln Σ_{j≠top} exp(l_j − l_top)
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, l)| (l - m).exp())
            .sum();
        let log_odds = if rest > 0.0 { -rest.ln() } else { f64::INFINITY };
        Ok((self.encoders.probabilities(&self.text, &g), log_odds))
    }

    pub fn records(&self, members: &[Sample], non_members: &[Sample]) -> Result<Vec<AttackRecord>> {
        let tag = |s: &Sample, member: bool| -> Result<AttackRecord> {
            let (confidences, log_odds) = self.query(&s.x)?;
            Ok(AttackRecord {
                class: s.y,
                confidences,
                log_odds,
                member,
            })
        };
        members
            .iter()
            .map(|s| tag(s, true))
            .chain(non_members.iter().map(|s| tag(s, false)))
            .collect()
    }
}

/// Per-client member samples and a class-matched fresh non-member draw.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub members: Vec<Sample>,
    pub non_members: Vec<Sample>,
}

/// Members are every training sample in each client's shard; non-members are
/// fresh samples from the same class means, matched per class.
pub fn query_sets(
    dataset: &SyntheticDataset,
    shards: &[Vec<usize>],
    per_class_count: usize,
    rng: &mut RngStream,
) -> Result<Vec<QuerySet>> {
    shards
        .iter()
        .map(|shard| {
            let members: Vec<Sample> = shard.iter().map(|&i| dataset.train[i].clone()).collect();
            let mut need = vec![0usize; dataset.num_classes];
            for s in &members {
                need[s.y] += 1;
            }
            let fresh = data::generate_from_means(dataset.class_means.clone(), per_class_count, dataset.noise_scale, rng)?;
            let mut non_members = Vec::with_capacity(members.len());
            for s in fresh.train.into_iter().chain(fresh.test) {
                if need[s.y] > 0 {
                    need[s.y] -= 1;
                    non_members.push(s);
                }
            }
            if need.iter().any(|&n| n > 0) {
                return Err(Error::InvalidArgument(
                    "fresh draw too small to match member counts".into(),
                ));
            }
            Ok(QuerySet { members, non_members })
        })
        .collect()
}

/// One trained shadow federation with its data.
#[derive(Debug, Clone)]
pub struct ShadowRun {
    pub seed: u64,
    pub outcome: TrainingOutcome,
    pub dataset: SyntheticDataset,
    pub shards: Vec<Vec<usize>>,
}

impl ShadowRun {
    pub fn train_size(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn client_prompts(&self) -> Result<Vec<Matrix>> {
        self.outcome
            .effective_locals
            .iter()
            .map(|l| self.outcome.final_global.add(l))
            .collect()
    }
}

/// `count` independent runs of `config` that share the target's frozen
/// encoders and class means but draw their own samples, splits and noise.
pub fn train_shadows(
    config: &RunConfig,
    encoders: &FrozenEncoders,
    class_means: &[Vec<f64>],
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<ShadowRun>> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 shadow models, got {count}")));
    }
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds
        .into_par_iter()
        .map(|seed| {
            let mut data_rng = RngStream::new(seed, stream::DATA);
            let dataset = data::generate_from_means(
                class_means.to_vec(),
                config.data.per_class_count,
                config.data.noise_scale,
                &mut data_rng,
            )?;
            let sim = Simulation::with_overrides(
                config,
                seed,
                Overrides {
                    encoders: Some(encoders.clone()),
                    dataset: Some(dataset.clone()),
                },
            )?;
            let shards = sim.plan.shards();
            let outcome = run(sim, config.protocol.rounds)?;
            Ok(ShadowRun {
                seed,
                outcome,
                dataset,
                shards,
            })
        })
        .collect()
}

fn run(mut sim: Simulation, rounds: usize) -> Result<TrainingOutcome> {
    for _ in 0..rounds {
        sim.step()?;
    }
    sim.finish()
}

/// Labelled attack-training records from shadow models.
pub fn shadow_dataset(
    shadows: &[ShadowRun],
    encoders: &FrozenEncoders,
    per_class_count: usize,
) -> Result<AttackDataset> {
    let mut records = Vec::new();
    for shadow in shadows {
        let mut rng = RngStream::new(shadow.seed, stream::MIA);
        let queries = query_sets(&shadow.dataset, &shadow.shards, per_class_count, &mut rng)?;
        for (prompt, q) in shadow.client_prompts()?.iter().zip(&queries) {
            records.extend(TargetModel::new(encoders, prompt)?.records(&q.members, &q.non_members)?);
        }
    }
    AttackDataset::new(records)
}

/// Fitted per-class thresholds on max-confidence log-odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAttack {
    /// `None` for classes without shadow records; those use `fallback`.
    pub per_class: Vec<Option<f64>>,
    pub fallback: f64,
}

impl ThresholdAttack {
    pub fn threshold(&self, class: usize) -> f64 {
        self.per_class.get(class).copied().flatten().unwrap_or(self.fallback)
    }

    pub fn predict(&self, r: &AttackRecord) -> bool {
        r.log_odds >= self.threshold(r.class)
    }
}

/// Threshold with the best training accuracy; ties go to the lowest candidate.
fn best_threshold(records: &[&AttackRecord]) -> f64 {
    let mut scores: Vec<f64> = records.iter().map(|r| r.log_odds).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for w in scores.windows(2) {
        if w[0].is_finite() && w[1].is_finite() {
            candidates.push(0.5 * (w[0] + w[1]));
        } else {
            candidates.push(w[1]);
        }
    }
    if let Some(&last) = scores.last() {
        candidates.push(if last.is_finite() { last + 1.0 } else { f64::INFINITY });
    }
    let mut best = (usize::MIN, f64::NEG_INFINITY);
    for &t in &candidates {
        let correct = records.iter().filter(|r| (r.log_odds >= t) == r.member).count();
        if correct > best.0 {
            best = (correct, t);
        }
    }
    best.1
}

pub fn fit_attack(train: &AttackDataset) -> ThresholdAttack {
    let classes = train.records.iter().map(|r| r.class).max().unwrap_or(0) + 1;
    let all: Vec<&AttackRecord> = train.records.iter().collect();
    let per_class = (0..classes)
        .map(|c| {
            let rs: Vec<&AttackRecord> = train.records.iter().filter(|r| r.class == c).collect();
            if rs.is_empty() {
                None
            } else {
                Some(best_threshold(&rs))
            }
        })
        .collect();
    ThresholdAttack {
        per_class,
        fallback: best_threshold(&all),
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z_95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_queries: usize,
    pub n_correct: usize,
    /// `None` when the target trained without noise.
    pub epsilon: Option<f64>,
    pub variant: VariantMode,
    pub attack: String,
    pub shadows: usize,
}

/// Fits on shadow data and scores the target's records.
pub fn attack(train: &AttackDataset, target: &[AttackRecord]) -> Result<(usize, usize)> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("no target queries".into()));
    }
    let model = fit_attack(train);
    let correct = target.iter().filter(|r| model.predict(r) == r.member).count();
    Ok((correct, target.len()))
}

/// Full pipeline against a finished target run: rebuild the target's
/// encoders and data from `(config, seed)`, train shadows, attack every
/// client of the target on its own members and a fresh non-member draw.
pub fn evaluate_target(
    config: &RunConfig,
    seed: u64,
    final_global: &Matrix,
    effective_locals: &[Matrix],
    shadows: usize,
) -> Result<AttackReport> {
    let encoders = federation::build_encoders(config, seed)?;
    let dataset = federation::build_dataset(config, seed)?;
    let plan = federation::build_split(config, &dataset, seed)?;
    let shards = plan.shards();
    if effective_locals.len() != shards.len() {
        return Err(Error::InvalidArgument(format!(
            "target has {} local prompts for {} clients",
            effective_locals.len(),
            shards.len()
        )));
    }

    let mut rng = RngStream::new(seed, stream::MIA);
    let runs = train_shadows(config, &encoders, &dataset.class_means, shadows, &mut rng)?;
    let train = shadow_dataset(&runs, &encoders, config.data.per_class_count)?;

    let queries = query_sets(&dataset, &shards, config.data.per_class_count, &mut rng)?;
    let mut target = Vec::new();
    for (local, q) in effective_locals.iter().zip(&queries) {
        let prompt = final_global.add(local)?;
        target.extend(TargetModel::new(&encoders, &prompt)?.records(&q.members, &q.non_members)?);
    }
    let (correct, n) = attack(&train, &target)?;
    let (ci_low, ci_high) = wilson_interval(correct, n);
    Ok(AttackReport {
        success_rate: correct as f64 / n as f64,
        ci_low,
        ci_high,
        n_queries: n,
        n_correct: correct,
        epsilon: config.privacy.noise.then_some(config.privacy.epsilon),
        variant: config.variant,
        attack: ATTACK_NAME.to_string(),
        shadows,
    })
}
