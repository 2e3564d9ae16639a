//! The federated protocol engine: client rounds, server aggregation and the
//! full training loop, plus the baseline variants.
//!
//! One global round:
//!
//! 1. every client syncs the global prompt, samples a minibatch, factorizes
//!    its local prompt (fresh probe) and runs forward/backward on
//!    `p_G + u·v + r`;
//! 2. per-example gradients of `p_G`, `u`, `v` are clipped at `C_th` and
//!    summed over the nominal batch size;
//! 3. local noise `N(0, σ_L²)` goes on the `u` and `v` gradients, the local
//!    gradient is rebuilt from them and applied to the local prompt;
//! 4. the clipped, noiseless global gradient goes to the server, which
//!    averages in client-id order, adds `N(0, σ_G²)` and steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, VariantMode};
use crate::data::{self, EvalSets, SplitPlan, SplitScheme, SyntheticDataset};
use crate::encoder::{loss_and_grads, Example, FrozenEncoders};
use crate::error::{Error, Result};
use crate::factorization::{factorize, reconstruct_gradient, FactoredPrompt};
use crate::numeric::{gaussian_matrix, stream, Matrix, RngStream};
use crate::privacy::{account, clip_and_average, privatize, BudgetReport, NoiseScales, PrivacySpec};

/// Protocol variant with its rank and noise switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub mode: VariantMode,
    pub rank: usize,
    pub noise: bool,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub p_local: Matrix,
    /// Persistent `(u, v)` for [`VariantMode::PersistentLowRank`].
    pub factors: Option<(Matrix, Matrix)>,
    pub p_global_copy: Matrix,
    /// Indices into the training example table.
    pub shard: Vec<usize>,
    pub rng: RngStream,
    /// Separate stream so evaluation never perturbs training randomness.
    pub eval_rng: RngStream,
    pub lr_local: f64,
}

impl ClientState {
    /// Local prompt the classifier actually uses for this variant.
    pub fn effective_local(&mut self, variant: &Variant) -> Result<Matrix> {
        match variant.mode {
            VariantMode::DpFpl | VariantMode::FullRankLocal => Ok(self.p_local.clone()),
            VariantMode::SharedOnly => Ok(Matrix::zeros(self.p_local.rows(), self.p_local.cols())),
            VariantMode::DpFplNoResidual => Ok(factorize(&self.p_local, variant.rank, &mut self.eval_rng)?.low_rank()),
            VariantMode::PersistentLowRank => match &self.factors {
                Some((u, v)) => u.matmul(v),
                None => Ok(factorize(&self.p_local, variant.rank, &mut self.eval_rng)?.low_rank()),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub p_global: Matrix,
    pub lr_global: f64,
    pub rng: RngStream,
    pub round: usize,
}

/// Shared, read-only inputs of a client round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub encoders: &'a FrozenEncoders,
    pub train: &'a [Example],
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub scales: NoiseScales,
    pub variant: Variant,
}

/// What a client sends to the server, plus client-side diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// Clipped, batch-averaged global gradient (no noise).
    pub grad_global: Matrix,
    /// Batch-mean training loss; `None` when the shard is empty.
    pub loss: Option<f64>,
    /// Shard size, the client's weight in the global objective.
    pub shard_size: usize,
    /// Frobenius norm of the local noise injected this round.
    pub local_noise_norm: f64,
    pub sampled_with_replacement: bool,
}

fn sample_batch(shard: &[usize], batch_size: usize, rng: &mut RngStream) -> (Vec<usize>, bool) {
    if shard.len() >= batch_size {
        let picks = rng.choose_distinct(shard.len(), batch_size);
        (picks.into_iter().map(|i| shard[i]).collect(), false)
    } else {
        let picks = (0..batch_size).map(|_| shard[rng.below(shard.len())]).collect();
        (picks, true)
    }
}

fn noise_norm(noisy: &Matrix, clean: &Matrix) -> f64 {
    noisy.sub(clean).map(|m| m.frobenius_norm()).unwrap_or(0.0)
}

/// One client's local step.
pub fn client_round(client: &mut ClientState, p_global: &Matrix, ctx: &RoundContext<'_>) -> Result<ClientUpdate> {
    client.p_global_copy = p_global.clone();
    let (b, d) = p_global.shape();
    if client.shard.is_empty() {
        return Ok(ClientUpdate {
            grad_global: Matrix::zeros(b, d),
            loss: None,
            shard_size: 0,
            local_noise_norm: 0.0,
            sampled_with_replacement: false,
        });
    }
    let (idx, replaced) = sample_batch(&client.shard, ctx.batch_size, &mut client.rng);
    if replaced {
        log::warn!(
            "client {}: shard of {} is smaller than batch {}, sampling with replacement",
            client.id,
            client.shard.len(),
            ctx.batch_size
        );
    }
    let batch: Vec<Example> = idx.iter().map(|&i| ctx.train[i].clone()).collect();
    let clip = ctx.clip_threshold;
    let denom = ctx.batch_size;
    let sigma = ctx.scales.sigma_local;
    let lr = client.lr_local;
    let variant = ctx.variant;

    let (loss, grad_global, local_noise_norm) = match variant.mode {
        VariantMode::DpFpl | VariantMode::DpFplNoResidual => {
            let factored = factorize(&client.p_local, variant.rank, &mut client.rng)?;
            let forward = if variant.mode == VariantMode::DpFplNoResidual {
                FactoredPrompt {
                    r: Matrix::zeros(b, d),
                    ..factored.clone()
                }
            } else {
                factored.clone()
            };
            let lg = loss_and_grads(&client.p_global_copy, &forward, ctx.encoders, &batch)?;
            let (gg, gu, gv) = split_grads(lg.per_example);
            let grad_global = clip_and_average(&gg, clip, denom)?;
            let gu = clip_and_average(&gu, clip, denom)?;
            let gv = clip_and_average(&gv, clip, denom)?;
            let gu_noisy = privatize(&gu, sigma, &mut client.rng)?;
            let gv_noisy = privatize(&gv, sigma, &mut client.rng)?;
            let noise = noise_norm(&gu_noisy, &gu).hypot(noise_norm(&gv_noisy, &gv));
            let grad_local = reconstruct_gradient(&gu_noisy, &gv_noisy, &factored.u, &factored.v)?;
            client.p_local.axpy(-lr, &grad_local)?;
            (lg.loss, grad_global, noise)
        }
        VariantMode::FullRankLocal => {
            let prompt = client.p_global_copy.add(&client.p_local)?;
            let per = ctx.encoders.prompt_gradients(&prompt, &batch)?;
            let loss = per.iter().map(|(l, _)| l).sum::<f64>() / per.len() as f64;
            let grads: Vec<Matrix> = per.into_iter().map(|(_, g)| g).collect();
            // p enters as p_G + p_L, so both partials are the same matrix.
            let grad_global = clip_and_average(&grads, clip, denom)?;
            let grad_local = privatize(&grad_global, sigma, &mut client.rng)?;
            let noise = noise_norm(&grad_local, &grad_global);
            client.p_local.axpy(-lr, &grad_local)?;
            (loss, grad_global, noise)
        }
        VariantMode::SharedOnly => {
            let per = ctx.encoders.prompt_gradients(&client.p_global_copy, &batch)?;
            let loss = per.iter().map(|(l, _)| l).sum::<f64>() / per.len() as f64;
            let grads: Vec<Matrix> = per.into_iter().map(|(_, g)| g).collect();
            (loss, clip_and_average(&grads, clip, denom)?, 0.0)
        }
        VariantMode::PersistentLowRank => {
            let (u, v) = match client.factors.take() {
                Some(f) => f,
                None => {
                    let f = factorize(&client.p_local, variant.rank, &mut client.rng)?;
                    (f.u, f.v)
                }
            };
            let forward = FactoredPrompt {
                r: Matrix::zeros(b, d),
                rank: u.cols(),
                u,
                v,
            };
            let lg = loss_and_grads(&client.p_global_copy, &forward, ctx.encoders, &batch)?;
            let (gg, gu, gv) = split_grads(lg.per_example);
            let grad_global = clip_and_average(&gg, clip, denom)?;
            let gu = clip_and_average(&gu, clip, denom)?;
            let gv = clip_and_average(&gv, clip, denom)?;
            let gu_noisy = privatize(&gu, sigma, &mut client.rng)?;
            let gv_noisy = privatize(&gv, sigma, &mut client.rng)?;
            let noise = noise_norm(&gu_noisy, &gu).hypot(noise_norm(&gv_noisy, &gv));
            let FactoredPrompt { mut u, mut v, .. } = forward;
            u.axpy(-lr, &gu_noisy)?;
            v.axpy(-lr, &gv_noisy)?;
            client.p_local = u.matmul(&v)?;
            client.factors = Some((u, v));
            (lg.loss, grad_global, noise)
        }
    };

    Ok(ClientUpdate {
        grad_global,
        loss: Some(loss),
        shard_size: client.shard.len(),
        local_noise_norm,
        sampled_with_replacement: replaced,
    })
}

fn split_grads(per: Vec<crate::encoder::ExampleGrads>) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
    let mut gg = Vec::with_capacity(per.len());
    let mut gu = Vec::with_capacity(per.len());
    let mut gv = Vec::with_capacity(per.len());
    for e in per {
        gg.push(e.grad_global);
        gu.push(e.grad_u);
        gv.push(e.grad_v);
    }
    (gg, gu, gv)
}

/// Aggregation weights `n_i / Σ n_j`.
pub fn objective_weights(shard_sizes: &[usize]) -> Vec<f64> {
    let total: usize = shard_sizes.iter().sum();
    if total == 0 {
        return vec![0.0; shard_sizes.len()];
    }
    shard_sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Result of one aggregation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Weighted mean of client gradients, before noise.
    pub mean: Matrix,
    pub noise_norm: f64,
}

/// Weighted mean (in the order given), global noise, and a descent step.
pub fn server_aggregate(
    grads: &[Matrix],
    weights: &[f64],
    server: &mut ServerState,
    scales: &NoiseScales,
) -> Result<Aggregate> {
    let first = grads
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client gradients to aggregate".into()))?;
    if weights.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    let mut mean = Matrix::zeros(first.rows(), first.cols());
    for (g, &w) in grads.iter().zip(weights) {
        mean.axpy(w, g)?;
    }
    let noisy = privatize(&mean, scales.sigma_global, &mut server.rng)?;
    let noise_norm = noise_norm(&noisy, &mean);
    server.p_global.axpy(-server.lr_global, &noisy)?;
    server.round += 1;
    Ok(Aggregate { mean, noise_norm })
}

/// Metrics recorded after each global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean over clients of the batch training loss.
    pub train_loss: f64,
    /// Per-client accuracy on local-class test samples (overall test
    /// accuracy under Dirichlet splits).
    pub local_acc: Vec<f64>,
    /// Per-client accuracy on neighbour-class test samples; `None` when the
    /// set is empty or under Dirichlet splits.
    pub neighbor_acc: Vec<Option<f64>>,
    pub local_noise_norm: f64,
    pub global_noise_norm: f64,
    /// `None` when noise is off (no finite guarantee).
    pub eps_spent: Option<f64>,
    pub sigma_local: f64,
    pub sigma_global: f64,
}

impl RoundMetrics {
    pub fn mean_local_acc(&self) -> f64 {
        mean(&self.local_acc)
    }

    pub fn mean_neighbor_acc(&self) -> Option<f64> {
        let vals: Vec<f64> = self.neighbor_acc.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(mean(&vals))
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Optional replacements for the seeded components of a simulation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub encoders: Option<FrozenEncoders>,
    pub dataset: Option<SyntheticDataset>,
}

/// A fully built simulation that can be stepped one round at a time.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RunConfig,
    pub seed: u64,
    pub variant: Variant,
    pub spec: Option<PrivacySpec>,
    pub scales: NoiseScales,
    pub encoders: FrozenEncoders,
    pub dataset: SyntheticDataset,
    pub plan: SplitPlan,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub eval: Vec<EvalSets>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub metrics: Vec<RoundMetrics>,
}

pub fn build_dataset(config: &RunConfig, seed: u64) -> Result<SyntheticDataset> {
    let mut rng = RngStream::new(seed, stream::DATA);
    let means = data::class_means(config.dims.num_classes, config.dims.image_dim, config.data.mean_scale, &mut rng);
    data::generate_from_means(means, config.data.per_class_count, config.data.noise_scale, &mut rng)
}

pub fn build_encoders(config: &RunConfig, seed: u64) -> Result<FrozenEncoders> {
    let mut rng = RngStream::new(seed, stream::ENCODERS);
    FrozenEncoders::random(config.dims.encoder_dims(), config.protocol.temperature, &mut rng)
}

pub fn build_split(config: &RunConfig, dataset: &SyntheticDataset, seed: u64) -> Result<SplitPlan> {
    let mut rng = RngStream::new(seed, stream::SPLIT);
    match config.data.split {
        SplitScheme::Pathological { classes_per_client } => {
            data::pathological_split(dataset, config.protocol.clients, classes_per_client, &mut rng)
        }
        SplitScheme::Dirichlet { alpha } => data::dirichlet_split(dataset, config.protocol.clients, alpha, &mut rng),
    }
}

pub fn to_examples(encoders: &FrozenEncoders, samples: &[data::Sample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                feature: encoders.image_feature(&s.x)?,
                label: s.y,
            })
        })
        .collect()
}

impl Simulation {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        Self::with_overrides(config, seed, Overrides::default())
    }

    pub fn with_overrides(config: &RunConfig, seed: u64, overrides: Overrides) -> Result<Self> {
        config.validate()?;
        let variant = Variant {
            mode: config.variant,
            rank: config.dims.rank,
            noise: config.privacy.noise,
        };
        let spec = config.privacy_spec()?;
        let scales = if config.privacy.noise {
            NoiseScales::calibrate(&spec)?
        } else {
            NoiseScales::zero()
        };
        let encoders = match overrides.encoders {
            Some(e) => {
                if e.dims() != config.dims.encoder_dims() {
                    return Err(Error::InvalidArgument("encoder override has different dims".into()));
                }
                e
            }
            None => build_encoders(config, seed)?,
        };
        let dataset = match overrides.dataset {
            Some(d) => d,
            None => build_dataset(config, seed)?,
        };
        if dataset.num_classes != config.dims.num_classes || dataset.dim != config.dims.image_dim {
            return Err(Error::InvalidArgument("dataset does not match configured dims".into()));
        }
        let plan = build_split(config, &dataset, seed)?;
        let train = to_examples(&encoders, &dataset.train)?;
        let test = to_examples(&encoders, &dataset.test)?;
        let eval = data::eval_sets(&plan, &dataset);

        let (b, d) = (config.dims.prompt_len, config.dims.token_dim);
        let mut init_rng = RngStream::new(seed, stream::SERVER_INIT);
        let p_global = gaussian_matrix(b, d, config.init.global_std, &mut init_rng)?;
        let shards = plan.shards();
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let mut rng = RngStream::new(seed, stream::client_init(id));
                let p_local = if config.variant == VariantMode::SharedOnly {
                    Matrix::zeros(b, d)
                } else {
                    gaussian_matrix(b, d, config.init.local_std, &mut rng)?
                };
                Ok(ClientState {
                    id,
                    p_local,
                    factors: None,
                    p_global_copy: p_global.clone(),
                    shard,
                    rng: RngStream::new(seed, stream::client_train(id)),
                    eval_rng: RngStream::new(seed, stream::client_eval(id)),
                    lr_local: config.protocol.lr_local,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let server = ServerState {
            p_global,
            lr_global: config.protocol.lr_global,
            rng: RngStream::new(seed, stream::SERVER),
            round: 0,
        };
        Ok(Simulation {
            config: config.clone(),
            seed,
            variant,
            spec: Some(spec),
            scales,
            encoders,
            dataset,
            plan,
            train,
            test,
            eval,
            clients,
            server,
            metrics: Vec::new(),
        })
    }

    fn context(&self) -> RoundContext<'_> {
        RoundContext {
            encoders: &self.encoders,
            train: &self.train,
            clip_threshold: self.config.privacy.clip_threshold,
            batch_size: self.config.protocol.batch_size,
            scales: self.scales,
            variant: self.variant,
        }
    }

    /// Runs one global round and records its metrics.
    pub fn step(&mut self) -> Result<&RoundMetrics> {
        let p_global = self.server.p_global.clone();
        let ctx = RoundContext {
            encoders: &self.encoders,
            train: &self.train,
            clip_threshold: self.config.privacy.clip_threshold,
            batch_size: self.config.protocol.batch_size,
            scales: self.scales,
            variant: self.variant,
        };
        // Collecting an indexed parallel iterator keeps client-id order.
        let updates: Vec<ClientUpdate> = self
            .clients
            .par_iter_mut()
            .map(|c| client_round(c, &p_global, &ctx))
            .collect::<Result<Vec<_>>>()?;

        let limit = self.config.privacy.clip_threshold * (1.0 + 1e-12);
        for (id, u) in updates.iter().enumerate() {
            let n = u.grad_global.frobenius_norm();
            if !(n <= limit) {
                return Err(Error::Invariant(format!(
                    "client {id} sent a gradient of norm {n} above the clip threshold"
                )));
            }
        }
        let grads: Vec<Matrix> = updates.iter().map(|u| u.grad_global.clone()).collect();
        let weights = objective_weights(&updates.iter().map(|u| u.shard_size).collect::<Vec<_>>());
        let agg = server_aggregate(&grads, &weights, &mut self.server, &self.scales)?;

        self.server.p_global.ensure_finite("global prompt")?;
        for c in &self.clients {
            c.p_local.ensure_finite(&format!("local prompt of client {}", c.id))?;
        }

        let round = self.server.round;
        let (local_acc, neighbor_acc) = self.evaluate()?;
        let losses: Vec<f64> = updates.iter().filter_map(|u| u.loss).collect();
        let eps_spent = match (&self.spec, self.variant.noise) {
            (Some(spec), true) => Some(account(spec, round)?.epsilon_spent_local),
            _ => None,
        };
        self.metrics.push(RoundMetrics {
            round,
            train_loss: mean(&losses),
            local_acc,
            neighbor_acc,
            local_noise_norm: mean(&updates.iter().map(|u| u.local_noise_norm).collect::<Vec<_>>()),
            global_noise_norm: agg.noise_norm,
            eps_spent,
            sigma_local: self.scales.sigma_local,
            sigma_global: self.scales.sigma_global,
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Effective prompt `p_G + p_L(eff)` of every client.
    pub fn client_prompts(&mut self) -> Result<Vec<Matrix>> {
        let variant = self.variant;
        let p_global = self.server.p_global.clone();
        self.clients
            .iter_mut()
            .map(|c| p_global.add(&c.effective_local(&variant)?))
            .collect()
    }

    /// Per-client local and neighbour accuracy with the current prompts.
    ///
    /// Each test set is scored within its own label space: local samples
    /// among the client's classes, neighbour samples among the classes owned
    /// by other clients. Dirichlet splits score all test samples among all
    /// classes.
    pub fn evaluate(&mut self) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
        let prompts = self.client_prompts()?;
        let dirichlet = matches!(self.config.data.split, SplitScheme::Dirichlet { .. });
        let all_classes: Vec<usize> = (0..self.config.dims.num_classes).collect();
        let all: Vec<usize> = (0..self.test.len()).collect();
        let mut local = Vec::with_capacity(prompts.len());
        let mut neighbor = Vec::with_capacity(prompts.len());
        for (c, (prompt, sets)) in prompts.iter().zip(&self.eval).enumerate() {
            let text = self.encoders.text_features(prompt)?;
            let acc = |idx: &[usize], classes: &[usize]| -> Option<f64> {
                if idx.is_empty() {
                    return None;
                }
                let hits = idx
                    .iter()
                    .filter(|&&i| {
                        text.predict_among(&self.test[i].feature, classes.iter().copied()) == self.test[i].label
                    })
                    .count();
                Some(hits as f64 / idx.len() as f64)
            };
            if dirichlet {
                local.push(acc(&all, &all_classes).unwrap_or(0.0));
                neighbor.push(None);
            } else {
                let own = &self.plan.local_classes[c];
                let others: Vec<usize> = all_classes
                    .iter()
                    .copied()
                    .filter(|k| !own.contains(k) && self.plan.local_classes.iter().any(|s| s.contains(k)))
                    .collect();
                local.push(acc(&sets.local, own).unwrap_or(0.0));
                neighbor.push(acc(&sets.neighbor, &others));
            }
        }
        Ok((local, neighbor))
    }

    pub fn budget(&self) -> Result<Option<BudgetReport>> {
        match (&self.spec, self.variant.noise) {
            (Some(spec), true) => Ok(Some(account(spec, self.server.round)?)),
            _ => Ok(None),
        }
    }

    pub fn round_context(&self) -> RoundContext<'_> {
        self.context()
    }
}

/// Final state of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub final_global: Matrix,
    pub final_locals: Vec<Matrix>,
    /// Local prompt each client's classifier uses at the end of training.
    pub effective_locals: Vec<Matrix>,
    pub local_classes: Vec<Vec<usize>>,
    pub budget: Option<BudgetReport>,
}

/// Runs `T` rounds. On failure the error is returned together with the
/// metrics gathered so far.
pub fn run_training(config: &RunConfig, seed: u64) -> std::result::Result<TrainingOutcome, (Error, Vec<RoundMetrics>)> {
    let mut sim = Simulation::new(config, seed).map_err(|e| (e, Vec::new()))?;
    for _ in 0..config.protocol.rounds {
        if let Err(e) = sim.step() {
            return Err((e, sim.metrics));
        }
    }
    sim.finish().map_err(|e| (e, Vec::new()))
}

impl Simulation {
    pub fn finish(mut self) -> Result<TrainingOutcome> {
        let budget = self.budget()?;
        let variant = self.variant;
        let effective_locals = self
            .clients
            .iter_mut()
            .map(|c| c.effective_local(&variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingOutcome {
            final_global: self.server.p_global,
            final_locals: self.clients.iter().map(|c| c.p_local.clone()).collect(),
            effective_locals,
            local_classes: self.plan.local_classes,
            budget,
            metrics: self.metrics,
        })
    }
}
