//! Entropy-regularized training with twin action-value critics and an
//! automatically tuned temperature.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::ConstructionState;
use crate::error::{Error, Result};
use crate::eval::greedy_decode_batch;
use crate::net::{critic_weights, write_checkpoint, BnMode, Graph, Group, Model, NetConfig, QNet, StepContext};
use crate::optim::Adam;
use crate::replay::{EpisodeRecord, ReplayBuffer, Transition, DEFAULT_CAPACITY};
use crate::rollout::{rollout, ActionSource};
use crate::routing::{generate_dataset, generate_instance, instance_seed, ProblemInstance, ProblemKind};
use crate::tape::{BatchStats, Matrix};

/// Training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Replay-trained critics and a learned temperature.
    Epose,
    /// As [`Mode::Epose`] with the temperature held at its initial value.
    OffpolicyFixedAlpha,
    /// Fresh rollouts only, fixed temperature; no replay, no action values.
    OnpolicyFixedEntropy,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Epose, Mode::OffpolicyFixedAlpha, Mode::OnpolicyFixedEntropy];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Epose => "epose",
            Mode::OffpolicyFixedAlpha => "offpolicy-fixed",
            Mode::OnpolicyFixedEntropy => "onpolicy-fixed",
        }
    }

    pub fn uses_replay(self) -> bool {
        self != Mode::OnpolicyFixedEntropy
    }

    pub fn learns_alpha(self) -> bool {
        self == Mode::Epose
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected epose, offpolicy-fixed or onpolicy-fixed)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ProblemKind,
    pub n: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fresh instances rolled out per step.
    pub batch_size: usize,
    /// Transitions drawn from replay per critic update.
    pub q_batch_size: usize,
    pub lr: f64,
    /// Step size for the log-temperature.
    pub alpha_lr: f64,
    /// Polyak coefficient of the target critics.
    pub eta: f64,
    /// Target entropy is this fraction of `ln |A_t|`.
    pub entropy_target_coef: f64,
    /// Temperature for the fixed modes, and the starting value otherwise.
    pub fixed_alpha: f64,
    pub mode: Mode,
    pub seed: u64,
    pub replay_capacity: usize,
    /// Held-out instances decoded greedily at the end of every epoch.
    pub val_size: usize,
    pub val_seed: u64,
    pub bn_momentum: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Tsp,
            n: 20,
            epochs: 100,
            steps_per_epoch: 2500,
            batch_size: 512,
            q_batch_size: 512,
            lr: 1e-4,
            alpha_lr: 1e-4,
            eta: 0.005,
            entropy_target_coef: 0.98,
            fixed_alpha: 0.03,
            mode: Mode::Epose,
            seed: 0,
            replay_capacity: DEFAULT_CAPACITY,
            val_size: 10_000,
            val_seed: 4242,
            bn_momentum: 0.1,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("q_batch_size", self.q_batch_size),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        for (name, v) in [("lr", self.lr), ("alpha_lr", self.alpha_lr), ("fixed_alpha", self.fixed_alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.entropy_target_coef >= 0.0 && self.entropy_target_coef.is_finite()) {
            return bad(format!("entropy_target_coef must be non-negative, got {}", self.entropy_target_coef));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum));
        }
        self.net.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// A scalar loss with its parameter gradients.
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<(usize, Matrix)>,
    pub stats: Vec<(usize, usize, BatchStats)>,
}

/// Regression targets `r + V′(s′)` for a batch of transitions, with
/// `V′(s′) = Σ_a′ π(a′|s′)·(min_i Q′_i(s′,a′) − α·log π(a′|s′))` taken
/// exactly over the feasible set; terminal transitions keep `r`.
pub fn q_targets(model: &Model, batch: &[&Transition]) -> Result<Vec<f64>> {
    let mut targets: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let open: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].terminal).collect();
    if open.is_empty() {
        return Ok(targets);
    }
    let next: Vec<ConstructionState> = open.iter().map(|&i| batch[i].next_state()).collect::<Result<_>>()?;
    let blocks: Vec<&ProblemInstance> = next.iter().map(|s| s.instance().as_ref()).collect();
    let refs: Vec<&ConstructionState> = next.iter().collect();
    let map: Vec<usize> = (0..next.len()).collect();
    let ctx = StepContext::from_states(&refs, &map)?;
    let mut g = Graph::inference(model, BnMode::Batch);
    let cache = g.policy_encode(&blocks)?;
    let lp = g.policy_step(&cache, &ctx);
    let q1 = g.q_all(QNet::Target1, &blocks, &ctx)?;
    let q2 = g.q_all(QNet::Target2, &blocks, &ctx)?;
    let alpha = model.alpha();
    let (lp, q1, q2) = (g.tape.value(lp), g.tape.value(q1), g.tape.value(q2));
    for (row, &i) in open.iter().enumerate() {
        let mask = ctx.row_mask(row);
        let soft_value: f64 = (0..mask.len())
            .filter(|&j| mask[j])
            .map(|j| {
                let l = lp[[row, j]];
                l.exp() * (q1[[row, j]].min(q2[[row, j]]) - alpha * l)
            })
            .sum();
        targets[i] += soft_value;
    }
    Ok(targets)
}

/// `½·mean (Q(s,a) − target)²` for one online critic.
pub fn compute_q_loss(model: &Model, batch: &[&Transition], targets: &[f64], which: QNet) -> Result<LossGrad> {
    if !matches!(which, QNet::Online1 | QNet::Online2) {
        return Err(Error::Contract("only online critics are trained".into()));
    }
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::InvalidArgument("batch and targets must be non-empty and aligned".into()));
    }
    let states: Vec<ConstructionState> = batch.iter().map(|t| t.state()).collect::<Result<_>>()?;
    let blocks: Vec<&ProblemInstance> = states.iter().map(|s| s.instance().as_ref()).collect();
    let refs: Vec<&ConstructionState> = states.iter().collect();
    let map: Vec<usize> = (0..states.len()).collect();
    let ctx = StepContext::from_states(&refs, &map)?;
    let mut g = Graph::training(model, &[which.group()]);
    g.set_collect_stats(true);
    let q = g.q_all(which, &blocks, &ctx)?;
    let picked = g.tape.gather_cols(q, batch.iter().map(|t| t.action).collect());
    let target = g
        .tape
        .constant(Array2::from_shape_vec((targets.len(), 1), targets.to_vec()).unwrap());
    let diff = g.tape.sub(picked, target);
    let sq = g.tape.mul(diff, diff);
    let mean = g.tape.mean(sq);
    let loss = g.tape.scale(mean, 0.5);
    Ok(LossGrad {
        loss: g.tape.scalar(loss),
        grads: g.gradients(loss),
        stats: g.take_stats(),
    })
}

/// Policy and value-critic objective on freshly constructed solutions.
pub struct PolicyLoss {
    /// `−mean_i[(R_i − b_i)·log p(π_i) + α·Σ_t H_t]` with the baseline `b`
    /// held constant.
    pub loss_pi: f64,
    /// `mean_i (b_i − R_i)²`.
    pub loss_critic: f64,
    /// Gradients of `loss_pi + loss_critic`.
    pub grads: Vec<(usize, Matrix)>,
    pub stats: Vec<(usize, usize, BatchStats)>,
    pub returns: Vec<f64>,
    pub baselines: Vec<f64>,
    /// Per-solution sum of log-probabilities of the chosen actions.
    pub log_probs: Vec<f64>,
    /// Per-solution sum of step entropies.
    pub entropy_sums: Vec<f64>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub step_entropy: Vec<Vec<f64>>,
    pub feasible_counts: Vec<Vec<usize>>,
}

impl PolicyLoss {
    /// Mean realized entropy over all construction steps.
    pub fn mean_step_entropy(&self) -> f64 {
        mean(self.step_entropy.iter().flatten().copied())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Builds one solution per instance and evaluates the policy objective.
pub fn compute_policy_loss<R: Rng>(
    model: &Model,
    instances: &[Arc<ProblemInstance>],
    alpha: f64,
    source: ActionSource<'_, R>,
) -> Result<PolicyLoss> {
    let mut g = Graph::training(model, &[Group::Policy, Group::Critic]);
    g.set_collect_stats(true);
    let map: Vec<usize> = (0..instances.len()).collect();
    let out = rollout(&mut g, instances, &map, source)?;
    let count = instances.len();
    let returns = out.returns();

    let weights: Vec<f64> = instances
        .iter()
        .flat_map(|inst| critic_weights(&ConstructionState::reset(inst.clone())))
        .collect();
    let nodes = g.tape.detach(out.cache.nodes);
    let baseline = g.critic(nodes, out.cache.group, weights);
    let baselines = g.tape.value(baseline).column(0).to_vec();

    let advantage: Vec<f64> = returns.iter().zip(&baselines).map(|(r, b)| r - b).collect();
    let advantage = g.tape.constant(Array2::from_shape_vec((count, 1), advantage).unwrap());
    let weighted = g.tape.mul(advantage, out.log_prob);
    let pg = g.tape.sum(weighted);
    let entropy = g.tape.sum(out.entropy);
    let bonus = g.tape.scale(entropy, alpha);
    let objective = g.tape.add(pg, bonus);
    let loss_pi = g.tape.scale(objective, -1.0 / count as f64);

    let ret = g.tape.constant(Array2::from_shape_vec((count, 1), returns.clone()).unwrap());
    let err = g.tape.sub(baseline, ret);
    let sq = g.tape.mul(err, err);
    let loss_critic = g.tape.mean(sq);
    let total = g.tape.add(loss_pi, loss_critic);

    Ok(PolicyLoss {
        loss_pi: g.tape.scalar(loss_pi),
        loss_critic: g.tape.scalar(loss_critic),
        grads: g.gradients(total),
        stats: g.take_stats(),
        returns,
        baselines,
        log_probs: g.tape.value(out.log_prob).column(0).to_vec(),
        entropy_sums: g.tape.value(out.entropy).column(0).to_vec(),
        actions: out.actions,
        rewards: out.rewards,
        step_entropy: out.step_entropy,
        feasible_counts: out.feasible_counts,
    })
}

/// `coef · ln |A|`.
pub fn target_entropy(feasible: usize, coef: f64) -> f64 {
    coef * (feasible as f64).ln()
}

/// Temperature objective `J = α·mean_t(H_t − H̄_t)` over the given steps and
/// its derivative with respect to `log α` (which equals `J`).
pub fn compute_alpha_loss(log_alpha: f64, entropies: &[f64], feasible: &[usize], coef: f64) -> Result<(f64, f64)> {
    if entropies.len() != feasible.len() {
        return Err(Error::InvalidArgument("entropy and action-count lists differ in length".into()));
    }
    if entropies.is_empty() {
        return Ok((0.0, 0.0));
    }
    let gap = mean(
        entropies
            .iter()
            .zip(feasible)
            .map(|(&h, &k)| h - target_entropy(k, coef)),
    );
    let j = log_alpha.exp() * gap;
    Ok((j, j))
}

/// Polyak averaging of both target critics toward their online critics.
pub fn soft_update(model: &mut Model, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
    }
    let params = model.params_mut();
    params.blend_group(Group::Q1, Group::Q1Target, eta)?;
    params.blend_group(Group::Q2, Group::Q2Target, eta)
}

pub const METRICS_HEADER: &str = "step,epoch,trajectories,train_return,val_greedy_len,entropy,alpha,loss_q1,loss_q2,loss_pi";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Fresh episodes generated so far, this step included.
    pub trajectories: u64,
    pub train_return: f64,
    /// Present on the last step of each epoch.
    pub val_greedy_len: Option<f64>,
    /// Mean realized per-step entropy.
    pub entropy: f64,
    /// Temperature used during this step.
    pub alpha: f64,
    pub loss_q1: Option<f64>,
    pub loss_q2: Option<f64>,
    pub loss_pi: f64,
    /// Mean per-step target entropy (not written to the CSV).
    pub target_entropy: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.trajectories,
            self.train_return,
            opt(self.val_greedy_len),
            self.entropy,
            self.alpha,
            opt(self.loss_q1),
            opt(self.loss_q2),
            self.loss_pi
        )
    }
}

/// Training state; one call to [`Trainer::step`] performs one iteration.
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: Adam,
    replay: ReplayBuffer,
    instance_rng: ChaCha8Rng,
    rollout_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    steps: usize,
    trajectories: u64,
    replay_reads: usize,
    validation: Vec<Arc<ProblemInstance>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.kind, config.net.clone(), instance_seed(config.seed, 1), config.fixed_alpha)?;
        let validation = generate_dataset(config.kind, config.n, config.val_size, config.val_seed)?
            .into_iter()
            .map(Arc::new)
            .collect();
        let stream = |k| ChaCha8Rng::seed_from_u64(instance_seed(config.seed, k));
        Ok(Self {
            adam: Adam::new(model.params().len()),
            replay: ReplayBuffer::new(config.replay_capacity),
            instance_rng: stream(2),
            rollout_rng: stream(3),
            replay_rng: stream(4),
            model,
            steps: 0,
            trajectories: 0,
            replay_reads: 0,
            validation,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    /// Number of replay samples drawn so far.
    pub fn replay_reads(&self) -> usize {
        self.replay_reads
    }

    pub fn steps_done(&self) -> usize {
        self.steps
    }

    /// Mean greedy length over the held-out set.
    pub fn validate(&self) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(f64::NAN);
        }
        let sols = greedy_decode_batch(&self.model, &self.validation)?;
        Ok(mean(sols.iter().map(|s| s.length())))
    }

    fn diverged(&self, what: &str, value: f64) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged {
                step: self.steps,
                message: format!("{what} is {value}"),
            })
        }
    }

    /// One iteration: fresh rollouts, critic updates from replay, policy and
    /// value-critic update, temperature update, target smoothing.
    pub fn step(&mut self) -> Result<MetricsRow> {
        self.steps += 1;
        let cfg = self.config.clone();
        let instances: Vec<Arc<ProblemInstance>> = (0..cfg.batch_size)
            .map(|_| generate_instance(cfg.kind, cfg.n, self.instance_rng.random()).map(Arc::new))
            .collect::<Result<_>>()?;
        let alpha = if cfg.mode.learns_alpha() {
            self.model.alpha()
        } else {
            cfg.fixed_alpha
        };
        let policy = compute_policy_loss(&self.model, &instances, alpha, ActionSource::Sample(&mut self.rollout_rng))?;
        self.trajectories += instances.len() as u64;
        self.diverged("policy loss", policy.loss_pi)?;
        self.diverged("value-critic loss", policy.loss_critic)?;
        let mut stats = policy.stats.clone();

        let (mut loss_q1, mut loss_q2) = (None, None);
        if cfg.mode.uses_replay() {
            for (i, inst) in instances.iter().enumerate() {
                let episode = Arc::new(EpisodeRecord {
                    instance: inst.clone(),
                    actions: policy.actions[i].clone(),
                });
                for t in Transition::from_episode(episode, &policy.rewards[i])? {
                    self.replay.push(t);
                }
            }
            if self.replay.len() >= cfg.q_batch_size {
                let batch: Vec<Transition> = self
                    .replay
                    .sample(cfg.q_batch_size, &mut self.replay_rng)?
                    .into_iter()
                    .cloned()
                    .collect();
                self.replay_reads += batch.len();
                let refs: Vec<&Transition> = batch.iter().collect();
                let targets = q_targets(&self.model, &refs)?;
                for (which, slot) in [(QNet::Online1, &mut loss_q1), (QNet::Online2, &mut loss_q2)] {
                    let q = compute_q_loss(&self.model, &refs, &targets, which)?;
                    self.diverged("critic loss", q.loss)?;
                    self.adam.step(self.model.params_mut(), &q.grads, cfg.lr);
                    stats.extend(q.stats);
                    *slot = Some(q.loss);
                }
            }
        }

        self.adam.step(self.model.params_mut(), &policy.grads, cfg.lr);

        let entropies: Vec<f64> = policy.step_entropy.iter().flatten().copied().collect();
        let counts: Vec<usize> = policy.feasible_counts.iter().flatten().copied().collect();
        if cfg.mode.learns_alpha() {
            let (_, grad) = compute_alpha_loss(self.model.log_alpha(), &entropies, &counts, cfg.entropy_target_coef)?;
            let id = self.model.layout().log_alpha;
            self.adam
                .step(self.model.params_mut(), &[(id, Matrix::from_elem((1, 1), grad))], cfg.alpha_lr);
        }
        self.model.update_running_stats(&stats, cfg.bn_momentum);
        if cfg.mode.uses_replay() {
            soft_update(&mut self.model, cfg.eta)?;
        }
        if let Some(p) = self.model.params().iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step: self.steps,
                message: format!("parameter {} became non-finite", p.name),
            });
        }

        let epoch = (self.steps - 1) / cfg.steps_per_epoch + 1;
        let val_greedy_len = if self.steps.is_multiple_of(cfg.steps_per_epoch) {
            Some(self.validate()?)
        } else {
            None
        };
        Ok(MetricsRow {
            step: self.steps,
            epoch,
            trajectories: self.trajectories,
            train_return: mean(policy.returns.iter().copied()),
            val_greedy_len,
            entropy: mean(entropies.iter().copied()),
            alpha,
            loss_q1,
            loss_q2,
            loss_pi: policy.loss_pi,
            target_entropy: mean(counts.iter().map(|&k| target_entropy(k, cfg.entropy_target_coef))),
        })
    }
}

/// Result of a full training run.
pub struct TrainSummary {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    /// Validation greedy length before the first update.
    pub initial_val: f64,
}

/// Runs every epoch, writing metrics after each step and a checkpoint after
/// each epoch.
pub fn train(config: &TrainConfig, metrics: Option<&Path>, checkpoint: Option<&Path>) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    let initial_val = trainer.validate()?;
    let mut log = match metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(config.total_steps());
    for _ in 0..config.epochs {
        for _ in 0..config.steps_per_epoch {
            let row = trainer.step()?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.csv_line())?;
            }
            history.push(row);
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(p) = checkpoint {
            write_checkpoint(p, trainer.model())?;
        }
    }
    Ok(TrainSummary {
        model: trainer.model,
        history,
        initial_val,
    })
}
