//! Mixed-distribution REINFORCE training with a shared multi-start baseline,
//! auxiliary balance and classification losses, and per-epoch distribution
//! re-weighting from validation gaps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vrpmoe_tensor::{grad_check, GradCheckReport, Graph, ParamGrads, ParamSet, Tensor, Var};

use crate::checkpoint::{self, CheckpointHeader, FORMAT_VERSION};
use crate::env::{augment8, raw_cost};
use crate::error::{Error, Result};
use crate::instance::{DistLabel, Instance, Problem};
use crate::instancegen::{generate_instance, generate_many, to_json_line, sha256_hex, DistributionSpec};
use crate::oracle::{cached_references, gap};
use crate::policy::{cross_entropy, preset_config, DecodeMode, Policy, PolicyConfig, PolicyNet, Replay, RolloutOptions};
use crate::rng;

const INIT_TAG: u64 = 0x1417;
const TRAIN_TAG: u64 = 0x7A11;
const VAL_TAG: u64 = 0x7A12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub dist_set: Vec<DistLabel>,
    /// Initial batch-composition probabilities over `dist_set`.
    pub sampling_probs: Vec<f64>,
    /// Weight of the load-balancing loss.
    pub omega_beta: f64,
    /// Weight of the distribution-classification loss.
    pub omega_gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of epochs after which the learning rate is divided.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub batch: usize,
    /// Customers per training instance.
    pub n: usize,
    /// Upper bound on multi-start rollouts per instance.
    pub max_starts: usize,
    pub grad_clip: f64,
    /// Validation instances per distribution.
    pub val_per_dist: usize,
    pub val_augment: bool,
    /// Instances per gradient shard; fixed so results do not depend on the
    /// number of workers.
    pub shard_size: usize,
    /// Update `sampling_probs` from validation after every epoch.
    pub dwa: bool,
    /// Offsets added to the validation gaps fed to the re-weighting.
    pub gap_bias: Vec<f64>,
    /// Keep a `ckpt_<epoch>` every this many epochs and at the last epoch
    /// (0 = only `last.ckpt`).
    pub checkpoint_every: usize,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let k = self.dist_set.len();
        if k == 0 || self.sampling_probs.len() != k || self.gap_bias.len() != k {
            return Err(Error::Config("dist_set, sampling_probs and gap_bias must have equal, non-zero length".into()));
        }
        if self.dist_set.iter().any(|d| d.class_index().is_none()) {
            return Err(Error::Config("dist_set may only contain uniform, cluster and mixed".into()));
        }
        let sum: f64 = self.sampling_probs.iter().sum();
        if self.sampling_probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("sampling_probs must be a probability vector (sum {sum})")));
        }
        if !(self.omega_beta >= 0.0 && self.omega_gamma >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::Config("invalid learning-rate plan".into()));
        }
        if self.batch == 0 || self.shard_size == 0 || self.epochs == 0 || self.instances_per_epoch == 0 {
            return Err(Error::Config("epochs, instances_per_epoch, batch and shard_size must be positive".into()));
        }
        if self.n < 2 || self.max_starts == 0 || self.val_per_dist == 0 {
            return Err(Error::Config("n >= 2, max_starts >= 1 and val_per_dist >= 1 are required".into()));
        }
        Ok(())
    }

    pub fn starts(&self) -> usize {
        self.max_starts.min(self.n)
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_from = (self.lr_decay_at * self.epochs as f64).floor() as usize;
        if epoch >= decay_from {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.schedule.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `tiny` (seconds), `desk` (the reduced TSP-10 run) and `full` (the full-size model and schedule).
pub fn preset(name: &str) -> Result<TrainConfig> {
    let base = TrainSchedule {
        dist_set: DistLabel::TRAINING.to_vec(),
        sampling_probs: vec![1.0 / 3.0; 3],
        omega_beta: 0.1,
        omega_gamma: 0.01,
        lr: 1e-4,
        weight_decay: 1e-6,
        lr_decay_at: 0.9,
        lr_decay_factor: 10.0,
        epochs: 5000,
        instances_per_epoch: 20_000,
        batch: 256,
        n: 100,
        max_starts: 100,
        grad_clip: 1.0,
        val_per_dist: 1000,
        val_augment: true,
        shard_size: 32,
        dwa: true,
        gap_bias: vec![0.0; 3],
        checkpoint_every: 100,
    };
    match name {
        "tiny" => Ok(TrainConfig {
            policy: preset_config("tiny", Problem::Tsp)?,
            schedule: TrainSchedule {
                epochs: 2,
                instances_per_epoch: 32,
                batch: 16,
                n: 6,
                max_starts: 6,
                lr: 1e-3,
                val_per_dist: 4,
                shard_size: 8,
                checkpoint_every: 1,
                ..base
            },
        }),
        "desk" => Ok(TrainConfig {
            policy: preset_config("desk", Problem::Tsp)?,
            schedule: TrainSchedule {
                epochs: 30,
                instances_per_epoch: 2000,
                batch: 50,
                n: 10,
                max_starts: 10,
                lr: 1e-3,
                val_per_dist: 100,
                shard_size: 25,
                checkpoint_every: 10,
                ..base
            },
        }),
        "full" | "paper" => Ok(TrainConfig { policy: preset_config("full", Problem::Cvrp)?, schedule: base }),
        other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny, desk or full)"))),
    }
}

/// Multi-start REINFORCE: `mean((c − b)·logp)` with `b` the per-instance mean
/// cost over starts. `costs` is row-major `[B, P]` like `logp`.
pub fn reinforce_loss(g: &mut Graph, costs: &[f64], logp: Var) -> Result<Var> {
    let adv = advantages(costs, g.shape(logp)[1]);
    let shape = g.shape(logp).to_vec();
    let adv = g.constant(Tensor::new(shape, adv)?);
    let prod = g.mul(adv, logp)?;
    Ok(g.mean(prod))
}

pub fn advantages(costs: &[f64], starts: usize) -> Vec<f64> {
    costs
        .chunks(starts)
        .flat_map(|c| {
            let b = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(move |x| x - b)
        })
        .collect()
}

/// `task + ω_β·balance + ω_γ·class`; absent terms count as zero.
pub fn total_loss(
    g: &mut Graph,
    task: Var,
    balance: Option<Var>,
    class: Option<Var>,
    omega_beta: f64,
    omega_gamma: f64,
) -> Result<Var> {
    let mut parts = vec![task];
    if let Some(b) = balance {
        parts.push(g.scale(b, omega_beta));
    }
    if let Some(c) = class {
        parts.push(g.scale(c, omega_gamma));
    }
    Ok(g.add_all(&parts)?)
}

/// `softmax(gap_d + loss_d)`. Non-finite input leaves `prev` in place.
pub fn dwa_update(prev: &[f64], gaps: &[f64], losses: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = gaps.iter().zip(losses).map(|(g, l)| g + l).collect();
    if s.iter().any(|x| !x.is_finite()) {
        log::warn!("non-finite gap or loss {s:?}; keeping sampling probabilities {prev:?}");
        return prev.to_vec();
    }
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamGrads, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in params.get_mut(id).data.iter_mut().enumerate() {
                *p *= 1.0 - lr * weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` to global norm `max_norm` when it is larger. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Capped at the instance size.
    pub starts: usize,
    pub augment: bool,
    /// Instances per forward batch.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { starts: usize::MAX, augment: true, chunk: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Best cost per instance over starts (and augmentations).
    pub costs: Vec<f64>,
    pub tours: Vec<Vec<usize>>,
}

/// Greedy multi-start decoding, optionally over the eight symmetric copies,
/// keeping the best tour per instance. Costs are measured on the original
/// coordinates.
pub fn evaluate(net: &PolicyNet, params: &ParamSet, insts: &[Instance], opts: EvalOptions) -> Result<EvalResult> {
    let mut costs = Vec::with_capacity(insts.len());
    let mut tours = Vec::with_capacity(insts.len());
    let mut i = 0;
    while i < insts.len() {
        let nodes = insts[i].num_nodes();
        let mut j = i;
        while j < insts.len() && j - i < opts.chunk.max(1) && insts[j].num_nodes() == nodes {
            j += 1;
        }
        let group = &insts[i..j];
        let variants: Vec<Instance> = if opts.augment {
            group.iter().flat_map(augment8).collect()
        } else {
            group.to_vec()
        };
        let copies = if opts.augment { 8 } else { 1 };
        let starts = opts.starts.min(group[0].n()).max(1);
        let mut g = Graph::with_params(params).no_grad();
        let ro = net.rollout(&mut g, &variants, &RolloutOptions { mode: DecodeMode::Greedy, starts, replay: None }, None)?;
        for (gi, inst) in group.iter().enumerate() {
            let mut best = (f64::INFINITY, Vec::new());
            for row in gi * copies * starts..(gi + 1) * copies * starts {
                let c = raw_cost(inst, &ro.tours[row]);
                if c < best.0 {
                    best = (c, ro.tours[row].clone());
                }
            }
            costs.push(best.0);
            tours.push(best.1);
        }
        i = j;
    }
    Ok(EvalResult { costs, tours })
}

/// Per-distribution validation instances with reference costs.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub dists: Vec<DistLabel>,
    pub instances: Vec<Vec<Instance>>,
    pub refs: Vec<Vec<f64>>,
}

impl ValidationSet {
    /// Generates `count` instances per distribution and computes references,
    /// reusing `cache` (`dataset_checksum,instance_index,method,cost`).
    pub fn generate(
        dists: &[DistLabel],
        problem: Problem,
        n: usize,
        count: usize,
        seed: u64,
        cache: Option<&Path>,
    ) -> Result<Self> {
        let mut instances = Vec::new();
        let mut refs = Vec::new();
        for (k, &d) in dists.iter().enumerate() {
            let insts = generate_many(&DistributionSpec::new(d, n), problem, count, rng::derive(seed, k as u64))?;
            let mut bytes = Vec::new();
            for inst in &insts {
                bytes.extend(to_json_line(inst)?.bytes());
                bytes.push(b'\n');
            }
            refs.push(cached_references(&insts, &sha256_hex(&bytes), cache)?);
            instances.push(insts);
        }
        Ok(Self { dists: dists.to_vec(), instances, refs })
    }
}

/// Mean gap per distribution.
pub fn validate_epoch(net: &PolicyNet, params: &ParamSet, val: &ValidationSet, opts: EvalOptions) -> Result<Vec<f64>> {
    val.instances
        .iter()
        .zip(&val.refs)
        .map(|(insts, refs)| {
            let res = evaluate(net, params, insts, opts)?;
            let total: f64 = res.costs.iter().zip(refs).map(|(&c, &r)| gap(c, r)).sum();
            Ok(total / insts.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Batch-mean losses.
    pub task: f64,
    pub balance: f64,
    pub class: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Per-instance task loss, in batch order.
    pub task_per_instance: Vec<f64>,
}

struct ShardOut {
    grads: ParamGrads,
    task: f64,
    balance: f64,
    class: f64,
    total: f64,
    per_instance: Vec<f64>,
}

fn shard_pass(net: &PolicyNet, params: &ParamSet, insts: &[Instance], sched: &TrainSchedule, batch: usize, seed: u64) -> Result<ShardOut> {
    let mut rng = rng::stream(seed, 0);
    let mut g = Graph::with_params(params);
    let starts = sched.starts();
    let ro = net.rollout(&mut g, insts, &RolloutOptions { mode: DecodeMode::Sample, starts, replay: None }, Some(&mut rng))?;
    let logp = ro.logp.expect("tape-recording rollout");
    let task = reinforce_loss(&mut g, &ro.costs, logp)?;
    let labels: Vec<usize> = insts.iter().map(|i| i.dist_label.class_index().unwrap_or(0)).collect();
    let class = cross_entropy(&mut g, ro.class_probs, &labels)?;
    let total = total_loss(&mut g, task, ro.balance, Some(class), sched.omega_beta, sched.omega_gamma)?;
    // Shards add up to the batch mean.
    let weight = insts.len() as f64 / batch as f64;
    let scaled = g.scale(total, weight);
    g.backward(scaled)?;
    let adv = advantages(&ro.costs, starts);
    let per_instance = adv
        .chunks(starts)
        .zip(ro.logp_values.chunks(starts))
        .map(|(a, l)| a.iter().zip(l).map(|(x, y)| x * y).sum::<f64>() / starts as f64)
        .collect();
    Ok(ShardOut {
        grads: g.param_grads(),
        task: g.scalar(task) * weight,
        balance: ro.balance.map_or(0.0, |b| g.scalar(b)) * weight,
        class: g.scalar(class) * weight,
        total: g.scalar(total) * weight,
        per_instance,
    })
}

/// Gradient of the batch loss, summed over fixed-size shards in shard order.
/// `workers` threads evaluate shards concurrently.
pub fn batch_gradients(
    net: &PolicyNet,
    params: &ParamSet,
    insts: &[Instance],
    sched: &TrainSchedule,
    seed: u64,
    workers: usize,
) -> Result<(ParamGrads, StepStats)> {
    let shards: Vec<&[Instance]> = insts.chunks(sched.shard_size).collect();
    let batch = insts.len();
    let run = |s: usize| shard_pass(net, params, shards[s], sched, batch, rng::derive(seed, s as u64));
    let workers = workers.clamp(1, shards.len().max(1));
    let mut outs: Vec<Option<Result<ShardOut>>> = (0..shards.len()).map(|_| None).collect();
    if workers == 1 {
        for (s, o) in outs.iter_mut().enumerate() {
            *o = Some(run(s));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    let n = shards.len();
                    scope.spawn(move || (w..n).step_by(workers).map(|s| (s, run(s))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (s, r) in h.join().expect("shard worker panicked") {
                    outs[s] = Some(r);
                }
            }
        });
    }
    let mut grads = ParamGrads::zeros_like(params);
    let mut stats = StepStats { task: 0.0, balance: 0.0, class: 0.0, total: 0.0, grad_norm: 0.0, task_per_instance: Vec::with_capacity(batch) };
    for o in outs {
        let o = o.expect("every shard ran")?;
        grads.add_assign(&o.grads);
        stats.task += o.task;
        stats.balance += o.balance;
        stats.class += o.class;
        stats.total += o.total;
        stats.task_per_instance.extend(o.per_instance);
    }
    Ok((grads, stats))
}

/// One optimizer step on `insts`.
pub fn train_step(
    policy: &mut Policy,
    adam: &mut AdamW,
    insts: &[Instance],
    sched: &TrainSchedule,
    lr: f64,
    seed: u64,
    workers: usize,
) -> Result<StepStats> {
    let (mut grads, mut stats) = batch_gradients(&policy.net, &policy.params, insts, sched, seed, workers)?;
    stats.grad_norm = clip_global_norm(&mut grads, sched.grad_clip);
    if !stats.total.is_finite() || !stats.grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0, seeds: insts.iter().map(|i| i.seed).collect() });
    }
    adam.update(&mut policy.params, &grads, lr, sched.weight_decay);
    Ok(stats)
}

/// Finite-difference check of the full training loss. One sampled rollout
/// fixes actions, gate selections and costs; the check then differentiates
/// the loss of replaying it, which is smooth in the parameters.
pub fn total_loss_grad_check(cfg: &TrainConfig, seed: u64, h: f64, fault: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    let sched = &cfg.schedule;
    let policy = initial_policy(cfg, seed)?;
    let insts: Vec<Instance> = sched
        .dist_set
        .iter()
        .enumerate()
        .map(|(k, &d)| generate_instance(&DistributionSpec::new(d, sched.n), cfg.policy.problem, rng::derive(seed, k as u64)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = insts.iter().map(|i| i.dist_label.class_index().unwrap_or(0)).collect();
    let starts = sched.starts();
    let (replay, costs) = {
        let mut g = Graph::with_params(&policy.params).no_grad();
        let mut r = rng::stream(seed, 2);
        let opts = RolloutOptions { mode: DecodeMode::Sample, starts, replay: None };
        let ro = policy.net.rollout(&mut g, &insts, &opts, Some(&mut r))?;
        (ro.replay(), ro.costs)
    };
    let f = |g: &mut Graph| -> vrpmoe_tensor::Result<Var> {
        replay_loss(&policy.net, g, &insts, &replay, &costs, &labels, sched).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => vrpmoe_tensor::TensorError::Contract(other.to_string()),
        })
    };
    Ok(grad_check(f, &policy.params, h, fault)?)
}

fn replay_loss(
    net: &PolicyNet,
    g: &mut Graph,
    insts: &[Instance],
    replay: &Replay,
    costs: &[f64],
    labels: &[usize],
    sched: &TrainSchedule,
) -> Result<Var> {
    let starts = sched.starts();
    let opts = RolloutOptions { mode: DecodeMode::Greedy, starts, replay: Some(replay) };
    let ro = net.rollout(g, insts, &opts, None)?;
    let logp = match ro.logp {
        Some(l) => l,
        None => g.constant(Tensor::new(vec![insts.len(), starts], ro.logp_values.clone())?),
    };
    let task = reinforce_loss(g, costs, logp)?;
    let class = cross_entropy(g, ro.class_probs, labels)?;
    total_loss(g, task, ro.balance, Some(class), sched.omega_beta, sched.omega_gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub probs: Vec<f64>,
    pub loss_task: f64,
    pub loss_balance: f64,
    pub loss_class: f64,
    pub gaps: Vec<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,p_U,p_C,p_M,loss_task,loss_balance,loss_class,gap_U,gap_C,gap_M,lr,wall_seconds";

impl MetricsRow {
    /// Values for `dist_set` are placed in the U/C/M columns; absent ones are
    /// written as 0 (probabilities) or empty (gaps).
    pub fn to_csv(&self, dists: &[DistLabel]) -> String {
        let mut p = ["0".to_string(), "0".to_string(), "0".to_string()];
        let mut gp = [String::new(), String::new(), String::new()];
        for (k, d) in dists.iter().enumerate() {
            let c = d.class_index().expect("training distribution");
            p[c] = self.probs[k].to_string();
            gp[c] = self.gaps[k].to_string();
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch, p[0], p[1], p[2], self.loss_task, self.loss_balance, self.loss_class, gp[0], gp[1], gp[2], self.lr, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the run stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub policy: Policy,
    pub metrics: Vec<MetricsRow>,
    pub sampling_probs: Vec<f64>,
    pub epochs_done: usize,
}

fn training_batch(sched: &TrainSchedule, problem: Problem, probs: &[f64], step_seed: u64, size: usize) -> Result<Vec<Instance>> {
    let mut pick = rng::stream(step_seed, 1);
    (0..size)
        .map(|i| {
            let u: f64 = pick.random();
            let mut acc = 0.0;
            let mut k = probs.len() - 1;
            for (j, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = j;
                    break;
                }
            }
            // Never draw a zero-probability distribution through rounding.
            while probs[k] == 0.0 && k > 0 {
                k -= 1;
            }
            generate_instance(&DistributionSpec::new(sched.dist_set[k], sched.n), problem, rng::derive(step_seed, i as u64))
        })
        .collect()
}

/// Policy a fresh run with `seed` starts from.
pub fn initial_policy(cfg: &TrainConfig, seed: u64) -> Result<Policy> {
    Policy::new(cfg.policy, rng::derive(seed, INIT_TAG))
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

pub fn last_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("last.ckpt")
}

/// Full training run. Writes `config.toml`, `metrics.csv` and checkpoints to
/// `opts.out_dir`; deterministic in `(cfg, opts.seed)` for any worker count.
pub fn train_run(cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let sched = &cfg.schedule;
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("config.toml"), cfg.to_toml()?)?;

    let (mut policy, mut adam, mut probs, start_epoch, mut metrics) = match &opts.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.header.train.as_ref() != Some(cfg) || ck.header.seed != opts.seed {
                return Err(Error::Checkpoint("checkpoint was written by a run with a different config or seed".into()));
            }
            let adam = ck.adam.ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
            let metrics = read_metrics(&metrics_path(&opts.out_dir), &sched.dist_set)?
                .into_iter()
                .filter(|r| r.epoch <= ck.header.epoch)
                .collect::<Vec<_>>();
            if metrics.len() != ck.header.epoch {
                return Err(Error::Checkpoint(format!(
                    "metrics log has {} rows but the checkpoint is at epoch {}",
                    metrics.len(),
                    ck.header.epoch
                )));
            }
            (ck.policy, adam, ck.header.sampling_probs, ck.header.epoch, metrics)
        }
        None => {
            let policy = initial_policy(cfg, opts.seed)?;
            let adam = AdamW::new(&policy.params);
            (policy, adam, sched.sampling_probs.clone(), 0, Vec::new())
        }
    };
    write_metrics(&metrics_path(&opts.out_dir), &metrics, &sched.dist_set)?;

    let val = ValidationSet::generate(
        &sched.dist_set,
        cfg.policy.problem,
        sched.n,
        sched.val_per_dist,
        rng::derive(opts.seed, VAL_TAG),
        Some(&opts.out_dir.join("reference_cache.csv")),
    )?;
    let eval_opts = EvalOptions { starts: sched.starts(), augment: sched.val_augment, chunk: 32 };
    let steps = sched.instances_per_epoch.div_ceil(sched.batch);
    let run_seed = rng::derive(opts.seed, TRAIN_TAG);
    let last_epoch = opts.stop_after.map_or(sched.epochs, |s| s.min(sched.epochs));

    for epoch in start_epoch..last_epoch {
        let t0 = Instant::now();
        let lr = sched.lr_at(epoch);
        let epoch_seed = rng::derive(run_seed, epoch as u64);
        let k = sched.dist_set.len();
        let (mut sum_task, mut sum_bal, mut sum_cls) = (0.0, 0.0, 0.0);
        let mut dist_loss = vec![0.0; k];
        let mut dist_count = vec![0usize; k];
        for s in 0..steps {
            let size = sched.batch.min(sched.instances_per_epoch - s * sched.batch);
            let step_seed = rng::derive(epoch_seed, s as u64);
            let insts = training_batch(sched, cfg.policy.problem, &probs, step_seed, size)?;
            let stats = train_step(&mut policy, &mut adam, &insts, sched, lr, rng::derive(step_seed, 0xB0), opts.workers)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { seeds, .. } => Error::NonFiniteLoss { epoch: epoch + 1, batch: s, seeds },
                    other => other,
                })?;
            sum_task += stats.task;
            sum_bal += stats.balance;
            sum_cls += stats.class;
            for (inst, l) in insts.iter().zip(&stats.task_per_instance) {
                let d = sched.dist_set.iter().position(|&d| d == inst.dist_label).expect("drawn from dist_set");
                dist_loss[d] += l;
                dist_count[d] += 1;
            }
        }
        let gaps = validate_epoch(&policy.net, &policy.params, &val, eval_opts)?;
        let used = probs.clone();
        if sched.dwa {
            let fed: Vec<f64> = gaps.iter().zip(&sched.gap_bias).map(|(g, b)| g + b).collect();
            let losses: Vec<f64> =
                dist_loss.iter().zip(&dist_count).map(|(&l, &c)| if c == 0 { 0.0 } else { l / c as f64 }).collect();
            probs = dwa_update(&probs, &fed, &losses);
        }
        let row = MetricsRow {
            epoch: epoch + 1,
            probs: used,
            loss_task: sum_task / steps as f64,
            loss_balance: sum_bal / steps as f64,
            loss_class: sum_cls / steps as f64,
            gaps,
            lr,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} gaps {:?} probs {:?} {:.1}s", row.epoch, row.gaps, probs, row.wall_seconds);
        append_metrics(&metrics_path(&opts.out_dir), &row, &sched.dist_set)?;
        metrics.push(row);

        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            policy: cfg.policy,
            train: Some(cfg.clone()),
            seed: opts.seed,
            epoch: epoch + 1,
            sampling_probs: probs.clone(),
            adam_step: adam.step,
        };
        checkpoint::save(&last_checkpoint_path(&opts.out_dir), &header, &policy.params, Some(&adam))?;
        if sched.checkpoint_every > 0 && ((epoch + 1) % sched.checkpoint_every == 0 || epoch + 1 == sched.epochs) {
            let p = opts.out_dir.join(format!("ckpt_{}", epoch + 1));
            checkpoint::save(&p, &header, &policy.params, Some(&adam))?;
        }
    }
    Ok(RunSummary { policy, metrics, sampling_probs: probs, epochs_done: last_epoch.max(start_epoch) })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], dists: &[DistLabel]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.to_csv(dists))?;
    }
    Ok(())
}

fn append_metrics(path: &Path, row: &MetricsRow, dists: &[DistLabel]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{}", row.to_csv(dists))?;
    Ok(())
}

pub fn read_metrics(path: &Path, dists: &[DistLabel]) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad("expected 12 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let cols: Vec<usize> = dists.iter().map(|d| d.class_index().expect("training distribution")).collect();
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            probs: cols.iter().map(|&c| num(f[1 + c])).collect::<Result<_>>()?,
            loss_task: num(f[4])?,
            loss_balance: num(f[5])?,
            loss_class: num(f[6])?,
            gaps: cols.iter().map(|&c| num(f[7 + c])).collect::<Result<_>>()?,
            lr: num(f[10])?,
            wall_seconds: num(f[11])?,
        });
    }
    Ok(rows)
}
