//! Encoder–decoder routing policy with MoE feed-forward blocks.
//!
//! The encoder routes every node independently. The instance representation
//! is a dedicated attention block followed by mean pooling; it feeds the
//! distribution classifier and, under instance routing, a single decoder gate
//! shared by every decoding step of that instance.
//!
//! All forward passes are batched over instances of equal size. A rollout of
//! `B` instances with `P` starts decodes `B·P` rows in lock-step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vrpmoe_tensor::{Graph, ParamSet, Tensor, Var};

use crate::env::{feasible_mask, raw_cost, step, RolloutState};
use crate::error::{Error, Result};
use crate::instance::{Instance, Problem};
use crate::moe::{self, ExpertKind, ExpertParams, Gating, MoEConfig, MoeParams, Routed};
use crate::nn::{Linear, Mha, Norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    Dense,
    EncoderOnly,
    DecoderOnly,
    Both,
}

impl MoePlacement {
    pub fn encoder(self) -> bool {
        matches!(self, MoePlacement::EncoderOnly | MoePlacement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, MoePlacement::DecoderOnly | MoePlacement::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderRouting {
    Instance,
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub problem: Problem,
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub moe: MoEConfig,
    pub moe_placement: MoePlacement,
    pub decoder_routing: DecoderRouting,
    pub clip: f64,
    pub num_classes: usize,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        self.moe.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(ExpertParams),
    Moe(MoeParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub mha: Mha,
    pub norm1: Norm,
    pub ffn: Ffn,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Embed {
    Tsp(Linear),
    Cvrp { depot: Linear, customer: Linear },
}

/// Parameter layout; the values live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub embed: Embed,
    pub layers: Vec<EncoderLayer>,
    pub inst_mha: Mha,
    pub classifier: Linear,
    /// `wq` projects the decoding context; `wk`/`wv` the node embeddings.
    pub dec: Mha,
    pub dec_ffn: Ffn,
    pub logit_key: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: PolicyNet,
    pub params: ParamSet,
}

fn make_ffn(ps: &mut ParamSet, name: &str, cfg: &PolicyConfig, moe_on: bool, rng: &mut ChaCha8Rng) -> Ffn {
    if moe_on {
        Ffn::Moe(MoeParams::new(ps, name, cfg.d, cfg.moe, rng))
    } else {
        Ffn::Dense(ExpertParams::new(ps, name, cfg.d, cfg.moe.int_dim, ExpertKind::Vanilla, rng))
    }
}

impl Policy {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = cfg.d;
        let embed = match cfg.problem {
            Problem::Tsp => Embed::Tsp(Linear::new(&mut ps, "embed", 2, d, true, &mut rng)),
            Problem::Cvrp => Embed::Cvrp {
                depot: Linear::new(&mut ps, "embed_depot", 2, d, true, &mut rng),
                customer: Linear::new(&mut ps, "embed_customer", 3, d, true, &mut rng),
            },
        };
        let layers = (0..cfg.enc_layers)
            .map(|l| EncoderLayer {
                mha: Mha::new(&mut ps, &format!("enc{l}.mha"), d, cfg.heads, &mut rng),
                norm1: Norm::new(&mut ps, &format!("enc{l}.norm1"), d),
                ffn: make_ffn(&mut ps, &format!("enc{l}.ffn"), &cfg, cfg.moe_placement.encoder(), &mut rng),
                norm2: Norm::new(&mut ps, &format!("enc{l}.norm2"), d),
            })
            .collect();
        let inst_mha = Mha::new(&mut ps, "inst.mha", d, cfg.heads, &mut rng);
        let classifier = Linear::new(&mut ps, "inst.classifier", d, cfg.num_classes, true, &mut rng);
        let ctx_dim = match cfg.problem {
            Problem::Tsp => 3 * d,
            Problem::Cvrp => 2 * d + 1,
        };
        let dec = Mha {
            wq: Linear::new(&mut ps, "dec.wq", ctx_dim, d, false, &mut rng),
            wk: Linear::new(&mut ps, "dec.wk", d, d, false, &mut rng),
            wv: Linear::new(&mut ps, "dec.wv", d, d, false, &mut rng),
            wo: Linear::new(&mut ps, "dec.wo", d, d, true, &mut rng),
            heads: cfg.heads,
        };
        let dec_ffn = make_ffn(&mut ps, "dec.ffn", &cfg, cfg.moe_placement.decoder(), &mut rng);
        let logit_key = Linear::new(&mut ps, "dec.logit_key", d, d, false, &mut rng);
        let net = PolicyNet { cfg, embed, layers, inst_mha, classifier, dec, dec_ffn, logit_key };
        Ok(Self { net, params: ps })
    }
}

/// Gate selections of one forward pass, replayable to reproduce it exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateTrace {
    /// One flattened selection list per encoder MoE layer.
    pub encoder: Vec<Vec<usize>>,
    /// Instance routing: a single entry. Node routing: one per decode step.
    pub decoder: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub batch: usize,
    pub nodes: usize,
    /// `[B, N, d]`.
    pub node_embs: Var,
    /// `[B, d]`.
    pub z_inst: Var,
    /// `[B, C]`.
    pub class_probs: Var,
    pub enc_routes: Vec<Routed>,
    pub dec_route: Option<Routed>,
    /// Load-balance loss of every routed layer so far.
    pub balance_terms: Vec<Var>,
    graph_mean: Var,
    k_heads: Var,
    v_heads: Var,
    logit_keys: Var,
}

fn features(insts: &[Instance]) -> Result<(usize, usize)> {
    let first = insts.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let nodes = first.num_nodes();
    if insts.iter().any(|i| i.num_nodes() != nodes || i.problem != first.problem) {
        return Err(Error::Config("batched instances must share problem and size".into()));
    }
    Ok((insts.len(), nodes))
}

fn ffn_forward(
    g: &mut Graph,
    ffn: &Ffn,
    x: Var,
    rng: Option<&mut ChaCha8Rng>,
    forced: Option<&[usize]>,
) -> Result<(Var, Option<Routed>)> {
    match ffn {
        Ffn::Dense(e) => Ok((moe::expert_forward(g, x, e)?, None)),
        Ffn::Moe(p) => {
            let r = moe::route(g, x, p, rng, forced)?;
            let y = moe::moe_forward(g, x, &r, p, None)?;
            Ok((y, Some(r)))
        }
    }
}

impl PolicyNet {
    fn check_problem(&self, insts: &[Instance]) -> Result<(usize, usize)> {
        let (b, n) = features(insts)?;
        if insts[0].problem != self.cfg.problem {
            return Err(Error::Config(format!("policy built for {:?}, got {:?}", self.cfg.problem, insts[0].problem)));
        }
        Ok((b, n))
    }

    fn embed(&self, g: &mut Graph, insts: &[Instance]) -> Result<Var> {
        let (b, n) = self.check_problem(insts)?;
        let d = self.cfg.d;
        match self.embed {
            Embed::Tsp(lin) => {
                let data = insts.iter().flat_map(|i| i.coords.iter().flatten().copied()).collect();
                let x = g.constant(Tensor::new(vec![b, n, 2], data)?);
                lin.forward(g, x)
            }
            Embed::Cvrp { depot, customer } => {
                let dep = insts.iter().flat_map(|i| i.coords[0]).collect();
                let dep = g.constant(Tensor::new(vec![b, 2], dep)?);
                let mut cust = Vec::with_capacity(b * (n - 1) * 3);
                for inst in insts {
                    for c in 1..n {
                        cust.extend([inst.coords[c][0], inst.coords[c][1], inst.demand(c)]);
                    }
                }
                let cust = g.constant(Tensor::new(vec![b * (n - 1), 3], cust)?);
                let dep = depot.forward(g, dep)?;
                let cust = customer.forward(g, cust)?;
                let dep_rows: Vec<usize> = (0..b).map(|i| i * n).collect();
                let cust_rows: Vec<usize> = (0..b).flat_map(|i| (1..n).map(move |c| i * n + c)).collect();
                let dep = g.scatter_rows(dep, &dep_rows, b * n)?;
                let cust = g.scatter_rows(cust, &cust_rows, b * n)?;
                let all = g.add(dep, cust)?;
                Ok(g.reshape(all, &[b, n, d])?)
            }
        }
    }

    /// Encoder stack, instance representation, classifier, decoder gate (under
    /// instance routing) and the per-instance decoder precomputations.
    pub fn encode(
        &self,
        g: &mut Graph,
        insts: &[Instance],
        mut rng: Option<&mut ChaCha8Rng>,
        replay: Option<&GateTrace>,
        trace: &mut GateTrace,
    ) -> Result<Encoded> {
        let (b, n) = self.check_problem(insts)?;
        let d = self.cfg.d;
        let mut h = self.embed(g, insts)?;
        let mut enc_routes = Vec::new();
        let mut balance_terms = Vec::new();
        for layer in &self.layers {
            let a = layer.mha.self_attention(g, h)?;
            let s = g.add(h, a)?;
            h = layer.norm1.forward(g, s)?;
            let forced = replay.and_then(|r| r.encoder.get(enc_routes.len())).map(|v| v.as_slice());
            let (f, routed) = ffn_forward(g, &layer.ffn, h, rng.as_deref_mut(), forced)?;
            let s = g.add(h, f)?;
            h = layer.norm2.forward(g, s)?;
            if let (Some(r), Ffn::Moe(p)) = (routed, &layer.ffn) {
                trace.encoder.push(r.selected.clone());
                balance_terms.push(moe::load_balance_loss(g, r.probs, &r.selected, p.cfg.k)?);
                enc_routes.push(r);
            }
        }
        let node_embs = h;
        let z_inst = self.instance_representation(g, node_embs)?;
        let class_probs = self.classify(g, z_inst)?;

        let dec_route = match (&self.dec_ffn, self.cfg.decoder_routing) {
            (Ffn::Moe(p), DecoderRouting::Instance) => {
                let forced = replay.and_then(|r| r.decoder.first()).map(|v| v.as_slice());
                let r = moe::route(g, z_inst, p, rng.as_deref_mut(), forced)?;
                trace.decoder.push(r.selected.clone());
                balance_terms.push(moe::load_balance_loss(g, r.probs, &r.selected, p.cfg.k)?);
                Some(r)
            }
            _ => None,
        };

        let graph_mean = g.mean_rows(node_embs)?;
        let k_heads = self.dec.split(g, self.dec.wk, node_embs)?;
        let v_heads = self.dec.split(g, self.dec.wv, node_embs)?;
        let logit_keys = self.logit_key.forward(g, node_embs)?;
        debug_assert_eq!(g.shape(node_embs), [b, n, d]);
        Ok(Encoded {
            batch: b,
            nodes: n,
            node_embs,
            z_inst,
            class_probs,
            enc_routes,
            dec_route,
            balance_terms,
            graph_mean,
            k_heads,
            v_heads,
            logit_keys,
        })
    }

    /// Dedicated self-attention over `node_embs[B, N, d]`, mean-pooled to
    /// `[B, d]`.
    pub fn instance_representation(&self, g: &mut Graph, node_embs: Var) -> Result<Var> {
        let a = self.inst_mha.self_attention(g, node_embs)?;
        Ok(g.mean_rows(a)?)
    }

    pub fn classify(&self, g: &mut Graph, z_inst: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, z_inst)?;
        Ok(g.softmax(logits)?)
    }

    /// Node probabilities `[B, P, N]` for one decoding step of `B·P` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        input: &StepInput,
        rng: Option<&mut ChaCha8Rng>,
        forced: Option<&[usize]>,
        trace: &mut GateTrace,
        balance: &mut Vec<Var>,
    ) -> Result<Var> {
        let (b, n, d) = (enc.batch, enc.nodes, self.cfg.d);
        let rows = input.current.len();
        let p = rows / b;
        let inst_of_row: Vec<usize> = (0..rows).map(|r| r / p).collect();
        let flat = g.reshape(enc.node_embs, &[b * n, d])?;
        let mean = g.gather_rows(enc.graph_mean, &inst_of_row)?;
        let last_idx: Vec<usize> = (0..rows).map(|r| inst_of_row[r] * n + input.current[r]).collect();
        let last = g.gather_rows(flat, &last_idx)?;
        let third = match self.cfg.problem {
            Problem::Tsp => {
                let first_idx: Vec<usize> = (0..rows).map(|r| inst_of_row[r] * n + input.first[r]).collect();
                g.gather_rows(flat, &first_idx)?
            }
            Problem::Cvrp => g.constant(Tensor::new(vec![rows, 1], input.remaining_frac.to_vec())?),
        };
        let ctx = g.concat_cols(&[mean, last, third])?;
        let ctx_dim = g.shape(ctx)[1];
        let ctx = g.reshape(ctx, &[b, p, ctx_dim])?;
        let q = self.dec.split(g, self.dec.wq, ctx)?;
        let heads = self.cfg.heads;
        let mut attn_mask = Vec::with_capacity(b * heads * p * n);
        for bi in 0..b {
            for _ in 0..heads {
                attn_mask.extend_from_slice(&input.mask[bi * p * n..(bi + 1) * p * n]);
            }
        }
        let glimpse = self.dec.attend(g, q, enc.k_heads, enc.v_heads, Some(&attn_mask))?;
        let out = match (&self.dec_ffn, self.cfg.decoder_routing) {
            (Ffn::Dense(e), _) => moe::expert_forward(g, glimpse, e)?,
            (Ffn::Moe(mp), DecoderRouting::Instance) => {
                let r = enc.dec_route.as_ref().expect("instance route computed at encode");
                moe::moe_forward(g, glimpse, r, mp, Some(&inst_of_row))?
            }
            (Ffn::Moe(mp), DecoderRouting::Node) => {
                let r = moe::route(g, glimpse, mp, rng, forced)?;
                trace.decoder.push(r.selected.clone());
                balance.push(moe::load_balance_loss(g, r.probs, &r.selected, mp.cfg.k)?);
                moe::moe_forward(g, glimpse, &r, mp, None)?
            }
        };
        let compat = g.bmm(out, enc.logit_keys, true)?;
        let compat = g.scale(compat, 1.0 / (d as f64).sqrt());
        let compat = g.tanh(compat);
        let compat = g.scale(compat, self.cfg.clip);
        Ok(g.masked_softmax(compat, Some(input.mask))?)
    }

    /// Multi-start rollouts of `insts` (equal size), `starts` rows each.
    pub fn rollout(
        &self,
        g: &mut Graph,
        insts: &[Instance],
        opts: &RolloutOptions,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Rollout> {
        let (b, n) = self.check_problem(insts)?;
        let customers = insts[0].n();
        let p = opts.starts;
        if p == 0 || p > customers {
            return Err(Error::Config(format!("starts must lie in 1..={customers}, got {p}")));
        }
        let replay = opts.replay;
        let mut trace = GateTrace::default();
        let enc = self.encode(g, insts, rng.as_deref_mut(), replay.map(|r| &r.trace), &mut trace)?;
        let rows = b * p;
        let keep_tape = g.grad_enabled();

        let mut states: Vec<RolloutState> = Vec::with_capacity(rows);
        for r in 0..rows {
            let inst = &insts[r / p];
            let first = match inst.problem {
                Problem::Tsp => r % p,
                Problem::Cvrp => r % p + 1,
            };
            states.push(step(&RolloutState::new(inst), first, inst)?);
        }
        let first: Vec<usize> = states.iter().map(|s| s.current).collect();
        let mut logp_values = vec![0.0; rows];
        let mut logp_steps = Vec::new();
        let mut actions_log = Vec::new();
        let mut dec_balance = Vec::new();
        let mut router_calls = usize::from(enc.dec_route.is_some());
        let mut step_no = 0;
        while states.iter().any(|s| !s.done) {
            let mut mask = Vec::with_capacity(rows * n);
            for (r, s) in states.iter().enumerate() {
                if s.done {
                    mask.push(true);
                    mask.extend(std::iter::repeat_n(false, n - 1));
                } else {
                    mask.extend(feasible_mask(s, &insts[r / p]));
                }
            }
            let remaining_frac: Vec<f64> = states
                .iter()
                .enumerate()
                .map(|(r, s)| insts[r / p].capacity.map_or(0.0, |q| s.remaining_capacity / q))
                .collect();
            let current: Vec<usize> = states.iter().map(|s| s.current).collect();
            let input = StepInput { current: &current, first: &first, remaining_frac: &remaining_frac, mask: &mask };
            let mark = g.len();
            let forced_gate = match self.cfg.decoder_routing {
                DecoderRouting::Node => replay.and_then(|r| r.trace.decoder.get(step_no)).map(|v| v.as_slice()),
                DecoderRouting::Instance => None,
            };
            if matches!((&self.dec_ffn, self.cfg.decoder_routing), (Ffn::Moe(_), DecoderRouting::Node)) {
                router_calls += 1;
            }
            let balance_mark = dec_balance.len();
            let probs = self.decode_step(g, &enc, &input, rng.as_deref_mut(), forced_gate, &mut trace, &mut dec_balance)?;
            let pv = g.value(probs);
            let actions: Vec<usize> = match replay {
                Some(rp) => rp.actions.get(step_no).cloned().ok_or_else(|| Error::Config("replay ran out of actions".into()))?,
                None => match opts.mode {
                    DecodeMode::Greedy => pv.chunks(n).map(argmax).collect(),
                    DecodeMode::Sample => {
                        let rng = rng.as_deref_mut().ok_or_else(|| Error::Config("sampling needs an rng stream".into()))?;
                        pv.chunks(n).map(|row| sample(row, rng)).collect()
                    }
                },
            };
            for (r, &a) in actions.iter().enumerate() {
                let pr = pv[r * n + a];
                if !(pr > 0.0) {
                    return Err(Error::Infeasible(format!("row {r} chose masked node {a}")));
                }
                logp_values[r] += pr.ln();
            }
            if keep_tape {
                let picked = g.pick(probs, &actions)?;
                logp_steps.push(g.ln(picked));
            } else {
                let vals: Vec<f64> = dec_balance.drain(balance_mark..).map(|v| g.scalar(v)).collect();
                g.truncate(mark);
                for v in vals {
                    dec_balance.push(g.constant(Tensor::scalar(v)));
                }
            }
            for (r, &a) in actions.iter().enumerate() {
                if !states[r].done {
                    states[r] = step(&states[r], a, &insts[r / p])?;
                }
            }
            actions_log.push(actions);
            step_no += 1;
        }

        let tours: Vec<Vec<usize>> = states.into_iter().map(|s| s.partial_tour).collect();
        let costs: Vec<f64> = tours.iter().enumerate().map(|(r, t)| raw_cost(&insts[r / p], t)).collect();
        let logp = match (keep_tape, logp_steps.is_empty()) {
            (true, false) => {
                let s = g.add_all(&logp_steps)?;
                Some(g.reshape(s, &[b, p])?)
            }
            (true, true) => Some(g.constant(Tensor::zeros(&[b, p]))),
            _ => None,
        };
        let mut balance_terms = enc.balance_terms.clone();
        if !dec_balance.is_empty() {
            let s = g.add_all(&dec_balance)?;
            balance_terms.push(g.scale(s, 1.0 / dec_balance.len() as f64));
        }
        let balance = match balance_terms.len() {
            0 => None,
            k => {
                let s = g.add_all(&balance_terms)?;
                Some(g.scale(s, 1.0 / k as f64))
            }
        };
        Ok(Rollout {
            batch: b,
            starts: p,
            tours,
            costs,
            logp,
            logp_values,
            actions: actions_log,
            trace,
            balance,
            class_probs: enc.class_probs,
            z_inst: enc.z_inst,
            decoder_router_calls: router_calls,
        })
    }
}

pub struct StepInput<'a> {
    pub current: &'a [usize],
    pub first: &'a [usize],
    /// Remaining capacity as a fraction of `Q` (CVRP only).
    pub remaining_frac: &'a [f64],
    /// Row-major `[rows, N]` feasibility.
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Decisions of an earlier rollout to be reproduced step for step.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub actions: Vec<Vec<usize>>,
    pub trace: GateTrace,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions<'a> {
    pub mode: DecodeMode,
    pub starts: usize,
    pub replay: Option<&'a Replay>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub batch: usize,
    pub starts: usize,
    /// Row `i·P + s` is instance `i`, start `s`.
    pub tours: Vec<Vec<usize>>,
    pub costs: Vec<f64>,
    /// `[B, P]` summed log-probabilities of the decoded (non-forced) actions.
    pub logp: Option<Var>,
    pub logp_values: Vec<f64>,
    pub actions: Vec<Vec<usize>>,
    pub trace: GateTrace,
    /// Mean load-balance loss over routed layers; a constant in no-grad passes.
    pub balance: Option<Var>,
    pub class_probs: Var,
    pub z_inst: Var,
    pub decoder_router_calls: usize,
}

impl Rollout {
    pub fn replay(&self) -> Replay {
        Replay { actions: self.actions.clone(), trace: self.trace.clone() }
    }

    /// Best start per instance: `(row, cost)`.
    pub fn best(&self) -> Vec<(usize, f64)> {
        (0..self.batch)
            .map(|i| {
                (i * self.starts..(i + 1) * self.starts)
                    .map(|r| (r, self.costs[r]))
                    .fold((usize::MAX, f64::INFINITY), |a, x| if x.1 < a.1 { x } else { a })
            })
            .collect()
    }
}

/// Highest-probability index, ties to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

/// `−mean_i log probs[i, label_i]` over `[B, C]` class probabilities.
pub fn cross_entropy(g: &mut Graph, class_probs: Var, labels: &[usize]) -> Result<Var> {
    let c = g.shape(class_probs)[g.shape(class_probs).len() - 1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!("class label {bad} out of range for {c} classes")));
    }
    let picked = g.pick(class_probs, labels)?;
    let logs = g.ln(picked);
    let m = g.mean(logs);
    Ok(g.scale(m, -1.0))
}

/// Standard configurations: `tiny` for gradient checks, `desk` for the
/// reduced training runs, `full` for the full-size model.
pub fn preset_config(name: &str, problem: Problem) -> Result<PolicyConfig> {
    let moe = |m, k, int_dim| MoEConfig {
        m,
        k,
        expert_kind: ExpertKind::R2e,
        int_dim,
        shared_expert: true,
        gating: Gating::Topk,
    };
    let base = |d, heads, enc_layers, moe| PolicyConfig {
        problem,
        d,
        heads,
        enc_layers,
        moe,
        moe_placement: MoePlacement::Both,
        decoder_routing: DecoderRouting::Instance,
        clip: 10.0,
        num_classes: 3,
    };
    match name {
        "tiny" => Ok(base(8, 2, 1, moe(3, 2, 8))),
        "desk" => Ok(base(64, 4, 3, moe(4, 2, 64))),
        "full" | "paper" => Ok(base(128, 8, 6, moe(8, 3, 128))),
        other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny, desk or full)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::validate;
    use crate::instance::DistLabel;
    use crate::instancegen::{generate_instance, generate_many, DistributionSpec};

    fn tiny(problem: Problem) -> Policy {
        Policy::new(preset_config("tiny", problem).unwrap(), 7).unwrap()
    }

    fn greedy(starts: usize) -> RolloutOptions<'static> {
        RolloutOptions { mode: DecodeMode::Greedy, starts, replay: None }
    }

    #[test]
    fn shapes_and_probabilities() {
        let pol = tiny(Problem::Cvrp);
        let insts = generate_many(&DistributionSpec::new(DistLabel::Cluster, 6), Problem::Cvrp, 3, 1).unwrap();
        let mut g = Graph::with_params(&pol.params);
        let mut tr = GateTrace::default();
        let enc = pol.net.encode(&mut g, &insts, None, None, &mut tr).unwrap();
        assert_eq!(g.shape(enc.node_embs), [3, 7, 8]);
        assert_eq!(g.shape(enc.z_inst), [3, 8]);
        for row in g.value(enc.class_probs).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(tr.encoder.len(), 1);
        assert_eq!(tr.decoder.len(), 1);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 3], vec![0.5, 0.25, 0.25]).unwrap());
        let l = cross_entropy(&mut g, p, &[1]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);
        let u = g.constant(Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3]).unwrap());
        let l = cross_entropy(&mut g, u, &[2]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&mut g, u, &[3]).is_err());
    }

    #[test]
    fn multistart_tours_are_feasible_and_distinct() {
        for problem in [Problem::Tsp, Problem::Cvrp] {
            let pol = tiny(problem);
            let insts = generate_many(&DistributionSpec::new(DistLabel::Mixed, 6), problem, 2, 3).unwrap();
            let mut g = Graph::with_params(&pol.params).no_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let opts = RolloutOptions { mode: DecodeMode::Sample, starts: 6, replay: None };
            let ro = pol.net.rollout(&mut g, &insts, &opts, Some(&mut rng)).unwrap();
            for (r, t) in ro.tours.iter().enumerate() {
                validate(&insts[r / 6], t).unwrap();
            }
            let firsts: Vec<usize> = ro.tours[..6].iter().map(|t| if problem == Problem::Tsp { t[0] } else { t[1] }).collect();
            let mut u = firsts.clone();
            u.dedup();
            assert_eq!(u.len(), 6);
        }
    }

    #[test]
    fn logprob_chain_matches_tape() {
        let pol = tiny(Problem::Tsp);
        let inst = generate_instance(&DistributionSpec::new(DistLabel::Uniform, 3), Problem::Tsp, 11).unwrap();
        let mut g = Graph::with_params(&pol.params);
        let ro = pol.net.rollout(&mut g, &[inst], &greedy(3), None).unwrap();
        let lp = g.value(ro.logp.unwrap()).to_vec();
        for (a, b) in lp.iter().zip(&ro.logp_values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_rollout() {
        let pol = tiny(Problem::Cvrp);
        let insts = generate_many(&DistributionSpec::new(DistLabel::Uniform, 6), Problem::Cvrp, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::with_params(&pol.params);
        let opts = RolloutOptions { mode: DecodeMode::Sample, starts: 4, replay: None };
        let a = pol.net.rollout(&mut g, &insts, &opts, Some(&mut rng)).unwrap();
        let rp = a.replay();
        let mut g2 = Graph::with_params(&pol.params);
        let opts = RolloutOptions { mode: DecodeMode::Sample, starts: 4, replay: Some(&rp) };
        let b = pol.net.rollout(&mut g2, &insts, &opts, None).unwrap();
        assert_eq!(a.tours, b.tours);
        assert_eq!(a.logp_values, b.logp_values);
    }

    #[test]
    fn instance_routing_calls_router_once() {
        let pol = tiny(Problem::Tsp);
        let insts = generate_many(&DistributionSpec::new(DistLabel::Uniform, 6), Problem::Tsp, 2, 1).unwrap();
        let mut g = Graph::with_params(&pol.params).no_grad();
        let ro = pol.net.rollout(&mut g, &insts, &greedy(6), None).unwrap();
        assert_eq!(ro.decoder_router_calls, 1);
        let mut cfg = pol.net.cfg;
        cfg.decoder_routing = DecoderRouting::Node;
        let node = Policy::new(cfg, 7).unwrap();
        let mut g = Graph::with_params(&node.params).no_grad();
        let ro = node.net.rollout(&mut g, &insts, &greedy(6), None).unwrap();
        assert_eq!(ro.decoder_router_calls, 5);
    }

    #[test]
    fn dense_model_produces_no_gates() {
        let mut cfg = preset_config("tiny", Problem::Tsp).unwrap();
        cfg.moe_placement = MoePlacement::Dense;
        let pol = Policy::new(cfg, 1).unwrap();
        let inst = generate_instance(&DistributionSpec::new(DistLabel::Uniform, 5), Problem::Tsp, 1).unwrap();
        let mut g = Graph::with_params(&pol.params);
        let ro = pol.net.rollout(&mut g, &[inst], &greedy(5), None).unwrap();
        assert!(ro.trace.encoder.is_empty() && ro.trace.decoder.is_empty());
        assert!(ro.balance.is_none());
    }

    #[test]
    fn constant_router_makes_routing_modes_agree() {
        let cfg = preset_config("tiny", Problem::Tsp).unwrap();
        let mut inst_pol = Policy::new(cfg, 3).unwrap();
        if let Ffn::Moe(mp) = &inst_pol.net.dec_ffn {
            let r = mp.router;
            inst_pol.params.get_mut(r.w).data.fill(0.0);
            inst_pol.params.get_mut(r.b.unwrap()).data.fill(0.0);
        }
        let mut node_net = inst_pol.net.clone();
        node_net.cfg.decoder_routing = DecoderRouting::Node;
        let inst = generate_instance(&DistributionSpec::new(DistLabel::Uniform, 6), Problem::Tsp, 4).unwrap();
        let mut g = Graph::with_params(&inst_pol.params).no_grad();
        let a = inst_pol.net.rollout(&mut g, &[inst.clone()], &greedy(6), None).unwrap();
        let mut g = Graph::with_params(&inst_pol.params).no_grad();
        let b = node_net.rollout(&mut g, &[inst], &greedy(6), None).unwrap();
        assert_eq!(a.tours, b.tours);
        for (x, y) in a.logp_values.iter().zip(&b.logp_values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let pol = tiny(Problem::Cvrp);
        let inst = generate_instance(&DistributionSpec::new(DistLabel::Uniform, 5), Problem::Cvrp, 8).unwrap();
        let perm = [0usize, 3, 1, 5, 2, 4];
        let mut permuted = inst.clone();
        permuted.coords = perm.iter().map(|&i| inst.coords[i]).collect();
        permuted.demands = perm[1..].iter().map(|&i| inst.demands[i - 1]).collect();
        let embs = |i: &Instance| {
            let mut g = Graph::with_params(&pol.params).no_grad();
            let mut tr = GateTrace::default();
            let e = pol.net.encode(&mut g, std::slice::from_ref(i), None, None, &mut tr).unwrap();
            (g.value(e.node_embs).to_vec(), g.value(e.z_inst).to_vec())
        };
        let (a, za) = embs(&inst);
        let (b, zb) = embs(&permuted);
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b[row * 8 + c] - a[src * 8 + c]).abs() < 1e-9);
            }
        }
        for (x, y) in za.iter().zip(&zb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn finished_rows_sit_on_depot() {
        let pol = tiny(Problem::Cvrp);
        let inst = Instance::cvrp(
            vec![[0.5, 0.5], [0.1, 0.1], [0.9, 0.9], [0.1, 0.9]],
            vec![0.9, 0.1, 0.1],
            30.0,
            DistLabel::Uniform,
            0,
        );
        let mut g = Graph::with_params(&pol.params).no_grad();
        let ro = pol.net.rollout(&mut g, &[inst.clone()], &greedy(3), None).unwrap();
        for t in &ro.tours {
            validate(&inst, t).unwrap();
            assert_eq!(*t.last().unwrap(), 0);
        }
    }
}
