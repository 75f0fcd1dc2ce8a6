//! Sparse mixture-of-experts layer: softmax router, Top-k or sampled gating,
//! vanilla and residual-refined experts, optional shared expert and the
//! load-balancing statistic.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vrpmoe_tensor::{Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Vanilla,
    R2e,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Topk,
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub m: usize,
    pub k: usize,
    pub expert_kind: ExpertKind,
    pub int_dim: usize,
    pub shared_expert: bool,
    pub gating: Gating,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!("moe needs 1 <= k <= m, got k = {}, m = {}", self.k, self.m)));
        }
        if self.int_dim == 0 {
            return Err(Error::Config("moe int_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Routing outcome for one unit (a node, or a whole instance).
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub raw_probs: Vec<f64>,
}

/// Expert MLP. `refine` is present for residual-refined experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertParams {
    pub up: Linear,
    pub down: Linear,
    pub refine: Option<Linear>,
}

impl ExpertParams {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, int_dim: usize, kind: ExpertKind, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), d, int_dim, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), int_dim, d, true, rng),
            refine: (kind == ExpertKind::R2e).then(|| Linear::new(ps, &format!("{name}.refine"), d, d, true, rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub cfg: MoEConfig,
    pub router: Linear,
    pub experts: Vec<ExpertParams>,
    pub shared: Option<ExpertParams>,
}

impl MoeParams {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, cfg: MoEConfig, rng: &mut impl Rng) -> Self {
        let router = Linear::new(ps, &format!("{name}.router"), d, cfg.m, true, rng);
        let experts = (0..cfg.m)
            .map(|j| ExpertParams::new(ps, &format!("{name}.expert{j}"), d, cfg.int_dim, cfg.expert_kind, rng))
            .collect();
        let shared = cfg
            .shared_expert
            .then(|| ExpertParams::new(ps, &format!("{name}.shared"), d, cfg.int_dim, cfg.expert_kind, rng));
        Self { cfg, router, experts, shared }
    }
}

/// Differentiable routing result for `units` rows.
#[derive(Debug, Clone)]
pub struct Routed {
    /// Raw router probabilities `[units, m]`.
    pub probs: Var,
    /// Renormalised weights of the selected experts `[units, k]`.
    pub weights: Var,
    /// Selected expert indices, `k` per unit, row-major.
    pub selected: Vec<usize>,
    pub k: usize,
}

impl Routed {
    pub fn units(&self) -> usize {
        self.selected.len() / self.k
    }

    pub fn decisions(&self, g: &Graph) -> Vec<GateDecision> {
        let (p, w) = (g.value(self.probs), g.value(self.weights));
        let m = p.len() / self.units();
        (0..self.units())
            .map(|u| GateDecision {
                selected: self.selected[u * self.k..(u + 1) * self.k].to_vec(),
                weights: w[u * self.k..(u + 1) * self.k].to_vec(),
                raw_probs: p[u * m..(u + 1) * m].to_vec(),
            })
            .collect()
    }
}

/// Indices of the `k` largest entries, larger first; ties go to the lower
/// index.
pub fn topk_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `k` distinct indices drawn sequentially in proportion to `probs`,
/// renormalising over the remaining mass after each draw.
pub fn sample_indices(probs: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut left: Vec<f64> = probs.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = left.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (j, &p) in left.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            pick = Some(j);
            if u < p {
                break;
            }
            u -= p;
        }
        // All remaining mass zero (underflow): fall back to the lowest free index.
        let j = pick.unwrap_or_else(|| (0..left.len()).find(|j| !out.contains(j)).expect("k <= m"));
        out.push(j);
        left[j] = 0.0;
    }
    out
}

/// Routes every row of `x[.., d]`. `forced` replays a previous selection
/// (`k` indices per row) instead of choosing afresh.
pub fn route(
    g: &mut Graph,
    x: Var,
    p: &MoeParams,
    rng: Option<&mut ChaCha8Rng>,
    forced: Option<&[usize]>,
) -> Result<Routed> {
    let (m, k) = (p.cfg.m, p.cfg.k);
    let logits = p.router.forward(g, x)?;
    let units = g.value(logits).len() / m;
    let logits = g.reshape(logits, &[units, m])?;
    let probs = g.softmax(logits)?;
    let selected = match forced {
        Some(f) => {
            if f.len() != units * k || f.iter().any(|&j| j >= m) {
                return Err(Error::Config("replayed gate selection does not match the router".into()));
            }
            f.to_vec()
        }
        None => {
            let pv = g.value(probs).to_vec();
            match p.cfg.gating {
                Gating::Topk => pv.chunks(m).flat_map(|row| topk_indices(row, k)).collect(),
                Gating::Sampling => {
                    let rng = rng.ok_or_else(|| Error::Config("sampling gating needs an rng stream".into()))?;
                    pv.chunks(m).flat_map(|row| sample_indices(row, k, rng)).collect()
                }
            }
        }
    };
    let chosen = g.gather_cols(logits, &selected, k)?;
    let weights = g.softmax(chosen)?;
    Ok(Routed { probs, weights, selected, k })
}

pub fn expert_forward(g: &mut Graph, x: Var, e: &ExpertParams) -> Result<Var> {
    let h = e.up.forward(g, x)?;
    let h = match e.refine {
        Some(_) => g.silu(h),
        None => g.relu(h),
    };
    let y = e.down.forward(g, h)?;
    match e.refine {
        Some(r) => {
            let r = r.forward(g, x)?;
            Ok(g.add(y, r)?)
        }
        None => Ok(y),
    }
}

/// `shared(x) + Σ_j w_j E_j(x)` per row of `x[.., d]`, evaluating each expert
/// only on the rows that selected it. Row `r` uses the gate of unit
/// `unit_of_row[r]` (identity when `None`).
pub fn moe_forward(g: &mut Graph, x: Var, routed: &Routed, p: &MoeParams, unit_of_row: Option<&[usize]>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d = *shape.last().expect("non-scalar input");
    let rows = g.value(x).len() / d;
    let k = routed.k;
    let unit = |r: usize| unit_of_row.map_or(r, |u| u[r]);
    if unit_of_row.is_some_and(|u| u.len() != rows) || (unit_of_row.is_none() && routed.units() != rows) {
        return Err(Error::Config("gate units do not cover the input rows".into()));
    }
    let flat = g.reshape(x, &[rows, d])?;
    let mut parts = Vec::new();
    if let Some(sh) = &p.shared {
        parts.push(expert_forward(g, flat, sh)?);
    }
    for (j, e) in p.experts.iter().enumerate() {
        let mut idx = Vec::new();
        let mut units = Vec::new();
        let mut slots = Vec::new();
        for r in 0..rows {
            let u = unit(r);
            if let Some(s) = routed.selected[u * k..(u + 1) * k].iter().position(|&c| c == j) {
                idx.push(r);
                units.push(u);
                slots.push(s);
            }
        }
        if idx.is_empty() {
            continue;
        }
        let xj = g.gather_rows(flat, &idx)?;
        let yj = expert_forward(g, xj, e)?;
        let wu = g.gather_rows(routed.weights, &units)?;
        let wj = g.pick(wu, &slots)?;
        let yj = g.row_scale(yj, wj)?;
        parts.push(g.scatter_rows(yj, &idx, rows)?);
    }
    let out = match parts.len() {
        0 => g.constant(Tensor::zeros(&[rows, d])),
        _ => g.add_all(&parts)?,
    };
    Ok(g.reshape(out, &shape)?)
}

/// `m · Σ_j p_j f_j` with importance `p` from `probs[I, m]` and load `f` the
/// selection frequency, held constant.
pub fn load_balance_loss(g: &mut Graph, probs: Var, selected: &[usize], k: usize) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    let (units, m) = (s[0], s[1]);
    let mut counts = vec![0usize; m];
    for &j in selected {
        counts[j] += 1;
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / (units * k) as f64).collect();
    let importance = g.mean_rows(probs)?;
    let f = g.constant(Tensor::new(vec![m], f)?);
    let prod = g.mul(importance, f)?;
    let total = g.sum(prod);
    Ok(g.scale(total, m as f64))
}

/// Per-expert selection counts over a stream of selections.
pub fn usage_histogram<'a>(selections: impl IntoIterator<Item = &'a [usize]>, m: usize) -> Vec<u64> {
    let mut counts = vec![0u64; m];
    for sel in selections {
        for &j in sel {
            counts[j] += 1;
        }
    }
    counts
}

/// CSV `distribution,expert_index,count,frequency`.
pub fn write_usage_csv(path: &Path, rows: &[(String, Vec<u64>)]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "distribution,expert_index,count,frequency")?;
    for (dist, counts) in rows {
        let total: u64 = counts.iter().sum();
        for (j, &c) in counts.iter().enumerate() {
            let freq = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            writeln!(out, "{dist},{j},{c},{freq}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(m: usize, k: usize, kind: ExpertKind, shared: bool) -> MoEConfig {
        MoEConfig { m, k, expert_kind: kind, int_dim: 3, shared_expert: shared, gating: Gating::Topk }
    }

    fn routed_from_logits(logits: &[f64], m: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![logits.len() / m, m], logits.to_vec()).unwrap());
        let probs = g.softmax(l).unwrap();
        let sel: Vec<usize> = g.value(probs).chunks(m).flat_map(|r| topk_indices(r, k)).collect();
        let chosen = g.gather_cols(l, &sel, k).unwrap();
        let w = g.softmax(chosen).unwrap();
        (sel, g.value(w).to_vec())
    }

    #[test]
    fn topk_examples() {
        let (sel, w) = routed_from_logits(&[2.0, 1.0, 0.0, -1.0], 4, 2);
        assert_eq!(sel, vec![0, 1]);
        let e = 1f64.exp();
        assert!((w[0] - e / (1.0 + e)).abs() < 1e-15 && (w[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
        let (sel, w) = routed_from_logits(&[0.5; 8], 8, 3);
        assert_eq!(sel, vec![0, 1, 2]);
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn full_k_weights_match_probs() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (sel, w) = routed_from_logits(&logits, 4, 4);
        let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
        for (s, wi) in sel.iter().zip(&w) {
            assert!((wi - logits[*s].exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_draws_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = sample_indices(&[0.7, 0.1, 0.1, 0.1], 3, &mut rng);
            let mut u = s.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 3);
        }
    }

    #[test]
    fn sampling_requires_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let mut c = cfg(3, 2, ExpertKind::Vanilla, false);
        c.gating = Gating::Sampling;
        let p = MoeParams::new(&mut ps, "moe", 2, c, &mut rng);
        let mut g = Graph::with_params(&ps);
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        assert!(matches!(route(&mut g, x, &p, None, None), Err(Error::Config(_))));
        assert!(route(&mut g, x, &p, Some(&mut rng), None).is_ok());
    }

    #[test]
    fn expert_hand_evaluation() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = ExpertParams::new(&mut ps, "e", 2, 2, ExpertKind::R2e, &mut rng);
        let set = |ps: &mut ParamSet, l: Linear, w: [f64; 4], b: [f64; 2]| {
            ps.get_mut(l.w).data = w.to_vec();
            ps.get_mut(l.b.unwrap()).data = b.to_vec();
        };
        set(&mut ps, e.up, [0.5, -1.0, 2.0, 0.25], [0.1, -0.2]);
        set(&mut ps, e.down, [1.0, 0.5, -0.5, 2.0], [0.0, 0.3]);
        set(&mut ps, e.refine.unwrap(), [0.2, 0.0, 0.0, -0.4], [0.05, 0.0]);
        let x = [0.3, -0.7];
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let h0 = silu(x[0] * 0.5 + x[1] * 2.0 + 0.1);
        let h1 = silu(x[0] * -1.0 + x[1] * 0.25 - 0.2);
        let want = [
            h0 * 1.0 + h1 * -0.5 + 0.0 + (x[0] * 0.2 + 0.05),
            h0 * 0.5 + h1 * 2.0 + 0.3 + (x[1] * -0.4),
        ];
        let mut g = Graph::with_params(&ps);
        let xv = g.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let y = expert_forward(&mut g, xv, &e).unwrap();
        for (a, b) in g.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn r2e_degenerate_branches() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = ExpertParams::new(&mut ps, "e", 3, 4, ExpertKind::R2e, &mut rng);
        let x_data = vec![0.2, -0.1, 0.9, 0.4, 0.0, -0.3];
        let main_only = {
            let mut g = Graph::with_params(&ps);
            let x = g.constant(Tensor::new(vec![2, 3], x_data.clone()).unwrap());
            let h = e.up.forward(&mut g, x).unwrap();
            let h = g.silu(h);
            let y = e.down.forward(&mut g, h).unwrap();
            g.value(y).to_vec()
        };
        let r = e.refine.unwrap();
        ps.get_mut(r.w).data.fill(0.0);
        ps.get_mut(r.b.unwrap()).data.fill(0.0);
        let mut g = Graph::with_params(&ps);
        let x = g.constant(Tensor::new(vec![2, 3], x_data.clone()).unwrap());
        let y = expert_forward(&mut g, x, &e).unwrap();
        assert_eq!(g.value(y), main_only.as_slice());

        for l in [e.up, e.down] {
            ps.get_mut(l.w).data.fill(0.0);
            ps.get_mut(l.b.unwrap()).data.fill(0.0);
        }
        ps.get_mut(r.w).data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut g = Graph::with_params(&ps);
        let x = g.constant(Tensor::new(vec![2, 3], x_data.clone()).unwrap());
        let y = expert_forward(&mut g, x, &e).unwrap();
        assert_eq!(g.value(y), x_data.as_slice());
    }

    #[test]
    fn shared_only_when_experts_vanish() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MoeParams::new(&mut ps, "moe", 3, cfg(3, 2, ExpertKind::Vanilla, true), &mut rng);
        for e in &p.experts {
            ps.get_mut(e.down.w).data.fill(0.0);
            ps.get_mut(e.down.b.unwrap()).data.fill(0.0);
        }
        let mut g = Graph::with_params(&ps);
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 0.3, 0.3, 0.9]).unwrap());
        let r = route(&mut g, x, &p, None, None).unwrap();
        let y = moe_forward(&mut g, x, &r, &p, None).unwrap();
        let s = expert_forward(&mut g, x, p.shared.as_ref().unwrap()).unwrap();
        assert_eq!(g.value(y), g.value(s));
    }

    #[test]
    fn balance_examples() {
        let mut g = Graph::new();
        let probs = g.constant(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.6, 0.4]).unwrap());
        let l = load_balance_loss(&mut g, probs, &[0, 0], 1).unwrap();
        assert!((g.scalar(l) - 1.5).abs() < 1e-15);
        let uni = g.constant(Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap());
        let l = load_balance_loss(&mut g, uni, &[0, 1, 0, 3, 2, 1], 2).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_conservation() {
        assert_eq!(usage_histogram(std::iter::empty::<&[usize]>(), 4), vec![0; 4]);
        let sel = vec![vec![0usize, 1, 2]; 10];
        let h = usage_histogram(sel.iter().map(|s| s.as_slice()), 5);
        assert_eq!(h, vec![10, 10, 10, 0, 0]);
        assert_eq!(h.iter().sum::<u64>(), 30);
    }

    #[test]
    fn usage_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        write_usage_csv(&path, &[("uniform".into(), vec![3, 1])]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "distribution,expert_index,count,frequency\nuniform,0,3,0.75\nuniform,1,1,0.25\n");
    }
}
