//! Reference solvers: exact enumeration and dynamic programming for small
//! instances, a deterministic nearest-neighbour + 2-opt heuristic otherwise.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{raw_cost, validate, CAPACITY_EPS};
use crate::error::{Error, Result};
use crate::instance::{Instance, Problem};

pub const BRUTE_LIMIT: usize = 9;
pub const HELD_KARP_LIMIT: usize = 13;
pub const EXACT_CVRP_LIMIT: usize = 8;
/// Minimum strict decrease for a local-search move to be accepted.
pub const IMPROVE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Brute,
    HeldKarp,
    Nn2opt,
    External,
}

impl Method {
    pub fn is_exact(self) -> bool {
        matches!(self, Method::Brute | Method::HeldKarp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceResult {
    pub cost: f64,
    pub tour: Vec<usize>,
    pub method: Method,
    pub exact: bool,
}

impl ReferenceResult {
    fn new(inst: &Instance, tour: Vec<usize>, method: Method) -> Result<Self> {
        validate(inst, &tour).map_err(Error::Invalid)?;
        Ok(Self { cost: raw_cost(inst, &tour), tour, method, exact: method.is_exact() })
    }
}

fn require(inst: &Instance, problem: Problem, solver: &'static str, limit: usize) -> Result<()> {
    if inst.problem != problem {
        return Err(Error::Config(format!("{solver} expects a {problem:?} instance")));
    }
    if inst.n() > limit {
        return Err(Error::TooLarge { solver, n: inst.n(), limit });
    }
    Ok(())
}

/// Enumerates every tour with node 0 fixed first.
pub fn brute_force_tsp(inst: &Instance) -> Result<ReferenceResult> {
    require(inst, Problem::Tsp, "brute_force_tsp", BRUTE_LIMIT)?;
    let n = inst.n();
    let d = inst.distance_matrix();
    let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
    let mut path = vec![0];
    let mut used = vec![false; n];
    used[0] = true;
    fn rec(d: &[Vec<f64>], path: &mut Vec<usize>, used: &mut [bool], len: f64, best: &mut (f64, Vec<usize>)) {
        let n = used.len();
        let last = *path.last().unwrap();
        if path.len() == n {
            let total = len + d[last][path[0]];
            if total < best.0 {
                *best = (total, path.clone());
            }
            return;
        }
        for v in 1..n {
            if !used[v] {
                used[v] = true;
                path.push(v);
                rec(d, path, used, len + d[last][v], best);
                path.pop();
                used[v] = false;
            }
        }
    }
    if n > 1 {
        rec(&d, &mut path, &mut used, 0.0, &mut best);
    }
    ReferenceResult::new(inst, best.1, Method::Brute)
}

/// Shortest Hamiltonian paths from `start` over every subset of `nodes`.
/// Returns `dp[mask][j]` and the predecessor table.
fn subset_paths(d: &[Vec<f64>], start: usize, nodes: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let k = nodes.len();
    let full = 1usize << k;
    let mut dp = vec![vec![f64::INFINITY; k]; full];
    let mut parent = vec![vec![usize::MAX; k]; full];
    for j in 0..k {
        dp[1 << j][j] = d[start][nodes[j]];
    }
    for mask in 1..full {
        for j in 0..k {
            if mask & (1 << j) == 0 || !dp[mask][j].is_finite() {
                continue;
            }
            let base = dp[mask][j];
            for t in 0..k {
                if mask & (1 << t) != 0 {
                    continue;
                }
                let next = mask | (1 << t);
                let c = base + d[nodes[j]][nodes[t]];
                if c < dp[next][t] {
                    dp[next][t] = c;
                    parent[next][t] = j;
                }
            }
        }
    }
    (dp, parent)
}

fn unwind(parent: &[Vec<usize>], nodes: &[usize], mut mask: usize, mut j: usize) -> Vec<usize> {
    let mut rev = Vec::new();
    loop {
        rev.push(nodes[j]);
        let p = parent[mask][j];
        mask &= !(1 << j);
        if p == usize::MAX {
            break;
        }
        j = p;
    }
    rev.reverse();
    rev
}

pub fn held_karp_tsp(inst: &Instance) -> Result<ReferenceResult> {
    require(inst, Problem::Tsp, "held_karp_tsp", HELD_KARP_LIMIT)?;
    let n = inst.n();
    if n <= 1 {
        return ReferenceResult::new(inst, (0..n).collect(), Method::HeldKarp);
    }
    let d = inst.distance_matrix();
    let nodes: Vec<usize> = (1..n).collect();
    let (dp, parent) = subset_paths(&d, 0, &nodes);
    let full = (1 << nodes.len()) - 1;
    let (j, _) = (0..nodes.len())
        .map(|j| (j, dp[full][j] + d[nodes[j]][0]))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let mut tour = vec![0];
    tour.extend(unwind(&parent, &nodes, full, j));
    ReferenceResult::new(inst, tour, Method::HeldKarp)
}

/// Optimal CVRP by partitioning customers into capacity-feasible subsets,
/// each routed optimally by Held–Karp from the depot.
pub fn exact_cvrp_small(inst: &Instance) -> Result<ReferenceResult> {
    require(inst, Problem::Cvrp, "exact_cvrp_small", EXACT_CVRP_LIMIT)?;
    let n = inst.n();
    let d = inst.distance_matrix();
    let nodes: Vec<usize> = (1..=n).collect();
    let (dp, parent) = subset_paths(&d, 0, &nodes);
    let full = (1usize << n) - 1;
    // Closed route cost and best last customer per subset.
    let mut route = vec![(f64::INFINITY, 0usize); full + 1];
    for (mask, slot) in route.iter_mut().enumerate().skip(1) {
        let load: f64 = (0..n).filter(|j| mask & (1 << j) != 0).map(|j| inst.demand(j + 1)).sum();
        if load > 1.0 + CAPACITY_EPS {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) != 0 {
                let c = dp[mask][j] + d[nodes[j]][0];
                if c < slot.0 {
                    *slot = (c, j);
                }
            }
        }
    }
    let mut best = vec![f64::INFINITY; full + 1];
    let mut choice = vec![0usize; full + 1];
    best[0] = 0.0;
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg();
        let rest = mask & !low;
        // Subsets of `mask` containing its lowest customer.
        let mut sub = rest;
        loop {
            let s = sub | low;
            let c = route[s].0 + best[mask & !s];
            if c < best[mask] {
                best[mask] = c;
                choice[mask] = s;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    if !best[full].is_finite() {
        return Err(Error::Infeasible("a customer demand exceeds capacity".into()));
    }
    let mut tour = vec![0];
    let mut mask = full;
    while mask != 0 {
        let s = choice[mask];
        tour.extend(unwind(&parent, &nodes, s, route[s].1));
        tour.push(0);
        mask &= !s;
    }
    ReferenceResult::new(inst, tour, Method::Brute)
}

/// Nearest-neighbour construction, ties broken by lower index. CVRP returns
/// to the depot whenever no unvisited customer fits.
pub fn nearest_neighbor(inst: &Instance) -> Vec<usize> {
    let nn = inst.num_nodes();
    match inst.problem {
        Problem::Tsp => {
            if nn == 0 {
                return Vec::new();
            }
            let mut visited = vec![false; nn];
            let mut tour = vec![0];
            visited[0] = true;
            while tour.len() < nn {
                let cur = *tour.last().unwrap();
                let next = nearest(inst, cur, (0..nn).filter(|&v| !visited[v]));
                visited[next] = true;
                tour.push(next);
            }
            tour
        }
        Problem::Cvrp => {
            let mut visited = vec![false; nn];
            let mut tour = vec![0];
            let mut left = 1.0;
            let mut remaining = nn - 1;
            while remaining > 0 {
                let cur = *tour.last().unwrap();
                let fits = (1..nn).filter(|&v| !visited[v] && inst.demand(v) <= left + CAPACITY_EPS);
                let cands: Vec<usize> = fits.collect();
                if cands.is_empty() {
                    tour.push(0);
                    left = 1.0;
                    continue;
                }
                let next = nearest(inst, cur, cands.into_iter());
                visited[next] = true;
                left -= inst.demand(next);
                remaining -= 1;
                tour.push(next);
            }
            tour.push(0);
            tour
        }
    }
}

fn nearest(inst: &Instance, from: usize, cands: impl Iterator<Item = usize>) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for v in cands {
        let c = inst.dist(from, v);
        if c < best.1 {
            best = (v, c);
        }
    }
    best.0
}

/// First-improvement 2-opt on a cyclic tour.
fn two_opt_cycle(inst: &Instance, t: &mut [usize]) {
    let n = t.len();
    if n < 4 {
        return;
    }
    'scan: loop {
        for i in 0..n - 1 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b, c, e) = (t[i], t[i + 1], t[j], t[(j + 1) % n]);
                let delta = inst.dist(a, c) + inst.dist(b, e) - inst.dist(a, b) - inst.dist(c, e);
                if delta < -IMPROVE_EPS {
                    t[i + 1..=j].reverse();
                    continue 'scan;
                }
            }
        }
        break;
    }
}

/// First-improvement 2-opt on a path with fixed endpoints. Returns whether
/// anything changed.
fn two_opt_path(inst: &Instance, t: &mut [usize]) -> bool {
    let n = t.len();
    let mut changed = false;
    'scan: loop {
        for i in 0..n.saturating_sub(3) {
            for j in i + 2..n - 1 {
                let (a, b, c, e) = (t[i], t[i + 1], t[j], t[j + 1]);
                let delta = inst.dist(a, c) + inst.dist(b, e) - inst.dist(a, b) - inst.dist(c, e);
                if delta < -IMPROVE_EPS {
                    t[i + 1..=j].reverse();
                    changed = true;
                    continue 'scan;
                }
            }
        }
        return changed;
    }
}

/// Moves one customer to another route when that strictly shortens the
/// total. Routes include both depot endpoints.
fn relocate_once(inst: &Instance, routes: &mut Vec<Vec<usize>>) -> bool {
    let loads: Vec<f64> = routes.iter().map(|r| r.iter().map(|&v| inst.demand(v)).sum()).collect();
    for r1 in 0..routes.len() {
        for p in 1..routes[r1].len() - 1 {
            let (prev, v, next) = (routes[r1][p - 1], routes[r1][p], routes[r1][p + 1]);
            let removal = inst.dist(prev, next) - inst.dist(prev, v) - inst.dist(v, next);
            for r2 in 0..routes.len() {
                if r2 == r1 || loads[r2] + inst.demand(v) > 1.0 + CAPACITY_EPS {
                    continue;
                }
                for q in 0..routes[r2].len() - 1 {
                    let (a, b) = (routes[r2][q], routes[r2][q + 1]);
                    let insertion = inst.dist(a, v) + inst.dist(v, b) - inst.dist(a, b);
                    if removal + insertion < -IMPROVE_EPS {
                        routes[r1].remove(p);
                        routes[r2].insert(q + 1, v);
                        routes.retain(|r| r.len() > 2);
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn split_routes(tour: &[usize]) -> Vec<Vec<usize>> {
    let mut routes = Vec::new();
    let mut cur = vec![0];
    for &v in &tour[1..] {
        cur.push(v);
        if v == 0 {
            if cur.len() > 2 {
                routes.push(std::mem::replace(&mut cur, vec![0]));
            } else {
                cur = vec![0];
            }
        }
    }
    routes
}

fn join_routes(routes: &[Vec<usize>]) -> Vec<usize> {
    let mut tour = vec![0];
    for r in routes {
        tour.extend_from_slice(&r[1..]);
    }
    tour
}

/// Deterministic heuristic reference: nearest neighbour, then local search
/// to a 2-opt (and, for CVRP, relocation) local optimum.
pub fn nn_2opt(inst: &Instance) -> Result<ReferenceResult> {
    let mut tour = nearest_neighbor(inst);
    match inst.problem {
        Problem::Tsp => two_opt_cycle(inst, &mut tour),
        Problem::Cvrp => {
            let mut routes = split_routes(&tour);
            loop {
                let mut changed = false;
                for r in routes.iter_mut() {
                    changed |= two_opt_path(inst, r);
                }
                changed |= relocate_once(inst, &mut routes);
                if !changed {
                    break;
                }
            }
            tour = join_routes(&routes);
        }
    }
    ReferenceResult::new(inst, tour, Method::Nn2opt)
}

/// Best available reference: exact when the instance is small enough.
pub fn reference(inst: &Instance) -> Result<ReferenceResult> {
    match inst.problem {
        Problem::Tsp if inst.n() <= HELD_KARP_LIMIT => held_karp_tsp(inst),
        Problem::Cvrp if inst.n() <= EXACT_CVRP_LIMIT => exact_cvrp_small(inst),
        _ => nn_2opt(inst),
    }
}

pub fn gap(model_cost: f64, ref_cost: f64) -> f64 {
    (model_cost - ref_cost) / ref_cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    pub dataset_checksum: String,
    pub instance_index: usize,
    pub method: Method,
    pub cost: f64,
}

pub fn read_reference_cache(path: &Path) -> Result<Vec<CacheRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn write_reference_cache(path: &Path, rows: &[CacheRow]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reference costs for a dataset, reusing `cache` entries with a matching
/// checksum and appending fresh ones.
pub fn cached_references(instances: &[Instance], checksum: &str, cache: Option<&Path>) -> Result<Vec<f64>> {
    let mut rows = match cache {
        Some(p) if p.exists() => read_reference_cache(p)?,
        _ => Vec::new(),
    };
    let known: HashMap<usize, f64> =
        rows.iter().filter(|r| r.dataset_checksum == checksum).map(|r| (r.instance_index, r.cost)).collect();
    let mut out = Vec::with_capacity(instances.len());
    let mut fresh = false;
    for (i, inst) in instances.iter().enumerate() {
        match known.get(&i) {
            Some(&c) => out.push(c),
            None => {
                let r = reference(inst)?;
                rows.push(CacheRow { dataset_checksum: checksum.to_string(), instance_index: i, method: r.method, cost: r.cost });
                out.push(r.cost);
                fresh = true;
            }
        }
    }
    if let (Some(p), true) = (cache, fresh) {
        write_reference_cache(p, &rows)?;
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    seed: u64,
    cost: f64,
}

/// External reference costs keyed by instance seed, from a `seed,cost` CSV.
pub fn read_external_costs(path: &Path) -> Result<HashMap<u64, f64>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = HashMap::new();
    for r in rd.deserialize::<ExternalRow>() {
        let r = r.map_err(csv_err)?;
        out.insert(r.seed, r.cost);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::DistLabel;
    use crate::instancegen::{generate_instance, DistributionSpec};

    fn tsp(coords: Vec<[f64; 2]>) -> Instance {
        Instance::tsp(coords, DistLabel::Uniform, 0)
    }

    #[test]
    fn tiny_tsp() {
        let tri = tsp(vec![[0.0, 0.0], [0.3, 0.0], [0.0, 0.4]]);
        assert!((brute_force_tsp(&tri).unwrap().cost - 1.2).abs() < 1e-12);
        let sq = tsp(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!((brute_force_tsp(&sq).unwrap().cost - 4.0).abs() < 1e-12);
        assert!((held_karp_tsp(&sq).unwrap().cost - 4.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_sweep() {
        let line = tsp(vec![[0.1, 0.5], [0.9, 0.5], [0.3, 0.5], [0.6, 0.5], [0.2, 0.5]]);
        assert!((held_karp_tsp(&line).unwrap().cost - 1.6).abs() < 1e-12);
    }

    #[test]
    fn refuses_large() {
        let big = tsp(vec![[0.5, 0.5]; 10]);
        assert!(matches!(brute_force_tsp(&big), Err(Error::TooLarge { limit: 9, .. })));
        let big = tsp(vec![[0.5, 0.5]; 14]);
        assert!(matches!(held_karp_tsp(&big), Err(Error::TooLarge { limit: 13, .. })));
    }

    #[test]
    fn exact_cvrp_cases() {
        let one = Instance::cvrp(vec![[0.0, 0.0], [0.3, 0.4]], vec![0.2], 10.0, DistLabel::Uniform, 0);
        assert!((exact_cvrp_small(&one).unwrap().cost - 1.0).abs() < 1e-12);
        let two = Instance::cvrp(vec![[0.5, 0.5], [0.5, 0.7], [0.5, 0.8]], vec![1.0, 1.0], 10.0, DistLabel::Uniform, 0);
        let r = exact_cvrp_small(&two).unwrap();
        assert_eq!(r.tour.iter().filter(|&&v| v == 0).count(), 3);
        assert!((r.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heuristics_bracket_exact_cvrp() {
        let spec = DistributionSpec::new(DistLabel::Uniform, 8);
        for seed in 0..30 {
            let inst = generate_instance(&spec, Problem::Cvrp, seed).unwrap();
            let exact = exact_cvrp_small(&inst).unwrap().cost;
            let nn = raw_cost(&inst, &nearest_neighbor(&inst));
            let ls = nn_2opt(&inst).unwrap().cost;
            assert!(exact <= ls + 1e-12 && ls <= nn + 1e-12, "seed {seed}: {exact} {ls} {nn}");
        }
    }

    #[test]
    fn gap_values() {
        assert_eq!(gap(2.0, 2.0), 0.0);
        let reference = 15.8129 / 1.008793;
        assert!((gap(15.8129, reference) - 0.008793).abs() < 1e-9);
        assert!((gap(15.81, 15.68) - 0.13 / 15.68).abs() < 1e-15);
        assert!(gap(1.0, 1.1) < 0.0);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.csv");
        let spec = DistributionSpec::new(DistLabel::Cluster, 6);
        let insts: Vec<_> = (0..3).map(|s| generate_instance(&spec, Problem::Tsp, s).unwrap()).collect();
        let a = cached_references(&insts, "abc", Some(&path)).unwrap();
        let rows = read_reference_cache(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].method, Method::HeldKarp);
        let b = cached_references(&insts, "abc", Some(&path)).unwrap();
        assert_eq!(a, b);
    }
}
