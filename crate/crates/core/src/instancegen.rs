//! Instance generators for the seven spatial families, plus the JSONL
//! dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instance::{DistLabel, Instance, Problem};
use crate::rng;

const COORD_STREAM: u64 = 1;
const DEPOT_STREAM: u64 = 2;
const DEMAND_STREAM: u64 = 3;
const MAX_RESAMPLE: usize = 100_000;

/// Family-specific knobs. Defaults are the standard recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyParams {
    pub clusters_min: usize,
    pub clusters_max: usize,
    pub sigma: f64,
    /// Mutation radius for explosion/implosion.
    pub radius: f64,
    pub explosion_rate: f64,
    pub implosion_factor: f64,
    pub expansion_push: f64,
    pub grid_fraction: f64,
    /// Lattice resolution; `None` means `ceil(sqrt(n))`.
    pub grid_resolution: Option<usize>,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            clusters_min: 3,
            clusters_max: 8,
            sigma: 0.07,
            radius: 0.3,
            explosion_rate: 10.0,
            implosion_factor: 0.25,
            expansion_push: 0.2,
            grid_fraction: 0.7,
            grid_resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub family: DistLabel,
    pub n: usize,
    #[serde(default)]
    pub params: FamilyParams,
}

impl DistributionSpec {
    pub fn new(family: DistLabel, n: usize) -> Self {
        Self {
            family,
            n,
            params: FamilyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.family == DistLabel::External {
            return bad("the external family cannot be generated");
        }
        if p.clusters_min == 0 || p.clusters_min > p.clusters_max {
            return bad("cluster count range must satisfy 1 <= min <= max");
        }
        if !(p.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..=0.5).contains(&p.radius) {
            return bad("radius must lie in [0, 0.5]");
        }
        if !(p.explosion_rate > 0.0) {
            return bad("explosion rate must be positive");
        }
        if !(0.0..=1.0).contains(&p.implosion_factor) {
            return bad("implosion factor must lie in [0, 1]");
        }
        if !(p.expansion_push >= 0.0) {
            return bad("expansion push must be non-negative");
        }
        if !(0.0..=1.0).contains(&p.grid_fraction) {
            return bad("grid fraction must lie in [0, 1]");
        }
        if p.grid_resolution.is_some_and(|g| g < 2) {
            return bad("grid resolution must be at least 2");
        }
        Ok(())
    }
}

/// Vehicle capacity for `n` customers: 30/40/50 at n = 20/50/100, linear in
/// between, clamped below 20 and extrapolated above 100.
pub fn capacity_for(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Config("demand profile needs n >= 1".into()));
    }
    let n = n as f64;
    Ok(if n <= 20.0 {
        30.0
    } else if n <= 50.0 {
        30.0 + (n - 20.0) * 10.0 / 30.0
    } else {
        40.0 + (n - 50.0) * 10.0 / 50.0
    })
}

/// Integer demands uniform on `{1, ..., 9}`.
#[derive(Debug, Clone, Copy)]
pub struct DemandSampler;

impl DemandSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(1..=9) as f64
    }
}

pub fn demand_profile(n: usize) -> Result<(f64, DemandSampler)> {
    Ok((capacity_for(n)?, DemandSampler))
}

fn uniform_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random::<f64>(), rng.random::<f64>()]
}

fn inside(p: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

fn clustered(rng: &mut ChaCha8Rng, count: usize, p: &FamilyParams) -> Vec<[f64; 2]> {
    let k = rng.random_range(p.clusters_min..=p.clusters_max);
    let centers: Vec<[f64; 2]> = (0..k).map(|_| uniform_point(rng)).collect();
    let noise = Normal::new(0.0, p.sigma).expect("sigma validated");
    (0..count)
        .map(|_| {
            let c = centers[rng.random_range(0..k)];
            loop {
                let q = [c[0] + noise.sample(rng), c[1] + noise.sample(rng)];
                if inside(q) {
                    break q;
                }
            }
        })
        .collect()
}

fn unit(v: [f64; 2]) -> ([f64; 2], f64) {
    let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if r == 0.0 {
        ([1.0, 0.0], 0.0)
    } else {
        ([v[0] / r, v[1] / r], r)
    }
}

/// Customer (or TSP node) coordinates for one family.
pub fn family_coords(spec: &DistributionSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = spec.n;
    let p = &spec.params;
    match spec.family {
        DistLabel::Uniform | DistLabel::External => (0..n).map(|_| uniform_point(rng)).collect(),
        DistLabel::Cluster => clustered(rng, n, p),
        DistLabel::Mixed => {
            let n_uniform = n.div_ceil(2);
            let mut pts: Vec<[f64; 2]> = (0..n_uniform).map(|_| uniform_point(rng)).collect();
            pts.extend(clustered(rng, n - n_uniform, p));
            pts.shuffle(rng);
            pts
        }
        DistLabel::Explosion => {
            let mut pts: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng)).collect();
            let c = uniform_point(rng);
            let exp = Exp::new(p.explosion_rate).expect("rate validated");
            for q in &mut pts {
                let (u, r) = unit([q[0] - c[0], q[1] - c[1]]);
                if r < p.radius {
                    for _ in 0..MAX_RESAMPLE {
                        let s = p.radius + exp.sample(rng);
                        let cand = [c[0] + s * u[0], c[1] + s * u[1]];
                        if inside(cand) {
                            *q = cand;
                            break;
                        }
                    }
                }
            }
            pts
        }
        DistLabel::Implosion => {
            let mut pts: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng)).collect();
            let c = uniform_point(rng);
            for q in &mut pts {
                let (_, r) = unit([q[0] - c[0], q[1] - c[1]]);
                if r < p.radius {
                    *q = [
                        c[0] + p.implosion_factor * (q[0] - c[0]),
                        c[1] + p.implosion_factor * (q[1] - c[1]),
                    ];
                }
            }
            pts
        }
        DistLabel::Expansion => {
            let c = uniform_point(rng);
            let push = |q: [f64; 2]| {
                let (u, r) = unit([q[0] - c[0], q[1] - c[1]]);
                let s = (r + p.expansion_push).min(1.0);
                [c[0] + s * u[0], c[1] + s * u[1]]
            };
            (0..n)
                .map(|_| {
                    let mut last = uniform_point(rng);
                    for _ in 0..MAX_RESAMPLE {
                        let cand = push(last);
                        if inside(cand) {
                            return cand;
                        }
                        last = uniform_point(rng);
                    }
                    last
                })
                .collect()
        }
        DistLabel::Grid => {
            let mut pts: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng)).collect();
            let g = p.grid_resolution.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).max(2);
            let step = (g - 1) as f64;
            let snapped = (p.grid_fraction * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            for &i in &order[..snapped.min(n)] {
                let q = pts[i];
                pts[i] = [(q[0] * step).round() / step, (q[1] * step).round() / step];
            }
            pts
        }
    }
}

/// Deterministic in `(spec, problem, seed)`.
pub fn generate_instance(spec: &DistributionSpec, problem: Problem, seed: u64) -> Result<Instance> {
    spec.validate()?;
    let customers = family_coords(spec, &mut rng::stream(seed, COORD_STREAM));
    Ok(match problem {
        Problem::Tsp => Instance::tsp(customers, spec.family, seed),
        Problem::Cvrp => {
            let (capacity, sampler) = demand_profile(spec.n)?;
            let depot = uniform_point(&mut rng::stream(seed, DEPOT_STREAM));
            let mut drng = rng::stream(seed, DEMAND_STREAM);
            let demands = (0..spec.n).map(|_| sampler.sample(&mut drng) / capacity).collect();
            let mut coords = Vec::with_capacity(spec.n + 1);
            coords.push(depot);
            coords.extend(customers);
            Instance::cvrp(coords, demands, capacity, spec.family, seed)
        }
    })
}

/// `count` instances with per-index seeds derived from `seed`.
pub fn generate_many(spec: &DistributionSpec, problem: Problem, count: usize, seed: u64) -> Result<Vec<Instance>> {
    (0..count)
        .map(|i| generate_instance(spec, problem, rng::derive(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub count: usize,
    /// Hex SHA-256 of the written bytes.
    pub checksum: String,
}

#[derive(Serialize)]
struct LineOut<'a> {
    problem: Problem,
    n: usize,
    coords: &'a [[f64; 2]],
    #[serde(skip_serializing_if = "Option::is_none")]
    demands: Option<&'a [f64]>,
    capacity: Option<f64>,
    dist_label: DistLabel,
    seed: u64,
}

#[derive(Deserialize)]
struct LineIn {
    problem: Problem,
    n: usize,
    coords: Vec<[f64; 2]>,
    #[serde(default)]
    demands: Option<Vec<f64>>,
    #[serde(default)]
    capacity: Option<f64>,
    dist_label: DistLabel,
    seed: u64,
}

/// One JSONL record. Floats use shortest round-trip formatting and are
/// parsed back bit-exactly.
pub fn to_json_line(inst: &Instance) -> Result<String> {
    let line = LineOut {
        problem: inst.problem,
        n: inst.n(),
        coords: &inst.coords,
        demands: (inst.problem == Problem::Cvrp).then_some(inst.demands.as_slice()),
        capacity: inst.capacity,
        dist_label: inst.dist_label,
        seed: inst.seed,
    };
    Ok(serde_json::to_string(&line)?)
}

pub fn from_json_line(line: &str) -> Result<Instance> {
    let raw: LineIn = serde_json::from_str(line)?;
    let inst = Instance {
        problem: raw.problem,
        coords: raw.coords,
        demands: raw.demands.unwrap_or_default(),
        capacity: raw.capacity,
        dist_label: raw.dist_label,
        seed: raw.seed,
    };
    if inst.n() != raw.n {
        return Err(Error::Config(format!("record declares n = {} but has {} customers", raw.n, inst.n())));
    }
    inst.validate_fields()?;
    Ok(inst)
}

pub fn write_dataset(instances: &[Instance], path: &Path) -> Result<DatasetSummary> {
    let mut bytes = Vec::new();
    for inst in instances {
        bytes.extend_from_slice(to_json_line(inst)?.as_bytes());
        bytes.push(b'\n');
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(DatasetSummary {
        count: instances.len(),
        checksum: sha256_hex(&bytes),
    })
}

pub fn generate_dataset(
    spec: &DistributionSpec,
    problem: Problem,
    count: usize,
    seed: u64,
    path: &Path,
) -> Result<DatasetSummary> {
    if count < 1 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    write_dataset(&generate_many(spec, problem, count, seed)?, path)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
