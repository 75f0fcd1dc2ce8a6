use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Problem {
    #[serde(rename = "TSP")]
    Tsp,
    #[serde(rename = "CVRP")]
    Cvrp,
}

impl std::str::FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(Problem::Tsp),
            "cvrp" => Ok(Problem::Cvrp),
            _ => Err(Error::Config(format!("unknown problem `{s}` (expected tsp or cvrp)"))),
        }
    }
}

/// Spatial family a set of node coordinates was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistLabel {
    Uniform,
    Cluster,
    Mixed,
    Explosion,
    Expansion,
    Grid,
    Implosion,
    External,
}

impl DistLabel {
    pub const SYNTHETIC: [DistLabel; 7] = [
        DistLabel::Uniform,
        DistLabel::Cluster,
        DistLabel::Mixed,
        DistLabel::Explosion,
        DistLabel::Expansion,
        DistLabel::Grid,
        DistLabel::Implosion,
    ];

    /// The in-distribution training families, in class-index order.
    pub const TRAINING: [DistLabel; 3] = [DistLabel::Uniform, DistLabel::Cluster, DistLabel::Mixed];

    /// Class index among the training families.
    pub fn class_index(self) -> Option<usize> {
        Self::TRAINING.iter().position(|&d| d == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            DistLabel::Uniform => "uniform",
            DistLabel::Cluster => "cluster",
            DistLabel::Mixed => "mixed",
            DistLabel::Explosion => "explosion",
            DistLabel::Expansion => "expansion",
            DistLabel::Grid => "grid",
            DistLabel::Implosion => "implosion",
            DistLabel::External => "external",
        }
    }
}

impl std::fmt::Display for DistLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::SYNTHETIC
            .into_iter()
            .chain([DistLabel::External])
            .find(|d| d.name() == lower)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::SYNTHETIC.iter().map(|d| d.name()).collect();
                Error::Config(format!("unknown family `{s}`; valid families: {}", valid.join(", ")))
            })
    }
}

/// A routing instance in the unit square.
///
/// For CVRP, `coords[0]` is the depot and `demands[i - 1]` belongs to node
/// `i`; demands are stored normalised by `capacity`. For TSP there is no
/// depot slot and `demands` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub problem: Problem,
    pub coords: Vec<[f64; 2]>,
    pub demands: Vec<f64>,
    pub capacity: Option<f64>,
    pub dist_label: DistLabel,
    pub seed: u64,
}

impl Instance {
    pub fn tsp(coords: Vec<[f64; 2]>, dist_label: DistLabel, seed: u64) -> Self {
        Self {
            problem: Problem::Tsp,
            coords,
            demands: Vec::new(),
            capacity: None,
            dist_label,
            seed,
        }
    }

    pub fn cvrp(coords: Vec<[f64; 2]>, demands: Vec<f64>, capacity: f64, dist_label: DistLabel, seed: u64) -> Self {
        Self {
            problem: Problem::Cvrp,
            coords,
            demands,
            capacity: Some(capacity),
            dist_label,
            seed,
        }
    }

    /// Customer count.
    pub fn n(&self) -> usize {
        match self.problem {
            Problem::Tsp => self.coords.len(),
            Problem::Cvrp => self.coords.len().saturating_sub(1),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Normalised demand of node `i` (0 for the depot and for TSP).
    pub fn demand(&self, node: usize) -> f64 {
        match self.problem {
            Problem::Cvrp if node > 0 => self.demands[node - 1],
            _ => 0.0,
        }
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        euclid(self.coords[a], self.coords[b])
    }

    pub fn distance_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.coords.len();
        (0..n).map(|i| (0..n).map(|j| self.dist(i, j)).collect()).collect()
    }

    pub fn validate_fields(&self) -> Result<()> {
        if self.coords.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("coordinates must lie in [0,1]^2".into()));
        }
        if self.problem == Problem::Cvrp {
            if self.capacity.is_none_or(|q| q <= 0.0) {
                return Err(Error::Config("CVRP capacity must be positive".into()));
            }
            if self.demands.len() + 1 != self.coords.len() {
                return Err(Error::Config(format!(
                    "CVRP with {} nodes needs {} demands, got {}",
                    self.coords.len(),
                    self.coords.len().saturating_sub(1),
                    self.demands.len()
                )));
            }
            if self.demands.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
                return Err(Error::Config("normalised demands must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
