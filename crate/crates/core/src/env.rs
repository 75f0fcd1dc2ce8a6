//! Routing MDP: state, feasibility mask, transitions, costing and the eight
//! dihedral augmentations of the unit square.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::instance::{Instance, Problem};

/// Tolerance for capacity comparisons on normalised demands.
pub const CAPACITY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("node {0} is out of range")]
    OutOfRange(usize),
    #[error("node {0} is visited more than once")]
    Duplicate(usize),
    #[error("node {0} is never visited")]
    Missing(usize),
    #[error("subtour {subtour} carries {load_over_capacity:.4} x capacity")]
    Capacity { subtour: usize, load_over_capacity: f64 },
    #[error("CVRP tour must start and end at the depot")]
    DepotEndpoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    pub visited: Vec<bool>,
    pub current: usize,
    /// In capacity units: `Q` after a depot visit.
    pub remaining_capacity: f64,
    pub partial_tour: Vec<usize>,
    pub done: bool,
}

impl RolloutState {
    /// TSP: empty tour, no current node. CVRP: at the depot with full load.
    pub fn new(inst: &Instance) -> Self {
        let mut s = Self {
            visited: vec![false; inst.num_nodes()],
            current: 0,
            remaining_capacity: inst.capacity.unwrap_or(0.0),
            partial_tour: Vec::new(),
            done: false,
        };
        if inst.problem == Problem::Cvrp {
            s.visited[0] = true;
            s.partial_tour.push(0);
        }
        s
    }

    fn all_customers_visited(&self) -> bool {
        self.visited.iter().all(|&v| v)
    }
}

pub fn feasible_mask(state: &RolloutState, inst: &Instance) -> Vec<bool> {
    match inst.problem {
        Problem::Tsp => state.visited.iter().map(|v| !v).collect(),
        Problem::Cvrp => {
            let q = inst.capacity.unwrap_or(0.0);
            let mut mask: Vec<bool> = (0..inst.num_nodes())
                .map(|i| i > 0 && !state.visited[i] && inst.demand(i) * q <= state.remaining_capacity + CAPACITY_EPS * q)
                .collect();
            mask[0] = state.current != 0;
            mask
        }
    }
}

pub fn step(state: &RolloutState, action: usize, inst: &Instance) -> Result<RolloutState> {
    if state.done {
        return Err(Error::Infeasible("step on a finished rollout".into()));
    }
    let mask = feasible_mask(state, inst);
    if !mask.get(action).copied().unwrap_or(false) {
        return Err(Error::Infeasible(format!("action {action} is masked")));
    }
    let mut next = state.clone();
    next.partial_tour.push(action);
    next.current = action;
    match inst.problem {
        Problem::Tsp => {
            next.visited[action] = true;
            next.done = next.all_customers_visited();
        }
        Problem::Cvrp => {
            let q = inst.capacity.unwrap_or(0.0);
            if action == 0 {
                next.remaining_capacity = q;
                next.done = next.all_customers_visited();
            } else {
                next.visited[action] = true;
                next.remaining_capacity = (next.remaining_capacity - inst.demand(action) * q).max(0.0);
            }
        }
    }
    Ok(next)
}

pub fn validate(inst: &Instance, tour: &[usize]) -> std::result::Result<(), Violation> {
    let n = inst.num_nodes();
    let mut seen = vec![false; n];
    match inst.problem {
        Problem::Tsp => {
            for &v in tour {
                if v >= n {
                    return Err(Violation::OutOfRange(v));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Violation::Duplicate(v));
                }
            }
        }
        Problem::Cvrp => {
            if tour.first() != Some(&0) || tour.last() != Some(&0) {
                return Err(Violation::DepotEndpoints);
            }
            seen[0] = true;
            let mut load = 0.0;
            let mut subtour = 0;
            for &v in &tour[1..] {
                if v >= n {
                    return Err(Violation::OutOfRange(v));
                }
                if v == 0 {
                    if load > 1.0 + CAPACITY_EPS {
                        return Err(Violation::Capacity { subtour, load_over_capacity: load });
                    }
                    load = 0.0;
                    subtour += 1;
                    continue;
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Violation::Duplicate(v));
                }
                load += inst.demand(v);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(m) => Err(Violation::Missing(m)),
        None => Ok(()),
    }
}

/// Euclidean length without feasibility checks.
pub fn raw_cost(inst: &Instance, tour: &[usize]) -> f64 {
    let mut total: f64 = tour.windows(2).map(|w| inst.dist(w[0], w[1])).sum();
    if inst.problem == Problem::Tsp && tour.len() > 1 {
        total += inst.dist(*tour.last().unwrap(), tour[0]);
    }
    total
}

pub fn tour_cost(inst: &Instance, tour: &[usize]) -> Result<f64> {
    validate(inst, tour).map_err(Error::Invalid)?;
    Ok(raw_cost(inst, tour))
}

pub fn dihedral(p: [f64; 2], k: usize) -> [f64; 2] {
    let [x, y] = p;
    match k {
        0 => [x, y],
        1 => [y, x],
        2 => [x, 1.0 - y],
        3 => [y, 1.0 - x],
        4 => [1.0 - x, y],
        5 => [1.0 - y, x],
        6 => [1.0 - x, 1.0 - y],
        7 => [1.0 - y, 1.0 - x],
        _ => panic!("dihedral index {k} out of range"),
    }
}

/// The eight symmetric copies of `inst`; copy 0 is the identity.
pub fn augment8(inst: &Instance) -> Vec<Instance> {
    (0..8)
        .map(|k| Instance {
            coords: inst.coords.iter().map(|&p| dihedral(p, k)).collect(),
            ..inst.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TourRecord {
    pub instance_seed: u64,
    pub tour: Vec<usize>,
    pub cost: f64,
}
