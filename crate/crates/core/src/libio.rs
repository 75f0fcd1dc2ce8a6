//! TSPLIB / CVRPLIB reader for `EUC_2D` instances.

use crate::error::{Error, Result};
use crate::instance::{DistLabel, Instance, Problem};

#[derive(Debug, Clone, PartialEq)]
pub struct LibHeader {
    pub name: String,
    pub problem: Problem,
    pub dimension: usize,
    pub edge_weight_type: String,
    pub capacity: Option<f64>,
}

/// Parsed benchmark with indices remapped to 0-based and, for CVRP, the depot
/// moved to slot 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LibInstance {
    pub header: LibHeader,
    pub coords: Vec<[f64; 2]>,
    pub demands: Vec<f64>,
    /// Original (1-based) id of the depot, CVRP only.
    pub depot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRecord {
    pub offset: [f64; 2],
    pub scale: f64,
}

impl ScaleRecord {
    pub fn to_original(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.scale + self.offset[0], p[1] * self.scale + self.offset[1]]
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

enum Section {
    Header,
    Coords,
    Demands,
    Depot,
    Skip,
}

pub fn parse_lib(text: &str) -> Result<LibInstance> {
    let mut name = String::new();
    let mut kind: Option<Problem> = None;
    let mut dimension: Option<usize> = None;
    let mut ewt: Option<String> = None;
    let mut capacity: Option<f64> = None;

    let mut coords: Vec<(usize, [f64; 2])> = Vec::new();
    let mut demands: Vec<(usize, f64)> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut section = Section::Header;
    let mut section_start: [Option<usize>; 3] = [None; 3];

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        match upper.as_str() {
            "EOF" => break,
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                section_start[0] = Some(lineno);
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                section_start[1] = Some(lineno);
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depot;
                section_start[2] = Some(lineno);
                continue;
            }
            s if s.ends_with("_SECTION") => {
                section = Section::Skip;
                continue;
            }
            _ => {}
        }
        if let Some((key, value)) = line.split_once(':') {
            if !key.trim().chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-') {
                let value = value.trim();
                section = Section::Header;
                match key.trim().to_ascii_uppercase().as_str() {
                    "NAME" => name = value.to_string(),
                    "TYPE" => {
                        kind = Some(match value.to_ascii_uppercase().as_str() {
                            "TSP" => Problem::Tsp,
                            "CVRP" => Problem::Cvrp,
                            other => return Err(Error::Unsupported(format!("problem type {other}"))),
                        })
                    }
                    "DIMENSION" => {
                        dimension = Some(value.parse().map_err(|_| parse_err(lineno, "bad DIMENSION"))?)
                    }
                    "EDGE_WEIGHT_TYPE" => ewt = Some(value.to_ascii_uppercase()),
                    "CAPACITY" => capacity = Some(value.parse().map_err(|_| parse_err(lineno, "bad CAPACITY"))?),
                    _ => {}
                }
                continue;
            }
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Coords => {
                if fields.len() < 3 {
                    return Err(parse_err(lineno, "coordinate line needs `id x y`"));
                }
                let id = fields[0].parse().map_err(|_| parse_err(lineno, "bad node id"))?;
                let x: f64 = fields[1].parse().map_err(|_| parse_err(lineno, "bad x"))?;
                let y: f64 = fields[2].parse().map_err(|_| parse_err(lineno, "bad y"))?;
                coords.push((id, [x, y]));
            }
            Section::Demands => {
                if fields.len() < 2 {
                    return Err(parse_err(lineno, "demand line needs `id demand`"));
                }
                let id = fields[0].parse().map_err(|_| parse_err(lineno, "bad node id"))?;
                let d = fields[1].parse().map_err(|_| parse_err(lineno, "bad demand"))?;
                demands.push((id, d));
            }
            Section::Depot => {
                let id: i64 = fields[0].parse().map_err(|_| parse_err(lineno, "bad depot id"))?;
                if id >= 0 {
                    depots.push(id as usize);
                }
            }
            Section::Header => return Err(parse_err(lineno, format!("unexpected line `{line}`"))),
            Section::Skip => {}
        }
    }

    let problem = kind.ok_or_else(|| parse_err(0, "missing TYPE"))?;
    let dimension = dimension.ok_or_else(|| parse_err(0, "missing DIMENSION"))?;
    if dimension < 2 {
        return Err(parse_err(0, "DIMENSION must be at least 2"));
    }
    let ewt = ewt.unwrap_or_else(|| "EUC_2D".to_string());
    if ewt != "EUC_2D" {
        return Err(Error::Unsupported(format!("EDGE_WEIGHT_TYPE {ewt} (only EUC_2D is supported)")));
    }
    let coord_line = section_start[0].ok_or_else(|| parse_err(0, "missing NODE_COORD_SECTION"))?;
    if coords.len() != dimension {
        return Err(parse_err(
            coord_line,
            format!("NODE_COORD_SECTION has {} entries, DIMENSION is {dimension}", coords.len()),
        ));
    }
    check_ids(coords.iter().map(|c| c.0), dimension, coord_line, "NODE_COORD_SECTION")?;
    coords.sort_by_key(|c| c.0);

    let header = LibHeader {
        name,
        problem,
        dimension,
        edge_weight_type: ewt,
        capacity,
    };
    match problem {
        Problem::Tsp => Ok(LibInstance {
            header,
            coords: coords.into_iter().map(|c| c.1).collect(),
            demands: Vec::new(),
            depot: None,
        }),
        Problem::Cvrp => {
            if !capacity.is_some_and(|q| q > 0.0) {
                return Err(parse_err(0, "CVRP requires a positive CAPACITY"));
            }
            let demand_line = section_start[1].ok_or_else(|| parse_err(0, "missing DEMAND_SECTION"))?;
            if demands.len() != dimension {
                return Err(parse_err(
                    demand_line,
                    format!("DEMAND_SECTION has {} entries, DIMENSION is {dimension}", demands.len()),
                ));
            }
            check_ids(demands.iter().map(|d| d.0), dimension, demand_line, "DEMAND_SECTION")?;
            demands.sort_by_key(|d| d.0);
            let depot_line = section_start[2].ok_or_else(|| parse_err(0, "missing DEPOT_SECTION"))?;
            let depot = match depots.as_slice() {
                [d] if (1..=dimension).contains(d) => *d,
                _ => return Err(parse_err(depot_line, "expected exactly one valid depot id")),
            };
            let mut order = vec![depot - 1];
            order.extend((0..dimension).filter(|&i| i != depot - 1));
            Ok(LibInstance {
                header,
                coords: order.iter().map(|&i| coords[i].1).collect(),
                demands: order[1..].iter().map(|&i| demands[i].1).collect(),
                depot: Some(depot),
            })
        }
    }
}

fn check_ids(ids: impl Iterator<Item = usize>, dimension: usize, line: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; dimension];
    for id in ids {
        if id == 0 || id > dimension || std::mem::replace(&mut seen[id - 1], true) {
            return Err(parse_err(line, format!("{what}: invalid or duplicate node id {id}")));
        }
    }
    Ok(())
}

/// TSPLIB `nint` of the Euclidean distance.
pub fn euc2d_distance(a: [f64; 2], b: [f64; 2]) -> i64 {
    (crate::instance::euclid(a, b) + 0.5).floor() as i64
}

/// Integer tour length under `EUC_2D` rounding. TSP tours are closed.
pub fn euc2d_tour_cost(coords: &[[f64; 2]], tour: &[usize], closed: bool) -> i64 {
    let mut total: i64 = tour.windows(2).map(|w| euc2d_distance(coords[w[0]], coords[w[1]])).sum();
    if closed && tour.len() > 1 {
        total += euc2d_distance(coords[*tour.last().unwrap()], coords[tour[0]]);
    }
    total
}

/// Aspect-preserving min-max scaling into the unit square.
pub fn normalize_unit_square(raw: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, ScaleRecord)> {
    if raw.len() < 2 {
        return Err(Error::Degenerate("need at least two points".into()));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, axis: usize| raw.iter().map(|p| p[axis]).fold(init, f);
    let (min_x, max_x) = (fold(f64::min, f64::INFINITY, 0), fold(f64::max, f64::NEG_INFINITY, 0));
    let (min_y, max_y) = (fold(f64::min, f64::INFINITY, 1), fold(f64::max, f64::NEG_INFINITY, 1));
    let scale = (max_x - min_x).max(max_y - min_y);
    if !(scale > 0.0) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let coords = raw
        .iter()
        .map(|p| [((p[0] - min_x) / scale).clamp(0.0, 1.0), ((p[1] - min_y) / scale).clamp(0.0, 1.0)])
        .collect();
    Ok((
        coords,
        ScaleRecord {
            offset: [min_x, min_y],
            scale,
        },
    ))
}

impl LibInstance {
    /// Normalised [`Instance`] tagged `External`; demands divided by capacity.
    pub fn to_instance(&self) -> Result<(Instance, ScaleRecord)> {
        let (coords, scale) = normalize_unit_square(&self.coords)?;
        let inst = match self.header.problem {
            Problem::Tsp => Instance::tsp(coords, DistLabel::External, 0),
            Problem::Cvrp => {
                let q = self.header.capacity.expect("validated at parse");
                if let Some(d) = self.demands.iter().find(|&&d| !(d > 0.0 && d <= q)) {
                    return Err(Error::Config(format!("demand {d} outside (0, {q}]")));
                }
                Instance::cvrp(coords, self.demands.iter().map(|d| d / q).collect(), q, DistLabel::External, 0)
            }
        };
        Ok((inst, scale))
    }

    /// Coordinate section in TSPLIB layout (ids in stored order).
    pub fn coord_section(&self) -> String {
        let mut s = String::from("NODE_COORD_SECTION\n");
        for (i, c) in self.coords.iter().enumerate() {
            s.push_str(&format!("{} {} {}\n", i + 1, c[0], c[1]));
        }
        s
    }
}

pub fn benchmark_gap(model_cost: i64, best_known: i64) -> f64 {
    (model_cost - best_known) as f64 / best_known as f64
}
