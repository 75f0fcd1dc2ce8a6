//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamId, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_block: Vec<BlockError>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst_block(&self) -> Option<&BlockError> {
        self.per_block
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare the backward pass of `f` at `point` with central differences of
/// step `h`. Error per coordinate is `|analytic - fd| / max(1, |fd|)`.
///
/// `f` must build the same scalar on every call; parameters are read through
/// [`Graph::param`]. With `fault` set the graph corrupts its backward pass.
pub fn grad_check<F>(f: F, point: &ParamSet, h: f64, fault: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(point).with_backward_fault(fault);
        let loss = f(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { param: "<loss>".into(), coord: 0 });
        }
        g.backward(loss)?;
        g.param_grads()
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_params(p).no_grad();
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut work = point.clone();
    let mut per_block = Vec::with_capacity(point.len());
    let mut coords = 0;
    for id in point.ids() {
        let mut block = BlockError {
            name: point.name(id).to_string(),
            max_rel_error: 0.0,
            worst_coord: 0,
        };
        for c in 0..point.get(id).numel() {
            let fd = central_difference(&mut work, id, c, h, &eval)?;
            let an = analytic.get(id)[c];
            let err = (an - fd).abs() / fd.abs().max(1.0);
            if err > block.max_rel_error {
                block.max_rel_error = err;
                block.worst_coord = c;
            }
            coords += 1;
        }
        per_block.push(block);
    }
    let max_rel_error = per_block.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_block,
        coords_checked: coords,
    })
}

fn central_difference(
    work: &mut ParamSet,
    id: ParamId,
    c: usize,
    h: f64,
    eval: &impl Fn(&ParamSet) -> Result<f64>,
) -> Result<f64> {
    let orig = work.get(id).data[c];
    work.get_mut(id).data[c] = orig + h;
    let plus = eval(work)?;
    work.get_mut(id).data[c] = orig - h;
    let minus = eval(work)?;
    work.get_mut(id).data[c] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(TensorError::NonFinite {
            param: work.name(id).to_string(),
            coord: c,
        });
    }
    Ok((plus - minus) / (2.0 * h))
}
