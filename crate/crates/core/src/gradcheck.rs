//! Central finite-difference verification of graph gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Bindings, Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares backward gradients against central differences for every leaf
/// declared with `requires_grad`.
///
/// Evaluation happens in `f64` on a recast copy of the graph, so the check
/// measures the differentiation rules rather than single-precision rounding.
pub fn gradient_check<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    output: NodeId,
    tol: f64,
) -> Result<CheckReport> {
    let leaves = graph.leaves();
    let mut values: Vec<(String, Tensor<f64>)> = Vec::with_capacity(leaves.len());
    for (name, _, _) in &leaves {
        let t = bindings
            .get(name)
            .ok_or_else(|| crate::error::Error::UnboundLeaf(name.clone()))?;
        values.push((name.clone(), t.cast::<f64>()));
    }

    let mut g64: Graph<f64> = graph.recast();
    let analytic = {
        let b = bind_all(&values);
        g64.forward(&b, output)?;
        g64.backward(output)?
    };

    let mut report = CheckReport {
        leaves: Vec::new(),
        max_rel_error: 0.0,
        tol,
        pass: true,
    };
    for li in 0..values.len() {
        let (name, _, requires_grad) = &leaves[li];
        if !requires_grad {
            continue;
        }
        let grad = analytic[name].data().to_vec();
        let mut check = LeafCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..grad.len() {
            let orig = values[li].1.data()[i];
            values[li].1.data_mut()[i] = orig + FD_STEP;
            let plus = eval(&mut g64, &values, output)?;
            values[li].1.data_mut()[i] = orig - FD_STEP;
            let minus = eval(&mut g64, &values, output)?;
            values[li].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad[i], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.leaves.push(check);
    }
    report.pass = report.max_rel_error < tol;
    Ok(report)
}

fn bind_all(values: &[(String, Tensor<f64>)]) -> Bindings<'_, f64> {
    let mut b = Bindings::new();
    for (name, t) in values {
        b.bind(name.clone(), t);
    }
    b
}

fn eval(g: &mut Graph<f64>, values: &[(String, Tensor<f64>)], output: NodeId) -> Result<f64> {
    g.reset();
    let b = bind_all(values);
    Ok(g.forward(&b, output)?.data()[0])
}
