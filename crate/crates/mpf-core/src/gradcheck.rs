//! Central-finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{backward, forward, Graph, NodeId};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Precision, Tensor};

/// Step size balancing truncation against rounding error in double precision.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative-error denominator floor; below this scale the comparison is
/// effectively absolute, which keeps finite-difference noise on near-zero
/// gradients from dominating the report.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric gradient at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Per-parameter maximum relative error between analytic and
/// central-difference gradients.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap())
    }

    pub fn is_within(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<12} max rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                e.name, e.max_rel_error, e.worst_analytic, e.worst_numeric
            )?;
        }
        writeln!(f, "overall max rel err {:.3e}", self.max_rel_error())
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss` with central differences over
/// every element of every parameter. Requires a double-precision graph;
/// single-precision rounding would swamp the difference quotient.
pub fn finite_difference_check(
    graph: &Graph,
    loss: NodeId,
    inputs: &[(&str, &Tensor)],
    params: &mut ParameterStore,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if graph.precision() != Precision::Double {
        return Err(Error::InvalidArgument(
            "finite_difference_check requires a double-precision graph".into(),
        ));
    }

    params.zero_grads();
    let tape = forward(graph, inputs, params)?;
    backward(graph, &tape, loss, params)?;
    let analytic: Vec<Tensor> = params.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |params: &ParameterStore| -> Result<f64> {
        let tape = forward(graph, inputs, params)?;
        Ok(tape.value(loss).scalar_value())
    };

    let mut report = GradCheckReport::default();
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let name = params.get(id).name.clone();
        let numel = params.value(id).shape().numel();
        let mut worst = GradCheckEntry {
            name,
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..numel {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + epsilon;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[i] = original - epsilon;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi].data()[i];
            let err = rel_error(a, numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
        }
        report.entries.push(worst);
    }
    Ok(report)
}
