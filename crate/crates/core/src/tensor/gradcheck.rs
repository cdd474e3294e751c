use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, NodeId};
use crate::error::{Error, Result};

/// Compares the analytic gradient of `loss` with respect to `param` against
/// central finite differences on up to `samples` randomly chosen
/// coordinates. Returns the largest relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    param: NodeId,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    graph.forward()?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(param)
        .ok_or_else(|| Error::State("parameter does not influence the loss".into()))?
        .to_vec();
    let n = analytic.len();
    let picks = sample(rng, n, samples.min(n)).into_vec();
    let mut worst = 0.0f64;
    for i in picks {
        let orig = graph.value(param)[i];
        graph.param_value_mut(param)?[i] = orig + eps;
        graph.forward()?;
        let up = graph.value(loss)[0];
        graph.param_value_mut(param)?[i] = orig - eps;
        graph.forward()?;
        let down = graph.value(loss)[0];
        graph.param_value_mut(param)?[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    graph.forward()?;
    Ok(worst)
}
