use crate::autodiff::{Graph, Tensor, Var};
use crate::metrics::{best_permutation, check_counts, MetricsError};

use super::LayerError;

/// Absolute guard added to the error energy inside the training loss.
pub const LOSS_EPS: f64 = 1e-8;

/// Result of [`usdr_loss`]: the scalar loss node and the assignment it used.
#[derive(Clone, Debug)]
pub struct UsdrLoss {
    pub loss: Var,
    /// `permutation[j]` is the target assigned to output `j`.
    pub permutation: Vec<usize>,
    pub per_source_sdr_db: Vec<f64>,
}

/// SDR with `eps` added to the error energy, unclamped. Zero-energy targets
/// are rejected.
pub fn guarded_sdr(target: &[f64], estimate: &[f64], eps: f64) -> Result<f64, MetricsError> {
    if target.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            target: target.len(),
            estimate: estimate.len(),
        });
    }
    let xx: f64 = target.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(MetricsError::ZeroEnergyTarget);
    }
    let xs: f64 = target.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let coef = xs / xx;
    let (mut pp, mut ee) = (0.0, 0.0);
    for (x, s) in target.iter().zip(estimate) {
        let p = coef * x;
        pp += p * p;
        ee += (p - s) * (p - s);
    }
    Ok(10.0 * (pp.log10() - (ee + eps).log10()))
}

/// Negative mean SDR of `outputs` against `targets` under the best
/// output-to-target permutation.
///
/// The permutation is chosen on forward values; only the chosen pairs enter
/// the graph, so gradients flow through them alone.
pub fn usdr_loss<T: AsRef<[f64]>>(
    g: &mut Graph,
    targets: &[T],
    outputs: &[Var],
) -> Result<UsdrLoss, LayerError> {
    check_counts(targets.len(), outputs.len())?;
    let matrix = outputs
        .iter()
        .map(|&o| {
            targets
                .iter()
                .map(|t| guarded_sdr(t.as_ref(), g.value(o).data(), LOSS_EPS))
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let best = best_permutation(&matrix);

    let mut total: Option<Var> = None;
    for (j, &i) in best.permutation.iter().enumerate() {
        let sdr = sdr_node(g, targets[i].as_ref(), outputs[j])?;
        total = Some(match total {
            Some(acc) => g.add(acc, sdr)?,
            None => sdr,
        });
    }
    let total = total.expect("at least two sources");
    let loss = g.mul_const(total, -1.0 / outputs.len() as f64)?;
    Ok(UsdrLoss {
        loss,
        permutation: best.permutation,
        per_source_sdr_db: best.per_source_sdr_db,
    })
}

fn sdr_node(g: &mut Graph, target: &[f64], output: Var) -> Result<Var, LayerError> {
    let xx: f64 = target.iter().map(|v| v * v).sum();
    let x = g.input(Tensor::vector(target.to_vec()));
    let xs = g.dot(x, output)?;
    let coef = g.mul_const(xs, 1.0 / xx)?;
    let proj = g.scale(x, coef)?;
    let err = g.sub(proj, output)?;
    let pp = g.dot(proj, proj)?;
    let ee = g.dot(err, err)?;
    let ee = g.add_const(ee, LOSS_EPS)?;
    let num = g.log10(pp)?;
    let den = g.log10(ee)?;
    let ratio = g.sub(num, den)?;
    Ok(g.mul_const(ratio, 10.0)?)
}
