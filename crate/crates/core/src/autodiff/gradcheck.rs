use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many randomly chosen coordinates per parameter
    /// tensor; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// A stencil that straddles a kink (a relu crossing zero, say) gives a
    /// central difference that estimates no derivative at all. With this set,
    /// each coordinate's difference at `epsilon` is compared with the one at
    /// `epsilon / 10`; if they disagree, the step keeps shrinking tenfold (up
    /// to [`MAX_REFINEMENTS`] times) until two successive estimates agree, and
    /// the larger of that pair is used. If none agree the plain `epsilon`
    /// estimate is kept. The analytic gradient plays no part in this choice.
    pub refine_kinks: bool,
}

pub const MAX_REFINEMENTS: usize = 3;

/// Relative agreement between successive central differences.
const AGREEMENT: f64 = 1e-6;
/// Relative rounding error assumed for one evaluation of `f`.
const ROUNDOFF: f64 = 1e-13;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            refine_kinks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates that needed a smaller step (only with `refine_kinks`).
    pub coords_refined: usize,
    pub worst: Option<Discrepancy>,
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of every trainable parameter. Returns the largest
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F, E>(f: F, params: &mut ParamStore, epsilon: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    grad_check_with(f, params, &opts).map(|r| r.max_rel_err)
}

pub fn grad_check_with<F, E>(
    f: F,
    params: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic = g.param_grads(params);
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        coords_refined: 0,
        worst: None,
    };
    let base = if opts.refine_kinks {
        Some(eval(params)?)
    } else {
        None
    };
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for id in ids {
        let n = params.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(max) if max < n => {
                let mut c = sample(&mut rng, n, max).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for coord in coords {
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |t| t.data()[coord]);
            let orig = params.value(id).data()[coord];
            let mut central = |step: f64| -> Result<f64, E> {
                params.value_mut(id).data_mut()[coord] = orig + step;
                let plus = eval(params);
                params.value_mut(id).data_mut()[coord] = orig - step;
                let minus = eval(params);
                params.value_mut(id).data_mut()[coord] = orig;
                Ok((plus? - minus?) / (2.0 * step))
            };
            let coarse = central(opts.epsilon)?;
            let mut numeric = coarse;
            if let Some(f0) = base {
                let (mut prev, mut step) = (coarse, opts.epsilon);
                for k in 0..MAX_REFINEMENTS {
                    step /= 10.0;
                    let fine = central(step)?;
                    let noise = ROUNDOFF * f0.abs() / step;
                    if (fine - prev).abs() <= AGREEMENT * fine.abs().max(prev.abs()) + noise {
                        if k > 0 {
                            numeric = prev;
                            report.coords_refined += 1;
                        }
                        break;
                    }
                    prev = fine;
                }
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(Discrepancy {
                    param: params.name(id).to_string(),
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
