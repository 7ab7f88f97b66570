//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    /// Probes whose `±h` evaluations crossed a ReLU kink; central
    /// differences are not a valid reference there.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tol)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(loss_fn: &F, params: &[Tensor], record: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = if record { Graph::new() } else { Graph::no_grad() };
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if record {
                g.leaf(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect();
    let loss = loss_fn(&mut g, &vars)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok((g, vars, loss))
}

/// Compares the analytic gradient of `loss_fn` at `params` with
/// `(f(x+h) − f(x−h)) / 2h` entry by entry. Probes that move any ReLU input
/// across zero are counted in `skipped` instead of compared. Probes are
/// independent and run in parallel when the `parallel` feature is on; each
/// owns a private copy of the parameters.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if params.is_empty() {
        return Ok(GradCheckReport {
            max_rel_error: Vec::new(),
            tol,
            skipped: 0,
        });
    }
    let (mut g, vars, loss) = eval(&loss_fn, params, true)?;
    let pattern = g.relu_pattern();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let probes: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |e| (pi, e)))
        .collect();
    let numeric = par::map(&probes, |&(pi, e)| -> Result<Option<f64>> {
        let mut local = params.to_vec();
        let x = local[pi].data()[e];
        let mut at = |v: f64| -> Result<(f64, bool)> {
            local[pi].data_mut()[e] = v;
            let (g, _, l) = eval(&loss_fn, &local, false)?;
            Ok((g.value(l).item()?, g.relu_pattern() == pattern))
        };
        let (fp, same_p) = at(x + h)?;
        let (fm, same_m) = at(x - h)?;
        Ok((same_p && same_m).then(|| (fp - fm) / (2.0 * h)))
    });

    let mut max_rel_error = vec![0.0f64; params.len()];
    let mut skipped = 0;
    for (&(pi, e), n) in probes.iter().zip(numeric) {
        match n? {
            Some(n) => max_rel_error[pi] = max_rel_error[pi].max(relative_error(analytic[pi][e], n)),
            None => skipped += 1,
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let p = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.scale(sq, 1.5)?;
                g.sum(s)
            },
            &[p],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn kink_crossing_probes_are_skipped() {
        let p = Tensor::new(vec![2], vec![5e-5, 0.7]).unwrap();
        let r = grad_check(
            |g, v| {
                let r = g.relu(v[0])?;
                g.sum(r)
            },
            &[p],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn no_params_is_empty() {
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(1.0))), &[], 1e-4, 1e-6).unwrap();
        assert!(r.max_rel_error.is_empty());
    }

    #[test]
    fn non_finite_loss_rejected() {
        let p = Tensor::scalar(1.0);
        let r = grad_check(
            |g, v| {
                let big = g.scale(v[0], 1e6)?;
                let e = g.exp(big)?;
                g.sum(e)
            },
            &[p],
            1e-4,
            1e-6,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn bad_step_rejected() {
        assert!(grad_check(|g, v| g.sum(v[0]), &[Tensor::scalar(1.0)], 0.0, 1e-6).is_err());
    }
}
