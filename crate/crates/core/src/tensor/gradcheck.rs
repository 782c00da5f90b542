use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// Largest relative error seen for each parameter tensor.
    pub max_rel_error: Vec<f64>,
    /// Entries whose relative error exceeds the tolerance.
    pub flagged: Vec<GradCheckEntry>,
    pub checked: usize,
    /// Entries whose ±h evaluations took different piecewise branches than the
    /// base point; central differences are meaningless there.
    pub skipped: usize,
}

/// Fraction of entries allowed to straddle a kink before the whole check is
/// considered inconclusive.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
            && self.checked > 0
            && (self.skipped as f64) <= MAX_SKIP_FRACTION * (self.checked + self.skipped) as f64
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fingerprint();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    Ok((g.scalar_value(loss), g.fingerprint().unwrap_or(0)))
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// with step `h` for every entry of every parameter.
///
/// Relative error is `|a − n| / max(1e-8, |a| + |n|)`. The function is
/// evaluated twice at the base point first; differing results are rejected.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", format!("step {h} must be positive")));
    }
    let mut g = Graph::with_fingerprint();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let base = (g.scalar_value(loss), g.fingerprint().unwrap_or(0));
    let again = evaluate(&f, params)?;
    if base.0.to_bits() != again.0.to_bits() || base.1 != again.1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function is not deterministic ({} vs {})", base.0, again.0),
        ));
    }

    let mut report = GradCheckReport {
        tolerance: tol,
        max_rel_error: vec![0.0; params.len()],
        flagged: Vec::new(),
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[i] = orig;
            if plus.1 != base.1 || minus.1 != base.1 {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.0 - minus.0) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error[pi] = report.max_rel_error[pi].max(rel);
            if rel > tol || !rel.is_finite() {
                report.flagged.push(GradCheckEntry {
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over every tensor of `store` followed by `extra` inputs.
/// `f` sees the store with each parameter bound to its perturbable leaf, plus
/// the leaves of `extra`.
pub fn grad_check_store<F>(
    store: &ParamStore,
    extra: &[Tensor],
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut params: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    let n = params.len();
    params.extend_from_slice(extra);
    grad_check(
        |g, vars| {
            for (id, _, _) in store.iter() {
                g.bind_param(id, vars[id.index()]);
            }
            f(g, store, &vars[n..])
        },
        &params,
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fault, OpKind};

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.2]);
        let report = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                let s = g.scale(sq, 1.5);
                Ok(g.sum(s))
            },
            &[x],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sign_flipped_rule_is_flagged() {
        let x = Tensor::vector(vec![0.3, -1.7]);
        fault::flip_sign(OpKind::Exp);
        let report = grad_check(
            |g, p| {
                let e = g.exp(p[0]);
                Ok(g.sum(e))
            },
            &[x],
            1e-4,
            1e-6,
        );
        fault::clear();
        let report = report.unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged.len(), 2);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(p[0], calls.get());
                Ok(g.sum(s))
            },
            &[x],
            1e-4,
            1e-6,
        );
        assert!(r.is_err());
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let r = grad_check(|g, p| Ok(g.sum(p[0])), &[Tensor::scalar(1.0)], 0.0, 1e-6);
        assert!(r.is_err());
    }

    #[test]
    fn kink_straddles_are_skipped_not_flagged() {
        let x = Tensor::vector(vec![1e-6, 0.5]);
        let report = grad_check(
            |g, p| {
                let r = g.relu(p[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.flagged.is_empty());
    }
}
