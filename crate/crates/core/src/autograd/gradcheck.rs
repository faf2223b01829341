use super::{AutogradError, Graph, Real, Tensor, Var};

pub const DEFAULT_EPS: Real = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over compared coordinates.
    pub max_rel_error: Real,
    /// `(parameter, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where a `+-eps` perturbation switched a relu, pool winner
    /// or loss branch; central differences straddle a kink there.
    pub skipped: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Real, u64, Graph, Var, Vec<Var>), AutogradError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutogradError>,
{
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(AutogradError::NotScalarLoss(v.shape()));
    }
    Ok((v.item(), g.branch_signature(), g, loss, vars))
}

/// Compares backward gradients of the scalar built by `f` with central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps`, one element at a time.
///
/// Roundoff in the difference is about `ulp(f) / eps`. Against the 1e-8
/// denominator floor that matters for near-zero gradients, so losses of
/// order 1 need `eps` of a few 1e-4 to resolve relative errors of 1e-4.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: Real) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutogradError>,
{
    let (_, signature, g, loss, vars) = evaluate(&f, params)?;
    let grads = g.backward(loss)?;
    drop(g);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0 };
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let (fp, sp, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig - eps;
            let (fm, sm, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}
