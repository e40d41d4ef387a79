use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - b| / max(1, |a|, |b|)` over comparable components.
    pub max_rel_error: f64,
    pub worst_component: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Components whose perturbation crosses a rectifier kink; their
    /// finite differences are meaningless and they are left out.
    pub non_comparable: Vec<usize>,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of a flat parameter vector.
///
/// `f` builds the graph on the given (cleared) tape from the parameter
/// values. Every parameter it registers must use block 0 with offsets into
/// the flat vector; the analytic gradient is the sum over registrations.
pub fn grad_check<S, F>(f: F, params: &[S], h: S, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[S]) -> Result<Var>,
{
    if !(h > S::zero()) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let n = params.len();
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    if !tape.value(root).all_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let grads = tape.backward(root)?;
    if let Some((p, _)) = grads.entries().iter().find(|(p, _)| p.block != 0) {
        return Err(Error::contract(format!(
            "grad_check expects block 0 parameters, found {p:?}"
        )));
    }
    let mut flat = vec![vec![S::zero(); n]];
    grads.accumulate_into(&mut flat);
    let analytic: Vec<f64> = flat[0].iter().map(|g| g.to_f64_lossless()).collect();
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let base_sig = tape.relu_signature();

    let mut eval = |values: &[S]| -> Result<(S, Vec<i8>)> {
        tape.clear();
        let root = f(&mut tape, values)?;
        Ok((tape.value(root).as_slice()[0], tape.relu_signature()))
    };

    let mut numeric = vec![0.0; n];
    let mut non_comparable = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut work = params.to_vec();
    for i in 0..n {
        let orig = work[i];
        work[i] = orig + h;
        let (plus, sig_plus) = eval(&work)?;
        work[i] = orig - h;
        let (minus, sig_minus) = eval(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let fd = ((plus - minus) / (h + h)).to_f64_lossless();
        numeric[i] = fd;
        if sig_plus != base_sig || sig_minus != base_sig {
            non_comparable.push(i);
            continue;
        }
        let a = analytic[i];
        let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
        if rel > max_rel {
            max_rel = rel;
            worst = Some(i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_component: worst,
        analytic,
        numeric,
        non_comparable,
        passed: max_rel < tol,
    })
}
