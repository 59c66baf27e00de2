use std::fmt;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared in absolute terms instead of amplifying round-off.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Set when evaluation produced a non-finite value.
    pub failure: Option<String>,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            Some(msg) => write!(f, "FAIL {msg}"),
            None => write!(
                f,
                "{} max_rel_err={:.3e} (tol {:.0e}, {} entries)",
                if self.passed { "PASS" } else { "FAIL" },
                self.max_rel_err,
                self.tol,
                self.checked
            ),
        }
    }
}

fn reduce<'t>(out: Var<'t>) -> Var<'t> {
    if out.value().numel() == 1 {
        out
    } else {
        out.sum()
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<std::result::Result<f64, String>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = reduce(f(&tape, &vars)?);
    if let Some((_, op)) = tape.first_non_finite() {
        return Ok(Err(format!("non-finite value in `{op}`")));
    }
    Ok(Ok(out.value().data()[0]))
}

/// Checks `f` with respect to every element of every input.
///
/// Non-scalar outputs are sum-reduced. `eps` must lie in `[1e-6, 1e-4]`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-4]")));
    }
    let failed = |msg: String| GradReport {
        max_rel_err: f64::INFINITY,
        tol,
        passed: false,
        worst: None,
        checked: 0,
        failure: Some(msg),
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = reduce(f(&tape, &vars)?);
    if let Some((_, op)) = tape.first_non_finite() {
        return Ok(failed(format!("non-finite value in `{op}`")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(msg), _) | (_, Err(msg)) => return Ok(failed(msg)),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(err);
                worst = Some((i, j));
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
        worst,
        checked,
        failure: None,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 9.0]).unwrap();
        let report = grad_check(|_, x| Ok(x.sum()), &x, 1e-5, 1e-5).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9, "{report}");
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let g = tape.backward(v.sum()).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let tape = Tape::new();
        let v = tape.var(Tensor::zeros(&[1, 2, 2, 2]));
        let g = tape.backward(v.sigmoid().sum()).unwrap();
        assert!(g.get(v).unwrap().iter().all(|&d| d == 0.25));
    }

    #[test]
    fn reports_non_finite_op() {
        let x = Tensor::full(&[2], 1e200);
        let report = grad_check(|_, x| Ok(x.sigmoid().add(x.mul(x)?)?.sum()), &x, 1e-5, 1e-5).unwrap();
        assert!(!report.passed);
        assert!(report.failure.as_deref().unwrap().contains("mul"), "{report}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|_, x| Ok(x), &x, 1e-2, 1e-5).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // A deliberately broken op: forward x^2, backward claims 3x.
        let x = Tensor::new(&[3], vec![0.5, 1.0, -2.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let xv = x.value();
                let out = Tensor::new(&[3], xv.data().iter().map(|v| v * v).collect())?;
                Ok(tape.custom("bad_square", &[x], out, move || {
                    Box::new(move |g| vec![Some(g.iter().zip(xv.data()).map(|(g, x)| 3.0 * g * x).collect())])
                }))
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
