use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor used when forming relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

fn evaluate<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let out = f(&mut g, x)?;
    g.value(out).item()
}

/// Checks the reverse-mode gradient of `f` at `point` against the
/// fourth-order central difference with step `h`,
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Passes iff every coordinate's relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` is below `rtol`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let loss = f(&mut g, x)?;
    let base = g.value(loss).item()?;
    g.backward(loss)?;
    let analytic: Vec<f64> = g.grad(x).expect("leaf grad populated").data().to_vec();

    let again = evaluate(&f, point)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            evaluate(&f, &probe)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        pass: max_rel_error < rtol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let point = Tensor::scalar(3.0);
        let report = grad_check(|g, x| g.mul(x, x), &point, 1e-5, 1e-4).unwrap();
        assert!((report.analytic[0] - 6.0).abs() < 1e-12);
        assert!((report.numeric[0] - 6.0).abs() < 1e-6);
        assert!(report.pass);
    }

    #[test]
    fn wrong_derivative_fails() {
        let point = Tensor::from_f64([3], &[0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |g, x| {
                let y = g.map_custom(x, f64::sin, |v| 2.0 * v.cos())?;
                g.sum(y)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0u32);
        let point = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                calls.set(calls.get() + 1);
                let s = g.sum(x)?;
                g.add_scalar(s, calls.get() as f64)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CheckInvalid(_)));
    }
}
