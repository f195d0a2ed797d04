use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and a finite-difference estimate, over every coordinate.
///
/// Each estimate Richardson-extrapolates central differences at `s` and `s/2`
/// (error O(s⁴)). Two scales are tried, `s = h` and `s = h/100`, and the
/// closer one counts: the large step keeps round-off from swamping tiny
/// derivatives, the small one is unlikely to straddle a ReLU or max-pool
/// kink. A wrong derivative disagrees with both.
///
/// The per-coordinate error is `|a - n| / max(1e-12, |a| + |n|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= point.len() {
            return Err(Error::Dimension(format!("coordinate {i} out of range")));
        }
        let central = |step: f64| -> Result<f64> {
            let mut plus = point.clone();
            plus.data_mut()[i] += step;
            let mut minus = point.clone();
            minus.data_mut()[i] -= step;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * step))
        };
        let a = analytic[i];
        let mut err = f64::INFINITY;
        for s in [h, h / 100.0] {
            let numeric = (4.0 * central(s / 2.0)? - central(s)?) / 3.0;
            err = err.min((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // central differences are exact for linear maps; a wider step keeps
        // cancellation error below the bound
        let w = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
        let point = Tensor::from_vec(vec![1.0, 2.0, -0.5]);
        let err = grad_check(
            |tape, x| {
                let c = tape.constant(w.clone());
                let p = tape.mul(x, c)?;
                Ok(tape.sum(p))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |tape, x| {
                let z = tape.scale(x, 0.0);
                let s = tape.sum(z);
                Ok(tape.add_scalar(s, 4.0))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_function_rejected() {
        let point = Tensor::from_vec(vec![1.0, 2.0]);
        let res = grad_check(|tape, x| tape.exp(x), &point, 1e-6);
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
