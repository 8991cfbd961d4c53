use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the function on a fresh graph given the input variable. The
/// return value is `max_j |analytic_j − numeric_j| / max(1, |analytic_j|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_check", "step h must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    g.backward(root)?;
    let analytic = g.grad(xv).expect("param has grad after backward").to_vec();

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let r = f(&mut g, v)?;
        g.value(r)
            .item()
            .ok_or_else(|| Error::invalid("finite_diff_check", "function is not scalar"))
    };

    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = Tensor::vector(vec![0.5, -2.0, 3.0, 1.25]);
        let x = Tensor::vector(vec![0.1, 0.2, -0.3, 4.0]);
        let err = finite_diff_check(
            |g, x| {
                let cv = g.constant(c.clone());
                let p = g.mul(cv, x)?;
                g.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::vector(vec![0.5, 1.0, 2.0, 3.0]);
        let err = finite_diff_check(
            |g, x| {
                let r = g.relu(x)?;
                let sq = g.mul(r, r)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
    }
}
