//! Sign-gradient projected ascent over the ℓ∞ ball.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Snap tolerance: a coordinate this close to the ball boundary (as a
/// fraction of ε) is placed exactly on it.
const SNAP: f64 = 1e-9;

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdParams {
    pub eps: f64,
    /// Step size as a fraction of ε.
    pub eta: f64,
    pub steps: usize,
}

impl PgdParams {
    pub fn new(eps: f64, eta: f64, steps: usize) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("attack eps must be >= 0, got {eps}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::Config(format!("attack eta must lie in (0, 1], got {eta}")));
        }
        Ok(Self { eps, eta, steps })
    }
}

/// Per-row objective values and their gradients with respect to the input.
pub type Evaluation = (Vec<f64>, Tensor);

/// Maximizes a row-separable objective independently for every row of `s`.
///
/// The perturbation is tracked as a fraction `f ∈ [-1, 1]^d` of ε so that
/// `H` steps of `η` with `η·H ≥ 1` land exactly on the boundary. `start`
/// optionally gives the initial fractions (defaults to zero, i.e. `s̃⁰ = s`).
/// Returns, per row, the best iterate seen (including the start).
pub fn pgd_maximize_batch<F>(
    mut objective: F,
    s: &Tensor,
    params: PgdParams,
    start: Option<Tensor>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Evaluation>,
{
    let (n, d) = (s.rows(), s.cols());
    let mut frac = match start {
        Some(f) if f.same_shape(s) => f,
        Some(_) => return Err(Error::Shape("PGD start must match the state batch".into())),
        None => Tensor::zeros(n, d),
    };
    let point = |frac: &Tensor| {
        let mut x = s.clone();
        for (v, f) in x.data_mut().iter_mut().zip(frac.data()) {
            *v += params.eps * f;
        }
        x
    };
    let mut x = point(&frac);
    if params.eps == 0.0 || params.steps == 0 {
        return Ok(x);
    }
    let mut best = x.clone();
    let mut best_val = vec![f64::NEG_INFINITY; n];
    for k in 0..=params.steps {
        let (vals, grad) = objective(&x)?;
        if vals.len() != n || !grad.same_shape(s) {
            return Err(Error::Shape("objective returned the wrong batch shape".into()));
        }
        for r in 0..n {
            if vals[r] > best_val[r] {
                best_val[r] = vals[r];
                best.row_slice_mut(r).copy_from_slice(x.row_slice(r));
            }
        }
        if k == params.steps {
            break;
        }
        for (f, &g) in frac.data_mut().iter_mut().zip(grad.data()) {
            let mut next = (*f + params.eta * sign(g)).clamp(-1.0, 1.0);
            if 1.0 - next.abs() <= SNAP {
                next = sign(next);
            }
            *f = next;
        }
        x = point(&frac);
    }
    Ok(best)
}

/// Single-state convenience wrapper.
pub fn pgd_maximize<F>(mut objective: F, s: &[f64], params: PgdParams) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let out = pgd_maximize_batch(
        |x| {
            let (v, g) = objective(x.row_slice(0));
            Ok((vec![v], Tensor::row(&g)))
        },
        &Tensor::row(s),
        params,
        None,
    )?;
    Ok(out.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn linear(g: Vec<f64>) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
        move |x| (x.iter().zip(&g).map(|(a, b)| a * b).sum(), g.clone())
    }

    #[test]
    fn zero_steps_is_identity() {
        let p = PgdParams::new(0.3, 0.1, 0).unwrap();
        assert_eq!(pgd_maximize(linear(vec![1.0, -1.0]), &[0.5, 0.5], p).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn linear_objective_reaches_the_corner_exactly() {
        let mut rng = seeded(11);
        let p = PgdParams::new(0.1, 0.1, 10).unwrap();
        for _ in 0..100 {
            let d = rng.gen_range(1..6);
            let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let out = pgd_maximize(linear(g.clone()), &s, p).unwrap();
            let expect: Vec<f64> = s.iter().zip(&g).map(|(a, b)| a + 0.1 * sign(*b)).collect();
            assert_eq!(out, expect);
        }
    }

    #[test]
    fn zero_gradient_stays_put() {
        let p = PgdParams::new(0.5, 0.1, 10).unwrap();
        let out = pgd_maximize(|_| (1.0, vec![0.0, 0.0]), &[0.2, -0.3], p).unwrap();
        assert_eq!(out, vec![0.2, -0.3]);
    }

    #[test]
    fn best_so_far_never_worse_than_start() {
        // concave with interior maximizer at c; sign steps overshoot it
        let c = [0.013, -0.021];
        let f = |x: &[f64]| {
            let v = -x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let g = x.iter().zip(&c).map(|(a, b)| -2.0 * (a - b)).collect();
            (v, g)
        };
        let p = PgdParams::new(0.1, 0.3, 10).unwrap();
        let s = [0.0, 0.0];
        let out = pgd_maximize(f, &s, p).unwrap();
        assert!(f(&out).0 >= f(&s).0);
        assert!(out.iter().zip(&s).all(|(a, b)| (a - b).abs() <= 0.1 + 1e-9));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PgdParams::new(-0.1, 0.1, 10).is_err());
        assert!(PgdParams::new(0.1, 0.0, 10).is_err());
        assert!(PgdParams::new(0.1, 1.5, 10).is_err());
    }
}
