use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

fn check(y: &Matrix<impl Real>, y_tilde: &Matrix<impl Real>) -> Result<()> {
    if y.shape() != y_tilde.shape() {
        return Err(Error::dim(
            "loss_cosine",
            format!("{:?} vs {:?}", y.shape(), y_tilde.shape()),
        ));
    }
    Ok(())
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Mean over rows of `1 − cos(y, ỹ)`.
///
/// A row where exactly one side is zero contributes 1; a row where both are
/// zero contributes 0. The reference `y` must have a nonzero row.
pub fn loss_cosine<T: Real>(y: &Matrix<T>, y_tilde: &Matrix<T>) -> Result<T> {
    check(y, y_tilde)?;
    if y.as_slice().iter().all(|&v| v == T::zero()) {
        return Err(Error::Config("reference output is identically zero".into()));
    }
    let mut total = T::zero();
    for r in 0..y.rows() {
        let (a, b) = (y.row(r), y_tilde.row(r));
        let (na, nb) = (norm(a), norm(b));
        let row = match (na == T::zero(), nb == T::zero()) {
            (true, true) => T::zero(),
            (true, false) | (false, true) => T::one(),
            // clamp absorbs rounding just outside [-1, 1]
            _ => T::one() - (dot(a, b) / (na * nb)).max(-T::one()).min(T::one()),
        };
        total = total + row;
    }
    Ok(total / T::of(y.rows() as f64))
}

/// Gradient of [`loss_cosine`] with respect to `ỹ`.
pub fn loss_cosine_pullback<T: Real>(y: &Matrix<T>, y_tilde: &Matrix<T>) -> Result<Matrix<T>> {
    check(y, y_tilde)?;
    let inv_rows = T::one() / T::of(y.rows() as f64);
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (a, b) = (y.row(r), y_tilde.row(r));
        let (na, nb) = (norm(a), norm(b));
        if na == T::zero() || nb == T::zero() {
            continue;
        }
        let cos = dot(a, b) / (na * nb);
        for ((o, &ya), &yb) in out.row_mut(r).iter_mut().zip(a).zip(b) {
            let d_cos = ya / (na * nb) - cos * yb / (nb * nb);
            *o = -d_cos * inv_rows;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn examples() {
        let mut rng = Rng::new(1);
        let y = rng.gaussian_matrix::<f64>(5, 7, 1.0);
        assert!(loss_cosine(&y, &y).unwrap().abs() < 1e-15);
        assert!((loss_cosine(&y, &y.scale(-1.0)).unwrap() - 2.0).abs() < 1e-15);
        for c in [1e-3, 0.5, 7.0, 1e4] {
            assert!(loss_cosine(&y, &y.scale(c)).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn zero_rows() {
        let y = Matrix::<f64>::from_f64(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = Matrix::<f64>::from_f64(2, 2, &[0.0, 0.0, 0.0, 0.0]).unwrap();
        // row 0 has a zero prediction (1), row 1 is zero on both sides (0)
        assert_eq!(loss_cosine(&y, &t).unwrap(), 0.5);
        assert!(loss_cosine(&t, &t).is_err());
        assert!(loss_cosine(&y, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn range_property() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let y = rng.gaussian_matrix::<f64>(3, 4, 1.0);
            let t = rng.gaussian_matrix::<f64>(3, 4, 1.0);
            let l = loss_cosine(&y, &t).unwrap();
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let y = rng.gaussian_matrix::<f64>(4, 5, 1.0);
        let t = rng.gaussian_matrix::<f64>(4, 5, 1.0);
        let g = loss_cosine_pullback(&y, &t).unwrap();
        let eps = 1e-6;
        for i in 0..20 {
            let mut p = t.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = t.clone();
            m.as_mut_slice()[i] -= eps;
            let num = (loss_cosine(&y, &p).unwrap() - loss_cosine(&y, &m).unwrap()) / (2.0 * eps);
            assert!((num - g.as_slice()[i]).abs() < 1e-8);
        }
    }
}
