//! Lie brackets and the Lie derivative of a conformally Euclidean metric.

use crate::autodiff::{jacobian, jvp_with_value, Dual};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[X, Y](x) = J_Y(x) X(x) - J_X(x) Y(x)`, from two JVPs.
pub fn lie_bracket(
    x_field: impl Fn(&Dual) -> Dual,
    y_field: impl Fn(&Dual) -> Dual,
    x: &Tensor,
) -> Result<Tensor> {
    let probe = Tensor::zeros(x.rows(), x.cols());
    let (xv, _) = jvp_with_value(&x_field, x, &probe)?;
    let (yv, _) = jvp_with_value(&y_field, x, &probe)?;
    if xv.shape() != x.shape() || yv.shape() != x.shape() {
        return Err(Error::shape("lie_bracket", "fields must map R^n to R^n"));
    }
    let (_, jy_x) = jvp_with_value(&y_field, x, &xv)?;
    let (_, jx_y) = jvp_with_value(&x_field, x, &yv)?;
    Ok(jy_x.zip_map(&jx_y, |a, b| a - b))
}

/// `sign (J_F + J_F^T + <grad sigma, F> I)` at a `1 x n` point.
///
/// `sigma` maps a point to a `1 x 1` value; `None` is the zero conformal
/// factor.
pub fn lie_derivative_matrix(
    field: impl Fn(&Dual) -> Dual,
    sigma: Option<&dyn Fn(&Dual) -> Dual>,
    sign: f64,
    x: &Tensor,
) -> Result<Tensor> {
    let j = jacobian(&field, x)?;
    let n = x.cols();
    if j.shape() != [n, n] {
        return Err(Error::shape(
            "lie_derivative_matrix",
            format!("field Jacobian is {:?}", j.shape()),
        ));
    }
    let conformal = match sigma {
        Some(s) => {
            let g = jacobian(s, x)?;
            g.dot(&field_value(&field, x)?)
        }
        None => 0.0,
    };
    let mut a = Tensor::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let diag = if r == c { conformal } else { 0.0 };
            a.set(r, c, sign * (j.get(r, c) + j.get(c, r) + diag));
        }
    }
    Ok(a)
}

fn field_value(field: &impl Fn(&Dual) -> Dual, x: &Tensor) -> Result<Tensor> {
    Ok(jvp_with_value(field, x, &Tensor::zeros(x.rows(), x.cols()))?.0)
}
