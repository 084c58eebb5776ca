//! Automatic differentiation: a reverse-mode tape plus forward-mode duals
//! recorded on the same tape.

mod dual;
mod tape;

pub use dual::Dual;
pub use tape::{Gradients, Tape, UnaryFn, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            primitive: format!("{what} (input)"),
        })
    }
}

/// Gradient of a scalar-valued `f` at `x`.
pub fn grad(f: impl Fn(&Dual) -> Dual, x: &Tensor) -> Result<Tensor> {
    check_finite(x, "grad")?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(&Dual::constant(xv.clone()));
    let g = y.primal.backward()?;
    Ok(g.get(&xv))
}

/// Jacobian-vector product `J_f(x) v`, computed by one forward-mode pass.
pub fn jvp(f: impl Fn(&Dual) -> Dual, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(jvp_with_value(f, x, v)?.1)
}

/// `(f(x), J_f(x) v)`.
pub fn jvp_with_value(
    f: impl Fn(&Dual) -> Dual,
    x: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if x.shape() != v.shape() {
        return Err(Error::shape(
            "jvp",
            format!("point {:?} vs direction {:?}", x.shape(), v.shape()),
        ));
    }
    check_finite(x, "jvp")?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vv = tape.constant(v.clone());
    let y = f(&Dual::new(xv, vec![vv]));
    tape.check()?;
    let t = match y.tangents.first() {
        Some(t) => t.value(),
        None => {
            let [r, c] = y.primal.shape();
            Tensor::zeros(r, c)
        }
    };
    Ok((y.primal.value(), t))
}

/// Vector-Jacobian product `J_f(x)^T u`, computed by one reverse sweep.
pub fn vjp(f: impl Fn(&Dual) -> Dual, x: &Tensor, u: &Tensor) -> Result<Tensor> {
    check_finite(x, "vjp")?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(&Dual::constant(xv.clone()));
    if y.primal.shape() != u.shape() {
        return Err(Error::shape(
            "vjp",
            format!("output {:?} vs cotangent {:?}", y.primal.shape(), u.shape()),
        ));
    }
    let uv = tape.constant(u.clone());
    let g = (&y.primal * &uv).sum().backward()?;
    Ok(g.get(&xv))
}

/// Jacobian of `f: R^n -> R^k` at a `1 x n` point, assembled column by column
/// from `n` JVPs against the standard basis. Returns a `k x n` tensor.
pub fn jacobian(f: impl Fn(&Dual) -> Dual, x: &Tensor) -> Result<Tensor> {
    if x.rows() != 1 {
        return Err(Error::shape(
            "jacobian",
            format!("expected a 1 x n point, got {:?}", x.shape()),
        ));
    }
    check_finite(x, "jacobian")?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&Dual::with_basis(xv));
    tape.check()?;
    let [yr, k] = y.primal.shape();
    if yr != 1 {
        return Err(Error::shape(
            "jacobian",
            format!("expected a 1 x k output, got {yr} rows"),
        ));
    }
    let n = x.cols();
    let mut out = Tensor::zeros(k, n);
    for (j, t) in y.tangents.iter().enumerate() {
        t.with_value(|col| {
            for i in 0..k {
                out.set(i, j, col.data()[i]);
            }
        });
    }
    Ok(out)
}
