//! Penalties on negative eigenvalues of the Lie-derivative operator.

use super::eigen::symmetric_eigen;
use super::functions::ScalarFn;
use super::lanczos::{hutchinson_trace, LinearOperator, BREAKDOWN};
use crate::autodiff::{jvp_with_value, vjp, Dual, Var};
use crate::error::{Error, Result};
use crate::geometry::lie_derivative_matrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    /// `T^2 ((-softmin(lambda))_+)^2` with `softmin = sum l e^-l / sum e^-l`.
    SoftMin,
    /// `T^2 sum_j ((-lambda_j)_+)^2`
    ReluSquared,
}

impl Penalty {
    pub fn name(self) -> &'static str {
        match self {
            Penalty::SoftMin => "softmin",
            Penalty::ReluSquared => "relu-squared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmin" => Some(Penalty::SoftMin),
            "relu-squared" => Some(Penalty::ReluSquared),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Jacobi eigenvalues of the assembled matrix.
    ExactEigen,
    /// Hutchinson trace estimates with Lanczos quadrature per probe.
    Lanczos { steps: usize, probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpectralPenaltySpec {
    pub penalty: Penalty,
    pub estimator: Estimator,
}

impl Default for SpectralPenaltySpec {
    fn default() -> Self {
        Self {
            penalty: Penalty::SoftMin,
            estimator: Estimator::ExactEigen,
        }
    }
}

impl SpectralPenaltySpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Estimator::Lanczos { steps, probes } = self.estimator {
            if steps == 0 || steps > n || probes == 0 {
                return Err(Error::config(
                    "penalty",
                    format!("need 1 <= lanczos_steps <= n = {n} and probes >= 1, got {steps} steps, {probes} probes"),
                ));
            }
        }
        Ok(())
    }
}

/// Ascending eigenvalues of a symmetric `n x n` tensor.
pub fn eigenvalues_exact(a: &Tensor) -> Result<Vec<f64>> {
    let [r, c] = a.shape();
    if r != c {
        return Err(Error::shape(
            "eigenvalues_exact",
            format!("matrix is {r} x {c}"),
        ));
    }
    Ok(symmetric_eigen(a.data(), r)?.values)
}

/// `sum l e^-l / sum e^-l`, evaluated with a shift for stability.
pub fn softmin(lambdas: &[f64]) -> f64 {
    super::functions::SpectralFn::SoftMin
        .value_and_grad(lambdas)
        .0
}

/// Penalty value from a spectrum and the time value.
pub fn penalty_from_eigenvalues(penalty: Penalty, lambdas: &[f64], t: f64) -> f64 {
    match penalty {
        Penalty::SoftMin => t * t * (-softmin(lambdas)).max(0.0).powi(2),
        Penalty::ReluSquared => {
            t * t
                * lambdas
                    .iter()
                    .map(|&l| ScalarFn::NegReluSquared.value(l))
                    .sum::<f64>()
        }
    }
}

/// The Lie-derivative operator `v -> sign (J v + J^T v + c v)` at a point,
/// applied through one JVP and one VJP per product.
pub struct LinearOperatorHandle<'a> {
    n: usize,
    point: Tensor,
    field: &'a dyn Fn(&Dual) -> Dual,
    conformal: f64,
    sign: f64,
}

impl<'a> LinearOperatorHandle<'a> {
    /// `sigma` maps a point to a `1 x 1` value; `None` is the zero factor.
    pub fn lie_derivative(
        field: &'a dyn Fn(&Dual) -> Dual,
        sigma: Option<&dyn Fn(&Dual) -> Dual>,
        sign: f64,
        x: &Tensor,
    ) -> Result<Self> {
        let n = x.cols();
        let conformal = match sigma {
            Some(s) => {
                let (f, _) = jvp_with_value(field, x, &Tensor::zeros(1, n))?;
                jvp_with_value(s, x, &f)?.1.item()?
            }
            None => 0.0,
        };
        Ok(Self {
            n,
            point: x.clone(),
            field,
            conformal,
            sign,
        })
    }
}

impl LinearOperator for LinearOperatorHandle<'_> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let dir = Tensor::row(v);
        let (_, jv) = jvp_with_value(self.field, &self.point, &dir).expect("finite JVP");
        let jtv = vjp(self.field, &self.point, &dir).expect("finite VJP");
        (0..self.n)
            .map(|k| self.sign * (jv.data()[k] + jtv.data()[k] + self.conformal * v[k]))
            .collect()
    }
}

/// Penalty of one field at a `1 x n` point.
///
/// `seed` fixes the probes of the matrix-free estimator.
pub fn psd_penalty(
    field: &dyn Fn(&Dual) -> Dual,
    sigma: Option<&dyn Fn(&Dual) -> Dual>,
    t_value: f64,
    x: &Tensor,
    spec: &SpectralPenaltySpec,
    seed: u64,
) -> Result<f64> {
    spec.validate(x.cols())?;
    let sign = if t_value < 0.0 { -1.0 } else { 1.0 };
    match spec.estimator {
        Estimator::ExactEigen => {
            let a = lie_derivative_matrix(field, sigma, sign, x)?;
            Ok(penalty_from_eigenvalues(
                spec.penalty,
                &eigenvalues_exact(&a)?,
                t_value,
            ))
        }
        Estimator::Lanczos { steps, probes } => {
            let op = LinearOperatorHandle::lie_derivative(field, sigma, sign, x)?;
            let t2 = t_value * t_value;
            match spec.penalty {
                Penalty::ReluSquared => {
                    Ok(t2
                        * hutchinson_trace(&op, ScalarFn::NegReluSquared, probes, steps, seed)?
                            .mean)
                }
                Penalty::SoftMin => {
                    let num =
                        hutchinson_trace(&op, ScalarFn::LambdaNegExp, probes, steps, seed)?.mean;
                    let den = hutchinson_trace(&op, ScalarFn::NegExp, probes, steps, seed)?.mean;
                    Ok(t2 * (-num / den).max(0.0).powi(2))
                }
            }
        }
    }
}

/// Differentiable Lanczos on the tape, one independent Krylov run per row.
///
/// `start` holds the (constant) probe vectors as rows and `matvec` applies the
/// operator row by row. Returns the tridiagonal coefficients and the number of
/// valid steps per row (fewer than `steps` after a breakdown).
pub fn lanczos_rows(
    matvec: &dyn Fn(&Var) -> Var,
    start: &Var,
    steps: usize,
) -> (Var, Var, Vec<usize>) {
    let [rows, n] = start.shape();
    let steps = steps.clamp(1, n);
    let norms: Vec<f64> = start.with_value(|z| {
        (0..rows)
            .map(|r| crate::tensor::dot(z.row_slice(r), z.row_slice(r)).sqrt())
            .collect()
    });
    let q0 = start.mul_col(&start.constant_like(Tensor::column(
        &norms.iter().map(|v| 1.0 / v).collect::<Vec<_>>(),
    )));
    let rowdot = |a: &Var, b: &Var| (a * b).sum_cols();
    let mut basis = vec![q0];
    let mut alphas = Vec::with_capacity(steps);
    let mut betas = Vec::with_capacity(steps);
    let mut sizes = vec![steps; rows];
    for k in 0..steps {
        let mut w = matvec(&basis[k]);
        alphas.push(rowdot(&w, &basis[k]));
        for q in &basis {
            w = &w - &q.mul_col(&rowdot(&w, q));
        }
        if k + 1 == steps {
            break;
        }
        let b = rowdot(&w, &w).add_scalar(1e-300).sqrt();
        let mask: Vec<bool> = b.with_value(|v| v.data().iter().map(|&x| x >= BREAKDOWN).collect());
        for (r, ok) in mask.iter().enumerate() {
            if !ok && sizes[r] > k + 1 {
                sizes[r] = k + 1;
            }
        }
        // rows past a breakdown keep finite but unused coefficients
        let alive: Vec<bool> = (0..rows).map(|r| sizes[r] > k + 1).collect();
        let one = b.constant_like(Tensor::filled(rows, 1, 1.0));
        let safe = Var::select(alive, &b, &one);
        betas.push(safe.clone());
        basis.push(w.mul_col(&safe.recip()));
    }
    let alpha = Var::concat(&alphas);
    let beta = if betas.is_empty() {
        alpha.constant_like(Tensor::zeros(rows, 0))
    } else {
        Var::concat(&betas)
    };
    (alpha, beta, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::lanczos::rademacher;

    #[test]
    fn softmin_of_contraction() {
        let lambdas = [-2.0, -2.0, -2.0];
        assert!((penalty_from_eigenvalues(Penalty::SoftMin, &lambdas, 1.0) - 4.0).abs() < 1e-12);
        assert!(
            (penalty_from_eigenvalues(Penalty::ReluSquared, &lambdas, 1.0) - 12.0).abs() < 1e-12
        );
    }

    #[test]
    fn taped_lanczos_matches_plain_quadrature() {
        let n = 5;
        let mut rng = crate::seeding::rng(3);
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = (i * 7 + j * 3) as f64 % 5.0 - 2.0;
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let z = rademacher(&mut rng, n);
        let tape = crate::autodiff::Tape::new();
        let mv = tape.constant(m.clone());
        let start = tape.constant(Tensor::row(&z));
        let (alpha, beta, sizes) = lanczos_rows(&|q: &Var| q.matmul_t(&mv), &start, n);
        let q = Var::lanczos_quadrature(&alpha, &beta, &sizes, ScalarFn::NegExp).unwrap();
        let got = q.value().item().unwrap() * n as f64;
        let eig = symmetric_eigen(m.data(), n).unwrap();
        let fz = eig.reassemble(&eig.values.iter().map(|l| (-l).exp()).collect::<Vec<_>>());
        let want: f64 = (0..n)
            .map(|i| (0..n).map(|j| z[i] * fz[i * n + j] * z[j]).sum::<f64>())
            .sum();
        assert!(
            (got - want).abs() < 1e-8 * want.abs().max(1.0),
            "{got} vs {want}"
        );
    }
}
