//! Lanczos tridiagonalization, Gauss quadrature and Hutchinson trace estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eigen::symmetric_eigen;
use super::functions::ScalarFn;
use crate::error::Result;

/// Lanczos is stopped once the next off-diagonal entry drops below this value.
pub const BREAKDOWN: f64 = 1e-14;

/// A symmetric operator known only through its action on vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

/// Dense symmetric matrix viewed as an operator.
pub struct DenseOperator {
    pub n: usize,
    pub entries: Vec<f64>,
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| crate::tensor::dot(&self.entries[i * self.n..(i + 1) * self.n], v))
            .collect()
    }
}

/// Operator built from a closure.
pub struct FnOperator<F: Fn(&[f64]) -> Vec<f64>> {
    pub n: usize,
    pub matvec: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.matvec)(v)
    }
}

/// Tridiagonal coefficients from a Lanczos run.
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Set when the Krylov space was exhausted before the requested step count.
    pub broke_down: bool,
}

/// Runs `steps` Lanczos iterations from `start` with full reorthogonalization.
pub fn lanczos(op: &dyn LinearOperator, start: &[f64], steps: usize) -> Tridiagonal {
    let n = op.dim();
    let steps = steps.min(n).max(1);
    let norm = crate::tensor::dot(start, start).sqrt();
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / norm).collect()];
    let mut alpha = Vec::with_capacity(steps);
    let mut beta = Vec::with_capacity(steps);
    let mut broke_down = false;
    for k in 0..steps {
        let v = &basis[k];
        let mut w = op.apply(v);
        let a = crate::tensor::dot(&w, v);
        alpha.push(a);
        for q in &basis {
            let c = crate::tensor::dot(&w, q);
            w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
        }
        if k + 1 == steps {
            break;
        }
        let b = crate::tensor::dot(&w, &w).sqrt();
        if b < BREAKDOWN {
            broke_down = true;
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    Tridiagonal {
        alpha,
        beta,
        broke_down,
    }
}

/// Value of `e1^T v(T) e1` and its derivatives with respect to the
/// tridiagonal coefficients.
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub value: f64,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Gauss quadrature on the tridiagonal `T = tridiag(beta, alpha, beta)`.
///
/// Nodes are the Ritz values, weights the squared first components of the
/// Ritz vectors. Derivatives use the Daleckii-Krein formula
/// `dg/dT = Q (D ⊙ q q^T) Q^T` with `D` the divided differences of `v` at the
/// Ritz values and `q = Q^T e1`.
pub fn tridiagonal_quadrature(alpha: &[f64], beta: &[f64], f: ScalarFn) -> Result<Quadrature> {
    let k = alpha.len();
    debug_assert_eq!(beta.len() + 1, k);
    let mut t = vec![0.0; k * k];
    for i in 0..k {
        t[i * k + i] = alpha[i];
        if i + 1 < k {
            t[i * k + i + 1] = beta[i];
            t[(i + 1) * k + i] = beta[i];
        }
    }
    let eig = symmetric_eigen(&t, k)?;
    let q: Vec<f64> = (0..k).map(|j| eig.vector(0, j)).collect();
    let value = (0..k).map(|j| q[j] * q[j] * f.value(eig.values[j])).sum();

    // inner = D ⊙ q q^T in the eigenbasis
    let mut inner = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            inner[i * k + j] = f.divided_difference(eig.values[i], eig.values[j]) * q[i] * q[j];
        }
    }
    // G = Q inner Q^T
    let mut g = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for i in 0..k {
                let qa = eig.vector(a, i);
                if qa == 0.0 {
                    continue;
                }
                for j in 0..k {
                    s += qa * inner[i * k + j] * eig.vector(b, j);
                }
            }
            g[a * k + b] = s;
        }
    }
    let d_alpha = (0..k).map(|i| g[i * k + i]).collect();
    let d_beta = (0..k.saturating_sub(1))
        .map(|i| g[i * k + i + 1] + g[(i + 1) * k + i])
        .collect();
    Ok(Quadrature {
        value,
        d_alpha,
        d_beta,
    })
}

/// Stochastic Lanczos quadrature estimate of `z^T v(A) z` for one probe.
pub fn probe_quadrature(
    op: &dyn LinearOperator,
    z: &[f64],
    steps: usize,
    f: ScalarFn,
) -> Result<f64> {
    let tri = lanczos(op, z, steps);
    let q = tridiagonal_quadrature(&tri.alpha, &tri.beta[..tri.alpha.len() - 1], f)?;
    Ok(crate::tensor::dot(z, z) * q.value)
}

/// Rademacher probe vector with entries in `{-1, +1}`.
pub fn rademacher(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Outcome of a Hutchinson estimate.
#[derive(Clone, Debug)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error of the mean over probes (zero for a single probe).
    pub std_error: f64,
    pub samples: Vec<f64>,
}

/// Hutchinson estimate of `tr v(A)` with Rademacher probes and Lanczos
/// quadrature per probe.
pub fn hutchinson_trace(
    op: &dyn LinearOperator,
    f: ScalarFn,
    probes: usize,
    lanczos_steps: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.dim();
    let samples = (0..probes.max(1))
        .map(|_| {
            let z = rademacher(&mut rng, n);
            probe_quadrature(op, &z, lanczos_steps, f)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / p;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (p - 1.0);
        (var / p).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        mean,
        std_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_derivatives_match_finite_differences() {
        let alpha = [0.4, -1.3, 2.1];
        let beta = [0.7, 0.35];
        for f in [
            ScalarFn::NegExp,
            ScalarFn::LambdaNegExp,
            ScalarFn::NegReluSquared,
        ] {
            let q = tridiagonal_quadrature(&alpha, &beta, f).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let (mut p, mut m) = (alpha, alpha);
                p[i] += h;
                m[i] -= h;
                let fd = (tridiagonal_quadrature(&p, &beta, f).unwrap().value
                    - tridiagonal_quadrature(&m, &beta, f).unwrap().value)
                    / (2.0 * h);
                assert!(
                    (fd - q.d_alpha[i]).abs() < 1e-6,
                    "{f:?} alpha[{i}]: {fd} vs {}",
                    q.d_alpha[i]
                );
            }
            for i in 0..2 {
                let (mut p, mut m) = (beta, beta);
                p[i] += h;
                m[i] -= h;
                let fd = (tridiagonal_quadrature(&alpha, &p, f).unwrap().value
                    - tridiagonal_quadrature(&alpha, &m, f).unwrap().value)
                    / (2.0 * h);
                assert!(
                    (fd - q.d_beta[i]).abs() < 1e-6,
                    "{f:?} beta[{i}]: {fd} vs {}",
                    q.d_beta[i]
                );
            }
        }
    }

    #[test]
    fn breakdown_on_invariant_subspace() {
        let op = DenseOperator {
            n: 3,
            entries: vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 7.0],
        };
        let tri = lanczos(&op, &[1.0, 0.0, 0.0], 3);
        assert!(tri.broke_down);
        assert_eq!(tri.alpha, vec![2.0]);
    }
}
