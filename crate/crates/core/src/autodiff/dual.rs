//! Forward-mode dual numbers whose primal and tangent parts are tape
//! variables.
//!
//! Because tangents live on the reverse-mode tape, any quantity built from
//! Jacobian-vector products (Lie brackets, Jacobians, time derivatives) can
//! itself be differentiated with respect to network parameters.

use super::tape::{UnaryFn, Var};
use crate::tensor::Tensor;

/// A primal value with any number of tangent directions.
#[derive(Clone)]
pub struct Dual {
    pub primal: Var,
    pub tangents: Vec<Var>,
}

impl Dual {
    pub fn new(primal: Var, tangents: Vec<Var>) -> Self {
        for t in &tangents {
            assert_eq!(t.shape(), primal.shape(), "tangent shape must match primal");
        }
        Self { primal, tangents }
    }

    /// A value with no tangent directions.
    pub fn constant(primal: Var) -> Self {
        Self {
            primal,
            tangents: Vec::new(),
        }
    }

    /// Seeds one tangent per standard basis direction of the columns.
    pub fn with_basis(primal: Var) -> Self {
        let [rows, cols] = primal.shape();
        let tangents = (0..cols)
            .map(|k| {
                let mut e = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    e.set(r, k, 1.0);
                }
                primal.constant_like(e)
            })
            .collect();
        Self { primal, tangents }
    }

    pub fn directions(&self) -> usize {
        self.tangents.len()
    }

    fn map_tangents(&self, f: impl Fn(&Var) -> Var) -> Vec<Var> {
        self.tangents.iter().map(f).collect()
    }

    /// Dense layer `x W^T + b` with parameters constant in the forward direction.
    pub fn affine(&self, weight: &Var, bias: &Var) -> Dual {
        Dual {
            primal: self.primal.matmul_t(weight).add_row(bias),
            tangents: self.map_tangents(|t| t.matmul_t(weight)),
        }
    }

    pub fn unary(&self, f: UnaryFn) -> Dual {
        let primal = self.primal.unary(f);
        if self.tangents.is_empty() {
            return Dual::constant(primal);
        }
        let slope = match f {
            UnaryFn::Square => self.primal.scale(2.0),
            UnaryFn::Sqrt => primal.recip().scale(0.5),
            UnaryFn::Recip => -(&primal * &primal),
            other => {
                let d = other
                    .derivative_fn()
                    .unwrap_or_else(|| panic!("no forward rule registered for {}", other.name()));
                self.primal.unary(d)
            }
        };
        let tangents = self.map_tangents(|t| &slope * t);
        Dual { primal, tangents }
    }

    pub fn add(&self, other: &Dual) -> Dual {
        Dual {
            primal: &self.primal + &other.primal,
            tangents: zip_tangents(self, other, |a, b| a + b, |a| a.clone(), |b| b.clone()),
        }
    }

    pub fn sub(&self, other: &Dual) -> Dual {
        Dual {
            primal: &self.primal - &other.primal,
            tangents: zip_tangents(self, other, |a, b| a - b, |a| a.clone(), |b| -b),
        }
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Dual) -> Dual {
        let (p, q) = (&self.primal, &other.primal);
        Dual {
            primal: p * q,
            tangents: zip_tangents(self, other, |a, b| a * q + p * b, |a| a * q, |b| p * b),
        }
    }

    /// Row scaling by a `rows x 1` dual.
    pub fn mul_col(&self, s: &Dual) -> Dual {
        let (p, q) = (&self.primal, &s.primal);
        Dual {
            primal: p.mul_col(q),
            tangents: zip_tangents(
                self,
                s,
                |a, b| a.mul_col(q) + p.mul_col(b),
                |a| a.mul_col(q),
                |b| p.mul_col(b),
            ),
        }
    }

    pub fn scale(&self, k: f64) -> Dual {
        Dual {
            primal: self.primal.scale(k),
            tangents: self.map_tangents(|t| t.scale(k)),
        }
    }

    pub fn add_scalar(&self, k: f64) -> Dual {
        Dual {
            primal: self.primal.add_scalar(k),
            tangents: self.tangents.clone(),
        }
    }

    pub fn sum_cols(&self) -> Dual {
        Dual {
            primal: self.primal.sum_cols(),
            tangents: self.map_tangents(Var::sum_cols),
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Dual {
        Dual {
            primal: self.primal.slice_cols(start, len),
            tangents: self.map_tangents(|t| t.slice_cols(start, len)),
        }
    }

    pub fn concat(parts: &[Dual]) -> Dual {
        let k = parts.iter().map(Dual::directions).max().unwrap_or(0);
        let primal = Var::concat(&parts.iter().map(|p| p.primal.clone()).collect::<Vec<_>>());
        let tangents = (0..k)
            .map(|d| {
                let pieces: Vec<Var> = parts
                    .iter()
                    .map(|p| match p.tangents.get(d) {
                        Some(t) => t.clone(),
                        None => {
                            let [r, c] = p.primal.shape();
                            p.primal.constant_like(Tensor::zeros(r, c))
                        }
                    })
                    .collect();
                Var::concat(&pieces)
            })
            .collect();
        Dual { primal, tangents }
    }

    /// `max(x, lo)`; tangents vanish where the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Dual {
        let primal = self.primal.clamp_min(lo);
        if self.tangents.is_empty() {
            return Dual::constant(primal);
        }
        let mask: Vec<bool> = self
            .primal
            .with_value(|v| v.data().iter().map(|&x| x > lo).collect());
        let [r, c] = self.primal.shape();
        let zero = self.primal.constant_like(Tensor::zeros(r, c));
        let tangents = self.map_tangents(|t| Var::select(mask.clone(), t, &zero));
        Dual { primal, tangents }
    }
}

fn zip_tangents(
    a: &Dual,
    b: &Dual,
    both: impl Fn(&Var, &Var) -> Var,
    only_a: impl Fn(&Var) -> Var,
    only_b: impl Fn(&Var) -> Var,
) -> Vec<Var> {
    let (ka, kb) = (a.directions(), b.directions());
    assert!(
        ka == kb || ka == 0 || kb == 0,
        "mismatched tangent counts {ka} and {kb}"
    );
    (0..ka.max(kb))
        .map(|d| match (a.tangents.get(d), b.tangents.get(d)) {
            (Some(x), Some(y)) => both(x, y),
            (Some(x), None) => only_a(x),
            (None, Some(y)) => only_b(y),
            (None, None) => unreachable!(),
        })
        .collect()
}
