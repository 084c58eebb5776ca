//! Scalar functions applied to spectra.

/// A scalar function `v(lambda)` whose trace `tr v(A)` is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarFn {
    Identity,
    /// `exp(-lambda)`
    NegExp,
    /// `lambda * exp(-lambda)`
    LambdaNegExp,
    /// `max(-lambda, 0)^2`
    NegReluSquared,
}

impl ScalarFn {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            ScalarFn::Identity => x,
            ScalarFn::NegExp => (-x).exp(),
            ScalarFn::LambdaNegExp => x * (-x).exp(),
            ScalarFn::NegReluSquared => {
                let r = (-x).max(0.0);
                r * r
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ScalarFn::Identity => 1.0,
            ScalarFn::NegExp => -(-x).exp(),
            ScalarFn::LambdaNegExp => (1.0 - x) * (-x).exp(),
            ScalarFn::NegReluSquared => -2.0 * (-x).max(0.0),
        }
    }

    /// First divided difference `(v(a) - v(b)) / (a - b)`, falling back to `v'`
    /// when the nodes coincide.
    pub fn divided_difference(self, a: f64, b: f64) -> f64 {
        let scale = 1.0 + a.abs().max(b.abs());
        if (a - b).abs() <= 1e-9 * scale {
            self.derivative(0.5 * (a + b))
        } else {
            (self.value(a) - self.value(b)) / (a - b)
        }
    }
}

/// A symmetric function of the whole spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralFn {
    /// `sum_j v(lambda_j)`
    Trace(ScalarFn),
    /// `sum_j lambda_j e^{-lambda_j} / sum_j e^{-lambda_j}`, a smooth minimum.
    SoftMin,
}

impl SpectralFn {
    /// Value and gradient with respect to each eigenvalue.
    pub fn value_and_grad(self, lambdas: &[f64]) -> (f64, Vec<f64>) {
        match self {
            SpectralFn::Trace(f) => (
                lambdas.iter().map(|&l| f.value(l)).sum(),
                lambdas.iter().map(|&l| f.derivative(l)).collect(),
            ),
            SpectralFn::SoftMin => {
                let lo = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
                let w: Vec<f64> = lambdas.iter().map(|&l| (-(l - lo)).exp()).collect();
                let z: f64 = w.iter().sum();
                let s: f64 = w.iter().zip(lambdas).map(|(wi, l)| wi * l).sum::<f64>() / z;
                let g = w
                    .iter()
                    .zip(lambdas)
                    .map(|(wi, l)| wi / z * (1.0 - l + s))
                    .collect();
                (s, g)
            }
        }
    }
}
