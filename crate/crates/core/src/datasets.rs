//! Synthetic manifolds with analytic tangent and normal frames.
//!
//! | name         | n | m | construction                                                        |
//! |--------------|---|---|---------------------------------------------------------------------|
//! | `plane4d`    | 4 | 3 | `Q a`, `a ~ U[-1, 1]^3 / sqrt 3`, `Q` a seeded orthonormal 4x3 basis |
//! | `sphere`     | 3 | 2 | normalized Gaussians, radius 1                                      |
//! | `torus`      | 3 | 2 | uniform angles, radii `R = 2`, `r = 1`, scaled by `1/3`             |
//! | `swiss_roll` | 3 | 2 | `(p cos p, h, p sin p)`, `p in [1.5 pi, 4.5 pi]`, `h in [0, 10]`, scaled by `1/(4.5 pi)`, centered in `h` |
//! | `paraboloid` | 3 | 2 | `(x1, x2) ~ U[-1, 1]^2`, `x3 = x1^2 - x2^2`                        |

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

pub const DATASET_NAMES: [&str; 5] = ["plane4d", "sphere", "torus", "swiss_roll", "paraboloid"];

const TORUS_MAJOR: f64 = 2.0 / 3.0;
const TORUS_MINOR: f64 = 1.0 / 3.0;
const ROLL_SCALE: f64 = 1.0 / (4.5 * PI);
const ROLL_HEIGHT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train: usize,
    pub test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train: 10_000,
            test: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Manifold {
    /// Columns 0..3 of `basis` span the plane, column 3 is its normal.
    Plane4d {
        basis: Tensor,
    },
    Sphere,
    Torus,
    SwissRoll,
    Paraboloid,
}

impl Manifold {
    pub fn from_name(name: &str, seed: u64) -> Result<Self> {
        Ok(match name {
            "plane4d" => Manifold::Plane4d {
                basis: random_orthonormal(4, seeding::stream_seed(seed, &[BASIS_STREAM])),
            },
            "sphere" => Manifold::Sphere,
            "torus" => Manifold::Torus,
            "swiss_roll" => Manifold::SwissRoll,
            "paraboloid" => Manifold::Paraboloid,
            _ => {
                return Err(Error::config(
                    "dataset",
                    format!("unknown dataset `{name}`, expected one of {DATASET_NAMES:?}"),
                ))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Manifold::Plane4d { .. } => "plane4d",
            Manifold::Sphere => "sphere",
            Manifold::Torus => "torus",
            Manifold::SwissRoll => "swiss_roll",
            Manifold::Paraboloid => "paraboloid",
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Plane4d { .. } => 4,
            _ => 3,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Plane4d { .. } => 3,
            _ => 2,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        match self {
            Manifold::Plane4d { basis } => {
                let a: Vec<f64> = (0..3).map(|_| u(-1.0, 1.0) / 3f64.sqrt()).collect();
                (0..4)
                    .map(|r| (0..3).map(|k| basis.get(r, k) * a[k]).sum())
                    .collect()
            }
            Manifold::Sphere => loop {
                let g: Vec<f64> = (0..3)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = norm(&g);
                if norm > 1e-8 {
                    break g.iter().map(|v| v / norm).collect();
                }
            },
            Manifold::Torus => {
                let (a, b) = (u(0.0, 2.0 * PI), u(0.0, 2.0 * PI));
                let ring = TORUS_MAJOR + TORUS_MINOR * b.cos();
                vec![ring * a.cos(), ring * a.sin(), TORUS_MINOR * b.sin()]
            }
            Manifold::SwissRoll => {
                let (p, h) = (u(1.5 * PI, 4.5 * PI), u(0.0, ROLL_HEIGHT));
                vec![
                    ROLL_SCALE * p * p.cos(),
                    ROLL_SCALE * (h - ROLL_HEIGHT / 2.0),
                    ROLL_SCALE * p * p.sin(),
                ]
            }
            Manifold::Paraboloid => {
                let (a, b) = (u(-1.0, 1.0), u(-1.0, 1.0));
                vec![a, b, a * a - b * b]
            }
        }
    }

    /// Implicit functions whose common zero set is the manifold.
    pub fn implicit(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Plane4d { basis } => vec![(0..4).map(|r| basis.get(r, 3) * x[r]).sum()],
            Manifold::Sphere => vec![x.iter().map(|v| v * v).sum::<f64>() - 1.0],
            Manifold::Torus => {
                let rho = x[0].hypot(x[1]);
                vec![(rho - TORUS_MAJOR).powi(2) + x[2] * x[2] - TORUS_MINOR * TORUS_MINOR]
            }
            Manifold::SwissRoll => {
                let (a, b) = (x[0] / ROLL_SCALE, x[2] / ROLL_SCALE);
                let rho = a.hypot(b);
                vec![a * rho.sin() - b * rho.cos()]
            }
            Manifold::Paraboloid => vec![x[2] - x[0] * x[0] + x[1] * x[1]],
        }
    }

    /// Orthonormal tangent frame, `n x m`.
    pub fn tangent_at(&self, x: &[f64]) -> Tensor {
        let vectors = match self {
            Manifold::Plane4d { basis } => (0..3)
                .map(|k| (0..4).map(|r| basis.get(r, k)).collect())
                .collect(),
            Manifold::Sphere => {
                let normal = self.normals_raw(x).remove(0);
                let k = (0..3)
                    .min_by(|&a, &b| normal[a].abs().total_cmp(&normal[b].abs()))
                    .expect("three axes");
                let mut axis = vec![0.0; 3];
                axis[k] = 1.0;
                let q = gram_schmidt(&[normal, axis]);
                let (a, b) = (&q[0], &q[1]);
                let c = vec![
                    a[1] * b[2] - a[2] * b[1],
                    a[2] * b[0] - a[0] * b[2],
                    a[0] * b[1] - a[1] * b[0],
                ];
                vec![b.clone(), c]
            }
            Manifold::Torus => {
                let a = x[1].atan2(x[0]);
                let b = x[2].atan2(x[0].hypot(x[1]) - TORUS_MAJOR);
                vec![
                    vec![-a.sin(), a.cos(), 0.0],
                    vec![-b.sin() * a.cos(), -b.sin() * a.sin(), b.cos()],
                ]
            }
            Manifold::SwissRoll => {
                let p = x[0].hypot(x[2]) / ROLL_SCALE;
                vec![
                    vec![p.cos() - p * p.sin(), 0.0, p.sin() + p * p.cos()],
                    vec![0.0, 1.0, 0.0],
                ]
            }
            Manifold::Paraboloid => vec![vec![1.0, 0.0, 2.0 * x[0]], vec![0.0, 1.0, -2.0 * x[1]]],
        };
        columns(&gram_schmidt(&vectors)).expect("tangent frame has full rank")
    }

    fn normals_raw(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Manifold::Plane4d { basis } => vec![(0..4).map(|r| basis.get(r, 3)).collect()],
            Manifold::Sphere => vec![x.to_vec()],
            Manifold::Torus => {
                let a = x[1].atan2(x[0]);
                let b = x[2].atan2(x[0].hypot(x[1]) - TORUS_MAJOR);
                vec![vec![b.cos() * a.cos(), b.cos() * a.sin(), b.sin()]]
            }
            Manifold::SwissRoll => {
                let p = x[0].hypot(x[2]) / ROLL_SCALE;
                vec![vec![-(p.sin() + p * p.cos()), 0.0, p.cos() - p * p.sin()]]
            }
            Manifold::Paraboloid => vec![vec![-2.0 * x[0], 2.0 * x[1], 1.0]],
        }
    }

    /// Orthonormal normal frame, `n x (n - m)`.
    pub fn normal_at(&self, x: &[f64]) -> Tensor {
        columns(&gram_schmidt(&self.normals_raw(x))).expect("normal frame has full rank")
    }
}

const BASIS_STREAM: u64 = 0xba515;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Modified Gram-Schmidt; drops vectors that are numerically dependent.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let d: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let len = norm(&w);
        if len > 1e-12 * norm(v).max(1e-300) {
            out.push(w.iter().map(|a| a / len).collect());
        }
    }
    out
}

fn columns(vectors: &[Vec<f64>]) -> Result<Tensor> {
    let n = vectors.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(n, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            t.set(i, j, *x);
        }
    }
    Ok(t)
}

fn random_orthonormal(n: usize, seed: u64) -> Tensor {
    let mut rng = seeding::rng(seed);
    loop {
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let q = gram_schmidt(&vs);
        if q.len() == n {
            return columns(&q).expect("square basis");
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldDataset {
    pub manifold: Manifold,
    pub train: Tensor,
    pub test: Tensor,
    pub seed: u64,
}

impl ManifoldDataset {
    pub fn name(&self) -> &'static str {
        self.manifold.name()
    }

    pub fn ambient_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.manifold.intrinsic_dim()
    }

    pub fn normal_at(&self, x: &[f64]) -> Tensor {
        self.manifold.normal_at(x)
    }

    pub fn tangent_at(&self, x: &[f64]) -> Tensor {
        self.manifold.tangent_at(x)
    }
}

fn draw(manifold: &Manifold, count: usize, seed: u64) -> Tensor {
    let n = manifold.ambient_dim();
    let mut rng = seeding::rng(seed);
    let mut data = Vec::with_capacity(count * n);
    for _ in 0..count {
        data.extend(manifold.sample(&mut rng));
    }
    Tensor::from_vec(count, n, data).expect("rows of ambient length")
}

pub fn make_dataset(name: &str, counts: DatasetCounts, seed: u64) -> Result<ManifoldDataset> {
    let manifold = Manifold::from_name(name, seed)?;
    if counts.train == 0 {
        return Err(Error::config(
            "train_points",
            "need at least one training point",
        ));
    }
    let train = draw(
        &manifold,
        counts.train,
        seeding::stream_seed(seed, &[TRAIN_STREAM]),
    );
    let test = draw(
        &manifold,
        counts.test,
        seeding::stream_seed(seed, &[TEST_STREAM]),
    );
    Ok(ManifoldDataset {
        manifold,
        train,
        test,
        seed,
    })
}

/// Writes one point per row under the header `x0,...,x{n-1}`.
pub fn write_csv(path: &Path, points: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..points.cols()).map(|j| format!("x{j}")))?;
    for r in 0..points.rows() {
        w.write_record(points.row_slice(r).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.len();
    for (j, h) in header.iter().enumerate() {
        if h != format!("x{j}") {
            return Err(Error::config(
                "csv",
                format!("column {j} is `{h}`, expected `x{j}`"),
            ));
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        for v in record?.iter() {
            data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config("csv", format!("bad number `{v}`")))?,
            );
        }
        rows += 1;
    }
    Tensor::from_vec(rows, n, data)
}
