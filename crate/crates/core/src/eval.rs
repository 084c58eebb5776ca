//! Measurements on trained models: tangency, collapse onto `C`, intrinsic
//! dimension, coordinates and coefficient sweeps.

use std::path::Path;

use serde::Serialize;

use crate::datasets::{make_dataset, Manifold, ManifoldDataset};
use crate::error::{Error, Result};
use crate::geometry::checks::STATIONARY_SPEED;
use crate::geometry::{
    integrate_flow, integrate_until_stationary, lie_bracket, FlowOptions, StopReason,
};
use crate::models::FrameModel;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

/// Frame loss below which a field count is taken to span the manifold.
pub const ZERO_LOSS_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
                count,
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if count % 2 == 1 {
            sorted[count / 2]
        } else {
            0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
        };
        Self {
            mean,
            std: var.sqrt(),
            median,
            max: sorted[count - 1],
            count,
        }
    }
}

/// Deviation from tangency in degrees: `asin |N^T v| / |v|` for an
/// orthonormal normal frame `N`. Zero for tangent vectors, 90 for normals.
pub fn tangency_deviation_deg(v: &[f64], normal: &Tensor) -> f64 {
    let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if len == 0.0 {
        return 90.0;
    }
    let proj: f64 = (0..normal.cols())
        .map(|j| {
            (0..normal.rows())
                .map(|i| normal.get(i, j) * v[i])
                .sum::<f64>()
                .powi(2)
        })
        .sum::<f64>()
        .sqrt();
    (proj / len).min(1.0).asin().to_degrees()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngularError {
    pub mean_deg: f64,
    pub std_deg: f64,
    /// Mean per field.
    pub per_field_deg: Vec<f64>,
}

/// Tangency deviation of every learned field at every point.
pub fn angular_error(
    model: &FrameModel,
    manifold: &Manifold,
    points: &Tensor,
) -> Result<AngularError> {
    let fv = model.eval_fields(points)?;
    let mut all = Vec::with_capacity(points.rows() * model.m);
    let mut per_field = vec![0.0; model.m];
    for r in 0..points.rows() {
        let normal = manifold.normal_at(points.row_slice(r));
        for (j, acc) in per_field.iter_mut().enumerate() {
            let a = tangency_deviation_deg(fv.field(r, j), &normal);
            *acc += a / points.rows() as f64;
            all.push(a);
        }
    }
    let s = Stats::of(&all);
    Ok(AngularError {
        mean_deg: s.mean,
        std_deg: s.std,
        per_field_deg: per_field,
    })
}

/// Options for the flows used in evaluation.
pub fn eval_flow_options() -> FlowOptions {
    FlowOptions {
        rtol: 1e-7,
        atol: 1e-9,
        max_steps: 50_000,
        ..FlowOptions::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollapseResidual {
    /// `|phi(x) - C|` per point; `NaN` where integration failed.
    pub distances: Vec<f64>,
    pub stats: Stats,
    /// Indices of points whose integration failed.
    pub failures: Vec<usize>,
    /// Points that hit the time cap before becoming stationary.
    pub time_limited: usize,
}

/// Flows the combined field from each point until it is stationary and
/// measures the distance of the endpoint to `C`.
pub fn collapse_residual(
    model: &FrameModel,
    points: &Tensor,
    opts: &FlowOptions,
) -> Result<CollapseResidual> {
    if points.cols() != model.n {
        return Err(Error::Dimension(format!(
            "points have {} columns, model expects {}",
            points.cols(),
            model.n
        )));
    }
    let field = |x: &[f64]| model.combined_velocity(x);
    let c = model.c.data();
    let mut distances = Vec::with_capacity(points.rows());
    let mut failures = Vec::new();
    let mut time_limited = 0;
    for r in 0..points.rows() {
        match integrate_until_stationary(&field, points.row_slice(r), STATIONARY_SPEED, opts) {
            Ok(trace) => {
                if trace.stop == StopReason::TimeLimit {
                    time_limited += 1;
                }
                let d = trace
                    .final_state()
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                distances.push(d);
            }
            Err(_) => {
                failures.push(r);
                distances.push(f64::NAN);
            }
        }
    }
    let ok: Vec<f64> = distances
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .collect();
    Ok(CollapseResidual {
        stats: Stats::of(&ok),
        distances,
        failures,
        time_limited,
    })
}

/// `phi_m o ... o phi_1(x)`, each flow run for `T_i` at the point where it
/// starts.
pub fn composed_flow(model: &FrameModel, x: &[f64], opts: &FlowOptions) -> Result<Vec<f64>> {
    let mut z = x.to_vec();
    for i in 0..model.m {
        let field = |p: &[f64]| {
            model
                .eval_fields(&Tensor::row(p))
                .map(|f| f.field(0, i).to_vec())
                .unwrap_or_else(|_| vec![f64::NAN; p.len()])
        };
        let tau = model.eval_fields(&Tensor::row(&z))?.t.get(0, i);
        z = integrate_flow(&field, &z, tau.max(0.0), opts)?
            .final_state()
            .to_vec();
    }
    Ok(z)
}

/// The frame loss `mean |C - phi_m o ... o phi_1(x)|^2` over the points.
/// A point whose integration fails contributes its starting distance.
pub fn frame_loss(model: &FrameModel, points: &Tensor, opts: &FlowOptions) -> Result<f64> {
    if points.cols() != model.n {
        return Err(Error::Dimension(format!(
            "points have {} columns, model expects {}",
            points.cols(),
            model.n
        )));
    }
    let c = model.c.data();
    let sq = |p: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut total = 0.0;
    for r in 0..points.rows() {
        let x = points.row_slice(r);
        total += match composed_flow(model, x, opts) {
            Ok(end) => sq(&end),
            Err(_) => sq(x),
        };
    }
    Ok(total / points.rows().max(1) as f64)
}

impl CollapseResidual {
    /// `mean |C - endpoint|^2`, failed points contributing their starting
    /// distance.
    pub fn mean_square(&self, points: &Tensor, c: &[f64]) -> f64 {
        let total: f64 = self
            .distances
            .iter()
            .enumerate()
            .map(|(r, d)| {
                if d.is_finite() {
                    d * d
                } else {
                    points
                        .row_slice(r)
                        .iter()
                        .zip(c)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                }
            })
            .sum();
        total / points.rows().max(1) as f64
    }
}

/// Sum of `|[F_i, F_j]|` over pairs `i < j` at each point.
pub fn commuting_residual(model: &FrameModel, points: &Tensor) -> Result<Stats> {
    let mut out = Vec::with_capacity(points.rows());
    for r in 0..points.rows() {
        let x = Tensor::row(points.row_slice(r));
        let mut total = 0.0;
        for i in 0..model.m {
            for j in i + 1..model.m {
                total += lie_bracket(model.field_map(i), model.field_map(j), &x)?.norm();
            }
        }
        out.push(total);
    }
    Ok(Stats::of(&out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinates {
    /// `T_i(x)`, one row per point.
    pub time: Tensor,
    /// Arc length travelled along each field, when requested.
    pub arc_length: Option<Tensor>,
    /// Points whose arc-length integration failed (their rows hold `NaN`).
    pub failures: Vec<usize>,
}

/// Intrinsic coordinates: the time functions, and optionally the arc lengths
/// of the sequential flows `phi_1, ..., phi_m`.
pub fn extract_coordinates(
    model: &FrameModel,
    points: &Tensor,
    arc_length: bool,
    opts: &FlowOptions,
) -> Result<Coordinates> {
    let fv = model.eval_fields(points)?;
    let time = fv.t.clone();
    if !arc_length {
        return Ok(Coordinates {
            time,
            arc_length: None,
            failures: Vec::new(),
        });
    }
    let mut arcs = Tensor::zeros(points.rows(), model.m);
    let mut failures = Vec::new();
    for r in 0..points.rows() {
        let mut z = points.row_slice(r).to_vec();
        for i in 0..model.m {
            let field = |p: &[f64]| {
                model
                    .eval_fields(&Tensor::row(p))
                    .map(|f| f.field(0, i).to_vec())
                    .unwrap_or_else(|_| vec![f64::NAN; p.len()])
            };
            let tau = model.eval_fields(&Tensor::row(&z))?.t.get(0, i);
            match integrate_flow(&field, &z, tau.max(0.0), opts) {
                Ok(trace) => {
                    arcs.set(r, i, trace.total_arc_length());
                    z = trace.final_state().to_vec();
                }
                Err(_) => {
                    failures.push(r);
                    for k in i..model.m {
                        arcs.set(r, k, f64::NAN);
                    }
                    break;
                }
            }
        }
    }
    Ok(Coordinates {
        time,
        arc_length: Some(arcs),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimensionCurve {
    /// `(m, frame loss)` in the order trained.
    pub losses: Vec<(usize, f64)>,
    /// Smallest `m` whose frame loss is below [`ZERO_LOSS_THRESHOLD`].
    pub detected: Option<usize>,
}

pub fn detect_from_curve(losses: &[(usize, f64)]) -> Option<usize> {
    losses
        .iter()
        .filter(|(_, l)| *l < ZERO_LOSS_THRESHOLD)
        .map(|(m, _)| *m)
        .min()
}

/// Trains one model per field count and reads off the intrinsic dimension.
pub fn dimension_detect(
    dataset: &ManifoldDataset,
    m_range: &[usize],
    config: &TrainConfig,
    eval_points: usize,
) -> Result<DimensionCurve> {
    if m_range.is_empty() {
        return Err(Error::config("m_range", "need at least one field count"));
    }
    let points = head_rows(&dataset.test, eval_points);
    let mut losses = Vec::with_capacity(m_range.len());
    for &m in m_range {
        let run = train(
            &TrainConfig {
                m,
                ..config.clone()
            },
            &dataset.train,
        )?;
        losses.push((m, frame_loss(&run.model, &points, &eval_flow_options())?));
    }
    let detected = detect_from_curve(&losses);
    Ok(DimensionCurve { losses, detected })
}

/// First `k` rows of `x` (all rows when `k` exceeds the count).
pub fn head_rows(x: &Tensor, k: usize) -> Tensor {
    let k = k.min(x.rows());
    Tensor::from_vec(k, x.cols(), x.data()[..k * x.cols()].to_vec()).expect("prefix of rows")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Coefficient {
    Alpha,
    Beta,
    Zeta,
    Eta,
}

impl Coefficient {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alpha" => Some(Coefficient::Alpha),
            "beta" => Some(Coefficient::Beta),
            "zeta" => Some(Coefficient::Zeta),
            "eta" => Some(Coefficient::Eta),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coefficient::Alpha => "alpha",
            Coefficient::Beta => "beta",
            Coefficient::Zeta => "zeta",
            Coefficient::Eta => "eta",
        }
    }

    pub fn apply(self, config: &mut TrainConfig, value: f64) {
        let w = &mut config.loss.weights;
        match self {
            Coefficient::Alpha => w.alpha = value,
            Coefficient::Beta => w.beta = value,
            Coefficient::Zeta => w.zeta = value,
            Coefficient::Eta => w.eta = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub angular: Option<AngularError>,
    pub error: Option<String>,
}

/// One training per coefficient value; failed runs are recorded and skipped.
pub fn sensitivity_sweep(
    dataset: &ManifoldDataset,
    coefficient: Coefficient,
    values: &[f64],
    config: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::config(
            coefficient.name(),
            format!("sweep values must be non-negative, got {v}"),
        ));
    }
    Ok(values
        .iter()
        .map(|&value| {
            let mut cfg = config.clone();
            coefficient.apply(&mut cfg, value);
            let outcome = train(&cfg, &dataset.train)
                .and_then(|run| angular_error(&run.model, &dataset.manifold, &dataset.test));
            match outcome {
                Ok(a) => SweepPoint {
                    value,
                    angular: Some(a),
                    error: None,
                },
                Err(e) => SweepPoint {
                    value,
                    angular: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

pub const SWEEP_HEADER: [&str; 5] = [
    "coefficient",
    "value",
    "angular_mean_deg",
    "angular_std_deg",
    "error",
];

pub fn write_sweep_csv(path: &Path, coefficient: Coefficient, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for p in points {
        let (mean, std) = p
            .angular
            .as_ref()
            .map_or((String::new(), String::new()), |a| {
                (a.mean_deg.to_string(), a.std_deg.to_string())
            });
        w.write_record([
            coefficient.name().to_string(),
            p.value.to_string(),
            mean,
            std,
            p.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const DIMENSION_HEADER: [&str; 2] = ["m", "frame_loss"];

pub fn write_dimension_csv(path: &Path, curve: &DimensionCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DIMENSION_HEADER)?;
    for (m, l) in &curve.losses {
        w.write_record([m.to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub m: usize,
    pub angular: AngularError,
    pub frame_loss: f64,
    pub collapse: CollapseResidual,
    pub commuting: Stats,
    pub detected_m: Option<usize>,
}

/// Angular error, frame loss, collapse and commuting residuals on the first
/// `eval_points` test points.
pub fn evaluate(
    model: &FrameModel,
    dataset: &ManifoldDataset,
    eval_points: usize,
) -> Result<EvalReport> {
    let points = head_rows(&dataset.test, eval_points);
    let angular = angular_error(model, &dataset.manifold, &dataset.test)?;
    let collapse = collapse_residual(model, &points, &eval_flow_options())?;
    let frame_loss = frame_loss(model, &points, &eval_flow_options())?;
    let commuting = commuting_residual(model, &points)?;
    Ok(EvalReport {
        dataset: dataset.name().to_string(),
        m: model.m,
        angular,
        frame_loss,
        collapse,
        commuting,
        detected_m: None,
    })
}

/// Regenerates a dataset by name for evaluation.
pub fn dataset_for(config: &TrainConfig) -> Result<ManifoldDataset> {
    make_dataset(&config.dataset, config.counts, config.seed)
}
