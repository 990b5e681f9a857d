//! Central finite-difference verification of analytic gradients, run in
//! double precision.

use std::collections::BTreeMap;

use super::{Graph, NumericsError, ParamStore, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Which coordinates to perturb.
#[derive(Clone, Debug, Default)]
pub struct ParamSubset {
    /// Parameter names; `None` checks every parameter.
    pub names: Option<Vec<String>>,
    /// Cap on checked coordinates per tensor, spread evenly over the tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl ParamSubset {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn sampled(max_coords_per_tensor: usize) -> Self {
        Self {
            names: None,
            max_coords_per_tensor: Some(max_coords_per_tensor),
        }
    }

    fn coords(&self, numel: usize) -> Vec<usize> {
        match self.max_coords_per_tensor {
            Some(cap) if cap < numel => (0..cap).map(|i| i * numel / cap).collect(),
            _ => (0..numel).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    /// Coordinates whose `±h` evaluations cross a ReLU or clamp kink; the
    /// central difference is meaningless there, so they are not compared.
    pub skipped_at_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval_loss<F>(params: &ParamStore<f64>, build: &F) -> Result<(f64, Vec<bool>), NumericsError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let v = g
        .value(loss)
        .item()
        .ok_or_else(|| NumericsError::Contract("gradcheck loss must be scalar".into()))?;
    Ok((v, g.kink_pattern()))
}

/// Analytic gradients of the graph produced by `build`.
pub fn analytic_gradients<F>(params: &ParamStore<f64>, build: &F) -> Result<BTreeMap<String, Tensor<f64>>, NumericsError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    Ok(g.backward(loss)?.into_named())
}

/// Compares the supplied gradients against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for each selected coordinate.
pub fn compare_with_finite_differences<F>(
    params: &ParamStore<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    subset: &ParamSubset,
    h: f64,
    build: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var, NumericsError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NumericsError::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let names: Vec<String> = match &subset.names {
        Some(n) => n.clone(),
        None => params.names().to_vec(),
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        skipped_at_kinks: 0,
    };
    let (_, base) = eval_loss(params, &build)?;
    for name in &names {
        let numel = params
            .get(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))?
            .numel();
        for idx in subset.coords(numel) {
            let orig = work.get(name).expect("present").data()[idx];
            work.get_mut(name).expect("present").data_mut()[idx] = orig + h;
            let (plus, kinks_plus) = eval_loss(&work, &build)?;
            work.get_mut(name).expect("present").data_mut()[idx] = orig - h;
            let (minus, kinks_minus) = eval_loss(&work, &build)?;
            work.get_mut(name).expect("present").data_mut()[idx] = orig;
            if kinks_plus != base || kinks_minus != base {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[idx]);
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Backpropagates through the graph built by `build` and checks the result
/// against central differences.
pub fn finite_difference_gradcheck<F>(
    params: &ParamStore<f64>,
    subset: &ParamSubset,
    h: f64,
    build: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var, NumericsError>,
{
    let analytic = analytic_gradients(params, &build)?;
    compare_with_finite_differences(params, &analytic, subset, h, build)
}
