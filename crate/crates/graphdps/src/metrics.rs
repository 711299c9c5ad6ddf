//! Reconstruction error metrics: RMSE, relative L2 error, and a graph SSIM
//! computed over one-ring windows.

use crate::error::{GraphDpsError, Result};
use crate::mesh::GraphLevel;
use crate::NodeField;

/// SSIM stabilizer coefficients; C1 = (c1 * range)^2, C2 = (c2 * range)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Dynamic range for the stabilizers; derived from the ground truth
    /// when absent.
    pub data_range: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ssim_c1: 0.01,
            ssim_c2: 0.03,
            data_range: None,
        }
    }
}

/// Root mean squared error sqrt(||a - b||^2 / N).
pub fn rmse(x_gt: &NodeField, x_star: &NodeField) -> Result<f64> {
    if x_gt.len() != x_star.len() {
        return Err(GraphDpsError::Metrics("length mismatch".into()));
    }
    let n = x_gt.len() as f64;
    let ss: f64 = x_gt
        .values
        .iter()
        .zip(&x_star.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((ss / n).sqrt())
}

/// Relative L2 error ||a - b|| / ||a||.
pub fn rel_err(x_gt: &NodeField, x_star: &NodeField) -> Result<f64> {
    if x_gt.len() != x_star.len() {
        return Err(GraphDpsError::Metrics("length mismatch".into()));
    }
    let gt_norm = x_gt.norm();
    if gt_norm == 0.0 {
        return Err(GraphDpsError::Metrics(
            "relative error undefined for zero ground truth".into(),
        ));
    }
    let diff: f64 = x_gt
        .values
        .iter()
        .zip(&x_star.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / gt_norm)
}

/// Graph SSIM averaged over per-node one-ring windows. Local means,
/// variances, and covariance use the population convention over the window
/// {k} union N(k).
pub fn graph_ssim(
    x_gt: &NodeField,
    x_star: &NodeField,
    graph: &GraphLevel,
    config: &MetricsConfig,
) -> Result<f64> {
    if x_gt.len() != x_star.len() || x_gt.len() != graph.node_count {
        return Err(GraphDpsError::Metrics("length mismatch".into()));
    }
    let range = config
        .data_range
        .unwrap_or_else(|| (x_gt.max() - x_gt.min()).max(1e-12));
    let c1 = (config.ssim_c1 * range).powi(2);
    let c2 = (config.ssim_c2 * range).powi(2);

    let neighbors = graph.neighbors();
    let n = graph.node_count;
    let mut total = 0.0;
    for k in 0..n {
        let mut window = vec![k];
        window.extend(&neighbors[k]);
        let w = window.len() as f64;
        let mut mu_a = 0.0;
        let mut mu_b = 0.0;
        for &i in &window {
            mu_a += x_gt.values[i];
            mu_b += x_star.values[i];
        }
        mu_a /= w;
        mu_b /= w;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        let mut cov = 0.0;
        for &i in &window {
            let da = x_gt.values[i] - mu_a;
            let db = x_star.values[i] - mu_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
        var_a /= w;
        var_b /= w;
        cov /= w;
        let ssim_k = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        total += ssim_k;
    }
    Ok(total / n as f64)
}

/// One row of a batch evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub rmse: f64,
    pub rel_err: f64,
    pub ssim: f64,
    pub sampler: String,
    pub regularizer: String,
    pub noise: String,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "sample_id,rmse,rel_err,ssim,sampler,regularizer,noise";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{},{},{}",
            self.sample_id, self.rmse, self.rel_err, self.ssim, self.sampler, self.regularizer, self.noise
        )
    }
}
