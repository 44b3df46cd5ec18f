//! Paired Student t-test over per-dataset scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTestResult {
    pub n: usize,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t_statistic: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
    pub stars: String,
}

/// `***` below 0.001, `**` below 0.01, `*` below 0.05, empty otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTTestResult> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats(format!("a paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Stats(format!(
            "paired differences have zero variance (all equal to {mean}); the t statistic is undefined"
        )));
    }
    let sd = var.sqrt();
    let t = mean / (sd / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Stats(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(PairedTTestResult {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t_statistic: t,
        df,
        p_value: p,
        stars: significance_stars(p).to_string(),
    })
}
