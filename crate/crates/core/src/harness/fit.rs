use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference curve `c / sqrt(N)` and the log-log slope of the measured points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFit {
    pub c: f64,
    pub slope: f64,
}

/// `c` is the mean of `value * sqrt(N)`; `slope` is the least-squares slope of
/// `ln value` on `ln N`.
pub fn fit_reference(points: &[(usize, f64)]) -> Result<ReferenceFit> {
    if points.len() < 2 {
        return Err(Error::invalid("fit needs at least two points"));
    }
    if let Some(&(n, v)) = points
        .iter()
        .find(|&&(n, v)| n == 0 || !(v > 0.0) || !v.is_finite())
    {
        return Err(Error::invalid(format!(
            "fit needs positive N and values, got ({n}, {v})"
        )));
    }
    let m = points.len() as f64;
    let c = points
        .iter()
        .map(|&(n, v)| v * (n as f64).sqrt())
        .sum::<f64>()
        / m;
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let xm = xs.iter().sum::<f64>() / m;
    let ym = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid(
            "fit needs at least two distinct agent counts",
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    Ok(ReferenceFit {
        c,
        slope: sxy / sxx,
    })
}
