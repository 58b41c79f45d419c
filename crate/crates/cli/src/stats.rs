use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// 95% confidence half-width from the Student t quantile.
    pub half_width: f64,
}

/// Ordinary least squares of `ln y` on `ln x`.
///
/// Returns `None` with fewer than three points or any nonpositive value.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = k - 2.0;
    let stderr = (rss / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).ok()?.inverse_cdf(0.975);
    Some(SlopeFit { slope, intercept, stderr, half_width: t * stderr })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.8)).collect();
        let fit = loglog_slope(&xs, &ys).unwrap();
        assert!((fit.slope + 0.8).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.half_width < 1e-10);
    }

    #[test]
    fn t_quantile_for_two_dof() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 1.3, 0.9, 1.4];
        let fit = loglog_slope(&xs, &ys).unwrap();
        assert!((fit.half_width / fit.stderr - 4.302652729911275).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(loglog_slope(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]).is_none());
        assert!(loglog_slope(&[1.0, 2.0], &[1.0, 2.0]).is_none());
    }
}
