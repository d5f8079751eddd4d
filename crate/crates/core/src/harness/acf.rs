//! Sample autocorrelation.

use crate::error::{Error, Result};

/// Sample autocorrelation at lags `0..=max_lag`, with divisor `n` at every lag.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if max_lag < 1 || n <= max_lag {
        return Err(Error::Parameter(format!(
            "need series length {n} > max_lag {max_lag} >= 1"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("series contains non-finite values".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0: f64 = dev.iter().map(|d| d * d).sum();
    let scale = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if c0 <= n as f64 * (1e-12 * scale).powi(2) {
        return Err(Error::UndefinedVariance(
            "autocorrelation of a constant series".into(),
        ));
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let ck: f64 = dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum();
        out.push(ck / c0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn white_noise_is_flat() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = acf(&x, 40).unwrap();
        assert_eq!(r[0], 1.0);
        let band = 3.0 / (n as f64).sqrt();
        assert!(r[1..].iter().all(|v| v.abs() <= band), "{r:?}");
    }

    #[test]
    fn ar1_lag_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut y = vec![0.0f64; 10_000];
        for t in 1..y.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[t] = 0.8 * y[t - 1] + e;
        }
        let r = acf(&y, 2).unwrap();
        assert!((r[1] - 0.8).abs() < 0.05);
    }

    #[test]
    fn matches_direct_formula() {
        let x = [1.0, 3.0, 2.0, 5.0, 4.0];
        let r = acf(&x, 2).unwrap();
        // mean 3, deviations -2 0 -1 2 1, c0 = 10
        assert!((r[1] - (0.0 + 0.0 - 2.0 + 2.0) / 10.0).abs() < 1e-15);
        assert!((r[2] - (2.0 + 0.0 - 1.0) / 10.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            acf(&[2.0; 10], 3),
            Err(Error::UndefinedVariance(_))
        ));
        assert!(matches!(acf(&[1.0, 2.0], 2), Err(Error::Parameter(_))));
        assert!(matches!(acf(&[1.0, 2.0, 3.0], 0), Err(Error::Parameter(_))));
    }
}
