//! Laplace mechanism for COUNT, SUM and AVG.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::AnonError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "query", content = "column", rename_all = "UPPERCASE")]
pub enum DpQuery {
    Count,
    Sum(String),
    Avg(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpRelease {
    pub value: f64,
    /// Laplace scale `b` of the noise added to the primary statistic. For
    /// AVG this is the scale on the noisy SUM (the COUNT half uses `1/(ε/2)`).
    pub scale: f64,
}

/// One draw from Laplace(0, scale) by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    // Open interval keeps the logarithm finite.
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn dp_release<R: Rng + ?Sized>(
    dataset: &Dataset,
    query: &DpQuery,
    epsilon: f64,
    sensitivity: Option<f64>,
    rng: &mut R,
) -> Result<DpRelease, AnonError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AnonError::NonPositiveEpsilon(epsilon));
    }
    match query {
        DpQuery::Count => {
            let scale = 1.0 / epsilon;
            Ok(DpRelease {
                value: dataset.len() as f64 + sample_laplace(rng, scale),
                scale,
            })
        }
        DpQuery::Sum(col) => {
            let delta = bound(sensitivity)?;
            let sum = clamped_sum(dataset, col, delta)?;
            let scale = delta / epsilon;
            Ok(DpRelease {
                value: sum + sample_laplace(rng, scale),
                scale,
            })
        }
        DpQuery::Avg(col) => {
            let delta = bound(sensitivity)?;
            let sum = clamped_sum(dataset, col, delta)?;
            let half = epsilon / 2.0;
            let scale = delta / half;
            let noisy_sum = sum + sample_laplace(rng, scale);
            let noisy_count = dataset.len() as f64 + sample_laplace(rng, 1.0 / half);
            Ok(DpRelease {
                value: noisy_sum / noisy_count.max(1.0),
                scale,
            })
        }
    }
}

fn bound(sensitivity: Option<f64>) -> Result<f64, AnonError> {
    match sensitivity {
        Some(d) if d > 0.0 && d.is_finite() => Ok(d),
        _ => Err(AnonError::MissingSensitivity),
    }
}

fn clamped_sum(dataset: &Dataset, column: &str, delta: f64) -> Result<f64, AnonError> {
    Ok(dataset
        .numeric_column(column)?
        .into_iter()
        .map(|v| v.clamp(0.0, delta))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::super::dataset::{Column, ColumnRole, ColumnType};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn salaries(n: usize) -> Dataset {
        let cols = vec![Column::new("salary", ColumnRole::Sensitive, ColumnType::Integer)];
        let rows = (0..n).map(|i| vec![(i as i64 * 7 % 30 - 5).to_string()]).collect();
        Dataset::new(cols, rows).unwrap()
    }

    #[test]
    fn reported_scales() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ds = salaries(100);
        let c = dp_release(&ds, &DpQuery::Count, 1.0, None, &mut rng).unwrap();
        assert_eq!(c.scale, 1.0);
        let s = dp_release(&ds, &DpQuery::Sum("salary".into()), 0.5, Some(10.0), &mut rng).unwrap();
        assert_eq!(s.scale, 20.0);
        let a = dp_release(&ds, &DpQuery::Avg("salary".into()), 1.0, Some(10.0), &mut rng).unwrap();
        assert_eq!(a.scale, 20.0);
    }

    #[test]
    fn argument_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ds = salaries(3);
        for eps in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                dp_release(&ds, &DpQuery::Count, eps, None, &mut rng),
                Err(AnonError::NonPositiveEpsilon(_))
            ));
        }
        assert!(matches!(
            dp_release(&ds, &DpQuery::Sum("salary".into()), 1.0, None, &mut rng),
            Err(AnonError::MissingSensitivity)
        ));
        assert!(matches!(
            dp_release(&ds, &DpQuery::Sum("nope".into()), 1.0, Some(1.0), &mut rng),
            Err(AnonError::UnknownColumn(_))
        ));
    }

    #[test]
    fn clamping_bounds_the_sum() {
        let ds = salaries(30);
        let exact = clamped_sum(&ds, "salary", 10.0).unwrap();
        let manual: f64 = (0..30).map(|i| ((i * 7 % 30 - 5) as f64).clamp(0.0, 10.0)).sum();
        assert_eq!(exact, manual);
    }

    #[test]
    fn laplace_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_laplace(&mut rng, 2.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 2.0 * 2.0f64.powi(2);
        assert!(mean.abs() < 3.0 * (expected / n as f64).sqrt());
        assert!((var / expected - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn median_absolute_draw_is_scale_ln2() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut abs: Vec<f64> = (0..50_001).map(|_| sample_laplace(&mut rng, 1.0).abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((abs[25_000] - std::f64::consts::LN_2).abs() < 0.02);
    }
}
