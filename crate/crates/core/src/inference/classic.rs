//! Classic Lee–Carter fit by singular value decomposition of the centred
//! log-rate matrix, identified by `Σβ = 1` and `Σκ = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::MortalityDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicFit {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Leading singular value of the centred log rates.
    pub singular_value: f64,
    /// Share of the centred sum of squares carried by the rank-1 term.
    pub explained: f64,
    /// No time variation to decompose: `κ ≡ 0` and `β` set to `1/|ages|`.
    pub degenerate: bool,
}

/// Fit on a row-major `(age, year)` matrix of log rates.
pub fn classic_lc_fit(log_rates: &[f64], n_ages: usize, n_years: usize) -> Result<ClassicFit> {
    if n_ages == 0 || n_years == 0 || log_rates.len() != n_ages * n_years {
        return Err(Error::InvalidParameter(format!(
            "log-rate matrix has {} entries, expected {n_ages} x {n_years}",
            log_rates.len()
        )));
    }
    if let Some(i) = log_rates.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite log rate at age position {} year position {}",
            i / n_years,
            i % n_years
        )));
    }
    let alpha: Vec<f64> = (0..n_ages)
        .map(|a| log_rates[a * n_years..(a + 1) * n_years].iter().sum::<f64>() / n_years as f64)
        .collect();
    let m = DMatrix::from_fn(n_ages, n_years, |a, t| log_rates[a * n_years + t] - alpha[a]);
    let total: f64 = m.iter().map(|v| v * v).sum();
    let scale = log_rates.iter().fold(1.0f64, |s, v| s.max(v.abs()));

    let degenerate_fit = |s: f64| ClassicFit {
        alpha: alpha.clone(),
        beta: vec![1.0 / n_ages as f64; n_ages],
        kappa: vec![0.0; n_years],
        singular_value: s,
        explained: 0.0,
        degenerate: true,
    };
    if total.sqrt() <= 1e-12 * scale * ((n_ages * n_years) as f64).sqrt() {
        return Ok(degenerate_fit(total.sqrt()));
    }
    // the default-tolerance decomposition loses accuracy on exactly rank-1 input
    let svd = m
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("singular value decomposition did not converge".into()))?;
    let (k, &s) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    let u = svd.u.as_ref().expect("left vectors").column(k).into_owned();
    let v = svd.v_t.as_ref().expect("right vectors").row(k).into_owned();
    let su: f64 = u.iter().sum();
    if su.abs() <= 1e-12 * u.amax() * (n_ages as f64).sqrt() {
        return Ok(degenerate_fit(s));
    }
    let beta: Vec<f64> = u.iter().map(|x| x / su).collect();
    let mut kappa: Vec<f64> = v.iter().map(|x| s * su * x).collect();
    let mean = kappa.iter().sum::<f64>() / n_years as f64;
    for k in kappa.iter_mut() {
        *k -= mean;
    }
    Ok(ClassicFit {
        alpha,
        beta,
        kappa,
        singular_value: s,
        explained: s * s / total,
        degenerate: false,
    })
}

/// Aggregate deaths and exposures over areas and fit the log observed rates.
pub fn classic_lc_dataset(data: &MortalityDataset) -> Result<ClassicFit> {
    let (d, e) = data.aggregate_over_areas();
    let nt = data.n_years();
    let mut m = Vec::with_capacity(d.len());
    for (i, (&y, &ex)) in d.iter().zip(&e).enumerate() {
        if y <= 0.0 || ex <= 0.0 {
            return Err(Error::Data(format!(
                "zero aggregated rate at age {} year {}; aggregate ages or years further before the classic fit",
                data.ages()[i / nt],
                data.years()[i % nt]
            )));
        }
        m.push((y / ex).ln());
    }
    classic_lc_fit(&m, data.n_ages(), nt)
}
