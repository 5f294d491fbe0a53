//! Summary tables, deviance diagnostics, the output bundle and the GeoJSON join.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::MortalityDataset;
use crate::error::{Error, Result};
use crate::inference::{ConvergenceReport, FitResult, Summary};

/// Ages for which compound `β_xκ_t` tables are written by default.
pub const DEFAULT_SELECTED_AGES: [u32; 6] = [0, 20, 40, 60, 80, 95];

pub const SUMMARY_COLUMNS: [&str; 5] = ["mean", "sd", "q025", "q50", "q975"];
pub const HYPER_COLUMNS: [&str; 5] = ["estimate", "internal", "internal_se", "q025", "q975"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Alpha,
    Beta,
    Kappa,
    BetaKappa,
    Omega,
    Hyper,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Alpha => "alpha",
            Quantity::Beta => "beta",
            Quantity::Kappa => "kappa",
            Quantity::BetaKappa => "beta_kappa",
            Quantity::Omega => "omega",
            Quantity::Hyper => "hyper",
        }
    }
}

/// One table of the bundle: key columns followed by numeric columns.
/// Missing numbers are stored as NaN and written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub quantity: Quantity,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<(Vec<String>, Vec<f64>)>,
}

impl SummaryTable {
    fn new(quantity: Quantity, keys: &[&str], values: &[&str]) -> Self {
        Self {
            quantity,
            key_columns: keys.iter().map(|s| s.to_string()).collect(),
            value_columns: values.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push_summary(&mut self, keys: Vec<String>, s: &Summary) {
        self.rows.push((keys, vec![s.mean, s.sd, s.q025, s.q50, s.q975]));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn value_index(&self, column: &str) -> Option<usize> {
        self.value_columns.iter().position(|c| c == column)
    }

    pub fn key_index(&self, column: &str) -> Option<usize> {
        self.key_columns.iter().position(|c| c == column)
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let j = self.value_index(column)?;
        Some(self.rows.iter().map(|(_, v)| v[j]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header: Vec<&str> = self.key_columns.iter().chain(&self.value_columns).map(String::as_str).collect();
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (keys, values) in &self.rows {
            let rec: Vec<String> = keys.iter().cloned().chain(values.iter().map(|&v| format_number(v))).collect();
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a table written by [`SummaryTable::write_csv`]; every column not in
    /// `key_columns` is parsed as a number.
    pub fn read_csv(path: &Path, quantity: Quantity, key_columns: &[&str]) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        let mut key_pos = Vec::new();
        for k in key_columns {
            let p = header.iter().position(|h| h == *k).ok_or_else(|| Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("missing column `{k}`"),
            })?;
            key_pos.push(p);
        }
        let value_pos: Vec<usize> = (0..header.len()).filter(|p| !key_pos.contains(p)).collect();
        let mut table = Self {
            quantity,
            key_columns: key_columns.iter().map(|s| s.to_string()).collect(),
            value_columns: value_pos.iter().map(|&p| header[p].to_string()).collect(),
            rows: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let keys = key_pos.iter().map(|&p| rec[p].to_string()).collect();
            let mut values = Vec::with_capacity(value_pos.len());
            for &p in &value_pos {
                let f = &rec[p];
                values.push(if f.is_empty() {
                    f64::NAN
                } else {
                    f.parse().map_err(|_| Error::Parse {
                        path: path.into(),
                        line: line + 2,
                        message: format!("`{f}` is not a number"),
                    })?
                });
            }
            table.rows.push((keys, values));
        }
        Ok(table)
    }
}

/// Shortest representation that parses back to the same value; empty for
/// non-finite values.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// All tables for a fit. Compound `β_xκ_t` rows are produced only for the
/// selected ages present in the fit.
pub fn summarize(fit: &FitResult, selected_ages: &[u32]) -> Vec<SummaryTable> {
    let mut alpha = SummaryTable::new(Quantity::Alpha, &["age"], &SUMMARY_COLUMNS);
    for (a, s) in fit.ages.iter().zip(&fit.alpha) {
        alpha.push_summary(vec![a.to_string()], s);
    }
    let mut beta = SummaryTable::new(Quantity::Beta, &["age"], &SUMMARY_COLUMNS);
    for (a, s) in fit.ages.iter().zip(&fit.beta) {
        beta.push_summary(vec![a.to_string()], s);
    }
    let mut kappa = SummaryTable::new(Quantity::Kappa, &["year"], &SUMMARY_COLUMNS);
    for (t, s) in fit.years.iter().zip(&fit.kappa) {
        kappa.push_summary(vec![t.to_string()], s);
    }
    let mut bk = SummaryTable::new(Quantity::BetaKappa, &["age", "year"], &SUMMARY_COLUMNS);
    if !fit.beta_kappa.is_empty() {
        let nt = fit.years.len();
        for &age in selected_ages {
            let Some(a) = fit.ages.iter().position(|&x| x == age) else {
                warn!("selected age {age} is not in the fitted data");
                continue;
            };
            for (t, year) in fit.years.iter().enumerate() {
                bk.push_summary(vec![age.to_string(), year.to_string()], &fit.beta_kappa[a * nt + t]);
            }
        }
    }
    let mut omega = SummaryTable::new(Quantity::Omega, &["area", "group", "period"], &SUMMARY_COLUMNS);
    if !fit.omega.is_empty() {
        for g in 0..fit.n_groups {
            for p in 0..fit.n_periods {
                for (s, area) in fit.areas.iter().enumerate() {
                    omega.push_summary(vec![area.clone(), g.to_string(), p.to_string()], fit.omega_at(s, g, p));
                }
            }
        }
    }
    let mut hyper = SummaryTable::new(Quantity::Hyper, &["parameter"], &HYPER_COLUMNS);
    for (i, name) in fit.hyper_names.iter().enumerate() {
        let th = fit.theta[i];
        let to_natural = |v: f64| if name.starts_with("phi") { 1.0 / (1.0 + (-v).exp()) } else { v.exp() };
        let (lo, hi) = match fit.theta_se[i] {
            Some(se) => (to_natural(th - 1.96 * se), to_natural(th + 1.96 * se)),
            None => (f64::NAN, f64::NAN),
        };
        hyper.rows.push((
            vec![name.clone()],
            vec![to_natural(th), th, fit.theta_se[i].unwrap_or(f64::NAN), lo, hi],
        ));
    }
    vec![alpha, beta, kappa, bk, omega, hyper]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub deviance: f64,
    /// Per-cell deviance contributions in dataset order; `None` for cells
    /// without exposure.
    pub deviance_per_cell: Vec<Option<f64>>,
    pub n_cells: usize,
    /// Share of cells with `|Pearson residual| > 2`.
    pub pearson_exceedance: f64,
    pub convergence: ConvergenceReport,
}

/// Poisson deviance contribution `2[y ln(y/μ) - (y - μ)]`, with the
/// logarithmic term zero at `y = 0`.
pub fn deviance_contribution(y: f64, mu: f64) -> f64 {
    let t = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
    2.0 * (t - (y - mu))
}

/// Deviance diagnostics at the fitted rates.
pub fn deviance(fit: &FitResult, data: &MortalityDataset) -> Result<Diagnostics> {
    if fit.log_rate.len() != data.n_cells() {
        return Err(Error::InvalidParameter(format!(
            "fit has {} cells but the dataset has {}",
            fit.log_rate.len(),
            data.n_cells()
        )));
    }
    let mut total = 0.0;
    let mut per_cell = Vec::with_capacity(data.n_cells());
    let (mut n, mut exceed) = (0usize, 0usize);
    for (i, (&y, &e)) in data.deaths().iter().zip(data.exposures()).enumerate() {
        if e <= 0.0 {
            per_cell.push(None);
            continue;
        }
        let y = y as f64;
        let mu = e * fit.log_rate[i].exp();
        let d = deviance_contribution(y, mu).max(0.0);
        total += d;
        per_cell.push(Some(d));
        n += 1;
        if ((y - mu) / mu.sqrt()).abs() > 2.0 {
            exceed += 1;
        }
    }
    Ok(Diagnostics {
        deviance: total,
        deviance_per_cell: per_cell,
        n_cells: n,
        pearson_exceedance: if n > 0 { exceed as f64 / n as f64 } else { 0.0 },
        convergence: fit.convergence.clone(),
    })
}

pub fn table_file_name(q: Quantity) -> String {
    format!("{}.csv", q.name())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Write the tables, `diagnostics.json`, `convergence.json` and
/// `fit_result.json` into `dir`. Run time is recorded only under the
/// `wallclock` key of `convergence.json`.
pub fn write_bundle(
    dir: &Path,
    fit: &FitResult,
    data: Option<&MortalityDataset>,
    selected_ages: &[u32],
    wallclock_seconds: Option<f64>,
) -> Result<Vec<SummaryTable>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tables = summarize(fit, selected_ages);
    for t in &tables {
        t.write_csv(&dir.join(table_file_name(t.quantity)))?;
    }
    if let Some(data) = data {
        write_json(&dir.join("diagnostics.json"), &deviance(fit, data)?)?;
    }
    let mut conv = serde_json::to_value(&fit.convergence)?;
    conv["converged"] = json!(fit.convergence.converged());
    if let Some(secs) = wallclock_seconds {
        conv["wallclock"] = json!({ "seconds": secs });
    }
    write_json(&dir.join("convergence.json"), &conv)?;
    write_json(&dir.join("fit_result.json"), fit)?;
    Ok(tables)
}

pub fn load_fit_result(path: &Path) -> Result<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoJoinReport {
    pub matched: usize,
    /// Features whose `area_id` has no row in the table.
    pub unmatched_features: Vec<String>,
    /// Table areas without a feature.
    pub missing_areas: Vec<String>,
}

fn area_id_of(feature: &Value, index: usize) -> Result<String> {
    match feature.get("properties").and_then(|p| p.get("area_id")) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(Error::Data(format!("GeoJSON feature {index} has no `area_id` property"))),
    }
}

/// Copy the GeoJSON at `geojson` to `out`, adding `omega_mean_g{k}` and
/// `omega_sd_g{k}` (suffixed `_p{j}` when there are several periods) to
/// every feature with a matching `area_id`.
pub fn export_geojoin(omega: &SummaryTable, geojson: &Path, out: &Path) -> Result<GeoJoinReport> {
    let (ia, ig, ip) = match (omega.key_index("area"), omega.key_index("group"), omega.key_index("period")) {
        (Some(a), Some(g), Some(p)) => (a, g, p),
        _ => return Err(Error::Data("omega table needs area, group and period columns".into())),
    };
    let (jm, js) = match (omega.value_index("mean"), omega.value_index("sd")) {
        (Some(m), Some(s)) => (m, s),
        _ => return Err(Error::Data("omega table needs mean and sd columns".into())),
    };
    let parse_index = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Data(format!("omega table has a non-integer {what} `{s}`")))
    };
    let mut n_periods = 1;
    let mut rows = Vec::with_capacity(omega.len());
    for (keys, values) in &omega.rows {
        let g = parse_index(&keys[ig], "group")?;
        let p = parse_index(&keys[ip], "period")?;
        n_periods = n_periods.max(p + 1);
        rows.push((keys[ia].clone(), g, p, values[jm], values[js]));
    }
    let mut by_area: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (area, g, p, mean, sd) in rows {
        let suffix = if n_periods > 1 { format!("g{g}_p{p}") } else { format!("g{g}") };
        let props = by_area.entry(area).or_default();
        props.push((format!("omega_mean_{suffix}"), mean));
        props.push((format!("omega_sd_{suffix}"), sd));
    }

    let text = fs::read_to_string(geojson).map_err(|e| Error::io(geojson, e))?;
    let mut doc: Value = serde_json::from_str(&text)?;
    let features = doc
        .get_mut("features")
        .and_then(Value::as_array_mut)
        .ok_or_else(|| Error::Data(format!("{} is not a GeoJSON FeatureCollection", geojson.display())))?;
    let mut report = GeoJoinReport::default();
    let mut seen = HashSet::new();
    for (i, f) in features.iter_mut().enumerate() {
        let id = area_id_of(f, i)?;
        match by_area.get(&id) {
            Some(props) => {
                let obj = f["properties"].as_object_mut().expect("properties checked above");
                for (k, v) in props {
                    obj.insert(k.clone(), if v.is_finite() { json!(v) } else { Value::Null });
                }
                report.matched += 1;
                seen.insert(id);
            }
            None => report.unmatched_features.push(id),
        }
    }
    report.missing_areas = by_area.keys().filter(|a| !seen.contains(*a)).cloned().collect();
    for id in &report.unmatched_features {
        warn!("GeoJSON feature with area_id `{id}` has no spatial effect");
    }
    for id in &report.missing_areas {
        warn!("area `{id}` has no GeoJSON feature");
    }
    let mut s = serde_json::to_string(&doc)?;
    s.push('\n');
    fs::write(out, s).map_err(|e| Error::io(out, e))?;
    Ok(report)
}
