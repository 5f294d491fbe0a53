//! Mortality count data, age groups, periods and adjacency files.
//!
//! Deaths and exposures are stored as dense `(age, year, area)` tensors in
//! row-major order with the area index fastest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;

/// Deaths and exposures indexed by `(age, year, area)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityDataset {
    ages: Vec<u32>,
    years: Vec<i32>,
    areas: Vec<String>,
    deaths: Vec<u64>,
    exposures: Vec<f64>,
    /// Free-form tag carried into output bundles (e.g. "males").
    pub gender_label: String,
}

impl MortalityDataset {
    /// Build a dataset from dense tensors laid out as `(age, year, area)`.
    pub fn new(
        ages: Vec<u32>,
        years: Vec<i32>,
        areas: Vec<String>,
        deaths: Vec<u64>,
        exposures: Vec<f64>,
    ) -> Result<Self> {
        if ages.is_empty() || years.is_empty() || areas.is_empty() {
            return Err(Error::Data("dataset must have at least one age, year and area".into()));
        }
        if !is_contiguous(ages.iter().map(|&a| a as i64)) {
            return Err(Error::Data("ages must be contiguous increasing integers".into()));
        }
        if !is_contiguous(years.iter().map(|&y| y as i64)) {
            return Err(Error::Data("years must be contiguous increasing integers".into()));
        }
        let unique: BTreeSet<&String> = areas.iter().collect();
        if unique.len() != areas.len() {
            return Err(Error::Data("area identifiers must be unique".into()));
        }
        let n = ages.len() * years.len() * areas.len();
        if deaths.len() != n || exposures.len() != n {
            return Err(Error::Data(format!(
                "tensor size mismatch: expected {n} cells, got {} deaths and {} exposures",
                deaths.len(),
                exposures.len()
            )));
        }
        for (i, (&d, &e)) in deaths.iter().zip(&exposures).enumerate() {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::Data(format!("exposure must be finite and non-negative (cell {i})")));
            }
            if e == 0.0 && d > 0 {
                return Err(Error::Data(format!("deaths > 0 where exposure = 0 (cell {i})")));
            }
        }
        Ok(Self {
            ages,
            years,
            areas,
            deaths,
            exposures,
            gender_label: String::new(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.gender_label = label.into();
        self
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn n_cells(&self) -> usize {
        self.deaths.len()
    }

    /// Flat index of `(age, year, area)` positions.
    #[inline]
    pub fn cell_index(&self, age: usize, year: usize, area: usize) -> usize {
        (age * self.years.len() + year) * self.areas.len() + area
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    #[inline]
    pub fn cell_position(&self, cell: usize) -> (usize, usize, usize) {
        let s = self.areas.len();
        let t = self.years.len();
        (cell / (s * t), (cell / s) % t, cell % s)
    }

    pub fn deaths(&self) -> &[u64] {
        &self.deaths
    }

    pub fn exposures(&self) -> &[f64] {
        &self.exposures
    }

    pub fn deaths_at(&self, age: usize, year: usize, area: usize) -> u64 {
        self.deaths[self.cell_index(age, year, area)]
    }

    pub fn exposure_at(&self, age: usize, year: usize, area: usize) -> f64 {
        self.exposures[self.cell_index(age, year, area)]
    }

    pub fn area_position(&self, id: &str) -> Option<usize> {
        self.areas.iter().position(|a| a == id)
    }

    /// Sum deaths and exposures over areas, giving `(age, year)` matrices.
    pub fn aggregate_over_areas(&self) -> (Vec<f64>, Vec<f64>) {
        let (na, nt) = (self.n_ages(), self.n_years());
        let mut d = vec![0.0; na * nt];
        let mut e = vec![0.0; na * nt];
        for (cell, (&y, &ex)) in self.deaths.iter().zip(&self.exposures).enumerate() {
            let (a, t, _) = self.cell_position(cell);
            d[a * nt + t] += y as f64;
            e[a * nt + t] += ex;
        }
        (d, e)
    }

    /// Write the deaths and exposures files using the `age,year,area,value` schema.
    pub fn write(&self, deaths_path: &Path, exposures_path: &Path) -> Result<()> {
        let mut dw = csv::Writer::from_path(deaths_path).map_err(|e| Error::csv(deaths_path, e))?;
        let mut ew =
            csv::Writer::from_path(exposures_path).map_err(|e| Error::csv(exposures_path, e))?;
        dw.write_record(["age", "year", "area", "value"])
            .map_err(|e| Error::csv(deaths_path, e))?;
        ew.write_record(["age", "year", "area", "value"])
            .map_err(|e| Error::csv(exposures_path, e))?;
        for (cell, (&y, &ex)) in self.deaths.iter().zip(&self.exposures).enumerate() {
            let (a, t, s) = self.cell_position(cell);
            let age = self.ages[a].to_string();
            let year = self.years[t].to_string();
            dw.write_record([age.as_str(), year.as_str(), self.areas[s].as_str(), &y.to_string()])
                .map_err(|e| Error::csv(deaths_path, e))?;
            ew.write_record([age.as_str(), year.as_str(), self.areas[s].as_str(), &ex.to_string()])
                .map_err(|e| Error::csv(exposures_path, e))?;
        }
        dw.flush().map_err(|e| Error::io(deaths_path, e))?;
        ew.flush().map_err(|e| Error::io(exposures_path, e))?;
        Ok(())
    }
}

fn is_contiguous(values: impl Iterator<Item = i64>) -> bool {
    let mut prev: Option<i64> = None;
    for v in values {
        if let Some(p) = prev {
            if v != p + 1 {
                return false;
            }
        }
        prev = Some(v);
    }
    true
}

#[derive(Debug, Deserialize)]
struct CellRecord {
    age: i64,
    year: i64,
    area: String,
    value: String,
}

type CellKey = (i64, i64, String);

fn read_cells<T>(path: &Path, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<HashMap<CellKey, T>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let expected = ["age", "year", "area", "value"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("expected header `age,year,area,value`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut cells = HashMap::new();
    for (i, rec) in reader.deserialize::<CellRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line,
            message: e.to_string(),
        })?;
        if rec.age < 0 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: format!("negative age {}", rec.age),
            });
        }
        let value = parse(&rec.value).map_err(|message| Error::Parse {
            path: path.into(),
            line,
            message,
        })?;
        let key = (rec.age, rec.year, rec.area);
        if cells.contains_key(&key) {
            return Err(Error::DuplicateKey {
                path: path.into(),
                age: key.0,
                year: key.1,
                area: key.2,
            });
        }
        cells.insert(key, value);
    }
    Ok(cells)
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    match s.parse::<i64>() {
        Ok(v) if v < 0 => Err(format!("negative count {v}")),
        Ok(v) => Ok(v as u64),
        Err(_) => Err(format!("death count `{s}` is not an integer")),
    }
}

fn parse_exposure(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if !v.is_finite() => Err(format!("exposure `{s}` is not finite")),
        Ok(v) if v < 0.0 => Err(format!("negative exposure {v}")),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("exposure `{s}` is not a number")),
    }
}

/// Load and validate a dataset from a deaths file and an exposures file.
///
/// Row order is irrelevant; areas are ordered lexicographically by id. Every
/// `(age, year, area)` combination must be present in both files.
pub fn load_dataset(deaths_path: &Path, exposures_path: &Path) -> Result<MortalityDataset> {
    let deaths = read_cells(deaths_path, parse_count)?;
    let exposures = read_cells(exposures_path, parse_exposure)?;

    if deaths.len() != exposures.len() {
        return Err(Error::Data(format!(
            "dimension mismatch: {} death rows vs {} exposure rows",
            deaths.len(),
            exposures.len()
        )));
    }
    if let Some(k) = deaths.keys().find(|k| !exposures.contains_key(*k)) {
        return Err(Error::Data(format!(
            "dimension mismatch: cell ({}, {}, {}) has deaths but no exposure",
            k.0, k.1, k.2
        )));
    }
    if deaths.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let ages: BTreeSet<i64> = deaths.keys().map(|k| k.0).collect();
    let years: BTreeSet<i64> = deaths.keys().map(|k| k.1).collect();
    let areas: BTreeSet<&String> = deaths.keys().map(|k| &k.2).collect();
    let ages: Vec<u32> = ages.into_iter().map(|a| a as u32).collect();
    let years: Vec<i32> = years.into_iter().map(|y| y as i32).collect();
    let areas: Vec<String> = areas.into_iter().cloned().collect();

    let n = ages.len() * years.len() * areas.len();
    let mut d = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for &age in &ages {
        for &year in &years {
            for area in &areas {
                let key = (age as i64, year as i64, area.clone());
                match (deaths.get(&key), exposures.get(&key)) {
                    (Some(&dv), Some(&ev)) => {
                        d.push(dv);
                        e.push(ev);
                    }
                    _ => {
                        return Err(Error::Data(format!(
                            "missing cell (age {age}, year {year}, area {area})"
                        )))
                    }
                }
            }
        }
    }
    MortalityDataset::new(ages, years, areas, d, e)
}

/// Assignment of single ages to age groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeGrouping {
    group_of_age: Vec<usize>,
    group_count: usize,
}

impl AgeGrouping {
    /// Build from an explicit per-age group index (by age position).
    pub fn from_groups(group_of_age: Vec<usize>) -> Result<Self> {
        if group_of_age.is_empty() {
            return Err(Error::InvalidParameter("age grouping must cover at least one age".into()));
        }
        if group_of_age[0] != 0 {
            return Err(Error::InvalidParameter("first age group must have index 0".into()));
        }
        for w in group_of_age.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::InvalidParameter(
                    "age groups must be contiguous and non-decreasing in age".into(),
                ));
            }
        }
        let group_count = group_of_age[group_of_age.len() - 1] + 1;
        Ok(Self {
            group_of_age,
            group_count,
        })
    }

    /// A single group containing every age.
    pub fn single(n_ages: usize) -> Result<Self> {
        Self::from_groups(vec![0; n_ages])
    }

    pub fn group_of(&self, age_index: usize) -> usize {
        self.group_of_age[age_index]
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn n_ages(&self) -> usize {
        self.group_of_age.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.group_of_age
    }

    /// Age positions belonging to group `g`.
    pub fn members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of_age
            .iter()
            .enumerate()
            .filter(move |(_, &gg)| gg == g)
            .map(|(i, _)| i)
    }
}

/// Absolute bin of a single age: 0-10, 11-20, 21-30, ...
fn ten_year_bin(age: u32) -> usize {
    if age <= 10 {
        0
    } else {
        ((age - 11) / 10 + 1) as usize
    }
}

/// Ten-year age groups with a first bin of 0-10 and later bins 11-20, 21-30, ...
/// A trailing bin shorter than ten years absorbs the oldest ages.
pub fn default_age_grouping(ages: &[u32]) -> Result<AgeGrouping> {
    if ages.is_empty() {
        return Err(Error::InvalidParameter("empty age list".into()));
    }
    if !is_contiguous(ages.iter().map(|&a| a as i64)) {
        return Err(Error::InvalidParameter("ages must be contiguous".into()));
    }
    let first = ten_year_bin(ages[0]);
    AgeGrouping::from_groups(ages.iter().map(|&a| ten_year_bin(a) - first).collect())
}

/// Assignment of calendar years to periods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodMapping {
    period_of_year: Vec<usize>,
    period_count: usize,
}

impl PeriodMapping {
    pub fn period_of(&self, year_index: usize) -> usize {
        self.period_of_year[year_index]
    }

    pub fn period_count(&self) -> usize {
        self.period_count
    }

    pub fn n_years(&self) -> usize {
        self.period_of_year.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.period_of_year
    }
}

/// Single period when `cut_year` is `None`; otherwise period 0 holds the
/// years up to and including `cut_year` and period 1 the rest.
pub fn period_mapping(years: &[i32], cut_year: Option<i32>) -> Result<PeriodMapping> {
    if years.is_empty() {
        return Err(Error::InvalidParameter("empty year list".into()));
    }
    match cut_year {
        None => Ok(PeriodMapping {
            period_of_year: vec![0; years.len()],
            period_count: 1,
        }),
        Some(cut) => {
            let (lo, hi) = (years[0], years[years.len() - 1]);
            if cut < lo || cut >= hi {
                return Err(Error::InvalidParameter(format!(
                    "cut year {cut} must satisfy {lo} <= cut < {hi}"
                )));
            }
            Ok(PeriodMapping {
                period_of_year: years.iter().map(|&y| usize::from(y > cut)).collect(),
                period_count: 2,
            })
        }
    }
}

/// Parse an adjacency file (`area: neighbour neighbour ...`) against the
/// dataset's area ordering.
pub fn load_adjacency(path: &Path, areas: &[String]) -> Result<SpatialGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjacency(&text, areas)
}

/// Parse adjacency text; see [`load_adjacency`].
pub fn parse_adjacency(text: &str, areas: &[String]) -> Result<SpatialGraph> {
    let index: HashMap<&str, usize> = areas.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let mut listed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line.split_once(':').ok_or_else(|| {
            Error::Adjacency(format!("line {}: expected `area: neighbours`", lineno + 1))
        })?;
        let id = id.trim();
        let &node = index
            .get(id)
            .ok_or_else(|| Error::Adjacency(format!("line {}: unknown area `{id}`", lineno + 1)))?;
        if listed.contains_key(&node) {
            return Err(Error::Adjacency(format!("line {}: area `{id}` listed twice", lineno + 1)));
        }
        let mut nbrs = Vec::new();
        for nb in rest.split_whitespace() {
            if nb == id {
                return Err(Error::Adjacency(format!("self-neighbor: area `{id}`")));
            }
            let &j = index.get(nb).ok_or_else(|| {
                Error::Adjacency(format!("line {}: unknown area `{nb}`", lineno + 1))
            })?;
            if !nbrs.contains(&j) {
                nbrs.push(j);
            }
        }
        listed.insert(node, nbrs);
    }
    if let Some(missing) = (0..areas.len()).find(|i| !listed.contains_key(i)) {
        return Err(Error::Adjacency(format!("area `{}` has no adjacency line", areas[missing])));
    }
    for (&i, nbrs) in &listed {
        for &j in nbrs {
            if !listed[&j].contains(&i) {
                return Err(Error::Adjacency(format!(
                    "asymmetric entry: `{}` lists `{}` but not vice versa",
                    areas[i], areas[j]
                )));
            }
        }
    }
    SpatialGraph::from_neighbors(listed.into_values().collect())
}

/// Write a graph in the adjacency file format.
pub fn write_adjacency(path: &Path, graph: &SpatialGraph, areas: &[String]) -> Result<()> {
    let mut out = String::new();
    for (i, area) in areas.iter().enumerate() {
        out.push_str(area);
        out.push(':');
        for &j in graph.neighbors(i) {
            out.push(' ');
            out.push_str(&areas[j]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
