//! Dataset representation, CSV ingestion, hourly aggregation, imputation,
//! and z-score normalization.
//!
//! Two CSV schemas are accepted:
//!
//! long format:  `patient_id,timestamp_hours,measurement,value,label,anchor_hour`
//!               with `measurement` in {hr,rr,spo2,temp,sbp,dbp}
//! wide format:  `patient_id,hour,hr,rr,spo2,temp,sbp,dbp,label`
//!               (pre-gridded; empty cells are missing; anchor defaults to
//!               the patient's last observed hour)

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six vital-sign measurement kinds, in canonical feature order
/// (the two shift features first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measurement {
    Sbp,
    Dbp,
    HeartRate,
    RespiratoryRate,
    Spo2,
    Temperature,
}

pub const CANONICAL_ORDER: [Measurement; 6] = [
    Measurement::Sbp,
    Measurement::Dbp,
    Measurement::HeartRate,
    Measurement::RespiratoryRate,
    Measurement::Spo2,
    Measurement::Temperature,
];

pub const CANONICAL_NAMES: [&str; 6] = ["sbp", "dbp", "heart_rate", "respiratory_rate", "spo2", "temperature"];

impl Measurement {
    pub fn parse(s: &str) -> Option<Measurement> {
        match s {
            "hr" | "heart_rate" => Some(Measurement::HeartRate),
            "rr" | "respiratory_rate" => Some(Measurement::RespiratoryRate),
            "spo2" => Some(Measurement::Spo2),
            "temp" | "temperature" => Some(Measurement::Temperature),
            "sbp" => Some(Measurement::Sbp),
            "dbp" => Some(Measurement::Dbp),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        CANONICAL_ORDER.iter().position(|&m| m == self).unwrap()
    }
}

/// Per-patient timestamped measurements plus outcome label and anchor time.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub id: String,
    pub label: u8,
    /// Onset hour for cases, a random time point for controls. Interpreted
    /// relative to the patient's first timestamp (see `hourly_segment`).
    pub anchor_hour: usize,
    /// Per measurement kind: (timestamp_hours, value), kept in input order.
    pub series: [Vec<(f64, f64)>; 6],
}

#[derive(Debug, Clone)]
pub struct RawRecords {
    pub patients: Vec<PatientRecord>,
}

/// Provenance of a grid cell after imputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellFill {
    Observed,
    Forward,
    Backward,
    Missing,
}

#[derive(Debug, Clone)]
pub struct PatientGrid {
    pub id: String,
    pub label: u8,
    pub anchor_hour: usize,
    /// hours x 6, NaN where missing.
    pub values: DMatrix<f64>,
    /// hours x 6, parallel to `values`.
    pub fill: Vec<[CellFill; 6]>,
}

#[derive(Debug, Clone)]
pub struct HourlyGrid {
    pub patients: Vec<PatientGrid>,
}

/// Feature matrix plus binary labels; the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<u8>,
    feature_names: Vec<String>,
    row_ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>, feature_names: Vec<String>) -> Result<Dataset> {
        Self::with_ids(x, y, feature_names, None)
    }

    pub fn with_ids(
        x: DMatrix<f64>,
        y: Vec<u8>,
        feature_names: Vec<String>,
        row_ids: Option<Vec<String>>,
    ) -> Result<Dataset> {
        if x.nrows() == 0 {
            return Err(Error::Data("dataset must have at least one row".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Data(format!(
                "row count {} does not match label count {}",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() != feature_names.len() {
            return Err(Error::Data(format!(
                "column count {} does not match feature name count {}",
                x.ncols(),
                feature_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate feature name {name:?}")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite entries".into()));
        }
        if y.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if let Some(ids) = &row_ids {
            if ids.len() != x.nrows() {
                return Err(Error::Data("row id count does not match row count".into()));
            }
        }
        Ok(Dataset { x, y, feature_names, row_ids })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> Option<&[String]> {
        self.row_ids.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn positive_rate(&self) -> f64 {
        self.y.iter().map(|&l| l as f64).sum::<f64>() / self.y.len() as f64
    }

    /// Row subset, in the given index order.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::Data("row selection is empty".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows()) {
            return Err(Error::Data(format!("row index {bad} out of range")));
        }
        let x = DMatrix::from_fn(rows.len(), self.n_features(), |i, j| self.x[(rows[i], j)]);
        let y = rows.iter().map(|&r| self.y[r]).collect();
        let ids = self
            .row_ids
            .as_ref()
            .map(|ids| rows.iter().map(|&r| ids[r].clone()).collect());
        Dataset::with_ids(x, y, self.feature_names.clone(), ids)
    }

    /// Same covariates, replaced labels.
    pub fn with_labels(&self, y: Vec<u8>) -> Result<Dataset> {
        Dataset::with_ids(self.x.clone(), y, self.feature_names.clone(), self.row_ids.clone())
    }
}

/// Per-feature mean and standard deviation (n-1 denominator) for z-scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn parse_num(field: &str, row: usize, col: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("row {row}: cannot parse {col} value {field:?}")))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Data(format!("row {row}: non-finite {col} value")))
            }
        })
}

fn parse_label(field: &str, row: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Data(format!("row {row}: label {other:?} outside {{0,1}}"))),
    }
}

const TEMP_RANGE: (f64, f64) = (25.0, 45.0);

/// Load a cohort CSV (long or wide format, detected from the header).
pub fn load_cohort(path: &Path) -> Result<RawRecords> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let long = ["patient_id", "timestamp_hours", "measurement", "value", "label", "anchor_hour"];
    let wide = ["patient_id", "hour", "hr", "rr", "spo2", "temp", "sbp", "dbp", "label"];
    if headers == long {
        load_long(reader)
    } else if headers == wide {
        load_wide(reader)
    } else {
        for required in long {
            if !headers.iter().any(|h| h == required) {
                return Err(Error::Data(format!("missing required column {required:?}")));
            }
        }
        Err(Error::Data(format!("unrecognized column order: {headers:?}")))
    }
}

struct PatientBuilder {
    label: u8,
    anchor_hour: usize,
    series: [Vec<(f64, f64)>; 6],
    seen: HashSet<(u64, usize)>,
}

fn load_long(mut reader: csv::Reader<std::fs::File>) -> Result<RawRecords> {
    // BTreeMap keeps patient order stable across runs.
    let mut patients: BTreeMap<String, PatientBuilder> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let record = record?;
        let id = record[0].trim().to_string();
        let ts = parse_num(&record[1], row, "timestamp_hours")?;
        let kind = Measurement::parse(record[2].trim())
            .ok_or_else(|| Error::Data(format!("row {row}: unknown measurement {:?}", &record[2])))?;
        let value = parse_num(&record[3], row, "value")?;
        if kind == Measurement::Temperature && !(TEMP_RANGE.0..=TEMP_RANGE.1).contains(&value) {
            return Err(Error::Data(format!(
                "row {row}: temperature {value} outside [{}, {}] (expected degrees C)",
                TEMP_RANGE.0, TEMP_RANGE.1
            )));
        }
        let label = parse_label(&record[4], row)?;
        let anchor = parse_num(&record[5], row, "anchor_hour")?;
        if anchor < 0.0 || anchor.fract() != 0.0 {
            return Err(Error::Data(format!("row {row}: anchor_hour must be a nonnegative integer")));
        }
        let entry = patients.entry(id.clone()).or_insert_with(|| PatientBuilder {
            label,
            anchor_hour: anchor as usize,
            series: Default::default(),
            seen: HashSet::new(),
        });
        if entry.label != label {
            return Err(Error::Data(format!("row {row}: conflicting labels for patient {id:?}")));
        }
        if !entry.seen.insert((ts.to_bits(), kind.index())) {
            return Err(Error::Data(format!(
                "row {row}: duplicate (patient, time, kind) = ({id:?}, {ts}, {:?})",
                CANONICAL_NAMES[kind.index()]
            )));
        }
        entry.series[kind.index()].push((ts, value));
    }
    finish_records(patients)
}

fn load_wide(mut reader: csv::Reader<std::fs::File>) -> Result<RawRecords> {
    let mut patients: BTreeMap<String, PatientBuilder> = BTreeMap::new();
    // wide column order: hr,rr,spo2,temp,sbp,dbp starting at field 2
    let kinds = [
        Measurement::HeartRate,
        Measurement::RespiratoryRate,
        Measurement::Spo2,
        Measurement::Temperature,
        Measurement::Sbp,
        Measurement::Dbp,
    ];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let id = record[0].trim().to_string();
        let hour = parse_num(&record[1], row, "hour")?;
        if hour < 0.0 || hour.fract() != 0.0 {
            return Err(Error::Data(format!("row {row}: hour must be a nonnegative integer")));
        }
        let label = parse_label(&record[8], row)?;
        let entry = patients.entry(id.clone()).or_insert_with(|| PatientBuilder {
            label,
            anchor_hour: 0,
            series: Default::default(),
            seen: HashSet::new(),
        });
        if entry.label != label {
            return Err(Error::Data(format!("row {row}: conflicting labels for patient {id:?}")));
        }
        for (k, kind) in kinds.iter().enumerate() {
            let field = record[2 + k].trim();
            if field.is_empty() {
                continue;
            }
            let value = parse_num(field, row, CANONICAL_NAMES[kind.index()])?;
            if *kind == Measurement::Temperature && !(TEMP_RANGE.0..=TEMP_RANGE.1).contains(&value) {
                return Err(Error::Data(format!(
                    "row {row}: temperature {value} outside [{}, {}]",
                    TEMP_RANGE.0, TEMP_RANGE.1
                )));
            }
            if !entry.seen.insert((hour.to_bits(), kind.index())) {
                return Err(Error::Data(format!("row {row}: duplicate (patient, hour, kind)")));
            }
            entry.series[kind.index()].push((hour, value));
        }
        // wide format carries no anchor column; default to last observed hour
        entry.anchor_hour = entry.anchor_hour.max(hour as usize);
    }
    finish_records(patients)
}

fn finish_records(patients: BTreeMap<String, PatientBuilder>) -> Result<RawRecords> {
    if patients.is_empty() {
        return Err(Error::Data("cohort file contains no data rows".into()));
    }
    let mut out = Vec::with_capacity(patients.len());
    for (id, b) in patients {
        for (k, series) in b.series.iter().enumerate() {
            if series.is_empty() {
                return Err(Error::Data(format!(
                    "patient {id:?} has no {} measurements (inclusion criterion)",
                    CANONICAL_NAMES[k]
                )));
            }
        }
        out.push(PatientRecord {
            id,
            label: b.label,
            anchor_hour: b.anchor_hour,
            series: b.series,
        });
    }
    Ok(RawRecords { patients: out })
}

/// Aggregate each patient's measurements into hourly means.
///
/// Hour index is floor(timestamp - first timestamp). A cell is the mean of
/// all values of that kind falling in [h, h+1); missing if none.
pub fn hourly_segment(records: &RawRecords) -> Result<HourlyGrid> {
    let mut patients = Vec::with_capacity(records.patients.len());
    for p in &records.patients {
        let first_ts = p
            .series
            .iter()
            .flat_map(|s| s.iter().map(|&(t, _)| t))
            .fold(f64::INFINITY, f64::min);
        let last_ts = p
            .series
            .iter()
            .flat_map(|s| s.iter().map(|&(t, _)| t))
            .fold(f64::NEG_INFINITY, f64::max);
        let n_hours = ((last_ts - first_ts).floor() as usize + 1).max(p.anchor_hour + 1);
        let mut sums: DMatrix<f64> = DMatrix::zeros(n_hours, 6);
        let mut counts: DMatrix<f64> = DMatrix::zeros(n_hours, 6);
        for (k, series) in p.series.iter().enumerate() {
            for &(t, v) in series {
                let h = (t - first_ts).floor() as usize;
                sums[(h, k)] += v;
                counts[(h, k)] += 1.0;
            }
        }
        let values = DMatrix::from_fn(n_hours, 6, |h, k| {
            if counts[(h, k)] > 0.0 {
                sums[(h, k)] / counts[(h, k)]
            } else {
                f64::NAN
            }
        });
        let fill = (0..n_hours)
            .map(|h| {
                let mut row = [CellFill::Missing; 6];
                for (k, cell) in row.iter_mut().enumerate() {
                    if counts[(h, k)] > 0.0 {
                        *cell = CellFill::Observed;
                    }
                }
                row
            })
            .collect();
        patients.push(PatientGrid {
            id: p.id.clone(),
            label: p.label,
            anchor_hour: p.anchor_hour,
            values,
            fill,
        });
    }
    Ok(HourlyGrid { patients })
}

/// Fill missing cells forward from the most recent observation, then
/// backward from the next observation for cells with no prior one.
pub fn impute(grid: &HourlyGrid) -> Result<HourlyGrid> {
    let mut patients = Vec::with_capacity(grid.patients.len());
    for p in &grid.patients {
        let n_hours = p.values.nrows();
        let mut values = p.values.clone();
        let mut fill = p.fill.clone();
        for k in 0..6 {
            if (0..n_hours).all(|h| p.fill[h][k] == CellFill::Missing) {
                return Err(Error::Data(format!(
                    "patient {:?} has no observed {} cells",
                    p.id, CANONICAL_NAMES[k]
                )));
            }
            let mut last: Option<f64> = None;
            for h in 0..n_hours {
                if fill[h][k] == CellFill::Observed {
                    last = Some(values[(h, k)]);
                } else if let Some(v) = last {
                    values[(h, k)] = v;
                    fill[h][k] = CellFill::Forward;
                }
            }
            let mut next: Option<f64> = None;
            for h in (0..n_hours).rev() {
                if fill[h][k] == CellFill::Observed || fill[h][k] == CellFill::Forward {
                    next = Some(values[(h, k)]);
                } else if let Some(v) = next {
                    values[(h, k)] = v;
                    fill[h][k] = CellFill::Backward;
                }
            }
        }
        patients.push(PatientGrid {
            id: p.id.clone(),
            label: p.label,
            anchor_hour: p.anchor_hour,
            values,
            fill,
        });
    }
    Ok(HourlyGrid { patients })
}

/// One row per patient: the six feature values at that patient's anchor hour.
pub fn snapshot(grid: &HourlyGrid) -> Result<Dataset> {
    let n = grid.patients.len();
    let mut x = DMatrix::zeros(n, 6);
    let mut y = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (i, p) in grid.patients.iter().enumerate() {
        if p.anchor_hour >= p.values.nrows() {
            return Err(Error::Data(format!(
                "patient {:?}: anchor hour {} out of range ({} hours)",
                p.id,
                p.anchor_hour,
                p.values.nrows()
            )));
        }
        for k in 0..6 {
            let v = p.values[(p.anchor_hour, k)];
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "patient {:?}: snapshot before imputation (missing {})",
                    p.id, CANONICAL_NAMES[k]
                )));
            }
            x[(i, k)] = v;
        }
        y.push(p.label);
        ids.push(p.id.clone());
    }
    Dataset::with_ids(
        x,
        y,
        CANONICAL_NAMES.iter().map(|s| s.to_string()).collect(),
        Some(ids),
    )
}

/// Z-score each column; stats use the sample (n-1) standard deviation.
pub fn normalize(data: &Dataset) -> Result<(Dataset, NormStats)> {
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::Data("normalization needs at least two rows".into()));
    }
    let mut means = Vec::with_capacity(data.n_features());
    let mut stds = Vec::with_capacity(data.n_features());
    for j in 0..data.n_features() {
        let col = data.x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Data(format!(
                "feature {:?} has zero variance",
                data.feature_names[j]
            )));
        }
        means.push(mean);
        stds.push(std);
    }
    let stats = NormStats { means, stds };
    Ok((apply_norm(data, &stats)?, stats))
}

/// Apply previously fitted normalization stats (never refits).
pub fn apply_norm(data: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.means.len() != data.n_features() {
        return Err(Error::Data("normalization stats dimension mismatch".into()));
    }
    let x = DMatrix::from_fn(data.n_rows(), data.n_features(), |i, j| {
        (data.x[(i, j)] - stats.means[j]) / stats.stds[j]
    });
    Dataset::with_ids(x, data.y.clone(), data.feature_names.clone(), data.row_ids.clone())
}

/// Invert a normalization (test support for the round-trip invariant).
pub fn invert_norm(data: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.means.len() != data.n_features() {
        return Err(Error::Data("normalization stats dimension mismatch".into()));
    }
    let x = DMatrix::from_fn(data.n_rows(), data.n_features(), |i, j| {
        data.x[(i, j)] * stats.stds[j] + stats.means[j]
    });
    Dataset::with_ids(x, data.y.clone(), data.feature_names.clone(), data.row_ids.clone())
}

/// Column means and sample stds of a matrix (shared helper).
pub(crate) fn column_stats(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let means = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let stds = DVector::from_fn(x.ncols(), |j, _| {
        (x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (means, stds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "patient_id,timestamp_hours,measurement,value,label,anchor_hour\n";

    fn full_patient_rows(id: &str, label: u8) -> String {
        let mut s = String::new();
        for (kind, v) in [("hr", 80.0), ("rr", 16.0), ("spo2", 97.0), ("temp", 37.0), ("sbp", 120.0), ("dbp", 80.0)] {
            s.push_str(&format!("{id},0.5,{kind},{v},{label},0\n"));
        }
        s
    }

    #[test]
    fn load_simple_cohort() {
        let mut content = HEADER.to_string();
        content.push_str(&full_patient_rows("a", 1));
        content.push_str(&full_patient_rows("b", 0));
        content.push_str("a,1.5,hr,90,1,0\n");
        let f = write_tmp(&content);
        let records = load_cohort(f.path()).unwrap();
        assert_eq!(records.patients.len(), 2);
        let a = &records.patients[0];
        assert_eq!(a.id, "a");
        assert_eq!(a.series[Measurement::HeartRate.index()].len(), 2);
        assert_eq!(a.series[Measurement::Spo2.index()].len(), 1);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write_tmp("patient_id,timestamp_hours,measurement,value,anchor_hour\na,0,hr,80,0\n");
        let err = load_cohort(f.path()).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut content = HEADER.to_string();
        content.push_str(&full_patient_rows("a", 0));
        content.push_str("a,0.5,hr,80,0,0\n");
        let f = write_tmp(&content);
        let err = load_cohort(f.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_label_rejected() {
        let mut content = HEADER.to_string();
        content.push_str("a,0.5,hr,80,2,0\n");
        let f = write_tmp(&content);
        let err = load_cohort(f.path()).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn unparseable_numeric_names_row() {
        let mut content = HEADER.to_string();
        content.push_str("a,0.5,hr,eighty,0,0\n");
        let f = write_tmp(&content);
        let err = load_cohort(f.path()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn temperature_unit_guard() {
        let mut content = HEADER.to_string();
        content.push_str("a,0.5,temp,98.6,0,0\n");
        let f = write_tmp(&content);
        let err = load_cohort(f.path()).unwrap_err();
        assert!(err.to_string().contains("temperature"), "{err}");
    }

    fn one_kind_records(series: Vec<(f64, f64)>, anchor: usize) -> RawRecords {
        let mut s: [Vec<(f64, f64)>; 6] = Default::default();
        // put real data on hr; give the other kinds a single value at t=0
        s[Measurement::HeartRate.index()] = series;
        for k in 0..6 {
            if k != Measurement::HeartRate.index() {
                s[k] = vec![(0.0, 30.0)];
            }
        }
        RawRecords {
            patients: vec![PatientRecord { id: "p".into(), label: 0, anchor_hour: anchor, series: s }],
        }
    }

    #[test]
    fn hourly_mean_of_two_values() {
        let records = one_kind_records(vec![(3.1, 80.0), (3.9, 90.0)], 0);
        let grid = hourly_segment(&records).unwrap();
        assert_eq!(grid.patients[0].values[(3, Measurement::HeartRate.index())], 85.0);
    }

    #[test]
    fn hourly_single_value_identity() {
        let records = one_kind_records(vec![(2.2, 77.0)], 0);
        let grid = hourly_segment(&records).unwrap();
        assert_eq!(grid.patients[0].values[(2, Measurement::HeartRate.index())], 77.0);
    }

    #[test]
    fn hourly_segment_order_invariant() {
        let a = hourly_segment(&one_kind_records(vec![(3.1, 80.0), (3.9, 90.0), (0.0, 70.0)], 0)).unwrap();
        let b = hourly_segment(&one_kind_records(vec![(3.9, 90.0), (0.0, 70.0), (3.1, 80.0)], 0)).unwrap();
        let (va, vb) = (&a.patients[0].values, &b.patients[0].values);
        assert_eq!(va.shape(), vb.shape());
        for (x, y) in va.iter().zip(vb.iter()) {
            assert!(x == y || (x.is_nan() && y.is_nan()));
        }
    }

    #[test]
    fn impute_forward_then_backward() {
        // [_, 80, _, 90] -> [80, 80, 80, 90]
        let records = one_kind_records(vec![(1.0, 80.0), (3.0, 90.0)], 0);
        let grid = impute(&hourly_segment(&records).unwrap()).unwrap();
        let k = Measurement::HeartRate.index();
        let p = &grid.patients[0];
        assert_eq!(
            (0..4).map(|h| p.values[(h, k)]).collect::<Vec<_>>(),
            vec![80.0, 80.0, 80.0, 90.0]
        );
        assert_eq!(p.fill[0][k], CellFill::Backward);
        assert_eq!(p.fill[2][k], CellFill::Forward);
    }

    #[test]
    fn impute_preserves_observed() {
        let records = one_kind_records(vec![(0.0, 70.0), (1.0, 80.0), (5.5, 90.0)], 0);
        let before = hourly_segment(&records).unwrap();
        let after = impute(&before).unwrap();
        let k = Measurement::HeartRate.index();
        for h in 0..before.patients[0].values.nrows() {
            if before.patients[0].fill[h][k] == CellFill::Observed {
                assert_eq!(after.patients[0].values[(h, k)], before.patients[0].values[(h, k)]);
            }
        }
    }

    /// Independent two-pass fill over a plain vector, for comparison.
    fn reference_fill(series: &[Option<f64>]) -> Vec<f64> {
        let mut out: Vec<Option<f64>> = series.to_vec();
        for i in 1..out.len() {
            if out[i].is_none() {
                out[i] = out[i - 1];
            }
        }
        for i in (0..out.len().saturating_sub(1)).rev() {
            if out[i].is_none() {
                out[i] = out[i + 1];
            }
        }
        out.into_iter().map(|v| v.unwrap()).collect()
    }

    #[test]
    fn impute_matches_reference_on_random_masks() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, 0);
        for _ in 0..50 {
            let len = rng.random_range(2..20usize);
            let mut cells: Vec<Option<f64>> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        Some(rng.random_range(50.0..100.0f64))
                    } else {
                        None
                    }
                })
                .collect();
            if cells.iter().all(|c| c.is_none()) {
                cells[0] = Some(60.0);
            }
            let series: Vec<(f64, f64)> = cells
                .iter()
                .enumerate()
                .filter_map(|(h, c)| c.map(|v| (h as f64 + 0.5, v)))
                .collect();
            // other kinds pin hour 0, so the grid spans [0, last observed hour]
            let last_obs = series.last().unwrap().0.floor() as usize;
            let grid = impute(&hourly_segment(&one_kind_records(series, 0)).unwrap()).unwrap();
            let k = Measurement::HeartRate.index();
            let expected = reference_fill(&cells[0..=last_obs]);
            let got: Vec<f64> = (0..grid.patients[0].values.nrows())
                .map(|h| grid.patients[0].values[(h, k)])
                .collect();
            assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g, e);
            }
        }
    }

    #[test]
    fn snapshot_extracts_anchor_row() {
        let records = one_kind_records(vec![(0.0, 70.0), (5.0, 90.0)], 5);
        let grid = impute(&hourly_segment(&records).unwrap()).unwrap();
        let data = snapshot(&grid).unwrap();
        assert_eq!(data.n_rows(), 1);
        assert_eq!(data.n_features(), 6);
        assert_eq!(data.x()[(0, Measurement::HeartRate.index())], 90.0);
        assert_eq!(data.y()[0], 0);
        assert_eq!(data.feature_names()[0], "sbp");
    }

    #[test]
    fn snapshot_anchor_out_of_range() {
        let records = one_kind_records(vec![(0.0, 70.0)], 0);
        let mut grid = impute(&hourly_segment(&records).unwrap()).unwrap();
        grid.patients[0].anchor_hour = 10;
        assert!(snapshot(&grid).is_err());
    }

    #[test]
    fn normalize_two_point_column() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let data = Dataset::new(x, vec![0, 1], vec!["f".into()]).unwrap();
        let (normed, stats) = normalize(&data).unwrap();
        assert_eq!(stats.means[0], 2.0);
        assert!((stats.stds[0] - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((normed.x()[(0, 0)] + normed.x()[(1, 0)]).abs() < 1e-12);
    }

    #[test]
    fn normalize_round_trip() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, 1);
        let x = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-10.0..10.0));
        let data = Dataset::new(x.clone(), vec![0; 40], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let (normed, stats) = normalize(&data).unwrap();
        // columns are standardized
        let (m, s) = column_stats(normed.x());
        for j in 0..3 {
            assert!(m[j].abs() <= 1e-10);
            assert!((s[j] - 1.0).abs() <= 1e-10);
        }
        // invert recovers the input
        let back = invert_norm(&normed, &stats).unwrap();
        for (a, b) in back.x().iter().zip(x.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_variance_feature_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 2.0]);
        let data = Dataset::new(x, vec![0, 1, 0], vec!["f".into()]).unwrap();
        assert!(normalize(&data).is_err());
    }

    #[test]
    fn wide_format_loads() {
        let content = "patient_id,hour,hr,rr,spo2,temp,sbp,dbp,label\n\
                       a,0,80,16,97,37,120,80,1\n\
                       a,1,,,97,37,118,79,1\n\
                       b,0,70,14,99,36.5,110,70,0\n";
        let f = write_tmp(content);
        let records = load_cohort(f.path()).unwrap();
        assert_eq!(records.patients.len(), 2);
        let grid = impute(&hourly_segment(&records).unwrap()).unwrap();
        let data = snapshot(&grid).unwrap();
        assert_eq!(data.n_rows(), 2);
        // patient a anchored at last hour, hr forward-filled
        let a_row = data.row_ids().unwrap().iter().position(|i| i == "a").unwrap();
        assert_eq!(data.x()[(a_row, Measurement::HeartRate.index())], 80.0);
    }
}
