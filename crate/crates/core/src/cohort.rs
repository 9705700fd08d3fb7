//! Cohort data model: CSV ingestion, one-hot encoding, covariate
//! standardization and stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {reason}")]
    BadValue {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("normalization needs at least 2 records, got {0}")]
    DegenerateCohort(usize),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("schema mapping names no covariates")]
    NoCovariates,
    #[error("covariate `{0}` has no normalization statistics")]
    MissingStatistics(String),
    #[error("record `{id}` has {got} covariates, schema has {expected}")]
    SchemaMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CohortError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateKind {
    Continuous,
    /// One indicator column of a one-hot encoded categorical.
    Categorical,
}

/// One encoded covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    /// Encoded name: the source column for continuous covariates,
    /// `column=level` for indicators.
    pub name: String,
    pub kind: CovariateKind,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

/// How the columns of an input file map onto a cohort.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaMapping {
    /// Patient identifier column. Row numbers are used when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub covariates: Vec<f64>,
    pub treated: bool,
    /// Event observed (e.g. recurrence).
    pub event: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-covariate standardization statistics, keyed by covariate name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Normalization {
    pub columns: BTreeMap<String, ColumnStats>,
}

impl Normalization {
    /// Standardizes the continuous columns of `cohort` with these statistics.
    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        let mut plan = Vec::new();
        for (j, cov) in cohort.schema.iter().enumerate() {
            if cov.kind == CovariateKind::Continuous {
                let stats = self
                    .columns
                    .get(&cov.name)
                    .ok_or_else(|| CohortError::MissingStatistics(cov.name.clone()))?;
                plan.push((j, *stats));
            }
        }
        let records = cohort
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for &(j, s) in &plan {
                    r.covariates[j] = (r.covariates[j] - s.mean) / s.std;
                }
                r
            })
            .collect();
        Ok(Cohort {
            schema: cohort.schema.clone(),
            records,
            normalization: Some(self.clone()),
        })
    }

    /// Maps a standardized value of covariate `name` back to its input scale.
    pub fn denormalize(&self, name: &str, value: f64) -> f64 {
        match self.columns.get(name) {
            Some(s) => value * s.std + s.mean,
            None => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: Vec<Covariate>,
    pub records: Vec<PatientRecord>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl Cohort {
    /// Builds a cohort after checking every record against the schema.
    pub fn new(schema: Vec<Covariate>, records: Vec<PatientRecord>) -> Result<Self> {
        let d = schema.len();
        for r in &records {
            if r.covariates.len() != d {
                return Err(CohortError::SchemaMismatch {
                    id: r.id.clone(),
                    got: r.covariates.len(),
                    expected: d,
                });
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(CohortError::BadValue {
                    row: 0,
                    column: schema[j].name.clone(),
                    reason: format!("non-finite value in record `{}`", r.id),
                });
            }
        }
        Ok(Cohort {
            schema,
            records,
            normalization: None,
        })
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Encoded covariate count.
    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.schema.iter().map(|c| c.name.clone()).collect()
    }

    /// Covariate rows, in record order.
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.covariates.clone()).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    /// (untreated, treated) counts.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.records.iter().filter(|r| r.treated).count();
        (self.len() - treated, treated)
    }

    /// Records selected by index, keeping schema and normalization.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&PatientRecord) -> bool) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Writes the cohort in the format [`load_cohort`] reads: an `id` column,
    /// one column per encoded covariate, then treatment and outcome columns.
    pub fn write_csv<W: Write>(&self, writer: W, treatment: &str, outcome: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.covariate_names());
        header.push(treatment.to_string());
        header.push(outcome.to_string());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone()];
            row.extend(r.covariates.iter().map(|v| v.to_string()));
            row.push(u8::from(r.treated).to_string());
            row.push(u8::from(r.event).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl RawTable {
    fn read<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(source);
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RawTable { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    }
}

fn cell<'a>(row: &'a csv::StringRecord, idx: usize, line: usize, column: &str) -> Result<&'a str> {
    match row.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(CohortError::BadValue {
            row: line,
            column: column.to_string(),
            reason: "empty cell".into(),
        }),
    }
}

fn parse_real(raw: &str, line: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CohortError::BadValue {
            row: line,
            column: column.to_string(),
            reason: format!("`{raw}` is not a finite number"),
        }),
    }
}

fn parse_flag(raw: &str, line: usize, column: &str) -> Result<bool> {
    match raw.parse::<f64>() {
        Ok(0.0) => Ok(false),
        Ok(1.0) => Ok(true),
        _ => Err(CohortError::BadValue {
            row: line,
            column: column.to_string(),
            reason: format!("`{raw}` is not 0 or 1"),
        }),
    }
}

/// Derives the encoded schema from the data: categorical levels are the
/// sorted set of observed values.
fn derive_schema(table: &RawTable, mapping: &SchemaMapping) -> Result<Vec<Covariate>> {
    let mut schema: Vec<Covariate> = mapping
        .continuous
        .iter()
        .map(|name| Covariate {
            name: name.clone(),
            kind: CovariateKind::Continuous,
            source: name.clone(),
            level: None,
        })
        .collect();
    for column in &mapping.categorical {
        let idx = table.column(column)?;
        let mut levels = BTreeSet::new();
        for (i, row) in table.rows.iter().enumerate() {
            levels.insert(cell(row, idx, i + 2, column)?.to_string());
        }
        schema.extend(levels.into_iter().map(|level| Covariate {
            name: format!("{column}={level}"),
            kind: CovariateKind::Categorical,
            source: column.clone(),
            level: Some(level),
        }));
    }
    Ok(schema)
}

fn build(table: &RawTable, mapping: &SchemaMapping, schema: Vec<Covariate>) -> Result<Cohort> {
    if mapping.continuous.is_empty() && mapping.categorical.is_empty() {
        return Err(CohortError::NoCovariates);
    }
    let id_idx = mapping.id.as_deref().map(|c| table.column(c)).transpose()?;
    let t_idx = table.column(&mapping.treatment)?;
    let y_idx = table.column(&mapping.outcome)?;
    let cov_idx = schema
        .iter()
        .map(|c| table.column(&c.source))
        .collect::<Result<Vec<_>>>()?;
    // Every mapped categorical must be present even if it has no levels here.
    for column in &mapping.categorical {
        table.column(column)?;
    }

    let mut records = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let line = i + 2;
        let id = match id_idx {
            Some(idx) => cell(row, idx, line, mapping.id.as_deref().unwrap_or("id"))?.to_string(),
            None => (i + 1).to_string(),
        };
        let treated = parse_flag(cell(row, t_idx, line, &mapping.treatment)?, line, &mapping.treatment)?;
        let event = parse_flag(cell(row, y_idx, line, &mapping.outcome)?, line, &mapping.outcome)?;
        let mut covariates = Vec::with_capacity(schema.len());
        for (cov, &idx) in schema.iter().zip(&cov_idx) {
            let raw = cell(row, idx, line, &cov.source)?;
            let value = match &cov.level {
                None => parse_real(raw, line, &cov.source)?,
                Some(level) => f64::from(u8::from(raw == level)),
            };
            covariates.push(value);
        }
        // A categorical value outside the schema's levels cannot be encoded.
        for column in &mapping.categorical {
            let idx = table.column(column)?;
            let raw = cell(row, idx, line, column)?;
            let known = schema
                .iter()
                .any(|c| &c.source == column && c.level.as_deref() == Some(raw));
            if !known {
                return Err(CohortError::BadValue {
                    row: line,
                    column: column.clone(),
                    reason: format!("unknown category `{raw}`"),
                });
            }
        }
        records.push(PatientRecord {
            id,
            covariates,
            treated,
            event,
        });
    }
    Cohort::new(schema, records)
}

/// Reads a comma-separated cohort with a header row.
pub fn load_cohort<R: Read>(source: R, mapping: &SchemaMapping) -> Result<Cohort> {
    let table = RawTable::read(source)?;
    let schema = derive_schema(&table, mapping)?;
    build(&table, mapping, schema)
}

/// Reads a cohort using an existing encoded schema, so that an external
/// cohort gets exactly the training cohort's one-hot layout.
pub fn load_cohort_with_schema<R: Read>(
    source: R,
    mapping: &SchemaMapping,
    schema: &[Covariate],
) -> Result<Cohort> {
    let table = RawTable::read(source)?;
    build(&table, mapping, schema.to_vec())
}

/// Population mean and standard deviation of each continuous covariate.
/// Constant columns get a standard deviation of 1.
pub fn statistics(cohort: &Cohort) -> Result<Normalization> {
    let n = cohort.len();
    if n < 2 {
        return Err(CohortError::DegenerateCohort(n));
    }
    let mut columns = BTreeMap::new();
    for (j, cov) in cohort.schema.iter().enumerate() {
        if cov.kind != CovariateKind::Continuous {
            continue;
        }
        let mean = cohort.records.iter().map(|r| r.covariates[j]).sum::<f64>() / n as f64;
        let var = cohort
            .records
            .iter()
            .map(|r| (r.covariates[j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let mut std = var.sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            std = 1.0;
        }
        columns.insert(cov.name.clone(), ColumnStats { mean, std });
    }
    Ok(Normalization { columns })
}

/// Standardizes continuous covariates to mean 0 / standard deviation 1 and
/// stores the statistics on the returned cohort.
pub fn normalize(cohort: &Cohort) -> Result<Cohort> {
    statistics(cohort)?.apply(cohort)
}

/// Splits into `(training, validation)`, stratified on (treatment, outcome).
/// Each of the four cells sends `round(fraction * size)` records to
/// validation. Records keep their original relative order.
pub fn split(cohort: &Cohort, validation_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(CohortError::InvalidFraction(validation_fraction));
    }
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (t, y) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut cell: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.records[i].treated == t && cohort.records[i].event == y)
            .collect();
        if cell.is_empty() {
            continue;
        }
        cell.shuffle(&mut rng);
        let k = (cell.len() as f64 * validation_fraction).round() as usize;
        valid.extend_from_slice(&cell[..k]);
        train.extend_from_slice(&cell[k..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((cohort.subset(&train), cohort.subset(&valid)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> SchemaMapping {
        SchemaMapping {
            id: Some("id".into()),
            treatment: "t".into(),
            outcome: "y".into(),
            continuous: vec!["size".into()],
            categorical: vec!["site".into()],
        }
    }

    const SMALL: &str = "id,size,site,t,y\n\
                         a,4.5,gastric,0,0\n\
                         b,8,small_bowel,1,1\n\
                         c,2.0,gastric,1,0\n";

    #[test]
    fn loads_and_one_hot_encodes() {
        let c = load_cohort(SMALL.as_bytes(), &mapping()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.dim(), 3);
        assert_eq!(c.covariate_names(), vec!["size", "site=gastric", "site=small_bowel"]);
        assert_eq!(c.records[0].covariates, vec![4.5, 1.0, 0.0]);
        assert_eq!(c.records[1].covariates, vec![8.0, 0.0, 1.0]);
        assert!(c.records[1].treated && c.records[1].event);
    }

    #[test]
    fn missing_outcome_column() {
        let data = "id,size,site,t\na,1,gastric,0\n";
        let err = load_cohort(data.as_bytes(), &mapping()).unwrap_err();
        assert!(matches!(err, CohortError::MissingColumn(c) if c == "y"));
    }

    #[test]
    fn treatment_out_of_range() {
        let data = "id,size,site,t,y\na,1,gastric,2,0\n";
        let err = load_cohort(data.as_bytes(), &mapping()).unwrap_err();
        assert!(matches!(err, CohortError::BadValue { column, .. } if column == "t"));
    }

    #[test]
    fn empty_and_non_numeric_cells_rejected() {
        let data = "id,size,site,t,y\na,,gastric,0,0\n";
        assert!(matches!(
            load_cohort(data.as_bytes(), &mapping()),
            Err(CohortError::BadValue { .. })
        ));
        let data = "id,size,site,t,y\na,big,gastric,0,0\n";
        assert!(matches!(
            load_cohort(data.as_bytes(), &mapping()),
            Err(CohortError::BadValue { .. })
        ));
        let data = "id,size,site,t,y\na,NaN,gastric,0,0\n";
        assert!(matches!(
            load_cohort(data.as_bytes(), &mapping()),
            Err(CohortError::BadValue { .. })
        ));
    }

    #[test]
    fn external_schema_rejects_unknown_level() {
        let train = load_cohort(SMALL.as_bytes(), &mapping()).unwrap();
        let ext = "id,size,site,t,y\nz,3,rectum,0,0\n";
        let err = load_cohort_with_schema(ext.as_bytes(), &mapping(), &train.schema).unwrap_err();
        assert!(matches!(err, CohortError::BadValue { column, .. } if column == "site"));
        let ext = "id,size,site,t,y\nz,3,small_bowel,0,0\n";
        let c = load_cohort_with_schema(ext.as_bytes(), &mapping(), &train.schema).unwrap();
        assert_eq!(c.records[0].covariates, vec![3.0, 0.0, 1.0]);
    }

    fn one_column(values: &[f64]) -> Cohort {
        let schema = vec![Covariate {
            name: "x".into(),
            kind: CovariateKind::Continuous,
            source: "x".into(),
            level: None,
        }];
        let records = values
            .iter()
            .enumerate()
            .map(|(i, &v)| PatientRecord {
                id: i.to_string(),
                covariates: vec![v],
                treated: false,
                event: false,
            })
            .collect();
        Cohort::new(schema, records).unwrap()
    }

    #[test]
    fn normalize_hand_computed() {
        let c = normalize(&one_column(&[2.0, 4.0, 6.0])).unwrap();
        let expected = 2.0 / (8.0f64 / 3.0).sqrt();
        let got: Vec<f64> = c.records.iter().map(|r| r.covariates[0]).collect();
        assert!((got[0] + expected).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - expected).abs() < 1e-12);
        assert!((got[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let c = normalize(&one_column(&[5.0, 5.0, 5.0])).unwrap();
        assert!(c.records.iter().all(|r| r.covariates[0] == 0.0));
        assert_eq!(c.normalization.unwrap().columns["x"].std, 1.0);
    }

    #[test]
    fn normalize_is_idempotent_on_standardized_input() {
        let once = normalize(&one_column(&[1.0, 3.0, 4.0, 10.0])).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.records.iter().zip(&twice.records) {
            assert!((a.covariates[0] - b.covariates[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_needs_two_records() {
        assert!(matches!(
            normalize(&one_column(&[1.0])),
            Err(CohortError::DegenerateCohort(1))
        ));
    }

    #[test]
    fn binary_columns_untouched() {
        let c = load_cohort(SMALL.as_bytes(), &mapping()).unwrap();
        let n = normalize(&c).unwrap();
        for (a, b) in c.records.iter().zip(&n.records) {
            assert_eq!(a.covariates[1..], b.covariates[1..]);
        }
    }

    fn cells(n00: usize, n01: usize, n10: usize, n11: usize) -> Cohort {
        let mut recs = Vec::new();
        for (count, t, y) in [(n00, false, false), (n01, false, true), (n10, true, false), (n11, true, true)] {
            for _ in 0..count {
                recs.push(PatientRecord {
                    id: recs.len().to_string(),
                    covariates: vec![recs.len() as f64],
                    treated: t,
                    event: y,
                });
            }
        }
        let mut c = one_column(&[]);
        c.records = recs;
        c
    }

    #[test]
    fn split_is_stratified() {
        let c = cells(40, 40, 10, 10);
        let (train, valid) = split(&c, 0.5, 3).unwrap();
        let count = |c: &Cohort, t: bool, y: bool| {
            c.records.iter().filter(|r| r.treated == t && r.event == y).count()
        };
        for (t, y, want) in [(false, false, 20), (false, true, 20), (true, false, 5), (true, true, 5)] {
            assert_eq!(count(&valid, t, y), want);
            assert_eq!(count(&train, t, y), want);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = cells(30, 20, 25, 25);
        let a = split(&c, 0.3, 7).unwrap();
        let b = split(&c, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.0.records.iter().chain(&a.1.records).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let c = cells(2, 2, 2, 2);
        assert!(matches!(split(&c, 0.0, 1), Err(CohortError::InvalidFraction(_))));
        assert!(matches!(split(&c, 1.0, 1), Err(CohortError::InvalidFraction(_))));
        assert!(matches!(split(&cells(0, 0, 0, 0), 0.5, 1), Err(CohortError::EmptyCohort)));
    }
}
