//! Interchange tables passed between stages.
//!
//! A table holds encoded, normalized records: `id`, one column per covariate,
//! `_treated`, `_event`, then any stage-specific columns. Floats are written
//! in shortest round-trip form, so reading a table back is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use stratopt::cohort::PatientRecord;

use crate::error::CliError;

const TREATED: &str = "_treated";
const EVENT: &str = "_event";

/// Extra per-record columns, in column order.
pub type Extras = Vec<(String, Vec<String>)>;

pub fn write(path: &Path, names: &[String], records: &[PatientRecord], extras: &Extras) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::file(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend(names.iter().cloned());
    header.push(TREATED.into());
    header.push(EVENT.into());
    header.extend(extras.iter().map(|(name, _)| name.clone()));
    w.write_record(&header).map_err(|e| CliError::file(path, e))?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.id.clone()];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        row.push(u8::from(r.treated).to_string());
        row.push(u8::from(r.event).to_string());
        row.extend(extras.iter().map(|(_, values)| values[i].clone()));
        w.write_record(&row).map_err(|e| CliError::file(path, e))?;
    }
    w.flush().map_err(|e| CliError::file(path, e))?;
    Ok(())
}

/// Records plus the named extra columns.
pub struct Table {
    pub records: Vec<PatientRecord>,
    pub extras: BTreeMap<String, Vec<String>>,
}

impl Table {
    pub fn column<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>, CliError> {
        let values = self
            .extras
            .get(name)
            .ok_or_else(|| CliError::Data(format!("interchange column `{name}` missing")))?;
        values
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Data(format!("column `{name}`: cannot parse `{v}`")))
            })
            .collect()
    }
}

pub fn read(path: &Path, names: &[String]) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::file(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| CliError::file(path, e))?.clone();
    let expected = 3 + names.len();
    let fixed: Vec<&str> = header.iter().take(expected).collect();
    let mut want = vec!["id"];
    want.extend(names.iter().map(String::as_str));
    want.extend([TREATED, EVENT]);
    if fixed != want {
        return Err(CliError::Data(format!(
            "{}: header does not match the stage schema",
            path.display()
        )));
    }
    let extra_names: Vec<String> = header.iter().skip(expected).map(String::from).collect();
    let mut extras: BTreeMap<String, Vec<String>> = extra_names.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::file(path, e))?;
        let bad = |what: &str| CliError::Data(format!("{}: row {}: bad {what}", path.display(), line + 1));
        let covariates = (1..=names.len())
            .map(|j| row[j].parse::<f64>().map_err(|_| bad(&names[j - 1])))
            .collect::<Result<Vec<_>, _>>()?;
        let flag = |s: &str, what: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        records.push(PatientRecord {
            id: row[0].to_string(),
            covariates,
            treated: flag(&row[names.len() + 1], TREATED)?,
            event: flag(&row[names.len() + 2], EVENT)?,
        });
        for (k, name) in extra_names.iter().enumerate() {
            extras.get_mut(name).expect("extra column").push(row[expected + k].to_string());
        }
    }
    Ok(Table { records, extras })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let names = vec!["a".to_string(), "b=x".to_string()];
        let records = vec![
            PatientRecord {
                id: "p1".into(),
                covariates: vec![0.1 + 0.2, -1e-300],
                treated: true,
                event: false,
            },
            PatientRecord {
                id: "p,2".into(),
                covariates: vec![f64::MAX, 1.0 / 3.0],
                treated: false,
                event: true,
            },
        ];
        let extras = vec![("risk".to_string(), vec!["0.25".to_string(), "0.5".to_string()])];
        write(&path, &names, &records, &extras).unwrap();
        let t = read(&path, &names).unwrap();
        assert_eq!(t.records, records);
        assert_eq!(t.column::<f64>("risk").unwrap(), vec![0.25, 0.5]);
        assert!(t.column::<f64>("bucket").is_err());
    }

    #[test]
    fn schema_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write(&path, &["a".to_string()], &[], &Vec::new()).unwrap();
        assert!(read(&path, &["b".to_string()]).is_err());
    }
}
