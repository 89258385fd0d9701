//! Encounter records, exclusions, censoring and covariate standardization.
//!
//! CSV schema (exact column names): `id,ttu_raw_min,voided,age_years,sex,admitted,catheter,cpa`.
//! Empty cells are missing values, booleans are `0`/`1` and `sex` is `F`, `M`
//! or empty. Prepared exports append derived columns prefixed `prep_`, which
//! the reader ignores.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default right-censoring limit in minutes.
pub const DEFAULT_CENSOR_LIMIT_MIN: f64 = 300.0;

/// How sex is mapped onto the 0/1 indicator used by the model.
pub const SEX_ENCODING: &str = "female=0,male=1";

/// Input columns, in export order.
pub const CSV_COLUMNS: [&str; 8] = [
    "id",
    "ttu_raw_min",
    "voided",
    "age_years",
    "sex",
    "admitted",
    "catheter",
    "cpa",
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("censor limit must be positive and finite, got {0}")]
    InvalidCensorLimit(f64),
    #[error("record {id}: voided without a recorded time (run exclusions first)")]
    MissingTime { id: String },
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("unknown column {column:?}; known columns: {known}")]
    UnknownColumn { column: String, known: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Sex {
    pub fn indicator(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

/// One ED encounter as captured on the case report form.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// Minutes from arrival to first void, when the patient voided.
    pub ttu_raw_min: Option<f64>,
    pub voided: bool,
    pub age_years: Option<f64>,
    pub sex: Option<Sex>,
    pub admitted: bool,
    pub catheter_at_presentation: bool,
    pub cpa_on_arrival: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionReason {
    Cpa,
    Catheter,
    MissingTime,
}

impl ExclusionReason {
    pub fn label(self) -> &'static str {
        match self {
            ExclusionReason::Cpa => "cpa",
            ExclusionReason::Catheter => "catheter",
            ExclusionReason::MissingTime => "missing_time",
        }
    }

    /// First matching reason, checked in the order the criteria are listed.
    pub fn of(record: &PatientRecord) -> Option<Self> {
        if record.cpa_on_arrival {
            Some(ExclusionReason::Cpa)
        } else if record.catheter_at_presentation {
            Some(ExclusionReason::Catheter)
        } else if record.voided && record.ttu_raw_min.is_none() {
            Some(ExclusionReason::MissingTime)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub cpa: usize,
    pub catheter: usize,
    pub missing_time: usize,
}

impl ExclusionTally {
    pub fn total(&self) -> usize {
        self.cpa + self.catheter + self.missing_time
    }
}

/// Drops cardiopulmonary arrests, catheterized patients and voided patients
/// without a recorded time. Each dropped record counts once, under the first
/// reason that applies.
pub fn apply_exclusions(records: Vec<PatientRecord>) -> (Vec<PatientRecord>, ExclusionTally) {
    let mut tally = ExclusionTally::default();
    let kept = records
        .into_iter()
        .filter(|r| match ExclusionReason::of(r) {
            None => true,
            Some(ExclusionReason::Cpa) => {
                tally.cpa += 1;
                false
            }
            Some(ExclusionReason::Catheter) => {
                tally.catheter += 1;
                false
            }
            Some(ExclusionReason::MissingTime) => {
                tally.missing_time += 1;
                false
            }
        })
        .collect();
    (kept, tally)
}

/// Location and scale used to standardize age.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeStandardization {
    pub mean: f64,
    pub sd: f64,
}

/// The four covariate inputs of the linear term for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariates {
    pub age_std: f64,
    pub age_missing: bool,
    pub sex01: f64,
    pub sex_missing: bool,
}

impl Covariates {
    /// Design vector in coefficient order `(age, age_mis, sex, sex_mis)`.
    #[inline]
    pub fn design(&self) -> [f64; 4] {
        [
            self.age_std,
            f64::from(u8::from(self.age_missing)),
            self.sex01,
            f64::from(u8::from(self.sex_missing)),
        ]
    }

    /// Builds covariates for a new patient using an existing standardization.
    pub fn from_raw(age_years: Option<f64>, sex: Option<Sex>, std: &AgeStandardization) -> Self {
        let (age_std, age_missing) = match age_years {
            Some(a) => ((a - std.mean) / std.sd, false),
            None => (0.0, true),
        };
        let (sex01, sex_missing) = match sex {
            Some(s) => (s.indicator(), false),
            None => (0.0, true),
        };
        Covariates {
            age_std,
            age_missing,
            sex01,
            sex_missing,
        }
    }
}

/// A single prepared row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreparedRow {
    pub t_min: f64,
    pub censored: bool,
    pub voided: bool,
    pub outcome: bool,
    pub covariates: Covariates,
}

/// Model-ready arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub n: usize,
    pub ids: Vec<String>,
    /// `min(t_raw, C)`; zero for rows that never voided.
    pub t_min: Vec<f64>,
    /// Raw time for voided rows, kept for measurement-error analyses.
    pub t_raw_min: Vec<Option<f64>>,
    pub censored: Vec<bool>,
    pub voided: Vec<bool>,
    pub outcome: Vec<bool>,
    pub age_std: Vec<f64>,
    pub age_missing: Vec<bool>,
    pub sex01: Vec<f64>,
    pub sex_missing: Vec<bool>,
    pub age_mean: f64,
    pub age_sd: f64,
    pub censor_limit_min: f64,
    pub t_scale_min: f64,
}

/// Sample standard deviation (n - 1 denominator). `None` for fewer than two values.
pub(crate) fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

/// Censors times at `censor_limit_min`, standardizes age on the non-missing
/// ages and derives the missingness flags.
pub fn prepare_dataset(
    records: &[PatientRecord],
    censor_limit_min: f64,
) -> Result<PreparedDataset, DataError> {
    prepare_dataset_with(records, censor_limit_min, None)
}

/// As [`prepare_dataset`], but with a fixed age standardization, e.g. the
/// one of a fitted model when scoring an evaluation cohort.
pub fn prepare_dataset_with(
    records: &[PatientRecord],
    censor_limit_min: f64,
    standardization: Option<AgeStandardization>,
) -> Result<PreparedDataset, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(censor_limit_min > 0.0 && censor_limit_min.is_finite()) {
        return Err(DataError::InvalidCensorLimit(censor_limit_min));
    }
    let n = records.len();

    let std = standardization.unwrap_or_else(|| {
        let ages: Vec<f64> = records.iter().filter_map(|r| r.age_years).collect();
        if ages.is_empty() {
            return AgeStandardization { mean: 0.0, sd: 1.0 };
        }
        let mean = ages.iter().sum::<f64>() / ages.len() as f64;
        let sd = match sample_sd(&ages) {
            Some(sd) if sd > 0.0 => sd,
            _ => 1.0,
        };
        AgeStandardization { mean, sd }
    });

    let mut out = PreparedDataset {
        n,
        ids: Vec::with_capacity(n),
        t_min: Vec::with_capacity(n),
        t_raw_min: Vec::with_capacity(n),
        censored: Vec::with_capacity(n),
        voided: Vec::with_capacity(n),
        outcome: Vec::with_capacity(n),
        age_std: Vec::with_capacity(n),
        age_missing: Vec::with_capacity(n),
        sex01: Vec::with_capacity(n),
        sex_missing: Vec::with_capacity(n),
        age_mean: std.mean,
        age_sd: std.sd,
        censor_limit_min,
        t_scale_min: 1.0,
    };

    for r in records {
        let (t, c, raw) = if r.voided {
            let raw = r
                .ttu_raw_min
                .ok_or_else(|| DataError::MissingTime { id: r.id.clone() })?;
            (raw.min(censor_limit_min), raw > censor_limit_min, Some(raw))
        } else {
            (0.0, false, None)
        };
        let cov = Covariates::from_raw(r.age_years, r.sex, &std);
        out.ids.push(r.id.clone());
        out.t_min.push(t);
        out.t_raw_min.push(raw);
        out.censored.push(c);
        out.voided.push(r.voided);
        out.outcome.push(r.admitted);
        out.age_std.push(cov.age_std);
        out.age_missing.push(cov.age_missing);
        out.sex01.push(cov.sex01);
        out.sex_missing.push(cov.sex_missing);
    }

    let voided_t = out.voided_times();
    out.t_scale_min = sample_sd(&voided_t).map_or(1.0, |sd| sd.max(1.0));
    Ok(out)
}

impl PreparedDataset {
    pub fn row(&self, i: usize) -> PreparedRow {
        PreparedRow {
            t_min: self.t_min[i],
            censored: self.censored[i],
            voided: self.voided[i],
            outcome: self.outcome[i],
            covariates: self.covariates(i),
        }
    }

    pub fn covariates(&self, i: usize) -> Covariates {
        Covariates {
            age_std: self.age_std[i],
            age_missing: self.age_missing[i],
            sex01: self.sex01[i],
            sex_missing: self.sex_missing[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = PreparedRow> + '_ {
        (0..self.n).map(|i| self.row(i))
    }

    /// Censored times of the rows that voided.
    pub fn voided_times(&self) -> Vec<f64> {
        self.t_min
            .iter()
            .zip(&self.voided)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn n_voided(&self) -> usize {
        self.voided.iter().filter(|&&m| m).count()
    }

    pub fn standardization(&self) -> AgeStandardization {
        AgeStandardization {
            mean: self.age_mean,
            sd: self.age_sd,
        }
    }

    /// SHA-256 over the model-relevant arrays, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update(self.censor_limit_min.to_le_bytes());
        for i in 0..self.n {
            h.update(self.t_min[i].to_le_bytes());
            h.update([
                u8::from(self.censored[i]),
                u8::from(self.voided[i]),
                u8::from(self.outcome[i]),
                u8::from(self.age_missing[i]),
                u8::from(self.sex_missing[i]),
            ]);
            h.update(self.age_std[i].to_le_bytes());
            h.update(self.sex01[i].to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn parse_bool(cell: &str, column: &str, row: usize) -> Result<bool, DataError> {
    match cell.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::MalformedRow {
            row,
            message: format!("{column}: expected 0 or 1, got {other:?}"),
        }),
    }
}

fn parse_opt_nonneg(cell: &str, column: &str, row: usize) -> Result<Option<f64>, DataError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| DataError::MalformedRow {
        row,
        message: format!("{column}: not a number: {cell:?}"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(DataError::MalformedRow {
            row,
            message: format!("{column}: must be a nonnegative finite number, got {cell}"),
        });
    }
    Ok(Some(v))
}

/// Reads encounter records from CSV. Row numbers in errors are 1-based data
/// rows (the header is not counted).
pub fn read_records<R: Read>(reader: R) -> Result<Vec<PatientRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [usize::MAX; CSV_COLUMNS.len()];
    for (pos, name) in headers.iter().enumerate() {
        let name = name.trim();
        if let Some(k) = CSV_COLUMNS.iter().position(|c| *c == name) {
            index[k] = pos;
        } else if !name.starts_with("prep_") {
            return Err(DataError::UnknownColumn {
                column: name.to_string(),
                known: CSV_COLUMNS.join(","),
            });
        }
    }
    if let Some(k) = index.iter().position(|&i| i == usize::MAX) {
        return Err(DataError::MissingColumn(CSV_COLUMNS[k].to_string()));
    }

    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| DataError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let cell = |c: usize| rec.get(index[c]).unwrap_or("");
        let ttu = parse_opt_nonneg(cell(1), "ttu_raw_min", row)?;
        let voided = parse_bool(cell(2), "voided", row)?;
        if ttu.is_some() && !voided {
            return Err(DataError::MalformedRow {
                row,
                message: "ttu_raw_min present but voided = 0".into(),
            });
        }
        let sex = match cell(4).trim() {
            "" => None,
            "F" => Some(Sex::Female),
            "M" => Some(Sex::Male),
            other => {
                return Err(DataError::MalformedRow {
                    row,
                    message: format!("sex: expected F, M or empty, got {other:?}"),
                })
            }
        };
        out.push(PatientRecord {
            id: cell(0).to_string(),
            ttu_raw_min: ttu,
            voided,
            age_years: parse_opt_nonneg(cell(3), "age_years", row)?,
            sex,
            admitted: parse_bool(cell(5), "admitted", row)?,
            catheter_at_presentation: parse_bool(cell(6), "catheter", row)?,
            cpa_on_arrival: parse_bool(cell(7), "cpa", row)?,
        });
    }
    Ok(out)
}

/// Reads a CSV file of encounter records.
pub fn read_dataset(path: &Path) -> Result<Vec<PatientRecord>, DataError> {
    read_records(File::open(path)?)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bool_cell(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn record_cells(r: &PatientRecord) -> Vec<String> {
    vec![
        r.id.clone(),
        opt_cell(r.ttu_raw_min),
        bool_cell(r.voided).into(),
        opt_cell(r.age_years),
        r.sex.map(|s| s.code().to_string()).unwrap_or_default(),
        bool_cell(r.admitted).into(),
        bool_cell(r.catheter_at_presentation).into(),
        bool_cell(r.cpa_on_arrival).into(),
    ]
}

/// Writes records in the input schema. Floats use the shortest decimal that
/// round-trips, so re-reading reproduces the values exactly.
pub fn write_records<W: Write>(writer: W, records: &[PatientRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record(record_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes records plus the derived `prep_` columns of their prepared form.
pub fn write_prepared<W: Write>(
    writer: W,
    records: &[PatientRecord],
    prepared: &PreparedDataset,
) -> Result<(), DataError> {
    assert_eq!(records.len(), prepared.n, "records and prepared rows differ");
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.extend([
        "prep_t_min",
        "prep_censored",
        "prep_age_std",
        "prep_age_missing",
        "prep_sex01",
        "prep_sex_missing",
    ]);
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut cells = record_cells(r);
        cells.extend([
            prepared.t_min[i].to_string(),
            bool_cell(prepared.censored[i]).into(),
            prepared.age_std[i].to_string(),
            bool_cell(prepared.age_missing[i]).into(),
            prepared.sex01[i].to_string(),
            bool_cell(prepared.sex_missing[i]).into(),
        ]);
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, records: &[PatientRecord]) -> Result<(), DataError> {
    write_records(File::create(path)?, records)
}
