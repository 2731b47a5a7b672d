//! Sample storage and CSV ingestion.
//!
//! A [`Dataset`] holds the binary outcome, the binary mediator, an optional
//! stratum label and any number of named covariates. Everything is validated
//! on construction and immutable afterwards.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty input: no data rows")]
    Empty,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: expected 0 or 1, found `{value}`")]
    NonBinary {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("stratum labels must be the contiguous set 1..N_b, got {0:?}")]
    NonContiguousStrata(Vec<usize>),
    #[error("row {row}: stratum label `{value}` is not a positive integer")]
    BadStratum { row: usize, value: String },
    #[error("column `{column}` has length {found}, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("categorical column `{column}` has code {code} but only {levels} levels")]
    BadCode {
        column: String,
        code: usize,
        levels: usize,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Declares which CSV columns play the outcome, mediator and stratum roles.
/// Columns listed in `categorical` are always read as factors; other columns
/// are numeric when every cell parses as a number and categorical otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub mediator: String,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    /// `levels` are sorted (numerically when every level parses as a number);
    /// the first level is the reference category.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a factor from raw labels, sorting the level set.
    pub fn categorical_from_labels<S: AsRef<str>>(labels: &[S]) -> Column {
        let mut levels: Vec<String> = labels
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        sort_levels(&mut levels);
        let codes = labels
            .iter()
            .map(|s| levels.iter().position(|l| l == s.as_ref()).unwrap())
            .collect();
        Column::Categorical { levels, codes }
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            Column::Categorical { levels, .. } => Some(levels),
            Column::Numeric(_) => None,
        }
    }
}

/// Orders factor levels: numerically if all labels are numbers, else
/// lexicographically.
pub fn sort_levels(levels: &mut [String]) {
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if numeric.is_some() {
        levels.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        });
    } else {
        levels.sort();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome_name: String,
    mediator_name: String,
    stratum_name: Option<String>,
    y: Vec<u8>,
    m: Vec<u8>,
    /// 1-based stratum labels.
    stratum: Vec<usize>,
    n_strata: usize,
    covariates: Vec<(String, Column)>,
}

impl Dataset {
    /// `stratum` may be `None` for an unstratified design (every unit in
    /// stratum 1).
    pub fn new(
        schema: &Schema,
        y: Vec<u8>,
        m: Vec<u8>,
        stratum: Option<Vec<usize>>,
        covariates: Vec<(String, Column)>,
    ) -> Result<Self, DataError> {
        let n = y.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        for (name, v) in [(&schema.outcome, &y), (&schema.mediator, &m)] {
            if v.len() != n {
                return Err(DataError::LengthMismatch {
                    column: name.clone(),
                    expected: n,
                    found: v.len(),
                });
            }
            if let Some(i) = v.iter().position(|&x| x > 1) {
                return Err(DataError::NonBinary {
                    row: i + 1,
                    column: name.clone(),
                    value: v[i].to_string(),
                });
            }
        }
        let stratum = match (&schema.stratum, stratum) {
            (Some(name), Some(s)) => {
                if s.len() != n {
                    return Err(DataError::LengthMismatch {
                        column: name.clone(),
                        expected: n,
                        found: s.len(),
                    });
                }
                s
            }
            (Some(name), None) => return Err(DataError::MissingColumn(name.clone())),
            (None, _) => vec![1; n],
        };
        let n_strata = check_strata(&stratum)?;

        let mut seen = HashSet::new();
        for reserved in [Some(&schema.outcome), Some(&schema.mediator), schema.stratum.as_ref()]
            .into_iter()
            .flatten()
        {
            seen.insert(reserved.clone());
        }
        for (name, col) in &covariates {
            if !seen.insert(name.clone()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
            if col.len() != n {
                return Err(DataError::LengthMismatch {
                    column: name.clone(),
                    expected: n,
                    found: col.len(),
                });
            }
            match col {
                Column::Numeric(v) => {
                    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                        return Err(DataError::MissingValue {
                            row: i + 1,
                            column: name.clone(),
                        });
                    }
                }
                Column::Categorical { levels, codes } => {
                    if let Some(&c) = codes.iter().find(|&&c| c >= levels.len()) {
                        return Err(DataError::BadCode {
                            column: name.clone(),
                            code: c,
                            levels: levels.len(),
                        });
                    }
                }
            }
        }

        Ok(Dataset {
            outcome_name: schema.outcome.clone(),
            mediator_name: schema.mediator.clone(),
            stratum_name: schema.stratum.clone(),
            y,
            m,
            stratum,
            n_strata,
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn m(&self) -> &[u8] {
        &self.m
    }

    pub fn stratum(&self) -> &[usize] {
        &self.stratum
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn mediator_name(&self) -> &str {
        &self.mediator_name
    }

    pub fn stratum_name(&self) -> Option<&str> {
        self.stratum_name.as_deref()
    }

    pub fn covariates(&self) -> &[(String, Column)] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Column> {
        self.covariates.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            outcome: self.outcome_name.clone(),
            mediator: self.mediator_name.clone(),
            stratum: self.stratum_name.clone(),
            categorical: self
                .covariates
                .iter()
                .filter(|(_, c)| matches!(c, Column::Categorical { .. }))
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }

    /// Case and control counts per stratum (index b-1).
    pub fn case_control_counts(&self) -> (Vec<usize>, Vec<usize>) {
        let mut cases = vec![0; self.n_strata];
        let mut controls = vec![0; self.n_strata];
        for (&y, &b) in self.y.iter().zip(&self.stratum) {
            if y == 1 {
                cases[b - 1] += 1;
            } else {
                controls[b - 1] += 1;
            }
        }
        (cases, controls)
    }

    /// Writes the dataset as CSV: outcome, mediator, stratum (if any), then
    /// covariates in stored order. Numbers use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.outcome_name.clone(), self.mediator_name.clone()];
        if let Some(s) = &self.stratum_name {
            header.push(s.clone());
        }
        header.extend(self.covariates.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string(), self.m[i].to_string()];
            if self.stratum_name.is_some() {
                rec.push(self.stratum[i].to_string());
            }
            for (_, col) in &self.covariates {
                rec.push(match col {
                    Column::Numeric(v) => format!("{}", v[i]),
                    Column::Categorical { levels, codes } => levels[codes[i]].clone(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_strata(labels: &[usize]) -> Result<usize, DataError> {
    let mut distinct: Vec<usize> = labels.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    distinct.sort_unstable();
    let n_b = distinct.len();
    if distinct.first() != Some(&1) || distinct.last() != Some(&n_b) {
        return Err(DataError::NonContiguousStrata(distinct));
    }
    Ok(n_b)
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<u8, DataError> {
    match raw.trim() {
        "" => Err(DataError::MissingValue {
            row,
            column: column.to_string(),
        }),
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(DataError::NonBinary {
            row,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

/// Reads a dataset from any CSV source. Rows are numbered from 1 (the first
/// data row after the header) in error messages.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index_of = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let y_idx = index_of(&schema.outcome)?;
    let m_idx = index_of(&schema.mediator)?;
    let s_idx = schema.stratum.as_deref().map(index_of).transpose()?;
    for c in &schema.categorical {
        index_of(c)?;
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate().take(headers.len()) {
            raw[j].push(cell.trim().to_string());
        }
        for col in raw.iter_mut().skip(rec.len()) {
            col.push(String::new());
        }
    }
    let n = raw.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(DataError::Empty);
    }

    let y = raw[y_idx]
        .iter()
        .enumerate()
        .map(|(i, v)| parse_binary(v, i + 1, &schema.outcome))
        .collect::<Result<Vec<_>, _>>()?;
    let m = raw[m_idx]
        .iter()
        .enumerate()
        .map(|(i, v)| parse_binary(v, i + 1, &schema.mediator))
        .collect::<Result<Vec<_>, _>>()?;
    let stratum = match s_idx {
        Some(j) => Some(
            raw[j]
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if v.is_empty() {
                        return Err(DataError::MissingValue {
                            row: i + 1,
                            column: headers[j].clone(),
                        });
                    }
                    v.parse::<usize>()
                        .ok()
                        .filter(|&b| b >= 1)
                        .ok_or_else(|| DataError::BadStratum {
                            row: i + 1,
                            value: v.clone(),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };

    let mut covariates = Vec::new();
    for (j, name) in headers.iter().enumerate() {
        if j == y_idx || j == m_idx || Some(j) == s_idx {
            continue;
        }
        let cells = &raw[j];
        if let Some(i) = cells.iter().position(String::is_empty) {
            return Err(DataError::MissingValue {
                row: i + 1,
                column: name.clone(),
            });
        }
        let column = if schema.categorical.iter().any(|c| c == name) {
            Column::categorical_from_labels(cells)
        } else {
            match cells.iter().map(|c| c.parse::<f64>()).collect::<Result<Vec<_>, _>>() {
                Ok(v) => Column::Numeric(v),
                Err(_) => Column::categorical_from_labels(cells),
            }
        };
        covariates.push((name.clone(), column));
    }

    Dataset::new(schema, y, m, stratum, covariates)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema)
}
