//! Typed tabular data: schemas with attribute roles, CSV ingestion and
//! batch partitioning.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("header mismatch: expected [{expected}], found [{found}]")]
    HeaderMismatch { expected: String, found: String },
    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeRole {
    #[serde(rename = "direct")]
    DirectIdentifier,
    #[serde(rename = "quasi")]
    QuasiIdentifier,
    #[serde(rename = "sensitive")]
    Sensitive,
    #[serde(rename = "insensitive")]
    Insensitive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: AttributeRole,
    pub kind: ColumnKind,
    #[serde(default, rename = "user_id")]
    pub user_id: bool,
}

impl Column {
    pub fn new(name: impl Into<String>, role: AttributeRole, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            role,
            kind,
            user_id: false,
        }
    }

    pub fn user_id(mut self) -> Self {
        self.user_id = true;
        self
    }
}

/// Ordered column list. Names are unique and non-empty, and at most one
/// column carries the user-id flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttributeSchema {
    columns: Vec<Column>,
}

impl<'de> Deserialize<'de> for AttributeSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            columns: Vec<Column>,
        }
        let raw = Raw::deserialize(deserializer)?;
        AttributeSchema::new(raw.columns).map_err(serde::de::Error::custom)
    }
}

impl AttributeSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self, TabularError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(TabularError::InvalidSchema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TabularError::InvalidSchema(format!(
                    "duplicate column `{}`",
                    c.name
                )));
            }
        }
        if columns.iter().filter(|c| c.user_id).count() > 1 {
            return Err(TabularError::InvalidSchema(
                "more than one user_id column".into(),
            ));
        }
        Ok(Self { columns })
    }

    pub fn from_json(text: &str) -> Result<Self, TabularError> {
        serde_json::from_str(text).map_err(|e| TabularError::InvalidSchema(e.to_string()))
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, TabularError> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| TabularError::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&Column, TabularError> {
        self.index_of(name).map(|i| &self.columns[i])
    }

    pub fn user_id_column(&self) -> Option<&Column> {
        self.columns.iter().find(|c| c.user_id)
    }

    pub fn quasi_identifiers(&self) -> impl Iterator<Item = &Column> {
        self.columns
            .iter()
            .filter(|c| c.role == AttributeRole::QuasiIdentifier)
    }

    pub(crate) fn set_kind(&mut self, index: usize, kind: ColumnKind) {
        self.columns[index].kind = kind;
    }
}

/// A single cell. Numeric cells are always finite.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Number(f64),
}

impl Cell {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(x) => Some(*x),
            Cell::Text(_) => None,
        }
    }

    /// Total order: numbers numerically, text lexicographically, numbers
    /// before text.
    pub fn total_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Number(a), Cell::Number(b)) => a.total_cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Number(_), Cell::Text(_)) => Ordering::Less,
            (Cell::Text(_), Cell::Number(_)) => Ordering::Greater,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Text(s) => f.write_str(s),
            Cell::Number(x) => write!(f, "{x}"),
        }
    }
}

pub type Row = Vec<Cell>;

/// Immutable table of rows conforming to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: AttributeSchema,
    rows: Vec<Row>,
}

impl Dataset {
    /// Builds a dataset, checking arity and cell kinds against the schema.
    pub fn new(schema: AttributeSchema, rows: Vec<Row>) -> Result<Self, TabularError> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(TabularError::ParseError {
                    row: i + 1,
                    message: format!("expected {} cells, found {}", schema.len(), row.len()),
                });
            }
            for (cell, col) in row.iter().zip(schema.columns()) {
                match (cell, col.kind) {
                    (Cell::Number(x), ColumnKind::Numeric) if x.is_finite() => {}
                    (Cell::Text(_), ColumnKind::Categorical) => {}
                    _ => {
                        return Err(TabularError::ParseError {
                            row: i + 1,
                            message: format!("cell `{cell}` does not match column `{}`", col.name),
                        })
                    }
                }
            }
        }
        Ok(Self { schema, rows })
    }

    pub(crate) fn from_parts_unchecked(schema: AttributeSchema, rows: Vec<Row>) -> Self {
        Self { schema, rows }
    }

    pub fn empty(schema: AttributeSchema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn into_parts(self) -> (AttributeSchema, Vec<Row>) {
        (self.schema, self.rows)
    }

    /// Serializes as RFC 4180 CSV with a header row and `\n` line endings.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        // Writing into a Vec cannot fail.
        writer
            .write_record(self.schema.columns().iter().map(|c| c.name.as_str()))
            .expect("in-memory csv write");
        for row in &self.rows {
            writer
                .write_record(row.iter().map(|c| c.to_string()))
                .expect("in-memory csv write");
        }
        writer.into_inner().expect("in-memory csv flush")
    }
}

/// Parses CSV text against an explicit schema. Row numbers in errors are
/// 1-based and exclude the header.
pub fn load_dataset<R: Read>(source: R, schema: AttributeSchema) -> Result<Dataset, TabularError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);

    let header = reader
        .headers()
        .map_err(|e| TabularError::Csv(e.to_string()))?
        .clone();
    let names: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    if header.iter().ne(names.iter().copied()) {
        return Err(TabularError::HeaderMismatch {
            expected: names.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| TabularError::ParseError {
            row: row_no,
            message: e.to_string(),
        })?;
        if record.len() != schema.len() {
            return Err(TabularError::ParseError {
                row: row_no,
                message: format!("expected {} cells, found {}", schema.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(schema.len());
        for (field, col) in record.iter().zip(schema.columns()) {
            row.push(match col.kind {
                ColumnKind::Categorical => Cell::Text(field.to_string()),
                ColumnKind::Numeric => {
                    let x: f64 = field.trim().parse().map_err(|_| TabularError::ParseError {
                        row: row_no,
                        message: format!("column `{}`: `{field}` is not a number", col.name),
                    })?;
                    if !x.is_finite() {
                        return Err(TabularError::ParseError {
                            row: row_no,
                            message: format!("column `{}`: `{field}` is not finite", col.name),
                        });
                    }
                    Cell::Number(x)
                }
            });
        }
        rows.push(row);
    }
    Ok(Dataset { schema, rows })
}

/// A contiguous slice of a dataset's rows.
#[derive(Debug, Clone, Copy)]
pub struct DatasetBatch<'a> {
    pub index: usize,
    pub rows: &'a [Row],
    pub schema: &'a AttributeSchema,
}

pub fn partition_batches(dataset: &Dataset, batch_size: NonZeroUsize) -> Vec<DatasetBatch<'_>> {
    dataset
        .rows
        .chunks(batch_size.get())
        .enumerate()
        .map(|(index, rows)| DatasetBatch {
            index,
            rows,
            schema: &dataset.schema,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn name_age() -> AttributeSchema {
        AttributeSchema::new(vec![
            Column::new("name", AttributeRole::DirectIdentifier, ColumnKind::Categorical),
            Column::new("age", AttributeRole::QuasiIdentifier, ColumnKind::Numeric),
        ])
        .unwrap()
    }

    #[test]
    fn loads_rows() {
        let ds = load_dataset("name,age\nalice,30\nbob,41\n".as_bytes(), name_age()).unwrap();
        assert_eq!(ds.row_count(), 2);
        assert_eq!(ds.rows()[1][1], Cell::Number(41.0));
    }

    #[test]
    fn header_only_is_empty() {
        let ds = load_dataset("name,age\n".as_bytes(), name_age()).unwrap();
        assert_eq!(ds.row_count(), 0);
    }

    #[test]
    fn crlf_and_quotes() {
        let ds = load_dataset(
            "name,age\r\n\"smith, j\",3\r\n\"\"\"q\"\"\",4\r\n".as_bytes(),
            name_age(),
        )
        .unwrap();
        assert_eq!(ds.rows()[0][0], Cell::Text("smith, j".into()));
        assert_eq!(ds.rows()[1][0], Cell::Text("\"q\"".into()));
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let err = load_dataset("name,age\nalice,abc\n".as_bytes(), name_age()).unwrap_err();
        assert!(matches!(err, TabularError::ParseError { row: 1, .. }));
    }

    #[test]
    fn empty_numeric_is_error_but_empty_text_is_fine() {
        let err = load_dataset("name,age\nalice,\n".as_bytes(), name_age()).unwrap_err();
        assert!(matches!(err, TabularError::ParseError { row: 1, .. }));
        let ds = load_dataset("name,age\n,5\n".as_bytes(), name_age()).unwrap();
        assert_eq!(ds.rows()[0][0], Cell::Text(String::new()));
    }

    #[test]
    fn wrong_arity() {
        let err = load_dataset("name,age\nalice,1\nbob\n".as_bytes(), name_age()).unwrap_err();
        assert!(matches!(err, TabularError::ParseError { row: 2, .. }));
    }

    #[test]
    fn header_mismatch() {
        let err = load_dataset("age,name\n1,a\n".as_bytes(), name_age()).unwrap_err();
        assert!(matches!(err, TabularError::HeaderMismatch { .. }));
    }

    #[test]
    fn schema_invariants() {
        let dup = AttributeSchema::new(vec![
            Column::new("a", AttributeRole::Sensitive, ColumnKind::Numeric),
            Column::new("a", AttributeRole::Sensitive, ColumnKind::Numeric),
        ]);
        assert!(dup.is_err());
        let two_users = AttributeSchema::new(vec![
            Column::new("a", AttributeRole::Insensitive, ColumnKind::Categorical).user_id(),
            Column::new("b", AttributeRole::Insensitive, ColumnKind::Categorical).user_id(),
        ]);
        assert!(two_users.is_err());
        assert!(AttributeSchema::new(vec![Column::new(
            "",
            AttributeRole::Sensitive,
            ColumnKind::Numeric
        )])
        .is_err());
    }

    #[test]
    fn schema_json() {
        let s = AttributeSchema::from_json(
            r#"{"columns":[{"name":"uid","role":"direct","kind":"categorical","user_id":true},
                           {"name":"age","role":"quasi","kind":"numeric"}]}"#,
        )
        .unwrap();
        assert_eq!(s.user_id_column().unwrap().name, "uid");
        assert_eq!(s.column("age").unwrap().role, AttributeRole::QuasiIdentifier);
        assert!(AttributeSchema::from_json(
            r#"{"columns":[{"name":"a","role":"quasi","kind":"numeric"},{"name":"a","role":"quasi","kind":"numeric"}]}"#
        )
        .is_err());
    }

    #[test]
    fn batch_sizes() {
        let rows = (0..10)
            .map(|i| vec![Cell::Text(format!("p{i}")), Cell::Number(i as f64)])
            .collect();
        let ds = Dataset::new(name_age(), rows).unwrap();
        let sizes = |n: usize| {
            partition_batches(&ds, NonZeroUsize::new(n).unwrap())
                .iter()
                .map(|b| b.rows.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(3), vec![3, 3, 3, 1]);
        assert_eq!(sizes(10), vec![10]);
        let empty = Dataset::empty(name_age());
        assert!(partition_batches(&empty, NonZeroUsize::new(4).unwrap()).is_empty());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(("[a-z ,\"]{0,6}", -1.0e6f64..1.0e6), 0..40).prop_map(|v| {
            let rows = v
                .into_iter()
                .map(|(s, x)| vec![Cell::Text(s), Cell::Number(x)])
                .collect();
            Dataset::new(name_age(), rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(ds in arb_dataset()) {
            let back = load_dataset(ds.to_csv().as_slice(), name_age()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn batches_concatenate_to_input(ds in arb_dataset(), size in 1usize..50) {
            let batches = partition_batches(&ds, NonZeroUsize::new(size).unwrap());
            prop_assert_eq!(batches.len(), ds.row_count().div_ceil(size));
            let joined: Vec<Row> = batches.iter().flat_map(|b| b.rows.iter().cloned()).collect();
            prop_assert_eq!(joined.as_slice(), ds.rows());
            for (i, b) in batches.iter().enumerate() {
                prop_assert_eq!(b.index, i);
            }
        }
    }
}
