//! Classical anonymisation: suppression, SHA-256 pseudonyms, hierarchy
//! generalisation and exact (non-private) aggregation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tabular::{
    AttributeRole, AttributeSchema, Cell, Column, ColumnKind, Dataset, TabularError,
};

pub const SUPPRESSION_TOKEN: &str = "*";

#[derive(Debug, Error, PartialEq)]
pub enum ClassicalError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("value `{value}` at row {row} is missing from the hierarchy of `{column}`")]
    UnknownValue {
        column: String,
        value: String,
        row: usize,
    },
    #[error("level {level} out of range 0..={height}")]
    LevelOutOfRange { level: usize, height: usize },
    #[error("invalid hierarchy for `{column}`: {reason}")]
    InvalidHierarchy { column: String, reason: String },
    #[error("measure column `{0}` is not numeric")]
    NonNumericMeasure(String),
}

impl From<TabularError> for ClassicalError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::UnknownColumn(c) => ClassicalError::UnknownColumn(c),
            other => ClassicalError::InvalidHierarchy {
                column: String::new(),
                reason: other.to_string(),
            },
        }
    }
}

/// Replaces every cell of the named columns with [`SUPPRESSION_TOKEN`].
pub fn suppress(dataset: &Dataset, columns: &[String]) -> Result<Dataset, ClassicalError> {
    let indices = resolve(dataset.schema(), columns)?;
    let mut schema = dataset.schema().clone();
    for &i in &indices {
        schema.set_kind(i, ColumnKind::Categorical);
    }
    let rows = dataset
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            for &i in &indices {
                row[i] = Cell::Text(SUPPRESSION_TOKEN.to_string());
            }
            row
        })
        .collect();
    Ok(Dataset::from_parts_unchecked(schema, rows))
}

/// Lowercase hex SHA-256 of `salt || value`.
pub fn pseudonym(value: &str, salt: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(value.as_bytes());
    hex::encode(hasher.finalize())
}

pub fn pseudonymize(
    dataset: &Dataset,
    columns: &[String],
    salt: Option<&[u8]>,
) -> Result<Dataset, ClassicalError> {
    let indices = resolve(dataset.schema(), columns)?;
    let salt = salt.unwrap_or_default();
    let mut schema = dataset.schema().clone();
    for &i in &indices {
        schema.set_kind(i, ColumnKind::Categorical);
    }
    let rows = dataset
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            for &i in &indices {
                row[i] = Cell::Text(pseudonym(&row[i].to_string(), salt));
            }
            row
        })
        .collect();
    Ok(Dataset::from_parts_unchecked(schema, rows))
}

/// Value generalisation ladder for one column. Level 0 is the original
/// value; level `height` maps every value to a single root.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationHierarchy {
    column: String,
    height: usize,
    levels: HashMap<String, Vec<String>>,
}

impl GeneralizationHierarchy {
    pub fn new(
        column: impl Into<String>,
        levels: HashMap<String, Vec<String>>,
    ) -> Result<Self, ClassicalError> {
        let column = column.into();
        let invalid = |reason: String| ClassicalError::InvalidHierarchy {
            column: column.clone(),
            reason,
        };
        let height = match levels.values().next() {
            Some(v) => v.len(),
            None => return Err(invalid("no values".into())),
        };
        if height == 0 {
            return Err(invalid("height must be at least 1".into()));
        }
        for (value, ladder) in &levels {
            if ladder.len() != height {
                return Err(invalid(format!(
                    "`{value}` has {} generalizations, expected {height}",
                    ladder.len()
                )));
            }
        }
        let mut roots = levels.values().map(|l| &l[height - 1]);
        let root = roots.next().expect("non-empty");
        if roots.any(|r| r != root) {
            return Err(invalid(format!("level {height} is not a single root")));
        }
        // Equal values at level i must agree at level i+1.
        for level in 0..height - 1 {
            let mut parent: HashMap<&str, &str> = HashMap::new();
            for ladder in levels.values() {
                let (child, up) = (ladder[level].as_str(), ladder[level + 1].as_str());
                if let Some(prev) = parent.insert(child, up) {
                    if prev != up {
                        return Err(invalid(format!(
                            "`{child}` at level {} generalizes to both `{prev}` and `{up}`",
                            level + 1
                        )));
                    }
                }
            }
        }
        Ok(Self {
            column,
            height,
            levels,
        })
    }

    /// Headerless CSV: column 0 is the original value, column i its level-i
    /// generalization.
    pub fn from_csv<R: Read>(column: impl Into<String>, source: R) -> Result<Self, ClassicalError> {
        let column = column.into();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(source);
        let mut levels = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| ClassicalError::InvalidHierarchy {
                column: column.clone(),
                reason: e.to_string(),
            })?;
            let mut fields = record.iter().map(str::to_string);
            let Some(value) = fields.next() else { continue };
            if levels.insert(value.clone(), fields.collect()).is_some() {
                return Err(ClassicalError::InvalidHierarchy {
                    column,
                    reason: format!("duplicate value `{value}`"),
                });
            }
        }
        Self::new(column, levels)
    }

    pub fn column(&self) -> &str {
        &self.column
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Level-`level` generalization of `value`, or `None` when the value is
    /// not covered or the level is out of range.
    pub fn generalize(&self, value: &str, level: usize) -> Option<&str> {
        let ladder = self.levels.get(value)?;
        match level {
            0 => Some(self.levels.get_key_value(value)?.0.as_str()),
            l if l <= self.height => Some(ladder[l - 1].as_str()),
            _ => None,
        }
    }

    pub fn contains(&self, value: &str) -> bool {
        self.levels.contains_key(value)
    }
}

pub fn generalize(
    dataset: &Dataset,
    column: &str,
    hierarchy: &GeneralizationHierarchy,
    level: usize,
) -> Result<Dataset, ClassicalError> {
    if level > hierarchy.height() {
        return Err(ClassicalError::LevelOutOfRange {
            level,
            height: hierarchy.height(),
        });
    }
    let idx = dataset.schema().index_of(column)?;
    let mut rows = Vec::with_capacity(dataset.row_count());
    for (r, row) in dataset.rows().iter().enumerate() {
        let value = row[idx].to_string();
        let g = hierarchy
            .generalize(&value, level)
            .ok_or_else(|| ClassicalError::UnknownValue {
                column: column.to_string(),
                value: value.clone(),
                row: r + 1,
            })?;
        let mut row = row.clone();
        if level > 0 {
            row[idx] = Cell::Text(g.to_string());
        }
        rows.push(row);
    }
    let mut schema = dataset.schema().clone();
    if level > 0 {
        schema.set_kind(idx, ColumnKind::Categorical);
    }
    Ok(Dataset::from_parts_unchecked(schema, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Count,
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    #[serde(default)]
    pub column: Option<String>,
    pub statistic: Statistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub group_by: Vec<String>,
    pub measures: Vec<Measure>,
}

/// Exact grouped statistics, one output row per distinct group key, sorted
/// by key. Output measure columns are named `<statistic>` or
/// `<statistic>_<column>`.
pub fn aggregate(dataset: &Dataset, spec: &AggregateSpec) -> Result<Dataset, ClassicalError> {
    let schema = dataset.schema();
    let group_idx = resolve(schema, &spec.group_by)?;
    let mut measure_idx = Vec::with_capacity(spec.measures.len());
    for m in &spec.measures {
        match (&m.column, m.statistic) {
            (None, Statistic::Count) => measure_idx.push(None),
            (None, _) => return Err(ClassicalError::UnknownColumn(String::new())),
            (Some(c), stat) => {
                let i = schema.index_of(c)?;
                if stat != Statistic::Count && schema.columns()[i].kind != ColumnKind::Numeric {
                    return Err(ClassicalError::NonNumericMeasure(c.clone()));
                }
                measure_idx.push(Some(i));
            }
        }
    }

    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (r, row) in dataset.rows().iter().enumerate() {
        let key = GroupKey(group_idx.iter().map(|&i| row[i].clone()).collect());
        groups.entry(key).or_default().push(r);
    }

    let mut columns: Vec<Column> = group_idx
        .iter()
        .map(|&i| schema.columns()[i].clone())
        .map(|mut c| {
            c.user_id = false;
            c
        })
        .collect();
    for m in &spec.measures {
        let name = match &m.column {
            Some(c) => format!("{}_{c}", stat_name(m.statistic)),
            None => stat_name(m.statistic).to_string(),
        };
        columns.push(Column::new(name, AttributeRole::Insensitive, ColumnKind::Numeric));
    }
    let out_schema = AttributeSchema::new(columns)?;

    let rows = groups
        .into_iter()
        .map(|(key, members)| {
            let mut row = key.0;
            for (m, idx) in spec.measures.iter().zip(&measure_idx) {
                let values = || {
                    members
                        .iter()
                        .map(|&r| dataset.rows()[r][idx.unwrap()].as_number().unwrap_or(0.0))
                };
                let n = members.len() as f64;
                let v = match m.statistic {
                    Statistic::Count => n,
                    Statistic::Sum => values().sum(),
                    Statistic::Mean => values().sum::<f64>() / n,
                    Statistic::Min => values().fold(f64::INFINITY, f64::min),
                    Statistic::Max => values().fold(f64::NEG_INFINITY, f64::max),
                };
                row.push(Cell::Number(v));
            }
            row
        })
        .collect();
    Ok(Dataset::from_parts_unchecked(out_schema, rows))
}

fn stat_name(s: Statistic) -> &'static str {
    match s {
        Statistic::Count => "count",
        Statistic::Sum => "sum",
        Statistic::Mean => "mean",
        Statistic::Min => "min",
        Statistic::Max => "max",
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GroupKey(Vec<Cell>);

impl Eq for GroupKey {}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

fn resolve(schema: &AttributeSchema, columns: &[String]) -> Result<Vec<usize>, ClassicalError> {
    columns
        .iter()
        .map(|c| schema.index_of(c).map_err(ClassicalError::from))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tabular::load_dataset;
    use std::collections::HashSet;

    pub(crate) fn age_hierarchy() -> GeneralizationHierarchy {
        let csv = "21,20-29,<40,*\n23,20-29,<40,*\n35,30-39,<40,*\n47,40-49,>=40,*\n";
        GeneralizationHierarchy::from_csv("age", csv.as_bytes()).unwrap()
    }

    fn people() -> Dataset {
        let schema = AttributeSchema::new(vec![
            Column::new("name", AttributeRole::DirectIdentifier, ColumnKind::Categorical),
            Column::new("age", AttributeRole::QuasiIdentifier, ColumnKind::Numeric),
            Column::new("city", AttributeRole::QuasiIdentifier, ColumnKind::Categorical),
            Column::new("spend", AttributeRole::Sensitive, ColumnKind::Numeric),
        ])
        .unwrap();
        load_dataset(
            "name,age,city,spend\nalice,21,A,1\nbob,23,A,3\ncarol,35,B,5\n".as_bytes(),
            schema,
        )
        .unwrap()
    }

    fn col(ds: &Dataset, name: &str) -> Vec<String> {
        let i = ds.schema().index_of(name).unwrap();
        ds.rows().iter().map(|r| r[i].to_string()).collect()
    }

    #[test]
    fn suppress_replaces_cells() {
        let out = suppress(&people(), &["name".into()]).unwrap();
        assert_eq!(col(&out, "name"), ["*", "*", "*"]);
        assert_eq!(col(&out, "city"), ["A", "A", "B"]);
        let out = suppress(&people(), &["age".into()]).unwrap();
        assert_eq!(out.schema().column("age").unwrap().kind, ColumnKind::Categorical);
    }

    #[test]
    fn suppress_nothing_is_identity() {
        assert_eq!(suppress(&people(), &[]).unwrap(), people());
    }

    #[test]
    fn suppress_unknown_column() {
        assert_eq!(
            suppress(&people(), &["ssn".into()]).unwrap_err(),
            ClassicalError::UnknownColumn("ssn".into())
        );
    }

    #[test]
    fn suppress_idempotent() {
        let once = suppress(&people(), &["city".into()]).unwrap();
        let twice = suppress(&once, &["city".into()]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn sha256_reference_vectors() {
        assert_eq!(
            pseudonym("", b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            pseudonym("abc", b""),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        // salt is a plain prefix
        assert_eq!(pseudonym("c", b"ab"), pseudonym("abc", b""));
    }

    #[test]
    fn pseudonyms_are_deterministic() {
        let ds = people();
        let ds = Dataset::new(
            ds.schema().clone(),
            vec![ds.rows()[0].clone(), ds.rows()[0].clone()],
        )
        .unwrap();
        let out = pseudonymize(&ds, &["name".into()], None).unwrap();
        let names = col(&out, "name");
        assert_eq!(names[0], names[1]);
        assert_eq!(names[0].len(), 64);
        let salted = pseudonymize(&ds, &["name".into()], Some(b"pepper")).unwrap();
        assert_ne!(col(&salted, "name")[0], names[0]);
    }

    #[test]
    fn pseudonyms_do_not_collide() {
        let mut seen = HashSet::new();
        for i in 0..100_000u32 {
            assert!(seen.insert(pseudonym(&i.to_string(), b"")));
        }
    }

    #[test]
    fn generalize_levels() {
        let h = age_hierarchy();
        let ds = people();
        let l1 = generalize(&ds, "age", &h, 1).unwrap();
        assert_eq!(col(&l1, "age"), ["20-29", "20-29", "30-39"]);
        assert_eq!(generalize(&ds, "age", &h, 0).unwrap(), ds);
        let top = generalize(&ds, "age", &h, 3).unwrap();
        assert_eq!(col(&top, "age"), ["*", "*", "*"]);
        assert_eq!(
            generalize(&ds, "age", &h, 4).unwrap_err(),
            ClassicalError::LevelOutOfRange { level: 4, height: 3 }
        );
    }

    #[test]
    fn generalize_unknown_value() {
        let h = GeneralizationHierarchy::from_csv("age", "21,*\n23,*\n".as_bytes()).unwrap();
        let err = generalize(&people(), "age", &h, 1).unwrap_err();
        assert_eq!(
            err,
            ClassicalError::UnknownValue {
                column: "age".into(),
                value: "35".into(),
                row: 3
            }
        );
    }

    #[test]
    fn hierarchy_validation() {
        // inconsistent parent for 20-29
        let bad = "21,20-29,young,*\n23,20-29,old,*\n";
        assert!(GeneralizationHierarchy::from_csv("age", bad.as_bytes()).is_err());
        // two roots
        assert!(GeneralizationHierarchy::from_csv("age", "1,*\n2,+\n".as_bytes()).is_err());
        // ragged
        assert!(GeneralizationHierarchy::from_csv("age", "1,a,*\n2,*\n".as_bytes()).is_err());
        // no levels
        assert!(GeneralizationHierarchy::from_csv("age", "1\n2\n".as_bytes()).is_err());
    }

    #[test]
    fn aggregate_sum_and_mean() {
        let spec = AggregateSpec {
            group_by: vec!["city".into()],
            measures: vec![
                Measure {
                    column: Some("spend".into()),
                    statistic: Statistic::Sum,
                },
                Measure {
                    column: Some("spend".into()),
                    statistic: Statistic::Mean,
                },
                Measure {
                    column: None,
                    statistic: Statistic::Count,
                },
            ],
        };
        let out = aggregate(&people(), &spec).unwrap();
        assert_eq!(col(&out, "city"), ["A", "B"]);
        assert_eq!(col(&out, "sum_spend"), ["4", "5"]);
        assert_eq!(col(&out, "mean_spend"), ["2", "5"]);
        assert_eq!(col(&out, "count"), ["2", "1"]);

        let empty = Dataset::empty(people().schema().clone());
        assert_eq!(aggregate(&empty, &spec).unwrap().row_count(), 0);
    }

    #[test]
    fn aggregate_orders_numeric_keys_numerically() {
        let schema = AttributeSchema::new(vec![Column::new(
            "x",
            AttributeRole::QuasiIdentifier,
            ColumnKind::Numeric,
        )])
        .unwrap();
        let ds = load_dataset("x\n10\n9\n10\n".as_bytes(), schema).unwrap();
        let spec = AggregateSpec {
            group_by: vec!["x".into()],
            measures: vec![Measure {
                column: None,
                statistic: Statistic::Count,
            }],
        };
        let out = aggregate(&ds, &spec).unwrap();
        assert_eq!(col(&out, "x"), ["9", "10"]);
    }

    #[test]
    fn aggregate_errors() {
        let spec = AggregateSpec {
            group_by: vec!["city".into()],
            measures: vec![Measure {
                column: Some("name".into()),
                statistic: Statistic::Sum,
            }],
        };
        assert_eq!(
            aggregate(&people(), &spec).unwrap_err(),
            ClassicalError::NonNumericMeasure("name".into())
        );
        let spec = AggregateSpec {
            group_by: vec!["zip".into()],
            measures: vec![],
        };
        assert!(matches!(
            aggregate(&people(), &spec),
            Err(ClassicalError::UnknownColumn(_))
        ));
    }
}
