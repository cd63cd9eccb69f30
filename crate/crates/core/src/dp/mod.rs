//! Differentially private query release with the Laplace mechanism.
//!
//! Neighbouring datasets differ by replacing one item (item-level) or the
//! values of all rows of one user (user-level). Queries are answered by
//! exact per-batch partial aggregation, an exact merge, and a single noise
//! draw per released component, so the output does not depend on the batch
//! size.

mod exact_sum;

use std::collections::{BTreeMap, HashMap};
use std::num::NonZeroUsize;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use exact_sum::ExactSum;

use crate::tabular::{partition_batches, Cell, ColumnKind, Dataset, DatasetBatch, TabularError};

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("sum and mean queries need finite clamp bounds lo < hi")]
    MissingClampBounds,
    #[error("user-level privacy needs a user column and a positive contribution cap")]
    MissingUserCap,
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("noisy count {0} is not positive; mean is undefined")]
    DegenerateDenominator(f64),
    #[error("partial aggregates come from different queries")]
    QueryMismatch,
}

impl From<TabularError> for DpError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::UnknownColumn(c) => DpError::UnknownColumn(c),
            other => DpError::InvalidQuery(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrivacyUnit {
    #[default]
    Item,
    User {
        user_column: String,
        cap: usize,
    },
}

impl PrivacyUnit {
    fn multiplier(&self) -> Result<f64, DpError> {
        match self {
            PrivacyUnit::Item => Ok(1.0),
            PrivacyUnit::User { user_column, cap } => {
                if user_column.is_empty() || *cap == 0 {
                    Err(DpError::MissingUserCap)
                } else {
                    Ok(*cap as f64)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Count,
    Sum,
    Mean,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    #[serde(deserialize_with = "string_or_number")]
    pub equals: String,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n
            .as_f64()
            .map(|x| Cell::Number(x).to_string())
            .unwrap_or_else(|| n.to_string())),
        other => Err(serde::de::Error::custom(format!(
            "expected string or number, got {other}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpQuery {
    pub kind: QueryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
    /// Public histogram bin domain. Without it the bins observed in the
    /// data are released, which reveals which values occur.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<String>>,
    #[serde(default)]
    pub unit: PrivacyUnit,
    pub epsilon: f64,
}

/// A query plus run parameters, as read from a query config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    #[serde(flatten)]
    pub query: DpQuery,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<NonZeroUsize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DpQuery {
    pub fn count(epsilon: f64) -> Self {
        Self {
            kind: QueryKind::Count,
            value_column: None,
            clamp: None,
            predicate: None,
            group_by: None,
            bins: None,
            unit: PrivacyUnit::Item,
            epsilon,
        }
    }

    pub fn count_where(column: &str, equals: &str, epsilon: f64) -> Self {
        Self {
            predicate: Some(Predicate {
                column: column.into(),
                equals: equals.into(),
            }),
            ..Self::count(epsilon)
        }
    }

    pub fn sum(column: &str, lo: f64, hi: f64, epsilon: f64) -> Self {
        Self {
            kind: QueryKind::Sum,
            value_column: Some(column.into()),
            clamp: Some((lo, hi)),
            ..Self::count(epsilon)
        }
    }

    pub fn mean(column: &str, lo: f64, hi: f64, epsilon: f64) -> Self {
        Self {
            kind: QueryKind::Mean,
            ..Self::sum(column, lo, hi, epsilon)
        }
    }

    pub fn histogram(column: &str, epsilon: f64) -> Self {
        Self {
            kind: QueryKind::Histogram,
            group_by: Some(column.into()),
            ..Self::count(epsilon)
        }
    }

    pub fn with_unit(mut self, unit: PrivacyUnit) -> Self {
        self.unit = unit;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_bins<I: IntoIterator<Item = S>, S: Into<String>>(mut self, bins: I) -> Self {
        self.bins = Some(bins.into_iter().map(Into::into).collect());
        self
    }

    /// Structural checks that do not need a schema.
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(DpError::InvalidEpsilon(self.epsilon));
        }
        self.unit.multiplier()?;
        match self.kind {
            QueryKind::Sum | QueryKind::Mean => {
                if self.value_column.is_none() {
                    return Err(DpError::InvalidQuery("value_column is required".into()));
                }
                self.clamp_bounds()?;
            }
            QueryKind::Histogram => {
                if self.group_by.is_none() {
                    return Err(DpError::InvalidQuery("group_by is required".into()));
                }
            }
            QueryKind::Count => {}
        }
        if self.predicate.is_some() && self.kind != QueryKind::Count {
            return Err(DpError::InvalidQuery(
                "predicates are supported on count queries only".into(),
            ));
        }
        Ok(())
    }

    fn clamp_bounds(&self) -> Result<(f64, f64), DpError> {
        match self.clamp {
            Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo < hi => Ok((lo, hi)),
            _ => Err(DpError::MissingClampBounds),
        }
    }

    fn check_schema(&self, dataset: &Dataset) -> Result<(), DpError> {
        let schema = dataset.schema();
        if let Some(c) = &self.value_column {
            if schema.column(c)?.kind != ColumnKind::Numeric {
                return Err(DpError::InvalidQuery(format!("`{c}` is not numeric")));
            }
        }
        if let Some(p) = &self.predicate {
            schema.index_of(&p.column)?;
        }
        if let Some(g) = &self.group_by {
            schema.index_of(g)?;
        }
        if let PrivacyUnit::User { user_column, .. } = &self.unit {
            if !schema.column(user_column)?.user_id {
                return Err(DpError::InvalidQuery(format!(
                    "`{user_column}` is not flagged as the user id column"
                )));
            }
        }
        Ok(())
    }

    fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.clone().with_epsilon(1.0)).expect("serializable");
        Sha256::digest(bytes).into()
    }
}

/// L1 sensitivity of a query's released vector.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sensitivity(f64);

impl Sensitivity {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Sensitivity under replacement semantics. For a mean this is the
/// sensitivity of the (sum, count) pair; the count part is zero because
/// replacement never changes the number of rows.
pub fn sensitivity(query: &DpQuery) -> Result<Sensitivity, DpError> {
    Ok(Sensitivity(
        component_sensitivities(query)?.iter().map(|s| s.0).sum(),
    ))
}

/// One sensitivity per noised component, in noise-draw order. A mean has a
/// sum and a count component.
fn component_sensitivities(query: &DpQuery) -> Result<Vec<Sensitivity>, DpError> {
    let l = query.unit.multiplier()?;
    let item = match query.kind {
        QueryKind::Count if query.predicate.is_some() => vec![1.0],
        QueryKind::Count => vec![0.0],
        QueryKind::Sum => {
            let (lo, hi) = query.clamp_bounds()?;
            vec![hi - lo]
        }
        QueryKind::Mean => {
            let (lo, hi) = query.clamp_bounds()?;
            vec![hi - lo, 0.0]
        }
        QueryKind::Histogram => vec![2.0],
    };
    Ok(item.into_iter().map(|d| Sensitivity(d * l)).collect())
}

/// Inverse-CDF Laplace sample with scale `b` (standard deviation √2·b).
pub fn laplace_sample<R: RngCore + ?Sized>(scale_b: f64, rng: &mut R) -> f64 {
    assert!(
        scale_b.is_finite() && scale_b > 0.0,
        "Laplace scale must be positive"
    );
    let u = loop {
        let x: f64 = rng.gen();
        // x == 0 would give u = -1/2 and an infinite sample.
        if x > 0.0 {
            break x - 0.5;
        }
    };
    -scale_b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clamps the value column and, under user-level privacy, keeps only the
/// first `cap` rows of each user in dataset order.
pub fn prepare(dataset: &Dataset, query: &DpQuery) -> Result<Dataset, DpError> {
    query.check_schema(dataset)?;
    let schema = dataset.schema();
    let clamp = match query.kind {
        QueryKind::Sum | QueryKind::Mean => {
            let col = query.value_column.as_deref().ok_or(DpError::MissingClampBounds)?;
            Some((schema.index_of(col)?, query.clamp_bounds()?))
        }
        _ => None,
    };
    let user = match &query.unit {
        PrivacyUnit::Item => None,
        PrivacyUnit::User { user_column, cap } => {
            if *cap == 0 {
                return Err(DpError::MissingUserCap);
            }
            Some((schema.index_of(user_column)?, *cap))
        }
    };

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::with_capacity(dataset.row_count());
    for row in dataset.rows() {
        if let Some((idx, cap)) = user {
            let n = seen.entry(row[idx].to_string()).or_insert(0);
            if *n >= cap {
                continue;
            }
            *n += 1;
        }
        let mut row = row.clone();
        if let Some((idx, (lo, hi))) = clamp {
            if let Cell::Number(x) = row[idx] {
                row[idx] = Cell::Number(x.clamp(lo, hi));
            }
        }
        rows.push(row);
    }
    Ok(Dataset::from_parts_unchecked(schema.clone(), rows))
}

/// Exact, noise-free statistics of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAggregate {
    query: [u8; 32],
    pub count: u64,
    pub sum: ExactSum,
    pub bins: BTreeMap<String, u64>,
}

impl PartialAggregate {
    pub fn zero(query: &DpQuery) -> Self {
        Self {
            query: query.digest(),
            count: 0,
            sum: ExactSum::new(),
            bins: BTreeMap::new(),
        }
    }
}

pub fn partial_aggregate(
    batch: &DatasetBatch<'_>,
    query: &DpQuery,
) -> Result<PartialAggregate, DpError> {
    let mut out = PartialAggregate::zero(query);
    match query.kind {
        QueryKind::Count => {
            let filter = match &query.predicate {
                Some(p) => Some((batch.schema.index_of(&p.column)?, p.equals.as_str())),
                None => None,
            };
            out.count = batch
                .rows
                .iter()
                .filter(|r| filter.is_none_or(|(i, v)| r[i].to_string() == v))
                .count() as u64;
        }
        QueryKind::Sum | QueryKind::Mean => {
            let col = query.value_column.as_deref().ok_or(DpError::MissingClampBounds)?;
            let idx = batch.schema.index_of(col)?;
            for r in batch.rows {
                out.sum.add(r[idx].as_number().unwrap_or(0.0));
            }
            out.count = batch.rows.len() as u64;
        }
        QueryKind::Histogram => {
            let col = query
                .group_by
                .as_deref()
                .ok_or_else(|| DpError::InvalidQuery("group_by is required".into()))?;
            let idx = batch.schema.index_of(col)?;
            for r in batch.rows {
                *out.bins.entry(r[idx].to_string()).or_insert(0) += 1;
            }
            out.count = batch.rows.len() as u64;
        }
    }
    Ok(out)
}

pub fn merge_partials<I>(query: &DpQuery, partials: I) -> Result<PartialAggregate, DpError>
where
    I: IntoIterator<Item = PartialAggregate>,
{
    let mut acc = PartialAggregate::zero(query);
    for p in partials {
        if p.query != acc.query {
            return Err(DpError::QueryMismatch);
        }
        acc.count += p.count;
        acc.sum.merge(&p.sum);
        for (bin, n) in p.bins {
            *acc.bins.entry(bin).or_insert(0) += n;
        }
    }
    Ok(acc)
}

/// Exact pre-noise component values and the released labels.
struct Exact {
    labels: Vec<String>,
    components: Vec<f64>,
}

fn exact_components(query: &DpQuery, merged: &PartialAggregate) -> Exact {
    match query.kind {
        QueryKind::Count => Exact {
            labels: vec!["count".into()],
            components: vec![merged.count as f64],
        },
        QueryKind::Sum => Exact {
            labels: vec!["sum".into()],
            components: vec![merged.sum.value()],
        },
        QueryKind::Mean => Exact {
            labels: vec!["mean".into()],
            components: vec![merged.sum.value(), merged.count as f64],
        },
        QueryKind::Histogram => {
            let labels: Vec<String> = match &query.bins {
                Some(bins) => bins.clone(),
                None => merged.bins.keys().cloned().collect(),
            };
            let components = labels
                .iter()
                .map(|b| merged.bins.get(b).copied().unwrap_or(0) as f64)
                .collect();
            Exact { labels, components }
        }
    }
}

/// Noise scale per component. A mean splits ε evenly between its sum and
/// count.
fn component_scales(query: &DpQuery, components: usize) -> Result<Vec<f64>, DpError> {
    let sens = component_sensitivities(query)?;
    let eps = match query.kind {
        QueryKind::Mean => query.epsilon / 2.0,
        _ => query.epsilon,
    };
    Ok(match query.kind {
        QueryKind::Histogram => vec![sens[0].0 / eps; components],
        _ => sens.iter().map(|s| s.0 / eps).collect(),
    })
}

fn add_noise<R: RngCore>(components: &[f64], scales: &[f64], rng: &mut R) -> Vec<f64> {
    components
        .iter()
        .zip(scales)
        .map(|(&x, &b)| if b > 0.0 { x + laplace_sample(b, rng) } else { x })
        .collect()
}

/// Maps noisy components to released values.
fn finish(kind: QueryKind, noisy: Vec<f64>) -> Result<Vec<f64>, DpError> {
    if kind == QueryKind::Mean {
        let (sum, count) = (noisy[0], noisy[1]);
        if count <= 0.0 {
            return Err(DpError::DegenerateDenominator(count));
        }
        Ok(vec![sum / count])
    } else {
        Ok(noisy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpResult {
    pub kind: QueryKind,
    pub labels: Vec<String>,
    /// Exact answer. Never serialized.
    #[serde(skip)]
    pub raw: Vec<f64>,
    pub noisy: Vec<f64>,
    pub epsilon_spent: f64,
    pub scale_b: Vec<f64>,
    pub seed: u64,
}

fn merged_aggregate(
    dataset: &Dataset,
    query: &DpQuery,
    batch_size: NonZeroUsize,
) -> Result<PartialAggregate, DpError> {
    query.validate()?;
    let prepared = prepare(dataset, query)?;
    let partials = partition_batches(&prepared, batch_size)
        .iter()
        .map(|b| partial_aggregate(b, query))
        .collect::<Result<Vec<_>, _>>()?;
    merge_partials(query, partials)
}

/// Prepare, aggregate batch by batch, merge, then add Laplace noise once per
/// component with scale Δ/ε.
pub fn run_dp_query(
    dataset: &Dataset,
    query: &DpQuery,
    seed: u64,
    batch_size: NonZeroUsize,
) -> Result<DpResult, DpError> {
    let merged = merged_aggregate(dataset, query, batch_size)?;
    let exact = exact_components(query, &merged);
    let scales = component_scales(query, exact.components.len())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noisy = add_noise(&exact.components, &scales, &mut rng);
    let raw = finish(query.kind, exact.components.clone()).unwrap_or_else(|_| vec![f64::NAN]);
    Ok(DpResult {
        kind: query.kind,
        labels: exact.labels,
        raw,
        noisy: finish(query.kind, noisy)?,
        epsilon_spent: query.epsilon,
        scale_b: scales,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub epsilon: f64,
    pub analytic_mae: f64,
    pub empirical_mae: Option<f64>,
}

/// MAE of the released values against the exact answer for each ε, both
/// analytically (E|Lap(b)| = b) and by Monte Carlo over `trials` draws.
pub fn tradeoff_curve(
    dataset: &Dataset,
    query: &DpQuery,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
    batch_size: NonZeroUsize,
) -> Result<Vec<TradeoffPoint>, DpError> {
    let merged = merged_aggregate(dataset, query, batch_size)?;
    let exact = exact_components(query, &merged);
    curve(query, &exact.components, epsilons, trials, seed)
}

/// Tradeoff curve without data. Only the noise distribution matters for
/// count, sum and histogram queries; a mean needs the row count and is
/// rejected.
pub fn noise_tradeoff_curve(
    query: &DpQuery,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<TradeoffPoint>, DpError> {
    if query.kind == QueryKind::Mean {
        return Err(DpError::InvalidQuery(
            "a mean tradeoff curve needs the dataset".into(),
        ));
    }
    query.validate()?;
    curve(query, &[0.0], epsilons, trials, seed)
}

fn curve(
    query: &DpQuery,
    components: &[f64],
    epsilons: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<TradeoffPoint>, DpError> {
    if epsilons.is_empty() {
        return Err(DpError::InvalidQuery("empty epsilon grid".into()));
    }
    let raw = finish(query.kind, components.to_vec())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    epsilons
        .iter()
        .map(|&eps| {
            let q = query.clone().with_epsilon(eps);
            q.validate()?;
            let scales = component_scales(&q, components.len())?;
            let analytic_mae = match q.kind {
                // count is exact, so the error is the sum noise over n
                QueryKind::Mean => scales[0] / components[1],
                _ => scales.iter().sum::<f64>() / scales.len() as f64,
            };
            let empirical_mae = if trials == 0 {
                None
            } else {
                let mut total = ExactSum::new();
                for _ in 0..trials {
                    let noisy = finish(q.kind, add_noise(components, &scales, &mut rng))?;
                    let err: f64 = noisy.iter().zip(&raw).map(|(a, b)| (a - b).abs()).sum();
                    total.add(err / noisy.len() as f64);
                }
                Some(total.value() / trials as f64)
            };
            Ok(TradeoffPoint {
                epsilon: eps,
                analytic_mae,
                empirical_mae,
            })
        })
        .collect()
}

/// Fresh seed from the operating system entropy source.
pub fn entropy_seed() -> u64 {
    rand::rngs::OsRng.gen()
}
