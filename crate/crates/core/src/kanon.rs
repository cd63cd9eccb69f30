//! Full-domain k-anonymisation over a generalization lattice.
//!
//! Every quasi-identifier is generalized to one level for all rows; a
//! lattice node is the vector of chosen levels. The search walks the lattice
//! bottom-up by level sum and returns the minimal-loss node that satisfies
//! k-anonymity, optionally after suppressing outlier records.

use std::collections::{BTreeMap, HashMap};
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{ClassicalError, GeneralizationHierarchy};
use crate::tabular::{AttributeRole, Cell, ColumnKind, Dataset, TabularError};

#[derive(Debug, Error, PartialEq)]
pub enum KAnonError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("invalid k-anonymity config: {0}")]
    InvalidConfig(String),
    #[error("no lattice node achieves {k}-anonymity within the suppression limit")]
    Unsatisfiable { k: usize },
    #[error(transparent)]
    Classical(#[from] ClassicalError),
}

impl From<TabularError> for KAnonError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::UnknownColumn(c) => KAnonError::UnknownColumn(c),
            other => KAnonError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatticeNode(pub Vec<usize>);

impl LatticeNode {
    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn level_sum(&self) -> usize {
        self.0.iter().sum()
    }

    /// Component-wise partial order.
    pub fn le(&self, other: &LatticeNode) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralizationLattice {
    quasi_identifiers: Vec<String>,
    heights: Vec<usize>,
}

impl GeneralizationLattice {
    pub fn new(quasi_identifiers: Vec<String>, heights: Vec<usize>) -> Result<Self, KAnonError> {
        if quasi_identifiers.len() != heights.len() {
            return Err(KAnonError::InvalidConfig(
                "one height per quasi-identifier".into(),
            ));
        }
        if heights.contains(&0) {
            return Err(KAnonError::InvalidConfig("heights must be positive".into()));
        }
        Ok(Self {
            quasi_identifiers,
            heights,
        })
    }

    pub fn quasi_identifiers(&self) -> &[String] {
        &self.quasi_identifiers
    }

    pub fn heights(&self) -> &[usize] {
        &self.heights
    }

    pub fn node_count(&self) -> usize {
        self.heights.iter().map(|h| h + 1).product()
    }

    pub fn bottom(&self) -> LatticeNode {
        LatticeNode(vec![0; self.heights.len()])
    }

    pub fn top(&self) -> LatticeNode {
        LatticeNode(self.heights.clone())
    }

    pub fn contains(&self, node: &LatticeNode) -> bool {
        node.0.len() == self.heights.len() && node.0.iter().zip(&self.heights).all(|(l, h)| l <= h)
    }

    /// All nodes in lexicographic order of their level vectors.
    pub fn nodes(&self) -> Vec<LatticeNode> {
        let mut out = vec![Vec::with_capacity(self.heights.len())];
        for &h in &self.heights {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..=h).map(move |l| {
                        let mut v = prefix.clone();
                        v.push(l);
                        v
                    })
                })
                .collect();
        }
        out.into_iter().map(LatticeNode).collect()
    }

    /// Exact loss as a fraction `numerator / denominator`, for tie-free
    /// comparisons.
    fn loss_fraction(&self, node: &LatticeNode) -> (u128, u128) {
        let denom: u128 = self.heights.iter().map(|&h| h as u128).product::<u128>()
            * self.heights.len().max(1) as u128;
        let per_level = denom / self.heights.len().max(1) as u128;
        let num = node
            .0
            .iter()
            .zip(&self.heights)
            .map(|(&l, &h)| l as u128 * (per_level / h as u128))
            .sum();
        (num, denom)
    }
}

/// Average normalized generalization level: 0 at the bottom, 1 at the top.
pub fn loss_metric(node: &LatticeNode, lattice: &GeneralizationLattice) -> f64 {
    if lattice.heights.is_empty() {
        return 0.0;
    }
    let total: f64 = node
        .0
        .iter()
        .zip(&lattice.heights)
        .map(|(&l, &h)| l as f64 / h as f64)
        .sum();
    total / lattice.heights.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonymityReport {
    pub k: usize,
    pub satisfied: bool,
    pub min_class_size: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub suppressed_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_node: Option<LatticeNode>,
}

impl KAnonymityReport {
    fn from_class_sizes<I: IntoIterator<Item = usize>>(k: usize, sizes: I) -> Self {
        let mut histogram = BTreeMap::new();
        for s in sizes {
            *histogram.entry(s).or_insert(0) += 1;
        }
        let min_class_size = histogram.keys().next().copied().unwrap_or(0);
        Self {
            k,
            satisfied: histogram.is_empty() || min_class_size >= k,
            min_class_size,
            histogram,
            suppressed_rows: 0,
            chosen_node: None,
        }
    }

    pub fn released_rows(&self) -> usize {
        self.histogram.iter().map(|(size, count)| size * count).sum()
    }
}

#[derive(Debug, Clone)]
pub struct KAnonConfig {
    pub k: NonZeroUsize,
    pub suppression_limit: f64,
    pub hierarchies: Vec<GeneralizationHierarchy>,
}

impl KAnonConfig {
    pub fn new(
        k: NonZeroUsize,
        suppression_limit: f64,
        hierarchies: Vec<GeneralizationHierarchy>,
    ) -> Result<Self, KAnonError> {
        if !(0.0..=1.0).contains(&suppression_limit) {
            return Err(KAnonError::InvalidConfig(format!(
                "suppression_limit {suppression_limit} outside [0, 1]"
            )));
        }
        Ok(Self {
            k,
            suppression_limit,
            hierarchies,
        })
    }

    /// Lattice over the schema's quasi-identifiers in schema order, checking
    /// that each has exactly one hierarchy and no hierarchy is left over.
    pub fn lattice_for(
        &self,
        dataset: &Dataset,
    ) -> Result<(GeneralizationLattice, Vec<&GeneralizationHierarchy>), KAnonError> {
        let mut by_column: HashMap<&str, &GeneralizationHierarchy> = HashMap::new();
        for h in &self.hierarchies {
            if by_column.insert(h.column(), h).is_some() {
                return Err(KAnonError::InvalidConfig(format!(
                    "more than one hierarchy for `{}`",
                    h.column()
                )));
            }
        }
        let mut names = Vec::new();
        let mut ordered = Vec::new();
        for col in dataset.schema().quasi_identifiers() {
            let h = by_column.remove(col.name.as_str()).ok_or_else(|| {
                KAnonError::InvalidConfig(format!("no hierarchy for quasi-identifier `{}`", col.name))
            })?;
            names.push(col.name.clone());
            ordered.push(h);
        }
        if let Some(extra) = by_column.keys().next() {
            return Err(KAnonError::InvalidConfig(format!(
                "hierarchy for `{extra}`, which is not a quasi-identifier"
            )));
        }
        let heights = ordered.iter().map(|h| h.height()).collect();
        Ok((GeneralizationLattice::new(names, heights)?, ordered))
    }

    fn allowed_outliers(&self, rows: usize) -> usize {
        (self.suppression_limit * rows as f64 + 1e-9).floor() as usize
    }
}

/// Groups rows by their exact quasi-identifier tuple.
pub fn check_k_anonymity(
    dataset: &Dataset,
    quasi_ids: &[String],
    k: NonZeroUsize,
) -> Result<KAnonymityReport, KAnonError> {
    let idx: Vec<usize> = quasi_ids
        .iter()
        .map(|c| dataset.schema().index_of(c))
        .collect::<Result<_, _>>()?;
    let mut classes: HashMap<Vec<String>, usize> = HashMap::new();
    for row in dataset.rows() {
        let key = idx.iter().map(|&i| row[i].to_string()).collect();
        *classes.entry(key).or_insert(0) += 1;
    }
    Ok(KAnonymityReport::from_class_sizes(k.get(), classes.into_values()))
}

/// Pre-generalized quasi-identifier values, interned per (column, level).
struct Evaluator {
    // ids[q][level][row]
    ids: Vec<Vec<Vec<u32>>>,
    rows: usize,
}

impl Evaluator {
    fn new(
        dataset: &Dataset,
        lattice: &GeneralizationLattice,
        hierarchies: &[&GeneralizationHierarchy],
    ) -> Result<Self, KAnonError> {
        let mut ids = Vec::with_capacity(hierarchies.len());
        for (name, h) in lattice.quasi_identifiers().iter().zip(hierarchies) {
            let col = dataset.schema().index_of(name)?;
            let values: Vec<String> = dataset.rows().iter().map(|r| r[col].to_string()).collect();
            if let Some((row, value)) = values.iter().enumerate().find(|(_, v)| !h.contains(v)) {
                return Err(ClassicalError::UnknownValue {
                    column: name.clone(),
                    value: value.clone(),
                    row: row + 1,
                }
                .into());
            }
            let per_level = (0..=h.height())
                .map(|level| {
                    let mut intern: HashMap<&str, u32> = HashMap::new();
                    values
                        .iter()
                        .map(|v| {
                            let g = h.generalize(v, level).expect("coverage checked");
                            let next = intern.len() as u32;
                            *intern.entry(g).or_insert(next)
                        })
                        .collect()
                })
                .collect();
            ids.push(per_level);
        }
        Ok(Self {
            ids,
            rows: dataset.row_count(),
        })
    }

    /// Equivalence class id of every row at `node`, plus class sizes.
    fn classes(&self, node: &LatticeNode) -> (Vec<usize>, Vec<usize>) {
        let mut lookup: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut sizes = Vec::new();
        let mut assignment = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let key: Vec<u32> = node
                .0
                .iter()
                .enumerate()
                .map(|(q, &level)| self.ids[q][level][r])
                .collect();
            let next = lookup.len();
            let class = *lookup.entry(key).or_insert(next);
            if class == sizes.len() {
                sizes.push(0);
            }
            sizes[class] += 1;
            assignment.push(class);
        }
        (assignment, sizes)
    }

    /// Number of rows that sit in classes smaller than `k` at `node`.
    fn outliers(&self, node: &LatticeNode, k: usize) -> usize {
        let (_, sizes) = self.classes(node);
        sizes.iter().filter(|&&s| s < k).sum()
    }
}

/// Statistics about one search, exposed for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchStats {
    pub node: LatticeNode,
    pub evaluated: usize,
    pub pruned: usize,
}

pub fn search_lattice(dataset: &Dataset, config: &KAnonConfig) -> Result<LatticeNode, KAnonError> {
    search_lattice_with_stats(dataset, config).map(|s| s.node)
}

pub fn search_lattice_with_stats(
    dataset: &Dataset,
    config: &KAnonConfig,
) -> Result<SearchStats, KAnonError> {
    let (lattice, hierarchies) = config.lattice_for(dataset)?;
    let evaluator = Evaluator::new(dataset, &lattice, &hierarchies)?;
    let k = config.k.get();
    let allowed = config.allowed_outliers(dataset.row_count());
    // Pruning relies on monotonicity, which only holds without suppression.
    let prune = config.suppression_limit == 0.0;

    let mut by_sum: BTreeMap<usize, Vec<LatticeNode>> = BTreeMap::new();
    for node in lattice.nodes() {
        by_sum.entry(node.level_sum()).or_default().push(node);
    }

    let mut satisfying: Vec<LatticeNode> = Vec::new();
    let (mut evaluated, mut pruned) = (0, 0);
    for nodes in by_sum.values() {
        for node in nodes {
            if prune && satisfying.iter().any(|s| s.le(node)) {
                pruned += 1;
                continue;
            }
            evaluated += 1;
            if evaluator.outliers(node, k) <= allowed {
                satisfying.push(node.clone());
            }
        }
    }

    let best = satisfying
        .into_iter()
        .min_by(|a, b| {
            let (na, da) = lattice.loss_fraction(a);
            let (nb, db) = lattice.loss_fraction(b);
            debug_assert_eq!(da, db);
            na.cmp(&nb).then_with(|| a.cmp(b))
        })
        .ok_or(KAnonError::Unsatisfiable { k })?;
    Ok(SearchStats {
        node: best,
        evaluated,
        pruned,
    })
}

/// Generalizes the dataset at the minimal-loss k-anonymous node and removes
/// rows left in classes smaller than k.
pub fn anonymize_k(
    dataset: &Dataset,
    config: &KAnonConfig,
) -> Result<(Dataset, LatticeNode, KAnonymityReport), KAnonError> {
    let (lattice, hierarchies) = config.lattice_for(dataset)?;
    let node = search_lattice(dataset, config)?;
    let evaluator = Evaluator::new(dataset, &lattice, &hierarchies)?;
    let k = config.k.get();
    let (assignment, sizes) = evaluator.classes(&node);

    let qi_idx: Vec<usize> = lattice
        .quasi_identifiers()
        .iter()
        .map(|c| dataset.schema().index_of(c))
        .collect::<Result<_, _>>()?;
    let mut schema = dataset.schema().clone();
    for (&i, &level) in qi_idx.iter().zip(node.levels()) {
        if level > 0 {
            schema.set_kind(i, ColumnKind::Categorical);
        }
    }

    let mut rows = Vec::new();
    let mut suppressed = 0;
    for (row, &class) in dataset.rows().iter().zip(&assignment) {
        if sizes[class] < k {
            suppressed += 1;
            continue;
        }
        let mut row = row.clone();
        for ((&i, &level), h) in qi_idx.iter().zip(node.levels()).zip(&hierarchies) {
            if level > 0 {
                let g = h
                    .generalize(&row[i].to_string(), level)
                    .expect("coverage checked")
                    .to_string();
                row[i] = Cell::Text(g);
            }
        }
        rows.push(row);
    }
    let released = Dataset::from_parts_unchecked(schema, rows);
    let mut report = KAnonymityReport::from_class_sizes(
        k,
        sizes.iter().copied().filter(|&s| s >= k),
    );
    report.suppressed_rows = suppressed;
    report.chosen_node = Some(node.clone());
    Ok((released, node, report))
}

/// Names of the schema's quasi-identifier columns, in schema order.
pub fn quasi_identifier_names(dataset: &Dataset) -> Vec<String> {
    dataset
        .schema()
        .columns()
        .iter()
        .filter(|c| c.role == AttributeRole::QuasiIdentifier)
        .map(|c| c.name.clone())
        .collect()
}
