//! Full-domain generalization with an exhaustive search of the
//! generalization lattice.
//!
//! Every node (one level per quasi-identifier column) is scored; rows in
//! equivalence classes smaller than `k` are suppressed. A node is feasible
//! when it suppresses at most `max_suppressed` rows and releases at least
//! `k` rows. The chosen node minimizes, in order: the sum of levels, the
//! suppressed-row count, and the level vector itself (lexicographically).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::dataset::{ColumnRole, Dataset};
use super::AnonError;

pub const SUPPRESSED: &str = "*";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizationLevel {
    /// Explicit value map; values missing from the map are an error.
    Map(BTreeMap<String, String>),
    /// Integer ranges aligned at zero, rendered `lo-hi`.
    Interval { width: i64 },
    /// Keeps the first `keep` characters and stars out the rest.
    Prefix { keep: usize },
    /// Everything becomes `*`.
    Suppress,
}

/// Levels `1..=L` of one column's hierarchy; level 0 is the identity and
/// level `L` must be [`GeneralizationLevel::Suppress`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralizationHierarchy {
    pub levels: Vec<GeneralizationLevel>,
}

impl GeneralizationHierarchy {
    pub fn new(levels: Vec<GeneralizationLevel>) -> Result<Self, String> {
        match levels.last() {
            Some(GeneralizationLevel::Suppress) => {}
            _ => return Err("last level must suppress to '*'".into()),
        }
        let mut last_width = None;
        for l in &levels {
            if let GeneralizationLevel::Interval { width } = l {
                if *width <= 0 {
                    return Err(format!("interval width {width} must be positive"));
                }
                if let Some(prev) = last_width {
                    if width % prev != 0 {
                        return Err(format!("interval width {width} does not coarsen {prev}"));
                    }
                }
                last_width = Some(*width);
            }
        }
        Ok(Self { levels })
    }

    /// Identity, then `*`.
    pub fn suppression_only() -> Self {
        Self {
            levels: vec![GeneralizationLevel::Suppress],
        }
    }

    /// Nested integer ranges, then `*`. Each width must divide the next.
    pub fn intervals(widths: &[i64]) -> Result<Self, String> {
        let mut levels: Vec<_> = widths.iter().map(|&width| GeneralizationLevel::Interval { width }).collect();
        levels.push(GeneralizationLevel::Suppress);
        Self::new(levels)
    }

    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn generalize(&self, value: &str, level: usize) -> Result<String, String> {
        if level == 0 {
            return Ok(value.to_string());
        }
        match self.levels.get(level - 1).ok_or_else(|| format!("level {level} out of range"))? {
            GeneralizationLevel::Suppress => Ok(SUPPRESSED.to_string()),
            GeneralizationLevel::Map(m) => m.get(value).cloned().ok_or_else(|| format!("no mapping for {value:?}")),
            GeneralizationLevel::Interval { width } => {
                let v: i64 = value.parse().map_err(|_| format!("{value:?} is not an integer"))?;
                let lo = v.div_euclid(*width) * width;
                Ok(format!("{lo}-{}", lo + width - 1))
            }
            GeneralizationLevel::Prefix { keep } => Ok(value
                .chars()
                .enumerate()
                .map(|(i, c)| if i < *keep { c } else { '*' })
                .collect()),
        }
    }

    /// Every level's image over `values`, checking that each level coarsens the previous.
    fn images(&self, values: &[&str]) -> Result<Vec<Vec<String>>, String> {
        let mut images = Vec::with_capacity(self.height() + 1);
        for level in 0..=self.height() {
            let img = values
                .iter()
                .map(|v| self.generalize(v, level))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(prev) = images.last() {
                let prev: &Vec<String> = prev;
                let mut seen: HashMap<&str, &str> = HashMap::new();
                for (a, b) in prev.iter().zip(&img) {
                    if let Some(existing) = seen.insert(a, b) {
                        if existing != b {
                            return Err(format!("level {level} splits the class {a:?}"));
                        }
                    }
                }
            }
            images.push(img);
        }
        Ok(images)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonConfig {
    pub k: usize,
    #[serde(default)]
    pub max_suppressed: usize,
}

impl KAnonConfig {
    pub fn new(k: usize) -> Self {
        Self { k, max_suppressed: 0 }
    }

    pub fn with_max_suppressed(mut self, n: usize) -> Self {
        self.max_suppressed = n;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonRelease {
    pub dataset: Dataset,
    /// Chosen level per quasi-identifier column, in column order.
    pub levels: Vec<(String, usize)>,
    pub suppressed: usize,
}

impl KAnonRelease {
    pub fn level_sum(&self) -> usize {
        self.levels.iter().map(|(_, l)| l).sum()
    }
}

pub fn k_anonymize(
    dataset: &Dataset,
    k: usize,
    hierarchies: &BTreeMap<String, GeneralizationHierarchy>,
) -> Result<KAnonRelease, AnonError> {
    k_anonymize_with(dataset, &KAnonConfig::new(k), hierarchies)
}

pub fn k_anonymize_with(
    dataset: &Dataset,
    config: &KAnonConfig,
    hierarchies: &BTreeMap<String, GeneralizationHierarchy>,
) -> Result<KAnonRelease, AnonError> {
    let k = config.k;
    if k == 0 {
        return Err(AnonError::KMustBePositive);
    }
    let n = dataset.len();
    if n < k || n == 0 {
        return Err(AnonError::InfeasibleK { k, rows: n });
    }
    let qi = dataset.quasi_identifiers();

    // images[q][level][row]
    let mut images: Vec<Vec<Vec<String>>> = Vec::with_capacity(qi.len());
    for &c in &qi {
        let name = &dataset.columns[c].name;
        let h = hierarchies
            .get(name)
            .ok_or_else(|| AnonError::MissingHierarchy(name.clone()))?;
        let values: Vec<&str> = dataset.rows.iter().map(|r| r[c].as_str()).collect();
        images.push(
            h.images(&values)
                .map_err(|reason| AnonError::InvalidHierarchy { column: name.clone(), reason })?,
        );
    }
    let heights: Vec<usize> = images.iter().map(|img| img.len() - 1).collect();

    let mut best: Option<(usize, usize, Vec<usize>, Vec<bool>)> = None;
    let mut node = vec![0usize; qi.len()];
    loop {
        let keep = kept_rows(&images, &node, n, k);
        let released = keep.iter().filter(|&&b| b).count();
        let suppressed = n - released;
        if suppressed <= config.max_suppressed && released >= k {
            let sum: usize = node.iter().sum();
            let candidate = (sum, suppressed, node.clone(), keep);
            let better = match &best {
                None => true,
                Some((bs, bsup, bnode, _)) => (sum, suppressed, &node) < (*bs, *bsup, bnode),
            };
            if better {
                best = Some(candidate);
            }
        }
        if !next_node(&mut node, &heights) {
            break;
        }
    }

    let (_, suppressed, levels, keep) = best.ok_or(AnonError::InfeasibleK { k, rows: n })?;
    let out_cols: Vec<usize> = (0..dataset.columns.len())
        .filter(|&c| dataset.columns[c].role != ColumnRole::Identifier)
        .collect();
    let rows = dataset
        .rows
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(i, row)| {
            out_cols
                .iter()
                .map(|&c| match qi.iter().position(|&q| q == c) {
                    Some(q) => images[q][levels[q]][i].clone(),
                    None => row[c].clone(),
                })
                .collect()
        })
        .collect();
    let columns = out_cols.iter().map(|&c| dataset.columns[c].clone()).collect();
    Ok(KAnonRelease {
        dataset: Dataset { columns, rows },
        levels: qi
            .iter()
            .zip(&levels)
            .map(|(&c, &l)| (dataset.columns[c].name.clone(), l))
            .collect(),
        suppressed,
    })
}

fn kept_rows(images: &[Vec<Vec<String>>], node: &[usize], n: usize, k: usize) -> Vec<bool> {
    let key = |row: usize| -> Vec<&str> {
        images
            .iter()
            .zip(node)
            .map(|(img, &l)| img[l][row].as_str())
            .collect()
    };
    let mut counts: HashMap<Vec<&str>, usize> = HashMap::new();
    for row in 0..n {
        *counts.entry(key(row)).or_default() += 1;
    }
    (0..n).map(|row| counts[&key(row)] >= k).collect()
}

/// Odometer increment over the lattice; false once every node was visited.
fn next_node(node: &mut [usize], heights: &[usize]) -> bool {
    for (i, h) in heights.iter().enumerate().rev() {
        if node[i] < *h {
            node[i] += 1;
            for later in node.iter_mut().skip(i + 1) {
                *later = 0;
            }
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::super::dataset::{Column, ColumnType};
    use super::*;
    use proptest::prelude::*;

    fn ages(values: &[i64]) -> Dataset {
        let cols = vec![
            Column::new("name", ColumnRole::Identifier, ColumnType::Text),
            Column::new("age", ColumnRole::QuasiIdentifier, ColumnType::Integer),
            Column::new("dx", ColumnRole::Sensitive, ColumnType::Text),
        ];
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, a)| vec![format!("p{i}"), a.to_string(), format!("d{}", i % 2)])
            .collect();
        Dataset::new(cols, rows).unwrap()
    }

    fn decade() -> BTreeMap<String, GeneralizationHierarchy> {
        [("age".to_string(), GeneralizationHierarchy::intervals(&[10]).unwrap())].into()
    }

    #[test]
    fn k_one_only_drops_identifiers() {
        let ds = ages(&[21, 35, 47]);
        let rel = k_anonymize(&ds, 1, &decade()).unwrap();
        assert_eq!(rel.levels, vec![("age".into(), 0)]);
        assert_eq!(rel.suppressed, 0);
        assert_eq!(rel.dataset.columns.len(), 2);
        assert_eq!(rel.dataset.rows[1], vec!["35".to_string(), "d1".to_string()]);
    }

    #[test]
    fn single_class_unchanged() {
        let ds = ages(&[30, 30, 30, 30]);
        let rel = k_anonymize(&ds, 4, &decade()).unwrap();
        assert_eq!(rel.level_sum(), 0);
        assert!(rel.dataset.rows.iter().all(|r| r[0] == "30"));
    }

    #[test]
    fn decade_example() {
        let ds = ages(&[21, 22, 23, 31, 32, 33]);
        let rel = k_anonymize(&ds, 3, &decade()).unwrap();
        assert_eq!(rel.levels, vec![("age".into(), 1)]);
        assert_eq!(rel.suppressed, 0);
        let got: Vec<&str> = rel.dataset.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(got, vec!["20-29", "20-29", "20-29", "30-39", "30-39", "30-39"]);
    }

    #[test]
    fn suppression_budget_prefers_lower_levels() {
        let ds = ages(&[21, 21, 21, 55]);
        let strict = k_anonymize(&ds, 3, &decade()).unwrap();
        assert_eq!(strict.levels, vec![("age".into(), 2)]);
        let relaxed = k_anonymize_with(&ds, &KAnonConfig::new(3).with_max_suppressed(1), &decade()).unwrap();
        assert_eq!(relaxed.levels, vec![("age".into(), 0)]);
        assert_eq!(relaxed.suppressed, 1);
        assert_eq!(relaxed.dataset.len(), 3);
    }

    #[test]
    fn errors() {
        let ds = ages(&[21, 22]);
        assert!(matches!(k_anonymize(&ds, 3, &decade()), Err(AnonError::InfeasibleK { k: 3, rows: 2 })));
        assert!(matches!(k_anonymize(&ages(&[]), 1, &decade()), Err(AnonError::InfeasibleK { .. })));
        assert!(matches!(k_anonymize(&ds, 0, &decade()), Err(AnonError::KMustBePositive)));
        assert!(matches!(k_anonymize(&ds, 1, &BTreeMap::new()), Err(AnonError::MissingHierarchy(_))));
        let bad: BTreeMap<String, GeneralizationHierarchy> = [(
            "age".to_string(),
            GeneralizationHierarchy {
                levels: vec![
                    GeneralizationLevel::Map([("21".into(), "a".into()), ("22".into(), "a".into())].into()),
                    GeneralizationLevel::Map([("21".into(), "x".into()), ("22".into(), "y".into())].into()),
                    GeneralizationLevel::Suppress,
                ],
            },
        )]
        .into();
        assert!(matches!(k_anonymize(&ds, 1, &bad), Err(AnonError::InvalidHierarchy { .. })));
    }

    #[test]
    fn hierarchy_constructors() {
        assert!(GeneralizationHierarchy::intervals(&[10, 25]).is_err());
        assert!(GeneralizationHierarchy::intervals(&[5, 10, 20]).is_ok());
        assert!(GeneralizationHierarchy::new(vec![GeneralizationLevel::Interval { width: 10 }]).is_err());
        let h = GeneralizationHierarchy::new(vec![
            GeneralizationLevel::Prefix { keep: 3 },
            GeneralizationLevel::Prefix { keep: 1 },
            GeneralizationLevel::Suppress,
        ])
        .unwrap();
        assert_eq!(h.generalize("02139", 1).unwrap(), "021**");
        assert_eq!(h.generalize("02139", 2).unwrap(), "0****");
        assert_eq!(h.generalize("02139", 3).unwrap(), "*");
        let d = GeneralizationHierarchy::intervals(&[10]).unwrap();
        assert_eq!(d.generalize("-3", 1).unwrap(), "-10--1");
    }

    fn dataset_strategy() -> impl Strategy<Value = Dataset> {
        (1usize..4, 1usize..30).prop_flat_map(|(qcols, n)| {
            prop::collection::vec(prop::collection::vec(0i64..40, qcols), n).prop_map(move |rows| {
                let mut cols: Vec<Column> = (0..qcols)
                    .map(|q| Column::new(&format!("q{q}"), ColumnRole::QuasiIdentifier, ColumnType::Integer))
                    .collect();
                cols.push(Column::new("s", ColumnRole::Sensitive, ColumnType::Text));
                let rows = rows
                    .into_iter()
                    .map(|r| {
                        let mut r: Vec<String> = r.into_iter().map(|v| v.to_string()).collect();
                        r.push("x".into());
                        r
                    })
                    .collect();
                Dataset::new(cols, rows).unwrap()
            })
        })
    }

    fn hierarchies_for(ds: &Dataset) -> BTreeMap<String, GeneralizationHierarchy> {
        ds.columns
            .iter()
            .filter(|c| c.role == ColumnRole::QuasiIdentifier)
            .map(|c| (c.name.clone(), GeneralizationHierarchy::intervals(&[5, 10, 20]).unwrap()))
            .collect()
    }

    proptest! {
        #[test]
        fn coarsening_is_monotone_in_k(ds in dataset_strategy(), max_sup in 0usize..3) {
            let h = hierarchies_for(&ds);
            let mut prev: Option<(usize, usize)> = None;
            for k in 1..=ds.len() {
                let rel = k_anonymize_with(&ds, &KAnonConfig::new(k).with_max_suppressed(max_sup), &h).unwrap();
                let objective = (rel.level_sum(), rel.suppressed);
                if let Some(p) = prev {
                    prop_assert!(objective.0 >= p.0);
                    prop_assert!(objective >= p);
                    if max_sup == 0 {
                        prop_assert_eq!(objective.1, 0);
                    }
                }
                prev = Some(objective);
            }
        }
    }
}
