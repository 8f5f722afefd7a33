//! Containers for first-stage basis coefficients and scalar covariates.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Some(Side::Left),
            "right" | "r" => Some(Side::Right),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one observed curve: a stride of one subject on one side.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObsKey {
    pub subject: String,
    pub side: Side,
    pub stride: u32,
}

/// One response dimension (e.g. "hip") and the basis its coefficients live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionLayout {
    pub label: String,
    pub basis: BasisSystem,
}

impl DimensionLayout {
    pub fn size(&self) -> usize {
        self.basis.size
    }
}

/// Start offset of each dimension block in a concatenated coefficient vector.
pub fn layout_offsets(layout: &[DimensionLayout]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layout.len());
    let mut acc = 0;
    for d in layout {
        offsets.push(acc);
        acc += d.size();
    }
    offsets
}

pub fn layout_total(layout: &[DimensionLayout]) -> usize {
    layout.iter().map(DimensionLayout::size).sum()
}

/// First-stage coefficients: one row per observation, dimensions concatenated
/// in layout order (total length `M = Σ_p K_p`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub layout: Vec<DimensionLayout>,
    pub keys: Vec<ObsKey>,
    pub coefs: DMatrix<f64>,
}

impl CoefficientSet {
    pub fn new(
        layout: Vec<DimensionLayout>,
        keys: Vec<ObsKey>,
        coefs: DMatrix<f64>,
    ) -> Result<Self> {
        if coefs.nrows() != keys.len() {
            return Err(Error::Shape(format!(
                "{} coefficient rows for {} observation keys",
                coefs.nrows(),
                keys.len()
            )));
        }
        if coefs.ncols() != layout_total(&layout) {
            return Err(Error::Shape(format!(
                "coefficient rows have length {} but the layout needs {}",
                coefs.ncols(),
                layout_total(&layout)
            )));
        }
        Ok(Self {
            layout,
            keys,
            coefs,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.coefs.ncols()
    }

    /// Mean coefficient row over the strides of each `(subject, side)`.
    ///
    /// Output rows are ordered by `(subject, side)` and carry stride 0.
    pub fn average_by_group(&self) -> Result<CoefficientSet> {
        if self.is_empty() {
            return Err(Error::Grouping("no coefficient rows to average".into()));
        }
        let mut groups: BTreeMap<(String, Side), Vec<usize>> = BTreeMap::new();
        for (i, k) in self.keys.iter().enumerate() {
            groups
                .entry((k.subject.clone(), k.side))
                .or_default()
                .push(i);
        }
        let m = self.total_size();
        let mut out = DMatrix::zeros(groups.len(), m);
        let mut keys = Vec::with_capacity(groups.len());
        for (g, ((subject, side), rows)) in groups.into_iter().enumerate() {
            let mut acc = DVector::zeros(m);
            for &r in &rows {
                acc += self.coefs.row(r).transpose();
            }
            out.set_row(g, &(acc / rows.len() as f64).transpose());
            keys.push(ObsKey {
                subject,
                side,
                stride: 0,
            });
        }
        CoefficientSet::new(self.layout.clone(), keys, out)
    }
}

/// Scalar covariates keyed by subject, optionally by `(subject, side)`.
///
/// Categorical covariates are stored as integer codes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: BTreeMap<String, CovariateRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateRow {
    /// Subject-level values, one per name (NaN when only side rows exist).
    pub subject: Vec<f64>,
    pub by_side: BTreeMap<Side, Vec<f64>>,
}

impl CovariateTable {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, subject: &str, side: Option<Side>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "covariate row for {subject} has {} values, expected {}",
                values.len(),
                self.names.len()
            )));
        }
        let row = self.rows.entry(subject.to_string()).or_default();
        match side {
            Some(s) => {
                row.by_side.insert(s, values);
            }
            None => row.subject = values,
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Value for `(subject, side)`, preferring a side-specific row.
    pub fn value(&self, subject: &str, side: Side, name: &str) -> Result<f64> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Spec(format!("unknown covariate '{name}'")))?;
        let row = self
            .rows
            .get(subject)
            .ok_or_else(|| Error::Linkage(format!("subject '{subject}' has no covariate row")))?;
        let v = row
            .by_side
            .get(&side)
            .map(|vals| vals[idx])
            .or_else(|| row.subject.get(idx).copied())
            .unwrap_or(f64::NAN);
        if v.is_nan() {
            return Err(Error::Data(format!(
                "covariate '{name}' missing for subject '{subject}' side {side}"
            )));
        }
        Ok(v)
    }

    pub fn has_subject(&self, subject: &str) -> bool {
        self.rows.contains_key(subject)
    }
}

/// The modelling dataset: one averaged coefficient row per `(subject, side)`
/// plus the covariates that describe each row.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub coefficients: CoefficientSet,
    pub covariates: CovariateTable,
}

impl FunctionalDataset {
    pub fn new(coefficients: CoefficientSet, covariates: CovariateTable) -> Result<Self> {
        for k in &coefficients.keys {
            if !covariates.has_subject(&k.subject) {
                return Err(Error::Linkage(format!(
                    "subject '{}' appears in curves but not in covariates",
                    k.subject
                )));
            }
        }
        Ok(Self {
            coefficients,
            covariates,
        })
    }

    pub fn layout(&self) -> &[DimensionLayout] {
        &self.coefficients.layout
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Distinct subjects in first-appearance order and the subject index of each row.
    pub fn subject_index(&self) -> (Vec<String>, Vec<usize>) {
        let mut names: Vec<String> = Vec::new();
        let mut lookup: BTreeMap<&str, usize> = BTreeMap::new();
        let mut idx = Vec::with_capacity(self.len());
        for k in &self.coefficients.keys {
            let next = names.len();
            let i = *lookup.entry(k.subject.as_str()).or_insert_with(|| {
                names.push(k.subject.clone());
                next
            });
            idx.push(i);
        }
        (names, idx)
    }
}
