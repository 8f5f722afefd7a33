//! Long-format curve ingestion, linear time normalisation, single-landmark
//! registration and assembly of the modelling dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, LeastSquaresFitter};
use crate::dataset::{
    CoefficientSet, CovariateTable, DimensionLayout, FunctionalDataset, ObsKey, Side,
};
use crate::error::{Error, Result};
use crate::numeric::{interp_linear, linspace};

/// One sampled curve of one dimension for one stride.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCurve {
    pub subject: String,
    pub side: Side,
    pub dimension: String,
    pub stride: u32,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl RawCurve {
    fn stride_key(&self) -> (String, Side, u32) {
        (self.subject.clone(), self.side, self.stride)
    }
}

/// Column names of the two input CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub subject: String,
    pub side: String,
    pub dimension: String,
    pub stride: String,
    pub t: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            side: "side".into(),
            dimension: "dimension".into(),
            stride: "stride".into(),
            t: "t".into(),
            value: "value".into(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("{file} file is missing column '{name}'")))
}

fn parse_f64(field: &str, what: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!(
            "row {row}: cannot parse {what} '{field}' as a number"
        ))
    })
}

/// Parse curves and covariates from open readers.
///
/// Row numbers in errors count data records from 1 (the header is not counted).
pub fn parse_long_csv_from_readers<R1: Read, R2: Read>(
    curves: R1,
    covariates: R2,
    schema: &CsvSchema,
) -> Result<(Vec<RawCurve>, CovariateTable)> {
    let curves = parse_curves(curves, schema)?;
    let table = parse_covariates(covariates, schema)?;
    for c in &curves {
        if !table.has_subject(&c.subject) {
            return Err(Error::Linkage(format!(
                "subject '{}' appears in curves but has no covariate row",
                c.subject
            )));
        }
    }
    Ok((curves, table))
}

/// Parse the curves file and the covariates file.
pub fn parse_long_csv(
    curves_path: impl AsRef<Path>,
    covariates_path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<(Vec<RawCurve>, CovariateTable)> {
    let curves =
        std::fs::File::open(curves_path.as_ref()).map_err(|e| Error::io(&curves_path, e))?;
    let covs = std::fs::File::open(covariates_path.as_ref()).map_err(|e| {
        Error::Linkage(format!(
            "cannot open covariate file {}: {e}",
            covariates_path.as_ref().display()
        ))
    })?;
    parse_long_csv_from_readers(curves, covs, schema)
}

fn parse_curves<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<RawCurve>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Schema(
            "curves file is empty or has no header row".into(),
        ));
    }
    let subject = column(&headers, &schema.subject, "curves")?;
    let side = column(&headers, &schema.side, "curves")?;
    let dimension = column(&headers, &schema.dimension, "curves")?;
    let stride = headers.iter().position(|h| h.trim() == schema.stride);
    let t_col = column(&headers, &schema.t, "curves")?;
    let v_col = column(&headers, &schema.value, "curves")?;

    let mut groups: BTreeMap<(String, Side, String, u32), RawCurve> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let subj = rec.get(subject).unwrap_or("").to_string();
        if subj.is_empty() {
            return Err(Error::Data(format!("row {row}: empty subject")));
        }
        let side_s = rec.get(side).unwrap_or("");
        let sd = Side::parse(side_s)
            .ok_or_else(|| Error::Data(format!("row {row}: unknown side '{side_s}'")))?;
        let dim = rec.get(dimension).unwrap_or("").to_string();
        let st = match stride {
            Some(c) => {
                let s = rec.get(c).unwrap_or("");
                s.parse::<u32>()
                    .map_err(|_| Error::Data(format!("row {row}: invalid stride '{s}'")))?
            }
            None => 0,
        };
        let t = parse_f64(rec.get(t_col).unwrap_or(""), "t", row)?;
        let v = parse_f64(rec.get(v_col).unwrap_or(""), "value", row)?;
        let curve = groups
            .entry((subj.clone(), sd, dim.clone(), st))
            .or_insert_with(|| RawCurve {
                subject: subj,
                side: sd,
                dimension: dim,
                stride: st,
                times: Vec::new(),
                values: Vec::new(),
            });
        if let Some(&last) = curve.times.last() {
            if t <= last {
                return Err(Error::Data(format!(
                    "row {row}: time {t} does not increase within curve (previous {last})"
                )));
            }
        }
        curve.times.push(t);
        curve.values.push(v);
    }
    if groups.is_empty() {
        return Err(Error::Schema("curves file has no data rows".into()));
    }
    Ok(groups.into_values().collect())
}

fn parse_covariates<R: Read>(reader: R, schema: &CsvSchema) -> Result<CovariateTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Schema(
            "covariates file is empty or has no header row".into(),
        ));
    }
    let subject = column(&headers, &schema.subject, "covariates")?;
    let side = headers.iter().position(|h| h.trim() == schema.side);
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != subject && Some(c) != side)
        .collect();
    let names = value_cols
        .iter()
        .map(|&c| headers[c].trim().to_string())
        .collect();
    let mut table = CovariateTable::new(names);
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let subj = rec.get(subject).unwrap_or("");
        if subj.is_empty() {
            return Err(Error::Data(format!("covariates row {row}: empty subject")));
        }
        let sd =
            match side.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
                Some(s) => Some(Side::parse(s).ok_or_else(|| {
                    Error::Data(format!("covariates row {row}: unknown side '{s}'"))
                })?),
                None => None,
            };
        let values = value_cols
            .iter()
            .map(|&c| {
                let field = rec.get(c).unwrap_or("");
                if field.is_empty() {
                    Err(Error::Data(format!(
                        "covariates row {row}: missing value for '{}'",
                        headers[c].trim()
                    )))
                } else {
                    parse_f64(field, headers[c].trim(), row)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        table.insert(subj, sd, values)?;
    }
    Ok(table)
}

/// Affinely map sample times so the first is 0 and the last is `domain_end`.
pub fn time_normalize(curve: &RawCurve, domain_end: f64) -> Result<RawCurve> {
    let n = curve.times.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "curve {}/{}/{} has {n} sample(s); normalisation needs at least 2",
            curve.subject, curve.side, curve.dimension
        )));
    }
    let t0 = curve.times[0];
    let t1 = curve.times[n - 1];
    let scale = domain_end / (t1 - t0);
    let mut times: Vec<f64> = curve.times.iter().map(|t| (t - t0) * scale).collect();
    times[0] = 0.0;
    times[n - 1] = domain_end;
    Ok(RawCurve {
        times,
        ..curve.clone()
    })
}

/// Resample a curve onto `grid` by linear interpolation.
pub fn resample(curve: &RawCurve, grid: &[f64]) -> RawCurve {
    let values = grid
        .iter()
        .map(|&t| interp_linear(&curve.times, &curve.values, t))
        .collect();
    RawCurve {
        times: grid.to_vec(),
        values,
        ..curve.clone()
    }
}

/// Time of the global maximum of a curve, earliest on ties.
pub fn landmark_time(curve: &RawCurve) -> f64 {
    let mut best = 0;
    for (i, v) in curve.values.iter().enumerate() {
        if *v > curve.values[best] {
            best = i;
        }
    }
    curve.times[best]
}

/// The piecewise-linear warp with `h(0)=0`, `h(tau)=target`, `h(end)=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkWarp {
    pub tau: f64,
    pub target: f64,
    pub end: f64,
}

impl LandmarkWarp {
    pub fn forward(&self, t: f64) -> f64 {
        if t <= self.tau {
            t * (self.target / self.tau)
        } else {
            self.target + (t - self.tau) * ((self.end - self.target) / (self.end - self.tau))
        }
    }

    pub fn inverse(&self, s: f64) -> f64 {
        if s <= self.target {
            s * (self.tau / self.target)
        } else {
            self.tau + (s - self.target) * ((self.end - self.tau) / (self.end - self.target))
        }
    }
}

/// Register all dimensions of one stride to a common landmark.
///
/// The landmark is the maximum of `landmark_dim`; every dimension is warped by
/// the same map and resampled on its original grid.
pub fn landmark_register(
    curves: &[RawCurve],
    landmark_dim: &str,
    target: f64,
) -> Result<Vec<RawCurve>> {
    let lm = curves
        .iter()
        .find(|c| c.dimension == landmark_dim)
        .ok_or_else(|| {
            Error::Registration(format!("landmark dimension '{landmark_dim}' not present"))
        })?;
    let start = lm.times[0];
    let end = *lm.times.last().unwrap();
    if curves.iter().any(|c| c.times != lm.times) {
        return Err(Error::Registration(
            "all dimensions of a stride must share one time grid before registration".into(),
        ));
    }
    if !(target > start && target < end) {
        return Err(Error::Registration(format!(
            "registration target {target} must lie strictly inside ({start}, {end})"
        )));
    }
    let tau = landmark_time(lm);
    if tau <= start || tau >= end {
        return Err(Error::Registration(format!(
            "landmark of {}/{} stride {} lies on the domain boundary (t = {tau})",
            lm.subject, lm.side, lm.stride
        )));
    }
    let warp = LandmarkWarp { tau, target, end };
    let source: Vec<f64> = lm.times.iter().map(|&s| warp.inverse(s)).collect();
    Ok(curves
        .iter()
        .map(|c| RawCurve {
            values: source
                .iter()
                .map(|&u| interp_linear(&c.times, &c.values, u))
                .collect(),
            ..c.clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub landmark_dim: String,
    /// Target landmark time; the mean landmark time over all strides when absent.
    #[serde(default)]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub domain_end: f64,
    pub grid_points: usize,
    /// Dimension order; sorted labels when empty.
    pub dimensions: Vec<String>,
    pub registration: Option<RegistrationConfig>,
    pub basis_size: usize,
    pub basis_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            domain_end: 100.0,
            grid_points: 101,
            dimensions: Vec::new(),
            registration: None,
            basis_size: 80,
            basis_order: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn grid(&self) -> Vec<f64> {
        linspace(0.0, self.domain_end, self.grid_points)
    }
}

/// Result of preprocessing, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub dataset: FunctionalDataset,
    /// Per-stride coefficients before averaging.
    pub strides: CoefficientSet,
    pub registration_target: Option<f64>,
}

/// Normalise, register, resample and basis-fit all curves, then average strides.
pub fn build_dataset(
    curves: &[RawCurve],
    covariates: &CovariateTable,
    config: &PreprocessConfig,
) -> Result<Preprocessed> {
    if curves.is_empty() {
        return Err(Error::Data("no curves to process".into()));
    }
    let dims: Vec<String> = if config.dimensions.is_empty() {
        curves
            .iter()
            .map(|c| c.dimension.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        config.dimensions.clone()
    };
    let grid = config.grid();

    let mut strides: BTreeMap<(String, Side, u32), Vec<RawCurve>> = BTreeMap::new();
    for c in curves {
        strides
            .entry(c.stride_key())
            .or_default()
            .push(time_normalize(c, config.domain_end)?);
    }
    // order each stride's curves by the configured dimension order
    let mut ordered: Vec<((String, Side, u32), Vec<RawCurve>)> = Vec::with_capacity(strides.len());
    for (key, group) in strides {
        let mut by_dim = Vec::with_capacity(dims.len());
        for d in &dims {
            let c = group.iter().find(|c| &c.dimension == d).ok_or_else(|| {
                Error::Data(format!(
                    "subject '{}' side {} stride {} has no '{d}' curve",
                    key.0, key.1, key.2
                ))
            })?;
            by_dim.push(c.clone());
        }
        if group.len() != dims.len() {
            return Err(Error::Data(format!(
                "subject '{}' side {} stride {} has curves outside the configured dimensions",
                key.0, key.1, key.2
            )));
        }
        // registration needs a shared grid
        if by_dim.iter().any(|c| c.times != by_dim[0].times) {
            by_dim = by_dim.iter().map(|c| resample(c, &grid)).collect();
        }
        ordered.push((key, by_dim));
    }

    let mut target_used = None;
    if let Some(reg) = &config.registration {
        let target = match reg.target {
            Some(t) => t,
            None => {
                let times: Vec<f64> = ordered
                    .iter()
                    .map(|(_, group)| {
                        group
                            .iter()
                            .find(|c| c.dimension == reg.landmark_dim)
                            .map(landmark_time)
                            .ok_or_else(|| {
                                Error::Registration(format!(
                                    "landmark dimension '{}' not present",
                                    reg.landmark_dim
                                ))
                            })
                    })
                    .collect::<Result<_>>()?;
                times.iter().sum::<f64>() / times.len() as f64
            }
        };
        for (_, group) in ordered.iter_mut() {
            *group = landmark_register(group, &reg.landmark_dim, target)?;
        }
        target_used = Some(target);
    }

    let basis = BasisSystem::bspline(config.basis_size, config.basis_order, config.domain_end)?;
    let fitter = LeastSquaresFitter::new(&basis, &grid)?;
    let layout: Vec<DimensionLayout> = dims
        .iter()
        .map(|d| DimensionLayout {
            label: d.clone(),
            basis: basis.clone(),
        })
        .collect();
    let k = basis.size;
    let mut coefs = DMatrix::zeros(ordered.len(), k * dims.len());
    let mut keys = Vec::with_capacity(ordered.len());
    for (row, ((subject, side, stride), group)) in ordered.into_iter().enumerate() {
        for (p, c) in group.iter().enumerate() {
            let on_grid = if c.times.len() == grid.len() && c.times == grid {
                c.values.clone()
            } else {
                resample(c, &grid).values
            };
            let fit = fitter.fit(&on_grid)?;
            coefs
                .view_mut((row, p * k), (1, k))
                .copy_from(&fit.transpose());
        }
        keys.push(ObsKey {
            subject,
            side,
            stride,
        });
    }
    let strides = CoefficientSet::new(layout, keys, coefs)?;
    let averaged = strides.average_by_group()?;
    let dataset = FunctionalDataset::new(averaged, covariates.clone())?;
    Ok(Preprocessed {
        dataset,
        strides,
        registration_target: target_used,
    })
}
