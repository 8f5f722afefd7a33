//! Command-line front end: `fit`, `bands`, `simulate` and `unstructured`.
//!
//! Every command writes its outputs plus a `manifest.json` into an output
//! directory. Configuration comes from an optional JSON file; flags override
//! file values.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::export::{
    band_rows, effect_rows, read_json, surface_rows, write_csv, write_json, BAND_HEADER,
    EFFECT_HEADER, SCREE_HEADER, SURFACE_HEADER,
};
use crate::inference::{
    bootstrap_of_subjects, icc_interval, pointwise_band, simultaneous_band, wald_pointwise,
    BandKind, BandOptions, BootstrapOptions,
};
use crate::ingest::{build_dataset, parse_long_csv, CsvSchema, PreprocessConfig};
use crate::model::{fit_model, CovariateSpec, FitOptions, FittedModel, ModelSpec};
use crate::mvfpca::FpcaOptions;
use crate::sim::{
    run_study, write_report, InferenceConfig, Scenario, ScenarioConfig, FULL_REPS, REDUCED_REPS,
};
use crate::unstructured::{cov_ise, unstructured_fit, Which};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "mvfmm",
    version,
    about = "Multivariate functional mixed models for bilateral gait curves"
)]
pub struct Cli {
    /// Worker threads; all available cores when unset.
    #[arg(long, global = true, env = "MVFMM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to long-format curves and covariates.
    Fit(FitArgs),
    /// Pointwise and simultaneous bands for every fixed effect of a fitted model.
    Bands(BandsArgs),
    /// Run the coverage and ISE simulation study.
    Simulate(SimulateArgs),
    /// Method-of-moments covariance estimates compared with a fitted model.
    Unstructured(UnstructuredArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Long-format curves CSV (subject, side, dimension, [stride], t, value).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Covariates CSV (subject, [side], one column per covariate).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON fit configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pve_target: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Number of cubic B-spline functions in the first-stage basis.
    #[arg(long)]
    pub basis_size: Option<usize>,
    /// Continuous covariate, centred (repeatable; replaces the configured list).
    #[arg(long = "continuous")]
    pub continuous: Vec<String>,
    /// Categorical covariate as NAME=REFERENCE (repeatable; replaces the configured list).
    #[arg(long = "categorical")]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMethod {
    Wald,
    Bootstrap,
}

#[derive(Debug, Clone, Args)]
pub struct BandsArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Data for the bootstrap; not read by the Wald method.
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON band configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<BandMethod>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    pub bootstrap: Option<usize>,
    /// Gaussian draws for the simultaneous multiplier.
    #[arg(long = "R")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario configuration JSON (repeatable).
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Scenario number 1 or 2 with default settings (repeatable).
    #[arg(long)]
    pub scenario: Vec<u8>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long = "B")]
    pub bootstrap: Option<usize>,
    #[arg(long = "R")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    /// Full-scale constants: 500 replicates, B = 1000, R = 10000.
    #[arg(long)]
    pub full_scale: bool,
    /// Skip bands and coverage; record ISE, ICC and K only.
    #[arg(long)]
    pub no_inference: bool,
}

#[derive(Debug, Clone, Args)]
pub struct UnstructuredArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings for `fit`, also stored inside model.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub schema_version: u32,
    pub columns: CsvSchema,
    pub preprocess: PreprocessConfig,
    pub model: ModelSpec,
    pub pve_target: f64,
    pub k_max: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            columns: CsvSchema::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSpec::default(),
            pve_target: FpcaOptions::default().pve_target,
            k_max: None,
        }
    }
}

impl FitConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            fpca: FpcaOptions {
                pve_target: self.pve_target,
                k_max: self.k_max,
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandsConfig {
    pub schema_version: u32,
    pub method: BandMethod,
    pub bootstrap: usize,
    pub draws: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BandsConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: BandMethod::Wald,
            bootstrap: 1000,
            draws: 10_000,
            level: 0.95,
            seed: 1,
        }
    }
}

/// Contents of model.json: the fitted model with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub config: FitConfig,
    pub model: FittedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccReport {
    pub icc: f64,
    pub q_total: f64,
    pub s_total: f64,
    pub k_retained: usize,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub nonconverged_scores: Vec<usize>,
    pub boundary_scores: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapIccReport {
    pub icc: f64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstructuredComparison {
    /// `Σ ∫∫ (Q̂_model - Q̂_unstructured)²` over dimension pairs.
    pub ise_q: f64,
    pub ise_s: f64,
    /// ISE divided by `Σ ∫∫ Q̂_unstructured²` (and likewise for S).
    pub relative_ise_q: f64,
    pub relative_ise_s: f64,
    pub icc_model: f64,
    pub icc_unstructured: f64,
}

/// Record of one command run, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the effective configuration as JSON.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn check_schema(version: u32, what: &str) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{what} has schema version {version}; this build reads version {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn display(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

/// Parse, preprocess and basis-fit the input files.
pub fn load_dataset(
    curves: &Path,
    covariates: &Path,
    config: &FitConfig,
) -> Result<FunctionalDataset> {
    let (raw, table) = parse_long_csv(curves, covariates, &config.columns)?;
    Ok(build_dataset(&raw, &table, &config.preprocess)?.dataset)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let file: ModelFile = read_json(path)?;
    check_schema(
        file.schema_version,
        &format!("model file {}", path.display()),
    )?;
    Ok(file)
}

fn parse_categorical(arg: &str) -> Result<CovariateSpec> {
    let (name, reference) = arg.split_once('=').ok_or_else(|| {
        Error::Config(format!("--categorical expects NAME=REFERENCE, got '{arg}'"))
    })?;
    let reference = reference
        .trim()
        .parse::<i64>()
        .map_err(|_| Error::Config(format!("reference level in '{arg}' is not an integer")))?;
    Ok(ModelSpec::default()
        .categorical(name.trim(), reference)
        .covariates
        .remove(0))
}

/// Effective fit configuration: file values, then flags.
pub fn fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg: FitConfig = read_config(args.config.as_deref())?;
    check_schema(cfg.schema_version, "fit config")?;
    if let Some(v) = args.pve_target {
        cfg.pve_target = v;
    }
    if args.k_max.is_some() {
        cfg.k_max = args.k_max;
    }
    if let Some(v) = args.basis_size {
        cfg.preprocess.basis_size = v;
    }
    if !args.continuous.is_empty() || !args.categorical.is_empty() {
        let mut spec = ModelSpec::default();
        for name in &args.continuous {
            spec = spec.continuous(name);
        }
        for arg in &args.categorical {
            spec.covariates.push(parse_categorical(arg)?);
        }
        cfg.model = spec;
    }
    if !(cfg.pve_target > 0.0 && cfg.pve_target <= 1.0) {
        return Err(Error::Config(format!(
            "pve_target must lie in (0, 1], got {}",
            cfg.pve_target
        )));
    }
    Ok(cfg)
}

pub fn cmd_fit(args: &FitArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = fit_config(args)?;
    let curves = require(&args.data.curves, "curves")?;
    let covariates = require(&args.data.covariates, "covariates")?;
    let data = load_dataset(curves, covariates, &cfg)?;
    let model = fit_model(&data, &cfg.model, cfg.fit_options())?;
    create_dir(&args.out)?;
    let grid = cfg.preprocess.grid();
    let file = ModelFile {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        model,
    };
    let mut outputs = write_fit_outputs(&file, &grid, &args.out)?;
    let icc = IccReport {
        icc: file.model.icc,
        q_total: file.model.qstar.sum(),
        s_total: file.model.sstar.sum(),
        k_retained: file.model.basis.k(),
        n_subjects: file.model.report.n_subjects,
        n_obs: file.model.report.n_obs,
        nonconverged_scores: file.model.report.nonconverged(),
        boundary_scores: file.model.report.boundary(),
    };
    let icc_path = args.out.join("icc.json");
    write_json(&icc_path, &icc)?;
    outputs.push(icc_path);
    finish(
        "fit",
        &args.out,
        config_hash(&cfg)?,
        vec![],
        vec![curves.to_path_buf(), covariates.to_path_buf()],
        outputs,
        start,
    )
}

/// model.json, effects.csv, surfaces.csv and scree.csv for a fitted model.
pub fn write_fit_outputs(file: &ModelFile, grid: &[f64], dir: &Path) -> Result<Vec<PathBuf>> {
    let model = &file.model;
    let model_path = dir.join("model.json");
    write_json(&model_path, file)?;
    let effects_path = dir.join("effects.csv");
    write_csv(&effects_path, &EFFECT_HEADER, &effect_rows(model, grid)?)?;
    let mut surfaces = surface_rows("Q", &model.reconstruct_q(grid)?);
    surfaces.extend(surface_rows("S", &model.reconstruct_s(grid)?));
    let surfaces_path = dir.join("surfaces.csv");
    write_csv(&surfaces_path, &SURFACE_HEADER, &surfaces)?;
    let scree_path = dir.join("scree.csv");
    write_csv(&scree_path, &SCREE_HEADER, &model.basis.scree_report())?;
    Ok(vec![model_path, effects_path, surfaces_path, scree_path])
}

pub fn bands_config(args: &BandsArgs) -> Result<BandsConfig> {
    let mut cfg: BandsConfig = read_config(args.config.as_deref())?;
    check_schema(cfg.schema_version, "bands config")?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(b) = args.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(r) = args.draws {
        cfg.draws = r;
    }
    if let Some(l) = args.level {
        cfg.level = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.method == BandMethod::Bootstrap && cfg.bootstrap < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs B >= 2, got {}",
            cfg.bootstrap
        )));
    }
    if cfg.draws == 0 {
        return Err(Error::Config("R must be at least 1".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Config(format!(
            "level must lie in (0, 1), got {}",
            cfg.level
        )));
    }
    Ok(cfg)
}

pub fn cmd_bands(args: &BandsArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = bands_config(args)?;
    let file = read_model(&args.model)?;
    let model = &file.model;
    let grid = file.config.preprocess.grid();
    let labels = model.labels();
    let names = model.effect_names();
    let mut inputs = vec![args.model.clone()];
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    create_dir(&args.out)?;
    let band_options = BandOptions {
        draws: cfg.draws,
        level: cfg.level,
        seed: cfg.seed,
    };
    match cfg.method {
        BandMethod::Wald => {
            for (a, name) in names.iter().enumerate() {
                let pointwise = wald_pointwise(model, a, &grid, cfg.level)?;
                let diag = model.wald_var.row(a).transpose().map(|v| v.max(0.0));
                let cov = nalgebra::DMatrix::from_diagonal(&diag);
                let simultaneous = simultaneous_band(model, a, &grid, &cov, band_options)?;
                rows.extend(band_rows(&pointwise, name, &labels));
                rows.extend(band_rows(&simultaneous, name, &labels));
            }
        }
        BandMethod::Bootstrap => {
            let curves = require(&args.data.curves, "curves")?;
            let covariates = require(&args.data.covariates, "covariates")?;
            inputs.extend([curves.to_path_buf(), covariates.to_path_buf()]);
            let data = load_dataset(curves, covariates, &file.config)?;
            let boot = bootstrap_of_subjects(
                &data,
                model,
                BootstrapOptions {
                    replicates: cfg.bootstrap,
                    seed: cfg.seed,
                    ..Default::default()
                },
            )?;
            for (a, name) in names.iter().enumerate() {
                let pointwise = pointwise_band(
                    model,
                    a,
                    &grid,
                    &boot.cov[a],
                    cfg.level,
                    BandKind::PointwiseBoot,
                )?;
                let simultaneous = simultaneous_band(model, a, &grid, &boot.cov[a], band_options)?;
                rows.extend(band_rows(&pointwise, name, &labels));
                rows.extend(band_rows(&simultaneous, name, &labels));
            }
            let (lower, upper) = icc_interval(&boot.icc_samples, cfg.level)?;
            let icc_path = args.out.join("bootstrap_icc.json");
            write_json(
                &icc_path,
                &BootstrapIccReport {
                    icc: model.icc,
                    level: cfg.level,
                    lower,
                    upper,
                    replicates: boot.replicates,
                    failures: boot.failures,
                },
            )?;
            outputs.push(icc_path);
        }
    }
    let bands_path = args.out.join("bands.csv");
    write_csv(&bands_path, &BAND_HEADER, &rows)?;
    outputs.insert(0, bands_path);
    finish(
        "bands",
        &args.out,
        config_hash(&cfg)?,
        vec![cfg.seed],
        inputs,
        outputs,
        start,
    )
}

/// Effective scenario configurations and inference settings for `simulate`.
pub fn simulate_plan(
    args: &SimulateArgs,
) -> Result<(Vec<ScenarioConfig>, usize, Option<InferenceConfig>)> {
    let mut configs = Vec::new();
    for path in &args.config {
        configs.push(read_config::<ScenarioConfig>(Some(path))?);
    }
    for &n in &args.scenario {
        configs.push(ScenarioConfig::scenario(
            Scenario::try_from(n).map_err(Error::Config)?,
        ));
    }
    if configs.is_empty() {
        configs = vec![
            ScenarioConfig::scenario(Scenario::SharedBasis),
            ScenarioConfig::scenario(Scenario::FourierLegendre),
        ];
    }
    for cfg in configs.iter_mut() {
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(n) = args.n_subjects {
            cfg.n_subjects = n;
        }
        cfg.validate()?;
    }
    let (mut reps, mut inference) = if args.full_scale {
        (FULL_REPS, InferenceConfig::full())
    } else {
        (REDUCED_REPS, InferenceConfig::reduced())
    };
    if let Some(r) = args.reps {
        reps = r;
    }
    if let Some(b) = args.bootstrap {
        inference.bootstrap = b;
    }
    if let Some(r) = args.draws {
        inference.draws = r;
    }
    if let Some(l) = args.level {
        inference.level = l;
    }
    Ok((configs, reps, (!args.no_inference).then_some(inference)))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let (configs, reps, inference) = simulate_plan(args)?;
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut studies = Vec::new();
    for cfg in &configs {
        let path = args
            .out
            .join(format!("scenario{}.json", cfg.scenario.number()));
        write_json(&path, cfg)?;
        outputs.push(path);
        studies.push(run_study(cfg, reps, inference)?);
    }
    outputs.extend(write_report(&studies, &args.out)?);
    let seeds = configs.iter().map(|c| c.seed).collect();
    finish(
        "simulate",
        &args.out,
        config_hash(&(&configs, reps, inference))?,
        seeds,
        args.config.clone(),
        outputs,
        start,
    )
}

pub fn cmd_unstructured(args: &UnstructuredArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let file = read_model(&args.model)?;
    let curves = require(&args.data.curves, "curves")?;
    let covariates = require(&args.data.covariates, "covariates")?;
    let data = load_dataset(curves, covariates, &file.config)?;
    let model = &file.model;
    let unstr = unstructured_fit(model, &data)?;
    let grid = file.config.preprocess.grid();
    create_dir(&args.out)?;
    let uq = unstr.surface(Which::Q, &grid)?;
    let us = unstr.surface(Which::S, &grid)?;
    let mq = model.reconstruct_q(&grid)?;
    let ms = model.reconstruct_s(&grid)?;
    let zero = |s: &crate::model::CovarianceSurface| {
        let mut z = s.clone();
        z.blocks.iter_mut().flatten().for_each(|b| b.fill(0.0));
        z
    };
    let ise_q = cov_ise(&mq, &uq)?;
    let ise_s = cov_ise(&ms, &us)?;
    let norm_q = cov_ise(&uq, &zero(&uq))?;
    let norm_s = cov_ise(&us, &zero(&us))?;
    let trace_q = uq.trace_integral();
    let trace_s = us.trace_integral();
    let comparison = UnstructuredComparison {
        ise_q,
        ise_s,
        relative_ise_q: ise_q / norm_q,
        relative_ise_s: ise_s / norm_s,
        icc_model: model.icc,
        icc_unstructured: trace_q / (trace_q + trace_s),
    };
    let mut rows = surface_rows("Q", &uq);
    rows.extend(surface_rows("S", &us));
    let surfaces_path = args.out.join("unstructured_surfaces.csv");
    write_csv(&surfaces_path, &SURFACE_HEADER, &rows)?;
    let comparison_path = args.out.join("unstructured_comparison.json");
    write_json(&comparison_path, &comparison)?;
    finish(
        "unstructured",
        &args.out,
        config_hash(&file.config)?,
        vec![],
        vec![
            args.model.clone(),
            curves.to_path_buf(),
            covariates.to_path_buf(),
        ],
        vec![surfaces_path, comparison_path],
        start,
    )
}

fn finish(
    command: &str,
    dir: &Path,
    config_hash: String,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash,
        seeds,
        inputs: display(&inputs),
        outputs: display(&outputs),
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Run a parsed command inside a thread pool of the requested size.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Bands(a) => cmd_bands(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Unstructured(a) => cmd_unstructured(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        std::fs::write(
            &path,
            r#"{"schema_version": 1, "pve_target": 0.95, "k_max": 4,
                "model": {"covariates": [{"name": "age", "type": "continuous", "center": true}]}}"#,
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "mvfmm",
            "fit",
            "--config",
            path.to_str().unwrap(),
            "--out",
            "x",
            "--pve-target",
            "0.99",
            "--categorical",
            "sex=0",
        ])
        .unwrap();
        let Command::Fit(args) = &cli.command else {
            panic!()
        };
        let cfg = fit_config(args).unwrap();
        assert_eq!(cfg.pve_target, 0.99);
        assert_eq!(cfg.k_max, Some(4));
        assert_eq!(cfg.model, ModelSpec::default().categorical("sex", 0));
    }

    #[test]
    fn unknown_schema_version_and_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        std::fs::write(&path, r#"{"schema_version": 2}"#).unwrap();
        let err = read_config::<FitConfig>(Some(&path))
            .and_then(|c| check_schema(c.schema_version, "fit config"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::write(&path, r#"{"pve": 0.9}"#).unwrap();
        assert_eq!(
            read_config::<FitConfig>(Some(&path))
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn bootstrap_needs_two_replicates() {
        let cli = Cli::try_parse_from([
            "mvfmm",
            "bands",
            "--model",
            "m.json",
            "--out",
            "o",
            "--method",
            "bootstrap",
            "--B",
            "1",
        ])
        .unwrap();
        let Command::Bands(args) = &cli.command else {
            panic!()
        };
        assert!(matches!(bands_config(args), Err(Error::Config(_))));
    }

    #[test]
    fn full_scale_switches_constants() {
        let cli = Cli::try_parse_from([
            "mvfmm",
            "simulate",
            "--out",
            "o",
            "--scenario",
            "1",
            "--full-scale",
        ])
        .unwrap();
        let Command::Simulate(args) = &cli.command else {
            panic!()
        };
        let (configs, reps, inference) = simulate_plan(args).unwrap();
        assert_eq!(configs.len(), 1);
        assert_eq!(reps, 500);
        assert_eq!(inference, Some(InferenceConfig::full()));
        let cli =
            Cli::try_parse_from(["mvfmm", "simulate", "--out", "o", "--reps", "3", "--B", "7"])
                .unwrap();
        let Command::Simulate(args) = &cli.command else {
            panic!()
        };
        let (configs, reps, inference) = simulate_plan(args).unwrap();
        assert_eq!(configs.len(), 2);
        assert_eq!(reps, 3);
        assert_eq!(inference.unwrap().bootstrap, 7);
        assert_eq!(inference.unwrap().draws, 2000);
    }

    #[test]
    fn config_hash_is_stable_hex() {
        let h = config_hash(&FitConfig::default()).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&FitConfig::default()).unwrap());
        assert_ne!(h, config_hash(&BandsConfig::default()).unwrap());
    }
}
