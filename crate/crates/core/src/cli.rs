//! Command-line drivers: dataset ingestion, fitting, profile scans,
//! Kaplan–Meier and predicted-survival curves, simulation and
//! discrimination studies.
//!
//! Every output file records the SHA-256 of the manifest and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::countdist::{Dispersion, SeriesPolicy};
use crate::curemodel::{cure_rate, s_pop, CureModel, ExposureProfile, LinkConfig, ParamVector, PreparedData, Status, Subject};
use crate::em::{fit, information_criteria, profile_fit, EmConfig, FitResult};
use crate::error::{CureError, Result};
use crate::lifetime::WeibullParams;
use crate::sim::{
    generate_dataset, perturbed_start, run_discrimination, run_fitting_study, DiscriminationConfig, JumpLaw, SimConfig,
    SimStudyReport, StudyFamily,
};

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Model(CureError),
    /// Outputs were written but EM stopped at its iteration cap.
    NotConverged(String),
}

impl CliError {
    /// 0 success, 1 usage or parse, 2 numeric domain, 3 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Model(e) if e.is_numeric() => 2,
            CliError::Model(_) => 1,
            CliError::NotConverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CureError> for CliError {
    fn from(e: CureError) -> Self {
        CliError::Model(e)
    }
}

// ---------------------------------------------------------------- arguments

#[derive(Debug, Parser)]
#[command(name = "comcure", version, about = "COM-Poisson cure rate models with multiple discrete exposures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model by EM and write fit.json and subjects.csv.
    Fit(FitArgs),
    /// Fit over a ν-grid and write profile.csv, profile_curve.csv and profile.json.
    Profile(ProfileArgs),
    /// Write the Kaplan–Meier curve of a dataset to km.csv.
    Km(KmArgs),
    /// Predicted population survival and cure probability for one profile.
    Predict(PredictArgs),
    /// Generate datasets and optionally run a parameter-recovery study.
    Simulate(StudyArgs),
    /// LRT rejection and AIC/BIC selection rates across families.
    Discriminate(StudyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Manifest `init.values` perturbed by up to ±15% per coordinate.
    Perturb,
    /// Moment-matched Weibull, coefficients by grid search under the Poisson model.
    Grid,
    /// Moment-matched Weibull and a common intercept matching the censored fraction.
    Moment,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub init: Option<InitStrategy>,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Comma-separated ν values or `start:stop:step` ranges; `inf` is the Bernoulli limit.
    #[arg(long)]
    pub nu_grid: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct KmArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// A fit.json or profile.json written by `fit` or `profile`.
    #[arg(long)]
    pub report: PathBuf,
    /// `name=value` pairs, comma-separated.
    #[arg(long, default_value = "")]
    pub covariates: String,
    /// Daily exposures at 0, 1, …, count − 1.
    #[arg(long)]
    pub exposure_count: usize,
    #[arg(long)]
    pub y_max: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub y_step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub init: InitSection,
    pub simulation: Option<SimSection>,
    pub study: Option<StudySection>,
    pub discrimination: Option<DiscriminationConfig>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Dispersion for `fit`.
    pub family: Option<Dispersion>,
    /// Grid for `profile`, unless `--nu-grid` is given.
    pub nu_grid: Option<Vec<Dispersion>>,
    pub link: LinkConfig,
    #[serde(default)]
    pub series: SeriesPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub strategy: InitStrategy,
    pub values: Option<ParamVector>,
    pub grid_points: usize,
    pub grid_range: (f64, f64),
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection { strategy: InitStrategy::Grid, values: None, grid_points: 11, grid_range: (-5.0, 5.0) }
    }
}

/// A simulation design: one of the standard settings with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_setting")]
    pub setting: u8,
    pub nu: Dispersion,
    pub n: Option<usize>,
    pub truth: Option<ParamVector>,
    pub censor_rate: Option<f64>,
    pub duration: Option<(u32, u32)>,
    pub jumps: Option<JumpLaw>,
    pub replicates: Option<usize>,
    pub series: Option<SeriesPolicy>,
    /// Number of replicate datasets `simulate` writes out.
    #[serde(default = "default_datasets")]
    pub datasets: usize,
}

fn default_setting() -> u8 {
    1
}

fn default_datasets() -> usize {
    1
}

impl SimSection {
    pub fn to_config(&self, seed: u64) -> Result<SimConfig> {
        let mut c = SimConfig::setting(self.setting, self.nu)?;
        c.seed = seed;
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(t) = &self.truth {
            c.truth = t.clone();
        }
        if let Some(r) = self.censor_rate {
            c.censor_rate = r;
        }
        if let Some(d) = self.duration {
            c.duration = d;
        }
        if let Some(j) = self.jumps {
            c.jumps = j;
        }
        if let Some(r) = self.replicates {
            c.replicates = r;
        }
        if let Some(s) = self.series {
            c.series = s;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parameter-recovery study run by `simulate`: a fixed family or a ν-grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub family: Option<Dispersion>,
    pub nu_grid: Option<Vec<Dispersion>>,
}

impl StudySection {
    fn family(&self) -> Result<StudyFamily> {
        match (&self.family, &self.nu_grid) {
            (Some(f), None) => Ok(StudyFamily::Fixed(*f)),
            (None, Some(g)) if !g.is_empty() => Ok(StudyFamily::Profile(g.clone())),
            _ => Err(CureError::Invalid("study needs exactly one of `family` or a nonempty `nu_grid`".into())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A parsed manifest with the digest of its bytes.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub sha256: String,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = toml::from_str(text).map_err(|e| CureError::Invalid(format!("manifest: {}", e.message())))?;
    m.em.validate()?;
    if let Some(model) = &m.model {
        model.link.validate()?;
        model.series.validate()?;
    }
    if m.init.grid_points < 2 || !(m.init.grid_range.0 < m.init.grid_range.1) {
        return Err(CureError::Invalid("init grid needs at least 2 points on a nonempty range".into()));
    }
    Ok(m)
}

pub fn load_manifest(path: &Path) -> std::result::Result<LoadedManifest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Usage("manifest is not UTF-8".into()))?;
    let manifest = parse_manifest(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(LoadedManifest { manifest, sha256: sha256_hex(&bytes) })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `0, 0.5, 1:2:0.25, inf` style lists; ranges include both ends.
pub fn parse_nu_grid(text: &str) -> Result<Vec<Dispersion>> {
    let mut out: Vec<Dispersion> = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [single] => out.push(single.parse()?),
            [a, b, step] => {
                let num = |s: &str| {
                    s.trim().parse::<f64>().map_err(|_| CureError::Invalid(format!("bad number `{s}` in ν-grid")))
                };
                let (a, b, step) = (num(a)?, num(b)?, num(step)?);
                if !(step > 0.0) || b < a {
                    return Err(CureError::Invalid(format!("bad ν range `{item}`")));
                }
                let count = ((b - a) / step + 1e-9).floor() as usize;
                for i in 0..=count {
                    // Rounded so that 0.1-steps land exactly on 1.0 and 0.
                    let v = ((a + i as f64 * step) * 1e9).round() / 1e9;
                    out.push(Dispersion::finite(v)?);
                }
            }
            _ => return Err(CureError::Invalid(format!("bad ν-grid entry `{item}`"))),
        }
    }
    if out.is_empty() {
        return Err(CureError::Invalid("ν-grid is empty".into()));
    }
    for (i, a) in out.iter().enumerate() {
        if out[..i].contains(a) {
            return Err(CureError::Invalid(format!("ν-grid contains {a} twice")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- datasets

/// Reads a delimited dataset. Required columns are `id`, `time`, `status`
/// and one of `exposures` (semicolon-separated increasing offsets) or
/// `exposure_count` (daily exposures from 0); all other columns are numeric
/// covariates. Lines starting with `#` are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<Subject>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        CureError::Parse { line, msg: e.to_string() }
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    let header_line = reader.position().line().saturating_sub(1) as usize;
    let col = |name: &str| header.iter().position(|h| h == name);
    let missing = |name: &str| CureError::Parse { line: header_line.max(1), msg: format!("missing column `{name}`") };
    let id_col = col("id").ok_or_else(|| missing("id"))?;
    let time_col = col("time").ok_or_else(|| missing("time"))?;
    let status_col = col("status").ok_or_else(|| missing("status"))?;
    let exp_col = col("exposures");
    let count_col = col("exposure_count");
    if exp_col.is_some() == count_col.is_some() {
        return Err(CureError::Parse {
            line: header_line.max(1),
            msg: "exactly one of `exposures` or `exposure_count` is required".into(),
        });
    }
    let mut seen_headers = BTreeSet::new();
    for h in header.iter() {
        if !seen_headers.insert(h) {
            return Err(CureError::Parse { line: header_line.max(1), msg: format!("duplicate column `{h}`") });
        }
    }
    let covariate_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| ![Some(id_col), Some(time_col), Some(status_col), exp_col, count_col].contains(&Some(*i)))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut subjects = Vec::new();
    let mut ids = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let perr = |msg: String| CureError::Parse { line, msg };
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize, what: &str| -> Result<f64> {
            let s = field(i);
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(format!("{what}: `{s}` is not a finite number")))
        };
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(perr("empty id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(perr(format!("duplicate id `{id}`")));
        }
        let time = number(time_col, "time")?;
        if time <= 0.0 {
            return Err(perr(format!("time must be > 0, got {time}")));
        }
        let status = match field(status_col) {
            "0" => Status::Censored,
            "1" => Status::Event,
            other => return Err(perr(format!("status must be 0 or 1, got `{other}`"))),
        };
        let exposures = if let Some(c) = exp_col {
            let times = field(c)
                .split(';')
                .map(|s| {
                    let s = s.trim();
                    s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(format!("bad exposure time `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            for w in times.windows(2) {
                if w[1] == w[0] {
                    return Err(perr(format!("duplicate exposure time {}", w[0])));
                }
                if w[1] < w[0] {
                    return Err(perr(format!("exposure times decrease ({} then {})", w[0], w[1])));
                }
            }
            ExposureProfile::new(times).map_err(|e| perr(e.to_string()))?
        } else {
            let c = count_col.expect("checked above");
            let count: usize = field(c)
                .parse()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| perr(format!("exposure_count must be an integer ≥ 1, got `{}`", field(c))))?;
            ExposureProfile::unit(count).map_err(|e| perr(e.to_string()))?
        };
        let mut covariates = BTreeMap::new();
        for (i, name) in &covariate_cols {
            covariates.insert(name.clone(), number(*i, name)?);
        }
        subjects.push(Subject::new(id, time, status, exposures, covariates).map_err(|e| perr(e.to_string()))?);
    }
    Ok(subjects)
}

pub fn read_dataset(path: &Path) -> std::result::Result<(Vec<Subject>, String), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Usage("dataset is not UTF-8".into()))?;
    let data = parse_dataset(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if data.is_empty() {
        return Err(CliError::Usage(format!("dataset {} has no rows", path.display())));
    }
    Ok((data, sha256_hex(&bytes)))
}

/// Writes subjects in the format [`parse_dataset`] reads, covariates in name order.
pub fn format_dataset(subjects: &[Subject], header: &Provenance) -> Result<String> {
    let names: BTreeSet<&String> = subjects.iter().flat_map(|s| s.covariates.keys()).collect();
    let mut w = table_writer(header);
    let mut head = vec!["id".to_string(), "time".into(), "status".into(), "exposures".into()];
    head.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&head).map_err(io_err)?;
    for s in subjects {
        let mut row = vec![
            s.id.clone(),
            s.time.to_string(),
            s.status.indicator().to_string(),
            s.exposures.times().iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        ];
        for n in &names {
            let v = s.covariates.get(*n).ok_or_else(|| CureError::MissingCovariate {
                subject: s.id.clone(),
                name: n.to_string(),
            })?;
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(io_err)?;
    }
    finish_table(w)
}

// ---------------------------------------------------------------- provenance and tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub manifest_sha256: Option<String>,
    pub data_sha256: Option<String>,
    pub seed: Option<u64>,
}

impl Provenance {
    fn comment_lines(&self) -> String {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "none".into());
        let mut s = format!(
            "# command={}\n# manifest_sha256={}\n# seed={}\n",
            self.command,
            opt(&self.manifest_sha256),
            self.seed.map_or("none".into(), |v| v.to_string())
        );
        if let Some(d) = &self.data_sha256 {
            s += &format!("# data_sha256={d}\n");
        }
        s
    }
}

fn io_err(e: impl fmt::Display) -> CureError {
    CureError::Io(e.to_string())
}

struct TableWriter {
    prefix: String,
    inner: csv::Writer<Vec<u8>>,
}

impl TableWriter {
    fn write_record<I, T>(&mut self, record: I) -> csv::Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.inner.write_record(record)
    }
}

fn table_writer(header: &Provenance) -> TableWriter {
    TableWriter { prefix: header.comment_lines(), inner: csv::Writer::from_writer(Vec::new()) }
}

fn table_writer_with(header: &Provenance, extra: &[(&str, String)]) -> TableWriter {
    let mut w = table_writer(header);
    for (k, v) in extra {
        w.prefix += &format!("# {k}={v}\n");
    }
    w
}

fn finish_table(w: TableWriter) -> Result<String> {
    let body = w.inner.into_inner().map_err(io_err)?;
    Ok(w.prefix + &String::from_utf8(body).map_err(io_err)?)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(io_err)?;
    s.push('\n');
    Ok(s)
}

/// Files produced by a command, written only once all are computed.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, content) in &self.files {
            let p = dir.join(name);
            fs::write(&p, content)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

// ---------------------------------------------------------------- initial values

fn lifetime_from_moments(data: &[Subject]) -> Result<WeibullParams> {
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    let since_first = |s: &Subject| s.time - s.exposures.first();
    let events: Vec<f64> = data.iter().filter(|s| s.is_event()).map(since_first).filter(|t| *t > 0.0).collect();
    if events.len() >= 2 {
        let (m, v) = moments(&events);
        if m > 0.0 && v > 0.0 {
            return WeibullParams::from_moments(m, v);
        }
    }
    let all: Vec<f64> = data.iter().map(since_first).filter(|t| *t > 0.0).collect();
    if all.len() >= 2 {
        let (m, v) = moments(&all);
        if m > 0.0 && v > 0.0 {
            return WeibullParams::from_moments(m, v);
        }
    }
    Err(CureError::Invalid("too few positive times for a moment-matched Weibull start".into()))
}

/// Intercepts set so that a Poisson count with one common intensity per
/// exposure reproduces the censored fraction as the cure fraction.
fn moment_betas(data: &[Subject], link: &LinkConfig) -> Vec<f64> {
    let n = data.len() as f64;
    let censored = data.iter().filter(|s| !s.is_event()).count() as f64 / n;
    let mean_exposures = data.iter().map(|s| s.exposures.len() as f64).sum::<f64>() / n;
    let theta = (-censored.clamp(1e-3, 1.0 - 1e-3).ln() / mean_exposures).max(1e-6);
    let intercept = match link.function {
        crate::curemodel::LinkFunction::Log => theta.ln(),
        crate::curemodel::LinkFunction::Logistic => (theta / (1.0 - theta.min(0.999))).ln(),
    };
    link.groups
        .iter()
        .flat_map(|g| std::iter::once(intercept).chain(std::iter::repeat(0.0).take(g.covariates.len())))
        .collect()
}

/// Exhaustive grid search of the coefficients under the Poisson model with
/// the lifetime held fixed; coordinate-wise sweeps over the same grid when
/// the full product would exceed `FULL_GRID_LIMIT` points.
fn grid_betas(data: &[Subject], link: &LinkConfig, series: SeriesPolicy, lifetime: WeibullParams, init: &InitSection, start: &[f64]) -> Result<Vec<f64>> {
    const FULL_GRID_LIMIT: usize = 50_000;
    let model = CureModel::new(Dispersion::POISSON, link.clone()).with_series(series);
    let prep = PreparedData::new(data, &model)?;
    let (lo, hi) = init.grid_range;
    let m = init.grid_points;
    let values: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let score = |b: &[f64]| {
        ParamVector::new(b.to_vec(), lifetime.gamma1, lifetime.gamma2)
            .and_then(|p| prep.loglik(&p))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let d = start.len();
    let mut best = start.to_vec();
    let mut best_score = score(&best);
    let full = (m as f64).powi(d as i32) <= FULL_GRID_LIMIT as f64;
    if full {
        let mut idx = vec![0usize; d];
        let mut b = vec![0.0; d];
        loop {
            for (v, &i) in b.iter_mut().zip(&idx) {
                *v = values[i];
            }
            let s = score(&b);
            if s > best_score {
                best_score = s;
                best.copy_from_slice(&b);
            }
            let mut j = 0;
            while j < d {
                idx[j] += 1;
                if idx[j] < m {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == d {
                break;
            }
        }
    } else {
        for _ in 0..5 {
            let before = best_score;
            for j in 0..d {
                let mut b = best.clone();
                for &v in &values {
                    b[j] = v;
                    let s = score(&b);
                    if s > best_score {
                        best_score = s;
                        best[j] = v;
                    }
                }
            }
            if best_score <= before {
                break;
            }
        }
    }
    if best_score == f64::NEG_INFINITY {
        return Err(CureError::Domain("no grid point gives a finite Poisson log-likelihood".into()));
    }
    Ok(best)
}

pub fn initial_values(
    data: &[Subject],
    link: &LinkConfig,
    series: SeriesPolicy,
    init: &InitSection,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ParamVector> {
    match strategy {
        InitStrategy::Perturb => {
            let values = init
                .values
                .as_ref()
                .ok_or_else(|| CureError::Invalid("`--init perturb` needs `init.values` in the manifest".into()))?;
            values.check_against(link)?;
            Ok(perturbed_start(values, &mut ChaCha20Rng::seed_from_u64(seed)))
        }
        InitStrategy::Moment => {
            let w = lifetime_from_moments(data)?;
            ParamVector::new(moment_betas(data, link), w.gamma1, w.gamma2)
        }
        InitStrategy::Grid => {
            let w = lifetime_from_moments(data)?;
            let betas = grid_betas(data, link, series, w, init, &moment_betas(data, link))?;
            ParamVector::new(betas, w.gamma1, w.gamma2)
        }
    }
}

// ---------------------------------------------------------------- Kaplan–Meier

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Product-limit estimate at every distinct observed time, preceded by
/// the point `(0, 1)`. Events at a tied time precede censorings.
pub fn kaplan_meier(data: &[Subject]) -> Vec<KmPoint> {
    let mut times: Vec<(f64, bool)> = data.iter().map(|s| (s.time, s.is_event())).collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![KmPoint { time: 0.0, survival: 1.0, at_risk: data.len(), events: 0, censored: 0 }];
    let mut at_risk = data.len();
    let mut surv = 1.0;
    let mut i = 0;
    while i < times.len() {
        let t = times[i].0;
        let mut events = 0;
        let mut censored = 0;
        while i < times.len() && times[i].0 == t {
            if times[i].1 {
                events += 1;
            } else {
                censored += 1;
            }
            i += 1;
        }
        if events > 0 {
            surv *= 1.0 - events as f64 / at_risk as f64;
        }
        out.push(KmPoint { time: t, survival: surv, at_risk, events, censored });
        at_risk -= events + censored;
    }
    out
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub provenance: Provenance,
    pub init_strategy: InitStrategy,
    pub start: ParamVector,
    /// The model at the reported dispersion.
    pub model: CureModel,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub nu: Dispersion,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Rows of a profile scan ordered by ν; ν counts as a parameter in AIC and BIC.
pub fn profile_rows(result: &FitResult) -> Vec<ProfileRow> {
    let mut rows: Vec<ProfileRow> = result
        .profile_trace
        .iter()
        .map(|pt| {
            let ic = pt.loglik.map(|l| information_criteria(l, result.p, result.n));
            ProfileRow {
                nu: pt.nu,
                loglik: pt.loglik,
                aic: ic.map(|v| v.0),
                bic: ic.map(|v| v.1),
                converged: pt.converged,
                error: pt.error.clone(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.nu.sort_key().total_cmp(&b.nu.sort_key()));
    rows
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn subjects_table(prov: &Provenance, result: &FitResult) -> Result<String> {
    let posteriors: BTreeMap<&str, f64> = result.posteriors.iter().map(|p| (p.id.as_str(), p.value)).collect();
    let mut w = table_writer(prov);
    w.write_record(["id", "cure_probability", "susceptible_posterior"]).map_err(io_err)?;
    for c in &result.cure_probs {
        let post = posteriors.get(c.id.as_str()).copied();
        w.write_record([c.id.clone(), c.value.to_string(), opt_num(post)]).map_err(io_err)?;
    }
    finish_table(w)
}

fn fit_model_from(loaded: &LoadedManifest) -> std::result::Result<&ModelSection, CliError> {
    loaded.manifest.model.as_ref().ok_or_else(|| CliError::Usage("manifest has no [model] section".into()))
}

fn check_covariates(data: &[Subject], link: &LinkConfig) -> std::result::Result<(), CliError> {
    for name in link.covariate_names() {
        if let Some(s) = data.iter().find(|s| !s.covariates.contains_key(&name)) {
            return Err(CliError::Usage(format!("covariate `{name}` referenced by the link is not a dataset column (subject {})", s.id)));
        }
    }
    Ok(())
}

fn convergence_status(result: &FitResult) -> std::result::Result<(), CliError> {
    if result.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("EM stopped after {} iterations", result.iterations)))
    }
}

// ---------------------------------------------------------------- commands

pub struct CommandOutcome {
    pub outputs: Outputs,
    pub dir: PathBuf,
    /// A deferred error reported after the outputs are written.
    pub status: std::result::Result<(), CliError>,
}

fn out_dir(flag: &Option<PathBuf>, manifest: Option<&LoadedManifest>) -> PathBuf {
    flag.clone()
        .or_else(|| manifest.and_then(|m| m.manifest.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn prepare_fit(args: &FitArgs, command: &str) -> std::result::Result<(LoadedManifest, Vec<Subject>, Provenance, InitStrategy, u64), CliError> {
    let loaded = load_manifest(&args.manifest)?;
    let (data, data_sha) = read_dataset(&args.data)?;
    let model = fit_model_from(&loaded)?;
    check_covariates(&data, &model.link)?;
    let seed = args.seed.or(loaded.manifest.seed).unwrap_or(0);
    let strategy = args.init.unwrap_or(loaded.manifest.init.strategy);
    let prov = Provenance {
        command: command.into(),
        manifest_sha256: Some(loaded.sha256.clone()),
        data_sha256: Some(data_sha),
        seed: Some(seed),
    };
    Ok((loaded, data, prov, strategy, seed))
}

/// A fitted model with the start it was reached from.
#[derive(Debug, Clone)]
pub struct ManifestFit {
    pub model: CureModel,
    pub start: ParamVector,
    pub result: FitResult,
}

/// Fits the manifest's `model.family`, or profiles over `grid` when given.
pub fn fit_with_manifest(
    data: &[Subject],
    manifest: &Manifest,
    grid: Option<&[Dispersion]>,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ManifestFit> {
    let section = manifest.model.as_ref().ok_or_else(|| CureError::Invalid("manifest has no [model] section".into()))?;
    if data.is_empty() {
        return Err(CureError::Invalid("dataset has no rows".into()));
    }
    for name in section.link.covariate_names() {
        if let Some(s) = data.iter().find(|s| !s.covariates.contains_key(&name)) {
            return Err(CureError::MissingCovariate { subject: s.id.clone(), name });
        }
    }
    let first = match grid {
        Some(g) => {
            crate::curemodel::ModelSpec::profile(g.to_vec(), section.link.clone()).validate()?;
            g[0]
        }
        None => section.family.ok_or_else(|| CureError::Invalid("manifest needs model.family".into()))?,
    };
    let base = CureModel::new(first, section.link.clone()).with_series(section.series);
    let start = initial_values(data, &base.link, base.series, &manifest.init, strategy, seed)?;
    let prep = PreparedData::new(data, &base)?;
    let result = match grid {
        Some(g) => profile_fit(&prep, g, &start, &manifest.em)?,
        None => fit(&prep, &start, &manifest.em)?,
    };
    let model = CureModel::new(result.nu, section.link.clone()).with_series(section.series);
    Ok(ManifestFit { model, start, result })
}

fn model_error(e: CureError) -> CliError {
    match e {
        CureError::Invalid(m) => CliError::Usage(m),
        other => CliError::Model(other),
    }
}

pub fn cmd_fit(args: &FitArgs) -> std::result::Result<CommandOutcome, CliError> {
    let (loaded, data, prov, strategy, seed) = prepare_fit(args, "fit")?;
    let ManifestFit { model, start, result } = fit_with_manifest(&data, &loaded.manifest, None, strategy, seed).map_err(model_error)?;
    let status = convergence_status(&result);
    let mut outputs = Outputs::default();
    outputs.add("subjects.csv", subjects_table(&prov, &result)?);
    let report = FitReport { provenance: prov, init_strategy: strategy, start, model, fit: result };
    outputs.add("fit.json", to_json(&report)?);
    Ok(CommandOutcome { outputs, dir: out_dir(&args.out, Some(&loaded)), status })
}

pub fn cmd_profile(args: &ProfileArgs) -> std::result::Result<CommandOutcome, CliError> {
    let (loaded, data, prov, strategy, seed) = prepare_fit(&args.fit, "profile")?;
    let section = fit_model_from(&loaded)?;
    let grid = match (&args.nu_grid, &section.nu_grid) {
        (Some(text), _) => parse_nu_grid(text).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(g)) => g.clone(),
        (None, None) => return Err(CliError::Usage("`profile` needs --nu-grid or model.nu_grid".into())),
    };
    let ManifestFit { model, start, result } =
        fit_with_manifest(&data, &loaded.manifest, Some(&grid), strategy, seed).map_err(model_error)?;
    let status = convergence_status(&result);
    let rows = profile_rows(&result);
    let mut outputs = Outputs::default();

    let mut table = table_writer_with(&prov, &[("selected_nu", result.nu.to_string())]);
    table.write_record(["nu", "loglik", "aic", "bic", "converged", "error"]).map_err(io_err)?;
    for r in &rows {
        table
            .write_record([
                r.nu.to_string(),
                opt_num(r.loglik),
                opt_num(r.aic),
                opt_num(r.bic),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io_err)?;
    }
    outputs.add("profile.csv", finish_table(table)?);

    let mut curve = table_writer(&prov);
    curve.write_record(["nu", "loglik"]).map_err(io_err)?;
    for r in rows.iter().filter(|r| r.nu.nu().is_some()) {
        if let Some(l) = r.loglik {
            curve.write_record([r.nu.to_string(), l.to_string()]).map_err(io_err)?;
        }
    }
    outputs.add("profile_curve.csv", finish_table(curve)?);

    outputs.add("subjects.csv", subjects_table(&prov, &result)?);
    let report = FitReport { provenance: prov, init_strategy: strategy, start, model, fit: result };
    outputs.add("profile.json", to_json(&report)?);
    Ok(CommandOutcome { outputs, dir: out_dir(&args.fit.out, Some(&loaded)), status })
}

pub fn cmd_km(args: &KmArgs) -> std::result::Result<CommandOutcome, CliError> {
    let loaded = args.manifest.as_deref().map(load_manifest).transpose()?;
    let (data, data_sha) = read_dataset(&args.data)?;
    let prov = Provenance {
        command: "km".into(),
        manifest_sha256: loaded.as_ref().map(|m| m.sha256.clone()),
        data_sha256: Some(data_sha),
        seed: loaded.as_ref().and_then(|m| m.manifest.seed),
    };
    let mut w = table_writer(&prov);
    w.write_record(["time", "survival", "at_risk", "events", "censored"]).map_err(io_err)?;
    for p in kaplan_meier(&data) {
        w.write_record([
            p.time.to_string(),
            p.survival.to_string(),
            p.at_risk.to_string(),
            p.events.to_string(),
            p.censored.to_string(),
        ])
        .map_err(io_err)?;
    }
    let mut outputs = Outputs::default();
    outputs.add("km.csv", finish_table(w)?);
    Ok(CommandOutcome { outputs, dir: out_dir(&args.out, loaded.as_ref()), status: Ok(()) })
}

/// Parses `name=value` pairs separated by commas.
pub fn parse_covariates(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CureError::Invalid(format!("covariate `{item}` is not of the form name=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| CureError::Invalid(format!("covariate `{item}` has a non-numeric value")))?;
        if out.insert(k.trim().to_string(), v).is_some() {
            return Err(CureError::Invalid(format!("covariate `{}` given twice", k.trim())));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cure_probability: f64,
    pub curve: Vec<(f64, f64)>,
}

/// Population survival on `0, step, …, y_max` and the cure probability of
/// one covariate profile with `exposure_count` daily exposures.
pub fn predict(model: &CureModel, params: &ParamVector, covariates: &BTreeMap<String, f64>, exposure_count: usize, y_max: Option<f64>, step: f64) -> Result<Prediction> {
    let known = model.link.covariate_names();
    if let Some(unknown) = covariates.keys().find(|k| !known.contains(k)) {
        return Err(CureError::Invalid(format!("unknown covariate `{unknown}`; the model uses {known:?}")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(CureError::Invalid(format!("y-step must be positive, got {step}")));
    }
    let exposures = ExposureProfile::unit(exposure_count)?;
    let last = *exposures.times().last().expect("nonempty");
    let w = params.lifetime();
    // Default horizon: last exposure plus the 0.999 Weibull quantile.
    let y_max = y_max.unwrap_or(last + w.gamma2 * 1000f64.ln().powf(1.0 / w.gamma1));
    if !(y_max >= 0.0 && y_max.is_finite()) {
        return Err(CureError::Invalid(format!("y-max must be finite and ≥ 0, got {y_max}")));
    }
    let subject = Subject::new("profile", 0.0, Status::Censored, exposures, covariates.clone())?;
    let cure = cure_rate(&subject, params, model)?;
    let count = (y_max / step + 1e-9).floor() as usize;
    let curve = (0..=count)
        .map(|i| {
            let y = i as f64 * step;
            s_pop(y, &subject, params, model).map(|s| (y, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction { cure_probability: cure, curve })
}

pub fn cmd_predict(args: &PredictArgs) -> std::result::Result<CommandOutcome, CliError> {
    let bytes = fs::read(&args.report).map_err(|e| CliError::Usage(format!("cannot read report {}: {e}", args.report.display())))?;
    let report: FitReport =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("report {}: {e}", args.report.display())))?;
    let covariates = parse_covariates(&args.covariates).map_err(|e| CliError::Usage(e.to_string()))?;
    let pred = predict(&report.model, &report.fit.params, &covariates, args.exposure_count, args.y_max, args.y_step)
        .map_err(|e| match e {
            CureError::Invalid(m) | CureError::MissingCovariate { subject: m, .. } => CliError::Usage(m),
            other => CliError::Model(other),
        })?;
    let prov = Provenance {
        command: "predict".into(),
        manifest_sha256: report.provenance.manifest_sha256.clone(),
        data_sha256: Some(sha256_hex(&bytes)),
        seed: report.provenance.seed,
    };
    let mut w = table_writer_with(
        &prov,
        &[
            ("cure_probability", pred.cure_probability.to_string()),
            ("exposure_count", args.exposure_count.to_string()),
            ("covariates", args.covariates.clone()),
        ],
    );
    w.write_record(["y", "s_pop"]).map_err(io_err)?;
    for (y, s) in &pred.curve {
        w.write_record([y.to_string(), s.to_string()]).map_err(io_err)?;
    }
    let mut outputs = Outputs::default();
    outputs.add("predict.csv", finish_table(w)?);
    Ok(CommandOutcome { outputs, dir: out_dir(&args.out, None), status: Ok(()) })
}

fn study_setup(args: &StudyArgs, command: &str) -> std::result::Result<(LoadedManifest, SimConfig, SimSection, Provenance), CliError> {
    let loaded = load_manifest(&args.manifest)?;
    let section = loaded
        .manifest
        .simulation
        .clone()
        .ok_or_else(|| CliError::Usage("manifest has no [simulation] section".into()))?;
    let seed = args.seed.or(loaded.manifest.seed).unwrap_or(0);
    let config = section.to_config(seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let prov = Provenance {
        command: command.into(),
        manifest_sha256: Some(loaded.sha256.clone()),
        data_sha256: None,
        seed: Some(seed),
    };
    Ok((loaded, config, section, prov))
}

/// Bias, SE, RMSE and coverage per parameter, one row each.
pub fn study_table(prov: &Provenance, report: &SimStudyReport) -> Result<String> {
    let mut extra = vec![
        ("family", report.family.clone()),
        ("n", report.n.to_string()),
        ("replicates", report.replicates.to_string()),
        ("used", report.estimates.len().to_string()),
    ];
    if let Some(nu) = &report.nu {
        extra.push(("nu_truth", nu.truth.to_string()));
        extra.push(("nu_mean", nu.mean.to_string()));
        extra.push(("nu_rmse", nu.rmse.to_string()));
    }
    let mut w = table_writer_with(prov, &extra);
    w.write_record(["parameter", "truth", "estimate", "se", "bias", "rmse", "coverage"]).map_err(io_err)?;
    for p in &report.parameters {
        w.write_record([
            p.name.clone(),
            p.truth.to_string(),
            p.estimate.to_string(),
            p.se.to_string(),
            p.bias.to_string(),
            p.rmse.to_string(),
            p.coverage.to_string(),
        ])
        .map_err(io_err)?;
    }
    finish_table(w)
}

pub fn cmd_simulate(args: &StudyArgs) -> std::result::Result<CommandOutcome, CliError> {
    let (loaded, config, section, prov) = study_setup(args, "simulate")?;
    let mut outputs = Outputs::default();
    for k in 0..section.datasets {
        let data = generate_dataset(&config, k)?;
        let p = Provenance { command: format!("simulate replicate={k}"), ..prov.clone() };
        outputs.add(format!("dataset_{k}.csv"), format_dataset(&data, &p)?);
    }
    if let Some(study) = &loaded.manifest.study {
        let family = study.family().map_err(|e| CliError::Usage(e.to_string()))?;
        let report = run_fitting_study(&config, &family, &loaded.manifest.em)?;
        outputs.add("study.csv", study_table(&prov, &report)?);
        #[derive(Serialize)]
        struct Out<'a> {
            provenance: &'a Provenance,
            config: &'a SimConfig,
            report: &'a SimStudyReport,
        }
        outputs.add("study.json", to_json(&Out { provenance: &prov, config: &config, report: &report })?);
    }
    if outputs.files.is_empty() {
        return Err(CliError::Usage("nothing to do: datasets = 0 and no [study] section".into()));
    }
    Ok(CommandOutcome { outputs, dir: out_dir(&args.out, Some(&loaded)), status: Ok(()) })
}

fn matrix_table(prov: &Provenance, what: &str, families: &[Dispersion], m: &[Vec<f64>]) -> Result<String> {
    let mut w = table_writer_with(prov, &[("rows", format!("{what}; columns are the true family"))]);
    let mut head = vec!["fitted".to_string()];
    head.extend(families.iter().map(|f| format!("true_{f}")));
    w.write_record(&head).map_err(io_err)?;
    for (f, row) in families.iter().zip(m) {
        let mut rec = vec![f.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io_err)?;
    }
    finish_table(w)
}

pub fn cmd_discriminate(args: &StudyArgs) -> std::result::Result<CommandOutcome, CliError> {
    let (loaded, config, _, prov) = study_setup(args, "discriminate")?;
    let disc = loaded.manifest.discrimination.clone().unwrap_or_else(DiscriminationConfig::standard);
    let report = run_discrimination(&config, &disc, &loaded.manifest.em).map_err(model_error)?;
    let mut outputs = Outputs::default();
    outputs.add("lrt.csv", matrix_table(&prov, "LRT rejection rate of the fitted family as null", &report.families, &report.lrt_rejection)?);
    outputs.add("aic.csv", matrix_table(&prov, "AIC selection rate", &report.families, &report.aic_selection)?);
    outputs.add("bic.csv", matrix_table(&prov, "BIC selection rate", &report.families, &report.bic_selection)?);
    #[derive(Serialize)]
    struct Out<'a> {
        provenance: &'a Provenance,
        config: &'a SimConfig,
        discrimination: &'a DiscriminationConfig,
        report: &'a crate::sim::DiscriminationReport,
    }
    outputs.add("discrimination.json", to_json(&Out { provenance: &prov, config: &config, discrimination: &disc, report: &report })?);
    Ok(CommandOutcome { outputs, dir: out_dir(&args.out, Some(&loaded)), status: Ok(()) })
}

/// Runs a parsed command and writes its outputs.
pub fn execute(cli: &Cli) -> std::result::Result<Vec<PathBuf>, CliError> {
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a)?,
        Command::Profile(a) => cmd_profile(a)?,
        Command::Km(a) => cmd_km(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Discriminate(a) => cmd_discriminate(a)?,
    };
    let paths = outcome.outputs.write(&outcome.dir)?;
    outcome.status.map(|_| paths)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
