//! Experiment configuration and the stage drivers behind the command line:
//! `synth`, `decompose`, `forecast`, `evaluate` and `baseline`.
//!
//! A config is a TOML file. Every output carries the config hash in a leading
//! `# ...` comment; binary outputs cannot, so each stage also writes
//! `manifest-<stage>.txt` listing its files with their SHA-256 and the config
//! hash. Kernel matrices, eigenbases and generated records are cached under
//! `cache/` by content hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    aic_select, baseline_run, fit_cluster_ar, potential_predictability, write_aic_csv, write_cluster_model,
    AffiliationScheme, BaselineForecaster, BlendMode,
};
use crate::dataset::{
    fill_masked, fit_monthly_trend, integrate, load_dataset, monthly_climatology, synth_modulated_field,
    synth_regime_ar, write_dataset, write_dataset_csv, DataFormat, Dataset, ModulatedFieldSpec, RegimeArSpec,
    ScalarObservable,
};
use crate::embedding::{embed, join, EmbeddedSeries};
use crate::error::{Error, Result, StageExt};
use crate::forecast::{
    read_forecast_csv_with_truth, run_forecasts, write_forecast_binary, write_forecast_csv, ForecastRun, Forecaster,
};
use crate::hash::{hex, sha256, ContentHasher};
use crate::kernels::{
    build_matrix, choose_sigma0, exponent_row, kernel_hash, read_kernel_cache, write_kernel_cache, KernelKind,
    KernelMatrix, KernelSpec, Sigma0Policy,
};
use crate::laplacian::{decompose, mode_diagnostics, read_eigen_basis, write_eigen_basis, EigenBasis, InnerProduct};
use crate::metrics::{
    skill_curves, truth_ose, write_horizon_csv, write_skill_csv, OseModel, SkillCurves, Truth, TruthMode,
    DEFAULT_PC_THRESHOLD,
};
use crate::ose::{gh_extend, gh_fit, lp_fit, write_gh_model, write_lp_model, GhModel, LpModel, DEFAULT_MAX_LEVELS};
use crate::par::map_indexed;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; `--out` overrides it. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub observable: ObservableConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub ose: OseConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    pub variables: Vec<VariableConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConfig {
    pub name: String,
    #[serde(default = "default_q")]
    pub q: usize,
    pub source: SourceConfig,
    /// Separate record for the test period (model-error experiments). Its
    /// samples from the split index on are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_source: Option<SourceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<FillConfig>,
    /// Per-grid-point, per-calendar-month linear detrending fitted on the
    /// training period.
    #[serde(default)]
    pub detrend: bool,
    #[serde(default)]
    pub order: PreprocessOrder,
}

fn default_q() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<DataFormat>,
    },
    /// Seeds inside generator specs are ignored; generators draw from the
    /// root seed.
    ModulatedField(ModulatedFieldSpec),
    RegimeAr(RegimeArSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FillConfig {
    /// Dataset on the same grid and timestamps whose values decide the mask.
    pub mask_path: PathBuf,
    pub threshold: f64,
    #[serde(default = "default_fill")]
    pub value: f64,
}

fn default_fill() -> f64 {
    -1.8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessOrder {
    #[default]
    FillThenDetrend,
    DetrendThenFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableConfig {
    /// Area-integrated anomaly of one variable against its training
    /// climatology (with per-month trends when `detrend`).
    IntegratedAnomaly {
        #[serde(default)]
        variable: usize,
        #[serde(default)]
        detrend: bool,
    },
    /// Eigenfunction `index` (1 is the constant one); truth is its
    /// out-of-sample extension.
    Eigenfunction { index: usize },
}

impl Default for ObservableConfig {
    fn default() -> Self {
        ObservableConfig::IntegratedAnomaly {
            variable: 0,
            detrend: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Explicit scale (epsilon, or sigma0 for the Gaussian kind).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Data-driven scale when `scale` is absent.
    pub policy: Sigma0Policy,
    /// Multiplies the data-driven scale.
    pub factor: f64,
    pub alpha: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Nlsa,
            scale: None,
            policy: Sigma0Policy::MedianSquared,
            factor: 1.0,
            alpha: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    pub eigenfunctions: usize,
    pub inner_product: InnerProduct,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            eigenfunctions: 20,
            inner_product: InnerProduct::Degree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OseConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_trunc: Option<usize>,
    /// Relative training-error tolerance of the pyramid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp_tolerance: Option<f64>,
    pub lp_max_levels: usize,
}

impl Default for OseConfig {
    fn default() -> Self {
        Self {
            l_trunc: None,
            lp_tolerance: None,
            lp_max_levels: DEFAULT_MAX_LEVELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    KeafGh,
    KeafLp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Leads in months.
    pub leads: Vec<i64>,
    pub methods: Vec<Method>,
    /// Ensemble sizes; empty uses every analog.
    pub ensemble_sizes: Vec<usize>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            leads: (0..=24).collect(),
            methods: vec![Method::KeafGh, Method::KeafLp],
            ensemble_sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub threshold: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_PC_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffiliationConfig {
    #[default]
    Deterministic,
    Realization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub clusters: Vec<usize>,
    pub switches: Vec<usize>,
    /// Fixed `(K, C)` instead of AIC selection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<[usize; 2]>,
    pub affiliation: AffiliationConfig,
    pub blend: BlendMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            clusters: vec![1, 2, 3],
            switches: vec![1, 2, 4, 8, 16],
            fixed: None,
            affiliation: AffiliationConfig::Deterministic,
            blend: BlendMode::Coefficients,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for v in &mut config.variables {
            for src in std::iter::once(&mut v.source).chain(v.test_source.as_mut()) {
                if let SourceConfig::File { path, .. } = src {
                    resolve(path);
                }
            }
            if let Some(f) = &mut v.fill {
                resolve(&mut f.mask_path);
            }
        }
        if let Some(o) = &mut config.output {
            resolve(o);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.variables.is_empty() {
            return bad("at least one [[variables]] entry is required".into());
        }
        let mut names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("variable names must be unique".into());
        }
        if let Some(v) = self
            .variables
            .iter()
            .find(|v| v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            return bad(format!("variable name `{}` must be non-empty [A-Za-z0-9_-]", v.name));
        }
        if let Some(v) = self.variables.iter().find(|v| v.q == 0) {
            return bad(format!("q of `{}` must be at least 1", v.name));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.split.train_fraction));
        }
        match self.observable {
            ObservableConfig::IntegratedAnomaly { variable, .. } if variable >= self.variables.len() => {
                return bad(format!("observable variable {variable} does not exist"));
            }
            ObservableConfig::Eigenfunction { index } if index == 0 || index > self.decompose.eigenfunctions => {
                return bad(format!(
                    "eigenfunction {index} outside 1..={}",
                    self.decompose.eigenfunctions
                ));
            }
            _ => {}
        }
        if self.variables.len() > 1 && self.kernel.kind == KernelKind::Nlsa {
            return bad("several variables need kind = \"nlsa-multivariate\" or \"gaussian\"".into());
        }
        if let Some(s) = self.kernel.scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("kernel scale {s} must be positive"));
            }
        }
        if !(self.kernel.factor > 0.0 && self.kernel.factor.is_finite()) {
            return bad(format!("kernel factor {} must be positive", self.kernel.factor));
        }
        if self.decompose.eigenfunctions < 2 {
            return bad("at least two eigenfunctions are required".into());
        }
        if self.forecast.leads.is_empty() || self.forecast.leads.iter().any(|l| *l < 0) {
            return bad("leads must be non-empty and non-negative".into());
        }
        if self.forecast.ensemble_sizes.contains(&0) {
            return bad("ensemble sizes must be positive".into());
        }
        if !(self.evaluate.threshold > -1.0 && self.evaluate.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (-1, 1)", self.evaluate.threshold));
        }
        if self.baseline.clusters.is_empty() || self.baseline.clusters.contains(&0) {
            return bad("baseline clusters must be positive".into());
        }
        if self.baseline.switches.is_empty() {
            return bad("baseline switches must be non-empty".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization, ignoring `output`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let text = toml::to_string(&c).expect("config serializes");
        hex(&sha256(text.as_bytes()))
    }
}

/// Files written by one stage, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: &'static str,
    pub files: Vec<PathBuf>,
}

/// Training and test data after preprocessing and embedding.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: EmbeddedSeries,
    pub test: EmbeddedSeries,
    /// Integrated anomaly on the full training and test records, when the
    /// observable is one.
    pub observable: Option<(ScalarObservable, ScalarObservable)>,
}

/// Models and truth shared by the forecast and baseline stages.
struct Fitted {
    prepared: Prepared,
    f: Vec<f64>,
    gh: Option<GhModel>,
    lp: Option<LpModel>,
    truth: Truth,
    /// Observable at each test point, lead 0.
    initial: Vec<f64>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let hash = config.hash();
        Ok(Self { config, out, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn comment(&self, stage: &str) -> String {
        format!("analogcast stage={stage} config_hash={}", self.hash)
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn generator_seed(&self, name: &str) -> u64 {
        substream(self.config.seed, &format!("generator/{name}")).next_u64()
    }

    fn source_dataset(&self, src: &SourceConfig, stream: &str) -> Result<Dataset> {
        let synth = |tag: &str, body: String, make: &dyn Fn(u64) -> Result<Dataset>| -> Result<Dataset> {
            let seed = self.generator_seed(stream);
            let key = ContentHasher::new().str(tag).str(&body).u64(seed).finish();
            let path = self.dir("cache")?.join(format!("data-{}.bin", &hex(&key)[..16]));
            if let Ok(ds) = load_dataset(&path, DataFormat::RawBinary) {
                return Ok(ds);
            }
            let ds = make(seed)?;
            write_dataset(&path, DataFormat::RawBinary, &ds)?;
            // Reload so cold and cached runs see the same dataset name.
            load_dataset(&path, DataFormat::RawBinary)
        };
        match src {
            SourceConfig::File { path, format } => {
                load_dataset(path, format.unwrap_or_else(|| DataFormat::from_path(path)))
            }
            SourceConfig::ModulatedField(spec) => synth("modulated-field", spec_text(spec), &|seed| {
                synth_modulated_field(&ModulatedFieldSpec { seed, ..spec.clone() })
            }),
            SourceConfig::RegimeAr(spec) => synth("regime-ar", spec_text(spec), &|seed| {
                let (obs, _) = synth_regime_ar(&RegimeArSpec { seed, ..spec.clone() })?;
                let values = ndarray::Array2::from_shape_vec((obs.len(), 1), obs.values().to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Dataset::from_timestamps("regime-ar", obs.timestamps().to_vec(), values, Some(vec![1.0]))
            }),
        }
    }

    /// `(full record, test record)` of one variable.
    fn records(&self, v: &VariableConfig) -> Result<(Dataset, Option<Dataset>)> {
        let main = self.source_dataset(&v.source, &v.name)?;
        let test = match &v.test_source {
            Some(src) => Some(self.source_dataset(src, &format!("{}/test", v.name))?),
            None => None,
        };
        Ok((main, test))
    }

    fn split_index(&self, n: usize) -> usize {
        (n as f64 * self.config.split.train_fraction).floor() as usize
    }

    fn split(&self, main: &Dataset, test: Option<&Dataset>) -> Result<(Dataset, Dataset)> {
        let cut = self.split_index(main.len());
        let train = main.slice(0, cut)?;
        let test = match test {
            Some(t) => t.slice(self.split_index(t.len()), t.len())?,
            None => main.slice(cut, main.len())?,
        };
        Ok((train, test))
    }

    fn preprocess(&self, v: &VariableConfig, train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
        let fill = |tr: Dataset, te: Dataset| -> Result<(Dataset, Dataset)> {
            let Some(f) = &v.fill else { return Ok((tr, te)) };
            let mask = load_dataset(&f.mask_path, DataFormat::from_path(&f.mask_path))?;
            let (mtr, mte) = self.split(&mask, None)?;
            Ok((fill_masked(&tr, &mtr, f.threshold, f.value)?, fill_masked(&te, &mte, f.threshold, f.value)?))
        };
        let detrend = |tr: Dataset, te: Dataset| -> Result<(Dataset, Dataset)> {
            if v.detrend {
                detrend_with_training(&tr, &te)
            } else {
                Ok((tr, te))
            }
        };
        match v.order {
            PreprocessOrder::FillThenDetrend => {
                let (a, b) = fill(train, test)?;
                detrend(a, b)
            }
            PreprocessOrder::DetrendThenFill => {
                let (a, b) = detrend(train, test)?;
                fill(a, b)
            }
        }
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let velocities = self.config.kernel.kind != KernelKind::Gaussian;
        let mut trains = Vec::new();
        let mut tests = Vec::new();
        let mut observable = None;
        for (i, v) in self.config.variables.iter().enumerate() {
            let (main, test_rec) = self.records(v).stage("load")?;
            let (train, test) = self.split(&main, test_rec.as_ref()).stage("split")?;
            let (train, test) = self.preprocess(v, train, test).stage("preprocess")?;
            if let ObservableConfig::IntegratedAnomaly { variable, detrend } = self.config.observable {
                if variable == i {
                    observable = Some(integrated_observable(&train, &test, detrend).stage("observable")?);
                }
            }
            let mut e_train = embed(&train.with_name(v.name.clone()), v.q).stage("embed")?;
            let mut e_test = embed(&test.with_name(v.name.clone()), v.q).stage("embed")?;
            if velocities {
                e_train = e_train.with_velocities().stage("embed")?;
                e_test = e_test.with_velocities().stage("embed")?;
            }
            trains.push(e_train);
            tests.push(e_test);
        }
        let (train, test) = if trains.len() == 1 {
            (trains.pop().expect("one"), tests.pop().expect("one"))
        } else {
            (join(&trains).stage("embed")?, join(&tests).stage("embed")?)
        };
        Ok(Prepared { train, test, observable })
    }

    pub fn kernel_spec(&self, train: &EmbeddedSeries) -> Result<KernelSpec> {
        let k = &self.config.kernel;
        let base = match k.kind {
            KernelKind::Gaussian => KernelSpec::gaussian(1.0),
            KernelKind::Nlsa => KernelSpec::nlsa(1.0),
            KernelKind::NlsaMultivariate => KernelSpec::nlsa_multivariate(1.0),
        }
        .with_alpha(k.alpha);
        let scale = match (k.scale, k.kind) {
            (Some(s), _) => s,
            (None, KernelKind::Gaussian) => k.factor * choose_sigma0(train, k.policy)?,
            (None, _) => k.factor * median_exponent(train, &base, k.policy)?,
        };
        let spec = match k.kind {
            KernelKind::Gaussian => KernelSpec { sigma0: scale, ..base },
            _ => KernelSpec { epsilon: scale, ..base },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn kernel(&self, train: &EmbeddedSeries, spec: &KernelSpec) -> Result<KernelMatrix> {
        let h = kernel_hash(train, spec);
        let path = self.dir("cache")?.join(format!("kernel-{}.kmat", &hex(&h)[..16]));
        if let Ok(k) = read_kernel_cache(&path, &h, spec, train.timestamps()) {
            return Ok(k);
        }
        let k = build_matrix(train, spec)?;
        write_kernel_cache(&path, &k)?;
        Ok(k)
    }

    fn basis(&self, kernel: &KernelMatrix) -> Result<EigenBasis> {
        let d = &self.config.decompose;
        let count = d.eigenfunctions.min(kernel.values.nrows());
        let ip = match d.inner_product {
            InnerProduct::Degree => "degree",
            InnerProduct::Probability => "probability",
        };
        let key = ContentHasher::new()
            .bytes(&kernel.hash)
            .u64(count as u64)
            .str(ip)
            .finish();
        let path = self.dir("cache")?.join(format!("basis-{}.eigb", &hex(&key)[..16]));
        if let Ok(b) = read_eigen_basis(&path) {
            if b.kernel_hash == kernel.hash && b.count() == count && b.inner_product == d.inner_product {
                return Ok(b);
            }
        }
        let b = decompose(kernel, count, d.inner_product)?;
        write_eigen_basis(&path, &b)?;
        Ok(b)
    }

    fn decomposition(&self, prepared: &Prepared) -> Result<(KernelSpec, EigenBasis)> {
        let spec = self.kernel_spec(&prepared.train).stage("kernel")?;
        let kernel = self.kernel(&prepared.train, &spec).stage("kernel")?;
        let basis = self.basis(&kernel).stage("eigs")?;
        Ok((spec, basis))
    }

    fn fit(&self, need_gh: bool, need_lp: bool) -> Result<Fitted> {
        let prepared = self.prepare()?;
        let (spec, basis) = self.decomposition(&prepared)?;
        let train = &prepared.train;
        let test = &prepared.test;
        let leads = &self.config.forecast.leads;
        let ose = &self.config.ose;
        let (f, objective) = match (&self.config.observable, &prepared.observable) {
            (ObservableConfig::Eigenfunction { index }, _) => (basis.eigenfunctions.column(index - 1).to_vec(), None),
            (ObservableConfig::IntegratedAnomaly { .. }, Some((tr, te))) => {
                let at = |obs: &ScalarObservable, ts: &[i64]| -> Result<Vec<f64>> {
                    ts.iter()
                        .map(|&t| obs.at(t).ok_or_else(|| Error::Shape(format!("observable has no month {t}"))))
                        .collect()
                };
                (at(tr, train.timestamps())?, Some(at(te, test.timestamps())?))
            }
            (ObservableConfig::IntegratedAnomaly { .. }, None) => unreachable!("validated variable index"),
        };
        let need_gh = need_gh || objective.is_none();
        let gh = if need_gh {
            Some(gh_fit(&f, &basis, train, &spec, ose.l_trunc).stage("ose")?)
        } else {
            None
        };
        let lp = if need_lp {
            let tol = ose.lp_tolerance.map(|t| t * norm(&f));
            Some(lp_fit(&f, train, &spec, tol, ose.lp_max_levels).stage("ose")?)
        } else {
            None
        };
        let (truth, initial) = match objective {
            Some(values) => {
                let truth = Truth::from_series(&values, leads, test.dt(), TruthMode::Objective).stage("truth")?;
                (truth, values)
            }
            None => {
                let g = gh.as_ref().expect("fitted above");
                let truth = truth_ose(test, OseModel::Gh(g), leads).stage("truth")?;
                let initial = map_indexed(test.len(), |j| gh_extend(g, &test.point(j)))
                    .into_iter()
                    .collect::<Result<Vec<f64>>>()
                    .stage("truth")?;
                (truth, initial)
            }
        };
        Ok(Fitted {
            prepared,
            f,
            gh,
            lp,
            truth,
            initial,
        })
    }

    fn finish(&self, stage: &'static str, files: Vec<PathBuf>) -> Result<StageReport> {
        let mut text = format!("# {}\n", self.comment(stage));
        for f in &files {
            let bytes = fs::read(self.out.join(f)).map_err(|e| Error::io(self.out.join(f), e))?;
            writeln!(text, "{}  {}", hex(&sha256(&bytes)), f.display()).expect("write to string");
        }
        let path = self.out.join(format!("manifest-{stage}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(StageReport { stage, files })
    }

    /// Writes every configured record as CSV and raw binary, plus the
    /// generator formula for synthetic ones.
    pub fn synth(&self) -> Result<StageReport> {
        let dir = self.dir("data").stage("synth")?;
        let mut files = Vec::new();
        for v in &self.config.variables {
            let (main, test) = self.records(v).stage("synth")?;
            let sources = std::iter::once((&v.source, main, v.name.clone(), v.name.clone())).chain(test.map(|t| {
                let src = v.test_source.as_ref().expect("test record");
                (src, t, format!("{}_test", v.name), format!("{}/test", v.name))
            }));
            for (src, ds, stem, stream) in sources {
                let csv = dir.join(format!("{stem}.csv"));
                write_dataset_csv(&csv, &ds, Some(&self.comment("synth"))).stage("synth")?;
                let bin = dir.join(format!("{stem}.bin"));
                write_dataset(&bin, DataFormat::RawBinary, &ds).stage("synth")?;
                files.push(PathBuf::from("data").join(format!("{stem}.csv")));
                files.push(PathBuf::from("data").join(format!("{stem}.bin")));
                let formula = match src {
                    SourceConfig::ModulatedField(spec) => Some(
                        ModulatedFieldSpec {
                            seed: self.generator_seed(&stream),
                            ..spec.clone()
                        }
                        .formula(),
                    ),
                    SourceConfig::RegimeAr(_) => {
                        Some("x(t+1) = mu_s + a_s x(t) + sigma_s e(t), s a Markov chain with matrix T\n".into())
                    }
                    SourceConfig::File { .. } => None,
                };
                if let Some(text) = formula {
                    let p = dir.join(format!("{stem}.formula.txt"));
                    fs::write(&p, format!("# {}\n{text}", self.comment("synth"))).map_err(|e| Error::io(&p, e))?;
                    files.push(PathBuf::from("data").join(format!("{stem}.formula.txt")));
                }
            }
        }
        self.finish("synth", files)
    }

    /// Eigenbasis plus per-mode diagnostics `index,lambda,classification,dominant_period`.
    pub fn decompose(&self) -> Result<StageReport> {
        let prepared = self.prepare()?;
        let (_, basis) = self.decomposition(&prepared)?;
        let dir = self.dir("decompose").stage("decompose")?;
        write_eigen_basis(&dir.join("basis.eigb"), &basis).stage("decompose")?;
        let dt = prepared.train.dt() as f64;
        let mut csv = format!("# {}\nindex,lambda,classification,dominant_period\n", self.comment("decompose"));
        for j in 0..basis.count() {
            let phi = basis.eigenfunctions.column(j).to_vec();
            let (class, period) = if j == 0 {
                ("constant".to_string(), String::new())
            } else {
                let d = mode_diagnostics(&phi, dt).stage("diagnostics")?;
                (d.class.as_str().to_string(), d.dominant_period.to_string())
            };
            writeln!(csv, "{},{},{class},{period}", j + 1, basis.eigenvalues[j]).expect("write to string");
        }
        let p = dir.join("modes.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        self.finish(
            "decompose",
            vec![PathBuf::from("decompose/basis.eigb"), PathBuf::from("decompose/modes.csv")],
        )
    }

    fn write_run(&self, stage: &'static str, run: &ForecastRun, truth: &Truth, files: &mut Vec<PathBuf>) -> Result<()> {
        let dir = self.dir("forecasts")?;
        let csv = format!("{}.csv", run.method);
        write_forecast_csv(&dir.join(&csv), run, Some(&truth.values), Some(&self.comment(stage)))?;
        files.push(PathBuf::from("forecasts").join(csv));
        let bin = format!("{}.frun", run.method);
        write_forecast_binary(&dir.join(&bin), run)?;
        files.push(PathBuf::from("forecasts").join(bin));
        Ok(())
    }

    /// One run per (method, ensemble size) plus persistence.
    pub fn forecast(&self) -> Result<StageReport> {
        let methods = &self.config.forecast.methods;
        let fitted = self.fit(methods.contains(&Method::KeafGh), methods.contains(&Method::KeafLp))?;
        let test = &fitted.prepared.test;
        let leads = &self.config.forecast.leads;
        let mut files = Vec::new();
        let models = self.dir("models").stage("forecast")?;
        let sizes: Vec<Option<usize>> = if self.config.forecast.ensemble_sizes.is_empty() {
            vec![None]
        } else {
            self.config.forecast.ensemble_sizes.iter().map(|&k| Some(k)).collect()
        };
        for method in methods {
            let forecaster = match method {
                Method::KeafGh => {
                    let g = fitted.gh.as_ref().expect("fitted");
                    write_gh_model(&models.join("gh.ghmd"), g).stage("forecast")?;
                    files.push(PathBuf::from("models/gh.ghmd"));
                    Forecaster::Gh(g)
                }
                Method::KeafLp => {
                    let l = fitted.lp.as_ref().expect("fitted");
                    write_lp_model(&models.join("lp.lpmd"), l).stage("forecast")?;
                    files.push(PathBuf::from("models/lp.lpmd"));
                    Forecaster::Lp(l)
                }
            };
            for &n_n in &sizes {
                let mut run = run_forecasts(forecaster, test, leads, n_n).stage("forecast")?;
                if let Some(k) = n_n {
                    run.method = format!("{}-n{k}", run.method);
                }
                self.write_run("forecast", &run, &fitted.truth, &mut files).stage("forecast")?;
            }
        }
        let run = run_forecasts(Forecaster::Persistence(&fitted.initial), test, leads, None).stage("forecast")?;
        self.write_run("forecast", &run, &fitted.truth, &mut files).stage("forecast")?;
        self.finish("forecast", files)
    }

    /// Skill curves for every run under `forecasts/` and the horizon table.
    pub fn evaluate(&self) -> Result<StageReport> {
        let dir = self.out.join("forecasts");
        let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect(),
            Err(_) => Vec::new(),
        };
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no forecast runs in {}", dir.display()))).stage("evaluate");
        }
        let mode = match self.config.observable {
            ObservableConfig::Eigenfunction { .. } => TruthMode::Ose,
            ObservableConfig::IntegratedAnomaly { .. } => TruthMode::Objective,
        };
        let skill_dir = self.dir("skill").stage("evaluate")?;
        let mut curves = Vec::new();
        let mut files = Vec::new();
        for p in &paths {
            let (run, values) = read_forecast_csv_with_truth(p).stage("evaluate")?;
            let truth = Truth {
                leads: run.leads.clone(),
                values,
                mode,
            };
            let s = skill_curves(&run, &truth).stage("evaluate")?;
            let name = format!("{}.csv", s.method);
            write_skill_csv(&skill_dir.join(&name), std::slice::from_ref(&s), Some(&self.comment("evaluate")))
                .stage("evaluate")?;
            files.push(PathBuf::from("skill").join(name));
            curves.push(s);
        }
        write_horizon_csv(
            &self.out.join("horizons.csv"),
            &curves,
            self.config.evaluate.threshold,
            Some(&self.comment("evaluate")),
        )
        .stage("evaluate")?;
        files.push(PathBuf::from("horizons.csv"));
        self.finish("evaluate", files)
    }

    /// Baseline fits on the training observable, their forecasts on the
    /// test points and the potential-predictability skill.
    pub fn baseline(&self) -> Result<StageReport> {
        Ok(self.baseline_with_skill()?.0)
    }

    /// [`Experiment::baseline`], also returning the potential-predictability
    /// curves.
    pub fn baseline_with_skill(&self) -> Result<(StageReport, SkillCurves)> {
        let fitted = self.fit(false, false)?;
        let b = &self.config.baseline;
        let x = &fitted.f;
        let seed = substream(self.config.seed, "restarts").next_u64();
        let dir = self.dir("baseline").stage("baseline")?;
        let mut files = Vec::new();
        let (k, c) = match b.fixed {
            Some([k, c]) => (k, c),
            None => {
                let table = aic_select(x, &b.clusters, &b.switches, seed).stage("baseline")?;
                write_aic_csv(&dir.join("aic.csv"), &table, Some(&self.comment("baseline"))).stage("baseline")?;
                files.push(PathBuf::from("baseline/aic.csv"));
                table.best
            }
        };
        let stationary = fit_cluster_ar(x, 1, 0, seed).stage("baseline")?;
        write_cluster_model(&dir.join("ar.txt"), &stationary, Some(&self.comment("baseline"))).stage("baseline")?;
        files.push(PathBuf::from("baseline/ar.txt"));
        let model = fit_cluster_ar(x, k, c, seed).stage("baseline")?;
        write_cluster_model(&dir.join("cluster_ar.txt"), &model, Some(&self.comment("baseline")))
            .stage("baseline")?;
        files.push(PathBuf::from("baseline/cluster_ar.txt"));

        let test = &fitted.prepared.test;
        let leads = &self.config.forecast.leads;
        let inits: Vec<usize> = (0..fitted.initial.len()).collect();
        let scheme = match b.affiliation {
            AffiliationConfig::Deterministic => AffiliationScheme::Deterministic(b.blend),
            AffiliationConfig::Realization => {
                AffiliationScheme::Realization(substream(self.config.seed, "realizations").next_u64())
            }
        };
        for forecaster in [
            BaselineForecaster::Stationary(&stationary.coefficients[0]),
            BaselineForecaster::Cluster(&model, scheme),
        ] {
            let run = baseline_run(forecaster, &fitted.initial, test.timestamps(), &inits, leads, test.dt())
                .stage("baseline")?;
            self.write_run("baseline", &run, &fitted.truth, &mut files).stage("baseline")?;
        }
        let potential = potential_predictability(&model, x, leads, test.dt()).stage("baseline")?;
        write_skill_csv(
            &dir.join("potential_skill.csv"),
            std::slice::from_ref(&potential),
            Some(&self.comment("baseline")),
        )
        .stage("baseline")?;
        write_horizon_csv(
            &dir.join("potential_horizon.csv"),
            std::slice::from_ref(&potential),
            self.config.evaluate.threshold,
            Some(&self.comment("baseline")),
        )
        .stage("baseline")?;
        files.push(PathBuf::from("baseline/potential_skill.csv"));
        files.push(PathBuf::from("baseline/potential_horizon.csv"));
        Ok((self.finish("baseline", files)?, potential))
    }
}

/// Per-column monthly trends fitted on `train`, removed from both records.
fn detrend_with_training(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut tr = train.values().clone();
    let mut te = test.values().clone();
    for j in 0..train.grid_size() {
        let col = |d: &Dataset| ScalarObservable::new(d.values().column(j).to_vec(), d.timestamps().to_vec());
        let clim = fit_monthly_trend(&col(train)?)?;
        for (v, &t) in tr.column_mut(j).iter_mut().zip(train.timestamps()) {
            *v -= clim.baseline(t);
        }
        for (v, &t) in te.column_mut(j).iter_mut().zip(test.timestamps()) {
            *v -= clim.baseline(t);
        }
    }
    let rebuild = |d: &Dataset, v| {
        Dataset::from_timestamps(d.variable_name(), d.timestamps().to_vec(), v, d.cell_areas().map(<[f64]>::to_vec))
    };
    Ok((rebuild(train, tr)?, rebuild(test, te)?))
}

fn integrated_observable(train: &Dataset, test: &Dataset, detrend: bool) -> Result<(ScalarObservable, ScalarObservable)> {
    let itr = integrate(train)?;
    let ite = integrate(test)?;
    let clim = if detrend {
        fit_monthly_trend(&itr)?
    } else {
        monthly_climatology(&itr)?
    };
    Ok((clim.anomaly(&itr), clim.anomaly(&ite)))
}

fn norm(f: &[f64]) -> f64 {
    f.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Median of `-log K` at unit scale over (a strided subset of) training
/// pairs; the NLSA analogue of the median squared distance.
fn median_exponent(train: &EmbeddedSeries, unit: &KernelSpec, policy: Sigma0Policy) -> Result<f64> {
    if let Sigma0Policy::Fixed(s) = policy {
        return Ok(s);
    }
    let n = train.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need two samples to choose epsilon".into()));
    }
    let stride = n.div_ceil(1500);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let mut all: Vec<f64> = map_indexed(rows.len(), |r| {
        let i = rows[r];
        let e = exponent_row(&train.point(i), train, unit);
        e[i + 1..].to_vec()
    })
    .into_iter()
    .flatten()
    .collect();
    if policy == Sigma0Policy::MedianDistance {
        all.iter_mut().for_each(|v| *v = v.sqrt());
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let med = if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    };
    if !(med > 0.0) {
        return Err(Error::Degenerate("all training samples coincide".into()));
    }
    Ok(med)
}

/// Stable text form of a generator spec, used as a cache key.
fn spec_text<T: Serialize>(spec: &T) -> String {
    toml::to_string(spec).expect("generator spec serializes")
}
