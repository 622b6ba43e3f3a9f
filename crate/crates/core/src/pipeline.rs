//! Stage orchestration: forward synthesis, the four reconstruction stages,
//! boundary extension and the invariant suites, with every product persisted.
//!
//! Stage outputs carry the hash of the configuration (and of the DtN data for the
//! reconstruction stages). A rerun loads any output whose hash matches instead of
//! recomputing it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::BoundaryGeometry;
use crate::cgo::{plemelj_defect, second_column_diagonal, second_column_trace, CgoTrace, RegularizationConfig, TraceSolver};
use crate::dbar::DbarSolver;
use crate::dtn::{dtn_fem, dtn_unit, extend_dtn, DtNInvariants, DtNMap, ExtensionMethod, FemOptions};
use crate::error::{Error, Result};
use crate::gmres::SolverConfig;
use crate::io;
use crate::phantom::ConductivityField;
use crate::recon::{compare_fields, reconstruct_grid, FieldMetrics, GammaRule, ReconImage, ZGrid, DEFAULT_GAMMA_MIN_CLAMP};
use crate::scatter::{dual_scattering, scattering_from_trace_set, KGrid, ScatteringGrid};

pub const DTN_FILE: &str = "dtn.json";
pub const EXTENDED_DTN_FILE: &str = "dtn_extended.json";

/// Tolerances of the end-to-end phantom check, used by the rule arbitration.
pub const RECON_L2_TOL: f64 = 0.10;
pub const RECON_SYMMETRY_TOL: f64 = 0.02;
pub const RECON_IMAG_TOL: f64 = 0.05;

fn default_n_nodes() -> usize {
    64
}

fn default_radius() -> f64 {
    1.0
}

fn default_clamp() -> f64 {
    DEFAULT_GAMMA_MIN_CLAMP
}

fn default_m() -> u32 {
    6
}

fn default_r_k() -> f64 {
    4.0
}

fn default_z_side() -> usize {
    16
}

fn default_outer_radius() -> f64 {
    1.5
}

fn unit_field() -> ConductivityField {
    ConductivityField::Unit
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KGridConfig {
    #[serde(default = "default_m")]
    pub m: u32,
    #[serde(default = "default_r_k", rename = "R_k")]
    pub r_k: f64,
    /// Defaults to `2.2·R_k / 2^m`.
    #[serde(default)]
    pub h_k: Option<f64>,
}

impl Default for KGridConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            r_k: default_r_k(),
            h_k: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZGridConfig {
    #[serde(default = "default_z_side")]
    pub side: usize,
    /// Defaults to the domain radius.
    #[serde(default)]
    pub radius: Option<f64>,
}

impl Default for ZGridConfig {
    fn default() -> Self {
        Self {
            side: default_z_side(),
            radius: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionConfig {
    #[serde(default = "default_outer_radius")]
    pub outer_radius: f64,
    /// Conductivity between the two circles.
    #[serde(default = "unit_field")]
    pub annulus: ConductivityField,
    #[serde(default)]
    pub method: ExtensionMethod,
    /// Second method run for an agreement report.
    #[serde(default)]
    pub compare_with: Option<ExtensionMethod>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self {
            outer_radius: default_outer_radius(),
            annulus: unit_field(),
            method: ExtensionMethod::default(),
            compare_with: None,
        }
    }
}

/// Reconstruction stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// CGO boundary traces on the k-grid.
    Traces,
    /// Scattering grid and its dual.
    Scattering,
    /// ∂̄ solves at every z node.
    Dbar,
    /// γ from `m̃₊(z, 0)` and metrics.
    Recover,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Traces, Stage::Scattering, Stage::Dbar, Stage::Recover];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Traces => "traces",
            Stage::Scattering => "scattering",
            Stage::Dbar => "dbar",
            Stage::Recover => "recover",
        }
    }

    /// Comma-separated stage names, `all`, or `<stage>-only`.
    pub fn parse_list(text: &str) -> Result<Vec<Stage>> {
        let mut out = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item == "all" {
                out.extend(Stage::ALL);
            } else {
                out.push(item.strip_suffix("-only").unwrap_or(item).parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty stage list".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (expected traces, scattering, dbar, recover)")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub phantom: ConductivityField,
    #[serde(default = "default_n_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Defaults to `n_nodes/2 - 1`.
    #[serde(default)]
    pub max_mode: Option<usize>,
    #[serde(default)]
    pub k_grid: KGridConfig,
    /// Also holds `k_max`, the largest `|k|` a trace may be requested at.
    #[serde(default)]
    pub regularization: RegularizationConfig,
    #[serde(default)]
    pub fem: FemOptions,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub z_grid: ZGridConfig,
    #[serde(default)]
    pub gamma_rule: GammaRule,
    #[serde(default = "default_clamp")]
    pub gamma_min_clamp: f64,
    #[serde(default)]
    pub extension: ExtensionConfig,
    // run-time settings below are not part of the hash
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Stage list as accepted by [`Stage::parse_list`].
    #[serde(default)]
    pub stages: Option<String>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn max_mode(&self) -> usize {
        self.max_mode.unwrap_or((self.n_nodes / 2).saturating_sub(1))
    }

    pub fn k_grid(&self) -> Result<KGrid> {
        KGrid::new(self.k_grid.m, self.k_grid.r_k, self.k_grid.h_k)
    }

    pub fn z_grid(&self) -> ZGrid {
        ZGrid {
            side: self.z_grid.side,
            radius: self.z_grid.radius.unwrap_or(self.radius),
        }
    }

    pub fn geometry(&self) -> Result<BoundaryGeometry> {
        BoundaryGeometry::disk(self.n_nodes, self.radius)
    }

    /// All checks that do not need numerics. Failures are configuration errors.
    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if !self.n_nodes.is_power_of_two() || self.n_nodes < 8 {
            return Err(Error::Config(format!("n_nodes must be a power of two ≥ 8, got {}", self.n_nodes)));
        }
        if self.max_mode() > self.n_nodes / 2 - 1 {
            return Err(Error::Config(format!(
                "max_mode {} exceeds n_nodes/2 - 1 = {}",
                self.max_mode(),
                self.n_nodes / 2 - 1
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        self.phantom.validate().map_err(config)?;
        if self.phantom.support_radius() >= self.radius {
            return Err(Error::Config(format!(
                "phantom support {} must lie inside the domain radius {}",
                self.phantom.support_radius(),
                self.radius
            )));
        }
        let grid = self.k_grid().map_err(config)?;
        self.regularization.validate().map_err(config)?;
        if grid.r_k > self.regularization.k_max {
            return Err(Error::Config(format!(
                "R_k = {} exceeds k_max = {}",
                grid.r_k, self.regularization.k_max
            )));
        }
        self.solver.validate().map_err(config)?;
        self.z_grid().validate().map_err(config)?;
        if !(self.gamma_min_clamp > 0.0) {
            return Err(Error::Config("gamma_min_clamp must be positive".into()));
        }
        if self.fem.resolution < 2 {
            return Err(Error::Config("FEM resolution must be at least 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(stages) = &self.stages {
            Stage::parse_list(stages)?;
        }
        Ok(())
    }

    /// Configured stages, all four when unset.
    pub fn stage_list(&self) -> Result<Vec<Stage>> {
        match &self.stages {
            Some(s) => Stage::parse_list(s),
            None => Ok(Stage::ALL.to_vec()),
        }
    }

    /// SHA-256 of the canonical JSON of every numerical setting.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            for key in ["output_dir", "stages", "workers"] {
                obj.remove(key);
            }
        }
        // serde_json maps are ordered by key, which makes this canonical
        hex(&Sha256::digest(value.to_string().as_bytes()))
    }

    /// Hash tying reconstruction outputs to both the settings and the input map.
    pub fn run_hash(&self, dtn: &DtNMap) -> String {
        let mut h = Sha256::new();
        h.update(self.hash().as_bytes());
        h.update(serde_json::to_string(dtn).expect("map serializes").as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `f` on a pool of `workers` threads, or on the current pool when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    faer::set_global_parallelism(faer::Par::Seq);
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a pool of {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardReport {
    pub config_hash: String,
    pub phantom: ConductivityField,
    pub n_nodes: usize,
    pub max_mode: usize,
    /// `unit` (closed form) or `fem`.
    pub method: String,
    pub fem: Option<FemOptions>,
    /// Same-mesh error of the homogeneous problem, when FEM was used.
    pub discretization_estimate: Option<f64>,
    pub invariants: DtNInvariants,
}

/// Synthesizes the DtN map of the configured phantom and writes `dtn.json` and
/// `forward_report.json` into `out`.
pub fn run_forward(config: &PipelineConfig, out: &Path) -> Result<(DtNMap, ForwardReport)> {
    config.validate()?;
    ensure_dir(out)?;
    let hash = config.hash();
    let geom = config.geometry()?;
    let start = Instant::now();
    let (map, fem, estimate) = if config.phantom.is_unit() {
        (dtn_unit(&geom, config.max_mode())?, None, None)
    } else {
        let fem = dtn_fem(&config.phantom, &geom, config.max_mode(), config.fem).map_err(|e| e.in_stage("forward"))?;
        (fem.map, Some(config.fem), Some(fem.discretization_estimate))
    };
    log::info!("forward map in {:.2?}", start.elapsed());
    let map = map.with_config_hash(hash.clone());
    let report = ForwardReport {
        config_hash: hash,
        phantom: config.phantom.clone(),
        n_nodes: config.n_nodes,
        max_mode: config.max_mode(),
        method: if fem.is_some() { "fem" } else { "unit" }.into(),
        fem,
        discretization_estimate: estimate,
        invariants: map.invariants(),
    };
    io::write_json(&out.join(DTN_FILE), &map)?;
    io::write_json(&out.join("forward_report.json"), &report)?;
    Ok((map, report))
}

/// Reads a DtN file and checks it against the configured geometry.
pub fn load_dtn(config: &PipelineConfig, path: &Path) -> Result<DtNMap> {
    let map: DtNMap = io::read_json(path).map_err(|e| Error::Config(format!("bad DtN file {}: {e}", path.display())))?;
    let geom = map.geometry();
    if geom.n_nodes() != config.n_nodes || (geom.radius() - config.radius).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "DtN file has {} nodes on radius {}, config expects {} on {}",
            geom.n_nodes(),
            geom.radius(),
            config.n_nodes,
            config.radius
        )));
    }
    if map.max_mode() < config.max_mode() {
        return Err(Error::Config(format!(
            "DtN file carries modes up to {}, config asks for {}",
            map.max_mode(),
            config.max_mode()
        )));
    }
    Ok(map)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TraceFile {
    config_hash: String,
    k_grid: KGrid,
    traces: Vec<CgoTrace>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DbarFile {
    config_hash: String,
    image: ReconImage,
}

/// Largest diagnostics over the trace set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub count: usize,
    pub max_k_residual: f64,
    pub max_relation_residual: f64,
    pub max_condition: f64,
}

impl TraceSummary {
    fn of(traces: &[CgoTrace]) -> Self {
        let max = |f: fn(&CgoTrace) -> f64| traces.iter().map(f).fold(0.0, f64::max);
        Self {
            count: traces.len(),
            max_k_residual: max(|t| t.k_residual),
            max_relation_residual: max(|t| t.relation_residual),
            max_condition: max(|t| t.condition),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuleMetrics {
    pub rule: GammaRule,
    pub metrics: FieldMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub traces: Option<TraceSummary>,
    pub scattering_conjugation_defect: Option<f64>,
    /// Configured rule first, then the alternative.
    pub rules: Vec<RuleMetrics>,
}

/// What a reconstruction run produced.
#[derive(Clone, Debug, Default)]
pub struct ReconstructOutcome {
    pub computed: Vec<Stage>,
    pub loaded: Vec<Stage>,
    pub traces: Option<Vec<CgoTrace>>,
    pub scattering: Option<ScatteringGrid>,
    pub image: Option<ReconImage>,
    pub metrics: Option<MetricsReport>,
}

/// Resume control for [`run_reconstruct`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the configured stage list.
    pub stages: Option<Vec<Stage>>,
    /// Ignore outputs of earlier runs.
    pub fresh: bool,
}

struct Reconstruction<'a> {
    config: &'a PipelineConfig,
    dtn: &'a DtNMap,
    out: &'a Path,
    hash: String,
    fresh: bool,
    outcome: ReconstructOutcome,
    dual: Option<ScatteringGrid>,
    solved: Option<ReconImage>,
}

impl Reconstruction<'_> {
    fn tag<T>(stage: Stage, r: Result<T>) -> Result<T> {
        r.map_err(|e| e.in_stage(stage.name()))
    }

    fn note(&mut self, stage: Stage, loaded: bool) {
        let list = if loaded { &mut self.outcome.loaded } else { &mut self.outcome.computed };
        if !list.contains(&stage) {
            list.push(stage);
        }
    }

    fn traces(&mut self) -> Result<Vec<CgoTrace>> {
        if let Some(t) = &self.outcome.traces {
            return Ok(t.clone());
        }
        let path = self.out.join("traces.json");
        let grid = self.config.k_grid()?;
        if !self.fresh && path.exists() {
            let read = io::read_json::<TraceFile>(&path);
            if let Err(e) = &read {
                log::warn!("traces: cannot reuse {}: {e}", path.display());
            }
            if let Ok(file) = read {
                if file.config_hash == self.hash && file.k_grid == grid {
                    log::info!("traces: reusing {}", path.display());
                    self.note(Stage::Traces, true);
                    self.outcome.traces = Some(file.traces.clone());
                    return Ok(file.traces);
                }
            }
        }
        let start = Instant::now();
        let solver = Self::tag(Stage::Traces, TraceSolver::new(self.dtn, self.config.regularization))?;
        let traces: Vec<CgoTrace> = Self::tag(
            Stage::Traces,
            grid.support()
                .par_iter()
                .map(|&i| solver.solve(grid.node(i)))
                .collect::<Result<_>>(),
        )?;
        log::info!("traces: {} solves in {:.2?}", traces.len(), start.elapsed());
        let file = TraceFile {
            config_hash: self.hash.clone(),
            k_grid: grid,
            traces,
        };
        write_compact_json(&path, &file)?;
        self.note(Stage::Traces, false);
        self.outcome.traces = Some(file.traces.clone());
        Ok(file.traces)
    }

    fn dual(&mut self) -> Result<ScatteringGrid> {
        if let Some(d) = &self.dual {
            return Ok(d.clone());
        }
        let grid = self.config.k_grid()?;
        if !self.fresh {
            let cached = ScatteringGrid::read_with_hash(self.out, "scattering")
                .and_then(|a| Ok((a, ScatteringGrid::read_with_hash(self.out, "scattering_dual")?)));
            if let Ok(((s, h1), (d, h2))) = cached {
                let current = Some(self.hash.as_str());
                if h1.as_deref() == current && h2.as_deref() == current && s.grid == grid {
                    log::info!("scattering: reusing stored grids");
                    self.note(Stage::Scattering, true);
                    self.outcome.scattering = Some(s);
                    self.dual = Some(d.clone());
                    return Ok(d);
                }
            }
        }
        let traces = self.traces()?;
        let s = Self::tag(
            Stage::Scattering,
            scattering_from_trace_set(self.dtn.geometry(), &grid, &traces),
        )?;
        let d = Self::tag(Stage::Scattering, dual_scattering(&s))?;
        s.write(self.out, "scattering", Some(&self.hash))?;
        d.write(self.out, "scattering_dual", Some(&self.hash))?;
        self.note(Stage::Scattering, false);
        self.outcome.scattering = Some(s);
        self.dual = Some(d.clone());
        Ok(d)
    }

    fn dbar(&mut self) -> Result<ReconImage> {
        if let Some(image) = &self.solved {
            return Ok(image.clone());
        }
        let path = self.out.join("dbar.json");
        if !self.fresh && path.exists() {
            if let Ok(file) = io::read_json::<DbarFile>(&path) {
                if file.config_hash == self.hash {
                    log::info!("dbar: reusing {}", path.display());
                    self.note(Stage::Dbar, true);
                    self.solved = Some(file.image.clone());
                    return Ok(file.image);
                }
            }
        }
        let dual = self.dual()?;
        let start = Instant::now();
        let mut image = Self::tag(
            Stage::Dbar,
            reconstruct_grid(
                &dual,
                &self.config.z_grid(),
                self.config.solver,
                self.config.gamma_rule,
                self.config.gamma_min_clamp,
            ),
        )?;
        log::info!("dbar: {} nodes in {:.2?}", image.z_nodes.len(), start.elapsed());
        let failed = image.failures.iter().filter(|f| f.is_some()).count();
        if failed > 0 {
            log::warn!("dbar: {failed} of {} nodes failed", image.z_nodes.len());
        }
        image.metadata = serde_json::json!({ "config_hash": self.hash });
        io::write_json(
            &path,
            &DbarFile {
                config_hash: self.hash.clone(),
                image: image.clone(),
            },
        )?;
        self.note(Stage::Dbar, false);
        self.solved = Some(image.clone());
        Ok(image)
    }

    fn recover(&mut self) -> Result<()> {
        let solved = self.dbar()?;
        let clamp = self.config.gamma_min_clamp;
        let mut image = solved.with_rule(self.config.gamma_rule, clamp);
        image.metadata = serde_json::json!({
            "config_hash": self.hash,
            "rule": self.config.gamma_rule.name(),
            "gamma_min_clamp": clamp,
        });
        image.write(self.out, "gamma")?;
        // the CSV carries the hash as a leading comment line
        let csv_path = self.out.join("gamma.csv");
        let csv = std::fs::read_to_string(&csv_path)?;
        std::fs::write(&csv_path, format!("# config_hash: {}\n{csv}", self.hash))?;

        let alternative = match self.config.gamma_rule {
            GammaRule::SquaredRealPart => GammaRule::RealPart,
            GammaRule::RealPart => GammaRule::SquaredRealPart,
        };
        let rules = [self.config.gamma_rule, alternative]
            .into_iter()
            .map(|rule| RuleMetrics {
                rule,
                metrics: compare_fields(&solved.with_rule(rule, clamp), &self.config.phantom),
            })
            .collect();
        let report = MetricsReport {
            config_hash: self.hash.clone(),
            traces: self.outcome.traces.as_deref().map(TraceSummary::of),
            scattering_conjugation_defect: self.outcome.scattering.as_ref().map(ScatteringGrid::conjugation_defect),
            rules,
        };
        io::write_json(&self.out.join("metrics.json"), &report)?;
        self.note(Stage::Recover, false);
        self.outcome.image = Some(image);
        self.outcome.metrics = Some(report);
        Ok(())
    }
}

fn write_compact_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Traces, scattering, ∂̄ solves and recovery from the map `dtn`, writing into `out`.
///
/// A selected stage whose stored output matches the current hash is loaded rather
/// than recomputed. Upstream products a selected stage needs are computed (and
/// stored) when missing.
pub fn run_reconstruct(
    config: &PipelineConfig,
    dtn: &DtNMap,
    out: &Path,
    options: &RunOptions,
) -> Result<ReconstructOutcome> {
    config.validate()?;
    ensure_dir(out)?;
    let stages = match &options.stages {
        Some(s) => s.clone(),
        None => config.stage_list()?,
    };
    let dtn = if dtn.max_mode() > config.max_mode() {
        truncate_map(dtn, config.max_mode())?
    } else {
        dtn.clone()
    };
    let mut run = Reconstruction {
        config,
        dtn: &dtn,
        out,
        hash: config.run_hash(&dtn),
        fresh: options.fresh,
        outcome: ReconstructOutcome::default(),
        dual: None,
        solved: None,
    };
    for stage in stages {
        match stage {
            Stage::Traces => {
                run.traces()?;
            }
            Stage::Scattering => {
                run.dual()?;
            }
            Stage::Dbar => {
                run.outcome.image = Some(run.dbar()?);
            }
            Stage::Recover => run.recover()?,
        }
    }
    Ok(run.outcome)
}

fn truncate_map(map: &DtNMap, max_mode: usize) -> Result<DtNMap> {
    let m = max_mode as i64;
    let matrix = (-m..=m)
        .flat_map(|a| (-m..=m).map(move |b| (a, b)))
        .map(|(a, b)| map.entry(a, b))
        .collect();
    let out = DtNMap::new(map.geometry().clone(), max_mode, matrix)?;
    Ok(match map.config_hash() {
        Some(h) => out.with_config_hash(h),
        None => out,
    })
}

/// Forward synthesis followed by all reconstruction stages.
pub fn run_all(config: &PipelineConfig, out: &Path, options: &RunOptions) -> Result<ReconstructOutcome> {
    let (map, _) = run_forward(config, out)?;
    run_reconstruct(config, &map, out, options)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtensionComparison {
    pub method: ExtensionMethod,
    /// Largest entry difference over modes `|n| ≤ 16` (or all modes if fewer).
    pub max_entry_diff: f64,
    pub condition: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtendReport {
    pub config_hash: String,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub method: ExtensionMethod,
    pub condition: f64,
    pub comparison: Option<ExtensionComparison>,
    pub invariants: DtNInvariants,
}

/// Extends `dtn` to the configured outer radius and writes `dtn_extended.json`
/// and `extend_report.json`.
pub fn run_extend(config: &PipelineConfig, dtn: &DtNMap, out: &Path) -> Result<(DtNMap, ExtendReport)> {
    config.validate()?;
    let ext = &config.extension;
    if !(ext.outer_radius > dtn.radius()) {
        return Err(Error::Parameter(format!(
            "outer radius {} must exceed the inner radius {}",
            ext.outer_radius,
            dtn.radius()
        )));
    }
    ensure_dir(out)?;
    let hash = config.run_hash(dtn);
    let outer = BoundaryGeometry::disk(dtn.geometry().n_nodes(), ext.outer_radius)?;
    let tag = |e: Error| e.in_stage("extend");
    let primary = extend_dtn(dtn, &ext.annulus, &outer, ext.method).map_err(tag)?;
    let comparison = match ext.compare_with {
        Some(method) => {
            let other = extend_dtn(dtn, &ext.annulus, &outer, method).map_err(tag)?;
            Some(ExtensionComparison {
                method,
                max_entry_diff: primary.map.max_entry_diff(&other.map, dtn.max_mode().min(16)),
                condition: other.condition,
            })
        }
        None => None,
    };
    let map = primary.map.with_config_hash(hash.clone());
    let report = ExtendReport {
        config_hash: hash,
        inner_radius: dtn.radius(),
        outer_radius: ext.outer_radius,
        method: ext.method,
        condition: primary.condition,
        comparison,
        invariants: map.invariants(),
    };
    io::write_json(&out.join(EXTENDED_DTN_FILE), &map)?;
    io::write_json(&out.join("extend_report.json"), &report)?;
    Ok((map, report))
}

/// One verified property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub rule: GammaRule,
    pub metrics: FieldMetrics,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Arbitration {
    pub verdicts: Vec<RuleVerdict>,
    pub passing_rules: Vec<GammaRule>,
    pub exactly_one: bool,
}

impl Arbitration {
    /// Judges both rules against the end-to-end tolerances.
    pub fn judge(image: &ReconImage, truth: &ConductivityField, clamp: f64) -> Self {
        let verdicts: Vec<RuleVerdict> = [GammaRule::SquaredRealPart, GammaRule::RealPart]
            .into_iter()
            .map(|rule| {
                let metrics = compare_fields(&image.with_rule(rule, clamp), truth);
                let passed = metrics.failed_nodes == 0
                    && metrics.relative_l2 <= RECON_L2_TOL
                    && metrics.ring_asymmetry <= RECON_SYMMETRY_TOL
                    && metrics.max_imag_over_gamma <= RECON_IMAG_TOL;
                RuleVerdict { rule, metrics, passed }
            })
            .collect();
        let passing_rules: Vec<GammaRule> = verdicts.iter().filter(|v| v.passed).map(|v| v.rule).collect();
        Self {
            exactly_one: passing_rules.len() == 1,
            passing_rules,
            verdicts,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub checks: Vec<Check>,
    pub arbitration: Option<Arbitration>,
    pub all_passed: bool,
}

/// `k` values on three rings of radius up to 3, 20 in total.
pub fn sample_k_set() -> Vec<Complex64> {
    let mut ks = Vec::with_capacity(20);
    for (ring, count) in [(1.0, 6), (2.0, 7), (3.0, 7)] {
        for j in 0..count {
            let theta = 2.0 * std::f64::consts::PI * (j as f64 + 0.3) / count as f64;
            ks.push(Complex64::from_polar(ring, theta));
        }
    }
    ks
}

/// Runs the invariant suites for the configured geometry, the full pipeline on the
/// configured phantom and the rule arbitration. Writes `verify.json` into `out`.
pub fn verify(config: &PipelineConfig, out: &Path, options: &RunOptions) -> Result<VerifyReport> {
    config.validate()?;
    ensure_dir(out)?;
    let geom = config.geometry()?;
    let max_mode = config.max_mode();
    let mut checks = Vec::new();

    let unit = dtn_unit(&geom, max_mode)?;
    let inv = unit.invariants();
    checks.push(Check::at_most("unit map symmetry", inv.asymmetry, 1e-12));

    let unit_solver = TraceSolver::new(&unit, config.regularization)?;
    let ks = sample_k_set();
    let unit_traces: Vec<CgoTrace> = ks.par_iter().map(|&k| unit_solver.solve(k)).collect::<Result<_>>()?;
    let trace_error = unit_traces
        .iter()
        .map(|t| {
            let plane = geom.sample(|z| (Complex64::i() * z * t.k).exp());
            t.psi11.max_abs_diff(&plane).max(t.psi21.sup_norm()) / plane.sup_norm()
        })
        .fold(0.0, f64::max);
    checks.push(Check::at_most("unit traces equal plane waves", trace_error, 1e-6));
    let plemelj = unit_traces
        .iter()
        .map(|t| plemelj_defect(&geom, t, 0.02))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::at_most("Plemelj exterior limit", plemelj, 1e-3));

    let zero = ScatteringGrid::zeros(config.k_grid()?);
    let dbar = DbarSolver::new(&zero, config.solver)?;
    let zero_defect = [Complex64::new(0.3, -0.2), Complex64::new(-0.5, 0.1)]
        .iter()
        .map(|&z| dbar.solve(z).map(|s| s.field.values.iter().map(|v| (v - 1.0).norm()).fold(0.0, f64::max)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::at_most("zero scattering gives m = 1", zero_defect, 0.0));

    let (map, _) = run_forward(config, out)?;
    let inv = map.invariants();
    checks.push(Check::at_most("forward map symmetry", inv.asymmetry, 1e-8));
    checks.push(Check::at_most(
        "forward map positivity (negated smallest form eigenvalue)",
        -inv.min_form_eigenvalue,
        1e-8,
    ));

    let solver = TraceSolver::new(&map, config.regularization)?;
    let symmetry = ks
        .par_iter()
        .map(|&k| -> Result<f64> {
            let at_conj = solver.solve(k.conj())?;
            let (off, diag) = solver.solve_second_column(k)?;
            let diff = second_column_trace(&at_conj)
                .max_abs_diff(&off)
                .max(second_column_diagonal(&at_conj).max_abs_diff(&diag));
            Ok(diff / diag.sup_norm())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check::at_most("second column symmetry", symmetry, 1e-6));

    let outcome = run_reconstruct(config, &map, out, options)?;
    let mut arbitration = None;
    if let Some(s) = &outcome.scattering {
        let dual = dual_scattering(s)?;
        let back = dual_scattering(&dual)?;
        let involution = s
            .s12
            .iter()
            .zip(&back.s12)
            .chain(s.s21.iter().zip(&back.s21))
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        checks.push(Check::at_most("dual map involution", involution, 0.0));
        checks.push(Check::at_most("scattering conjugation symmetry", s.conjugation_defect(), 1e-6));
    }
    if let Some(image) = &outcome.image {
        let a = Arbitration::judge(image, &config.phantom, config.gamma_min_clamp);
        for v in &a.verdicts {
            log::info!(
                "rule {}: relative L2 {:.4}, ring asymmetry {:.2e}, imaginary/γ {:.2e}, {}",
                v.rule.name(),
                v.metrics.relative_l2,
                v.metrics.ring_asymmetry,
                v.metrics.max_imag_over_gamma,
                if v.passed { "passes" } else { "fails" }
            );
        }
        arbitration = Some(a);
    }
    let all_passed =
        checks.iter().all(|c| c.passed) && arbitration.as_ref().is_none_or(|a| config.phantom.is_unit() || a.exactly_one);
    let report = VerifyReport {
        config_hash: config.hash(),
        checks,
        arbitration,
        all_passed,
    };
    io::write_json(&out.join("verify.json"), &report)?;
    Ok(report)
}
