//! Declarative study files and the batch runner behind `dersite run`.
//!
//! A study file is TOML. Paths inside it are relative to the file itself.
//! See `docs/study-config.md` for the full key list.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::load::{cluster_profile, LoadError, LoadModel, LoadProfile};
use crate::mcs::{McsConfig, McsError};
use crate::net::{load_case_json, parse_matpower_case, CaseError, NetworkCase};
use crate::placement::{
    compare_studies, run_study, Candidates, ComparisonReport, DerMode, DerSpec, DerUnit, Expectation,
    PlacementError, PlacementPlan, ReferenceSites, StudyError, StudyMode, StudyRun,
};

/// Overrides `output_dir` of every study file.
pub const OUTPUT_DIR_ENV: &str = "DERSITE_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Case { path: PathBuf, source: CaseError },
    #[error("{path}: {source}")]
    Profile { path: PathBuf, source: LoadError },
    #[error("invalid study: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{mode}: {source}")]
    Study { mode: StudyMode, source: StudyError },
    #[error(transparent)]
    Compare(StudyError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelector {
    Case1,
    Case2,
    Case3,
    Case4,
    All,
}

impl ModeSelector {
    pub fn modes(self) -> Vec<StudyMode> {
        match self {
            Self::Case1 => vec![StudyMode::Case1],
            Self::Case2 => vec![StudyMode::Case2],
            Self::Case3 => vec![StudyMode::Case3],
            Self::Case4 => vec![StudyMode::Case4],
            Self::All => StudyMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerSection {
    /// `[P MW, Q MVAr]` pairs.
    pub units: Vec<[f64; 2]>,
    #[serde(default)]
    pub candidates: Candidates,
    #[serde(default)]
    pub exclude_generator_buses: bool,
}

impl DerSection {
    /// The spec for the sizes; dispatch mode and baseline flag are set per
    /// study mode.
    pub fn spec(&self) -> Result<DerSpec, PlacementError> {
        let units = self
            .units
            .iter()
            .map(|[p, q]| DerUnit::new(*p, *q, DerMode::NonDispatchablePq))
            .collect();
        let mut spec = DerSpec::new(units, self.candidates.clone())?;
        spec.exclude_generator_buses = self.exclude_generator_buses;
        Ok(spec)
    }
}

fn default_clusters() -> usize {
    50
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Table]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// MATPOWER `.m` or canonical `.json` case.
    pub case: PathBuf,
    /// CSV with a `load_fraction` column.
    pub profile: PathBuf,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    pub mode: ModeSelector,
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    /// Sets every generator's minimum output to 0 before the study.
    #[serde(default)]
    pub relax_p_min: bool,
    pub der: DerSection,
    #[serde(default)]
    pub mcs: McsConfig,
    #[serde(default)]
    pub expect: Vec<Expectation>,
    #[serde(default)]
    pub reference: Vec<ReferenceSites>,
}

impl StudyConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string().replace('\n', " ").trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a study file, resolving its paths against the file's directory
    /// and applying the output-directory environment override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.case = dir.join(&cfg.case);
        cfg.profile = dir.join(&cfg.profile);
        cfg.output_dir = match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => dir.join(&cfg.output_dir),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clusters == 0 {
            return Err(ConfigError::Invalid("clusters must be at least 1".into()));
        }
        self.der.spec().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mcs
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Reads a case by extension: `.json` is the canonical schema, anything
/// else is parsed as a MATPOWER file.
pub fn read_case(path: &Path) -> Result<NetworkCase, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        load_case_json(&text)
    } else {
        parse_matpower_case(&text)
    };
    parsed.map_err(|source| ConfigError::Case {
        path: path.to_path_buf(),
        source,
    })
}

/// Case, load model and DER spec of a study, ready to run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub case: NetworkCase,
    pub model: LoadModel,
    pub spec: DerSpec,
}

pub fn prepare(cfg: &StudyConfig) -> Result<Prepared, ConfigError> {
    let mut case = read_case(&cfg.case)?;
    if cfg.relax_p_min {
        for g in &mut case.generators {
            g.p_min = g.p_min.min(0.0);
        }
    }
    let profile = LoadProfile::read_csv(&cfg.profile, case.total_p_demand()).map_err(|source| {
        ConfigError::Profile {
            path: cfg.profile.clone(),
            source,
        }
    })?;
    let model = cluster_profile(&profile, cfg.clusters).map_err(|source| ConfigError::Profile {
        path: cfg.profile.clone(),
        source,
    })?;
    let spec = cfg.der.spec().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(Prepared { case, model, spec })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub runs: Vec<StudyRun>,
    pub comparison: ComparisonReport,
}

impl RunOutcome {
    pub fn plans(&self) -> Vec<&PlacementPlan> {
        self.runs.iter().map(|r| &r.plan).collect()
    }
}

/// Runs every selected mode and compares the plans.
pub fn execute(cfg: &StudyConfig, prepared: &Prepared) -> Result<RunOutcome, RunError> {
    let mut runs = Vec::new();
    for mode in cfg.mode.modes() {
        let run = run_study(&prepared.case, &prepared.model, &prepared.spec, mode, &cfg.mcs)
            .map_err(|source| RunError::Study { mode, source })?;
        runs.push(run);
    }
    let plans: Vec<PlacementPlan> = runs.iter().map(|r| r.plan.clone()).collect();
    let comparison = compare_studies(&plans, &cfg.expect, &cfg.reference).map_err(RunError::Compare)?;
    Ok(RunOutcome { runs, comparison })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: &'a StudyConfig,
    pub case_name: &'a str,
    pub levels: usize,
    pub modes: Vec<StudyMode>,
    pub files: Vec<String>,
    /// Not part of any report; the only field that changes between reruns.
    pub created_unix: u64,
}

/// Writes plans, traces, statistics, the comparison and the manifest into
/// `cfg.output_dir`. Returns the written file names.
pub fn write_outputs(
    cfg: &StudyConfig,
    prepared: &Prepared,
    out: &RunOutcome,
) -> Result<Vec<String>, RunError> {
    let dir = &cfg.output_dir;
    let mut files = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<(), RunError> {
        let path = dir.join(&name);
        write_atomic(&path, &bytes).map_err(|source| RunError::Write { path, source })?;
        files.push(name);
        Ok(())
    };
    let json = cfg.formats.contains(&ReportFormat::Json);
    let table = cfg.formats.contains(&ReportFormat::Table);
    for run in &out.runs {
        let m = run.plan.mode;
        if json {
            put(format!("plan_{m}.json"), to_json(&run.plan))?;
        }
        if table {
            put(format!("plan_{m}.txt"), run.plan.to_table().into_bytes())?;
        }
        let mut trace = Vec::new();
        run.mcs.write_trace(&mut trace).map_err(mcs_write)?;
        put(format!("trace_{m}.jsonl"), trace)?;
        let mut stats = Vec::new();
        run.mcs.stats.write_csv(&mut stats).map_err(mcs_write)?;
        put(format!("stats_{m}.csv"), stats)?;
    }
    if json {
        put("comparison.json".into(), to_json(&out.comparison))?;
    }
    if table {
        put("comparison.txt".into(), out.comparison.to_text().into_bytes())?;
    }
    let mut model = Vec::new();
    prepared
        .model
        .write_csv(&mut model)
        .map_err(|e| mcs_write(McsError::Export(e.to_string())))?;
    put("load_model.csv".into(), model)?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        case_name: &prepared.case.name,
        levels: prepared.model.len(),
        modes: out.runs.iter().map(|r| r.plan.mode).collect(),
        files: files.clone(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let bytes = to_json(&manifest);
    let path = dir.join("manifest.json");
    write_atomic(&path, &bytes).map_err(|source| RunError::Write { path, source })?;
    files.push("manifest.json".into());
    Ok(files)
}

fn mcs_write(e: McsError) -> RunError {
    RunError::Write {
        path: PathBuf::from("<export>"),
        source: std::io::Error::other(e.to_string()),
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report types serialize");
    s.push(b'\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
case = "case14.m"
profile = "profile.csv"
mode = "all"
output_dir = "out"

[der]
units = [[10, 3.33], [30, 10], [20, 6.66]]
"#;

    #[test]
    fn minimal_config_defaults() {
        let c = StudyConfig::parse(MINIMAL, Path::new("x.toml")).unwrap();
        assert_eq!(c.clusters, 50);
        assert_eq!(c.mcs, McsConfig::default());
        assert_eq!(c.mode.modes().len(), 4);
        let spec = c.der.spec().unwrap();
        assert_eq!(spec.units[0].p_size, 30.0);
        assert_eq!(spec.candidates, Candidates::AllLoadBuses);
    }

    #[test]
    fn config_errors_are_reported() {
        let bad = MINIMAL.replace("mode = \"all\"", "mode = \"case7\"");
        let e = StudyConfig::parse(&bad, Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().starts_with("x.toml:"), "{e}");
        let bad = format!("{MINIMAL}\n[mcs]\nsigma_threshold = 2.0\n");
        assert!(matches!(
            StudyConfig::parse(&bad, Path::new("x.toml")),
            Err(ConfigError::Invalid(_))
        ));
        let bad = format!("{MINIMAL}\nbogus = 1\n");
        assert!(StudyConfig::parse(&bad, Path::new("x.toml")).is_err());
    }

    #[test]
    fn full_config_round_trips() {
        let text = format!(
            "{MINIMAL}\n[mcs]\nrng_seed = 7\npenalty_mode = \"post_value\"\n[mcs.opf]\nrange_tol = 0.5\n\n\
             [[expect]]\na = \"case1\"\nb = \"case2\"\nrelation = \"differ\"\n\n\
             [[reference]]\nmode = \"case1\"\nbuses = [3, 10, 9]\n"
        );
        let c = StudyConfig::parse(&text, Path::new("x.toml")).unwrap();
        assert_eq!(c.mcs.rng_seed, 7);
        assert_eq!(c.mcs.opf.range_tol, 0.5);
        assert_eq!(c.expect.len(), 1);
        assert_eq!(c.reference[0].buses, vec![3, 10, 9]);
        let again = StudyConfig::parse(&toml::to_string(&c).unwrap(), Path::new("y")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn atomic_write_replaces() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
