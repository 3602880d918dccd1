//! Non-sequential Monte Carlo loop over load levels with trial DER
//! placement, penalisation of invalidated sites and multiplier statistics.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::load::LoadModel;
use crate::net::{scale_loads, BusId, NetworkCase};
use crate::opf::{solve_opf, ConstraintId, OpfError, OpfOptions, OpfSolution};
use crate::placement::{apply_der, DerSpec, DerUnit, PlacementError};

#[derive(Debug, Error)]
pub enum McsError {
    #[error("invalid MCS configuration: {0}")]
    InvalidConfig(String),
    #[error("load level {level} is not solvable: {source}")]
    Preflight { level: f64, source: OpfError },
    #[error("{failed} of {total} samples failed (limit {limit:.1}%)")]
    TooManyFailures { failed: usize, total: usize, limit: f64 },
    #[error("no remaining candidate can host a {size} MW unit")]
    NoHostingBus { size: f64 },
    #[error("sigma needs at least 2 samples per bus")]
    InsufficientSamples,
    #[error("pre and post solutions do not belong to the same case")]
    MismatchedCases,
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error("writing export: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// A penalized bus stores 0 for the sample.
    Zero,
    /// A penalized bus stores its post-placement multiplier.
    PostValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaForm {
    /// Coefficient of variation of the sample mean, `√(Var/n) / E`.
    Estimator,
    /// Coefficient of variation of the raw samples, `√Var / E`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredMultipliers {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McsConfig {
    pub sigma_threshold: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    pub rng_seed: u64,
    pub penalty_mode: PenaltyMode,
    /// $/MWh
    pub lambda_floor: f64,
    pub sigma_form: SigmaForm,
    pub store: StoredMultipliers,
    pub penalize: bool,
    /// Re-solve after the trial placement. Off only on the baseline path.
    pub resolve: bool,
    /// Relative closeness to the system's minimum price for a placed bus to
    /// count as collapsed.
    pub price_tol: f64,
    /// Fraction of failed samples above which the run aborts.
    pub max_failure_fraction: f64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub opf: OpfOptions,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            sigma_threshold: 0.01,
            min_samples: 100,
            max_samples: 20_000,
            rng_seed: 42,
            penalty_mode: PenaltyMode::Zero,
            lambda_floor: 0.01,
            sigma_form: SigmaForm::Estimator,
            store: StoredMultipliers::Post,
            penalize: true,
            resolve: true,
            price_tol: 0.01,
            max_failure_fraction: 0.01,
            workers: 0,
            opf: OpfOptions::default(),
        }
    }
}

impl McsConfig {
    pub fn validate(&self) -> Result<(), McsError> {
        let bad = |m: &str| Err(McsError::InvalidConfig(m.into()));
        if !(self.sigma_threshold > 0.0 && self.sigma_threshold < 1.0) {
            return bad("sigma_threshold must lie in (0, 1)");
        }
        if self.min_samples < 2 {
            return bad("min_samples must be at least 2");
        }
        if self.max_samples < self.min_samples {
            return bad("max_samples must be at least min_samples");
        }
        if !(self.lambda_floor.is_finite() && self.lambda_floor > 0.0) {
            return bad("lambda_floor must be positive");
        }
        if !(self.price_tol.is_finite() && self.price_tol >= 0.0) {
            return bad("price_tol must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1)");
        }
        if self.penalize && !self.resolve {
            return bad("penalization needs the post-placement re-solve");
        }
        if self.store == StoredMultipliers::Post && !self.resolve {
            return bad("post-placement storage needs the re-solve");
        }
        Ok(())
    }

    /// The restriction used for the baseline: no penalization, pre-placement
    /// values stored, no re-solve.
    pub fn baseline(&self) -> Self {
        Self {
            penalize: false,
            store: StoredMultipliers::Pre,
            resolve: false,
            ..*self
        }
    }
}

/// Streaming per-bus moments (Welford) of the stored multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierStats {
    pub bus_ids: Vec<BusId>,
    pub count: Vec<u64>,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub penalties: Vec<u64>,
}

impl MultiplierStats {
    pub fn new(bus_ids: Vec<BusId>) -> Self {
        let n = bus_ids.len();
        Self {
            bus_ids,
            count: vec![0; n],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            penalties: vec![0; n],
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.mean.len());
        for (k, &x) in values.iter().enumerate() {
            self.count[k] += 1;
            let d = x - self.mean[k];
            self.mean[k] += d / self.count[k] as f64;
            self.m2[k] += d * (x - self.mean[k]);
        }
    }

    pub fn record_penalty(&mut self, bus: BusId) {
        if let Some(k) = self.bus_ids.iter().position(|b| *b == bus) {
            self.penalties[k] += 1;
        }
    }

    /// Sample variance (n − 1 normalisation); `None` below two samples.
    pub fn variance(&self, k: usize) -> Option<f64> {
        (self.count[k] >= 2).then(|| self.m2[k] / (self.count[k] - 1) as f64)
    }

    pub fn mean_of(&self, bus: BusId) -> Option<f64> {
        self.bus_ids.iter().position(|b| *b == bus).map(|k| self.mean[k])
    }

    pub fn samples(&self) -> u64 {
        self.count.iter().copied().min().unwrap_or(0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), McsError> {
        let err = |e: csv::Error| McsError::Export(e.to_string());
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bus", "mean", "variance", "count", "penalties"])
            .map_err(err)?;
        for k in 0..self.bus_ids.len() {
            wtr.write_record([
                self.bus_ids[k].to_string(),
                self.mean[k].to_string(),
                self.variance(k).map_or(String::new(), |v| v.to_string()),
                self.count[k].to_string(),
                self.penalties[k].to_string(),
            ])
            .map_err(err)?;
        }
        wtr.flush().map_err(|e| McsError::Export(e.to_string()))
    }
}

/// Stopping statistic: the largest per-bus coefficient of variation.
pub fn sigma(stats: &MultiplierStats, form: SigmaForm, lambda_floor: f64) -> Result<f64, McsError> {
    let mut worst: f64 = 0.0;
    for k in 0..stats.bus_ids.len() {
        let var = stats.variance(k).ok_or(McsError::InsufficientSamples)?;
        let spread = match form {
            SigmaForm::Estimator => (var.max(0.0) / stats.count[k] as f64).sqrt(),
            SigmaForm::Raw => var.max(0.0).sqrt(),
        };
        worst = worst.max(spread / stats.mean[k].abs().max(lambda_floor));
    }
    Ok(worst)
}

/// Placed buses whose multiplier lost its meaning: some constraint binding
/// before placement is no longer binding, and the bus price fell to within
/// `price_tol` (relative) of the lowest post-placement price in the system.
pub fn detect_inactive(
    pre: &OpfSolution,
    post: &OpfSolution,
    bus_ids: &[BusId],
    placed: &[BusId],
    price_tol: f64,
) -> Result<BTreeSet<BusId>, McsError> {
    let n = bus_ids.len();
    if pre.lambda_p.len() != n || post.lambda_p.len() != n {
        return Err(McsError::MismatchedCases);
    }
    pre.require_converged()?;
    post.require_converged()?;
    let mut out = BTreeSet::new();
    if pre.binding_set.is_subset(&post.binding_set) {
        return Ok(out);
    }
    let floor = post.lambda_p.iter().copied().fold(f64::INFINITY, f64::min);
    for bus in placed {
        let k = bus_ids
            .iter()
            .position(|b| b == bus)
            .ok_or(McsError::MismatchedCases)?;
        if post.lambda_p[k] - floor <= price_tol * floor.abs() + 1e-9 {
            out.insert(*bus);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedUnit {
    pub bus: BusId,
    #[serde(flatten)]
    pub unit: DerUnit,
}

/// Everything computed for one load level. Samples drawing the same level
/// share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub lambda_pre: Vec<f64>,
    pub lambda_post: Option<Vec<f64>>,
    pub placement: Vec<PlacedUnit>,
    /// Ranked buses passed over because their unit made the post OPF infeasible.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<BusId>,
    pub penalized: Vec<BusId>,
    pub binding_pre: Vec<ConstraintId>,
    pub binding_post: Option<Vec<ConstraintId>>,
    /// Values accumulated into the statistics, one per bus.
    pub stored: Vec<f64>,
    /// Set when the level could not be solved; the sample is not stored.
    pub failure: Option<String>,
}

impl LevelOutcome {
    fn failed(msg: String) -> Self {
        Self {
            lambda_pre: Vec::new(),
            lambda_post: None,
            placement: Vec::new(),
            skipped: Vec::new(),
            penalized: Vec::new(),
            binding_pre: Vec::new(),
            binding_post: None,
            stored: Vec::new(),
            failure: Some(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub level_index: usize,
    pub load_factor: f64,
    #[serde(flatten)]
    pub outcome: Arc<LevelOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsResult {
    pub stats: MultiplierStats,
    pub trace: Vec<SampleRecord>,
    pub sigma: f64,
    pub converged: bool,
    pub samples: usize,
    pub failures: usize,
    pub levels_evaluated: usize,
}

impl McsResult {
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<(), McsError> {
        let err = |e: std::io::Error| McsError::Export(e.to_string());
        for rec in &self.trace {
            serde_json::to_writer(&mut w, rec).map_err(|e| McsError::Export(e.to_string()))?;
            w.write_all(b"\n").map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

/// Prices this close (relative) count as equal when ranking; interior-point
/// multipliers are only accurate to about the solver tolerance.
pub const RANK_TIE_TOL: f64 = 1e-6;

/// Buses ranked by price, highest first; ties go to the lower bus id.
///
/// Sorted by price, then split into runs whose members lie within
/// [`RANK_TIE_TOL`] of the run's highest price; each run is ordered by id.
pub fn rank_buses(bus_ids: &[BusId], lambda: &[f64], candidates: &[BusId]) -> Vec<BusId> {
    let mut ranked: Vec<(BusId, f64)> = candidates
        .iter()
        .filter_map(|b| bus_ids.iter().position(|x| x == b).map(|k| (*b, lambda[k])))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(ranked.len());
    let mut start = 0;
    while start < ranked.len() {
        let top = ranked[start].1;
        let mut end = start + 1;
        while end < ranked.len() && top - ranked[end].1 <= RANK_TIE_TOL * top.abs() {
            end += 1;
        }
        let mut run: Vec<BusId> = ranked[start..end].iter().map(|r| r.0).collect();
        run.sort_unstable();
        out.extend(run);
        start = end;
    }
    out
}

struct Trial<'a> {
    case: &'a NetworkCase,
    bus_ids: Vec<BusId>,
    units: &'a [DerUnit],
    candidates: Vec<BusId>,
    config: McsConfig,
}

impl Trial<'_> {
    fn evaluate(&self, level: f64) -> LevelOutcome {
        match self.try_evaluate(level) {
            Ok(o) => o,
            Err(e) => LevelOutcome::failed(e.to_string()),
        }
    }

    fn try_evaluate(&self, level: f64) -> Result<LevelOutcome, McsError> {
        let cfg = &self.config;
        let scaled = scale_loads(self.case, level).map_err(OpfError::from)?;
        let pre = solve_opf(&scaled, &cfg.opf)?;
        pre.require_converged()?;
        let ranked = rank_buses(&self.bus_ids, &pre.lambda_p, &self.candidates);
        let mut placement: Vec<PlacedUnit> = self
            .units
            .iter()
            .zip(&ranked)
            .map(|(u, b)| PlacedUnit { bus: *b, unit: *u })
            .collect();

        let mut skipped = Vec::new();
        let mut post = None;
        if cfg.resolve {
            let mut placed = scaled.clone();
            for p in &placement {
                placed = apply_der(&placed, p.bus, &p.unit)?;
            }
            let s = solve_opf(&placed, &cfg.opf)?;
            post = Some(if s.is_converged() {
                s
            } else {
                let (s, p, k) = self.place_greedy(&scaled, &ranked)?;
                placement = p;
                skipped = k;
                s
            });
        }

        let mut penalized = BTreeSet::new();
        if cfg.penalize {
            let placed: Vec<BusId> = placement.iter().map(|p| p.bus).collect();
            let post = post.as_ref().expect("validated: penalize implies resolve");
            penalized = detect_inactive(&pre, post, &self.bus_ids, &placed, cfg.price_tol)?;
        }

        let mut stored = match cfg.store {
            StoredMultipliers::Pre => pre.lambda_p.clone(),
            StoredMultipliers::Post => post.as_ref().expect("validated").lambda_p.clone(),
        };
        for bus in &penalized {
            let k = self.bus_ids.iter().position(|b| b == bus).unwrap();
            stored[k] = match cfg.penalty_mode {
                PenaltyMode::Zero => 0.0,
                PenaltyMode::PostValue => post.as_ref().unwrap().lambda_p[k],
            };
        }
        Ok(LevelOutcome {
            lambda_pre: pre.lambda_p,
            lambda_post: post.as_ref().map(|s| s.lambda_p.clone()),
            placement,
            skipped,
            penalized: penalized.into_iter().collect(),
            binding_pre: pre.binding_set.into_iter().collect(),
            binding_post: post.map(|s| s.binding_set.into_iter().collect()),
            stored,
            failure: None,
        })
    }
}

impl Trial<'_> {
    /// Places units one at a time in rank order, passing over any bus whose
    /// unit leaves the post OPF without a solution (a hosting limit).
    fn place_greedy(
        &self,
        scaled: &NetworkCase,
        ranked: &[BusId],
    ) -> Result<(OpfSolution, Vec<PlacedUnit>, Vec<BusId>), McsError> {
        let mut placed = scaled.clone();
        let mut placement = Vec::new();
        let mut skipped = Vec::new();
        let mut last = None;
        let mut next = ranked.iter();
        for unit in self.units {
            loop {
                let Some(&bus) = next.next() else {
                    return Err(McsError::NoHostingBus { size: unit.p_size });
                };
                let trial = apply_der(&placed, bus, unit)?;
                let s = solve_opf(&trial, &self.config.opf)?;
                if s.is_converged() {
                    placed = trial;
                    placement.push(PlacedUnit { bus, unit: *unit });
                    last = Some(s);
                    break;
                }
                skipped.push(bus);
            }
        }
        let s = last.expect("spec has at least one unit");
        Ok((s, placement, skipped))
    }
}

const BATCH: usize = 64;

/// Runs the sampling loop until the stopping rule holds or `max_samples`
/// samples have been drawn.
///
/// Each sample's outcome is a pure function of its load level, so levels are
/// evaluated once (in parallel) and samples are merged strictly in draw
/// order. The result does not depend on the number of workers.
pub fn run_mcs(
    case: &NetworkCase,
    model: &LoadModel,
    spec: &DerSpec,
    config: &McsConfig,
) -> Result<McsResult, McsError> {
    let config = if spec.baseline { config.baseline() } else { *config };
    config.validate()?;
    spec.validate()?;
    let candidates = spec.resolve_candidates(case)?;
    let trial = Trial {
        case,
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        units: &spec.units,
        candidates,
        config,
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.workers > 0 {
        builder = builder.num_threads(config.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| McsError::InvalidConfig(format!("thread pool: {e}")))?;

    let mut cache: HashMap<usize, Arc<LevelOutcome>> = HashMap::new();
    let evaluate = |indices: Vec<usize>, cache: &mut HashMap<usize, Arc<LevelOutcome>>| {
        let fresh: Vec<(usize, LevelOutcome)> = pool.install(|| {
            indices
                .par_iter()
                .map(|&i| (i, trial.evaluate(model.levels[i])))
                .collect()
        });
        for (i, o) in fresh {
            cache.insert(i, Arc::new(o));
        }
    };

    // pre-flight at the extreme levels
    let extremes: Vec<usize> = if model.len() > 1 {
        vec![0, model.len() - 1]
    } else {
        vec![0]
    };
    evaluate(extremes.clone(), &mut cache);
    for i in extremes {
        if let Some(msg) = &cache[&i].failure {
            let level = model.levels[i];
            let scaled = scale_loads(case, level).map_err(OpfError::from)?;
            let source = match solve_opf(&scaled, &config.opf)?.require_converged() {
                Err(e) => e,
                Ok(_) => OpfError::InvalidArgument(msg.clone()),
            };
            return Err(McsError::Preflight { level, source });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut stats = MultiplierStats::new(trial.bus_ids.clone());
    let mut trace = Vec::new();
    let mut failures = 0usize;
    let mut current_sigma = f64::INFINITY;
    let mut converged = false;

    'outer: while trace.len() < config.max_samples {
        let n = BATCH.min(config.max_samples - trace.len());
        let draws: Vec<usize> = (0..n).map(|_| model.sample_index(rng.gen::<f64>())).collect();
        let missing: BTreeSet<usize> = draws.iter().copied().filter(|i| !cache.contains_key(i)).collect();
        evaluate(missing.into_iter().collect(), &mut cache);

        for level_index in draws {
            let outcome = Arc::clone(&cache[&level_index]);
            if outcome.failure.is_some() {
                failures += 1;
            } else {
                stats.push(&outcome.stored);
                for bus in &outcome.penalized {
                    stats.record_penalty(*bus);
                }
            }
            trace.push(SampleRecord {
                index: trace.len(),
                level_index,
                load_factor: model.levels[level_index],
                outcome,
            });
            if trace.len() >= config.min_samples {
                check_failures(failures, trace.len(), config.max_failure_fraction)?;
                if stats.samples() >= 2 {
                    current_sigma = sigma(&stats, config.sigma_form, config.lambda_floor)?;
                    if current_sigma < config.sigma_threshold {
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    check_failures(failures, trace.len(), config.max_failure_fraction)?;
    Ok(McsResult {
        samples: trace.len(),
        stats,
        trace,
        sigma: current_sigma,
        converged,
        failures,
        levels_evaluated: cache.len(),
    })
}

fn check_failures(failed: usize, total: usize, limit: f64) -> Result<(), McsError> {
    if failed as f64 > limit * total as f64 {
        return Err(McsError::TooManyFailures {
            failed,
            total,
            limit: 100.0 * limit,
        });
    }
    Ok(())
}
