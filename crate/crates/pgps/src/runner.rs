//! Executes curriculum plans on the toy network and accounts for what they
//! cost.

use std::time::Instant;

use pgps_core::curriculum::{CurriculumPlan, Scheme};
use pgps_core::sampler::PatchSource;
use pgps_core::stats::{paired_one_sided_ttest, TTestResult};
use pgps_core::toynet::{dice_score, train_step, InputBatch, NetConfig, OptimState, ToyNet};
use pgps_core::volume::synth_blobs;
use pgps_core::{CostModel, CounterRng, LabelVolume, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pgps_core::cost::extrapolate_cps_runtime;

use crate::error::{Error, Result};
use crate::presets::Preset;
use crate::report::{ConfigSnapshot, DatasetSummary, EpochRecord, Totals, TrainReport, REPORT_VERSION};

const SAMPLING_STREAM: u64 = 1;
const STAGE_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

impl Case {
    pub fn new(name: impl Into<String>, image: Volume, labels: LabelVolume) -> Result<Self> {
        if image.shape() != labels.shape() {
            return Err(pgps_core::sampler::SamplerError::ShapeMismatch {
                image: image.shape(),
                labels: labels.shape(),
            }
            .into());
        }
        Ok(Self { name: name.into(), image, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub shape: [usize; 3],
    pub train_cases: usize,
    pub val_cases: usize,
    pub blobs: usize,
    pub radius: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { shape: [64; 3], train_cases: 2, val_cases: 1, blobs: 5, radius: (4, 10), seed: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: String,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
}

impl Dataset {
    /// Both splits must be non-empty.
    pub fn new(source: impl Into<String>, train: Vec<Case>, val: Vec<Case>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { source: source.into(), train, val })
    }

    /// Blob volumes; case `i` (training first) uses seed `cfg.seed + i`.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        let mut cases = Vec::with_capacity(cfg.train_cases + cfg.val_cases);
        for i in 0..cfg.train_cases + cfg.val_cases {
            let (image, labels) = synth_blobs(cfg.shape, cfg.blobs, cfg.radius, cfg.seed + i as u64)?;
            cases.push(Case::new(format!("synthetic_{i:03}"), image, labels)?);
        }
        let val = cases.split_off(cfg.train_cases.min(cases.len()));
        let [w, h, d] = cfg.shape;
        Self::new(format!("synthetic {w}x{h}x{d}, {} blobs, seed {}", cfg.blobs, cfg.seed), cases, val)
    }

    pub fn n_classes(&self) -> usize {
        self.train.iter().chain(&self.val).map(|c| usize::from(c.labels.n_classes())).max().unwrap_or(2)
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            source: self.source.clone(),
            train_cases: self.train.len(),
            val_cases: self.val.len(),
            shapes: self.train.iter().chain(&self.val).map(|c| c.image.shape()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: String,
    pub net: NetConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Validate after every `validate_every`-th epoch and after the last.
    pub validate_every: u32,
    pub cost: CostModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: crate::presets::TOY_LUNG.into(),
            net: NetConfig::default(),
            learning_rate: 0.05,
            momentum: 0.9,
            validate_every: 1,
            cost: CostModel::default(),
        }
    }
}

/// Stage indices RPSS visits, one per iteration.
pub fn rpss_stage_draws(seed: u64, n_stages: usize, iterations: u64) -> Vec<usize> {
    let mut rng = CounterRng::new(seed).substream(STAGE_STREAM);
    (0..iterations).map(|_| rng.below(n_stages as u64) as usize).collect()
}

pub fn run_experiment(plan: &CurriculumPlan, dataset: &Dataset, cfg: &RunConfig, seed: u64) -> Result<TrainReport> {
    run_experiment_with_net(plan, dataset, cfg, seed).map(|(r, _)| r)
}

/// Trains a fresh network on `plan`. Configuration errors are returned as
/// `Err`; a numeric failure mid-run yields a partial report with
/// `valid == false`.
pub fn run_experiment_with_net(
    plan: &CurriculumPlan,
    dataset: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(TrainReport, ToyNet<f32>)> {
    plan.validate()?;
    cfg.cost.validate()?;
    if cfg.validate_every == 0 {
        return Err(Error::config("validate_every", "must be positive"));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net_cfg = NetConfig { n_classes: dataset.n_classes(), init_seed: seed, ..cfg.net };
    let mut net = ToyNet::<f32>::new(&net_cfg)?;
    let mut optim = OptimState::<f32>::new(cfg.learning_rate, cfg.momentum, net.param_count())?;
    let sources = dataset
        .train
        .iter()
        .map(|c| PatchSource::new(&c.image, &c.labels))
        .collect::<Result<Vec<_>, _>>()?;

    let root = CounterRng::new(seed);
    let mut sampling = root.substream(SAMPLING_STREAM);
    let mut stage_rng = root.substream(STAGE_STREAM);
    let total = plan.total_epochs;
    let iters = plan.iterations_per_epoch;
    let rpss = plan.scheme == Scheme::Rpss;

    let mut epochs = Vec::with_capacity(total as usize);
    let mut totals = Totals {
        iterations: 0,
        voxels_shown: 0,
        voxels_shown_fraction: None,
        wallclock_seconds: 0.0,
        validation_seconds: 0.0,
        estimated_co2_grams: 0.0,
        modelled_runtime_seconds: 0.0,
        modelled_co2_grams: 0.0,
    };
    let mut error = None;
    let mut final_case_dice = Vec::new();

    'epochs: for epoch in 0..total {
        let fixed = (!rpss).then(|| plan.stage_for_epoch(epoch));
        let start = Instant::now();
        let (mut loss, mut sd, mut ce, mut voxels) = (0.0, 0.0, 0.0, 0u64);
        for _ in 0..iters {
            let (patch, batch) = match fixed {
                Some(k) => (plan.stages[k].patch, plan.stages[k].batch),
                None => {
                    let k = stage_rng.below(plan.stages.len() as u64) as usize;
                    (plan.stages[k].patch, plan.default_batch)
                }
            };
            let case = &sources[sampling.below(sources.len() as u64) as usize];
            let patches = case.compose_batch(patch, batch as usize, &mut sampling)?;
            let input = InputBatch::<f32>::from_patches(&patches)?;
            let parts = match train_step(&mut net, &mut optim, &input, epoch, total) {
                Ok(p) => p,
                Err(e) => {
                    error = Some(format!("epoch {epoch}: {e}"));
                    totals.wallclock_seconds += start.elapsed().as_secs_f64();
                    break 'epochs;
                }
            };
            let v = u64::from(batch) * patch.voxel_count();
            voxels += v;
            totals.voxels_shown += v;
            totals.iterations += 1;
            loss += f64::from(parts.total);
            sd += f64::from(parts.soft_dice);
            ce += f64::from(parts.cross_entropy);
        }
        let seconds = start.elapsed().as_secs_f64();
        totals.wallclock_seconds += seconds;

        let val_dice = if (epoch + 1) % cfg.validate_every == 0 || epoch + 1 == total {
            let t = Instant::now();
            let scores = validate(&net, dataset, plan)?;
            totals.validation_seconds += t.elapsed().as_secs_f64();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            final_case_dice = scores;
            Some(mean)
        } else {
            None
        };
        let n = f64::from(iters.max(1));
        epochs.push(EpochRecord {
            epoch,
            stage_index: fixed,
            patch: fixed.map(|k| plan.stages[k].patch),
            batch: fixed.map(|k| plan.stages[k].batch),
            iterations: iters,
            loss: loss / n,
            soft_dice: sd / n,
            cross_entropy: ce / n,
            val_dice,
            voxels,
            wallclock_seconds: seconds,
        });
    }

    let baseline = u128::from(plan.default_batch)
        * u128::from(plan.max_patch().voxel_count())
        * u128::from(plan.total_iterations());
    let shown = u128::from(totals.voxels_shown);
    totals.voxels_shown_fraction = match baseline {
        0 => None,
        b if b == shown => Some(1.0),
        b => Some(shown as f64 / b as f64),
    };
    totals.estimated_co2_grams = cfg.cost.co2_grams(totals.wallclock_seconds);
    totals.modelled_runtime_seconds = cfg.cost.runtime_for_voxels(totals.voxels_shown as f64);
    totals.modelled_co2_grams = cfg.cost.co2_grams(totals.modelled_runtime_seconds);

    let final_val_dice = epochs.iter().rev().find_map(|e| e.val_dice);
    let report = TrainReport {
        version: REPORT_VERSION,
        scheme: plan.scheme,
        seed,
        valid: error.is_none(),
        error,
        config: ConfigSnapshot {
            task: cfg.task.clone(),
            plan: plan.clone(),
            net: net_cfg,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            validate_every: cfg.validate_every,
            cost: cfg.cost,
            dataset: dataset.summary(),
        },
        epochs,
        totals,
        final_case_dice: if final_val_dice.is_some() { final_case_dice } else { Vec::new() },
        final_val_dice,
    };
    Ok((report, net))
}

/// Foreground Dice per validation case, inferred at the maximal patch.
pub fn validate(net: &ToyNet<f32>, dataset: &Dataset, plan: &CurriculumPlan) -> Result<Vec<f64>> {
    dataset
        .val
        .iter()
        .map(|c| {
            let pred = net.segment_volume(&c.image, plan.max_patch())?;
            Ok(dice_score(&pred, c.labels.labels(), net.n_classes()).mean)
        })
        .collect()
}

pub fn estimate_co2(report: &TrainReport, model: &CostModel) -> f64 {
    model.co2_grams(report.totals.wallclock_seconds)
}

/// Paired one-sided test that `a` beats `b` on final validation Dice;
/// reports are paired in order.
pub fn compare_reports(a: &[TrainReport], b: &[TrainReport]) -> Result<TTestResult> {
    let dice = |rs: &[TrainReport]| -> Result<Vec<f64>> {
        rs.iter()
            .map(|r| {
                r.final_val_dice
                    .ok_or_else(|| Error::config("report", format!("seed {} has no validation Dice", r.seed)))
            })
            .collect()
    };
    Ok(paired_one_sided_ttest(&dice(a)?, &dice(b)?)?)
}

/// Worker count from `PGPS_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("PGPS_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

/// Maps `f` over `items` on a pool capped by [`thread_cap`]; results keep
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap().unwrap_or(0))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect())
}

pub fn run_seeds(plan: &CurriculumPlan, dataset: &Dataset, cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<TrainReport>> {
    parallel_map(seeds, |&s| run_experiment(plan, dataset, cfg, s)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub scheme: String,
    pub iterations_per_epoch: u32,
    pub seeds: usize,
    pub valid_runs: usize,
    pub mean_dice: Option<f64>,
    pub mean_voxels: f64,
    /// `mean_voxels` over full-budget CPS voxels.
    pub voxel_fraction: Option<f64>,
    pub mean_runtime_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<TrainReport>,
}

impl SweepOutcome {
    pub fn all_valid(&self) -> bool {
        self.reports.iter().all(|r| r.valid)
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub preset: Preset,
    pub epochs: u32,
    /// Iterations per epoch at fraction 1.
    pub iterations: u32,
    pub fractions: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
}

/// Iterations per epoch for a budget fraction; never below one.
pub fn scaled_iterations(iterations: u32, fraction: f64) -> u32 {
    ((f64::from(iterations) * fraction).round() as u32).max(1)
}

/// Reruns each scheme with a fraction of the iterations per epoch.
/// Rows are sorted by scheme, then fraction.
pub fn sweep_iteration_budgets(spec: &SweepSpec, dataset: &Dataset, cfg: &RunConfig) -> Result<SweepOutcome> {
    if spec.fractions.is_empty() {
        return Err(Error::config("sweep", "needs at least one fraction"));
    }
    if let Some(f) = spec.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config("sweep", format!("fraction {f} is outside (0, 1]")));
    }
    if spec.schemes.is_empty() {
        return Err(Error::config("schemes", "needs at least one scheme"));
    }
    if spec.seeds.is_empty() {
        return Err(Error::config("seeds", "needs at least one seed"));
    }
    let mut cells: Vec<(Scheme, f64)> =
        spec.schemes.iter().flat_map(|&s| spec.fractions.iter().map(move |&f| (s, f))).collect();
    let rank = |s: Scheme| Scheme::ALL.iter().position(|&x| x == s).unwrap();
    cells.sort_by(|a, b| rank(a.0).cmp(&rank(b.0)).then(a.1.total_cmp(&b.1)));
    cells.dedup();

    let plans = cells
        .iter()
        .map(|&(s, f)| spec.preset.plan(s, spec.epochs, scaled_iterations(spec.iterations, f)))
        .collect::<Result<Vec<_>>>()?;
    let full_cps = spec.preset.plan(Scheme::Cps, spec.epochs, spec.iterations)?.total_voxels();

    let jobs: Vec<(usize, u64)> =
        (0..cells.len()).flat_map(|c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    let reports = parallel_map(&jobs, |&(c, s)| run_experiment(&plans[c], dataset, cfg, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let rows = cells
        .iter()
        .zip(&plans)
        .zip(reports.chunks(spec.seeds.len()))
        .map(|((&(scheme, fraction), plan), runs)| {
            let n = runs.len() as f64;
            let valid: Vec<f64> = runs.iter().filter(|r| r.valid).filter_map(|r| r.final_val_dice).collect();
            let mean_voxels = runs.iter().map(|r| r.totals.voxels_shown as f64).sum::<f64>() / n;
            SweepRow {
                fraction,
                scheme: scheme.to_string(),
                iterations_per_epoch: plan.iterations_per_epoch,
                seeds: runs.len(),
                valid_runs: runs.iter().filter(|r| r.valid).count(),
                mean_dice: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
                mean_voxels,
                voxel_fraction: (full_cps > 0).then(|| mean_voxels / full_cps as f64),
                mean_runtime_seconds: runs.iter().map(|r| r.totals.wallclock_seconds).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepOutcome { rows, reports })
}
