//! The `pgps` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgps_core::curriculum::{plan_pgps_plus_batches, voxels_shown_fraction, CurriculumPlan, Scheme, ScheduleError};
use pgps_core::sampler::{PatchRequest, PatchSource};
use pgps_core::{CostModel, CounterRng, PatchSize3D};
use serde::Serialize;
use serde_json::Value;

use crate::error::Error;
use crate::io::{self, CheckpointHeader, FixtureFile};
use crate::presets::{self, Preset};
use crate::report::TrainReport;
use crate::runner::{self, Case, Dataset, RunConfig, SweepSpec, SyntheticConfig};
use crate::verify::verify_fixtures;

#[derive(Debug, Parser)]
#[command(
    name = "pgps",
    version,
    about = "Progressive growing of patch sizes: schedules, patch sampling, toy training and reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the stage schedule for a task or architecture
    Plan(PlanArgs),
    /// Check generated schedules against the published tables
    VerifyFixtures(VerifyArgs),
    /// Extract patches from a volume and write them as volume files
    Sample(SampleArgs),
    /// Train the toy network on a schedule, or sweep iteration budgets
    Train(Box<TrainArgs>),
    /// Summarize training reports and test for a Dice improvement
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmitReport {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// JSON object of flag values; explicit flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named task preset, e.g. lung, hippocampus, toy-lung
    #[arg(long, conflicts_with = "arch")]
    pub task: Option<String>,
    /// Architecture spec JSON ({"name", "poolings_per_axis"})
    #[arg(long, value_name = "PATH", requires = "max_patch")]
    pub arch: Option<PathBuf>,
    /// Maximal patch size, WxHxD
    #[arg(long, value_name = "WxHxD", value_parser = parse_patch)]
    pub max_patch: Option<PatchSize3D>,
    /// Batch size at the maximal patch
    #[arg(long, value_name = "N")]
    pub batch: Option<u32>,
    /// Training scheme: cps, pgps, pgps+ or rpss
    #[arg(long, value_parser = parse_scheme, default_value = "pgps")]
    pub scheme: Scheme,
    /// Total training epochs
    #[arg(long, default_value_t = 1000)]
    pub epochs: u32,
    /// Iterations per epoch
    #[arg(long, default_value_t = 250)]
    pub iterations: u32,
    /// Use the backward-chained batch rule even where a task carries a
    /// published batch override
    #[arg(long)]
    pub no_override: bool,
    /// Output format
    #[arg(long, value_enum, default_value_t = Emit::Table)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// JSON object of flag values; explicit flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Fixture JSON to check instead of the embedded tables
    #[arg(long, value_name = "PATH")]
    pub fixtures: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t = EmitReport::Table)]
    pub emit: EmitReport,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// JSON object of flag values; explicit flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Image volume file
    #[arg(long, value_name = "PATH")]
    pub volume: Option<PathBuf>,
    /// Label volume file
    #[arg(long, value_name = "PATH")]
    pub labels: Option<PathBuf>,
    /// Patch size, WxHxD
    #[arg(long, value_name = "WxHxD", value_parser = parse_patch)]
    pub size: Option<PatchSize3D>,
    /// Number of patches
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub batch: u32,
    /// Centre every patch on a foreground voxel
    #[arg(long)]
    pub force_fg: bool,
    /// Sampler seed
    #[arg(long, value_name = "S", default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON object of flag values; explicit flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Train on generated blob volumes
    #[arg(long, conflicts_with_all = ["volumes", "labels"])]
    pub synthetic: bool,
    /// Training image files, comma separated
    #[arg(long, value_name = "PATHS", value_delimiter = ',')]
    pub volumes: Vec<PathBuf>,
    /// Training label files, comma separated, paired with --volumes
    #[arg(long, value_name = "PATHS", value_delimiter = ',')]
    pub labels: Vec<PathBuf>,
    /// Validation image files; defaults to the training cases
    #[arg(long, value_name = "PATHS", value_delimiter = ',')]
    pub val_volumes: Vec<PathBuf>,
    /// Validation label files, paired with --val-volumes
    #[arg(long, value_name = "PATHS", value_delimiter = ',')]
    pub val_labels: Vec<PathBuf>,
    /// Task preset whose schedule shape is trained
    #[arg(long, default_value = presets::TOY_LUNG)]
    pub task: String,
    /// Training scheme: cps, pgps, pgps+ or rpss
    #[arg(long, value_parser = parse_scheme, default_value = "pgps")]
    pub scheme: Scheme,
    /// Total training epochs
    #[arg(long, default_value_t = 26)]
    pub epochs: u32,
    /// Iterations per epoch
    #[arg(long, default_value_t = 20)]
    pub iterations: u32,
    /// Training seeds, comma separated; seeds run in parallel
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Initial learning rate (polynomial decay)
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Hidden channels of the toy network
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    /// Validate every N epochs and after the last
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub validate_every: u32,
    /// Edge length of the synthetic cube volumes
    #[arg(long, default_value_t = 64)]
    pub volume_size: usize,
    /// Synthetic training volumes
    #[arg(long, default_value_t = 2)]
    pub train_cases: usize,
    /// Synthetic validation volumes
    #[arg(long, default_value_t = 1)]
    pub val_cases: usize,
    /// Blobs per synthetic volume
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    /// Seed of the first synthetic volume
    #[arg(long, default_value_t = 1000)]
    pub data_seed: u64,
    /// Iteration-budget fractions in (0, 1], comma separated
    #[arg(long, value_name = "FRACTIONS", value_delimiter = ',')]
    pub sweep: Vec<f64>,
    /// Schemes compared by --sweep
    #[arg(long, value_parser = parse_scheme, value_delimiter = ',', default_value = "cps,rpss,pgps")]
    pub schemes: Vec<Scheme>,
    /// Device power for the CO2 estimate [default: calibrated]
    #[arg(long, value_name = "W")]
    pub power_watts: Option<f64>,
    /// Grid carbon intensity [default: calibrated]
    #[arg(long, value_name = "G_PER_KWH")]
    pub grid_intensity: Option<f64>,
    /// Runtime per voxel for modelled runtime [default: calibrated]
    #[arg(long, value_name = "S")]
    pub seconds_per_voxel: Option<f64>,
    /// Write a checkpoint of each trained network
    #[arg(long)]
    pub checkpoint: bool,
    /// Zero every timing-derived field in the written reports
    #[arg(long)]
    pub mask_wallclock: bool,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON object of flag values; explicit flags take precedence
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Report JSON files written by `train`
    #[arg(value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
    /// Reports paired in order with REPORT for a one-sided paired t-test
    /// of REPORT > AGAINST on final Dice
    #[arg(long, value_name = "PATHS", value_delimiter = ',')]
    pub against: Vec<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t = EmitReport::Table)]
    pub emit: EmitReport,
}

fn parse_patch(s: &str) -> Result<PatchSize3D, String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Vec<u32> = parts
        .iter()
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("expected WxHxD: {e}"))?;
    let dims: [u32; 3] = dims.try_into().map_err(|_| "expected three extents, WxHxD".to_string())?;
    PatchSize3D::new(dims).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    Scheme::from_cli_name(&s.to_ascii_lowercase()).ok_or_else(|| format!("unknown scheme '{s}' (cps, pgps, pgps+, rpss)"))
}

/// Failure with the exit status to report.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(field: &str, message: impl std::fmt::Display) -> Self {
        Self { code: 2, message: format!("invalid --{field}: {message}") }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { field, message } => Failure::invalid(&field.replace('_', "-"), message),
            other => Failure::runtime(other),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Runs the CLI on `args` (including the program name) and returns the
/// exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(&a, out),
        Command::VerifyFixtures(a) => cmd_verify(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Expands `--config FILE` into flags placed right after the subcommand;
/// keys already given on the command line are skipped.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            strs.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let (Some(path), Some(sub)) = (path, strs.iter().skip(1).position(|a| !a.starts_with('-'))) else {
        return Ok(argv);
    };
    let value: Value = io::read_json(Path::new(&path)).map_err(|e| Failure::invalid("config", e))?;
    let Value::Object(map) = value else {
        return Err(Failure::invalid("config", "expected a JSON object of flag values"));
    };
    let given = |flag: &str| strs.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")));
    let mut extra = Vec::new();
    for (key, v) in &map {
        let flag = format!("--{}", key.replace('_', "-"));
        if key == "config" {
            return Err(Failure::invalid("config", "a config file cannot name another config file"));
        }
        if given(&flag) {
            continue;
        }
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(Failure::invalid(&flag[2..], "config value must be a string, number, boolean or list")),
        };
        match v {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
                extra.push(format!("{flag}={joined}"));
            }
            other => extra.push(format!("{flag}={}", scalar(other)?)),
        }
    }
    let at = sub + 2;
    let mut merged = argv;
    merged.splice(at..at, extra.into_iter().map(OsString::from));
    Ok(merged)
}

fn schedule_field(e: &ScheduleError) -> &'static str {
    match e {
        ScheduleError::IllegalMaxPatch { .. } | ScheduleError::NotDivisible { .. } | ScheduleError::MinExceedsMax { .. } => {
            "max-patch"
        }
        ScheduleError::ZeroBatch { .. } => "batch",
        ScheduleError::ZeroIterations => "iterations",
        _ => "scheme",
    }
}

fn plan_failure(e: Error) -> Failure {
    match e {
        Error::Schedule(s) => Failure::invalid(schedule_field(&s), s),
        other => other.into(),
    }
}

fn resolve_task(name: &str) -> Result<Preset, Failure> {
    presets::resolve(name)
        .ok_or_else(|| Failure::invalid("task", format!("unknown task '{name}' (known: {})", presets::names().join(", "))))
}

fn print(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(|e| Failure::runtime(format!("writing output: {e}")))
}

#[derive(Debug, Serialize)]
struct PlanOutput {
    task: String,
    plan: CurriculumPlan,
    voxels_shown_fraction: Option<f64>,
    notes: Vec<String>,
}

fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> CmdResult {
    let mut preset = match (&a.task, &a.arch) {
        (Some(t), None) => resolve_task(t)?,
        (None, Some(path)) => {
            let spec = io::read_arch_spec(path).map_err(|e| Failure::invalid("arch", e))?;
            let batch = a.batch.ok_or_else(|| Failure::invalid("batch", "required with --arch"))?;
            Preset {
                name: spec.name().to_string(),
                spec,
                max_patch: a.max_patch.expect("clap requires --max-patch with --arch"),
                default_batch: batch,
                batch_override: None,
            }
        }
        _ => return Err(Failure::invalid("task", "give either --task or --arch")),
    };
    if let Some(p) = a.max_patch {
        preset.max_patch = p;
    }
    if let Some(b) = a.batch {
        preset.default_batch = b;
    }
    if a.max_patch.is_some() || a.batch.is_some() {
        preset.batch_override = None;
    }
    let mut notes = Vec::new();
    if let (Scheme::PgpsPlus, Some(published)) = (a.scheme, &preset.batch_override) {
        if a.no_override {
            notes.push(format!("batch column from the backward-chained rule; the published table uses {}", join(published)));
            preset.batch_override = None;
        } else {
            let rule = preset
                .plan(Scheme::Pgps, 0, 1)
                .map(|p| p.patches().iter().map(|p| p.voxel_count()).collect::<Vec<_>>())
                .map_err(plan_failure)?;
            let rule = plan_pgps_plus_batches(&rule, preset.default_batch).map_err(|e| plan_failure(e.into()))?;
            notes.push(format!(
                "batch column overridden with the published table; the backward-chained rule gives {}",
                join(&rule)
            ));
        }
    }
    let plan = preset.plan(a.scheme, a.epochs, a.iterations).map_err(plan_failure)?;
    let cps = preset.plan(Scheme::Cps, a.epochs, a.iterations).map_err(plan_failure)?;
    if a.scheme == Scheme::Rpss {
        notes.push(format!(
            "RPSS draws one of these stages uniformly per iteration with batch {}; epochs and voxels are expectations",
            plan.default_batch
        ));
    }
    let fraction = voxels_shown_fraction(&plan, &cps).ok();
    let shown = PlanOutput { task: preset.name.clone(), plan, voxels_shown_fraction: fraction, notes };
    let text = match a.emit {
        Emit::Json => io::to_json_string(&shown),
        Emit::Csv => plan_csv(&shown.plan),
        Emit::Table => plan_table(&shown),
    };
    print(out, &text)?;
    Ok(0)
}

fn join(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn plan_csv(plan: &CurriculumPlan) -> String {
    let mut s = String::from("stage,batch,width,height,depth,epochs,tensor_voxels\n");
    for (k, st) in plan.stages.iter().enumerate() {
        let [w, h, d] = st.patch.dims();
        let _ = writeln!(s, "{k},{},{w},{h},{d},{},{}", st.batch, st.epochs, st.tensor_voxels());
    }
    s
}

fn plan_table(p: &PlanOutput) -> String {
    let plan = &p.plan;
    let mut s = format!(
        "task {}, scheme {}, {} stage(s), {} epochs x {} iterations\n",
        p.task,
        plan.scheme,
        plan.stages.len(),
        plan.total_epochs,
        plan.iterations_per_epoch
    );
    let _ = writeln!(s, "{:>5}  {:>5}  {:<14}  {:>6}  {:>13}", "stage", "batch", "patch", "epochs", "tensor_voxels");
    for (k, st) in plan.stages.iter().enumerate() {
        let _ = writeln!(
            s,
            "{k:>5}  {:>5}  {:<14}  {:>6}  {:>13}",
            st.batch,
            st.patch.to_string(),
            st.epochs,
            st.tensor_voxels()
        );
    }
    match p.voxels_shown_fraction {
        Some(f) => {
            let _ = writeln!(s, "voxels shown vs CPS: {:.4}", f);
        }
        None => s.push_str("voxels shown vs CPS: undefined (empty baseline)\n"),
    }
    for n in &p.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CmdResult {
    let file = match &a.fixtures {
        Some(p) => FixtureFile::load(p).map_err(|e| Failure::invalid("fixtures", e))?,
        None => FixtureFile::embedded(),
    };
    let v = verify_fixtures(&file);
    let text = match a.emit {
        EmitReport::Table => v.render(),
        EmitReport::Json => io::to_json_string(&v),
    };
    print(out, &text)?;
    Ok(if v.passed() { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct PatchEntry {
    index: usize,
    origin: [i64; 3],
    forced: bool,
    foreground_voxels: usize,
    image_file: String,
    label_file: String,
}

#[derive(Debug, Serialize)]
struct SampleManifest {
    volume: String,
    labels: String,
    size: PatchSize3D,
    batch: u32,
    force_fg: bool,
    seed: u64,
    patches: Vec<PatchEntry>,
}

fn required<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| Failure::invalid(field, "is required"))
}

fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> CmdResult {
    let volume_path = required(&a.volume, "volume")?;
    let labels_path = required(&a.labels, "labels")?;
    let size = *required(&a.size, "size")?;
    let out_dir = required(&a.out_dir, "out-dir")?;
    if a.batch == 0 {
        return Err(Failure::invalid("batch", "must be positive"));
    }
    let image = io::read_volume(volume_path).map_err(|e| Failure::invalid("volume", e))?;
    let labels = io::read_labels(labels_path).map_err(|e| Failure::invalid("labels", e))?;
    let source = PatchSource::new(&image, &labels).map_err(|e| Failure::invalid("labels", e))?;
    io::create_dir(out_dir)?;
    let mut rng = CounterRng::new(a.seed);
    let req = PatchRequest { size, force_foreground: a.force_fg };
    let mut entries = Vec::with_capacity(a.batch as usize);
    for index in 0..a.batch as usize {
        let patch = source.sample(&req, &mut rng);
        let image_file = format!("patch_{index:04}.vol");
        let label_file = format!("patch_{index:04}.lab");
        io::write_volume(&out_dir.join(&image_file), &patch.image)?;
        io::write_labels(&out_dir.join(&label_file), &patch.labels)?;
        entries.push(PatchEntry {
            index,
            origin: patch.origin,
            forced: patch.forced,
            foreground_voxels: patch.labels.foreground_count(),
            image_file,
            label_file,
        });
    }
    let manifest = SampleManifest {
        volume: volume_path.display().to_string(),
        labels: labels_path.display().to_string(),
        size,
        batch: a.batch,
        force_fg: a.force_fg,
        seed: a.seed,
        patches: entries,
    };
    io::write_json(&out_dir.join("patches.json"), &manifest)?;
    let with_fg = manifest.patches.iter().filter(|p| p.foreground_voxels > 0).count();
    print(
        out,
        &format!("wrote {} patch(es) of {size} to {} ({with_fg} contain foreground)\n", a.batch, out_dir.display()),
    )?;
    Ok(0)
}

fn load_cases(volumes: &[PathBuf], labels: &[PathBuf], vflag: &str, lflag: &str) -> Result<Vec<Case>, Failure> {
    if volumes.len() != labels.len() {
        return Err(Failure::invalid(
            lflag,
            format!("{} label file(s) for {} volume(s)", labels.len(), volumes.len()),
        ));
    }
    volumes
        .iter()
        .zip(labels)
        .map(|(v, l)| {
            let image = io::read_volume(v).map_err(|e| Failure::invalid(vflag, e))?;
            let labs = io::read_labels(l).map_err(|e| Failure::invalid(lflag, e))?;
            let name = v.file_stem().map_or_else(|| v.display().to_string(), |s| s.to_string_lossy().into_owned());
            Case::new(name, image, labs).map_err(|e| Failure::invalid(lflag, e))
        })
        .collect()
}

fn train_dataset(a: &TrainArgs) -> Result<Dataset, Failure> {
    if a.synthetic {
        if a.volume_size == 0 {
            return Err(Failure::invalid("volume-size", "must be positive"));
        }
        let syn = SyntheticConfig {
            shape: [a.volume_size; 3],
            train_cases: a.train_cases,
            val_cases: a.val_cases,
            blobs: a.blobs,
            seed: a.data_seed,
            ..SyntheticConfig::default()
        };
        if syn.train_cases == 0 || syn.val_cases == 0 {
            return Err(Failure::invalid("train-cases", "synthetic data needs at least one training and one validation case"));
        }
        if 2 * syn.radius.1 + 1 > a.volume_size && syn.blobs > 0 {
            return Err(Failure::invalid("volume-size", format!("must be at least {}", 2 * syn.radius.1 + 1)));
        }
        return Dataset::synthetic(&syn).map_err(|e| Failure::invalid("synthetic", e));
    }
    if a.volumes.is_empty() {
        return Err(Failure::invalid("synthetic", "either --synthetic or --volumes with --labels is required"));
    }
    let train = load_cases(&a.volumes, &a.labels, "volumes", "labels")?;
    let val = if a.val_volumes.is_empty() && a.val_labels.is_empty() {
        train.clone()
    } else {
        load_cases(&a.val_volumes, &a.val_labels, "val-volumes", "val-labels")?
    };
    let source = format!("{} training file(s)", train.len());
    Dataset::new(source, train, val).map_err(Failure::from)
}

fn cost_model(a: &TrainArgs) -> Result<CostModel, Failure> {
    let d = CostModel::default();
    let m = CostModel {
        device_power_watts: a.power_watts.unwrap_or(d.device_power_watts),
        grid_intensity_g_per_kwh: a.grid_intensity.unwrap_or(d.grid_intensity_g_per_kwh),
        seconds_per_voxel: a.seconds_per_voxel.unwrap_or(d.seconds_per_voxel),
    };
    m.validate().map_err(|e| {
        let field = if e.0.starts_with("device") {
            "power-watts"
        } else if e.0.starts_with("grid") {
            "grid-intensity"
        } else {
            "seconds-per-voxel"
        };
        Failure::invalid(field, e)
    })?;
    Ok(m)
}

fn file_stem(s: Scheme) -> String {
    s.cli_name().replace('+', "_plus")
}

fn write_report(dir: &Path, stem: &str, r: &TrainReport, mask: bool) -> Result<(), Failure> {
    let r = if mask { r.masked() } else { r.clone() };
    io::write_json(&dir.join(format!("{stem}.json")), &r)?;
    io::write_csv(&dir.join(format!("{stem}.csv")), &r.csv_rows())?;
    Ok(())
}

fn summary_line(r: &TrainReport) -> String {
    let dice = r.final_val_dice.map_or_else(|| "n/a".into(), |d| format!("{d:.4}"));
    let frac = r.totals.voxels_shown_fraction.map_or_else(|| "n/a".into(), |f| format!("{f:.4}"));
    let status = if r.valid { String::new() } else { format!(" INVALID: {}", r.error.as_deref().unwrap_or("")) };
    format!(
        "{} seed {}: Dice {dice}, voxels {} ({frac} of CPS), runtime {:.2} s, CO2-eq {:.4} g{status}\n",
        r.scheme, r.seed, r.totals.voxels_shown, r.totals.wallclock_seconds, r.totals.estimated_co2_grams
    )
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let out_dir = required(&a.out_dir, "out-dir")?;
    let preset = resolve_task(&a.task)?;
    if a.seeds.is_empty() {
        return Err(Failure::invalid("seeds", "needs at least one seed"));
    }
    if a.iterations == 0 {
        return Err(Failure::invalid("iterations", "must be positive"));
    }
    if a.validate_every == 0 {
        return Err(Failure::invalid("validate-every", "must be positive"));
    }
    if a.hidden == 0 {
        return Err(Failure::invalid("hidden", "must be positive"));
    }
    if !(a.lr.is_finite() && a.lr >= 0.0) {
        return Err(Failure::invalid("lr", "must be a non-negative number"));
    }
    if !(0.0..1.0).contains(&a.momentum) {
        return Err(Failure::invalid("momentum", "must be in [0, 1)"));
    }
    let cfg = RunConfig {
        task: preset.name.clone(),
        net: pgps_core::toynet::NetConfig { hidden_channels: a.hidden, ..Default::default() },
        learning_rate: a.lr,
        momentum: a.momentum,
        validate_every: a.validate_every,
        cost: cost_model(a)?,
    };
    let dataset = train_dataset(a)?;
    io::create_dir(out_dir)?;

    if !a.sweep.is_empty() {
        let spec = SweepSpec {
            preset,
            epochs: a.epochs,
            iterations: a.iterations,
            fractions: a.sweep.clone(),
            schemes: a.schemes.clone(),
            seeds: a.seeds.clone(),
        };
        let outcome = runner::sweep_iteration_budgets(&spec, &dataset, &cfg).map_err(plan_failure)?;
        let runs = out_dir.join("runs");
        io::create_dir(&runs)?;
        for r in &outcome.reports {
            let stem = format!(
                "{}_i{}_seed{}",
                file_stem(r.scheme),
                r.config.plan.iterations_per_epoch,
                r.seed
            );
            write_report(&runs, &stem, r, a.mask_wallclock)?;
        }
        let mut rows = outcome.rows.clone();
        if a.mask_wallclock {
            rows.iter_mut().for_each(|r| r.mean_runtime_seconds = 0.0);
        }
        io::write_csv(&out_dir.join("sweep.csv"), &rows)?;
        io::write_json(&out_dir.join("sweep.json"), &rows)?;
        let mut s = format!("{:<6}  {:>8}  {:>10}  {:>14}  {:>10}  {:>11}\n", "scheme", "fraction", "mean_dice", "voxels", "voxel_frac", "runtime_s");
        for r in &outcome.rows {
            let _ = writeln!(
                s,
                "{:<6}  {:>8.3}  {:>10}  {:>14.0}  {:>10}  {:>11.2}",
                r.scheme,
                r.fraction,
                r.mean_dice.map_or_else(|| "n/a".into(), |d| format!("{d:.4}")),
                r.mean_voxels,
                r.voxel_fraction.map_or_else(|| "n/a".into(), |f| format!("{f:.4}")),
                r.mean_runtime_seconds
            );
        }
        let _ = writeln!(s, "wrote {}", out_dir.join("sweep.csv").display());
        print(out, &s)?;
        return Ok(if outcome.all_valid() { 0 } else { 1 });
    }

    let plan = preset.plan(a.scheme, a.epochs, a.iterations).map_err(plan_failure)?;
    let results = runner::parallel_map(&a.seeds, |&s| runner::run_experiment_with_net(&plan, &dataset, &cfg, s));
    let mut all_valid = true;
    let mut text = String::new();
    for res in results {
        let (report, net) = res.map_err(plan_failure)?;
        let stem = format!("{}_seed{}", file_stem(report.scheme), report.seed);
        write_report(out_dir, &stem, &report, a.mask_wallclock)?;
        if a.checkpoint {
            let header = CheckpointHeader::new(&net, &report.config.net, report.epochs.len() as u32, a.lr, a.momentum);
            io::write_checkpoint(&out_dir.join(format!("{stem}.ckpt")), &net, &header)?;
        }
        all_valid &= report.valid;
        text.push_str(&summary_line(&report));
    }
    let _ = writeln!(text, "reports written to {}", out_dir.display());
    print(out, &text)?;
    Ok(if all_valid { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct ReportSummary {
    file: String,
    scheme: Scheme,
    seed: u64,
    valid: bool,
    epochs: usize,
    voxels_shown: u64,
    voxels_shown_fraction: Option<f64>,
    wallclock_seconds: f64,
    estimated_co2_grams: f64,
    final_val_dice: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ReportOutput {
    reports: Vec<ReportSummary>,
    against: Vec<ReportSummary>,
    ttest: Option<pgps_core::stats::TTestResult>,
}

fn load_reports(paths: &[PathBuf], field: &str) -> Result<Vec<(String, TrainReport)>, Failure> {
    paths
        .iter()
        .map(|p| {
            let r: TrainReport = io::read_json(p).map_err(|e| Failure::invalid(field, e))?;
            Ok((p.display().to_string(), r))
        })
        .collect()
}

fn summarize(file: String, r: &TrainReport) -> ReportSummary {
    ReportSummary {
        file,
        scheme: r.scheme,
        seed: r.seed,
        valid: r.valid,
        epochs: r.epochs.len(),
        voxels_shown: r.totals.voxels_shown,
        voxels_shown_fraction: r.totals.voxels_shown_fraction,
        wallclock_seconds: r.totals.wallclock_seconds,
        estimated_co2_grams: r.totals.estimated_co2_grams,
        final_val_dice: r.final_val_dice,
    }
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> CmdResult {
    if a.reports.is_empty() {
        return Err(Failure::invalid("reports", "give at least one report file"));
    }
    let reports = load_reports(&a.reports, "reports")?;
    let against = load_reports(&a.against, "against")?;
    let ttest = if against.is_empty() {
        None
    } else {
        if against.len() != reports.len() {
            return Err(Failure::invalid(
                "against",
                format!("{} report(s) cannot pair with {}", against.len(), reports.len()),
            ));
        }
        let lhs: Vec<TrainReport> = reports.iter().map(|r| r.1.clone()).collect();
        let rhs: Vec<TrainReport> = against.iter().map(|r| r.1.clone()).collect();
        Some(runner::compare_reports(&lhs, &rhs).map_err(|e| Failure::invalid("against", e))?)
    };
    let output = ReportOutput {
        reports: reports.into_iter().map(|(f, r)| summarize(f, &r)).collect(),
        against: against.into_iter().map(|(f, r)| summarize(f, &r)).collect(),
        ttest,
    };
    let text = match a.emit {
        EmitReport::Json => io::to_json_string(&output),
        EmitReport::Table => {
            let mut s = String::new();
            for (label, group) in [("report", &output.reports), ("against", &output.against)] {
                for r in group.iter() {
                    let _ = writeln!(
                        s,
                        "{label:<7}  {:<6} seed {:<4} epochs {:<5} voxels {:<14} fraction {:<8} runtime {:>9.2} s  CO2-eq {:>9.4} g  Dice {}{}",
                        r.scheme.to_string(),
                        r.seed,
                        r.epochs,
                        r.voxels_shown,
                        r.voxels_shown_fraction.map_or_else(|| "n/a".into(), |f| format!("{f:.4}")),
                        r.wallclock_seconds,
                        r.estimated_co2_grams,
                        r.final_val_dice.map_or_else(|| "n/a".into(), |d| format!("{d:.4}")),
                        if r.valid { "" } else { "  INVALID" }
                    );
                }
            }
            if let Some(t) = &output.ttest {
                let _ = writeln!(
                    s,
                    "paired one-sided t-test (report > against): t = {:.6}, df = {}, p = {:.6e}{}",
                    t.t,
                    t.df,
                    t.p,
                    if t.degenerate { " (zero-variance differences)" } else { "" }
                );
            }
            s
        }
    };
    print(out, &text)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_parser() {
        assert_eq!(parse_patch("80x192x160").unwrap().dims(), [80, 192, 160]);
        assert!(parse_patch("80x192").is_err());
        assert!(parse_patch("0x1x1").is_err());
        assert!(parse_patch("ax1x1").is_err());
    }

    #[test]
    fn scheme_parser() {
        assert_eq!(parse_scheme("pgps+").unwrap(), Scheme::PgpsPlus);
        assert_eq!(parse_scheme("CPS").unwrap(), Scheme::Cps);
        assert!(parse_scheme("fast").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
