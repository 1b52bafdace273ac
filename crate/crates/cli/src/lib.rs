//! Commands behind the `mtlb` binary.
//!
//! Each `cmd_*` function validates its whole configuration before touching
//! the disk and returns a summary the binary prints.

mod error;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use log::info;
use mtlb_core::config::KeyValues;
use mtlb_core::metrics::{evaluate, MatchThresholds, MetricsReport};
use mtlb_core::report::StudyReport;
use mtlb_core::runconfig::{Command, RunConfig};
use mtlb_core::scene::ingest::{IngestStats, Ingestor, ListenOptions, UdpListener};
use mtlb_core::scene::{
    generate_synthetic, load_dataset, save_dataset, to_ego_frame, vectorize, Dataset, SplitName,
};
use mtlb_core::train::{
    load_predictor, run_experiment, Checkpoint, ExperimentResult, ExperimentSpec, LoadedPredictor, Method, PreparedData,
    StageLog,
};

pub use error::{CliError, Result};

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub force: bool,
    /// Extra `key=value` entries applied on top of the config file.
    pub overrides: Vec<String>,
}

/// Reads the config file, applies `--set` and `--seed`, and validates everything.
pub fn load_config(command: Command, opts: &Options) -> Result<RunConfig> {
    let mut kv = match &opts.config {
        Some(p) => KeyValues::from_file(p)?,
        None => KeyValues::new(),
    };
    for o in &opts.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{o}' is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = opts.seed {
        kv.set("train.seed", seed);
        kv.set("generate.seed", seed);
    }
    Ok(RunConfig::from_key_values(command, &kv)?)
}

/// Caps rayon's global pool at `MTLB_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MTLB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("MTLB_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Startup(format!("cannot size the worker pool: {e}")))
}

fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    let busy = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if busy && !force {
        return Err(CliError::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(mtlb_core::Error::from)?;
    Ok(())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::Core(e.into()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|e| CliError::Input(format!("cannot load dataset {}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub preset: String,
    pub scenarios: usize,
    pub splits: [usize; 3],
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [tr, va, te] = self.splits;
        write!(
            f,
            "wrote {} {} scenarios to {} (train {tr}, val {va}, test {te})",
            self.scenarios,
            self.preset,
            self.path.display()
        )
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenerateSummary> {
    guard_file(out, force)?;
    let scenarios = generate_synthetic(&cfg.generate)?;
    let ds = Dataset::new(cfg.generate_role, scenarios, cfg.generate.seed)?;
    save_dataset(out, &ds)?;
    Ok(GenerateSummary {
        path: out.to_path_buf(),
        preset: cfg.generate.preset.to_string(),
        scenarios: ds.len(),
        splits: [SplitName::Train, SplitName::Val, SplitName::Test].map(|s| ds.splits.get(s).len()),
    })
}

fn stage_rows(stages: &[StageLog]) -> String {
    let mut out = String::from("method,stage,steps,seconds,work\n");
    for s in stages {
        out.push_str(&format!("{},{},{},{:.3},{}\n", s.method, s.stage, s.steps, s.seconds, s.work));
    }
    out
}

/// Writes the checkpoint and both evaluation reports of one method into `dir`.
fn persist_result(dir: &Path, r: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(mtlb_core::Error::from)?;
    r.checkpoint.save(&dir.join("checkpoint.mtlb"))?;
    write(&dir.join("source_report.json"), r.source_report.to_json() + "\n")?;
    write(&dir.join("target_report.json"), r.target_report.to_json() + "\n")?;
    Ok(())
}

fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let (Some(src), Some(tgt)) = (&cfg.source, &cfg.target) else {
        return Err(CliError::Config("data.source and data.target are required".into()));
    };
    let source = read_dataset(src)?;
    let target = read_dataset(tgt)?;
    info!("loaded {} source and {} target scenarios", source.len(), target.len());
    Ok(PreparedData::new(&source, &target, &cfg.model)?)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: Method,
    pub out: PathBuf,
    pub source: MetricsReport,
    pub target: MetricsReport,
    pub stages: Vec<StageLog>,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} finished; outputs in {}", self.method, self.out.display())?;
        for (name, r) in [("source", &self.source), ("target", &self.target)] {
            write!(
                f,
                "\n  {name}: mAP {:.4}  minADE {:.4}  minFDE {:.4}  missRate {:.4}",
                r.map, r.min_ade, r.min_fde, r.miss_rate
            )?;
        }
        for s in &self.stages {
            write!(f, "\n  stage {}: {} steps, {:.1} s", s.stage, s.steps, s.seconds)?;
        }
        Ok(())
    }
}

/// Trains one method and writes `checkpoint.mtlb`, two report files and `stages.csv`.
pub fn cmd_run(cfg: &RunConfig, source_checkpoint: Option<&Path>, out: &Path, force: bool) -> Result<RunSummary> {
    let method = cfg
        .method
        .ok_or_else(|| CliError::Config("run needs a method".into()))?;
    let base = match (method.needs_source_checkpoint(), source_checkpoint) {
        (true, None) => {
            return Err(CliError::Dependency(format!(
                "{method} starts from a source-baseline model; train SB first and pass --source-checkpoint"
            )))
        }
        (true, Some(p)) => Some(
            Checkpoint::load(p)
                .map_err(|e| CliError::Dependency(format!("cannot load source checkpoint {}: {e}", p.display())))?,
        ),
        (false, _) => None,
    };
    guard_dir(out, force)?;
    let data = prepare(cfg)?;
    let spec = ExperimentSpec {
        method,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
    };
    let r = run_experiment(&spec, &data, base.as_ref())?;
    persist_result(out, &r)?;
    write(&out.join("stages.csv"), stage_rows(&r.stages))?;
    Ok(RunSummary {
        method,
        out: out.to_path_buf(),
        source: r.source_report,
        target: r.target_report,
        stages: r.stages,
    })
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub report: StudyReport,
    /// Measured wall time of every stage, in run order.
    pub stages: Vec<StageLog>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for StudySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.report.to_text())?;
        for p in &self.files {
            write!(f, "\nwrote {}", p.display())?;
        }
        Ok(())
    }
}

/// Runs all seven methods; SB goes first and its checkpoint seeds the
/// two-stage methods. Each method's outputs land in `out/methods/<M>` as
/// soon as it finishes.
pub fn cmd_study(cfg: &RunConfig, out: &Path, force: bool) -> Result<StudySummary> {
    guard_dir(out, force)?;
    let data = prepare(cfg)?;
    let order = [Method::SB, Method::TB, Method::MTL, Method::FT, Method::FTD, Method::FTE, Method::FR];
    let mut results: Vec<ExperimentResult> = Vec::with_capacity(order.len());
    for method in order {
        let spec = ExperimentSpec {
            method,
            model: cfg.model.clone(),
            train: cfg.train.clone(),
        };
        let base = results.iter().find(|r| r.method == Method::SB).map(|r| &r.checkpoint);
        let r = run_experiment(&spec, &data, if method.needs_source_checkpoint() { base } else { None })?;
        info!(
            "{method}: target minADE {:.3}, missRate {:.3}",
            r.target_report.min_ade, r.target_report.miss_rate
        );
        persist_result(&out.join("methods").join(method.name()), &r)?;
        results.push(r);
    }
    let report = StudyReport::from_results(cfg.train.seed, &results)?;
    let files = report.write(out)?;
    let stages: Vec<StageLog> = results.iter().flat_map(|r| r.stages.clone()).collect();
    write(&out.join("wall_clock.csv"), stage_rows(&stages))?;
    Ok(StudySummary { report, stages, files })
}

/// Scores `checkpoint` on one split of `dataset`; writes the report to `out` when given.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    split: SplitName,
    out: Option<&Path>,
    force: bool,
) -> Result<MetricsReport> {
    if let Some(o) = out {
        guard_file(o, force)?;
    }
    let predictor = load_predictor(checkpoint)
        .map_err(|e| CliError::Input(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let model_cfg = match &predictor {
        LoadedPredictor::Model(m) => {
            let have = m.cfg.to_key_values();
            let want = cfg.model.to_key_values();
            for k in &cfg.explicit_model_keys {
                if have.raw(k) != want.raw(k) {
                    return Err(CliError::Config(format!(
                        "checkpoint {} was trained with model.{k}={} but the config sets model.{k}={}",
                        checkpoint.display(),
                        have.raw(k).unwrap_or("?"),
                        want.raw(k).unwrap_or("?")
                    )));
                }
            }
            m.cfg.clone()
        }
        LoadedPredictor::Oracle(_) => cfg.model.clone(),
    };
    let ds = read_dataset(dataset)?;
    let scenarios = ds.split(split);
    if scenarios.is_empty() {
        return Err(CliError::Input(format!("split '{split}' of {} is empty", dataset.display())));
    }
    let vcfg = model_cfg.vectorize();
    let samples = scenarios
        .iter()
        .map(|s| vectorize(&to_ego_frame(s)?, &vcfg))
        .collect::<mtlb_core::Result<Vec<_>>>()?;
    let report = evaluate(predictor.as_predictor(), &samples, &MatchThresholds::default())?;
    if let Some(o) = out {
        write(o, report.to_json() + "\n")?;
    }
    Ok(report)
}

/// Binds the ingestion socket on every interface.
pub fn bind_ingest(port: u16) -> Result<UdpListener> {
    Ok(UdpListener::bind(&format!("0.0.0.0:{port}"))?)
}

#[derive(Debug, Clone)]
pub struct IngestSummary {
    pub path: PathBuf,
    pub scenarios: usize,
    pub stats: IngestStats,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.stats;
        write!(
            f,
            "wrote {} scenarios to {}; records {}, malformed {}, late {}, duplicates {}",
            self.scenarios,
            self.path.display(),
            s.records,
            s.malformed,
            s.late,
            s.duplicates
        )
    }
}

/// Receives datagrams until the idle timeout, the scenario cap or `stop`,
/// then saves every completed scenario.
pub fn cmd_ingest(
    cfg: &RunConfig,
    listener: &UdpListener,
    output: &Path,
    force: bool,
    stop: Option<Arc<AtomicBool>>,
) -> Result<IngestSummary> {
    guard_file(output, force)?;
    let mut ingestor = Ingestor::new(cfg.ingest.ingest.clone());
    let opts = ListenOptions {
        max_scenarios: cfg.ingest.max_scenarios,
        idle_timeout: cfg.ingest.idle_timeout,
        stop,
    };
    let scenarios = listener.run(&mut ingestor, &opts)?;
    let stats = ingestor.stats();
    if scenarios.is_empty() {
        return Err(CliError::Input(format!(
            "no complete scenario received ({} records, {} malformed)",
            stats.records, stats.malformed
        )));
    }
    let n = scenarios.len();
    let ds = Dataset::new(cfg.ingest.role, scenarios, cfg.generate.seed)?;
    save_dataset(output, &ds)?;
    Ok(IngestSummary {
        path: output.to_path_buf(),
        scenarios: n,
        stats,
    })
}
