//! Command implementations behind the `fedsilo` binary. Argument parsing
//! lives in `main.rs`; everything here is callable from tests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ExperimentConfig, Seeds, SCHEMA};
use crate::data::generate;
use crate::error::{Error, Result};
use crate::fed::Checkpoint;
use crate::fv::{grid_search, GridPoint};
use crate::model::{gradient_check_perturbed, Batch, HeadSpec};
use crate::params::ParamVec;
use crate::rng::seeded;
use crate::sim::{self, RunOutput};

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_INSTANCES: usize = 20;
const GRADCHECK_SWEEP: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
const GRADCHECK_BATCH: usize = 8;
const GRADCHECK_HEAD_STD: f64 = 0.3;
const TAG_GRADCHECK: u64 = 100;

/// Options shared by every subcommand that reads a config.
#[derive(Clone, Debug, Default)]
pub struct CommonOptions {
    pub config: PathBuf,
    /// Output root; overrides the config's `output_dir`.
    pub out: Option<PathBuf>,
    /// Replaces all four seeds with streams derived from this value.
    pub seed_override: Option<u64>,
    pub threads: Option<usize>,
}

pub fn load_config(opts: &CommonOptions) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&opts.config).map_err(|e| {
        Error::config("--config", format!("cannot read {}: {e}", opts.config.display()))
    })?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = opts.seed_override {
        cfg.seeds = Seeds::from_master(seed);
    }
    if let Some(t) = opts.threads {
        cfg.threads = t;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `<output_dir>/<prefix>-<config hash>`.
pub fn output_dir(cfg: &ExperimentConfig, prefix: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(format!("{prefix}-{}", cfg.hash()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes the reference config (every default explicit) and the CSV schema.
pub fn cmd_init_config(path: &Path) -> Result<()> {
    fs::write(path, ExperimentConfig::default().to_toml_string())?;
    fs::write(path.with_file_name("schema.txt"), SCHEMA)?;
    Ok(())
}

/// Writes every artifact of `out` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    fs::write(dir.join("schema.txt"), SCHEMA)?;
    sim::write_metrics_csv(create(&dir.join("metrics.csv"))?, &out.metrics)?;
    if cfg.method.uses_fv() {
        sim::write_fv_trace_csv(create(&dir.join("fv_trace.csv"))?, &out.fv_trace)?;
    }
    sim::write_events(create(&dir.join("events.log"))?, &out.events)?;
    sim::write_timing_csv(create(&dir.join("timing.csv"))?, &out.metrics)?;
    let mut w = create(&dir.join("checkpoint.bin"))?;
    out.checkpoint.write(&mut w)?;
    w.flush()?;
    for cp in &out.checkpoints {
        let mut w = create(&dir.join(format!("checkpoint-r{}.bin", cp.server.round)))?;
        cp.write(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Runs the configured method and returns the run directory.
pub fn cmd_run(opts: &CommonOptions) -> Result<PathBuf> {
    let cfg = load_config(opts)?;
    let out = sim::run(&cfg)?;
    let dir = output_dir(&cfg, "run");
    write_run(&dir, &cfg, &out)?;
    Ok(dir)
}

/// Runs all five methods, prints the delta table and returns the output directory.
pub fn cmd_compare<W: Write>(opts: &CommonOptions, stdout: &mut W) -> Result<PathBuf> {
    let cfg = load_config(opts)?;
    let cmp = sim::compare(&cfg)?;
    let dir = output_dir(&cfg, "compare");
    fs::create_dir_all(&dir)?;
    sim::write_comparison_csv(create(&dir.join("comparison.csv"))?, &cmp.rows)?;
    for run in &cmp.runs {
        let run_cfg = ExperimentConfig {
            method: run.method,
            ..cfg.clone()
        };
        write_run(&dir.join(run.method.name()), &run_cfg, run)?;
    }
    writeln!(stdout, "{:<12} {:>5} {:>8} {:>8} {:>8}", "method", "shard", "score", "central", "delta")?;
    for r in &cmp.rows {
        writeln!(
            stdout,
            "{:<12} {:>5} {:>8.4} {:>8.4} {:>+8.4}",
            r.method.name(),
            r.shard,
            r.score,
            r.baseline,
            r.delta
        )?;
    }
    Ok(dir)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        Error::config("--checkpoint", format!("cannot read {}: {e}", path.display()))
    })?;
    Checkpoint::read(&mut bytes.as_slice())
}

/// Scores every lattice weighting of the checkpoint's three local backbones
/// with the config's validators. Writes `grid-<resolution>.csv` next to the
/// checkpoint.
pub fn cmd_gridsearch(opts: &CommonOptions, checkpoint: &Path, resolution: usize) -> Result<(PathBuf, Vec<GridPoint>)> {
    let cfg = load_config(opts)?;
    let cp = read_checkpoint(checkpoint)?;
    if cp.trainers.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "grid search needs a 3-party checkpoint, got {} trainers",
            cp.trainers.len()
        )));
    }
    let data = generate(&cfg.plan())?;
    let validators = sim::build_validators(&cfg, &data)?;
    let snapshot: Vec<ParamVec> = cp.trainers.iter().map(|t| t.theta.clone()).collect();
    let grid = grid_search(&snapshot, &validators, resolution)?;
    let path = checkpoint.with_file_name(format!("grid-{resolution}.csv"));
    write_grid_csv(create(&path)?, &grid)?;
    Ok((path, grid))
}

pub fn write_grid_csv<W: Write>(out: W, grid: &[GridPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let validators = grid.first().map_or(0, |g| g.scores.len());
    let mut header: Vec<String> = vec!["w0".into(), "w1".into(), "w2".into()];
    header.extend((0..validators).map(|v| format!("score_{v}")));
    header.push("total".into());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for g in grid {
        let mut rec: Vec<String> = g.weighting.as_slice().iter().map(f64::to_string).collect();
        rec.extend(g.scores.iter().map(f64::to_string));
        rec.push(g.total().to_string());
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One seeded gradient-check problem: parameters, head and a batch of
/// training samples of one party.
#[derive(Clone, Debug)]
pub struct GradcheckInstance {
    pub head: HeadSpec,
    pub theta: ParamVec,
    pub omega: ParamVec,
    pub batch: Batch,
}

pub fn gradcheck_instances(cfg: &ExperimentConfig, count: usize) -> Result<Vec<GradcheckInstance>> {
    let data = generate(&cfg.plan())?;
    let normal = Normal::new(0.0, GRADCHECK_HEAD_STD).expect("valid std");
    (0..count)
        .map(|i| {
            let mut rng = seeded(cfg.seeds.init, &[TAG_GRADCHECK, i as u64]);
            let party = &data.parties[i % data.parties.len()];
            let head = cfg.head_spec.spec(cfg.backbone_spec.feature_dim, party.num_classes);
            let theta = cfg.backbone_spec.init_params(&mut rng);
            let omega = ParamVec::new((0..head.param_count()).map(|_| normal.sample(&mut rng)).collect())?;
            let idx: Vec<usize> = (0..GRADCHECK_BATCH).map(|_| rng.random_range(0..party.len())).collect();
            Ok(GradcheckInstance {
                head,
                theta,
                omega,
                batch: party.train.select(&idx),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Worst error per instance at [`GRADCHECK_STEP`].
    pub errors: Vec<f64>,
    /// `(fd_step, worst error over all instances)`.
    pub sweep: Vec<(f64, f64)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }
}

/// Finite-difference check of the configured model. `inject` is added to
/// every analytic gradient entry (0 for a real check).
pub fn cmd_gradcheck<W: Write>(opts: &CommonOptions, inject: f64, stdout: &mut W) -> Result<GradcheckReport> {
    let cfg = load_config(opts)?;
    let instances = gradcheck_instances(&cfg, GRADCHECK_INSTANCES)?;
    let check = |inst: &GradcheckInstance, step| {
        gradient_check_perturbed(
            &cfg.backbone_spec,
            &inst.head,
            &inst.theta,
            &inst.omega,
            &inst.batch,
            step,
            inject,
        )
    };
    let errors = instances
        .iter()
        .map(|i| check(i, GRADCHECK_STEP))
        .collect::<Result<Vec<_>>>()?;
    let mut sweep = Vec::new();
    for step in GRADCHECK_SWEEP {
        let worst = instances
            .iter()
            .map(|i| check(i, step))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        sweep.push((step, worst));
    }
    let report = GradcheckReport { errors, sweep };
    writeln!(stdout, "fd_step     max_rel_error")?;
    for (step, err) in &report.sweep {
        writeln!(stdout, "{step:<10.0e}  {err:.3e}")?;
    }
    writeln!(
        stdout,
        "{} instances at fd_step {GRADCHECK_STEP:.0e}: max relative error {:.3e} ({})",
        report.errors.len(),
        report.max_error(),
        if report.passed() { "pass" } else { "FAIL" }
    )?;
    Ok(report)
}
