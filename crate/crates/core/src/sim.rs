//! Runs the five methods end to end and records metrics, FV traces and
//! every message that crosses a party boundary.

use std::fmt;
use std::io::Write;
use std::time::Duration;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate, split_quarters, Dataset, PartyData};
use crate::error::{Error, Result};
use crate::fed::{
    aggregate_and_update_momentum, run_local_round, BatchCursor, CentralizedState, Checkpoint,
    InitialWeighting, LocalMode, LocalRound, ServerState, TrainerState,
};
use crate::fv::{fv_round, FvRecord, Scorer, ValidatorState, VerificationScorer, Weighting};
use crate::model::{Batch, HeadSpec, Matrix};
use crate::params::{checksum_f64, ParamVec};
use crate::rng::{derive_seed, seeded};

/// Smoothing factor of the reported training loss.
pub const LOSS_SMOOTHING: f64 = 0.99;

const TAG_BACKBONE_INIT: u64 = 1;
const TAG_HEAD_INIT: u64 = 2;
const TAG_VALIDATION_PAIRS: u64 = 3;
const TAG_FV_CANDIDATES: u64 = 4;
const TAG_EVAL_PAIRS: u64 = 5;
const TAG_QUARTERS: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Centralized,
    Fedavg,
    FedavgFv,
    Pfm,
    PfmFv,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Centralized,
        Method::Fedavg,
        Method::FedavgFv,
        Method::Pfm,
        Method::PfmFv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::Fedavg => "fedavg",
            Method::FedavgFv => "fedavg_fv",
            Method::Pfm => "pfm",
            Method::PfmFv => "pfm_fv",
        }
    }

    pub fn local_mode(self) -> Option<LocalMode> {
        match self {
            Method::Centralized => None,
            Method::Fedavg | Method::FedavgFv => Some(LocalMode::FedAvg),
            Method::Pfm | Method::PfmFv => Some(LocalMode::Pfm),
        }
    }

    pub fn uses_fv(self) -> bool {
        matches!(self, Method::FedavgFv | Method::PfmFv)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exponential moving average seeded with its first observation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSmoother {
    value: Option<f64>,
}

impl LossSmoother {
    pub fn update(&mut self, x: f64) {
        self.value = Some(match self.value {
            None => x,
            Some(v) => LOSS_SMOOTHING * v + (1.0 - LOSS_SMOOTHING) * x,
        });
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Smoothed training loss per trainer (per source party for centralized runs).
    pub losses: Vec<f64>,
    /// Weighting used by this round's aggregation; empty for centralized runs.
    pub weighting: Vec<f64>,
    /// Verification accuracy of the global backbone per evaluation shard.
    pub eval_scores: Option<Vec<f64>>,
    pub wall: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Server,
    Trainer(usize),
    Validator(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Server => f.write_str("server"),
            Role::Trainer(i) => write!(f, "trainer:{i}"),
            Role::Validator(i) => write!(f, "validator:{i}"),
        }
    }
}

/// The only things allowed to cross a party boundary.
#[derive(Clone, Copy, Debug)]
pub enum Payload<'a> {
    Backbone(&'a ParamVec),
    Momentum(&'a ParamVec),
    Score(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Backbone,
    Momentum,
    Score,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Backbone => "backbone",
            PayloadKind::Momentum => "momentum",
            PayloadKind::Score => "score",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub round: usize,
    pub from: Role,
    pub to: Role,
    pub kind: PayloadKind,
    pub len: usize,
    pub checksum: u64,
}

impl Event {
    pub fn new(round: usize, from: Role, to: Role, payload: Payload<'_>) -> Self {
        let (kind, len, checksum) = match payload {
            Payload::Backbone(p) => (PayloadKind::Backbone, p.len(), p.checksum()),
            Payload::Momentum(p) => (PayloadKind::Momentum, p.len(), p.checksum()),
            Payload::Score(s) => (PayloadKind::Score, 1, checksum_f64(&[s])),
        };
        Self {
            round,
            from,
            to,
            kind,
            len,
            checksum,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round={} from={} to={} kind={} len={} checksum={:016x}",
            self.round, self.from, self.to, self.kind, self.len, self.checksum
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvTraceRow {
    pub round: usize,
    pub applied_at: Option<usize>,
    pub record: Option<FvRecord>,
    pub failure: Option<String>,
}

/// What an observer sees after every aggregation.
#[derive(Debug)]
pub struct RoundView<'a> {
    pub round: usize,
    pub lr: f64,
    pub before: &'a ServerState,
    pub after: &'a ServerState,
    /// Missing for centralized runs.
    pub equivalent_gradient: Option<&'a ParamVec>,
    /// Backbones at the end of local training (the FV snapshot).
    pub local_thetas: &'a [ParamVec],
    pub fv: Option<&'a FvTraceRow>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub method: Method,
    pub metrics: Vec<RoundMetrics>,
    pub fv_trace: Vec<FvTraceRow>,
    pub events: Vec<Event>,
    pub checkpoint: Checkpoint,
    /// Extra checkpoints taken every `checkpoint_every` rounds.
    pub checkpoints: Vec<Checkpoint>,
    /// Verification accuracy of the final global backbone per evaluation shard.
    pub final_eval: Vec<f64>,
}

/// Per-trainer training sets, honouring `split_quarters`.
pub fn trainer_data(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<PartyData>> {
    if !config.partition_plan.split_quarters {
        return Ok(data.parties.clone());
    }
    let mut out = Vec::new();
    for p in &data.parties {
        out.extend(split_quarters(p, derive_seed(config.seeds.data, &[TAG_QUARTERS]))?);
    }
    Ok(out)
}

pub fn initial_backbone(config: &ExperimentConfig) -> ParamVec {
    config
        .backbone_spec
        .init_params(&mut seeded(config.seeds.init, &[TAG_BACKBONE_INIT]))
}

pub fn initial_head(config: &ExperimentConfig, index: usize, classes: usize) -> ParamVec {
    config
        .head_spec
        .spec(config.backbone_spec.feature_dim, classes)
        .init_params(&mut seeded(config.seeds.init, &[TAG_HEAD_INIT, index as u64]))
}

/// The stream FV candidate weightings are drawn from.
pub fn fv_rng(config: &ExperimentConfig) -> ChaCha8Rng {
    seeded(config.seeds.fv, &[TAG_FV_CANDIDATES])
}

/// One verification validator per party, pairs fixed by the FV seed.
pub fn build_validators(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<ValidatorState>> {
    data.validation
        .iter()
        .map(|shard| {
            let mut rng = seeded(config.seeds.fv, &[TAG_VALIDATION_PAIRS, shard.owner as u64]);
            let scorer = VerificationScorer::new(shard.clone(), config.backbone_spec.clone(), &mut rng)?;
            Ok(ValidatorState::new(shard.owner, Box::new(scorer)))
        })
        .collect()
}

/// Scorers over the evaluation shards; pairs depend only on the data seed,
/// so every method is measured on the same pairs.
pub fn build_evaluators(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<VerificationScorer>> {
    data.evaluation
        .iter()
        .map(|shard| {
            let mut rng = seeded(config.seeds.data, &[TAG_EVAL_PAIRS, shard.owner as u64]);
            VerificationScorer::new(shard.clone(), config.backbone_spec.clone(), &mut rng)
        })
        .collect()
}

fn evaluate(evaluators: &[VerificationScorer], theta: &ParamVec) -> Result<Vec<f64>> {
    evaluators.iter().map(|e| e.score(theta)).collect()
}

fn as_divergence(round: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Divergence {
            round,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Generates the data and runs `config.method`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = generate(&config.plan())?;
    run_with_observer(config, &data, |_| {})
}

/// Runs `config.method` on pre-generated data, calling `observer` after
/// every aggregation.
pub fn run_with_observer<F>(config: &ExperimentConfig, data: &Dataset, observer: F) -> Result<RunOutput>
where
    F: FnMut(&RoundView<'_>) + Send,
{
    config.validate()?;
    let go = move || match config.method.local_mode() {
        None => run_centralized(config, data, observer),
        Some(mode) => run_federated(config, data, mode, observer),
    };
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(go)
    }
    #[cfg(not(feature = "parallel"))]
    {
        go()
    }
}

fn local_rounds(
    trainers: &mut [TrainerState],
    data: &[PartyData],
    heads: &[HeadSpec],
    server: &ServerState,
    config: &ExperimentConfig,
    lr: f64,
    mode: LocalMode,
) -> Vec<Result<LocalRound>> {
    let work = |(t, (d, h)): (&mut TrainerState, (&PartyData, &HeadSpec))| {
        run_local_round(
            t,
            &server.theta,
            &server.momentum,
            &config.hyper_params,
            lr,
            mode,
            &config.backbone_spec,
            h,
            &d.train,
        )
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        trainers
            .par_iter_mut()
            .zip(data.par_iter().zip(heads.par_iter()))
            .map(work)
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        trainers.iter_mut().zip(data.iter().zip(heads.iter())).map(work).collect()
    }
}

fn run_federated<F>(config: &ExperimentConfig, data: &Dataset, mode: LocalMode, mut observer: F) -> Result<RunOutput>
where
    F: FnMut(&RoundView<'_>),
{
    let hp = &config.hyper_params;
    let parts = trainer_data(config, data)?;
    let heads: Vec<HeadSpec> = parts
        .iter()
        .map(|p| config.head_spec.spec(config.backbone_spec.feature_dim, p.num_classes))
        .collect();
    let theta0 = initial_backbone(config);
    let mut trainers = parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cursor = BatchCursor::new(config.seeds.batching, i as u64, p.len())?;
            Ok(TrainerState::new(i, theta0.clone(), initial_head(config, i, p.num_classes), cursor))
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = parts.iter().map(PartyData::len).collect();
    let weighting = match hp.initial_weighting {
        InitialWeighting::SizeProportional => Weighting::proportional(&sizes)?,
        InitialWeighting::Uniform => Weighting::uniform(sizes.len())?,
    };
    let mut server = ServerState::new(theta0, weighting);
    let mut validators = if config.method.uses_fv() {
        build_validators(config, data)?
    } else {
        Vec::new()
    };
    let evaluators = build_evaluators(config, data)?;
    let mut fv_rng = fv_rng(config);

    let mut smoothers = vec![LossSmoother::default(); trainers.len()];
    let mut pending: Option<(usize, Weighting)> = None;
    let mut out = RunOutput {
        method: config.method,
        metrics: Vec::with_capacity(hp.rounds),
        fv_trace: Vec::new(),
        events: Vec::new(),
        checkpoint: Checkpoint {
            server: server.clone(),
            trainers: trainers.clone(),
        },
        checkpoints: Vec::new(),
        final_eval: Vec::new(),
    };

    for round in 1..=hp.rounds {
        let start = Instant::now();
        let lr = hp.lr(round);
        if let Some((at, w)) = pending.take() {
            if at == round {
                server.weighting = w;
            } else {
                pending = Some((at, w));
            }
        }
        for t in 0..trainers.len() {
            out.events.push(Event::new(round, Role::Server, Role::Trainer(t), Payload::Backbone(&server.theta)));
            if mode == LocalMode::Pfm {
                out.events
                    .push(Event::new(round, Role::Server, Role::Trainer(t), Payload::Momentum(&server.momentum)));
            }
        }
        let reports = local_rounds(&mut trainers, &parts, &heads, &server, config, lr, mode);
        for (t, report) in reports.into_iter().enumerate() {
            let report = report.map_err(as_divergence(round))?;
            for l in report.losses {
                smoothers[t].update(l);
            }
        }
        let thetas: Vec<ParamVec> = trainers.iter().map(|t| t.theta.clone()).collect();
        for (t, theta) in thetas.iter().enumerate() {
            out.events.push(Event::new(round, Role::Trainer(t), Role::Server, Payload::Backbone(theta)));
        }
        let weighting_used = server.weighting.as_slice().to_vec();
        let agg = aggregate_and_update_momentum(&server, &thetas, lr, hp.momentum).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { round, reason },
            other => other,
        })?;

        let fv_row = if config.method.uses_fv() && round % config.fv_params.fv_every == 0 {
            let result = fv_round(&thetas, &agg.server.weighting, &mut validators, &config.fv_params, &mut fv_rng)?;
            if let Some(rec) = &result.record {
                for (v, val) in validators.iter().enumerate() {
                    for (t, &sum) in rec.aggregate_checksums.iter().enumerate() {
                        out.events.push(Event {
                            round,
                            from: Role::Server,
                            to: Role::Validator(val.id),
                            kind: PayloadKind::Backbone,
                            len: server.theta.len(),
                            checksum: sum,
                        });
                        out.events.push(Event::new(
                            round,
                            Role::Validator(val.id),
                            Role::Server,
                            Payload::Score(rec.raw.get(v, t)),
                        ));
                    }
                }
            }
            let at = round + config.fv_params.fv_every;
            let applied_at = (at <= hp.rounds).then_some(at);
            if applied_at.is_some() {
                pending = Some((at, result.weighting.clone()));
            }
            Some(FvTraceRow {
                round,
                applied_at,
                record: result.record,
                failure: result.failure,
            })
        } else {
            None
        };

        observer(&RoundView {
            round,
            lr,
            before: &server,
            after: &agg.server,
            equivalent_gradient: Some(&agg.equivalent_gradient),
            local_thetas: &thetas,
            fv: fv_row.as_ref(),
        });
        server = agg.server;
        if let Some(row) = fv_row {
            out.fv_trace.push(row);
        }

        let eval_scores = if round % config.eval_every == 0 || round == hp.rounds {
            Some(evaluate(&evaluators, &server.theta)?)
        } else {
            None
        };
        if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
            out.checkpoints.push(Checkpoint {
                server: server.clone(),
                trainers: trainers.clone(),
            });
        }
        out.metrics.push(RoundMetrics {
            round,
            losses: smoothers.iter().map(|s| s.value().unwrap_or(f64::NAN)).collect(),
            weighting: weighting_used,
            eval_scores: eval_scores.clone(),
            wall: start.elapsed(),
        });
        if round == hp.rounds {
            out.final_eval = eval_scores.unwrap_or_default();
        }
    }
    out.checkpoint = Checkpoint { server, trainers };
    Ok(out)
}

/// Union of all parties' training data with global labels, plus the source
/// party of every sample.
pub fn pooled_training_data(data: &Dataset) -> Result<(Batch, Vec<usize>)> {
    let inputs = Matrix::vstack(&data.parties.iter().map(|p| &p.train.inputs).collect::<Vec<_>>())?;
    let mut labels = Vec::new();
    let mut origin = Vec::new();
    for p in &data.parties {
        labels.extend(p.train.labels.iter().map(|l| l + p.global_class_offset));
        origin.extend(std::iter::repeat_n(p.party_id, p.len()));
    }
    Ok((Batch::new(inputs, labels)?, origin))
}

fn run_centralized<F>(config: &ExperimentConfig, data: &Dataset, mut observer: F) -> Result<RunOutput>
where
    F: FnMut(&RoundView<'_>),
{
    let hp = &config.hyper_params;
    let (pooled, origin) = pooled_training_data(data)?;
    let parties = data.parties.len();
    let total_classes: usize = data.parties.iter().map(|p| p.num_classes).sum();
    let head = config.head_spec.spec(config.backbone_spec.feature_dim, total_classes);
    let omega0: Vec<f64> = data
        .parties
        .iter()
        .flat_map(|p| initial_head(config, p.party_id, p.num_classes).into_vec())
        .collect();
    let cursor = BatchCursor::new(config.seeds.batching, 0, pooled.len())?;
    let mut state = CentralizedState::new(initial_backbone(config), ParamVec::new(omega0)?, cursor);
    let batch_size = hp.batch_size * parties;
    let evaluators = build_evaluators(config, data)?;
    let single = Weighting::uniform(1)?;
    let as_server = |s: &CentralizedState, round| ServerState {
        theta: s.theta.clone(),
        momentum: s.m_theta.clone(),
        weighting: single.clone(),
        round,
    };
    let checkpoint = |s: &CentralizedState, round| Checkpoint {
        server: as_server(s, round),
        trainers: vec![TrainerState {
            party_id: 0,
            theta: s.theta.clone(),
            omega: s.omega.clone(),
            m_omega: s.m_omega.clone(),
            cursor: s.cursor.clone(),
        }],
    };

    let mut smoothers = vec![LossSmoother::default(); parties];
    let mut out = RunOutput {
        method: Method::Centralized,
        metrics: Vec::with_capacity(hp.rounds),
        fv_trace: Vec::new(),
        events: Vec::new(),
        checkpoint: checkpoint(&state, 0),
        checkpoints: Vec::new(),
        final_eval: Vec::new(),
    };
    let mut sums = vec![0.0; parties];
    let mut counts = vec![0usize; parties];
    for round in 1..=hp.rounds {
        let start = Instant::now();
        let lr = hp.lr(round);
        let before = as_server(&state, round - 1);
        for _ in 0..hp.local_steps {
            let (idx, losses) = state
                .step(&config.backbone_spec, &head, &pooled, batch_size, hp.momentum, lr)
                .map_err(as_divergence(round))?;
            sums.iter_mut().for_each(|s| *s = 0.0);
            counts.iter_mut().for_each(|c| *c = 0);
            for (&i, l) in idx.iter().zip(losses) {
                sums[origin[i]] += l;
                counts[origin[i]] += 1;
            }
            for p in 0..parties {
                if counts[p] > 0 {
                    smoothers[p].update(sums[p] / counts[p] as f64);
                }
            }
        }
        let after = as_server(&state, round);
        if !after.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                round,
                reason: "non-finite backbone".into(),
            });
        }
        let thetas = [state.theta.clone()];
        observer(&RoundView {
            round,
            lr,
            before: &before,
            after: &after,
            equivalent_gradient: None,
            local_thetas: &thetas,
            fv: None,
        });
        let eval_scores = if round % config.eval_every == 0 || round == hp.rounds {
            Some(evaluate(&evaluators, &state.theta)?)
        } else {
            None
        };
        if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
            out.checkpoints.push(checkpoint(&state, round));
        }
        out.metrics.push(RoundMetrics {
            round,
            losses: smoothers.iter().map(|s| s.value().unwrap_or(f64::NAN)).collect(),
            weighting: Vec::new(),
            eval_scores: eval_scores.clone(),
            wall: start.elapsed(),
        });
        if round == hp.rounds {
            out.final_eval = eval_scores.unwrap_or_default();
        }
    }
    out.checkpoint = checkpoint(&state, hp.rounds);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    pub shard: usize,
    pub score: f64,
    pub baseline: f64,
    pub delta: f64,
}

/// Final evaluation of every method relative to the centralized baseline.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunOutput>,
}

/// Deltas of each method's final scores against `baseline`, per shard.
pub fn deltas(runs: &[RunOutput], baseline: &RunOutput) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for run in runs {
        Error::check_len(baseline.final_eval.len(), run.final_eval.len())?;
        for (shard, (&score, &base)) in run.final_eval.iter().zip(&baseline.final_eval).enumerate() {
            rows.push(ComparisonRow {
                method: run.method,
                shard,
                score,
                baseline: base,
                delta: score - base,
            });
        }
    }
    Ok(rows)
}

/// Runs all five methods on the same data and seeds.
pub fn compare(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let data = generate(&config.plan())?;
    let runs = Method::ALL
        .iter()
        .map(|&method| {
            let cfg = ExperimentConfig {
                method,
                ..config.clone()
            };
            run_with_observer(&cfg, &data, |_| {})
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = deltas(&runs, &runs[0])?;
    Ok(Comparison { rows, runs })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "party", "smoothed_loss", "weight", "eval_score"]).map_err(csv_err)?;
    for m in metrics {
        for (p, loss) in m.losses.iter().enumerate() {
            let eval_party = m.eval_scores.as_ref().and_then(|s| s.get(p).copied());
            w.write_record([
                m.round.to_string(),
                p.to_string(),
                loss.to_string(),
                fmt_opt(m.weighting.get(p).copied()),
                fmt_opt(eval_party),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pack(rows: impl Iterator<Item = Vec<f64>>) -> String {
    rows.map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join("|"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_fv_trace_csv<W: Write>(out: W, trace: &[FvTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "applied_at",
        "chosen",
        "candidates",
        "raw",
        "normalized",
        "weighting",
        "failure",
    ])
    .map_err(csv_err)?;
    for row in trace {
        let applied = row.applied_at.map(|a| a.to_string()).unwrap_or_default();
        let fields = match &row.record {
            Some(rec) => [
                rec.chosen.to_string(),
                pack(rec.candidates.iter().map(|c| c.as_slice().to_vec())),
                pack((0..rec.raw.validators()).map(|i| rec.raw.row(i).to_vec())),
                pack((0..rec.normalized.validators()).map(|i| rec.normalized.row(i).to_vec())),
                pack(std::iter::once(rec.weighting.as_slice().to_vec())),
            ],
            None => Default::default(),
        };
        let mut record = vec![row.round.to_string(), applied];
        record.extend(fields);
        record.push(row.failure.clone().unwrap_or_default());
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> Result<()> {
    for e in events {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

pub fn write_timing_csv<W: Write>(out: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "wall_ms"]).map_err(csv_err)?;
    for m in metrics {
        w.write_record([m.round.to_string(), format!("{:.3}", m.wall.as_secs_f64() * 1e3)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "shard", "score", "baseline", "delta"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.shard.to_string(),
            r.score.to_string(),
            r.baseline.to_string(),
            r.delta.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
