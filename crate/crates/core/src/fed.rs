//! Trainer-side local rounds and server-side aggregation with global momentum.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::Weighting;
use crate::model::{loss_and_grads, Batch, BackboneSpec, HeadSpec};
use crate::params::{check_finite, weighted_sum, ParamVec};
use crate::rng::seeded;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalMode {
    /// Plain local SGD on the backbone.
    FedAvg,
    /// Local SGD plus `β·M_Θ/K` of the global momentum every step.
    Pfm,
}

/// Piecewise-constant schedule: `base` multiplied by `decay` once for every
/// boundary `round(f·R)` that the current round has passed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    /// Fractions of the total round count after which the rate decays.
    pub decay_at: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.1,
            decay: 0.1,
            decay_at: vec![0.4, 0.7, 0.92],
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            decay: 1.0,
            decay_at: Vec::new(),
        }
    }

    pub fn boundaries(&self, rounds: usize) -> Vec<usize> {
        self.decay_at
            .iter()
            .map(|f| (f * rounds as f64).round() as usize)
            .collect()
    }

    /// Rate for 1-based `round` out of `rounds`.
    pub fn lr(&self, round: usize, rounds: usize) -> f64 {
        let passed = self.boundaries(rounds).iter().filter(|&&b| round > b).count();
        self.base * self.decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("hyper_params.lr_schedule.{name}");
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(Error::config(f("base"), format!("must be finite and > 0, got {}", self.base)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(f("decay"), format!("must lie in (0, 1], got {}", self.decay)));
        }
        let mut last = 0.0;
        for &d in &self.decay_at {
            if !(d > last && d < 1.0) {
                return Err(Error::config(
                    f("decay_at"),
                    format!("fractions must be strictly increasing within (0, 1), got {:?}", self.decay_at),
                ));
            }
            last = d;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialWeighting {
    SizeProportional,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Communication rounds `R`.
    pub rounds: usize,
    /// Local steps per round `K`.
    pub local_steps: usize,
    /// `β`, shared by the global momentum and the local head momentum.
    pub momentum: f64,
    pub batch_size: usize,
    pub initial_weighting: InitialWeighting,
    pub lr_schedule: LrSchedule,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 50,
            momentum: 0.9,
            batch_size: 16,
            initial_weighting: InitialWeighting::SizeProportional,
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("hyper_params.rounds", "must be >= 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("hyper_params.local_steps", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "hyper_params.momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper_params.batch_size", "must be >= 1"));
        }
        self.lr_schedule.validate()
    }

    pub fn lr(&self, round: usize) -> f64 {
        self.lr_schedule.lr(round, self.rounds)
    }
}

/// Deterministic epoch-shuffled batch stream over one party's samples.
/// The last incomplete batch of an epoch is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCursor {
    seed: u64,
    stream: u64,
    n: usize,
    epoch: u64,
    position: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    pub fn new(seed: u64, stream: u64, n: usize) -> Result<Self> {
        Self::resume(seed, stream, n, 0, 0)
    }

    pub fn resume(seed: u64, stream: u64, n: usize, epoch: u64, position: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("batch cursor over zero samples"));
        }
        if position > n {
            return Err(Error::InvalidArgument(format!("cursor position {position} beyond {n}")));
        }
        let mut c = Self {
            seed,
            stream,
            n,
            epoch,
            position,
            order: Vec::new(),
        };
        c.shuffle();
        Ok(c)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut seeded(self.seed, &[self.stream, self.epoch]));
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Indices of the next batch; `batch_size` is clamped to the sample count.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let bs = batch_size.clamp(1, self.n);
        if self.position + bs > self.n {
            self.epoch += 1;
            self.position = 0;
            self.shuffle();
        }
        let out = self.order[self.position..self.position + bs].to_vec();
        self.position += bs;
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub party_id: usize,
    pub theta: ParamVec,
    pub omega: ParamVec,
    pub m_omega: ParamVec,
    pub cursor: BatchCursor,
}

impl TrainerState {
    pub fn new(party_id: usize, theta: ParamVec, omega: ParamVec, cursor: BatchCursor) -> Self {
        let m_omega = ParamVec::zeros(omega.len());
        Self {
            party_id,
            theta,
            omega,
            m_omega,
            cursor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub theta: ParamVec,
    pub momentum: ParamVec,
    pub weighting: Weighting,
    /// Completed aggregations.
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ParamVec, weighting: Weighting) -> Self {
        let momentum = ParamVec::zeros(theta.len());
        Self {
            theta,
            momentum,
            weighting,
            round: 0,
        }
    }
}

/// Classical momentum: `M' = βM + h`, `ω' = ω − ηM'`.
pub fn classifier_step(
    omega: &ParamVec,
    m_omega: &ParamVec,
    h: &ParamVec,
    beta: f64,
    lr: f64,
) -> Result<(ParamVec, ParamVec)> {
    Error::check_len(omega.len(), m_omega.len())?;
    Error::check_len(omega.len(), h.len())?;
    let m: Vec<f64> = m_omega
        .iter()
        .zip(h.iter())
        .map(|(m, g)| beta * m + g)
        .collect();
    let w: Vec<f64> = omega.iter().zip(&m).map(|(w, m)| w - lr * m).collect();
    Ok((
        ParamVec::from_computed(w, "classifier")?,
        ParamVec::from_computed(m, "classifier momentum")?,
    ))
}

/// `θ' = θ − η(g + β·M_Θ/K)`. With `β = 0` the momentum term is skipped
/// outright, so the step is bit-for-bit the plain SGD step.
pub fn backbone_step_pfm(
    theta: &ParamVec,
    g: &ParamVec,
    beta: f64,
    lr: f64,
    m_prev: &ParamVec,
    local_steps: usize,
) -> Result<ParamVec> {
    Error::check_len(theta.len(), g.len())?;
    Error::check_len(theta.len(), m_prev.len())?;
    if local_steps == 0 {
        return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
    }
    let k = local_steps as f64;
    let out: Vec<f64> = if beta == 0.0 {
        theta.iter().zip(g.iter()).map(|(t, g)| t - lr * g).collect()
    } else {
        theta
            .iter()
            .zip(g.iter())
            .zip(m_prev.iter())
            .map(|((t, g), m)| t - lr * (g + beta * m / k))
            .collect()
    };
    ParamVec::from_computed(out, "backbone")
}

/// Per-step record of a local round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRound {
    /// Mean batch loss of every local step, in order.
    pub losses: Vec<f64>,
}

/// Resets `θᵢ` to `Θ` and runs `K` local steps. FedAvg mode passes a zero
/// momentum to the backbone step; the head always uses its own momentum.
#[allow(clippy::too_many_arguments)]
pub fn run_local_round(
    trainer: &mut TrainerState,
    server_theta: &ParamVec,
    server_momentum: &ParamVec,
    hp: &HyperParams,
    lr: f64,
    mode: LocalMode,
    b_spec: &BackboneSpec,
    h_spec: &HeadSpec,
    data: &Batch,
) -> Result<LocalRound> {
    if hp.local_steps == 0 {
        return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
    }
    let zero;
    let momentum = match mode {
        LocalMode::Pfm => server_momentum,
        LocalMode::FedAvg => {
            zero = ParamVec::zeros(server_theta.len());
            &zero
        }
    };
    trainer.theta = server_theta.clone();
    let mut losses = Vec::with_capacity(hp.local_steps);
    for _ in 0..hp.local_steps {
        let idx = trainer.cursor.next_batch(hp.batch_size);
        let batch = data.select(&idx);
        let lg = loss_and_grads(b_spec, h_spec, &trainer.theta, &trainer.omega, &batch)?;
        trainer.theta = backbone_step_pfm(
            &trainer.theta,
            &lg.backbone_grad,
            hp.momentum,
            lr,
            momentum,
            hp.local_steps,
        )?;
        let (omega, m_omega) =
            classifier_step(&trainer.omega, &trainer.m_omega, &lg.head_grad, hp.momentum, lr)?;
        trainer.omega = omega;
        trainer.m_omega = m_omega;
        losses.push(lg.loss);
    }
    Ok(LocalRound { losses })
}

/// Result of one server aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub server: ServerState,
    /// `G = (Θ_old − Θ_new)/η − β·M_old`.
    pub equivalent_gradient: ParamVec,
}

/// `Θ_new = Σ wᵢθᵢ` and `M_new = (Θ_old − Θ_new)/η`, which equals
/// `β·M_old + G`. A non-finite momentum aborts with a divergence error.
pub fn aggregate_and_update_momentum(
    server: &ServerState,
    thetas: &[ParamVec],
    lr: f64,
    beta: f64,
) -> Result<Aggregation> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let round = server.round + 1;
    let theta = weighted_sum(thetas, &server.weighting).map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence {
            round,
            reason: "aggregated backbone is not finite".into(),
        },
        other => other,
    })?;
    Error::check_len(server.theta.len(), theta.len())?;
    let momentum: Vec<f64> = server
        .theta
        .iter()
        .zip(theta.iter())
        .map(|(old, new)| (old - new) / lr)
        .collect();
    if check_finite(&momentum, "momentum").is_err() {
        return Err(Error::Divergence {
            round,
            reason: "global momentum is not finite".into(),
        });
    }
    let g: Vec<f64> = momentum
        .iter()
        .zip(server.momentum.iter())
        .map(|(m, old)| m - beta * old)
        .collect();
    Ok(Aggregation {
        server: ServerState {
            theta,
            momentum: ParamVec::from_computed(momentum, "momentum")?,
            weighting: server.weighting.clone(),
            round,
        },
        equivalent_gradient: ParamVec::from_computed(g, "equivalent gradient")?,
    })
}

/// Single-process classical momentum SGD on pooled data; the reference the
/// federated methods are measured against.
#[derive(Clone, Debug, PartialEq)]
pub struct CentralizedState {
    pub theta: ParamVec,
    pub m_theta: ParamVec,
    pub omega: ParamVec,
    pub m_omega: ParamVec,
    pub cursor: BatchCursor,
}

impl CentralizedState {
    pub fn new(theta: ParamVec, omega: ParamVec, cursor: BatchCursor) -> Self {
        Self {
            m_theta: ParamVec::zeros(theta.len()),
            m_omega: ParamVec::zeros(omega.len()),
            theta,
            omega,
            cursor,
        }
    }

    /// One step on the next batch. Returns the batch indices and per-sample losses.
    pub fn step(
        &mut self,
        b_spec: &BackboneSpec,
        h_spec: &HeadSpec,
        data: &Batch,
        batch_size: usize,
        beta: f64,
        lr: f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let idx = self.cursor.next_batch(batch_size);
        let batch = data.select(&idx);
        let lg = loss_and_grads(b_spec, h_spec, &self.theta, &self.omega, &batch)?;
        let (theta, m_theta) = classifier_step(&self.theta, &self.m_theta, &lg.backbone_grad, beta, lr)?;
        let (omega, m_omega) = classifier_step(&self.omega, &self.m_omega, &lg.head_grad, beta, lr)?;
        self.theta = theta;
        self.m_theta = m_theta;
        self.omega = omega;
        self.m_omega = m_omega;
        Ok((idx, lg.sample_losses))
    }
}

/// Server and trainer state after some completed round.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub server: ServerState,
    pub trainers: Vec<TrainerState>,
}

fn write_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_u64(out, self.server.round as u64)?;
        self.server.theta.write_record(out)?;
        self.server.momentum.write_record(out)?;
        self.server.weighting.to_param_vec().write_record(out)?;
        write_u64(out, self.trainers.len() as u64)?;
        for t in &self.trainers {
            write_u64(out, t.party_id as u64)?;
            t.theta.write_record(out)?;
            t.omega.write_record(out)?;
            t.m_omega.write_record(out)?;
            let c = &t.cursor;
            for v in [c.seed, c.stream, c.n as u64, c.epoch, c.position as u64] {
                write_u64(out, v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        input.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", u32::from_le_bytes(v))));
        }
        let round = read_u64(input)? as usize;
        let theta = ParamVec::read_record(input)?;
        let momentum = ParamVec::read_record(input)?;
        let weighting = Weighting::new(ParamVec::read_record(input)?.into_vec())?;
        let count = read_u64(input)? as usize;
        if count != weighting.len() {
            return Err(Error::Format(format!(
                "{count} trainers but {} weights",
                weighting.len()
            )));
        }
        let mut trainers = Vec::with_capacity(count);
        for _ in 0..count {
            let party_id = read_u64(input)? as usize;
            let t_theta = ParamVec::read_record(input)?;
            let omega = ParamVec::read_record(input)?;
            let m_omega = ParamVec::read_record(input)?;
            let mut c = [0u64; 5];
            for slot in &mut c {
                *slot = read_u64(input)?;
            }
            let cursor = BatchCursor::resume(c[0], c[1], c[2] as usize, c[3], c[4] as usize)?;
            if t_theta.len() != theta.len() || m_omega.len() != omega.len() {
                return Err(Error::Format(format!("trainer {party_id} has inconsistent shapes")));
            }
            trainers.push(TrainerState {
                party_id,
                theta: t_theta,
                omega,
                m_omega,
                cursor,
            });
        }
        if momentum.len() != theta.len() {
            return Err(Error::Format("momentum and backbone lengths differ".into()));
        }
        Ok(Self {
            server: ServerState {
                theta,
                momentum,
                weighting,
                round,
            },
            trainers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSpec, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn classifier_step_examples() {
        let (w, m) = classifier_step(&pv(&[0.0]), &pv(&[7.0]), &pv(&[1.0]), 0.0, 0.1).unwrap();
        assert_eq!((w.as_slice(), m.as_slice()), (&[-0.1][..], &[1.0][..]));
        let (w, _) = classifier_step(&pv(&[3.0]), &pv(&[0.0]), &pv(&[0.0]), 0.9, 0.1).unwrap();
        assert_eq!(w.as_slice(), &[3.0]);
        let (w, m) = classifier_step(&pv(&[1.0]), &pv(&[2.0]), &pv(&[0.5]), 0.9, 0.1).unwrap();
        assert!((m.as_slice()[0] - 2.3).abs() < 1e-15);
        assert!((w.as_slice()[0] - 0.77).abs() < 1e-15);
        assert!(classifier_step(&pv(&[1.0]), &pv(&[1.0, 2.0]), &pv(&[1.0]), 0.9, 0.1).is_err());
    }

    #[test]
    fn backbone_step_examples() {
        let t = pv(&[1.0]);
        let g = pv(&[0.5]);
        let out = backbone_step_pfm(&t, &g, 0.9, 0.1, &pv(&[2.0]), 10).unwrap();
        assert!((out.as_slice()[0] - 0.932).abs() < 1e-15);
        let sgd = backbone_step_pfm(&t, &g, 0.9, 0.1, &pv(&[0.0]), 10).unwrap();
        assert_eq!(sgd.as_slice(), &[1.0 - 0.1 * 0.5]);
        let b0 = backbone_step_pfm(&t, &g, 0.0, 0.1, &pv(&[123.0]), 10).unwrap();
        assert_eq!(b0, sgd);
        assert!(backbone_step_pfm(&t, &g, 0.9, 0.1, &pv(&[0.0]), 0).is_err());
        assert!(backbone_step_pfm(&t, &pv(&[1.0, 1.0]), 0.9, 0.1, &pv(&[0.0]), 1).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let server = ServerState {
            theta: pv(&[1.0]),
            momentum: pv(&[1.0]),
            weighting: Weighting::uniform(1).unwrap(),
            round: 4,
        };
        let agg = aggregate_and_update_momentum(&server, &[pv(&[0.8])], 0.1, 0.9).unwrap();
        assert!((agg.server.momentum.as_slice()[0] - 2.0).abs() < 1e-12);
        assert!((agg.equivalent_gradient.as_slice()[0] - 1.1).abs() < 1e-12);
        assert_eq!(agg.server.round, 5);

        let still = aggregate_and_update_momentum(&server, &[pv(&[1.0])], 0.1, 0.9).unwrap();
        assert_eq!(still.server.momentum.as_slice(), &[0.0]);

        assert!(aggregate_and_update_momentum(&server, &[pv(&[0.8])], 0.0, 0.9).is_err());
        assert!(aggregate_and_update_momentum(&server, &[pv(&[0.8]), pv(&[0.8])], 0.1, 0.9).is_err());
    }

    #[test]
    fn momentum_identity_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..8);
            let parties = rng.random_range(1..4);
            let mut v = |s: f64| -> ParamVec {
                pv(&(0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<_>>())
            };
            let theta = v(2.0);
            let m_old = v(5.0);
            let thetas: Vec<ParamVec> = (0..parties).map(|_| v(2.0)).collect();
            let w = Weighting::new((0..parties).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
            let lr = rng.random_range(0.001..0.5);
            let beta = rng.random_range(0.0..0.99);
            let server = ServerState {
                theta: theta.clone(),
                momentum: m_old.clone(),
                weighting: w,
                round: 0,
            };
            let agg = aggregate_and_update_momentum(&server, &thetas, lr, beta).unwrap();
            for i in 0..n {
                let m = agg.server.momentum.as_slice()[i];
                let recomposed = beta * m_old.as_slice()[i] + agg.equivalent_gradient.as_slice()[i];
                let scale = m.abs().max(1.0);
                assert!((m - recomposed).abs() <= 1e-12 * scale, "{m} vs {recomposed}");
                let direct = (theta.as_slice()[i] - agg.server.theta.as_slice()[i]) / lr;
                assert_eq!(m, direct);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_round() {
        let server = ServerState::new(pv(&[1.0]), Weighting::uniform(1).unwrap());
        let err = aggregate_and_update_momentum(&server, &[pv(&[-1e308])], 1e-300, 0.9).unwrap_err();
        assert!(matches!(err, Error::Divergence { round: 1, .. }), "{err}");
    }

    #[test]
    fn lr_schedule_decays_after_boundaries() {
        let s = LrSchedule::default();
        assert_eq!(s.boundaries(100), vec![40, 70, 92]);
        assert_eq!(s.lr(40, 100), 0.1);
        assert!((s.lr(41, 100) - 0.01).abs() < 1e-15);
        assert!((s.lr(100, 100) - 1e-4).abs() < 1e-15);
        assert!(LrSchedule { decay_at: vec![0.7, 0.4], ..s.clone() }.validate().is_err());
        assert!(LrSchedule { base: 0.0, ..s }.validate().is_err());
    }

    #[test]
    fn cursor_covers_each_epoch_and_drops_last() {
        let mut c = BatchCursor::new(1, 0, 10).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_batch(3)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(c.epoch(), 0);
        c.next_batch(3);
        assert_eq!((c.epoch(), c.position()), (1, 3));
        assert_eq!(c.next_batch(50).len(), 10);
        let mut a = BatchCursor::new(5, 2, 20).unwrap();
        a.next_batch(7);
        a.next_batch(7);
        let mut b = BatchCursor::resume(5, 2, 20, a.epoch(), a.position()).unwrap();
        assert_eq!(a.next_batch(7), b.next_batch(7));
    }

    fn toy() -> (BackboneSpec, HeadSpec, Batch) {
        let b = BackboneSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            feature_dim: 3,
            ..BackboneSpec::default()
        };
        let h = HeadSpec::softmax(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..12).map(|i| i % 2).collect();
        (b, h, Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap())
    }

    #[test]
    fn single_step_without_momentum_is_plain_sgd() {
        let (b, h, data) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = b.init_params(&mut rng);
        let omega = h.init_params(&mut rng);
        let hp = HyperParams {
            local_steps: 1,
            momentum: 0.0,
            batch_size: 4,
            ..HyperParams::default()
        };
        let mut t = TrainerState::new(0, theta.clone(), omega.clone(), BatchCursor::new(9, 0, 12).unwrap());
        let mut probe = t.cursor.clone();
        run_local_round(&mut t, &theta, &ParamVec::zeros(theta.len()), &hp, 0.05, LocalMode::Pfm, &b, &h, &data)
            .unwrap();
        let batch = data.select(&probe.next_batch(4));
        let lg = loss_and_grads(&b, &h, &theta, &omega, &batch).unwrap();
        for (i, v) in t.theta.iter().enumerate() {
            assert_eq!(*v, theta.as_slice()[i] - 0.05 * lg.backbone_grad.as_slice()[i]);
        }
        for (i, v) in t.omega.iter().enumerate() {
            assert_eq!(*v, omega.as_slice()[i] - 0.05 * lg.head_grad.as_slice()[i]);
        }
    }

    #[test]
    fn identical_parties_aggregate_to_their_common_backbone() {
        let (b, h, data) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = b.init_params(&mut rng);
        let omega = h.init_params(&mut rng);
        let hp = HyperParams {
            local_steps: 5,
            batch_size: 4,
            ..HyperParams::default()
        };
        let mut server = ServerState::new(theta.clone(), Weighting::uniform(2).unwrap());
        let mut ts: Vec<TrainerState> = (0..2)
            .map(|p| TrainerState::new(p, theta.clone(), omega.clone(), BatchCursor::new(1, 0, 12).unwrap()))
            .collect();
        for _ in 0..3 {
            for t in &mut ts {
                run_local_round(t, &server.theta, &server.momentum, &hp, 0.05, LocalMode::Pfm, &b, &h, &data)
                    .unwrap();
            }
            let thetas: Vec<ParamVec> = ts.iter().map(|t| t.theta.clone()).collect();
            server = aggregate_and_update_momentum(&server, &thetas, 0.05, 0.9).unwrap().server;
            assert_eq!(server.theta, ts[0].theta);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (b, h, _) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = b.init_params(&mut rng);
        let mut cursor = BatchCursor::new(3, 1, 12).unwrap();
        cursor.next_batch(5);
        let cp = Checkpoint {
            server: ServerState {
                round: 7,
                momentum: b.init_params(&mut rng),
                ..ServerState::new(theta.clone(), Weighting::new(vec![0.25, 0.75]).unwrap())
            },
            trainers: (0..2)
                .map(|p| TrainerState::new(p, b.init_params(&mut rng), h.init_params(&mut rng), cursor.clone()))
                .collect(),
        };
        let mut buf = Vec::new();
        cp.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(&mut buf.as_slice()).unwrap(), cp);
        buf[0] = b'X';
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
    }
}
