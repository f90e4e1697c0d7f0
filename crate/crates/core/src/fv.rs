//! Validation-driven search over aggregation weightings.
//!
//! Each FV round freezes a snapshot of the local backbones, scores `T`
//! candidate weightings on every validator (candidate 0 is always the
//! current weighting, the rest are uniform draws from the simplex),
//! normalizes each validator's scores, picks the candidate with the highest
//! normalized score sum and blends it into the current weighting with rate
//! `smooth_rate`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::ValidationShard;
use crate::error::{Error, Result};
use crate::model::{forward_features, head_logits, BackboneSpec, HeadSpec, Matrix};
use crate::params::{weighted_sum, ParamVec};

/// A point on the probability simplex, one entry per trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Weighting(Vec<f64>);

impl Weighting {
    /// Validates and renormalizes `raw` to sum to one.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("weighting"));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weighting entries must be finite and >= 0: {raw:?}"
            )));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("weighting sums to zero".into()));
        }
        if sum == 1.0 {
            return Ok(Self(raw));
        }
        Ok(Self(raw.into_iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::InvalidArgument(format!("index {index} out of {n}")));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Self::new(w)
    }

    /// Weights proportional to `sizes` (the usual FedAvg choice).
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.iter().map(|&s| s as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_param_vec(&self) -> ParamVec {
        ParamVec::new(self.0.clone()).expect("weighting is non-empty and finite")
    }
}

/// Uniform draw from the `(n-1)`-simplex via normalized exponentials.
pub fn sample_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Weighting> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample a 0-dimensional simplex".into()));
    }
    loop {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        if draws.iter().sum::<f64>() > 0.0 {
            return Weighting::new(draws);
        }
    }
}

/// Scores indexed `[validator][candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(Error::Empty("score matrix"));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged score matrix".into()));
        }
        let data = rows.concat();
        if data.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn validators(&self) -> usize {
        self.rows
    }

    pub fn candidates(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, validator: usize, candidate: usize) -> f64 {
        self.data[validator * self.cols + candidate]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|t| (0..self.rows).map(|i| self.get(i, t)).sum())
            .collect()
    }

    fn map_rows(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Self {
        let data = (0..self.rows).flat_map(|i| f(i, self.row(i))).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance_about(xs: &[f64], center: f64) -> f64 {
    xs.iter().map(|s| (s - center).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Divides every row by `sqrt(var(row) + epsilon)`, population variance.
pub fn normalize_local(scores: &ScoreMatrix, epsilon: f64) -> ScoreMatrix {
    scores.map_rows(|_, row| {
        let var = population_variance_about(row, mean(row));
        let denom = (var + epsilon).sqrt();
        row.iter().map(|s| s / denom).collect()
    })
}

/// Exponentially tracked mean and variance of one validator's scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MovingStats {
    pub mean: f64,
    pub var: f64,
    pub initialized: bool,
}

impl MovingStats {
    pub fn new(mean: f64, var: f64) -> Self {
        Self {
            mean,
            var,
            initialized: true,
        }
    }

    /// Folds one round of scores in. The first update adopts the round's
    /// statistics directly.
    pub fn updated(&self, row: &[f64], rate: f64) -> Self {
        let round_mean = mean(row);
        if !self.initialized {
            return Self::new(round_mean, population_variance_about(row, round_mean));
        }
        let mean = (1.0 - rate) * self.mean + rate * round_mean;
        let var = (1.0 - rate) * self.var + rate * population_variance_about(row, mean);
        Self::new(mean, var)
    }
}

/// Updates each validator's moving statistics with its row, then divides
/// the row by `sqrt(var + epsilon)`.
pub fn normalize_moving(
    scores: &ScoreMatrix,
    stats: &[MovingStats],
    rate: f64,
    epsilon: f64,
) -> Result<(ScoreMatrix, Vec<MovingStats>)> {
    Error::check_len(scores.validators(), stats.len())?;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("moving rate must lie in (0, 1], got {rate}")));
    }
    let updated: Vec<MovingStats> = (0..scores.validators())
        .map(|i| stats[i].updated(scores.row(i), rate))
        .collect();
    let normalized = scores.map_rows(|i, row| {
        let denom = (updated[i].var + epsilon).sqrt();
        row.iter().map(|s| s / denom).collect()
    });
    Ok((normalized, updated))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStrategy {
    Local,
    Moving,
    None,
}

/// Index of the largest value; ties go to the lowest index. Returns 0 for
/// an empty input.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Index of the best normalized column sum; ties go to the lowest index.
pub fn select_candidate(normalized: &ScoreMatrix) -> usize {
    argmax_lowest(normalized.column_sums())
}

/// Picks the best candidate and returns `(1 - rate) * w + rate * best`
/// together with the chosen index. Choosing a candidate identical to `w`
/// returns `w` unchanged.
pub fn select_and_smooth(
    normalized: &ScoreMatrix,
    candidates: &[Weighting],
    w: &Weighting,
    rate: f64,
) -> Result<(Weighting, usize)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    Error::check_len(candidates.len(), normalized.candidates())?;
    for c in candidates {
        Error::check_len(w.len(), c.len())?;
    }
    let chosen = select_candidate(normalized);
    let best = &candidates[chosen];
    if best == w {
        return Ok((w.clone(), chosen));
    }
    let blended = w
        .as_slice()
        .iter()
        .zip(best.as_slice())
        .map(|(a, b)| (1.0 - rate) * a + rate * b)
        .collect();
    Ok((Weighting::new(blended)?, chosen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvParams {
    /// Candidates scored per FV round (`T`).
    pub candidates: usize,
    pub epsilon: f64,
    /// Blend rate of the chosen candidate (`φ`).
    pub smooth_rate: f64,
    /// Update rate of the moving statistics (`γ`).
    pub moving_rate: f64,
    pub norm: NormStrategy,
    /// Training rounds between FV rounds.
    pub fv_every: usize,
}

impl Default for FvParams {
    fn default() -> Self {
        Self {
            candidates: 3,
            epsilon: 0.001,
            smooth_rate: 0.01,
            moving_rate: 0.01,
            norm: NormStrategy::Local,
            fv_every: 1,
        }
    }
}

impl FvParams {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::config("fv_params.candidates", "must be >= 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(
                "fv_params.epsilon",
                format!("must be finite and > 0, got {}", self.epsilon),
            ));
        }
        for (name, v) in [("smooth_rate", self.smooth_rate), ("moving_rate", self.moving_rate)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(
                    format!("fv_params.{name}"),
                    format!("must lie in (0, 1], got {v}"),
                ));
            }
        }
        if self.fv_every == 0 {
            return Err(Error::config("fv_params.fv_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// Anything that can judge an aggregated backbone. Higher is better; loss
/// based scorers must negate.
pub trait Scorer: Send + Sync {
    fn score(&self, backbone: &ParamVec) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&ParamVec) -> Result<f64> + Send + Sync,
{
    fn score(&self, backbone: &ParamVec) -> Result<f64> {
        self(backbone)
    }
}

pub struct ValidatorState {
    pub id: usize,
    pub scorer: Box<dyn Scorer>,
    pub stats: MovingStats,
}

impl ValidatorState {
    pub fn new(id: usize, scorer: Box<dyn Scorer>) -> Self {
        Self {
            id,
            scorer,
            stats: MovingStats::default(),
        }
    }
}

impl std::fmt::Debug for ValidatorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValidatorState")
            .field("id", &self.id)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

/// A verification pair inside one fold: sample indices and whether they
/// share a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Per fold: every same-class pair plus an equal number of different-class
/// pairs drawn without replacement.
pub fn build_pairs<R: Rng + ?Sized>(shard: &ValidationShard, rng: &mut R) -> Result<Vec<Vec<Pair>>> {
    if shard.folds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "shard {} has {} folds, need at least 2",
            shard.owner,
            shard.folds.len()
        )));
    }
    shard
        .folds
        .iter()
        .enumerate()
        .map(|(f, fold)| {
            let n = fold.len();
            let mut same = Vec::new();
            let mut diff = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    let pair = Pair {
                        a,
                        b,
                        same: fold.labels[a] == fold.labels[b],
                    };
                    if pair.same {
                        same.push(pair);
                    } else {
                        diff.push(pair);
                    }
                }
            }
            if same.is_empty() || diff.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "fold {f} of shard {} cannot form both same- and different-class pairs",
                    shard.owner
                )));
            }
            diff.shuffle(rng);
            diff.truncate(same.len());
            same.extend(diff);
            Ok(same)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Threshold maximizing accuracy of `sim > threshold <=> same` on `pairs`.
/// Candidates are midpoints between consecutive distinct similarities plus
/// one below the minimum; ties keep the lowest threshold.
fn best_threshold(pairs: &mut [(f64, bool)]) -> f64 {
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let positives = pairs.iter().filter(|p| p.1).count();
    // Threshold below everything: all predicted "same".
    let mut correct = positives;
    let mut best = (correct, pairs.first().map_or(0.0, |p| p.0) - 1.0);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let thr = if i < pairs.len() {
            0.5 * (v + pairs[i].0)
        } else {
            v + 1.0
        };
        if correct > best.0 {
            best = (correct, thr);
        }
    }
    best.1
}

/// Fold-held-out verification accuracy: for every fold the threshold is
/// chosen on the other folds and accuracy measured on the fold itself.
pub fn verification_accuracy(embeddings: &[Matrix], pairs: &[Vec<Pair>]) -> Result<f64> {
    Error::check_len(embeddings.len(), pairs.len())?;
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let sims: Vec<Vec<(f64, bool)>> = embeddings
        .iter()
        .zip(pairs)
        .map(|(e, ps)| {
            ps.iter()
                .map(|p| (cosine(e.row(p.a), e.row(p.b)), p.same))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for (held, fold) in sims.iter().enumerate() {
        let mut train: Vec<(f64, bool)> = sims
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != held)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        let thr = best_threshold(&mut train);
        let hits = fold.iter().filter(|(s, same)| (*s > thr) == *same).count();
        total += hits as f64 / fold.len() as f64;
    }
    Ok(total / sims.len() as f64)
}

/// Verification score of backbone `theta` on `shard` with pairs drawn from `rng`.
pub fn score_verification<R: Rng + ?Sized>(
    theta: &ParamVec,
    shard: &ValidationShard,
    spec: &BackboneSpec,
    rng: &mut R,
) -> Result<f64> {
    let pairs = build_pairs(shard, rng)?;
    score_with_pairs(theta, shard, spec, &pairs)
}

fn score_with_pairs(
    theta: &ParamVec,
    shard: &ValidationShard,
    spec: &BackboneSpec,
    pairs: &[Vec<Pair>],
) -> Result<f64> {
    let embeddings = shard
        .folds
        .iter()
        .map(|f| forward_features(spec, theta, &f.inputs))
        .collect::<Result<Vec<_>>>()?;
    verification_accuracy(&embeddings, pairs)
}

/// Top-1 accuracy of `theta` + `omega_ref` over the whole shard.
pub fn score_accuracy(
    theta: &ParamVec,
    omega_ref: &ParamVec,
    shard: &ValidationShard,
    b_spec: &BackboneSpec,
    h_spec: &HeadSpec,
) -> Result<f64> {
    if h_spec.num_classes != shard.num_classes {
        return Err(Error::Dimension(format!(
            "head has {} classes, shard has {}",
            h_spec.num_classes, shard.num_classes
        )));
    }
    let pooled = shard.pooled()?;
    if pooled.is_empty() {
        return Err(Error::Empty("shard"));
    }
    let feats = forward_features(b_spec, theta, &pooled.inputs)?;
    let mut correct = 0usize;
    for (i, &label) in pooled.labels.iter().enumerate() {
        let logits = head_logits(h_spec, omega_ref, feats.row(i))?;
        let mut arg = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[arg] {
                arg = c;
            }
        }
        correct += usize::from(arg == label);
    }
    Ok(correct as f64 / pooled.len() as f64)
}

/// Verification scorer with its pairs fixed at construction, so repeated
/// scoring of the same backbone is deterministic.
#[derive(Clone, Debug)]
pub struct VerificationScorer {
    shard: ValidationShard,
    spec: BackboneSpec,
    pairs: Vec<Vec<Pair>>,
}

impl VerificationScorer {
    pub fn new<R: Rng + ?Sized>(shard: ValidationShard, spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        let pairs = build_pairs(&shard, rng)?;
        Ok(Self { shard, spec, pairs })
    }

    pub fn shard(&self) -> &ValidationShard {
        &self.shard
    }
}

impl Scorer for VerificationScorer {
    fn score(&self, backbone: &ParamVec) -> Result<f64> {
        score_with_pairs(backbone, &self.shard, &self.spec, &self.pairs)
    }
}

/// Everything one FV round saw and decided.
#[derive(Clone, Debug, PartialEq)]
pub struct FvRecord {
    pub candidates: Vec<Weighting>,
    /// Checksum of each candidate's aggregated backbone (what validators received).
    pub aggregate_checksums: Vec<u64>,
    pub raw: ScoreMatrix,
    pub normalized: ScoreMatrix,
    pub chosen: usize,
    pub weighting: Weighting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvRound {
    /// Weighting to apply; equals the input weighting when the round aborted.
    pub weighting: Weighting,
    pub record: Option<FvRecord>,
    pub failure: Option<String>,
}

fn score_all(validators: &[ValidatorState], aggregates: &[ParamVec]) -> Vec<Vec<Result<f64>>> {
    let score_row = |v: &ValidatorState| -> Vec<Result<f64>> {
        aggregates.iter().map(|agg| v.scorer.score(agg)).collect()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        validators.par_iter().map(score_row).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        validators.iter().map(score_row).collect()
    }
}

/// One FV round over a frozen snapshot of the trainers' backbones.
///
/// Candidate draws consume `rng` before any scoring, so the random stream
/// does not depend on validator outcomes. If any validator fails, the
/// round is abandoned: the returned weighting is `w` and no moving
/// statistics change.
pub fn fv_round<R: Rng + ?Sized>(
    snapshot: &[ParamVec],
    w: &Weighting,
    validators: &mut [ValidatorState],
    params: &FvParams,
    rng: &mut R,
) -> Result<FvRound> {
    params.validate()?;
    Error::check_len(snapshot.len(), w.len())?;
    if validators.is_empty() {
        return Err(Error::Empty("validators"));
    }
    let mut candidates = Vec::with_capacity(params.candidates);
    candidates.push(w.clone());
    for _ in 1..params.candidates {
        candidates.push(sample_simplex(rng, w.len())?);
    }
    let aggregates = candidates
        .iter()
        .map(|c| weighted_sum(snapshot, c))
        .collect::<Result<Vec<_>>>()?;

    let mut raw = Vec::with_capacity(validators.len());
    for (v, row) in validators.iter().zip(score_all(validators, &aggregates)) {
        match row.into_iter().collect::<Result<Vec<f64>>>() {
            Ok(r) if r.iter().all(|s| s.is_finite()) => raw.push(r),
            Ok(_) => {
                return Ok(aborted(w, v.id, "non-finite score".into()));
            }
            Err(e) => return Ok(aborted(w, v.id, e.to_string())),
        }
    }
    let raw = ScoreMatrix::new(raw)?;
    let normalized = match params.norm {
        NormStrategy::Local => normalize_local(&raw, params.epsilon),
        NormStrategy::None => raw.clone(),
        NormStrategy::Moving => {
            let stats: Vec<MovingStats> = validators.iter().map(|v| v.stats).collect();
            let (n, updated) = normalize_moving(&raw, &stats, params.moving_rate, params.epsilon)?;
            for (v, s) in validators.iter_mut().zip(updated) {
                v.stats = s;
            }
            n
        }
    };
    let (weighting, chosen) = select_and_smooth(&normalized, &candidates, w, params.smooth_rate)?;
    Ok(FvRound {
        weighting: weighting.clone(),
        record: Some(FvRecord {
            aggregate_checksums: aggregates.iter().map(ParamVec::checksum).collect(),
            candidates,
            raw,
            normalized,
            chosen,
            weighting,
        }),
        failure: None,
    })
}

fn aborted(w: &Weighting, validator: usize, reason: String) -> FvRound {
    FvRound {
        weighting: w.clone(),
        record: None,
        failure: Some(
            Error::Validator { validator, reason }.to_string(),
        ),
    }
}

/// One lattice point of a grid search with its raw per-validator scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub weighting: Weighting,
    pub scores: Vec<f64>,
}

impl GridPoint {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// The points `(i, j, k) / resolution` with `i + j + k = resolution`,
/// ordered by `i` then `j`.
pub fn simplex_lattice(resolution: usize) -> Vec<Weighting> {
    let r = resolution as f64;
    let mut points = Vec::new();
    for i in 0..=resolution {
        for j in 0..=resolution - i {
            let k = resolution - i - j;
            points.push(Weighting(vec![i as f64 / r, j as f64 / r, k as f64 / r]));
        }
    }
    points
}

/// Exhaustive evaluation of every 3-party lattice weighting. Scores are
/// left unnormalized.
pub fn grid_search(
    snapshot: &[ParamVec],
    validators: &[ValidatorState],
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if snapshot.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "grid search needs exactly 3 backbones, got {}",
            snapshot.len()
        )));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("resolution must be >= 2, got {resolution}")));
    }
    let eval = |w: Weighting| -> Result<GridPoint> {
        let agg = weighted_sum(snapshot, &w)?;
        let scores = validators
            .iter()
            .map(|v| v.scorer.score(&agg))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridPoint { weighting: w, scores })
    };
    let lattice = simplex_lattice(resolution);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        lattice.into_par_iter().map(eval).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        lattice.into_iter().map(eval).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Batch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sm(rows: &[&[f64]]) -> ScoreMatrix {
        ScoreMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn w(v: &[f64]) -> Weighting {
        Weighting::new(v.to_vec()).unwrap()
    }

    #[test]
    fn weighting_renormalizes_and_validates() {
        let x = w(&[2.0, 6.0]);
        assert_eq!(x.as_slice(), &[0.25, 0.75]);
        assert!(Weighting::new(vec![]).is_err());
        assert!(Weighting::new(vec![0.0, 0.0]).is_err());
        assert!(Weighting::new(vec![-0.1, 1.1]).is_err());
        assert!(Weighting::new(vec![f64::NAN]).is_err());
        assert_eq!(Weighting::proportional(&[320, 160, 80]).unwrap().as_slice()[0], 320.0 / 560.0);
    }

    #[test]
    fn simplex_samples_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_simplex(&mut rng, 1).unwrap().as_slice(), &[1.0]);
        assert!(sample_simplex(&mut rng, 0).is_err());
        for n in 2..6 {
            let s = sample_simplex(&mut rng, n).unwrap();
            assert!(s.as_slice().iter().all(|&v| v >= 0.0));
            assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn local_norm_hand_arithmetic() {
        let out = normalize_local(&sm(&[&[1.0, 2.0, 3.0]]), 0.001);
        let denom = (2.0f64 / 3.0 + 0.001).sqrt();
        let expect = [1.0 / denom, 2.0 / denom, 3.0 / denom];
        for (a, b) in out.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.row(0)[0] - 1.2238).abs() < 1e-4);
        assert!((out.row(0)[2] - 3.6714).abs() < 1e-4);
    }

    #[test]
    fn local_norm_degenerate_rows() {
        let out = normalize_local(&sm(&[&[2.0, 2.0, 2.0], &[0.0, 0.0, 0.0]]), 0.01);
        for v in out.row(0) {
            assert!((v - 2.0 / 0.1).abs() < 1e-12);
        }
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn moving_norm_rate_one_is_single_round() {
        let s = sm(&[&[1.0, 4.0, 7.0]]);
        let prior = [MovingStats::new(100.0, 50.0)];
        let (out, stats) = normalize_moving(&s, &prior, 1.0, 0.001).unwrap();
        assert_eq!(stats[0].mean, 4.0);
        assert_eq!(stats[0].var, 6.0);
        let local = normalize_local(&s, 0.001);
        for (a, b) in out.row(0).iter().zip(local.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moving_norm_tiny_rate_freezes_stats() {
        let s = sm(&[&[0.3, 0.9]]);
        let (out, _) = normalize_moving(&s, &[MovingStats::new(0.0, 1.0)], 1e-12, 0.001).unwrap();
        for (a, b) in out.row(0).iter().zip(s.row(0)) {
            assert!((a - b / 1.001f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_norm_two_round_recurrence() {
        let (_, st) = normalize_moving(&sm(&[&[0.0, 2.0]]), &[MovingStats::default()], 0.5, 0.001)
            .unwrap();
        assert_eq!(st[0], MovingStats::new(1.0, 1.0));
        let (out, st) = normalize_moving(&sm(&[&[4.0, 6.0]]), &st, 0.5, 0.001).unwrap();
        // mean = 0.5*1 + 0.5*5 = 3; var = 0.5*1 + 0.5*((4-3)^2 + (6-3)^2)/2 = 3.
        assert_eq!(st[0].mean, 3.0);
        assert_eq!(st[0].var, 3.0);
        assert!((out.row(0)[0] - 4.0 / 3.001f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn moving_norm_rejects_mismatch() {
        assert!(normalize_moving(&sm(&[&[1.0]]), &[], 0.5, 0.001).is_err());
        assert!(normalize_moving(&sm(&[&[1.0]]), &[MovingStats::default()], 0.0, 0.001).is_err());
    }

    #[test]
    fn select_and_smooth_examples() {
        let s = sm(&[&[1.0, 3.0, 2.0]]);
        let cands = [w(&[0.5, 0.5]), w(&[0.9, 0.1]), w(&[0.2, 0.8])];
        let (out, t) = select_and_smooth(&s, &cands, &w(&[0.5, 0.5]), 0.01).unwrap();
        assert_eq!(t, 1);
        assert!((out.as_slice()[0] - 0.504).abs() < 1e-12);
        assert!((out.as_slice()[1] - 0.496).abs() < 1e-12);
        let (full, _) = select_and_smooth(&s, &cands, &w(&[0.5, 0.5]), 1.0).unwrap();
        assert_eq!(full, cands[1]);
        let (tiny, _) = select_and_smooth(&s, &cands, &w(&[0.5, 0.5]), 1e-12).unwrap();
        assert!((tiny.as_slice()[0] - 0.5).abs() < 1e-11);
        assert!(select_and_smooth(&sm(&[&[1.0]]), &[], &w(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn ties_prefer_lowest_index() {
        assert_eq!(select_candidate(&sm(&[&[2.0, 2.0, 1.0], &[1.0, 1.0, 2.0]])), 0);
    }

    #[test]
    fn fv_params_validation_names_fields() {
        let p = FvParams {
            smooth_rate: 0.0,
            ..FvParams::default()
        };
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("fv_params.smooth_rate") && msg.contains("(0, 1]"), "{msg}");
    }

    fn basis(n: usize) -> Vec<ParamVec> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                ParamVec::new(v).unwrap()
            })
            .collect()
    }

    fn planted(target: usize) -> Box<dyn Scorer> {
        Box::new(move |theta: &ParamVec| Ok(theta.as_slice()[target]))
    }

    #[test]
    fn single_candidate_round_keeps_weighting() {
        let mut vals = vec![ValidatorState::new(0, planted(0))];
        let params = FvParams {
            candidates: 1,
            smooth_rate: 0.3,
            ..FvParams::default()
        };
        let start = w(&[0.2, 0.3, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = fv_round(&basis(3), &start, &mut vals, &params, &mut rng).unwrap();
        assert_eq!(out.weighting, start);
    }

    #[test]
    fn planted_preference_moves_weight_monotonically() {
        let mut vals = vec![ValidatorState::new(0, planted(0))];
        let params = FvParams {
            smooth_rate: 0.1,
            ..FvParams::default()
        };
        let mut cur = Weighting::uniform(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let next = fv_round(&basis(2), &cur, &mut vals, &params, &mut rng).unwrap();
            let rec = next.record.unwrap();
            let sums = rec.normalized.column_sums();
            assert!(sums[rec.chosen] >= sums[0]);
            assert!(next.weighting.as_slice()[0] >= cur.as_slice()[0]);
            cur = next.weighting;
        }
        assert!(cur.as_slice()[0] > 0.5);
    }

    #[test]
    fn failing_validator_leaves_weighting_and_stats() {
        let bad: Box<dyn Scorer> = Box::new(|_: &ParamVec| -> Result<f64> {
            Err(Error::InvalidArgument("offline".into()))
        });
        let mut vals = vec![ValidatorState::new(0, planted(0)), ValidatorState::new(1, bad)];
        let params = FvParams {
            norm: NormStrategy::Moving,
            ..FvParams::default()
        };
        let start = w(&[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = fv_round(&basis(2), &start, &mut vals, &params, &mut rng).unwrap();
        assert_eq!(out.weighting, start);
        assert!(out.record.is_none());
        assert!(out.failure.unwrap().contains("validator 1"));
        assert!(!vals[0].stats.initialized);
    }

    #[test]
    fn moving_mode_updates_stats_only_when_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (norm, expect) in [(NormStrategy::Moving, true), (NormStrategy::Local, false)] {
            let mut vals = vec![ValidatorState::new(0, planted(1))];
            let params = FvParams {
                norm,
                ..FvParams::default()
            };
            fv_round(&basis(2), &w(&[0.5, 0.5]), &mut vals, &params, &mut rng).unwrap();
            assert_eq!(vals[0].stats.initialized, expect);
        }
    }

    fn two_class_fold(per_class: usize, emb: &[[f64; 2]; 2]) -> (Batch, Matrix) {
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (c, e) in emb.iter().enumerate() {
            for _ in 0..per_class {
                labels.push(c);
                rows.push(e.to_vec());
            }
        }
        let m = Matrix::from_rows(&rows).unwrap();
        (Batch::new(m.clone(), labels).unwrap(), m)
    }

    fn shard_of(folds: Vec<Batch>) -> ValidationShard {
        ValidationShard {
            owner: 0,
            global_class_offset: 0,
            num_classes: 2,
            folds,
        }
    }

    #[test]
    fn perfectly_separable_embeddings_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (folds, embs): (Vec<Batch>, Vec<Matrix>) =
            (0..5).map(|_| two_class_fold(3, &[[1.0, 0.0], [-1.0, 0.0]])).unzip();
        let pairs = build_pairs(&shard_of(folds), &mut rng).unwrap();
        assert_eq!(verification_accuracy(&embs, &pairs).unwrap(), 1.0);
    }

    #[test]
    fn pair_construction_rejects_degenerate_folds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let one = Batch::new(Matrix::zeros(1, 2), vec![0]).unwrap();
        assert!(build_pairs(&shard_of(vec![one.clone(), one.clone()]), &mut rng).is_err());
        let single_class = Batch::new(Matrix::zeros(3, 2), vec![1, 1, 1]).unwrap();
        assert!(build_pairs(&shard_of(vec![single_class.clone(), single_class]), &mut rng).is_err());
        assert!(build_pairs(&shard_of(vec![one]), &mut rng).is_err());
    }

    #[test]
    fn simplex_lattice_counts() {
        assert_eq!(simplex_lattice(2).len(), 6);
        assert_eq!(simplex_lattice(10).len(), 66);
        for p in simplex_lattice(10) {
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_search_requires_three_parties() {
        let vals = vec![ValidatorState::new(0, planted(0))];
        assert!(grid_search(&basis(2), &vals, 4).is_err());
        assert!(grid_search(&basis(3), &vals, 1).is_err());
        assert_eq!(grid_search(&basis(3), &vals, 2).unwrap().len(), 6);
    }
}
