//! Synthetic cross-silo data.
//!
//! Every class is an isotropic Gaussian cluster whose mean sits on a sphere
//! of radius `class_separation`. Parties own disjoint blocks of classes
//! (party `i` owns global classes `offset_i .. offset_i + classes_i`) and
//! store labels relative to their own block. Validation and evaluation
//! shards are fresh draws from the same clusters, split into folds.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Matrix};
use crate::params::ParamVec;
use crate::rng::seeded;

const TAG_MEANS: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_VALIDATION: u64 = 3;
const TAG_EVALUATION: u64 = 4;
const TAG_QUARTERS: u64 = 5;

const FILE_MAGIC: &[u8; 4] = b"FSDS";
const FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub num_parties: usize,
    pub classes_per_party: Vec<usize>,
    /// Base number of training samples per class.
    pub samples_per_class: usize,
    /// Per-party multiplier on `samples_per_class`; creates size imbalance.
    pub party_sample_scale: Vec<f64>,
    /// Fresh samples per class in each party's validation shard.
    pub val_samples_per_class: usize,
    /// Fresh samples per class in each party's evaluation shard.
    pub eval_samples_per_class: usize,
    pub folds: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Split every party into four equal trainers sharing its classes.
    pub split_quarters: bool,
    /// Filled from the run's data seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PartitionPlan {
    fn default() -> Self {
        Self {
            num_parties: 3,
            classes_per_party: vec![8, 4, 4],
            samples_per_class: 200,
            party_sample_scale: vec![1.0, 1.0, 0.5],
            val_samples_per_class: 30,
            eval_samples_per_class: 30,
            folds: 5,
            input_dim: 16,
            class_separation: 3.0,
            noise_sigma: 1.0,
            split_quarters: false,
            seed: 0,
        }
    }
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("partition_plan.{name}");
        if self.num_parties == 0 {
            return Err(Error::config(f("num_parties"), "must be >= 1"));
        }
        if self.classes_per_party.len() != self.num_parties {
            return Err(Error::config(
                f("classes_per_party"),
                format!(
                    "has {} entries but num_parties is {}",
                    self.classes_per_party.len(),
                    self.num_parties
                ),
            ));
        }
        if self.classes_per_party.contains(&0) {
            return Err(Error::config(f("classes_per_party"), "every entry must be >= 1"));
        }
        if self.party_sample_scale.len() != self.num_parties {
            return Err(Error::config(
                f("party_sample_scale"),
                format!(
                    "has {} entries but num_parties is {}",
                    self.party_sample_scale.len(),
                    self.num_parties
                ),
            ));
        }
        if self.party_sample_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config(f("party_sample_scale"), "entries must be finite and > 0"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(f("samples_per_class"), "must be >= 1"));
        }
        if self.folds < 2 {
            return Err(Error::config(f("folds"), format!("must be >= 2, got {}", self.folds)));
        }
        for (name, n) in [
            ("val_samples_per_class", self.val_samples_per_class),
            ("eval_samples_per_class", self.eval_samples_per_class),
        ] {
            if n < self.folds {
                return Err(Error::config(
                    f(name),
                    format!("must be >= folds ({}), got {n}", self.folds),
                ));
            }
        }
        if self.input_dim == 0 {
            return Err(Error::config(f("input_dim"), "must be >= 1"));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::config(f("class_separation"), "must be finite and > 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::config(f("noise_sigma"), "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.classes_per_party.iter().sum()
    }

    pub fn train_samples_per_class(&self, party: usize) -> usize {
        ((self.samples_per_class as f64 * self.party_sample_scale[party]).round() as usize).max(1)
    }
}

/// One party's private training set.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyData {
    pub party_id: usize,
    pub global_class_offset: usize,
    pub num_classes: usize,
    /// Labels are local: `0..num_classes`.
    pub train: Batch,
}

impl PartyData {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// A held-out shard split into folds. Labels are local to the owner's class block.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationShard {
    pub owner: usize,
    pub global_class_offset: usize,
    pub num_classes: usize,
    pub folds: Vec<Batch>,
}

impl ValidationShard {
    pub fn len(&self) -> usize {
        self.folds.iter().map(Batch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All folds stacked in fold order.
    pub fn pooled(&self) -> Result<Batch> {
        let inputs = Matrix::vstack(&self.folds.iter().map(|b| &b.inputs).collect::<Vec<_>>())?;
        let labels = self.folds.iter().flat_map(|b| b.labels.iter().copied()).collect();
        Batch::new(inputs, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub input_dim: usize,
    pub parties: Vec<PartyData>,
    pub validation: Vec<ValidationShard>,
    pub evaluation: Vec<ValidationShard>,
    /// Ground-truth cluster centre of every global class.
    pub class_means: Vec<Vec<f64>>,
}

fn draw_samples<R: rand::Rng>(
    rng: &mut R,
    mean: &[f64],
    sigma: f64,
    count: usize,
    out: &mut Vec<f64>,
) {
    for _ in 0..count {
        out.extend(mean.iter().map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sigma * z
        }));
    }
}

fn holdout_shard(
    plan: &PartitionPlan,
    means: &[Vec<f64>],
    party: usize,
    offset: usize,
    per_class: usize,
    tag: u64,
) -> Result<ValidationShard> {
    let mut rng = seeded(plan.seed, &[tag, party as u64]);
    let classes = plan.classes_per_party[party];
    let mut fold_data = vec![Vec::new(); plan.folds];
    let mut fold_labels = vec![Vec::new(); plan.folds];
    for c in 0..classes {
        for j in 0..per_class {
            let fold = j % plan.folds;
            draw_samples(&mut rng, &means[offset + c], plan.noise_sigma, 1, &mut fold_data[fold]);
            fold_labels[fold].push(c);
        }
    }
    let folds = fold_data
        .into_iter()
        .zip(fold_labels)
        .map(|(d, l)| Batch::new(Matrix::new(l.len(), plan.input_dim, d)?, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationShard {
        owner: party,
        global_class_offset: offset,
        num_classes: classes,
        folds,
    })
}

/// Draws the full synthetic federation described by `plan`. Identical plans
/// give bitwise identical datasets.
pub fn generate(plan: &PartitionPlan) -> Result<Dataset> {
    plan.validate()?;
    let total = plan.total_classes();
    let mut mean_rng = seeded(plan.seed, &[TAG_MEANS]);
    let class_means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let dir: Vec<f64> = (0..plan.input_dim)
                .map(|_| StandardNormal.sample(&mut mean_rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter().map(|v| plan.class_separation * v / norm).collect()
        })
        .collect();

    let mut parties = Vec::with_capacity(plan.num_parties);
    let mut validation = Vec::with_capacity(plan.num_parties);
    let mut evaluation = Vec::with_capacity(plan.num_parties);
    let mut offset = 0;
    for (party, &classes) in plan.classes_per_party.iter().enumerate() {
        let per_class = plan.train_samples_per_class(party);
        let mut rng = seeded(plan.seed, &[TAG_TRAIN, party as u64]);
        let mut data = Vec::with_capacity(classes * per_class * plan.input_dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for c in 0..classes {
            draw_samples(&mut rng, &class_means[offset + c], plan.noise_sigma, per_class, &mut data);
            labels.extend(std::iter::repeat_n(c, per_class));
        }
        parties.push(PartyData {
            party_id: party,
            global_class_offset: offset,
            num_classes: classes,
            train: Batch::new(Matrix::new(labels.len(), plan.input_dim, data)?, labels)?,
        });
        validation.push(holdout_shard(
            plan,
            &class_means,
            party,
            offset,
            plan.val_samples_per_class,
            TAG_VALIDATION,
        )?);
        evaluation.push(holdout_shard(
            plan,
            &class_means,
            party,
            offset,
            plan.eval_samples_per_class,
            TAG_EVALUATION,
        )?);
        offset += classes;
    }
    Ok(Dataset {
        seed: plan.seed,
        input_dim: plan.input_dim,
        parties,
        validation,
        evaluation,
        class_means,
    })
}

/// Shuffles a party's samples and deals them into four near-equal shards;
/// the first `n % 4` shards get one extra sample. Shards keep the party's
/// id and class block.
pub fn split_quarters(party: &PartyData, seed: u64) -> Result<Vec<PartyData>> {
    let n = party.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "party {} has {n} samples, need at least 4 to split",
            party.party_id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, &[TAG_QUARTERS, party.party_id as u64]));
    let mut shards = Vec::with_capacity(4);
    let mut start = 0;
    for q in 0..4 {
        let size = n / 4 + usize::from(q < n % 4);
        shards.push(PartyData {
            train: party.train.select(&order[start..start + size]),
            ..party.clone()
        });
        start += size;
    }
    Ok(shards)
}

fn write_u64<W: Write>(out: &mut W, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_batch<W: Write>(out: &mut W, batch: &Batch) -> Result<()> {
    ParamVec::new(batch.inputs.as_slice().to_vec())?.write_record(out)?;
    ParamVec::new(batch.labels.iter().map(|&l| l as f64).collect())?.write_record(out)?;
    Ok(())
}

fn read_batch<R: Read>(input: &mut R, dim: usize) -> Result<Batch> {
    let inputs = ParamVec::read_record(input)?.into_vec();
    let labels: Vec<usize> = ParamVec::read_record(input)?
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(Error::Format(format!("bad label {l}")))
            }
        })
        .collect::<Result<_>>()?;
    if inputs.len() != labels.len() * dim {
        return Err(Error::Format("input record does not match label count".into()));
    }
    Batch::new(Matrix::new(labels.len(), dim, inputs)?, labels)
}

fn write_shards<W: Write>(out: &mut W, shards: &[ValidationShard]) -> Result<()> {
    write_u64(out, shards.len() as u64)?;
    for s in shards {
        for v in [s.owner, s.global_class_offset, s.num_classes, s.folds.len()] {
            write_u64(out, v as u64)?;
        }
        for fold in &s.folds {
            write_batch(out, fold)?;
        }
    }
    Ok(())
}

fn read_shards<R: Read>(input: &mut R, dim: usize) -> Result<Vec<ValidationShard>> {
    let count = read_u64(input)? as usize;
    (0..count)
        .map(|_| {
            let owner = read_u64(input)? as usize;
            let global_class_offset = read_u64(input)? as usize;
            let num_classes = read_u64(input)? as usize;
            let folds = read_u64(input)? as usize;
            Ok(ValidationShard {
                owner,
                global_class_offset,
                num_classes,
                folds: (0..folds).map(|_| read_batch(input, dim)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Writes `data` as: magic `FSDS`, `u32` version, then `u64` seed,
/// input_dim and party count, the parties (id, class offset, class count,
/// inputs record, labels record), validation and evaluation shards, and the
/// class means. Labels are stored as `f64` records.
pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    out.write_all(FILE_MAGIC)?;
    out.write_all(&FILE_VERSION.to_le_bytes())?;
    write_u64(out, data.seed)?;
    write_u64(out, data.input_dim as u64)?;
    write_u64(out, data.parties.len() as u64)?;
    for p in &data.parties {
        for v in [p.party_id, p.global_class_offset, p.num_classes] {
            write_u64(out, v as u64)?;
        }
        write_batch(out, &p.train)?;
    }
    write_shards(out, &data.validation)?;
    write_shards(out, &data.evaluation)?;
    write_u64(out, data.class_means.len() as u64)?;
    for m in &data.class_means {
        ParamVec::new(m.clone())?.write_record(out)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FILE_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    if u32::from_le_bytes(version) != FILE_VERSION {
        return Err(Error::Format("unsupported dataset version".into()));
    }
    let seed = read_u64(input)?;
    let input_dim = read_u64(input)? as usize;
    let n_parties = read_u64(input)? as usize;
    let parties = (0..n_parties)
        .map(|_| {
            let party_id = read_u64(input)? as usize;
            let global_class_offset = read_u64(input)? as usize;
            let num_classes = read_u64(input)? as usize;
            Ok(PartyData {
                party_id,
                global_class_offset,
                num_classes,
                train: read_batch(input, input_dim)?,
            })
        })
        .collect::<Result<_>>()?;
    let validation = read_shards(input, input_dim)?;
    let evaluation = read_shards(input, input_dim)?;
    let n_means = read_u64(input)? as usize;
    let class_means = (0..n_means)
        .map(|_| Ok(ParamVec::read_record(input)?.into_vec()))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        seed,
        input_dim,
        parties,
        validation,
        evaluation,
        class_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn plan(seed: u64) -> PartitionPlan {
        PartitionPlan {
            seed,
            ..PartitionPlan::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&plan(5)).unwrap(), generate(&plan(5)).unwrap());
        assert_ne!(generate(&plan(5)).unwrap(), generate(&plan(6)).unwrap());
    }

    #[test]
    fn vanishing_noise_collapses_samples_onto_means() {
        let p = PartitionPlan {
            noise_sigma: 1e-300,
            ..plan(1)
        };
        let d = generate(&p).unwrap();
        for party in &d.parties {
            for (i, &l) in party.train.labels.iter().enumerate() {
                assert_eq!(party.train.inputs.row(i), &d.class_means[party.global_class_offset + l][..]);
            }
        }
    }

    #[test]
    fn class_blocks_are_disjoint_and_labels_local() {
        let d = generate(&plan(2)).unwrap();
        let mut seen = HashSet::new();
        for p in &d.parties {
            assert!(p.train.labels.iter().all(|&l| l < p.num_classes));
            let globals: HashSet<usize> =
                p.train.labels.iter().map(|l| l + p.global_class_offset).collect();
            assert_eq!(globals.len(), p.num_classes);
            assert!(seen.is_disjoint(&globals));
            seen.extend(globals);
        }
    }

    #[test]
    fn sizes_follow_scale() {
        let d = generate(&plan(3)).unwrap();
        let sizes: Vec<usize> = d.parties.iter().map(PartyData::len).collect();
        assert_eq!(sizes, vec![1600, 800, 400]);
    }

    #[test]
    fn folds_partition_the_shard() {
        let p = plan(4);
        let d = generate(&p).unwrap();
        for (s, classes) in d.validation.iter().zip(&p.classes_per_party) {
            assert_eq!(s.folds.len(), 5);
            assert_eq!(s.len(), classes * p.val_samples_per_class);
            // Every sample row appears in exactly one fold.
            let mut rows = HashSet::new();
            for f in &s.folds {
                for i in 0..f.len() {
                    let key: Vec<u64> = f.inputs.row(i).iter().map(|v| v.to_bits()).collect();
                    assert!(rows.insert(key));
                }
                assert_eq!(f.labels.iter().collect::<HashSet<_>>().len(), *classes);
            }
        }
    }

    #[test]
    fn holdout_samples_do_not_overlap_training() {
        let d = generate(&plan(8)).unwrap();
        let p = &d.parties[1];
        let train: HashSet<Vec<u64>> = (0..p.len())
            .map(|i| p.train.inputs.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        for shard in [&d.validation[1], &d.evaluation[1]] {
            let pooled = shard.pooled().unwrap();
            for i in 0..pooled.len() {
                let key: Vec<u64> = pooled.inputs.row(i).iter().map(|v| v.to_bits()).collect();
                assert!(!train.contains(&key));
            }
        }
    }

    #[test]
    fn class_sample_means_converge() {
        let p = plan(9);
        let d = generate(&p).unwrap();
        let party = &d.parties[0];
        let n = p.train_samples_per_class(0);
        let bound = 3.0 * p.noise_sigma / (n as f64).sqrt();
        for c in 0..party.num_classes {
            let rows: Vec<usize> = (0..party.len()).filter(|&i| party.train.labels[i] == c).collect();
            for k in 0..p.input_dim {
                let mean = rows.iter().map(|&i| party.train.inputs.row(i)[k]).sum::<f64>() / n as f64;
                let truth = d.class_means[party.global_class_offset + c][k];
                assert!((mean - truth).abs() < bound, "class {c} dim {k}");
            }
        }
    }

    #[test]
    fn well_separated_classes_are_nearest_mean_separable() {
        let p = PartitionPlan {
            num_parties: 1,
            classes_per_party: vec![2],
            party_sample_scale: vec![1.0],
            samples_per_class: 500,
            class_separation: 10.0,
            noise_sigma: 0.5,
            ..plan(10)
        };
        let d = generate(&p).unwrap();
        let party = &d.parties[0];
        let correct = (0..party.len())
            .filter(|&i| {
                let x = party.train.inputs.row(i);
                let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let pred = if dist(&d.class_means[0]) <= dist(&d.class_means[1]) { 0 } else { 1 };
                pred == party.train.labels[i]
            })
            .count();
        assert!(correct as f64 / party.len() as f64 > 0.99);
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let p = PartitionPlan {
            classes_per_party: vec![4, 4],
            ..plan(0)
        };
        let err = generate(&p).unwrap_err().to_string();
        assert!(err.contains("classes_per_party"), "{err}");
    }

    fn party_with(n: usize) -> PartyData {
        let data = (0..n).map(|i| i as f64).collect();
        PartyData {
            party_id: 0,
            global_class_offset: 0,
            num_classes: 3,
            train: Batch::new(Matrix::new(n, 1, data).unwrap(), (0..n).map(|i| i % 3).collect())
                .unwrap(),
        }
    }

    #[test]
    fn quarters_split_evenly() {
        let sizes: Vec<usize> = split_quarters(&party_with(400), 1)
            .unwrap()
            .iter()
            .map(PartyData::len)
            .collect();
        assert_eq!(sizes, vec![100; 4]);
        let sizes: Vec<usize> = split_quarters(&party_with(402), 1)
            .unwrap()
            .iter()
            .map(PartyData::len)
            .collect();
        assert_eq!(sizes, vec![101, 101, 100, 100]);
        assert!(split_quarters(&party_with(3), 1).is_err());
    }

    #[test]
    fn quarters_cover_the_original_multiset() {
        let party = party_with(37);
        let mut seen: Vec<(u64, usize)> = split_quarters(&party, 9)
            .unwrap()
            .iter()
            .flat_map(|q| {
                (0..q.len())
                    .map(|i| (q.train.inputs.row(i)[0].to_bits(), q.train.labels[i]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut orig: Vec<(u64, usize)> = (0..party.len())
            .map(|i| (party.train.inputs.row(i)[0].to_bits(), party.train.labels[i]))
            .collect();
        seen.sort();
        orig.sort();
        assert_eq!(seen, orig);
    }

    #[test]
    fn dataset_file_round_trip() {
        let d = generate(&plan(11)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
        buf[0] = b'X';
        assert!(read_dataset(&mut buf.as_slice()).is_err());
    }
}
