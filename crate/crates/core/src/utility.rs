//! Downstream utility of synthetic data: train a small classifier on
//! generated (optionally mixed with real) points and score it on held-out
//! real and shifted real data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::LabeledSet;
use crate::diffusion::{sample, DenoiserModel, NoiseSchedule, SampleConfig};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Mlp, Optimizer, OptimizerKind, RngStream, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 1500, batch_size: 128, learning_rate: 3e-3, optimizer: OptimizerKind::Adam }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub mlp: Mlp,
    pub num_classes: usize,
}

impl Classifier {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.mlp.forward(x)
    }

    /// Argmax class per row, lowest class on ties.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .iter_rows()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::contract("accuracy of an empty set"));
        }
        let pred = self.predict(&data.points)?;
        let hits = pred.iter().zip(&data.classes).filter(|(p, c)| p == c).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Cross-entropy training from a zero-head initialization, so an untrained
/// classifier scores every class equally.
pub fn train_classifier(data: &LabeledSet, spec: &ClassifierSpec, seed: u64) -> Result<Classifier> {
    let present = data.class_counts().iter().filter(|&&n| n > 0).count();
    if present < 2 {
        return Err(Error::contract(format!("classifier training needs >= 2 classes, got {present}")));
    }
    let mut rng = RngStream::new(seed);
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(&spec.hidden);
    sizes.push(data.num_classes);
    let mut mlp = Mlp::new(&sizes, &mut rng, true)?;
    let mut opt = Optimizer::new(spec.optimizer, spec.learning_rate);
    for step in 0..spec.steps {
        let rows: Vec<usize> = (0..spec.batch_size).map(|_| rng.below(data.len())).collect();
        let labels: Vec<usize> = rows.iter().map(|&r| data.classes[r]).collect();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.constant(data.points.select_rows(&rows));
        let logits = mlp.forward_tape(&mut tape, &vars, x)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss).as_slice()[0];
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        let grads = tape.grad(loss, &vars.all())?;
        opt.apply(&mut mlp.params_mut(), &grads)?;
    }
    Ok(Classifier { mlp, num_classes: data.num_classes })
}

/// Source of labeled synthetic points.
pub trait SyntheticGenerator {
    /// One point per label.
    fn generate(&self, labels: &[usize], rng: &mut RngStream) -> Result<Matrix>;
}

/// Draws with replacement from a pool of real points of the requested class;
/// the oracle control for utility runs.
#[derive(Clone, Debug)]
pub struct PoolGenerator {
    pub pool: LabeledSet,
}

impl SyntheticGenerator for PoolGenerator {
    fn generate(&self, labels: &[usize], rng: &mut RngStream) -> Result<Matrix> {
        let by_class: Vec<Vec<usize>> = (0..self.pool.num_classes).map(|c| self.pool.rows_of_class(c)).collect();
        let mut rows = Vec::with_capacity(labels.len());
        for &c in labels {
            let cand = by_class.get(c).filter(|v| !v.is_empty()).ok_or_else(|| Error::contract(format!("pool has no points of class {c}")))?;
            rows.push(cand[rng.below(cand.len())]);
        }
        Ok(self.pool.points.select_rows(&rows))
    }
}

/// Samples the diffusion model one class at a time, in batches of at most
/// `batch` rows (0 means one batch per class), so guidance for a batch only
/// sees that class's exemplars.
#[derive(Clone, Debug)]
pub struct DiffusionGenerator<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
    pub config: SampleConfig,
    pub batch: usize,
}

impl SyntheticGenerator for DiffusionGenerator<'_> {
    fn generate(&self, labels: &[usize], rng: &mut RngStream) -> Result<Matrix> {
        let mut out = Matrix::zeros(labels.len(), self.model.data_dim());
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let size = if self.batch == 0 { rows.len() } else { self.batch };
            let class_rng = rng.derive(c as u64);
            for (b, chunk) in rows.chunks(size).enumerate() {
                let mut batch_rng = class_rng.derive(b as u64);
                let s = sample(self.model, self.sched, &vec![c; chunk.len()], &self.config, &mut batch_rng)?;
                for (k, &r) in chunk.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(s.points.row(k));
                }
            }
        }
        Ok(out)
    }
}

/// `n` labels spread evenly over `classes`, the first `n % classes` classes
/// getting one extra.
pub fn balanced_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityRun {
    pub seed: u64,
    /// `synthetic` or `mixed`.
    pub mix: String,
    pub n_synth: usize,
    pub n_real: usize,
    pub acc_id: f64,
    pub acc_ood: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct UtilityData<'a> {
    /// Real training pool for the mixed setting.
    pub real_train: &'a LabeledSet,
    pub validation: &'a LabeledSet,
    /// Group-shifted validation set.
    pub shifted_validation: &'a LabeledSet,
}

/// For each seed: generate `n_synth` balanced synthetic points, add
/// `n_real` random real points, train a classifier and score it.
pub fn utility_experiment(
    generator: &dyn SyntheticGenerator,
    data: UtilityData<'_>,
    n_synth: usize,
    n_real: usize,
    spec: &ClassifierSpec,
    seeds: &[u64],
) -> Result<Vec<UtilityRun>> {
    let classes = data.validation.num_classes;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = RngStream::with_stream(seed, 0x0711);
        let labels = balanced_labels(n_synth, classes);
        let points = generator.generate(&labels, &mut rng)?;
        let mut set = LabeledSet::new(points, labels, None, classes, 1)?;
        if n_real > 0 {
            if n_real > data.real_train.len() {
                return Err(Error::contract(format!("n_real {n_real} exceeds the real pool of {}", data.real_train.len())));
            }
            let mut rows = rng.choose(data.real_train.len(), n_real);
            rows.sort_unstable();
            let mut real = data.real_train.subset(&rows);
            real.groups = None;
            real.num_groups = 1;
            set = set.concat(&real)?;
        }
        let clf = train_classifier(&set, spec, seed)?;
        runs.push(UtilityRun {
            seed,
            mix: String::from(if n_real > 0 && n_synth > 0 { "mixed" } else if n_synth > 0 { "synthetic" } else { "real" }),
            n_synth,
            n_real,
            acc_id: clf.accuracy(data.validation)?,
            acc_ood: clf.accuracy(data.shifted_validation)?,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};

    fn blobs(seed: u64) -> LabeledSet {
        let spec = DatasetSpec {
            classes: 2,
            modes: 1,
            spread: 0.3,
            centers: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            train_per_class: 200,
            val_per_class: 1,
            seed,
            sample_seed: Some(seed),
            ..DatasetSpec::default()
        };
        generate(&spec).unwrap()
    }

    fn quick() -> ClassifierSpec {
        ClassifierSpec { steps: 200, ..ClassifierSpec::default() }
    }

    #[test]
    fn separable_blobs() {
        let clf = train_classifier(&blobs(1), &quick(), 0).unwrap();
        assert!(clf.accuracy(&blobs(2)).unwrap() >= 0.99);
    }

    #[test]
    fn untrained_is_chance() {
        let clf = train_classifier(&blobs(1), &ClassifierSpec { steps: 0, ..quick() }, 0).unwrap();
        assert_eq!(clf.accuracy(&blobs(2)).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        let mut d = blobs(1);
        d.classes.iter_mut().for_each(|c| *c = 0);
        assert!(matches!(train_classifier(&d, &quick(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic() {
        let a = train_classifier(&blobs(1), &quick(), 5).unwrap();
        let b = train_classifier(&blobs(1), &quick(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn real_only_row() {
        let train = blobs(1);
        let val = blobs(2);
        let gen = PoolGenerator { pool: train.clone() };
        let data = UtilityData { real_train: &train, validation: &val, shifted_validation: &val };
        let runs = utility_experiment(&gen, data, 0, 100, &quick(), &[3]).unwrap();
        assert_eq!(runs[0].mix, "real");
        assert!(runs[0].acc_id >= 0.99);
    }
}
