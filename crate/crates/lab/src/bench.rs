//! The 2-D class-conditional benchmark shared by the experiment runner and
//! the acceptance suite.
//!
//! The generator is pretrained on a mode-skewed version of each class while
//! validation sets and exemplars come from the balanced target distribution,
//! so an unguided sampler under-covers rare modes and exemplar guidance has
//! a gap to close.

use chamferlab_core::chamfer::GuidanceConfig;
use chamferlab_core::datagen::{generate, split, DatasetSpec, ExemplarSet, LabeledSet, Split};
use chamferlab_core::diffusion::{train, DenoiserModel, NoiseSchedule, SampleConfig};
use chamferlab_core::evalmetrics::{evaluate, f1_pc, GroupLabels, MetricsReport};
use chamferlab_core::finetune::{refl_chamfer_finetune, ReflConfig};
use chamferlab_core::featspace::{Projector, Source};
use chamferlab_core::numkit::RngStream;
use chamferlab_core::utility::{balanced_labels, utility_experiment, ClassifierSpec, DiffusionGenerator, SyntheticGenerator, UtilityData, UtilityRun};
use anyhow::Result;

use crate::config::{GuidanceFile, Optim, ScheduleFile, TrainFile};

/// Guidance config from a guidance file over the given exemplars.
pub fn guidance_with(file: &GuidanceFile, projector: Projector, exemplars: &ExemplarSet) -> Result<GuidanceConfig> {
    let labeled = exemplars.to_labeled();
    let feats = projector.project(&labeled.points, Source::Real)?;
    file.build(projector, feats, labeled.classes)
}

/// Initializes and trains a denoiser on `data` as `cfg` describes.
pub fn train_generator(data: &LabeledSet, cfg: &TrainFile) -> Result<(DenoiserModel, NoiseSchedule)> {
    let sched = cfg.schedule.build(cfg.steps)?;
    let init = DenoiserModel::new(cfg.denoiser(data.dim(), data.num_classes), &mut RngStream::with_stream(cfg.seed, 0x1417))?;
    let model = train(&init, data, &sched, &cfg.train_config())?.model;
    Ok((model, sched))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    /// Target geometry; the generator's training set swaps in
    /// `model.pretrain_weights` as mode weights.
    pub dataset: DatasetSpec,
    /// Architecture, schedule and pretraining loop.
    pub model: TrainFile,
    pub val_per_class: usize,
    pub gen_per_class: usize,
    /// Rows per sampling batch within a class.
    pub gen_batch: usize,
    pub eval_k: usize,
    pub omegas: Vec<f64>,
    pub gamma: f64,
    pub g_freq: usize,
    /// Exemplars per class for the guided and fine-tuned runs.
    pub k: usize,
    pub refl: ReflConfig,
    /// Synthetic points per class in the utility comparison.
    pub utility_per_class: usize,
    pub classifier: ClassifierSpec,
    /// Translation applied to the validation set for the OOD accuracy.
    pub ood_shift: Vec<f64>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                classes: 8,
                modes: 4,
                spread: 0.1,
                train_per_class: 1500,
                val_per_class: 500,
                seed: 11,
                ..DatasetSpec::default()
            },
            model: TrainFile {
                steps: 40,
                schedule: ScheduleFile { kind: "linear".into(), beta_start: 1e-4, beta_end: 0.15 },
                hidden: vec![128, 128, 128],
                train_steps: 4000,
                batch_size: 128,
                learning_rate: 2e-3,
                seed: 7,
                optimizer: Optim::Adam,
                pretrain_weights: vec![0.55, 0.3, 0.1, 0.05],
                ..TrainFile::default()
            },
            val_per_class: 250,
            gen_per_class: 256,
            gen_batch: 8,
            eval_k: 5,
            omegas: vec![1.0, 2.0, 4.0, 7.5],
            gamma: 8.0,
            g_freq: 5,
            k: 32,
            refl: ReflConfig { learning_rate: 10.0, steps: 200, batch_per_class: 16, ..ReflConfig::default() },
            utility_per_class: 32,
            classifier: ClassifierSpec::default(),
            ood_shift: vec![0.15, -0.1],
        }
    }
}

/// Trained generator plus everything needed to score it.
#[derive(Clone, Debug)]
pub struct Bench {
    pub spec: BenchSpec,
    pub sched: NoiseSchedule,
    pub model: DenoiserModel,
}

/// Per-seed real data: a balanced validation set and exemplars drawn from
/// a balanced training pool.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub split: Split,
}

/// Class-averaged metrics of one sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchScore {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    /// F1 of the class-averaged precision and coverage.
    pub f1_pc: f64,
    pub frechet: f64,
    pub chamfer: f64,
    pub per_class: Vec<MetricsReport>,
}

impl BenchSpec {
    pub fn pretrain_spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec { sample_seed: Some(self.dataset.seed ^ 0x9e37), ..self.dataset.clone() };
        if !self.model.pretrain_weights.is_empty() {
            spec.mode_weights = self.model.pretrain_weights.clone();
        }
        spec
    }

    pub fn target_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec { mode_weights: Vec::new(), sample_seed: Some(seed.wrapping_mul(0x1000_0001).wrapping_add(17)), ..self.dataset.clone() }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.model.schedule.build(self.model.steps)
    }
}

impl Bench {
    pub fn build(spec: BenchSpec) -> Result<Bench> {
        let (model, sched) = train_generator(&generate(&spec.pretrain_spec())?, &spec.model)?;
        Ok(Bench { spec, sched, model })
    }

    pub fn projector(&self) -> Projector {
        Projector::identity(self.spec.dataset.dim)
    }

    pub fn seed_data(&self, seed: u64, k: usize) -> Result<SeedData> {
        let pool = generate(&self.spec.target_spec(seed))?;
        Ok(SeedData { seed, split: split(&pool, self.spec.val_per_class, k, seed)? })
    }

    /// Stopgrad eps-space guidance with the first `k` exemplars of every
    /// class and the benchmark's `g_freq`.
    pub fn guidance(&self, data: &SeedData, k: usize, gamma: f64, omega: f64) -> Result<GuidanceConfig> {
        let file = GuidanceFile { gamma, omega, g_freq: self.spec.g_freq, ..GuidanceFile::default() };
        guidance_with(&file, self.projector(), &data.split.exemplars.truncated(k))
    }

    /// Samples `gen_per_class` points per class, one class per batch.
    pub fn sample(&self, cfg: &SampleConfig, seed: u64) -> Result<LabeledSet> {
        self.sample_with(&self.model, cfg, seed)
    }

    pub fn sample_with(&self, model: &DenoiserModel, cfg: &SampleConfig, seed: u64) -> Result<LabeledSet> {
        let classes = self.spec.dataset.classes;
        let mut labels = balanced_labels(self.spec.gen_per_class * classes, classes);
        labels.sort_unstable();
        let gen = DiffusionGenerator { model, sched: &self.sched, config: cfg.clone(), batch: self.spec.gen_batch };
        let mut rng = RngStream::with_stream(seed, 0x5a3f);
        let pts = gen.generate(&labels, &mut rng)?;
        Ok(LabeledSet::new(pts, labels, None, classes, 1)?)
    }

    /// Per-class metrics against the seed's validation set, averaged.
    pub fn score(&self, data: &SeedData, gen: &LabeledSet) -> Result<BenchScore> {
        let proj = self.projector();
        let val = &data.split.validation;
        let real = proj.project(&val.points, Source::Real)?;
        let fake = proj.project(&gen.points, Source::Generated)?;
        let rep = evaluate(&real, &fake, self.spec.eval_k, Some(GroupLabels { real: &val.classes, gen: &gen.classes }))?;
        let per_class: Vec<MetricsReport> = rep.per_group.map(|m| m.into_values().collect()).unwrap_or_default();
        let n = per_class.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| per_class.iter().map(f).sum::<f64>() / n;
        let precision = mean(|r| r.precision);
        let coverage = mean(|r| r.coverage);
        Ok(BenchScore {
            precision,
            recall: mean(|r| r.recall),
            density: mean(|r| r.density),
            coverage,
            f1_pc: f1_pc(precision, coverage)?,
            frechet: mean(|r| r.frechet),
            chamfer: mean(|r| r.chamfer),
            per_class,
        })
    }

    /// ReFL fine-tuning on the seed's first `k` exemplars per class.
    pub fn refl(&self, data: &SeedData, k: usize, seed: u64) -> Result<DenoiserModel> {
        let ex = data.split.exemplars.truncated(k);
        let cfg = ReflConfig { seed, ..self.spec.refl.clone() };
        Ok(refl_chamfer_finetune(&self.model, &ex, &self.projector(), &self.sched, &cfg)?.model)
    }

    /// Validation-set accuracy of a classifier trained only on
    /// `utility_per_class` synthetic points per class sampled with `cfg`.
    pub fn utility(&self, data: &SeedData, cfg: &SampleConfig, seed: u64) -> Result<UtilityRun> {
        let val = &data.split.validation;
        let mut shifted = val.clone();
        for r in 0..shifted.len() {
            for (v, s) in shifted.points.row_mut(r).iter_mut().zip(&self.spec.ood_shift) {
                *v += s;
            }
        }
        let gen = DiffusionGenerator { model: &self.model, sched: &self.sched, config: cfg.clone(), batch: self.spec.gen_batch };
        let n = self.spec.utility_per_class * self.spec.dataset.classes;
        let utility = UtilityData { real_train: &data.split.train, validation: val, shifted_validation: &shifted };
        let mut runs = utility_experiment(&gen, utility, n, 0, &self.spec.classifier, &[seed])?;
        Ok(runs.remove(0))
    }
}
