//! TOML config files. Every file carries `schema = 1`; omitted keys take
//! the library defaults and unknown keys are rejected. Relative paths inside
//! a file resolve against that file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chamferlab_core::chamfer::{CadsParams, GradMode, GuidanceConfig, GuidanceTarget};
use chamferlab_core::costmodel::CostSpec;
use chamferlab_core::datagen::{DatasetSpec, Family};
use chamferlab_core::diffusion::{make_schedule, DenoiserConfig, NoiseSchedule, ScheduleKind, TrainConfig};
use chamferlab_core::featspace::{FeatureSet, Projector};
use chamferlab_core::finetune::ReflConfig;
use chamferlab_core::numkit::{Matrix, OptimizerKind, RngStream};
use chamferlab_core::utility::{train_classifier, ClassifierSpec};
use serde::{Deserialize, Serialize};

use crate::io;

pub const SCHEMA: u32 = 1;

fn check_schema(schema: u32, what: &str) -> Result<()> {
    ensure!(schema == SCHEMA, "{what}: unsupported schema {schema} (expected {SCHEMA})");
    Ok(())
}

/// Loads a config file and checks its schema.
pub fn load<T: for<'de> Deserialize<'de> + Versioned>(path: &Path) -> Result<T> {
    let value: T = io::read_toml(path)?;
    check_schema(value.schema(), &path.display().to_string())?;
    Ok(value)
}

pub trait Versioned {
    fn schema(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(impl Versioned for $t { fn schema(&self) -> u32 { self.schema } })*};
}

pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optim {
    Sgd,
    Adam,
}

impl From<Optim> for OptimizerKind {
    fn from(o: Optim) -> Self {
        match o {
            Optim::Sgd => OptimizerKind::Sgd,
            Optim::Adam => OptimizerKind::Adam,
        }
    }
}

impl From<OptimizerKind> for Optim {
    fn from(o: OptimizerKind) -> Self {
        match o {
            OptimizerKind::Sgd => Optim::Sgd,
            OptimizerKind::Adam => Optim::Adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetFile {
    pub schema: u32,
    pub family: String,
    pub dim: usize,
    pub classes: usize,
    pub groups: usize,
    pub modes: usize,
    pub spread: f64,
    pub group_shifts: Vec<Vec<f64>>,
    pub mode_weights: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub center_scale: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
    pub sample_seed: Option<u64>,
    /// Exemplars per class drawn by `gen-data`.
    pub exemplars_k: usize,
    /// Seed of the train/validation/exemplar split; defaults to `seed`.
    pub split_seed: Option<u64>,
}

impl Default for DatasetFile {
    fn default() -> Self {
        Self::from_spec(&DatasetSpec::default())
    }
}

impl DatasetFile {
    pub fn from_spec(s: &DatasetSpec) -> Self {
        Self {
            schema: SCHEMA,
            family: s.family.name().into(),
            dim: s.dim,
            classes: s.classes,
            groups: s.groups,
            modes: s.modes,
            spread: s.spread,
            group_shifts: s.group_shifts.clone(),
            mode_weights: s.mode_weights.clone(),
            centers: s.centers.clone(),
            center_scale: s.center_scale,
            train_per_class: s.train_per_class,
            val_per_class: s.val_per_class,
            seed: s.seed,
            sample_seed: s.sample_seed,
            exemplars_k: 32,
            split_seed: None,
        }
    }

    pub fn to_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            family: Family::parse(&self.family)?,
            dim: self.dim,
            classes: self.classes,
            groups: self.groups,
            modes: self.modes,
            spread: self.spread,
            group_shifts: self.group_shifts.clone(),
            mode_weights: self.mode_weights.clone(),
            centers: self.centers.clone(),
            center_scale: self.center_scale,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            seed: self.seed,
            sample_seed: self.sample_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleFile {
    pub kind: String,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleFile {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear.name().into(), beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleFile {
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        Ok(make_schedule(steps, self.beta_start, self.beta_end, ScheduleKind::parse(&self.kind)?)?)
    }
}

/// Denoiser architecture, noise schedule and pretraining loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub schema: u32,
    /// Diffusion steps T.
    pub steps: usize,
    pub schedule: ScheduleFile,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub optimizer: Optim,
    /// Mode weights of the training data, replacing the dataset's; empty
    /// keeps the dataset's.
    pub pretrain_weights: Vec<f64>,
}

impl Default for TrainFile {
    fn default() -> Self {
        let d = DenoiserConfig::new(2, 1, 40);
        let t = TrainConfig::default();
        Self {
            schema: SCHEMA,
            steps: 40,
            schedule: ScheduleFile::default(),
            hidden: d.hidden,
            time_dim: d.time_dim,
            class_dim: d.class_dim,
            train_steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            p_uncond: t.p_uncond,
            seed: t.seed,
            optimizer: t.optimizer.into(),
            pretrain_weights: Vec::new(),
        }
    }
}

impl TrainFile {
    pub fn denoiser(&self, data_dim: usize, classes: usize) -> DenoiserConfig {
        let mut c = DenoiserConfig::new(data_dim, classes, self.steps);
        c.hidden = self.hidden.clone();
        c.time_dim = self.time_dim;
        c.class_dim = self.class_dim;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            p_uncond: self.p_uncond,
            seed: self.seed,
            optimizer: self.optimizer.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CadsFile {
    pub tau1: f64,
    pub tau2: f64,
    pub noise_scale: f64,
    pub psi: f64,
}

impl Default for CadsFile {
    fn default() -> Self {
        let p = CadsParams::default();
        Self { tau1: p.tau1, tau2: p.tau2, noise_scale: p.noise_scale, psi: p.psi }
    }
}

impl From<CadsFile> for CadsParams {
    fn from(c: CadsFile) -> Self {
        CadsParams { tau1: c.tau1, tau2: c.tau2, noise_scale: c.noise_scale, psi: c.psi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceFile {
    pub schema: u32,
    pub gamma: f64,
    pub g_freq: usize,
    pub omega: f64,
    pub grad_mode: String,
    pub target: String,
    /// Projector file; identity when absent.
    pub projector: Option<String>,
    /// Exemplar dataset (CHLM with sidecars). Experiments may omit it and
    /// draw `k` exemplars per class from the dataset split instead.
    pub exemplars: Option<String>,
    /// Keep only the first `k` exemplars of every class.
    pub k: Option<usize>,
    pub window: Option<[usize; 2]>,
    pub per_class: bool,
}

impl Default for GuidanceFile {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            gamma: 0.0,
            g_freq: 5,
            omega: 1.0,
            grad_mode: GradMode::StopGrad.name().into(),
            target: GuidanceTarget::Eps.name().into(),
            projector: None,
            exemplars: None,
            k: None,
            window: None,
            per_class: false,
        }
    }
}

impl GuidanceFile {
    /// Guidance config over already projected exemplars.
    pub fn build(&self, projector: Projector, exemplars: FeatureSet, classes: Vec<usize>) -> Result<GuidanceConfig> {
        let mut g = GuidanceConfig::new(self.gamma, exemplars, projector);
        g.g_freq = self.g_freq;
        g.omega = self.omega;
        g.grad_mode = GradMode::parse(&self.grad_mode)?;
        g.target = GuidanceTarget::parse(&self.target)?;
        g.window = self.window.map(|[lo, hi]| (lo, hi));
        g.per_class = self.per_class;
        g.exemplar_classes = Some(classes);
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorFile {
    pub schema: u32,
    /// `identity`, `random-linear` or `trained-encoder`.
    pub kind: String,
    pub dim: usize,
    /// Output width of `random-linear`.
    pub out_dim: usize,
    pub seed: u64,
    pub l2_normalize: bool,
    /// Labeled real data the encoder's classifier trains on.
    pub train_data: Option<String>,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    /// Classifier layers kept as the encoder.
    pub layers: usize,
}

impl Default for ProjectorFile {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            kind: "identity".into(),
            dim: 2,
            out_dim: 2,
            seed: 0,
            l2_normalize: false,
            train_data: None,
            hidden: vec![64, 64],
            train_steps: 1500,
            layers: 2,
        }
    }
}

impl ProjectorFile {
    /// Builds the projector deterministically; `base` resolves `train_data`.
    pub fn build(&self, base: &Path) -> Result<Projector> {
        let p = match self.kind.as_str() {
            "identity" => Projector::identity(self.dim),
            "random-linear" => {
                ensure!(self.out_dim >= 1, "random-linear needs out_dim >= 1");
                let mut rng = RngStream::with_stream(self.seed, 0x9a0);
                let scale = 1.0 / (self.out_dim as f64).sqrt();
                let data = (0..self.dim * self.out_dim).map(|_| scale * rng.normal()).collect();
                Projector::linear(Matrix::from_vec(self.dim, self.out_dim, data)?)
            }
            "trained-encoder" => {
                let rel = self.train_data.as_deref().context("trained-encoder needs train_data")?;
                let data = io::load_labeled(&resolve(base, rel))?;
                ensure!(data.dim() == self.dim, "train_data has dim {}, projector dim {}", data.dim(), self.dim);
                let spec = ClassifierSpec { hidden: self.hidden.clone(), steps: self.train_steps, ..ClassifierSpec::default() };
                let clf = train_classifier(&data, &spec, self.seed)?;
                Projector::encoder(clf.mlp, self.layers)?
            }
            other => bail!("unknown projector kind {other:?}"),
        };
        Ok(p.with_l2_normalize(self.l2_normalize))
    }
}

/// Load and build a projector file, or the identity when `path` is None.
pub fn projector_from(path: Option<&Path>, dim: usize) -> Result<Projector> {
    match path {
        None => Ok(Projector::identity(dim)),
        Some(p) => load::<ProjectorFile>(p)?.build(p),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneFile {
    pub schema: u32,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optim,
    /// ReFL: weight of the Chamfer loss.
    pub lambda: f64,
    pub t1: usize,
    pub t2: usize,
    pub batch_per_class: usize,
    pub omega: f64,
    /// Vanilla: rows per denoising batch and null-token rate.
    pub batch_size: usize,
    pub p_uncond: f64,
}

impl Default for FinetuneFile {
    fn default() -> Self {
        let r = ReflConfig::default();
        Self {
            schema: SCHEMA,
            steps: r.steps,
            learning_rate: r.learning_rate,
            seed: r.seed,
            optimizer: r.optimizer.into(),
            lambda: r.lambda,
            t1: r.t1,
            t2: r.t2,
            batch_per_class: r.batch_per_class,
            omega: r.omega,
            batch_size: 64,
            p_uncond: 0.1,
        }
    }
}

impl FinetuneFile {
    pub fn refl(&self) -> ReflConfig {
        ReflConfig {
            lambda: self.lambda,
            t1: self.t1,
            t2: self.t2,
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            batch_per_class: self.batch_per_class,
            omega: self.omega,
            optimizer: self.optimizer.into(),
        }
    }

    pub fn vanilla(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            p_uncond: self.p_uncond,
            seed: self.seed,
            optimizer: self.optimizer.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    pub schema: u32,
    pub name: Option<String>,
    /// TFLOPs per denoiser forward pass.
    pub denoiser: f64,
    pub decode: f64,
    pub projector: f64,
    pub exemplar_encode: f64,
    pub steps: usize,
    pub cfg_enabled: bool,
    pub g_freq: usize,
    pub k: usize,
    pub printed_overhead: Option<f64>,
}

impl CostFile {
    pub fn spec(&self) -> CostSpec {
        CostSpec {
            denoiser: self.denoiser,
            decode: self.decode,
            projector: self.projector,
            exemplar_encode: self.exemplar_encode,
            steps: self.steps,
            cfg_enabled: self.cfg_enabled,
            g_freq: self.g_freq,
            k: self.k,
            printed_overhead: self.printed_overhead,
        }
    }
}

/// One sampling configuration of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingEntry {
    pub name: String,
    #[serde(default = "one")]
    pub omega: f64,
    /// Guidance file; its own omega is ignored in favor of the entry's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
    /// Overrides of the guidance file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// ReFL fine-tuning file; the entry samples from the fine-tuned model
    /// with exemplars drawn at `k` (or the guidance file's k).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cads: Option<CadsFile>,
    /// Overrides the experiment's seed list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

fn one() -> f64 {
    1.0
}

impl SamplingEntry {
    pub fn plain(name: &str, omega: f64) -> Self {
        Self { name: name.into(), omega, guidance: None, gamma: None, k: None, finetune: None, cads: None, seeds: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub schema: u32,
    pub name: String,
    /// Dataset spec file of the target (validation and exemplar) distribution.
    pub dataset: String,
    /// Train file of the shared generator.
    pub model: String,
    #[serde(default = "default_k")]
    pub eval_k: usize,
    pub val_per_class: usize,
    pub gen_per_class: usize,
    /// Rows per sampling batch within a class.
    pub gen_batch: usize,
    pub seeds: Vec<u64>,
    /// Output directory, relative to the experiment file.
    pub out: String,
    #[serde(default, rename = "config")]
    pub configs: Vec<SamplingEntry>,
}

fn default_k() -> usize {
    5
}

versioned!(DatasetFile, TrainFile, GuidanceFile, ProjectorFile, FinetuneFile, CostFile, Experiment);

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.configs.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate config name {:?}", w[0]);
        }
        ensure!(self.gen_per_class >= 1 && self.val_per_class >= 1, "gen_per_class and val_per_class must be >= 1");
        Ok(())
    }

    /// Loads the file and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Experiment> {
        let exp: Experiment = load(path)?;
        exp.validate()?;
        let mut refs = vec![exp.dataset.clone(), exp.model.clone()];
        for c in &exp.configs {
            refs.extend(c.guidance.iter().cloned());
            refs.extend(c.finetune.iter().cloned());
        }
        for r in refs {
            let p = resolve(path, &r);
            ensure!(p.is_file(), "{}: referenced file {} does not exist", path.display(), p.display());
        }
        Ok(exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Omega,
    Gamma,
    K,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(Self::Omega),
            "gamma" => Ok(Self::Gamma),
            "k" => Ok(Self::K),
            other => bail!("unknown sweep axis {other:?} (omega, gamma or k)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Omega => "omega",
            Self::Gamma => "gamma",
            Self::K => "k",
        }
    }
}

/// Cross product of every config the axis applies to with `values`, named
/// `<base>__<axis>=<value>`. Omega applies to every config, gamma to guided
/// ones and k to guided or fine-tuned ones; the rest pass through unchanged.
pub fn sweep(exp: &Experiment, axis: SweepAxis, values: &[f64]) -> Result<Experiment> {
    ensure!(!values.is_empty(), "sweep over {} needs at least one value", axis.name());
    if axis == SweepAxis::K {
        ensure!(values.iter().all(|v| *v >= 1.0 && v.fract() == 0.0), "k values must be positive integers");
    }
    let applies = |c: &SamplingEntry| match axis {
        SweepAxis::Omega => true,
        SweepAxis::Gamma => c.guidance.is_some(),
        SweepAxis::K => c.guidance.is_some() || c.finetune.is_some(),
    };
    ensure!(exp.configs.iter().any(applies), "no config of {:?} takes a {} value", exp.name, axis.name());
    let mut configs = Vec::with_capacity(exp.configs.len() * values.len());
    for base in &exp.configs {
        if !applies(base) {
            configs.push(base.clone());
            continue;
        }
        for &v in values {
            let mut c = base.clone();
            c.name = format!("{}__{}={}", base.name, axis.name(), v);
            match axis {
                SweepAxis::Omega => c.omega = v,
                SweepAxis::Gamma => c.gamma = Some(v),
                SweepAxis::K => c.k = Some(v as usize),
            }
            configs.push(c);
        }
    }
    let out = Experiment { configs, ..exp.clone() };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(configs: Vec<SamplingEntry>) -> Experiment {
        Experiment {
            schema: 1,
            name: "e".into(),
            dataset: "d".into(),
            model: "m".into(),
            eval_k: 5,
            val_per_class: 10,
            gen_per_class: 10,
            gen_batch: 8,
            seeds: vec![1],
            out: "o".into(),
            configs,
        }
    }

    fn guided(name: &str) -> SamplingEntry {
        SamplingEntry { guidance: Some("g".into()), ..SamplingEntry::plain(name, 1.0) }
    }

    #[test]
    fn sweep_naming_and_counts() {
        let e = sweep(&exp(vec![SamplingEntry::plain("base", 1.0)]), SweepAxis::Omega, &[1.0, 2.0, 7.5]).unwrap();
        let names: Vec<_> = e.configs.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["base__omega=1", "base__omega=2", "base__omega=7.5"]);
        assert_eq!(e.configs[2].omega, 7.5);

        let k = sweep(&exp(vec![guided("cg")]), SweepAxis::K, &[2.0, 32.0]).unwrap();
        assert_eq!(k.configs.len(), 2);
        assert_eq!(k.configs[1].k, Some(32));

        let one = sweep(&exp(vec![guided("cg")]), SweepAxis::Gamma, &[0.5]).unwrap();
        assert_eq!(one.configs[0].name, "cg__gamma=0.5");
    }

    #[test]
    fn sweep_errors() {
        assert!(sweep(&exp(vec![guided("a")]), SweepAxis::K, &[]).is_err());
        assert!(sweep(&exp(vec![SamplingEntry::plain("a", 1.0)]), SweepAxis::Gamma, &[1.0]).is_err());
        let mixed = sweep(&exp(vec![SamplingEntry::plain("a", 1.0), guided("b")]), SweepAxis::K, &[2.0, 8.0]).unwrap();
        let names: Vec<_> = mixed.configs.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["a", "b__k=2", "b__k=8"]);
        assert!(sweep(&exp(vec![guided("a")]), SweepAxis::K, &[2.5]).is_err());
        assert!(SweepAxis::parse("beta").is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(exp(vec![SamplingEntry::plain("a", 1.0), SamplingEntry::plain("a", 2.0)]).validate().is_err());
    }

    #[test]
    fn dataset_file_defaults_match_library() {
        let f: DatasetFile = toml::from_str("schema = 1").unwrap();
        assert_eq!(f.to_spec().unwrap(), DatasetSpec::default());
        assert!(toml::from_str::<DatasetFile>("schema = 1\nbogus = 3").is_err());
    }

    #[test]
    fn projector_kinds() {
        let base = Path::new("x.proj");
        let id = ProjectorFile::default().build(base).unwrap();
        assert_eq!(id, Projector::identity(2));
        let lin = ProjectorFile { kind: "random-linear".into(), out_dim: 3, ..ProjectorFile::default() };
        let a = lin.build(base).unwrap();
        assert_eq!(a.output_dim(), 3);
        assert_eq!(a.id(), lin.build(base).unwrap().id());
        assert!(ProjectorFile { kind: "clip".into(), ..ProjectorFile::default() }.build(base).is_err());
    }
}
