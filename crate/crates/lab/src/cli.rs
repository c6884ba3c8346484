//! `chamferlab` subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chamferlab_core::costmodel::total_flops;
use chamferlab_core::datagen::{generate, split, LabeledSet};
use chamferlab_core::diffusion::SampleConfig;
use chamferlab_core::evalmetrics::{evaluate, GroupLabels, MetricsReport};
use chamferlab_core::featspace::{FeatureSet, Source};
use chamferlab_core::finetune::{refl_chamfer_finetune, vanilla_finetune};
use chamferlab_core::numkit::RngStream;
use chamferlab_core::utility::{balanced_labels, utility_experiment, ClassifierSpec, DiffusionGenerator, PoolGenerator, SyntheticGenerator, UtilityData};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{guidance_with, train_generator};
use crate::config::{self, projector_from, resolve, sweep, CostFile, DatasetFile, Experiment, FinetuneFile, GuidanceFile, ProjectorFile, SweepAxis, TrainFile, Versioned, SCHEMA};
use crate::{io, runner};

#[derive(Parser, Debug)]
#[command(name = "chamferlab", version, about = "Toy-scale Chamfer-guided diffusion lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset and write its train, validation, shifted
    /// validation and exemplar splits.
    GenData {
        #[arg(long)]
        dataset_spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a labeled CHLM dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a balanced labeled set from a trained model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        #[arg(long)]
        guidance: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Rows per sampling batch within a class; 0 samples each class in one batch.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a CHLM matrix into feature space.
    Project {
        #[arg(long)]
        projector: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Generated)]
        source: SourceArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall, density, coverage, F1, Frechet and Chamfer.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// CSV with columns set,index,group (set is `real` or `gen`).
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model on exemplars.
    Finetune {
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        exemplars: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Projector for the ReFL reward; identity when omitted.
        #[arg(long)]
        projector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train classifiers on synthetic data and score them on real data.
    Utility {
        #[arg(long)]
        gen_config: PathBuf,
        #[arg(long)]
        n_synth: usize,
        #[arg(long, default_value_t = 0)]
        n_real: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOP totals of plain, CFG and Chamfer-guided sampling.
    Flops {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment file; exits with 2 if any row failed.
    Run {
        #[arg(long)]
        exp: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage cache directory; defaults to $CHAMFERLAB_CACHE, then <out>/.cache.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Expand an experiment along omega, gamma or k.
    Sweep {
        #[arg(long)]
        exp: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SourceArg {
    Real,
    Generated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FinetuneMode {
    Vanilla,
    Refl,
}

/// Exit status of a command that did not error.
pub enum Outcome {
    Ok,
    /// Some experiment rows failed.
    Partial,
}

pub fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenData { dataset_spec, out } => gen_data(&dataset_spec, &out)?,
        Command::Train { config, data, out } => train(&config, &data, &out)?,
        Command::Sample { model, n, omega, guidance, seed, batch, out } => sample(&model, n, omega, guidance.as_deref(), seed, batch, &out)?,
        Command::Project { projector, input, source, out } => project(&projector, &input, source, &out)?,
        Command::Eval { real, gen, k, groups, out } => eval(&real, &gen, k, groups.as_deref(), &out)?,
        Command::Finetune { mode, model, exemplars, config, projector, out } => finetune(mode, &model, &exemplars, &config, projector.as_deref(), &out)?,
        Command::Utility { gen_config, n_synth, n_real, seeds, out } => utility(&gen_config, n_synth, n_real, &seeds, &out)?,
        Command::Flops { spec, out } => flops(&spec, &out)?,
        Command::Run { exp, jobs, out, cache } => {
            let s = runner::run(&exp, &runner::RunOptions { jobs, cache_dir: cache, out_dir: out })?;
            eprintln!(
                "{} rows, {} failed; {} of {} stages cached; results in {}",
                s.rows.len(),
                s.failed,
                s.cache_hits,
                s.stages,
                s.out_dir.display()
            );
            if s.failed > 0 {
                return Ok(Outcome::Partial);
            }
        }
        Command::Sweep { exp, axis, values, out } => {
            let e: Experiment = config::load(&exp)?;
            let mut expanded = sweep(&e, SweepAxis::parse(&axis)?, &values)?;
            rebase(&mut expanded, &exp, &out)?;
            io::write_toml(&out, &expanded)?;
        }
    }
    Ok(Outcome::Ok)
}

pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Ok) => std::process::ExitCode::SUCCESS,
        Ok(Outcome::Partial) => std::process::ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

/// Makes the relative paths of `exp` (read from `from`) valid when the file
/// is written to `to`.
fn rebase(exp: &mut Experiment, from: &Path, to: &Path) -> Result<()> {
    let dir = |p: &Path| p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let src = dir(from).canonicalize()?;
    std::fs::create_dir_all(dir(to))?;
    let dst = dir(to).canonicalize()?;
    if src == dst {
        return Ok(());
    }
    let fix = |p: &mut String| {
        if Path::new(p.as_str()).is_relative() {
            *p = relative_to(&dst, &src.join(p.as_str())).display().to_string();
        }
    };
    fix(&mut exp.dataset);
    fix(&mut exp.model);
    fix(&mut exp.out);
    for c in &mut exp.configs {
        c.guidance.as_mut().map(fix);
        c.finetune.as_mut().map(fix);
    }
    Ok(())
}

/// Path of `target` as seen from directory `base`; both absolute.
fn relative_to(base: &Path, target: &Path) -> PathBuf {
    let (b, t): (Vec<_>, Vec<_>) = (base.components().collect(), target.components().collect());
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let file: DatasetFile = config::load(spec_path)?;
    let spec = file.to_spec()?;
    let set = generate(&spec)?;
    let s = split(&set, spec.val_per_class, file.exemplars_k, file.split_seed())?;
    // Group-shifted variant: same draws with every group shift scaled by 1.5.
    let shifted = generate(&spec.shifted(1.5))?.subset(&s.validation_rows);
    io::save_labeled(&out.join("train.chlm"), &s.train)?;
    io::save_labeled(&out.join("validation.chlm"), &s.validation)?;
    io::save_labeled(&out.join("validation_shifted.chlm"), &shifted)?;
    io::save_labeled(&out.join("exemplars.chlm"), &s.exemplars.to_labeled())?;
    io::write_toml(&out.join("dataset.toml"), &file)
}

fn train(config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg: TrainFile = config::load(config_path)?;
    ensure!(cfg.pretrain_weights.is_empty(), "pretrain_weights only applies when an experiment generates the training set");
    let set = io::load_labeled(data)?;
    let (model, _) = train_generator(&set, &cfg)?;
    io::save_model(out, &model, &cfg.schedule)
}

fn load_guidance(path: &Path, omega: f64, dim: usize) -> Result<chamferlab_core::chamfer::GuidanceConfig> {
    let mut g: GuidanceFile = config::load(path)?;
    g.omega = omega;
    let rel = g.exemplars.as_deref().context("guidance file for `sample` needs an exemplars path")?;
    let mut ex = io::load_exemplars(&resolve(path, rel))?;
    if let Some(k) = g.k {
        ex = ex.truncated(k);
    }
    let projector = projector_from(g.projector.as_ref().map(|p| resolve(path, p)).as_deref(), dim)?;
    guidance_with(&g, projector, &ex)
}

fn sample(model_dir: &Path, n: usize, omega: f64, guidance: Option<&Path>, seed: u64, batch: usize, out: &Path) -> Result<()> {
    let (model, sched) = io::load_model(model_dir)?;
    let classes = model.config.num_classes;
    let mut cfg = SampleConfig::with_omega(omega);
    if let Some(g) = guidance {
        cfg.guidance = Some(load_guidance(g, omega, model.data_dim())?);
    }
    let mut labels = balanced_labels(n, classes);
    labels.sort_unstable();
    let gen = DiffusionGenerator { model: &model, sched: &sched, config: cfg, batch };
    let pts = gen.generate(&labels, &mut RngStream::with_stream(seed, 0x5a3f))?;
    io::save_labeled(out, &LabeledSet::new(pts, labels, None, classes, 1)?)
}

fn project(proj_path: &Path, input: &Path, source: SourceArg, out: &Path) -> Result<()> {
    let p: ProjectorFile = config::load(proj_path)?;
    let projector = p.build(proj_path)?;
    let x = io::read_matrix(input)?;
    let src = match source {
        SourceArg::Real => Source::Real,
        SourceArg::Generated => Source::Generated,
    };
    io::save_features(out, &projector.project(&x, src)?)
}

/// A feature set file, or a plain CHLM matrix taken as identity features.
fn load_features_or_raw(path: &Path, source: Source) -> Result<FeatureSet> {
    let sidecar = path.with_extension("toml");
    if sidecar.is_file() && io::read_toml::<io::FeatureHeader>(&sidecar).is_ok() {
        return io::load_features(path);
    }
    let m = io::read_matrix(path)?;
    let id = chamferlab_core::featspace::Projector::identity(m.cols()).id();
    Ok(FeatureSet::new(m, id, source)?)
}

#[derive(Serialize)]
struct EvalReport {
    schema: u32,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
    f1_pc: f64,
    frechet: f64,
    chamfer: f64,
    knn_k: usize,
    n_real: usize,
    n_gen: usize,
    worst_group: Option<usize>,
    per_group: Option<BTreeMap<String, EvalReport>>,
}

impl EvalReport {
    fn from(r: &MetricsReport) -> Self {
        Self {
            schema: SCHEMA,
            precision: r.precision,
            recall: r.recall,
            density: r.density,
            coverage: r.coverage,
            f1_pc: r.f1_pc,
            frechet: r.frechet,
            chamfer: r.chamfer,
            knn_k: r.knn_k,
            n_real: r.n_real,
            n_gen: r.n_gen,
            worst_group: r.worst_group,
            per_group: r.per_group.as_ref().map(|m| m.iter().map(|(g, r)| (format!("{g:04}"), EvalReport::from(r))).collect()),
        }
    }
}

fn read_groups(path: &Path, n_real: usize, n_gen: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut real = vec![None; n_real];
    let mut gen = vec![None; n_gen];
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == 3, "{}: expected set,index,group", path.display());
        let idx: usize = rec[1].parse()?;
        let g: usize = rec[2].parse()?;
        let slot = match &rec[0] {
            "real" => real.get_mut(idx),
            "gen" => gen.get_mut(idx),
            other => bail!("{}: unknown set {other:?}", path.display()),
        };
        *slot.with_context(|| format!("{}: index {idx} out of range", path.display()))? = Some(g);
    }
    let done = |v: Vec<Option<usize>>, what: &str| v.into_iter().collect::<Option<Vec<_>>>().with_context(|| format!("{}: some {what} rows have no group", path.display()));
    Ok((done(real, "real")?, done(gen, "gen")?))
}

fn eval(real: &Path, gen: &Path, k: usize, groups: Option<&Path>, out: &Path) -> Result<()> {
    let r = load_features_or_raw(real, Source::Real)?;
    let g = load_features_or_raw(gen, Source::Generated)?;
    let labels = groups.map(|p| read_groups(p, r.len(), g.len())).transpose()?;
    let rep = evaluate(&r, &g, k, labels.as_ref().map(|(a, b)| GroupLabels { real: a, gen: b }))?;
    io::write_text(out, &(serde_json::to_string_pretty(&EvalReport::from(&rep))? + "\n"))
}

fn finetune(mode: FinetuneMode, model_dir: &Path, exemplars: &Path, cfg_path: &Path, projector: Option<&Path>, out: &Path) -> Result<()> {
    let (model, sched) = io::load_model(model_dir)?;
    let manifest: io::ModelManifest = io::read_toml(&model_dir.join("manifest.toml"))?;
    let ex = io::load_exemplars(exemplars)?;
    let cfg: FinetuneFile = config::load(cfg_path)?;
    let trained = match mode {
        FinetuneMode::Vanilla => vanilla_finetune(&model, &ex, &sched, &cfg.vanilla())?,
        FinetuneMode::Refl => {
            let proj = projector_from(projector, model.data_dim())?;
            refl_chamfer_finetune(&model, &ex, &proj, &sched, &cfg.refl())?
        }
    };
    io::save_model(out, &trained.model, &manifest.schedule)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in trained.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.12e}")])?;
    }
    io::write_bytes(&out.join("losses.csv"), &w.into_inner()?)
}

/// Generator and data description for `utility`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityGenFile {
    pub schema: u32,
    /// `diffusion`, or `oracle` to resample the real train split.
    pub kind: String,
    /// `gen-data` output directory.
    pub data: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub guidance: Option<String>,
    #[serde(default)]
    pub batch: usize,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "default_cls_steps")]
    pub classifier_steps: usize,
}

impl Versioned for UtilityGenFile {
    fn schema(&self) -> u32 {
        self.schema
    }
}

fn one() -> f64 {
    1.0
}

fn default_hidden() -> Vec<usize> {
    ClassifierSpec::default().hidden
}

fn default_cls_steps() -> usize {
    ClassifierSpec::default().steps
}

fn utility(path: &Path, n_synth: usize, n_real: usize, seeds: &[u64], out: &Path) -> Result<()> {
    let g: UtilityGenFile = config::load(path)?;
    let data = resolve(path, &g.data);
    let train = io::load_labeled(&data.join("train.chlm"))?;
    let val = io::load_labeled(&data.join("validation.chlm"))?;
    let shifted = io::load_labeled(&data.join("validation_shifted.chlm"))?;
    let spec = ClassifierSpec { hidden: g.classifier_hidden.clone(), steps: g.classifier_steps, ..ClassifierSpec::default() };
    let utility_data = UtilityData { real_train: &train, validation: &val, shifted_validation: &shifted };
    let runs = match g.kind.as_str() {
        "oracle" => utility_experiment(&PoolGenerator { pool: train.clone() }, utility_data, n_synth, n_real, &spec, seeds)?,
        "diffusion" => {
            let (model, sched) = io::load_model(&resolve(path, g.model.as_deref().context("diffusion generator needs `model`")?))?;
            let mut cfg = SampleConfig::with_omega(g.omega);
            if let Some(rel) = &g.guidance {
                cfg.guidance = Some(load_guidance(&resolve(path, rel), g.omega, model.data_dim())?);
            }
            let gen = DiffusionGenerator { model: &model, sched: &sched, config: cfg, batch: g.batch };
            let gen: &dyn SyntheticGenerator = &gen;
            utility_experiment(gen, utility_data, n_synth, n_real, &spec, seeds)?
        }
        other => bail!("unknown generator kind {other:?} (diffusion or oracle)"),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "mix", "acc_id", "acc_ood"])?;
    for r in runs {
        w.write_record([r.seed.to_string(), r.mix, format!("{:.6}", r.acc_id), format!("{:.6}", r.acc_ood)])?;
    }
    io::write_bytes(out, &w.into_inner()?)
}

#[derive(Serialize)]
struct FlopsReport {
    schema: u32,
    name: Option<String>,
    baseline_total: f64,
    cfg_total: f64,
    guided_total: f64,
    guided_total_exact: f64,
    overhead_exact: f64,
    guidance_steps: usize,
    efficiency_gain: f64,
}

pub fn flops_report(spec_path: &Path) -> Result<String> {
    let f: CostFile = config::load(spec_path)?;
    let r = total_flops(&f.spec())?;
    let report = FlopsReport {
        schema: SCHEMA,
        name: f.name,
        baseline_total: r.baseline_total,
        cfg_total: r.cfg_total,
        guided_total: r.guided_total,
        guided_total_exact: r.guided_total_exact,
        overhead_exact: r.overhead_exact,
        guidance_steps: r.guidance_steps,
        efficiency_gain: r.efficiency_gain,
    };
    Ok(serde_json::to_string_pretty(&report)? + "\n")
}

fn flops(spec: &Path, out: &Path) -> Result<()> {
    io::write_text(out, &flops_report(spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/out"), Path::new("/a/b/x.data")), PathBuf::from("../x.data"));
        assert_eq!(relative_to(Path::new("/a"), Path::new("/a/p/q")), PathBuf::from("p/q"));
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/c")), PathBuf::from("../../c"));
    }
}
