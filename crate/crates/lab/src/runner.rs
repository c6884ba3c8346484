//! Experiment runner: trains the shared generator, then samples and scores
//! every (config, seed) row. Stage outputs live in a content-addressed cache
//! so reruns only compute what changed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use chamferlab_core::datagen::ExemplarSet;
use chamferlab_core::diffusion::{DenoiserModel, SampleConfig};
use chamferlab_core::finetune::refl_chamfer_finetune;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bench::{guidance_with, train_generator, Bench, BenchScore, BenchSpec, SeedData};
use crate::config::{self, projector_from, resolve, DatasetFile, Experiment, FinetuneFile, GuidanceFile, ProjectorFile, SamplingEntry, TrainFile};
use crate::{io, svg};

pub const CACHE_ENV: &str = "CHAMFERLAB_CACHE";

/// Exemplars per class when neither the config nor its guidance file sets k.
pub const DEFAULT_K: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn key_of(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

/// Content-addressed stage cache. A stage directory counts as complete once
/// its `.done` marker exists.
pub struct Cache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Cache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    /// Returns the stage directory, running `compute` into it first on a miss.
    pub fn stage(&self, kind: &str, key: &str, compute: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dir = self.dir.join(format!("{kind}-{}", &key[..24]));
        if dir.join(".done").is_file() {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(dir);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let tmp = self.dir.join(format!("{kind}-{}.tmp{}", &key[..24], std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        compute(&tmp)?;
        io::write_text(&tmp.join(".done"), key)?;
        let _ = fs::remove_dir_all(&dir);
        fs::rename(&tmp, &dir).with_context(|| format!("publishing {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub jobs: usize,
    /// Overrides both `CHAMFERLAB_CACHE` and the default `<out>/.cache`.
    pub cache_dir: Option<PathBuf>,
    /// Overrides the output directory of the experiment file.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowMetrics {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub f1_pc: f64,
    pub frechet: f64,
    pub chamfer: f64,
    pub knn_k: usize,
    pub n_real: usize,
    pub n_gen: usize,
    pub worst_class: usize,
    pub worst_f1_pc: f64,
}

impl RowMetrics {
    pub fn from_score(s: &BenchScore, knn_k: usize) -> Self {
        let (worst_class, worst) = s
            .per_class
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bc, bf), (c, r)| if r.f1_pc < bf { (c, r.f1_pc) } else { (bc, bf) });
        Self {
            precision: s.precision,
            recall: s.recall,
            density: s.density,
            coverage: s.coverage,
            f1_pc: s.f1_pc,
            frechet: s.frechet,
            chamfer: s.chamfer,
            knn_k,
            n_real: s.per_class.iter().map(|r| r.n_real).sum(),
            n_gen: s.per_class.iter().map(|r| r.n_gen).sum(),
            worst_class,
            worst_f1_pc: worst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub config: String,
    pub seed: u64,
    /// `ok`, or the error chain of the failed stage.
    pub status: String,
    pub metrics: Option<RowMetrics>,
    /// Exemplars per class used by guidance or fine-tuning, if any.
    pub k: Option<usize>,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: [&str; 17] = [
    "config", "seed", "status", "k", "precision", "recall", "density", "coverage", "f1_pc", "frechet", "chamfer", "knn_k", "n_real", "n_gen",
    "worst_class", "worst_f1_pc", "wall_time_s",
];

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![self.config.clone(), self.seed.to_string(), self.status.clone(), self.k.map_or(String::new(), |k| k.to_string())];
        match &self.metrics {
            Some(m) => r.extend([
                fmt(m.precision),
                fmt(m.recall),
                fmt(m.density),
                fmt(m.coverage),
                fmt(m.f1_pc),
                fmt(m.frechet),
                fmt(m.chamfer),
                m.knn_k.to_string(),
                m.n_real.to_string(),
                m.n_gen.to_string(),
                m.worst_class.to_string(),
                fmt(m.worst_f1_pc),
            ]),
            None => r.extend(std::iter::repeat_n(String::new(), 12)),
        }
        r.push(format!("{:.3}", self.wall_time_s));
        r
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    Ok(w.into_inner()?)
}

/// Digest of `results.csv` with the wall-time column removed.
pub fn results_digest(csv_bytes: &[u8]) -> Result<String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_bytes);
    let mut h = Sha256::new();
    for rec in r.records() {
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().take(rec.len().saturating_sub(1)).collect();
        h.update(fields.join(",").as_bytes());
        h.update(b"\n");
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub stages: usize,
    pub cache_hits: usize,
    pub failed: usize,
    pub out_dir: PathBuf,
}

struct Ctx<'a> {
    exp_path: &'a Path,
    exp: &'a Experiment,
    dataset: DatasetFile,
    bench: Option<Bench>,
    gen_key: String,
    cache: &'a Cache,
    out: PathBuf,
}

/// Resolved guidance, fine-tuning and exemplar choices of one entry.
struct EntryPlan {
    guidance: Option<(GuidanceFile, PathBuf)>,
    finetune: Option<FinetuneFile>,
    k: Option<usize>,
}

fn plan(exp_path: &Path, entry: &SamplingEntry) -> Result<EntryPlan> {
    let guidance = match &entry.guidance {
        Some(rel) => {
            let path = resolve(exp_path, rel);
            let mut g: GuidanceFile = config::load(&path)?;
            g.omega = entry.omega;
            if let Some(gamma) = entry.gamma {
                g.gamma = gamma;
            }
            if let Some(k) = entry.k {
                g.k = Some(k);
            }
            Some((g, path))
        }
        None => None,
    };
    let finetune = entry.finetune.as_ref().map(|rel| config::load::<FinetuneFile>(&resolve(exp_path, rel))).transpose()?;
    let uses_exemplars = guidance.is_some() || finetune.is_some();
    let k = uses_exemplars.then(|| entry.k.or(guidance.as_ref().and_then(|(g, _)| g.k)).unwrap_or(DEFAULT_K));
    Ok(EntryPlan { guidance, finetune, k })
}

impl Ctx<'_> {
    fn bench(&self) -> &Bench {
        self.bench.as_ref().expect("generator stage ran")
    }

    fn exemplars(&self, g: Option<&(GuidanceFile, PathBuf)>, data: &SeedData, k: usize) -> Result<(ExemplarSet, serde_json::Value)> {
        if let Some((file, path)) = g {
            if let Some(rel) = &file.exemplars {
                let p = resolve(path, rel);
                let ex = io::load_exemplars(&p)?.truncated(k);
                let digest = sha256_hex(&io::encode_matrix(&ex.to_labeled().points));
                return Ok((ex, json!({"file": digest, "k": k})));
            }
        }
        Ok((data.split.exemplars.truncated(k), json!({"split_seed": data.seed, "k": k})))
    }

    fn row(&self, entry: &SamplingEntry, seed: u64) -> Result<(RowMetrics, Option<usize>)> {
        let bench = self.bench();
        let plan = plan(self.exp_path, entry)?;
        let data = bench.seed_data(seed, plan.k.unwrap_or(1))?;
        let ex = match plan.k {
            Some(k) => Some(self.exemplars(plan.guidance.as_ref(), &data, k)?),
            None => None,
        };

        let mut model_key = self.gen_key.clone();
        let mut model: Option<DenoiserModel> = None;
        if let (Some(ft), Some((ex, ex_id))) = (&plan.finetune, &ex) {
            let key = key_of(&json!({"stage": "finetune", "model": model_key, "finetune": ft, "seed": seed, "exemplars": ex_id}));
            let dir = self.cache.stage("finetune", &key, |dir| {
                let cfg = chamferlab_core::finetune::ReflConfig { seed: ft.seed.wrapping_add(seed), ..ft.refl() };
                let out = refl_chamfer_finetune(&bench.model, ex, &bench.projector(), &bench.sched, &cfg)?;
                io::save_model(dir, &out.model, &bench.spec.model.schedule)
            })?;
            model = Some(io::load_model(&dir)?.0);
            model_key = key;
        }

        let mut sample_cfg = SampleConfig::with_omega(entry.omega);
        sample_cfg.cads = entry.cads.map(Into::into);
        let mut guidance_id = serde_json::Value::Null;
        if let (Some((g, path)), Some((ex, ex_id))) = (&plan.guidance, &ex) {
            let proj_path = g.projector.as_ref().map(|rel| resolve(path, rel));
            let proj_file = proj_path.as_ref().map(|p| config::load::<ProjectorFile>(p)).transpose()?;
            let projector = projector_from(proj_path.as_deref(), bench.spec.dataset.dim)?;
            sample_cfg.guidance = Some(guidance_with(g, projector.clone(), ex)?);
            guidance_id = json!({"file": g, "projector": proj_file, "projector_id": projector.id(), "exemplars": ex_id});
        }
        let spec = &bench.spec;
        let sample_key = key_of(&json!({
            "stage": "sample", "model": model_key, "omega": entry.omega, "guidance": guidance_id,
            "cads": entry.cads, "seed": seed, "gen_per_class": spec.gen_per_class, "gen_batch": spec.gen_batch,
        }));
        let sample_dir = self.cache.stage("sample", &sample_key, |dir| {
            let gen = bench.sample_with(model.as_ref().unwrap_or(&bench.model), &sample_cfg, seed)?;
            io::save_labeled(&dir.join("samples.chlm"), &gen)
        })?;
        let gen = io::load_labeled(&sample_dir.join("samples.chlm"))?;

        let eval_key = key_of(&json!({
            "stage": "eval", "sample": sample_key, "eval_k": spec.eval_k, "val_per_class": spec.val_per_class,
            "dataset": self.dataset, "seed": seed,
        }));
        let eval_dir = self.cache.stage("eval", &eval_key, |dir| {
            let m = RowMetrics::from_score(&bench.score(&data, &gen)?, spec.eval_k);
            io::write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&m)?)
        })?;
        let metrics: serde_json::Value = serde_json::from_str(&io::read_text(&eval_dir.join("metrics.json"))?)?;
        let m = RowMetrics {
            precision: num(&metrics, "precision")?,
            recall: num(&metrics, "recall")?,
            density: num(&metrics, "density")?,
            coverage: num(&metrics, "coverage")?,
            f1_pc: num(&metrics, "f1_pc")?,
            frechet: num(&metrics, "frechet")?,
            chamfer: num(&metrics, "chamfer")?,
            knn_k: num(&metrics, "knn_k")? as usize,
            n_real: num(&metrics, "n_real")? as usize,
            n_gen: num(&metrics, "n_gen")? as usize,
            worst_class: num(&metrics, "worst_class")? as usize,
            worst_f1_pc: num(&metrics, "worst_f1_pc")?,
        };

        if seed == self.seeds(entry)[0] {
            let pts: Vec<[f64; 2]> = gen.points.iter_rows().map(|r| [r[0], r[1]]).collect();
            let real: Vec<[f64; 2]> = data.split.validation.points.iter_rows().map(|r| [r[0], r[1]]).collect();
            if gen.dim() == 2 {
                let title = format!("{} (seed {seed})", entry.name);
                io::write_text(&self.out.join(svg_name(&entry.name)), &svg::scatter(&title, &pts, &gen.classes, &real))?;
            }
        }
        Ok((m, plan.k))
    }

    fn seeds<'b>(&'b self, entry: &'b SamplingEntry) -> &'b [u64] {
        entry.seeds.as_deref().unwrap_or(&self.exp.seeds)
    }
}

fn num(v: &serde_json::Value, key: &str) -> Result<f64> {
    v.get(key).and_then(|x| x.as_f64()).with_context(|| format!("metrics.json lacks {key}"))
}

fn svg_name(config: &str) -> String {
    let safe: String = config.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' }).collect();
    format!("scatter_{safe}.svg")
}

pub fn bench_spec(exp_path: &Path, exp: &Experiment) -> Result<(BenchSpec, DatasetFile, TrainFile)> {
    let dataset: DatasetFile = config::load(&resolve(exp_path, &exp.dataset))?;
    let model: TrainFile = config::load(&resolve(exp_path, &exp.model))?;
    let spec = BenchSpec {
        dataset: dataset.to_spec()?,
        model: model.clone(),
        val_per_class: exp.val_per_class,
        gen_per_class: exp.gen_per_class,
        gen_batch: exp.gen_batch,
        eval_k: exp.eval_k,
        ..BenchSpec::default()
    };
    Ok((spec, dataset, model))
}

pub fn default_cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out.join(".cache"))
}

pub fn run(exp_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let exp = Experiment::load(exp_path)?;
    let out = opts.out_dir.clone().unwrap_or_else(|| resolve(exp_path, &exp.out));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cache = Cache::new(opts.cache_dir.clone().unwrap_or_else(|| default_cache_dir(&out)));
    let (spec, dataset, train) = bench_spec(exp_path, &exp)?;

    let gen_key = key_of(&json!({"stage": "generator", "dataset": dataset, "model": train}));
    let bench = if exp.configs.is_empty() {
        None
    } else {
        let dir = cache.stage("generator", &gen_key, |dir| {
            let data = chamferlab_core::datagen::generate(&spec.pretrain_spec())?;
            let (model, _) = train_generator(&data, &spec.model)?;
            io::save_model(dir, &model, &spec.model.schedule)
        })?;
        let (model, sched) = io::load_model(&dir)?;
        Some(Bench { spec: spec.clone(), sched, model })
    };
    let ctx = Ctx { exp_path, exp: &exp, dataset, bench, gen_key, cache: &cache, out: out.clone() };

    let tasks: Vec<(usize, u64)> = exp.configs.iter().enumerate().flat_map(|(i, c)| ctx.seeds(c).iter().map(move |&s| (i, s))).collect();
    let results: Mutex<Vec<Option<ResultRow>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let jobs = opts.jobs.max(1).min(tasks.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(ci, seed)) = tasks.get(i) else { break };
                let entry = &exp.configs[ci];
                let t = Instant::now();
                let (status, metrics, k) = match ctx.row(entry, seed) {
                    Ok((m, k)) => ("ok".to_string(), Some(m), k),
                    Err(e) => (format!("error: {e:#}"), None, None),
                };
                let row = ResultRow { config: entry.name.clone(), seed, status, metrics, k, wall_time_s: t.elapsed().as_secs_f64() };
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let rows: Vec<ResultRow> = results.into_inner().unwrap().into_iter().map(|r| r.expect("every task ran")).collect();
    let failed = rows.iter().filter(|r| !r.ok()).count();

    let csv_bytes = results_csv(&rows)?;
    io::write_bytes(&out.join("results.csv"), &csv_bytes)?;
    let mut artifacts = vec!["results.csv".to_string()];
    for c in &exp.configs {
        let name = svg_name(&c.name);
        if out.join(&name).is_file() {
            artifacts.push(name);
        }
    }
    let (k_csv, k_svg) = k_sweep(&rows)?;
    io::write_bytes(&out.join("k_sweep.csv"), &k_csv)?;
    io::write_text(&out.join("k_sweep.svg"), &k_svg)?;
    artifacts.extend(["k_sweep.csv".to_string(), "k_sweep.svg".to_string()]);

    let report = json!({
        "schema": config::SCHEMA,
        "experiment": exp.name,
        "results_digest": results_digest(&csv_bytes)?,
        "rows": rows.iter().map(|r| json!({"config": r.config, "seed": r.seed, "status": r.status, "k": r.k, "metrics": r.metrics})).collect::<Vec<_>>(),
        "failed": failed,
        "artifacts": artifacts,
    });
    io::write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let stages = cache.hits() + cache.misses();
    Ok(RunSummary { rows, stages, cache_hits: cache.hits(), failed, out_dir: out })
}

/// Mean coverage and F1 per (base config, k) over seeds, for rows with a k.
fn k_sweep(rows: &[ResultRow]) -> Result<(Vec<u8>, String)> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize), Vec<&RowMetrics>> = BTreeMap::new();
    for r in rows {
        if let (Some(k), Some(m)) = (r.k, &r.metrics) {
            let base = r.config.split("__k=").next().unwrap_or(&r.config).to_string();
            groups.entry((base, k)).or_default().push(m);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "k", "seeds", "precision", "coverage", "f1_pc"])?;
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for ((base, k), ms) in &groups {
        let n = ms.len() as f64;
        let mean = |f: fn(&RowMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
        let cov = mean(|m| m.coverage);
        w.write_record([base.clone(), k.to_string(), ms.len().to_string(), fmt(mean(|m| m.precision)), fmt(cov), fmt(mean(|m| m.f1_pc))])?;
        series.entry(base.clone()).or_default().push((*k, cov));
    }
    let mut ks: Vec<usize> = groups.keys().map(|(_, k)| *k).collect();
    ks.sort_unstable();
    ks.dedup();
    let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let lines: Vec<(String, Vec<f64>)> = series
        .into_iter()
        .filter(|(_, pts)| pts.len() == ks.len())
        .map(|(name, pts)| (format!("{name} coverage"), pts.into_iter().map(|(_, c)| c).collect()))
        .collect();
    Ok((w.into_inner()?, svg::lines("coverage vs exemplars per class", &xs, &lines)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_wall_time() {
        let row = |t: f64| ResultRow { config: "a".into(), seed: 1, status: "ok".into(), metrics: None, k: None, wall_time_s: t };
        let a = results_csv(&[row(0.5)]).unwrap();
        let b = results_csv(&[row(9.0)]).unwrap();
        assert_ne!(a, b);
        assert_eq!(results_digest(&a).unwrap(), results_digest(&b).unwrap());
    }

    #[test]
    fn header_only_csv() {
        let bytes = results_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 1);
    }

    #[test]
    fn svg_names_are_safe() {
        assert_eq!(svg_name("cg__k=32"), "scatter_cg__k=32.svg");
        assert_eq!(svg_name("a/b c"), "scatter_a_b_c.svg");
    }
}
