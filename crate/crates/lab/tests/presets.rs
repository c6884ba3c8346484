mod common;

use chamferlab::bench::BenchSpec;
use chamferlab::config::{self, Experiment, FinetuneFile, GuidanceFile};
use chamferlab::runner::bench_spec;
use chamferlab_core::finetune::ReflConfig;

use common::presets;

#[test]
fn paper_repro_preset_is_the_benchmark() {
    let path = presets().join("paper_repro.exp");
    let exp = Experiment::load(&path).unwrap();
    let (spec, _, _) = bench_spec(&path, &exp).unwrap();
    assert_eq!(spec, BenchSpec::default());
    assert_eq!(exp.seeds, vec![1, 2, 3, 4, 5]);
    let omegas: Vec<f64> = exp.configs.iter().filter(|c| c.guidance.is_none() && c.finetune.is_none()).map(|c| c.omega).collect();
    assert_eq!(omegas, spec.omegas);
}

#[test]
fn guidance_preset_matches_benchmark() {
    let spec = BenchSpec::default();
    let g: GuidanceFile = config::load(&presets().join("chamfer.guid")).unwrap();
    let expect = GuidanceFile { gamma: spec.gamma, g_freq: spec.g_freq, k: Some(spec.k), ..GuidanceFile::default() };
    assert_eq!(g, expect);
}

#[test]
fn refl_preset_matches_benchmark() {
    let spec = BenchSpec::default();
    let f: FinetuneFile = config::load(&presets().join("refl.ft")).unwrap();
    // the runner seeds row `s` with `file.seed + s`, the benchmark with `s`
    assert_eq!(f.seed, 0);
    assert_eq!(f.refl(), ReflConfig { seed: 0, ..spec.refl });
}
