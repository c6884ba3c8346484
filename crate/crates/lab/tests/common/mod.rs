#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_chamferlab");

pub fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

pub fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("CHAMFERLAB_CACHE").output().expect("spawn chamferlab")
}

/// Runs a command and panics with its stderr unless it exits 0.
pub fn ok(dir: &Path, args: &[&str]) {
    let out = cli(dir, args);
    assert!(out.status.success(), "chamferlab {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

pub fn write(dir: &Path, name: &str, text: &str) {
    let p = dir.join(name);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    fs::write(p, text).unwrap();
}

pub const TINY_DATA: &str = "schema = 1\nclasses = 3\nmodes = 2\ntrain_per_class = 60\nval_per_class = 30\nseed = 3\nexemplars_k = 8\n";
pub const TINY_TRAIN: &str = "schema = 1\nsteps = 10\nhidden = [16, 16]\ntrain_steps = 50\nbatch_size = 32\n";
pub const GUIDE_FILE: &str = "schema = 1\ngamma = 1.0\ng_freq = 2\nexemplars = \"data/exemplars.chlm\"\nprojector = \"lin.proj\"\n";
pub const GUIDE_INLINE: &str = "schema = 1\ngamma = 1.0\ng_freq = 2\n";
pub const LIN_PROJ: &str = "schema = 1\nkind = \"random-linear\"\ndim = 2\nout_dim = 3\nseed = 4\n";
pub const TINY_FT: &str = "schema = 1\nt1 = 5\nt2 = 9\nsteps = 3\nbatch_per_class = 4\n";
pub const UTIL_GEN: &str =
    "schema = 1\nkind = \"diffusion\"\ndata = \"data\"\nmodel = \"model\"\nguidance = \"g.guid\"\nbatch = 4\nclassifier_steps = 50\n";

pub fn tiny_exp(configs: &str) -> String {
    format!(
        "schema = 1\nname = \"tiny\"\ndataset = \"tiny.data\"\nmodel = \"tiny.train\"\neval_k = 3\nval_per_class = 20\n\
         gen_per_class = 16\ngen_batch = 8\nseeds = [1, 2]\nout = \"out\"\n{configs}"
    )
}

pub const TINY_CONFIGS: &str = "\n[[config]]\nname = \"plain\"\nomega = 1.0\n\n[[config]]\nname = \"cg\"\nguidance = \"g2.guid\"\nk = 4\n\n\
[[config]]\nname = \"ft\"\nfinetune = \"ft.ft\"\nk = 4\n";

pub fn write_inputs(dir: &Path) {
    write(dir, "tiny.data", TINY_DATA);
    write(dir, "tiny.train", TINY_TRAIN);
    write(dir, "g.guid", GUIDE_FILE);
    write(dir, "g2.guid", GUIDE_INLINE);
    write(dir, "lin.proj", LIN_PROJ);
    write(dir, "ft.ft", TINY_FT);
    write(dir, "u.gen", UTIL_GEN);
    write(dir, "tiny.exp", &tiny_exp(TINY_CONFIGS));
}

/// Every CLI command once, on tiny inputs, inside `dir`.
pub fn pipeline(dir: &Path) {
    write_inputs(dir);
    let flops = presets().join("ldm15.cost");
    let steps: &[&[&str]] = &[
        &["gen-data", "--dataset-spec", "tiny.data", "--out", "data"],
        &["train", "--config", "tiny.train", "--data", "data/train.chlm", "--out", "model"],
        &["sample", "--model", "model", "--n", "30", "--seed", "5", "--out", "plain.chlm"],
        &["sample", "--model", "model", "--n", "30", "--seed", "5", "--omega", "2", "--guidance", "g.guid", "--batch", "4", "--out", "guided.chlm"],
        &["project", "--projector", "lin.proj", "--in", "guided.chlm", "--out", "feat_gen.chlm"],
        &["project", "--projector", "lin.proj", "--in", "data/validation.chlm", "--source", "real", "--out", "feat_real.chlm"],
        &["eval", "--real", "feat_real.chlm", "--gen", "feat_gen.chlm", "--k", "3", "--out", "eval.json"],
        &["finetune", "--mode", "refl", "--model", "model", "--exemplars", "data/exemplars.chlm", "--config", "ft.ft", "--out", "ft_refl"],
        &["finetune", "--mode", "vanilla", "--model", "model", "--exemplars", "data/exemplars.chlm", "--config", "ft.ft", "--out", "ft_vanilla"],
        &["utility", "--gen-config", "u.gen", "--n-synth", "24", "--n-real", "6", "--seeds", "1,2", "--out", "utility.csv"],
        &["flops", "--spec", flops.to_str().unwrap(), "--out", "flops.json"],
        &["run", "--exp", "tiny.exp", "--out", "out"],
        &["sweep", "--exp", "tiny.exp", "--axis", "k", "--values", "2,4", "--out", "sweep/tiny_k.exp"],
    ];
    for args in steps {
        ok(dir, args);
    }
}

/// Every output file under `dir` except inputs and the stage cache, with the
/// wall-time column dropped from results tables.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    collect(dir, dir, &mut out);
    out
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            if !rel.ends_with(".cache") {
                collect(root, &p, out);
            }
            continue;
        }
        let mut bytes = fs::read(&p).unwrap();
        if rel.ends_with("results.csv") {
            bytes = drop_last_column(&bytes);
        }
        out.insert(rel, bytes);
    }
}

pub fn drop_last_column(csv: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(csv);
    let mut s = String::new();
    for line in text.lines() {
        s.push_str(line.rsplit_once(',').map_or(line, |(head, _)| head));
        s.push('\n');
    }
    s.into_bytes()
}
