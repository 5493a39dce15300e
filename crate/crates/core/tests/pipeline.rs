use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use pairlora::adapters::CompositionSpec;
use pairlora::config::RunConfig;
use pairlora::diffusion::{forward_diffuse, initial_noise};
use pairlora::io::{load_png, save_png};
use pairlora::pairgen::{gen_content, Category, ContentSpec};
use pairlora::pipeline::{self, Manifest, ManifestEntry, BASELINE_ADAPTER, BASE_CHECKPOINT, MANIFEST, STYLE_ADAPTER};

const SMALL: &[&str] = &[
    "data.corpus_size=48",
    "pretrain.steps=40",
    "pretrain.batch=4",
    "train.warmup_steps=6",
    "train.joint_steps=6",
    "train.baseline_steps=6",
    "train.draws=2",
    "guidance.num_inference_steps=8",
    "guidance.switch_step=2",
    "eval.n_same=2",
    "eval.n_diff=2",
    "eval.bootstrap=50",
];

fn overrides() -> Vec<String> {
    SMALL.iter().map(|s| s.to_string()).collect()
}

fn small_config() -> RunConfig {
    RunConfig::from_toml("", &overrides()).unwrap()
}

/// A tiny dataset, base model and adapters, built once per test binary.
fn run_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pipeline-small");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = small_config();
        pipeline::gen_pairs(&cfg, &dir.join("data")).unwrap();
        pipeline::pretrain_cmd(&cfg, &dir.join("data"), &dir.join("base")).unwrap();
        pipeline::customize(&cfg, &dir.join("data"), &dir.join("base").join(BASE_CHECKPOINT), &dir.join("lora"), true).unwrap();
        dir
    })
}

fn base() -> PathBuf {
    run_dir().join("base").join(BASE_CHECKPOINT)
}

fn style() -> PathBuf {
    run_dir().join("lora").join(STYLE_ADAPTER)
}

fn cli(args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pairlora"));
    for o in SMALL {
        cmd.args(["--set", o]);
    }
    cmd.args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tmp(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn gen_pairs_is_idempotent_and_manifest_loads() {
    let cfg = small_config();
    let (a, b) = (tmp("gen-a"), tmp("gen-b"));
    let m = pipeline::gen_pairs(&cfg, &a).unwrap();
    pipeline::gen_pairs(&cfg, &b).unwrap();
    assert_eq!(std::fs::read(a.join(MANIFEST)).unwrap(), std::fs::read(b.join(MANIFEST)).unwrap());
    assert_eq!(Manifest::load(&a).unwrap(), m);
    assert_eq!(m.entries.len(), cfg.data.corpus_size + 1);
    for e in &m.entries {
        let rels = match e {
            ManifestEntry::Corpus { content, .. } => vec![content.clone()],
            ManifestEntry::Pair { content, styled, .. } => vec![content.clone(), styled.clone()],
        };
        for rel in rels {
            assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap());
        }
    }
    let pair = m.pair(&a).unwrap();
    assert_eq!(pair.c_style, pair.c_content.with_style(cfg.data.style_slot).unwrap());
}

#[test]
fn sweep_emits_one_column_per_strength() {
    let cfg = small_config();
    let out = tmp("sweep");
    let set = pipeline::load_lora(&style()).unwrap();
    let cols = pipeline::sweep_cmd(&cfg, &base(), Category::Face, &set, 0, &[0.0, 1.0, 2.0, 3.0], &[0, 1], &out).unwrap();
    assert_eq!(cols, 4);
    for seed in [0, 1] {
        for l in [0, 1, 2, 3] {
            assert!(out.join(format!("seed{seed}_s{l}.png")).exists());
        }
    }
    let g = load_png(&out.join("grid.png")).unwrap();
    assert_eq!(g.shape(), [3, 2 * 32 + 1, 4 * 32 + 3]);
}

#[test]
fn blend_of_one_style_matches_sample_bytes() {
    let (a, b) = (tmp("cli-sample"), tmp("cli-blend"));
    let style = style();
    let s = style.to_str().unwrap();
    let base = base();
    let base = base.to_str().unwrap();
    let o = cli(&["sample", "--base", base, "--style", s, "--strength", "2", "--seeds", "0,1", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spec = format!("{s}:0:2");
    let o = cli(&["blend", "--base", base, "--style", &spec, "--seeds", "0,1", "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        let f = format!("seed{seed}.png");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn missing_checkpoint_is_reported_with_its_path() {
    let missing = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("nowhere").join("base.ckpt");
    let o = cli(&["sample", "--base", missing.to_str().unwrap(), "--out", tmp("cli-missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(missing.to_str().unwrap()));
    let err = pipeline::load_base(&missing).unwrap_err().to_string();
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    assert_eq!(cli(&["sample", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(cli(&["--set", "train.nope=1", "gen-pairs", "--out", "x"]).status.code(), Some(1));
    let bad = cli(&["blend", "--base", "b.ckpt", "--style", "not-a-spec:x:y", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn invert_edit_rejects_wrong_size_input() {
    let dir = tmp("edit-size");
    let p = dir.join("big.png");
    save_png(&gen_content(&ContentSpec { size: 48, ..ContentSpec::new(Category::Face, 1, 2) }), &p).unwrap();
    let err = pipeline::invert_edit_cmd(&small_config(), &base(), &p, Category::Face, None, &dir.join("out"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("big.png") && err.contains("32x32"), "{err}");
}

#[test]
fn zero_scale_trained_adapter_is_a_bitwise_no_op() {
    let cfg = small_config();
    let model = pipeline::load_base(&base()).unwrap();
    let set = pipeline::load_lora(&style()).unwrap();
    assert!(set.layers.values().any(|l| l.b.value.max_abs() > 0.0));
    let s = cfg.schedule.build().unwrap();
    let x = forward_diffuse(&gen_content(&ContentSpec::new(Category::Animal, 3, 3)), 300, &initial_noise(&[3, 32, 32], 5), &s).unwrap();
    let c = Category::Animal.prompt().with_style(0).unwrap();
    let plain = model.predict_noise(&x, &c, 300, &CompositionSpec::base()).unwrap();
    assert_eq!(model.predict_noise(&x, &c, 300, &CompositionSpec::single(&set, 0.0)).unwrap(), plain);
    assert_ne!(model.predict_noise(&x, &c, 300, &CompositionSpec::single(&set, 1.0)).unwrap(), plain);
}

#[test]
fn eval_reports_have_one_row_per_item_and_strength() {
    let cfg = small_config();
    let out = tmp("eval");
    let o = pipeline::eval_cmd(&cfg, &base(), &style(), &run_dir().join("lora").join(BASELINE_ADAPTER), &out).unwrap();
    for f in ["rows.csv", "summary.csv", "pareto.csv", "diversity.csv", "guidance_vs_lora_scale.csv", "verdict.txt", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for split in pipeline::EVAL_SPLITS {
        let baseline: Vec<_> = o.report.rows.iter().filter(|r| r.split == split && r.method == pipeline::BASELINE).collect();
        assert_eq!(baseline.len(), 2 * cfg.eval.strengths.len());
        for r in o.report.rows.iter().filter(|r| r.split == split && r.strength == 0.0 && r.method != pipeline::OURS_LORA_SCALE) {
            assert_eq!(r.distance_to_content, 0.0);
        }
        assert_eq!(o.pareto.iter().filter(|(s, _)| s == split).count(), 1);
    }
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), o.report.rows.len() + 1);
    assert_eq!(o.content.len(), 4);
}
