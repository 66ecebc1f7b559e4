use std::path::Path;
use std::process::{Command, Output};

use hyperedit::checkpoint::Checkpoint;
use hyperedit::dataset::read_dataset;
use hyperedit::models::*;
use hyperedit::reports::{read_losses, read_selection, REPORT_COLUMNS};
use hyperedit_core::embedspace::{EmbedConfig, EmbedModel};
use hyperedit_core::evalkit::AttributeClassifier;
use hyperedit_core::synthworld::generate_dataset;
use hyperedit_core::toygen::{GenConfig, GenModel};
use hyperedit_core::trainloop::IdentityFeatureExtractor;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperedit")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = cli(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Untrained weights flagged as trained, so the commands run without the
/// long pretraining stages.
fn stub_models(dir: &Path) {
    let mut gen = GenModel::new(&GenConfig::standard(), 1).unwrap();
    gen.set_trained(true);
    generator_checkpoint(&gen).save(&dir.join("gen.ckpt")).unwrap();
    let mut embed = EmbedModel::new(&EmbedConfig::standard(), 2);
    embed.set_trained(true);
    embedding_checkpoint(&embed).save(&dir.join("embed.ckpt")).unwrap();
    let mut rsim = IdentityFeatureExtractor::new(32, 3).unwrap();
    rsim.0.set_trained(true);
    rsim_checkpoint(&rsim).save(&dir.join("rsim.ckpt")).unwrap();
    let mut oracle = AttributeClassifier::oracle(4);
    oracle.set_trained(true);
    classifier_checkpoint(ORACLE, &oracle).save(&dir.join("oracle.ckpt")).unwrap();
}

#[test]
fn synth_writes_a_readable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&["synth", "--n", "12", "--seed", "5", "--out", p(&data)]);
    assert!(out.contains("12 samples"));
    let back = read_dataset(&data).unwrap();
    let fresh = generate_dataset(12, 5).unwrap();
    assert_eq!(back.len(), 12);
    for (a, b) in back.iter().zip(&fresh) {
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.labels.labels(), b.labels.labels());
        let diff = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 0.5 / 255.0 + 1e-12, "{diff}");
    }
}

#[test]
fn undertrained_classifier_fails_its_gate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "20", "--out", p(&data)]);
    let ckpt = dir.path().join("rsim.ckpt");
    let err = fails(&["train-rsim", "--data", p(&data), "--out", p(&ckpt), "--steps", "1"]);
    assert!(err.contains("classifier"), "{err}");
    assert!(!ckpt.exists());
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "steps = 10\nprompt = a red shape | a shape\nwobble = 3\n").unwrap();
    let err = fails(&["train-editor", "--config", p(&cfg)]);
    assert!(err.contains("unknown key 'wobble'"), "{err}");
    let err = fails(&["train-editor", "--config", p(&dir.path().join("missing.cfg"))]);
    assert!(err.contains("missing.cfg"), "{err}");
}

#[test]
fn editor_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stub_models(d);
    let data = d.join("data");
    ok(&["synth", "--n", "6", "--seed", "3", "--out", p(&data)]);

    let sel = d.join("selection.csv");
    ok(&[
        "select-layers", "--gen", p(&d.join("gen.ckpt")), "--embed", p(&d.join("embed.ckpt")), "--target", "a red shape", "--source", "a shape",
        "--m", "2", "--seeds", "1", "--out", p(&sel),
    ]);
    let selection = read_selection(&sel).unwrap();
    assert_eq!(selection.delta_omega.len(), GenConfig::standard().layers());
    assert!(!selection.layers.is_empty());

    std::fs::write(
        d.join("train.cfg"),
        "steps = 2\nbatch_size = 2\ncheckpoint_every = 1\nprompt = a red shape | a shape\nselection = selection.csv\n\
         data = data\ngen = gen.ckpt\nembed = embed.ckpt\nrsim = rsim.ckpt\nout_dir = run\nmax_images = 4\n",
    )
    .unwrap();
    // Two steps cannot halve the alignment loss, so the gate fails after the
    // editor and its losses are written.
    let err = fails(&["train-editor", "--config", p(&d.join("train.cfg"))]);
    assert!(err.contains("gate"), "{err}");
    let editor = d.join("run/editor.ckpt");
    assert_eq!(read_losses(&d.join("run/losses.csv")).unwrap().len(), 2);
    let ck = Checkpoint::load(&editor).unwrap();
    assert_eq!(ck.meta_list("layers").unwrap(), selection.layers);

    let (gen, embed) = (d.join("gen.ckpt"), d.join("embed.ckpt"));
    let models = ["--gen", p(&gen), "--embed", p(&embed), "--editor", p(&editor)];
    let img = hyperedit::dataset::image_path(&data, 0);
    let strip = d.join("edit.png");
    ok(&[&["edit"], &models[..], &["--image", p(&img), "--target", "a red shape", "--source", "a shape", "--out", p(&strip)]].concat());
    let png = image::open(&strip).unwrap();
    assert_eq!((png.width(), png.height()), (3 * 128 + 4, 130));

    let interp = d.join("interp.png");
    ok(&[
        &["interp"],
        &models[..],
        &["--image", p(&img), "--pair-a", "a red shape | a shape", "--pair-b", "a large shape | a small shape", "--eta-steps", "3", "--out", p(&interp)],
    ]
    .concat());
    assert!(interp.exists());

    let (rsim, oracle) = (d.join("rsim.ckpt"), d.join("oracle.ckpt"));
    let report = d.join("report.csv");
    let out = ok(&[
        &["eval"],
        &models[..],
        &["--rsim", p(&rsim), "--oracle", p(&oracle), "--data", p(&data)],
        &["--target", "a red shape", "--source", "a shape", "--out", p(&report)],
    ]
    .concat());
    assert!(out.contains("target success"));
    let mut rd = csv::Reader::from_path(&report).unwrap();
    assert!(rd.headers().unwrap().iter().eq(REPORT_COLUMNS));
    assert_eq!(rd.records().count(), 7);

    let grid = d.join("grid.png");
    ok(&[&["grid"], &models[..], &["--data", p(&data), "--target", "a red shape", "--source", "a shape", "--images", "2", "--out", p(&grid)]].concat());
    assert!(grid.exists());

    // An editor is bound to the generator it was trained against.
    let mut other = GenModel::new(&GenConfig::standard(), 99).unwrap();
    other.set_trained(true);
    generator_checkpoint(&other).save(&d.join("other.ckpt")).unwrap();
    let err = fails(&[
        "edit", "--gen", p(&d.join("other.ckpt")), "--embed", p(&d.join("embed.ckpt")), "--editor", p(&editor), "--image", p(&img),
        "--target", "a red shape", "--source", "a shape", "--out", p(&strip),
    ]);
    assert!(err.contains("different generator"), "{err}");
}
