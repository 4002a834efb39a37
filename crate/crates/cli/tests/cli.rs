use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use numina_core::layout::{write_layout, Layout};
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn numina(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_numina"))
        .args(args)
        .env_remove("NUMINA_CONFIG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Synthesizes `spec` into `dir/scene` and returns that directory.
fn synth(dir: &Path, spec: &str) -> PathBuf {
    let out = dir.join("scene");
    let run = numina(&["synth", "--spec", path(&fixture(spec)), "--out", path(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    out
}

fn prompt_of(scene: &Path) -> String {
    std::fs::read_to_string(scene.join("prompt.txt"))
        .unwrap()
        .trim()
        .to_string()
}

fn identify(scene: &Path, out: &Path) -> Output {
    let prompt = prompt_of(scene);
    numina(&[
        "identify",
        "--self",
        path(&scene.join("self.atnb")),
        "--cross",
        path(&scene.join("cross.atnb")),
        "--prompt",
        &prompt,
        "--out",
        path(out),
    ])
}

#[test]
fn aligned_scene_identifies_and_refines_to_nothing() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene.json");
    let id = tmp.path().join("id");
    let run = identify(&scene, &id);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&id.join("report.json"));
    assert_eq!(report["aligned"], true);

    let refined = tmp.path().join("refined");
    let run = numina(&[
        "refine",
        "--layout",
        path(&id.join("layout.nlay")),
        "--out",
        path(&refined),
    ]);
    assert_eq!(code(&run), 0);
    assert_eq!(
        read_json(&refined.join("edits.json"))["edits"],
        Value::Array(vec![])
    );
    assert_eq!(
        std::fs::read(id.join("layout.nlay")).unwrap(),
        std::fs::read(refined.join("refined.nlay")).unwrap()
    );
}

#[test]
fn identified_layout_matches_planted_truth() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene.json");
    let id = tmp.path().join("id");
    assert_eq!(code(&identify(&scene, &id)), 0);
    let found = numina_core::layout::read_layout(id.join("layout.nlay")).unwrap();
    let truth = numina_core::layout::read_layout(scene.join("truth.nlay")).unwrap();
    assert_eq!(found.counts(), truth.counts());
}

#[test]
fn mismatch_exits_3_then_refine_and_guide() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene_mismatch.json");
    let id = tmp.path().join("id");
    assert_eq!(code(&identify(&scene, &id)), 3);
    assert_eq!(read_json(&id.join("report.json"))["aligned"], false);

    let refined = tmp.path().join("refined");
    let run = numina(&[
        "refine",
        "--layout",
        path(&id.join("layout.nlay")),
        "--out",
        path(&refined),
    ]);
    assert_eq!(code(&run), 0);
    let layout = numina_core::layout::read_layout(refined.join("refined.nlay")).unwrap();
    for frame in layout.counts() {
        assert_eq!(frame, vec![3, 3]);
    }
    let edits = read_json(&refined.join("edits.json"));
    assert_eq!(
        edits["edits"].as_array().unwrap().len(),
        3,
        "one add per frame"
    );

    // Copied-region additions need the pre-softmax scores.
    let guided = tmp.path().join("guided");
    let refined_nlay = refined.join("refined.nlay");
    let run = numina(&[
        "guide",
        "--refined",
        path(&refined_nlay),
        "--out",
        path(&guided),
    ]);
    assert_eq!(code(&run), 5);
    assert!(!guided.join("guidance.ngdf").exists());

    let run = numina(&[
        "guide",
        "--refined",
        path(&refined_nlay),
        "--scores",
        path(&scene.join("presoftmax.atnb")),
        "--out",
        path(&guided),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let field =
        numina_core::guidance::read_field(guided.join("guidance.ngdf")).expect("field reads back");
    assert_eq!(field.frames, 3);
}

#[test]
fn full_layout_has_no_placement() {
    let tmp = TempDir::new().unwrap();
    let mut layout = Layout::new(1, 3, 3);
    let cat = layout.register("cat", Some(1), Some(1));
    layout.frames[0].fill(cat);
    let nlay = tmp.path().join("full.nlay");
    write_layout(&layout, &nlay).unwrap();
    let run = numina(&[
        "refine",
        "--layout",
        path(&nlay),
        "--prompt",
        "two cats",
        "--out",
        path(&tmp.path().join("out")),
    ]);
    assert_eq!(code(&run), 4, "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene.json");
    let prompt = prompt_of(&scene);
    let self_path = scene.join("self.atnb");
    let out = tmp.path().join("out");

    // Two nouns without cross-attention.
    let run = numina(&[
        "identify",
        "--self",
        path(&self_path),
        "--prompt",
        &prompt,
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 2);

    // Threshold out of range.
    let cross = scene.join("cross.atnb");
    let run = numina(&[
        "identify",
        "--tau",
        "2",
        "--self",
        path(&self_path),
        "--cross",
        path(&cross),
        "--prompt",
        &prompt,
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 2);

    // Numeral beyond the supported range.
    let run = numina(&[
        "identify",
        "--self",
        path(&self_path),
        "--cross",
        path(&cross),
        "--prompt",
        "40 cats and three dogs",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn missing_input_exits_1() {
    let tmp = TempDir::new().unwrap();
    let run = numina(&[
        "eval",
        "--counts",
        path(&tmp.path().join("nope.json")),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("nope.json"));
}

#[test]
fn config_is_echoed_with_overrides() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eval");
    let run = numina(&[
        "eval",
        "--tau",
        "0.3",
        "--radius",
        "5",
        "--counts",
        path(&fixture("counts.json")),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 0);
    let echoed = read_json(&out.join("run_config.json"));
    assert_eq!(echoed["tau"], 0.3);
    assert_eq!(echoed["radius"], 5);
    assert_eq!(echoed["bandwidth"], "auto");

    // The echo is itself a valid config file.
    let again = tmp.path().join("again");
    let run = numina(&[
        "eval",
        "--config",
        path(&out.join("run_config.json")),
        "--counts",
        path(&fixture("counts.json")),
        "--out",
        path(&again),
    ]);
    assert_eq!(code(&run), 0);
    assert_eq!(read_json(&again.join("run_config.json")), echoed);
}

#[test]
fn config_file_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"tau": 0.25}"#).unwrap();
    let out = tmp.path().join("eval");
    let run = Command::new(env!("CARGO_BIN_EXE_numina"))
        .args([
            "eval",
            "--counts",
            path(&fixture("counts.json")),
            "--out",
            path(&out),
        ])
        .env("NUMINA_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(read_json(&out.join("run_config.json"))["tau"], 0.25);
}

#[test]
fn eval_fixture_values() {
    let tmp = TempDir::new().unwrap();
    let run = numina(&[
        "eval",
        "--counts",
        path(&fixture("counts.json")),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(code(&run), 0);
    let report = read_json(&tmp.path().join("metrics.json"));
    // Record one: frame accuracies 1/2 and 1, pair agreement 1 of 2.
    // Record two: frame accuracies 1, 1, 0, pair agreement 1 of 2.
    let acc = report["count_acc"].as_f64().unwrap();
    assert!((acc - 17.0 / 24.0).abs() < 1e-12);
    assert_eq!(report["tc"], 0.5);
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scope,key,records,count_acc,tc"));
}

#[test]
fn synth_is_deterministic_and_seed_overrides() {
    let tmp = TempDir::new().unwrap();
    let spec = fixture("scene.json");
    let run = |dir: &str, seed: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut args = vec!["synth", "--spec", path(&spec), "--out", path(&out)];
        if let Some(seed) = seed {
            args.extend(["--seed", seed]);
        }
        assert_eq!(code(&numina(&args)), 0);
        out
    };
    let a = run("a", None);
    let b = run("b", None);
    let c = run("c", Some("99"));
    for file in ["self.atnb", "cross.atnb", "presoftmax.atnb", "truth.nlay"] {
        let bytes_a = std::fs::read(a.join(file)).unwrap();
        assert_eq!(bytes_a, std::fs::read(b.join(file)).unwrap(), "{file}");
        if file == "self.atnb" {
            assert_ne!(bytes_a, std::fs::read(c.join(file)).unwrap());
        }
    }
    assert_eq!(read_json(&c.join("scene.json"))["seed"], 99);
}

#[test]
fn debug_dir_is_populated() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene.json");
    let debug = tmp.path().join("debug");
    let prompt = prompt_of(&scene);
    let run = numina(&[
        "identify",
        "--debug-dir",
        path(&debug),
        "--self",
        path(&scene.join("self.atnb")),
        "--cross",
        path(&scene.join("cross.atnb")),
        "--prompt",
        &prompt,
        "--out",
        path(&tmp.path().join("id")),
    ]);
    assert_eq!(code(&run), 0);
    let frame = debug.join("frame_000");
    for file in [
        "head_00.pgm",
        "head_03.pgm",
        "scores.json",
        "cross_cat.pgm",
        "mask_dog.pgm",
        "layout.pgm",
    ] {
        assert!(frame.join(file).exists(), "{file}");
    }
    assert_eq!(read_json(&frame.join("scores.json"))["selected"], 2);
}

/// identify → refine → guide under a given worker count; returns every
/// output file's bytes.
fn chain(scene: &Path, dir: &Path, threads: &str) -> Vec<Vec<u8>> {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_numina"))
            .args(args)
            .env_remove("NUMINA_CONFIG")
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            matches!(code(&out), 0 | 3),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let prompt = prompt_of(scene);
    let (id, refined, guided) = (dir.join("id"), dir.join("refined"), dir.join("guided"));
    run(&[
        "identify",
        "--self",
        path(&scene.join("self.atnb")),
        "--cross",
        path(&scene.join("cross.atnb")),
        "--prompt",
        &prompt,
        "--out",
        path(&id),
    ]);
    run(&[
        "refine",
        "--layout",
        path(&id.join("layout.nlay")),
        "--out",
        path(&refined),
    ]);
    run(&[
        "guide",
        "--refined",
        path(&refined.join("refined.nlay")),
        "--scores",
        path(&scene.join("presoftmax.atnb")),
        "--out",
        path(&guided),
    ]);
    [
        id.join("layout.nlay"),
        id.join("report.json"),
        refined.join("refined.nlay"),
        refined.join("deltas.nlay"),
        refined.join("edits.json"),
        guided.join("guidance.ngdf"),
    ]
    .iter()
    .map(|p| std::fs::read(p).unwrap())
    .collect()
}

#[test]
fn pipeline_outputs_do_not_depend_on_run_or_worker_count() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), "scene_mismatch.json");
    let first = chain(&scene, &tmp.path().join("r1"), "1");
    for (i, threads) in ["1", "4", "4"].iter().enumerate() {
        let again = chain(&scene, &tmp.path().join(format!("r{}", i + 2)), threads);
        assert_eq!(again, first, "{threads} workers");
    }
}
