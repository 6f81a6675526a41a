mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vfm4sdg::io::{read_tensor, write_tensor};
use vfm4sdg::Tensor;

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).to_vec()
}

#[test]
fn distill_loss_of_teacher_copy_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let t = tensor(dir.path(), "t.vfmt", &[4, 3, 3], random(&[4, 3, 3], 1));
    let report = dir.path().join("r.json");
    let o = run(&[
        "distill-loss",
        "--student",
        p(&t),
        "--student",
        p(&t),
        "--teacher",
        p(&t),
        "--levels",
        "0,1",
        "--out",
        p(&report),
    ]);
    ok(&o);
    assert!(stdout(&o).contains("distill_loss 0\n"), "{}", stdout(&o));
    let r = json_file(&report);
    assert_eq!(r["distill_loss"], json!(0.0));
    assert_eq!(r["per_level"][0]["mode"], json!("identity"));
}

#[test]
fn distill_loss_two_token_hand_case() {
    let dir = tempfile::tempdir().unwrap();
    let s = tensor(dir.path(), "s.vfmt", &[2, 1, 2], vec![1., 1., 0., 1.]);
    let t = tensor(dir.path(), "t.vfmt", &[2, 1, 2], vec![1., 0., 0., 1.]);
    let o = run(&[
        "distill-loss",
        "--student",
        p(&s),
        "--teacher",
        p(&t),
        "--levels",
        "0",
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    let v = r["distill_loss"].as_f64().unwrap();
    assert!((v - 0.25).abs() < 1e-6, "{v}");
}

#[test]
fn distill_loss_accepts_flattened_tokens_and_batches() {
    let dir = tempfile::tempdir().unwrap();
    // batch of two, levels 2×2 and 1×1, C = 3
    let tokens = tensor(dir.path(), "tok.vfmt", &[2, 5, 3], random(&[2, 5, 3], 3));
    let teacher = tensor(
        dir.path(),
        "t.vfmt",
        &[2, 4, 2, 2],
        random(&[2, 4, 2, 2], 4),
    );
    let o = run(&[
        "distill-loss",
        "--tokens",
        p(&tokens),
        "--level-shapes",
        "2x2,1x1",
        "--teacher",
        p(&teacher),
        "--levels",
        "0,1",
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    assert_eq!(r["batch"], json!(2));
    assert_eq!(r["student_grids"], json!([[2, 2], [1, 1]]));
    assert_eq!(r["per_level"][1]["mode"], json!("bilinear"));
}

#[test]
fn lambda_sweep_scales_linearly() {
    let dir = tempfile::tempdir().unwrap();
    let s = tensor(dir.path(), "s.vfmt", &[3, 4, 4], random(&[3, 4, 4], 5));
    let t = tensor(dir.path(), "t.vfmt", &[5, 2, 2], random(&[5, 2, 2], 6));
    let o = run(&[
        "distill-loss",
        "--student",
        p(&s),
        "--teacher",
        p(&t),
        "--levels",
        "0",
        "--det-loss",
        "0.75",
        "--lambda-sweep",
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    let l = r["distill_loss"].as_f64().unwrap();
    let rows = r["lambda_sweep"].as_array().unwrap();
    let lambdas: Vec<f64> = rows.iter().map(|x| x["lambda"].as_f64().unwrap()).collect();
    assert_eq!(lambdas, vec![0.1, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5]);
    for row in rows {
        let lambda = row["lambda"].as_f64().unwrap();
        assert_eq!(row["combined"].as_f64().unwrap(), 0.75 + lambda * l);
    }
}

#[test]
fn missing_level_is_lookup_error() {
    let dir = tempfile::tempdir().unwrap();
    let t = tensor(dir.path(), "t.vfmt", &[2, 2, 2], random(&[2, 2, 2], 7));
    let o = run(&["distill-loss", "--student", p(&t), "--teacher", p(&t)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("ERROR:relation-distill:lookup:"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn unreadable_file_is_io_error() {
    let o = run(&[
        "distill-loss",
        "--student",
        "/nonexistent/s.vfmt",
        "--teacher",
        "/nonexistent/t.vfmt",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("ERROR:artifact-io:io:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn corrupt_tensor_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vfmt");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let o = run(&["distill-loss", "--student", p(&bad), "--teacher", p(&bad)]);
    assert!(
        stderr(&o).starts_with("ERROR:artifact-io:format:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn argument_errors_are_single_line_usage_errors() {
    let o = run(&["distill-loss", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR:cli:usage:"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let (gt, dets) = four_gt_case(dir.path());
    let o = run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--score-threshold",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:cli:usage:"), "{}", stderr(&o));
    let o = run(&["gradcheck", "--lambda", "-1"]);
    assert!(stderr(&o).starts_with("ERROR:cli:usage:"), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    ok(&o);
    for sub in [
        "distill-loss",
        "build-prototypes",
        "enhance-queries",
        "eval-map",
        "analyze-errors",
        "gradcheck",
    ] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

fn seven_class_fixture(dir: &std::path::Path, shuffled: bool) -> std::path::PathBuf {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats).unwrap();
    for id in 1..=3u64 {
        write_tensor(
            feats.join(format!("{id}.vfmt")),
            &Tensor::new(&[4, 4, 4], random(&[4, 4, 4], id)).unwrap(),
        )
        .unwrap();
    }
    let mut boxes: Vec<(u64, u64, [f64; 4])> = (0..14u64)
        .map(|i| {
            (
                i % 3 + 1,
                i % 7 + 1,
                [(i * 4) as f64 % 48.0, (i * 7) as f64 % 40.0, 12.0, 20.0],
            )
        })
        .collect();
    if shuffled {
        boxes.reverse();
        boxes.swap(1, 5);
    }
    write_json(
        dir,
        if shuffled {
            "gt_shuffled.json"
        } else {
            "gt.json"
        },
        &annotation_json(&[(1, "clear"), (2, "fog"), (3, "rain")], &boxes),
    )
}

#[test]
fn build_prototypes_reports_seven_classes_and_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let gt = seven_class_fixture(dir.path(), false);
    let gt_shuffled = seven_class_fixture(dir.path(), true);
    let feats = dir.path().join("feats");
    let (a, b) = (dir.path().join("a.bank"), dir.path().join("b.bank"));
    let summary = dir.path().join("summary.json");
    let o = run(&[
        "build-prototypes",
        p(&feats),
        p(&gt),
        "--out",
        p(&a),
        "--report",
        p(&summary),
    ]);
    assert!(
        stdout(ok(&o)).starts_with("K=7 channels=4"),
        "{}",
        stdout(&o)
    );
    let s = json_file(&summary);
    assert_eq!(s["k"], json!(7));
    let names: Vec<&str> = s["categories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, CLASSES);
    ok(&run(&[
        "build-prototypes",
        p(&feats),
        p(&gt_shuffled),
        "--out",
        p(&b),
    ]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn build_prototypes_from_exporter_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("export");
    std::fs::create_dir_all(&feats).unwrap();
    let map = Tensor::new(&[2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
    write_tensor(feats.join("img_a.vfmt"), &map).unwrap();
    write_json(
        &feats,
        "manifest.json",
        &json!({
            "model_id": "stub", "images": ["a.png"], "output_dir": "export",
            "entries": [{"image": "a.png", "image_id": 9, "path": "img_a.vfmt", "shape": [2, 2, 2]}],
            "warnings": [], "input_size": [64, 64], "preprocessing": "none"
        }),
    );
    let gt = write_json(
        dir.path(),
        "gt.json",
        &json!({
            "images": [{"id": 9, "width": 64, "height": 64}],
            "annotations": [{"image_id": 9, "category_id": 1, "bbox": [0, 0, 64, 64]}],
            "categories": [{"id": 1, "name": "person"}]
        }),
    );
    let bank = dir.path().join("x.bank");
    let o = run(&[
        "build-prototypes",
        p(&feats),
        p(&gt),
        "--out",
        p(&bank),
        "--json",
    ]);
    let s: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    assert_eq!(s["teacher_model"], json!("stub"));
    let rows = read_tensor(&bank).unwrap();
    assert_eq!(rows.to_vec(), vec![2.5, 6.5]);
}

#[test]
fn enhance_queries_is_seeded_and_params_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gt = seven_class_fixture(dir.path(), false);
    let feats = dir.path().join("feats");
    let bank = dir.path().join("p.bank");
    ok(&run(&[
        "build-prototypes",
        p(&feats),
        p(&gt),
        "--out",
        p(&bank),
    ]));
    let q = tensor(dir.path(), "q.vfmt", &[5, 8], random(&[5, 8], 9));
    let teacher = feats.join("1.vfmt");
    let (out1, out2, out3) = (
        dir.path().join("o1.vfmt"),
        dir.path().join("o2.vfmt"),
        dir.path().join("o3.vfmt"),
    );
    let params = dir.path().join("params");
    let base = [
        "enhance-queries",
        "--queries",
        p(&q),
        "--bank",
        p(&bank),
        "--teacher",
        p(&teacher),
        "--heads",
        "2",
    ];
    let mut a = base.to_vec();
    a.extend([
        "--seed",
        "4",
        "--out",
        p(&out1),
        "--save-params",
        p(&params),
    ]);
    ok(&run(&a));
    let mut b = base.to_vec();
    b.extend(["--seed", "4", "--out", p(&out2)]);
    ok(&run(&b));
    let mut c = base.to_vec();
    c.extend(["--params", p(&params), "--out", p(&out3), "--json"]);
    let o = run(&c);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    assert_eq!(r["params"], json!("loaded"));
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    let (x, y) = (read_tensor(&out1).unwrap(), read_tensor(&out3).unwrap());
    assert_eq!(x.shape(), &[5, 8]);
    // parameters pass through f32 on disk
    for (u, v) in x.data().iter().zip(y.data()) {
        assert!((u - v).abs() < 1e-5);
    }
}

#[test]
fn enhance_queries_rejects_indivisible_heads() {
    let dir = tempfile::tempdir().unwrap();
    let gt = seven_class_fixture(dir.path(), false);
    let feats = dir.path().join("feats");
    let bank = dir.path().join("p.bank");
    ok(&run(&[
        "build-prototypes",
        p(&feats),
        p(&gt),
        "--out",
        p(&bank),
    ]));
    let q = tensor(dir.path(), "q.vfmt", &[5, 6], random(&[5, 6], 9));
    let o = run(&[
        "enhance-queries",
        "--queries",
        p(&q),
        "--bank",
        p(&bank),
        "--teacher",
        p(&feats.join("1.vfmt")),
        "--out",
        p(&dir.path().join("o.vfmt")),
    ]);
    assert!(
        stderr(&o).starts_with("ERROR:query-enhance:config:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn eval_map_perfect_detector() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = [
        (1, 1, [0., 0., 10., 10.]),
        (1, 2, [20., 20., 10., 10.]),
        (2, 7, [5., 5., 30., 30.]),
    ];
    let gt = write_json(
        dir.path(),
        "gt.json",
        &annotation_json(&[(1, "clear"), (2, "night")], &boxes),
    );
    let dets = write_json(
        dir.path(),
        "d.json",
        &detection_json(
            &boxes
                .iter()
                .map(|&(i, c, b)| (i, c, b, 0.9))
                .collect::<Vec<_>>(),
        ),
    );
    let out = dir.path().join("map.json");
    let o = run(&[
        "eval-map",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--out",
        p(&out),
    ]);
    ok(&o);
    assert_eq!(json_file(&out)["map50"], json!(1.0));
    assert!(stdout(&o).lines().last().unwrap().contains("1.0000"));
}

#[test]
fn detection_on_unknown_image_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write_json(
        dir.path(),
        "gt.json",
        &annotation_json(&[(1, "clear")], &[]),
    );
    let dets = write_json(
        dir.path(),
        "d.json",
        &detection_json(&[(5, 1, [0., 0., 1., 1.], 0.5)]),
    );
    let o = run(&[
        "eval-map",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
    ]);
    assert!(
        stderr(&o).starts_with("ERROR:artifact-io:validation:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn analyze_errors_four_gt_case() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, dets) = four_gt_case(dir.path());
    let o = run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    let fog = &r["reports"][0];
    assert_eq!(fog["domain"], json!("fog"));
    assert_eq!(
        (
            fog["fn_rate"].clone(),
            fog["confusion_rate"].clone(),
            fog["fp_rate"].clone()
        ),
        (json!(0.25), json!(0.25), json!(0.25))
    );
}

#[test]
fn analyze_errors_orders_domains() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write_json(
        dir.path(),
        "gt.json",
        &annotation_json(
            &[(1, "clear"), (2, "night"), (3, "fog")],
            &[
                (1, 1, [0., 0., 10., 10.]),
                (2, 1, [0., 0., 10., 10.]),
                (3, 1, [0., 0., 10., 10.]),
            ],
        ),
    );
    let dets = write_json(
        dir.path(),
        "d.json",
        &detection_json(&[(1, 1, [0., 0., 10., 10.], 0.9)]),
    );
    let o = run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--domains",
        "clear,fog,night",
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&ok(&o).stdout).unwrap();
    assert_eq!(r["table"]["domains"], json!(["clear", "fog", "night"]));
    assert_eq!(r["table"]["fn_rate"], json!([0.0, 1.0, 1.0]));
    let o = run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--domains",
        "clear,snow",
    ]);
    assert!(
        stderr(&o).starts_with("ERROR:detect-metrics:lookup:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn reports_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, dets) = four_gt_case(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--out",
        p(&a),
    ]));
    ok(&run(&[
        "analyze-errors",
        "--detections",
        p(&dets),
        "--annotations",
        p(&gt),
        "--out",
        p(&b),
    ]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (c, d) = (dir.path().join("c.json"), dir.path().join("d.json"));
    ok(&run(&[
        "gradcheck",
        "--instances",
        "2",
        "--seed",
        "3",
        "--out",
        p(&c),
    ]));
    ok(&run(&[
        "gradcheck",
        "--instances",
        "2",
        "--seed",
        "3",
        "--out",
        p(&d),
    ]));
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
}

#[test]
fn thread_cap_from_environment() {
    let o = bin()
        .args(["gradcheck", "--instances", "1"])
        .env("VFM4SDG_THREADS", "1")
        .output()
        .unwrap();
    ok(&o);
    let o = bin()
        .args(["gradcheck", "--instances", "1"])
        .env("VFM4SDG_THREADS", "zero")
        .output()
        .unwrap();
    assert!(
        stderr(&o).starts_with("ERROR:cli:config:"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn gradcheck_default_run_passes() {
    let o = run(&["gradcheck"]);
    ok(&o);
    assert!(stdout(&o).contains("20 instances x 10 checks, seed 0"));
    assert!(!stdout(&o).contains("FAIL"));
}
