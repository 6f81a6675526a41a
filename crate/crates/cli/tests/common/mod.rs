#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use vfm4sdg::io::write_tensor;
use vfm4sdg::Tensor;

pub const CLASSES: [&str; 7] = ["person", "car", "bike", "rider", "motor", "bus", "truck"];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vfm4sdg"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vfm4sdg")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(o: &Output) -> &Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
    o
}

pub fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn tensor(dir: &Path, name: &str, shape: &[usize], data: Vec<f64>) -> PathBuf {
    let path = dir.join(name);
    write_tensor(&path, &Tensor::new(shape, data).unwrap()).unwrap();
    path
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Ground truth with the seven benchmark categories over `images` 64×64 images.
pub fn annotation_json(images: &[(u64, &str)], boxes: &[(u64, u64, [f64; 4])]) -> Value {
    json!({
        "images": images.iter().map(|(id, domain)| json!({"id": id, "width": 64, "height": 64, "domain": domain})).collect::<Vec<_>>(),
        "annotations": boxes.iter().enumerate().map(|(i, (img, cat, b))| json!({"id": i + 1, "image_id": img, "category_id": cat, "bbox": b})).collect::<Vec<_>>(),
        "categories": CLASSES.iter().enumerate().map(|(i, n)| json!({"id": i + 1, "name": n})).collect::<Vec<_>>(),
    })
}

pub fn detection_json(dets: &[(u64, u64, [f64; 4], f64)]) -> Value {
    Value::Array(
        dets.iter()
            .map(|(img, cat, b, s)| json!({"image_id": img, "category_id": cat, "bbox": b, "score": s}))
            .collect(),
    )
}

/// The 4-GT taxonomy case: two correct, one wrong-class overlap, one miss, one stray.
pub fn four_gt_case(dir: &Path) -> (PathBuf, PathBuf) {
    let gt = json!({
        "images": [{"id": 1, "width": 400, "height": 400, "domain": "fog"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [20, 0, 10, 10]},
            {"id": 3, "image_id": 1, "category_id": 2, "bbox": [40, 0, 10, 10]},
            {"id": 4, "image_id": 1, "category_id": 3, "bbox": [60, 0, 10, 10]}
        ],
        "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "car"}, {"id": 3, "name": "bike"}]
    });
    let dets = detection_json(&[
        (1, 1, [0., 0., 10., 10.], 0.9),
        (1, 1, [20., 0., 10., 10.], 0.85),
        (1, 1, [40., 0., 10., 10.], 0.8),
        (1, 2, [300., 300., 10., 10.], 0.7),
    ]);
    (
        write_json(dir, "gt4.json", &gt),
        write_json(dir, "dets4.json", &dets),
    )
}
