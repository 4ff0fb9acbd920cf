mod common;

use std::fs;
use std::path::Path;

use dait::dait_core::data::{generate_synthetic, SyntheticConfig};
use dait::io::{load_image_folder, read_image, write_image, write_image_folder};
use dait::pipeline::RunRecord;
use dait::report::{build_report, emit_report};
use dait::DaitError;
use tempfile::tempdir;

fn png(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let img = dait::dait_core::data::Image::zeros(3, 4, 4);
    write_image(path, &img).unwrap();
}

#[test]
fn image_folder_round_trip() {
    let dir = tempdir().unwrap();
    let (train, test) =
        generate_synthetic(&SyntheticConfig { per_class: 5, image_side: 8, ..Default::default() }).unwrap();
    write_image_folder(dir.path(), &train, &test).unwrap();
    let (tr, te) = load_image_folder(dir.path()).unwrap();
    assert_eq!(tr.len(), train.len());
    assert_eq!(te.len(), test.len());
    assert_eq!(tr.class_names, train.class_names);
    assert_eq!(tr.labels(), train.labels());
    for (a, b) in tr.items.iter().zip(&train.items) {
        for (x, v) in a.image.data.iter().zip(&b.image.data) {
            let want = (127.5 + 31.875 * v).round().clamp(0.0, 255.0) / 255.0;
            assert!((x - want).abs() < 1e-12);
        }
    }
}

#[test]
fn folder_layout_contract() {
    let dir = tempdir().unwrap();
    let r = dir.path();
    for split in ["train", "test"] {
        for class in ["b", "a"] {
            for i in 0..3 {
                png(&r.join(split).join(class).join(format!("{i}.png")));
            }
        }
    }
    let (train, test) = load_image_folder(r).unwrap();
    assert_eq!(train.class_names, vec!["a", "b"]);
    assert_eq!(train.len(), 6);
    assert_eq!(test.len(), 6);
    assert_eq!(read_image(&r.join("train/a/0.png")).unwrap().dims(), [3, 4, 4]);

    fs::create_dir_all(r.join("train/c")).unwrap();
    let err = load_image_folder(r).unwrap_err();
    assert!(matches!(&err, DaitError::Ingest(m) if m.contains("c")), "{err}");
    png(&r.join("train/c/0.png"));
    let err = load_image_folder(r).unwrap_err();
    assert!(err.to_string().contains("c"), "{err}");

    fs::write(r.join("train/c/1.png"), b"not an image").unwrap();
    png(&r.join("test/c/0.png"));
    let err = load_image_folder(r).unwrap_err();
    assert!(err.to_string().contains("1.png"), "{err}");
}

fn record(method: &str, ratio: f64, seed: u64, top1: f64) -> RunRecord {
    RunRecord {
        method: method.into(),
        dataset: "synthetic".into(),
        data_ratio: ratio,
        seed,
        stage: dait::config::Stage::Stage2,
        final_top1: top1,
        selected_epoch: 0,
        checkpoint: "c".into(),
        run_dir: "r".into(),
        frozen: vec![],
        wall_seconds: 0.0,
        epochs: vec![],
    }
}

#[test]
fn single_record_has_no_delta_column() {
    let r = build_report(&[record("dait_f", 1.0, 0, 0.5)], "nokd");
    assert_eq!(r.rows.len(), 1);
    assert!(!r.has_delta());
    assert!(!r.to_markdown().contains('Δ'));
}

#[test]
fn deltas_are_differences_of_means() {
    let recs = [
        record("nokd", 0.3, 0, 0.5),
        record("nokd", 0.3, 1, 0.7),
        record("dait_f", 0.3, 0, 0.9),
        record("dait_f", 0.3, 1, 0.6),
        record("nokd", 1.0, 0, 0.8),
        record("dait_f", 1.0, 0, 0.85),
        record("nokd", 0.5, 0, 0.6),
        record("dait_f", 0.5, 0, 0.55),
    ];
    let dir = tempdir().unwrap();
    let r = emit_report(&recs, "nokd", dir.path()).unwrap();
    assert_eq!(r.rows.len(), 6);
    let ratios: Vec<f64> = r.rows.iter().map(|x| x.data_ratio).collect();
    assert_eq!(ratios, [0.3, 0.3, 0.5, 0.5, 1.0, 1.0]);
    let row = |m: &str, ratio: f64| r.rows.iter().find(|x| x.method == m && x.data_ratio == ratio).unwrap();
    assert_eq!(row("dait_f", 0.3).delta, Some((0.9 + 0.6) / 2.0 - (0.5 + 0.7) / 2.0));
    assert_eq!(row("dait_f", 1.0).delta, Some(0.85 - 0.8));
    assert_eq!(row("dait_f", 0.5).delta, Some(0.55 - 0.6));
    assert_eq!(row("nokd", 0.3).delta, Some(0.0));
    assert!((row("nokd", 0.3).std_top1 - 0.02f64.sqrt()).abs() < 1e-12);
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("+15.00"), "{md}");
    assert!(dir.path().join("report.json").is_file());
}
