mod common;

use std::fs;
use std::path::Path;

use dfq::checkpoint::load_teacher;
use dfq::classify::evaluate;
use dfq::data::{DataSource, Split};
use dfq::grid::export_sample_grid;
use dfq::nn::{Architecture, Classifier, Normalization, TeacherModel};
use dfq::pipeline::{read_metrics, run_plan, ExperimentPlan, Stage};
use dfq::zscgan::LossMode;
use dfq::Error;

use common::*;

#[test]
fn unknown_dataset_lists_supported_ones() {
    let src = DataSource::new("/nonexistent");
    match src.load("imagenet", Split::Test) {
        Err(Error::UnknownDataset { name, supported }) => {
            assert_eq!(name, "imagenet");
            assert!(supported.contains("mnist"), "{supported}");
        }
        other => panic!("expected UnknownDataset, got {other:?}"),
    }
}

#[test]
fn missing_checksum_file_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("mnist-lite")).unwrap();
    let err = DataSource::new(dir.path()).load("mnist-lite", Split::Test).unwrap_err();
    assert!(matches!(err, Error::Ingestion(_)), "{err}");
}

fn copy_dataset(dst: &Path) {
    let src = data_root().join("mnist-lite");
    fs::create_dir_all(dst.join("mnist-lite")).unwrap();
    for e in fs::read_dir(&src).unwrap().flatten() {
        fs::copy(e.path(), dst.join("mnist-lite").join(e.file_name())).unwrap();
    }
}

#[test]
fn corrupted_file_fails_checksum() {
    if !have_mnist_lite() {
        eprintln!("skipping: mnist-lite not present");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    copy_dataset(dir.path());
    let src = DataSource::new(dir.path());
    assert_eq!(src.load("mnist-lite", Split::Test).unwrap().len(), 1996);

    let sums = fs::read_to_string(dir.path().join("mnist-lite/SHA256SUMS")).unwrap();
    let victim = sums.lines().map(|l| l.split_whitespace().nth(1).unwrap().trim_start_matches('*')).find(|f| f.starts_with("test")).unwrap();
    let path = dir.path().join("mnist-lite").join(victim);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let err = src.load("mnist-lite", Split::Test).unwrap_err();
    assert!(matches!(err, Error::ChecksumMismatch { .. }), "{err}");
}

#[test]
fn train_split_is_embargoed_in_data_free_context() {
    let src = DataSource::new(data_root());
    {
        let _guard = src.audit.embargo_train("df-stage");
        let err = src.load("mnist-lite", Split::Train).unwrap_err();
        assert!(matches!(err, Error::DataFreeViolation(_)), "{err}");
    }
    assert_eq!(src.audit.train_reads("df-stage"), 1);
}

#[test]
fn grid_has_one_row_per_class() {
    let mut net = Classifier::new(Architecture::MnistBnCnn, 10, [1, 8, 8], Normalization::identity(1), &mut rng(1)).unwrap();
    for bn in net.bn_layers_mut() {
        bn.running_var.data_mut().iter_mut().for_each(|v| *v = 1.0);
    }
    let teacher = TeacherModel::freeze(net, None).unwrap();
    let gen = tiny_generator(&teacher, 2);
    let names: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let classes: Vec<usize> = (0..10).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    let grid = export_sample_grid(&gen, &teacher, &classes, &names, 8, 5, &path).unwrap();
    assert_eq!((grid.rows, grid.cols), (10, 8));
    for (r, row) in grid.tiles.iter().enumerate() {
        assert_eq!(row.len(), 8);
        for t in row {
            assert_eq!(t.class, r);
            assert!(t.predicted < 10);
            assert!(t.confidence >= 0.1 - 1e-9 && t.confidence <= 1.0, "top-1 of 10 classes is at least 0.1");
        }
    }
    let img = image::open(&path).unwrap();
    assert_eq!((img.width(), img.height()), (grid.width, grid.height));

    let again = export_sample_grid(&gen, &teacher, &classes, &names, 8, 5, &dir.path().join("b.png")).unwrap();
    assert_eq!(again, grid);
    assert!(export_sample_grid(&gen, &teacher, &[10], &names, 1, 5, &path).is_err());
}

#[test]
fn plan_json_round_trips_and_validates() {
    let plan = ExperimentPlan::mnist_desk("out");
    plan.validate().unwrap();
    let json = plan.to_json().unwrap();
    let back = ExperimentPlan::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(back.digest(), plan.digest());

    let mut bad = plan.clone();
    bad.cells[0].bits = 4;
    assert!(bad.validate().is_err());
    let mut bad = plan.clone();
    bad.kd.lambda = 0.5;
    assert!(bad.validate().is_err(), "data-free distillation needs lambda = 1");
}

#[test]
fn tiny_plan_records_are_complete() {
    if !have_mnist_lite() {
        eprintln!("skipping: mnist-lite not present");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut plan = ExperimentPlan::mnist_desk(dir.path());
    plan.teacher.epochs = 1;
    plan.teacher.train_limit = 512;
    plan.generator.epochs = 1;
    plan.generator.batches_per_epoch = 3;
    plan.generator.batch_size = 16;
    plan.kd.batches_per_epoch = 3;
    plan.kd.batch_size = 16;
    plan.calibration_samples = 32;
    plan.seeds = vec![1];
    plan.cells.retain(|c| c.bits == 8 && c.loss_mode != Some(LossMode::BnsOnly) && c.loss_mode != Some(LossMode::CeOnly));

    let source = DataSource::new(data_root());
    let out = run_plan::<f32>(&plan, &source).unwrap();
    let on_disk = read_metrics(dir.path()).unwrap();
    assert_eq!(on_disk.len(), out.records.len());
    for rec in &out.records {
        assert!(!rec.config_digest.is_empty() && !rec.code_version.is_empty(), "{}", rec.id);
        assert!(!rec.artifacts.is_empty(), "{}", rec.id);
        for a in &rec.artifacts {
            assert!(dir.path().join(a).exists(), "{} lists missing {a}", rec.id);
        }
        let data_free = match rec.stage {
            Stage::Generator => true,
            Stage::Cell => rec.method.is_some_and(|m| m.is_data_free()),
            Stage::Teacher => false,
        };
        if data_free {
            assert_eq!(rec.train_split_reads, 0, "{}", rec.id);
        }
        if rec.stage == Stage::Cell {
            let acc = rec.accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    assert!(dir.path().join("results.csv").exists());

    // the saved teacher evaluates deterministically to the recorded number
    let (teacher, manifest) = load_teacher::<f32>(&dir.path().join("teacher.safetensors")).unwrap();
    let test = source.load("mnist-lite", Split::Test).unwrap();
    let a = evaluate(teacher.net(), &test).unwrap();
    let b = evaluate(teacher.net(), &test).unwrap();
    assert_eq!(a, b);
    assert_eq!(Some(a), manifest.recorded_accuracy);
    assert!((a - out.teacher_accuracy).abs() < 1e-12);
}

#[test]
fn real_images_match_teacher_statistics_better_than_noise() {
    if !have_mnist_lite() {
        eprintln!("skipping: mnist-lite not present");
        return;
    }
    use dfq::bn_stats::{bns_loss, capture_empirical_stats, extract_reference_stats};
    use dfq::classify::{build_desk_teacher, TeacherTrainConfig};

    let source = DataSource::new(data_root());
    let mut cfg = TeacherTrainConfig::mnist("mnist-lite");
    cfg.epochs = 1;
    cfg.train_limit = 2000;
    let (teacher, _) = build_desk_teacher::<f32>(&cfg, &source).unwrap();
    let reference = extract_reference_stats(teacher.net()).unwrap();
    let test = source.load("mnist-lite", Split::Test).unwrap();
    let idx: Vec<usize> = (0..256).collect();
    let (real, _) = test.batch::<f32>(&idx);
    let noise = dfq::Tensor::<f32>::randn(real.shape(), 1.0, &mut rng(4));
    let real_loss = bns_loss(&capture_empirical_stats(&teacher, &real).unwrap().table, &reference).unwrap();
    let noise_loss = bns_loss(&capture_empirical_stats(&teacher, &noise).unwrap().table, &reference).unwrap();
    assert!(noise_loss >= 10.0 * real_loss, "real {real_loss} noise {noise_loss}");
}
