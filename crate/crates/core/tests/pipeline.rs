//! Public-API round trip: UCR files, teachers on disk, removal, checkpoint.

use tsdistill::data::Dataset;
use tsdistill::distill::{lightts_removal, DistillConfig};
use tsdistill::models::{BlockSetting, Checkpoint, StudentNetwork, StudentSetting};
use tsdistill::synthetic::{toy_three_class, write_ucr, ToySpec};
use tsdistill::teachers::{load_teachers, save_teachers, train_teacher_ensemble, TeacherConfig};

#[test]
fn files_to_distilled_student_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        per_class_train: 12,
        per_class_test: 6,
        ..ToySpec::default()
    };
    let (train, test) = toy_three_class(&spec);
    let (train_path, test_path) = (dir.path().join("t_TRAIN.tsv"), dir.path().join("t_TEST.tsv"));
    write_ucr(&train_path, &train).unwrap();
    write_ucr(&test_path, &test).unwrap();

    let ds = Dataset::load(&train_path, Some(&test_path), 0.25, 4).unwrap();
    assert_eq!(ds.class_count, 3);
    assert_eq!(ds.train.len() + ds.validation.len(), 36);
    assert_eq!(ds.test.len(), 18);

    let mut tc = TeacherConfig::new(3, 1, 4).unwrap();
    tc.epochs = 20;
    tc.filters = 4;
    tc.batch_size = 8;
    let teachers = train_teacher_ensemble(&ds, &tc).unwrap();
    let tdir = dir.path().join("teachers");
    save_teachers(&tdir, &teachers, serde_json::json!({ "epochs": 20 })).unwrap();
    let (manifest, loaded) = load_teachers(&tdir).unwrap();
    assert_eq!(manifest.config["epochs"], 20);
    assert_eq!(loaded.teachers.len(), 3);
    for (a, b) in teachers.teachers.iter().zip(&loaded.teachers) {
        assert_eq!(a.id, b.id);
        // exported at nine decimals
        for (ra, rb) in a.validation.iter().zip(&b.validation) {
            assert!(ra.iter().zip(rb).all(|(x, y)| (x - y).abs() <= 5e-10));
        }
    }

    let setting = StudentSetting::uniform(1, BlockSetting::new(2, 10, 8)).unwrap();
    let config = DistillConfig {
        epochs: 30,
        validation_interval: 10,
        batch_size: 8,
        filters: 4,
        ..DistillConfig::default()
    };
    let out = lightts_removal(&ds, &loaded, &setting, &config).unwrap();
    assert_eq!(out.distill_runs(), 3);
    assert!((0.0..=1.0).contains(&out.val_accuracy));

    let path = dir.path().join("student.json");
    out.student.to_checkpoint().unwrap().save(&path).unwrap();
    let back = StudentNetwork::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.predict_proba(&ds.test).unwrap(), out.student.predict_proba(&ds.test).unwrap());
    assert_eq!(back.size_bits(), out.student.size_bits());
}
