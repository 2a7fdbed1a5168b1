mod common;

use reftrack::eval::{ablation_matrix, write_ablation};

fn run_into(dir: &std::path::Path) {
    let cfg = common::tiny();
    let r = ablation_matrix(&cfg, &cfg.eval.variants().unwrap(), &cfg.eval.ablation_seeds, |_| {}).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    write_ablation(dir, &r).unwrap();
}

#[test]
fn ablation_csvs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into(a.path());
    run_into(b.path());
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{n:?} differs");
    }
}

#[test]
fn different_seeds_differ() {
    let mut cfg = common::tiny();
    cfg.eval.ablation_variants = "A".into();
    let v = cfg.eval.variants().unwrap();
    let r1 = ablation_matrix(&cfg, &v, &[1], |_| {}).unwrap();
    let r2 = ablation_matrix(&cfg, &v, &[2], |_| {}).unwrap();
    assert_ne!(r1.summary[0].lin_error, r2.summary[0].lin_error);
}
