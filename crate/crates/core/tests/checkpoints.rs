mod common;

use rll_core::nn::{checkpoint_json, load_checkpoint, save_checkpoint};
use rll_core::surface::{evaluate_grid, surface_csv, GridSpec};
use rll_core::uncertainty::Metric;

#[test]
fn trained_sets_round_trip_bit_exactly() {
    let f = common::fixtures();
    let dir = tempfile::tempdir().unwrap();
    for (name, set) in [
        ("single", &f.single),
        ("ensemble", &f.ensemble),
        ("anchored", &f.anchored),
        ("mc", &f.mc_dropout),
    ] {
        let path = dir.path().join(format!("{name}.json"));
        save_checkpoint(set, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(&back, set, "{name}");
        assert_eq!(checkpoint_json(&back), std::fs::read_to_string(&path).unwrap());
    }
    assert_eq!(load_checkpoint(&dir.path().join("ensemble.json")).unwrap().len(), 5);
    let anchored = load_checkpoint(&dir.path().join("anchored.json")).unwrap();
    assert!(anchored.instances().iter().all(|i| i.anchor.is_some()));
}

#[test]
fn reloaded_checkpoint_gives_identical_surface_bytes() {
    let f = common::fixtures();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_checkpoint(&f.ensemble, &path).unwrap();
    let spec = GridSpec::new([-2.0, 3.0], [-1.5, 2.0], 25).unwrap();
    let a = surface_csv(&evaluate_grid(&f.ensemble, &spec).unwrap(), &Metric::ALL).unwrap();
    let b = surface_csv(&evaluate_grid(&load_checkpoint(&path).unwrap(), &spec).unwrap(), &Metric::ALL).unwrap();
    assert_eq!(a, b);
}
