use rll_core::data::{make_half_moons, split, Dataset};

#[test]
fn csv_file_round_trip() {
    let ds = make_half_moons(750, 0.125, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("moons.csv");
    ds.write_csv(&path).unwrap();
    let back = Dataset::read_csv(&path).unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn split_sizes_and_disjointness() {
    let ds = make_half_moons(750, 0.125, 0).unwrap();
    let (tr, va) = split(&ds, 500, 250, 0).unwrap();
    assert_eq!((tr.len(), va.len()), (500, 250));
    let key = |d: &Dataset, i: usize| (d.point(i)[0].to_bits(), d.point(i)[1].to_bits());
    let seen: std::collections::HashSet<_> = (0..tr.len()).map(|i| key(&tr, i)).collect();
    assert!((0..va.len()).all(|i| !seen.contains(&key(&va, i))));
    assert!(tr.class_counts().iter().all(|&c| c > 0) && va.class_counts().iter().all(|&c| c > 0));
}
