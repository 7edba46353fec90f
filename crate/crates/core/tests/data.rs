use covae::data::*;
use covae::rng::{stream, Stream};
use covae::schema::{CovariateColumn, CovariateSchema, MaskedTable};
use covae::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn small(variant: DigitsVariant, n: usize) -> RotatedDigitsConfig {
    let mut c = RotatedDigitsConfig::new(variant, n, 5, 5);
    c.seed = 4;
    c
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn identity_transform_returns_glyph() {
    let g = builtin_glyph(7, 12);
    assert_eq!(transform_glyph(&g, 0.0, 0.0, 1.0), g);
}

#[test]
fn dataset1_covariates_are_uncorrelated() {
    let (train, _, _) = generate_rotated_digits(&small(DigitsVariant::Dataset1, 4000)).unwrap();
    let cols: Vec<Vec<f64>> = (0..3).map(|j| (0..4000).map(|i| train.x.get(i, j)).collect()).collect();
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let r = corr(&cols[a], &cols[b]);
        assert!(r.abs() < 0.05, "{a},{b}: {r}");
    }
}

#[test]
fn dataset2_covariates_are_dependent() {
    let (train, _, _) = generate_rotated_digits(&small(DigitsVariant::Dataset2, 2000)).unwrap();
    let rot: Vec<f64> = (0..2000).map(|i| train.x.get(i, 0)).collect();
    let shift: Vec<f64> = (0..2000).map(|i| train.x.get(i, 1)).collect();
    assert!(corr(&rot, &shift) > 0.3);
}

#[test]
fn dataset3_has_sorted_time_column() {
    let mut cfg = small(DigitsVariant::Dataset3, 50);
    cfg.t_min = 2.0;
    cfg.t_max = 5.0;
    let (train, _, _) = generate_rotated_digits(&cfg).unwrap();
    let t = train.schema.time_column().unwrap();
    let ts: Vec<f64> = (0..50).map(|i| train.x.get(i, t)).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    assert!(ts.iter().all(|v| (2.0..5.0).contains(v)));
}

#[test]
fn generation_is_deterministic() {
    let cfg = small(DigitsVariant::Dataset2, 30);
    assert_eq!(generate_rotated_digits(&cfg).unwrap(), generate_rotated_digits(&cfg).unwrap());
    let mut other = cfg.clone();
    other.seed = 5;
    assert_ne!(generate_rotated_digits(&cfg).unwrap().0, generate_rotated_digits(&other).unwrap().0);
}

#[test]
fn generator_rejects_bad_config() {
    let mut cfg = small(DigitsVariant::Dataset1, 10);
    cfg.side = 6;
    assert!(matches!(generate_rotated_digits(&cfg), Err(Error::Config { .. })));
    let mut cfg = small(DigitsVariant::Dataset1, 10);
    cfg.n_test = 0;
    assert!(matches!(generate_rotated_digits(&cfg), Err(Error::Config { .. })));
}

#[test]
fn pgm_glyph_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.pgm");
    let mut text = String::from("P2\n# test\n8 8\n255\n");
    for k in 0..64 {
        text.push_str(&format!("{} ", if k % 9 == 0 { 255 } else { 0 }));
    }
    std::fs::write(&p, text).unwrap();
    let mut cfg = small(DigitsVariant::Dataset1, 3);
    cfg.side = 8;
    cfg.glyph = Some(p.clone());
    cfg.rotation.std = 0.0;
    cfg.shift.std = 0.0;
    cfg.contrast.std = 0.0;
    let (train, _, _) = generate_rotated_digits(&cfg).unwrap();
    let g = read_pgm(&p).unwrap();
    assert_eq!(train.y.values.row_slice(0), g.data());
}

fn plain(n: usize, d: usize, q: usize) -> Dataset {
    let mut rng = stream(9, Stream::Data);
    let y = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let x = Tensor::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
    let schema = CovariateSchema::new((0..q).map(|j| CovariateColumn::continuous(format!("x{j}"))).collect()).unwrap();
    Dataset::new(
        schema,
        (0..d).map(|j| format!("y{j}")).collect(),
        MaskedTable::fully_observed(y),
        MaskedTable::fully_observed(x),
    )
    .unwrap()
}

#[test]
fn zero_rates_change_nothing() {
    let d = plain(20, 3, 2);
    assert_eq!(inject_mcar(&d, 0.0, 0.0, 1).unwrap(), d);
}

#[test]
fn mcar_rate_is_calibrated() {
    // wide rows: the at-least-one-observed redraw is negligible
    let d = plain(2_000, 50, 1);
    let m = inject_mcar(&d, 0.0, 0.2, 3).unwrap();
    let frac = m.y.missing_count() as f64 / 100_000.0;
    assert!((frac - 0.2).abs() < 0.01, "{frac}");
}

#[test]
fn extreme_rate_keeps_one_entry_per_row() {
    let d = plain(300, 3, 3);
    let m = inject_mcar(&d, 0.999, 0.999, 5).unwrap();
    for i in 0..300 {
        assert!(m.y.row_mask(i).contains(&true));
        assert!(m.x.row_mask(i).contains(&true));
    }
}

#[test]
fn mcar_records_truth_and_rejects_bad_rates() {
    let d = plain(40, 3, 2);
    let m = inject_mcar(&d, 0.3, 0.3, 8).unwrap();
    let (yt, xt) = (m.y_truth.as_ref().unwrap(), m.x_truth.as_ref().unwrap());
    for k in 0..d.y.mask.len() {
        assert_eq!(yt.mask[k], !m.y.mask[k]);
        if yt.mask[k] {
            assert_eq!(yt.values.data()[k], d.y.values.data()[k]);
        }
    }
    assert_eq!(xt.mask.iter().filter(|b| **b).count(), m.x.missing_count());
    assert_eq!(m.oracle_covariates(), d.x);
    assert!(matches!(inject_mcar(&d, 1.0, 0.0, 1), Err(Error::Rate(_))));
    assert!(matches!(inject_mcar(&d, 0.0, -0.1, 1), Err(Error::Rate(_))));
}

#[test]
fn mcar_masks_ignore_values() {
    let d = plain(60, 4, 3);
    let mut shuffled = d.clone();
    shuffled.y.values.data_mut().shuffle(&mut stream(1, Stream::Eval));
    shuffled.x.values.data_mut().shuffle(&mut stream(2, Stream::Eval));
    let a = inject_mcar(&d, 0.4, 0.4, 11).unwrap();
    let b = inject_mcar(&shuffled, 0.4, 0.4, 11).unwrap();
    assert_eq!(a.y.mask, b.y.mask);
    assert_eq!(a.x.mask, b.x.mask);
}

#[test]
fn instance_ids_are_never_masked() {
    let schema = CovariateSchema::new(vec![CovariateColumn::continuous("a"), CovariateColumn::instance("id", 3)]).unwrap();
    let x = Tensor::from_fn(9, 2, |i, j| if j == 1 { (i / 3) as f64 } else { i as f64 });
    let d = Dataset::new(
        schema,
        vec!["y".into()],
        MaskedTable::fully_observed(Tensor::zeros(9, 1)),
        MaskedTable::fully_observed(x),
    )
    .unwrap();
    let m = inject_mcar(&d, 0.9, 0.0, 2).unwrap();
    assert!((0..9).all(|i| m.x.observed(i, 1) && m.x.observed(i, 0)));
}

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const MANIFEST: &str = r#"{
  "columns": [
    {"name": "y1", "role": "observation"},
    {"name": "y2", "role": "observation"},
    {"name": "age", "role": "continuous"},
    {"name": "sex", "role": "categorical", "levels": ["F", "M"]},
    {"name": "t", "role": "time"},
    {"name": "id", "role": "instance"}
  ],
  "normalisation": "none"
}"#;

#[test]
fn two_row_file_loads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MANIFEST);
    let f = write(dir.path(), "d.csv", "id,t,y1,y2,age,sex\nP1,0.5,1.25,-3,40,M\nP1,1.5,2,0.5,41,F\n");
    let d = load_longitudinal_csv(&f, &m).unwrap();
    assert!(d.y.mask.iter().all(|b| *b) && d.x.mask.iter().all(|b| *b));
    assert_eq!(d.y.values.data(), &[1.25, -3.0, 2.0, 0.5]);
    assert_eq!(d.x.values.data(), &[40.0, 1.0, 0.5, 0.0, 41.0, 0.0, 1.5, 0.0]);
    assert_eq!(d.schema.time_column(), Some(2));
    assert_eq!(d.index().unwrap().instances(), 1);
}

#[test]
fn empty_cells_are_missing() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MANIFEST);
    let f = write(dir.path(), "d.csv", "y1,y2,age,sex,t,id\n1,,40,,0,a\n,2,,F,1,b\n");
    let d = load_longitudinal_csv(&f, &m).unwrap();
    assert!(!d.y.observed(0, 1) && !d.y.observed(1, 0));
    assert!(!d.x.observed(0, 1) && !d.x.observed(1, 0));
    assert_eq!(d.index().unwrap().instances(), 2);
}

#[test]
fn undeclared_level_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MANIFEST);
    let f = write(dir.path(), "d.csv", "y1,y2,age,sex,t,id\n1,2,40,X,0,a\n");
    match load_longitudinal_csv(&f, &m) {
        Err(Error::Manifest(msg)) => assert!(msg.contains("`X`"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let f = write(dir.path(), "e.csv", "y1,y2,age,sex,t,id,extra\n1,2,40,F,0,a,1\n");
    assert!(matches!(load_longitudinal_csv(&f, &m), Err(Error::Manifest(_))));
    let f = write(dir.path(), "g.csv", "y1,y2,age,sex,t,id\n1,2,forty,F,0,a\n");
    match load_longitudinal_csv(&f, &m) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "age")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn minmax_uses_training_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", &MANIFEST.replace("\"none\"", "\"minmax-train\""));
    let tr = write(dir.path(), "tr.csv", "y1,y2,age,sex,t,id\n0,10,1,F,0,a\n4,20,1,F,1,a\n");
    let te = write(dir.path(), "te.csv", "y1,y2,age,sex,t,id\n2,30,1,F,0,b\n");
    let (train, ranges) = load_csv(&tr, &m, None).unwrap();
    assert_eq!(train.y.values.data(), &[0.0, 0.0, 1.0, 1.0]);
    let (test, _) = load_csv(&te, &m, Some(&ranges)).unwrap();
    assert_eq!(test.y.values.data(), &[0.5, 2.0]);
}

#[test]
fn instances_are_gathered() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MANIFEST);
    let f = write(dir.path(), "d.csv", "y1,y2,age,sex,t,id\n1,1,1,F,0,a\n2,2,2,F,0,b\n3,3,3,F,1,a\n");
    let d = load_longitudinal_csv(&f, &m).unwrap();
    let ys: Vec<f64> = (0..3).map(|i| d.y.get(i, 0)).collect();
    assert_eq!(ys, vec![1.0, 3.0, 2.0]);
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let schema = CovariateSchema::new(vec![
        CovariateColumn::continuous("a"),
        CovariateColumn {
            levels: Some(vec!["lo".into(), "mid".into(), "hi".into()]),
            ..CovariateColumn::categorical("c", 3)
        },
        CovariateColumn::categorical("d", 2),
        CovariateColumn::time("t"),
        CovariateColumn::instance("id", 4),
    ])
    .unwrap();
    let mut rng = stream(12, Stream::Data);
    let n = 16;
    let x = Tensor::from_fn(n, 5, |i, j| match j {
        1 => rng.random_range(0..3) as f64,
        2 => rng.random_range(0..2) as f64,
        4 => (i / 4) as f64,
        _ => rng.random_range(-5.0..5.0) / 3.0,
    });
    let y = Tensor::from_fn(n, 3, |_, _| rng.random::<f64>() * 1e-3 + 1e5 * rng.random::<f64>());
    let d = Dataset::new(
        schema,
        vec!["u".into(), "v".into(), "w".into()],
        MaskedTable::fully_observed(y),
        MaskedTable::fully_observed(x),
    )
    .unwrap();
    let d = inject_mcar(&d, 0.3, 0.3, 2).unwrap();
    let (f, m, t) = (dir.path().join("d.csv"), dir.path().join("m.json"), dir.path().join("t.csv"));
    write_dataset_csv(&d, &f, Some(&m)).unwrap();
    write_truth_csv(&d, &t).unwrap();
    let mut back = load_longitudinal_csv(&f, &m).unwrap();
    read_truth_csv(&mut back, &t).unwrap();
    assert_eq!(back, d);
}

#[test]
fn split_fractions_and_instances() {
    let d = plain(10, 1, 1);
    let (a, b, c) = split(&d, [1.0, 0.0, 0.0], false, 1).unwrap();
    assert_eq!((a.rows(), b.rows(), c.rows()), (10, 0, 0));
    assert_eq!(a, d);

    let schema = CovariateSchema::new(vec![CovariateColumn::continuous("a"), CovariateColumn::instance("id", 10)]).unwrap();
    let x = Tensor::from_fn(30, 2, |i, j| if j == 1 { (i / 3) as f64 } else { i as f64 });
    let d = Dataset::new(
        schema,
        vec!["y".into()],
        MaskedTable::fully_observed(Tensor::zeros(30, 1)),
        MaskedTable::fully_observed(x),
    )
    .unwrap();
    let (a, b, c) = split(&d, [0.8, 0.1, 0.1], true, 3).unwrap();
    let counts: Vec<usize> = [&a, &b, &c].iter().map(|s| s.index().unwrap().instances()).collect();
    assert_eq!(counts, vec![8, 1, 1]);
    let ids = |s: &Dataset| -> std::collections::BTreeSet<u64> { (0..s.rows()).map(|i| s.x.get(i, 1) as u64).collect() };
    assert!(ids(&a).is_disjoint(&ids(&b)) && ids(&a).is_disjoint(&ids(&c)) && ids(&b).is_disjoint(&ids(&c)));
    assert_eq!(split(&d, [0.8, 0.1, 0.1], true, 3).unwrap(), (a, b, c));

    let plain_d = plain(10, 1, 1);
    assert!(matches!(split(&plain_d, [0.8, 0.1, 0.1], true, 3), Err(Error::TooFewInstances(_))));
    assert!(matches!(split(&plain_d, [0.5, 0.6, -0.1], false, 3), Err(Error::Config { .. })));
}

fn mixed_table() -> (CovariateSchema, MaskedTable) {
    let schema = CovariateSchema::new(vec![CovariateColumn::continuous("a"), CovariateColumn::categorical("c", 3)]).unwrap();
    let x = MaskedTable::new(
        Tensor::from_rows(&[vec![2.0, 1.0], vec![4.0, 2.0], vec![0.0, 1.0], vec![3.0, 2.0]]),
        vec![true, true, true, true, false, false, true, false],
    )
    .unwrap();
    (schema, x)
}

#[test]
fn mean_impute_uses_training_stats() {
    let (schema, train) = mixed_table();
    let stats = ImputeStats::fit(&train, &schema);
    // a: mean of {2, 4, 3}; c: modes 1 and 2 tie, lowest wins
    assert_eq!(stats.fill, vec![3.0, 1.0]);
    let q = MaskedTable::new(Tensor::from_rows(&[vec![9.0, 0.0], vec![0.0, 0.0]]), vec![false, true, true, false]).unwrap();
    let f = mean_impute(&q, &stats);
    assert_eq!(f.values.data(), &[3.0, 0.0, 0.0, 1.0]);
    assert!(f.mask.iter().all(|b| *b));
    let full = MaskedTable::fully_observed(Tensor::from_rows(&[vec![1.5, 2.0]]));
    assert_eq!(mean_impute(&full, &stats), full);
}

#[test]
fn knn_neighbourhoods() {
    let schema = CovariateSchema::new(vec![
        CovariateColumn::continuous("a"),
        CovariateColumn::continuous("b"),
        CovariateColumn::categorical("c", 3),
    ])
    .unwrap();
    let mut rng = stream(3, Stream::Data);
    let train = MaskedTable::fully_observed(Tensor::from_fn(25, 3, |_, j| {
        if j == 2 {
            rng.random_range(0..3) as f64
        } else {
            rng.random_range(-2.0..2.0)
        }
    }));
    // exact copy of a training row, k = 1
    let mut q = train.select_rows(&[7]);
    q.set_observed(0, 1, false);
    q.set_observed(0, 2, false);
    let f = knn_impute(&q, &train, &schema, 1);
    assert_eq!(f.values.row_slice(0), train.values.row_slice(7));

    // whole training set as the neighbourhood
    let stats = ImputeStats::fit(&train, &schema);
    let f = knn_impute(&q, &train, &schema, 25);
    let m = mean_impute(&q, &stats);
    for j in 0..3 {
        assert!((f.get(0, j) - m.get(0, j)).abs() < 1e-12);
    }

    // nothing comparable
    let empty = MaskedTable::new(Tensor::zeros(1, 3), vec![false; 3]).unwrap();
    assert_eq!(knn_impute(&empty, &train, &schema, 3), mean_impute(&empty, &stats));

    // observed entries untouched
    let mut partial = train.select_rows(&[1, 2, 3]);
    partial.set_observed(1, 0, false);
    let f = knn_impute(&partial, &train, &schema, 5);
    for i in 0..3 {
        for j in 0..3 {
            if partial.observed(i, j) {
                assert_eq!(f.get(i, j), partial.get(i, j));
            }
        }
    }
}
