use autodiff::Array;
use metaunlearn::concepts::{default_world, draw_concept, draw_split, nearest_concept, SplitSizes};
use metaunlearn::eval::{classified_as, mmd2_unbiased, ols};
use metaunlearn::rng::{stream_rng, Stream};

#[test]
fn mmd_null_is_calibrated() {
    let table = default_world(0);
    for (seed, name) in [(1, "F"), (2, "R"), (3, "U1"), (4, "U2"), (5, "F")] {
        let c = table.get(name).unwrap();
        let mut rng = stream_rng(seed, Stream::Eval);
        let a = draw_concept(c, 1000, &mut rng);
        let b = draw_concept(c, 1000, &mut rng);
        let m = mmd2_unbiased(&a.x, &b.x).unwrap();
        assert!(m.abs() < 0.01, "{name}: {m}");
    }
}

#[test]
fn mmd_detects_a_shifted_concept() {
    let table = default_world(0);
    let mut rng = stream_rng(6, Stream::Eval);
    let f = draw_concept(table.get("F").unwrap(), 300, &mut rng);
    let r = draw_concept(table.get("R").unwrap(), 300, &mut rng);
    assert!(mmd2_unbiased(&f.x, &r.x).unwrap() > 0.1);
}

#[test]
fn classifier_scores_of_degenerate_outputs() {
    let table = default_world(0);
    let at = |c: &[f64]| Array::from_rows(&vec![c.to_vec(); 50]);
    assert_eq!(classified_as(&table, &at(&[2.0, 2.0]), "F"), 100.0);
    assert_eq!(classified_as(&table, &at(&[-2.0, 2.0]), "F"), 0.0);
    assert_eq!(nearest_concept(&table, &[-2.0, 2.0]), "U1");
    assert_eq!(nearest_concept(&table, &[2.25, 2.25]), "F");
}

#[test]
fn benign_bundles_avoid_the_forget_region() {
    let table = default_world(0);
    let clean = (0..200)
        .filter(|&seed| {
            let b = draw_split(&table, &SplitSizes::default(), seed).unwrap();
            (0..b.benign.len()).all(|i| nearest_concept(&table, b.benign.x.row_slice(i)) != "F")
        })
        .count();
    assert!(clean >= 198, "{clean} of 200 draws clean");
}

#[test]
fn least_squares_fixtures() {
    assert_eq!(ols(&[0.0, 1.0], &[1.0, 0.0]).unwrap().0, -1.0);
    assert_eq!(ols(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0]).unwrap().0, 0.0);
    assert!(ols(&[1.0], &[1.0]).is_err());
}
