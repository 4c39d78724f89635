mod common;

use plainmatte::metrics::{conn_metric, evaluate, grad_metric, largest_component, mse, region_mask, sad, RegionMode};
use plainmatte::plane::{seeded_rng, Plane};
use rand::Rng;

fn instance(seed: u64) -> (usize, usize, Plane<f64>, Plane<f64>, Plane<f64>) {
    let mut rng = seeded_rng(seed);
    let (h, w) = (rng.gen_range(3..14), rng.gen_range(3..14));
    let gt = common::random_alpha(&mut rng, h, w);
    let pred: Vec<f64> = gt.iter().map(|&a| (a + rng.gen_range(-0.4..0.4)).clamp(0.0, 1.0)).collect();
    let tri = common::trimap(&gt, h, w, rng.gen_range(1..4), rng.gen_range(1..4));
    let p = |v: Vec<f64>| Plane::new(1, h, w, v).unwrap();
    (h, w, p(pred), p(gt), p(tri))
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..300 {
        let (h, w, pred, gt, tri) = instance(seed);
        for mode in [RegionMode::UnknownOnly, RegionMode::WholeImage] {
            let mask = region_mask(&tri, mode).unwrap();
            let (p, g) = (common::to_vec(&pred), common::to_vec(&gt));
            let checks = [
                (sad(&pred, &gt, &mask).unwrap(), common::sad(&p, &g, &mask)),
                (mse(&pred, &gt, &mask).unwrap(), common::mse(&p, &g, &mask)),
                (grad_metric(&pred, &gt, &mask).unwrap(), common::grad(&p, &g, &mask, h, w)),
                (conn_metric(&pred, &gt, &mask).unwrap(), common::conn(&p, &g, &mask, h, w)),
            ];
            for (i, (a, b)) in checks.into_iter().enumerate() {
                assert!(common::rel_err(a, b) < 1e-5, "seed {seed} metric {i}: {a} vs {b}");
            }
            let r = evaluate(&pred, &gt, &tri, mode).unwrap();
            assert_eq!(r.pixels, mask.iter().filter(|&&m| m).count());
        }
    }
}

#[test]
fn components_match_label_propagation() {
    let mut rng = seeded_rng(77);
    for _ in 0..300 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let density = rng.gen_range(0.2..0.8);
        let on: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        assert_eq!(largest_component(&on, h, w), common::largest_component(&on, h, w));
    }
}
