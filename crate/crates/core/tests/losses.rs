mod common;

use std::f64::consts::PI;

use common::{brute_mine, comb_map, rng, uniform, unit_rows, Toy};
use mmfeat::geometry::Mask;
use mmfeat::gradcheck::check_gradient;
use mmfeat::losses::*;
use mmfeat::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

const FD_TOL: f64 = 1e-4;

#[test]
fn mining_prefers_the_orthogonal_sample() {
    let da = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
    let coords = [[0.0, 0.0], [20.0, 0.0], [40.0, 0.0]];
    let neg = mine_negatives(&da, &da, &coords, &coords, SAFE_RADIUS);
    assert_eq!(neg.anchors[0], 0);
    assert_eq!(neg.j[0], 1);
}

#[test]
fn mining_two_samples_pick_each_other() {
    let mut r = rng(1);
    let da = unit_rows(2, 8, &mut r);
    let db = unit_rows(2, 8, &mut r);
    let coords = [[0.0, 0.0], [30.0, 30.0]];
    let neg = mine_negatives(&da, &db, &coords, &coords, SAFE_RADIUS);
    assert_eq!(neg.anchors, vec![0, 1]);
    for v in [&neg.j, &neg.k, &neg.n, &neg.m] {
        assert_eq!(v, &vec![1, 0]);
    }
}

#[test]
fn mining_drops_crowded_anchors() {
    let mut r = rng(2);
    let da = unit_rows(3, 4, &mut r);
    let coords = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
    assert!(mine_negatives(&da, &da, &coords, &coords, SAFE_RADIUS).is_empty());
}

#[test]
fn mining_matches_brute_force() {
    let mut r = rng(3);
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let c = r.random_range(2..=16);
        let da = unit_rows(n, c, &mut r);
        let db = unit_rows(n, c, &mut r);
        let ca: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(0.0..40.0), r.random_range(0.0..40.0)]).collect();
        let cb: Vec<[f64; 2]> = ca.iter().map(|p| [p[0] + r.random_range(-2.0..2.0), p[1] + r.random_range(-2.0..2.0)]).collect();
        assert_eq!(mine_negatives(&da, &db, &ca, &cb, SAFE_RADIUS), brute_mine(&da, &db, &ca, &cb, SAFE_RADIUS));
    }
}

#[test]
fn matching_risk_hand_values() {
    let h = PI / 2.0;
    assert_eq!(risk_from_angles(PI, PI, PI, PI, 0.0), 0.0);
    let a = risk_from_angles(h, h, h, h, 0.0);
    assert!((a - 54.79).abs() / 54.79 < 1e-3, "{a}");
    let b = risk_from_angles(0.0, 0.0, 0.0, 0.0, PI);
    assert!((b - 3506.9).abs() / 3506.9 < 1e-3, "{b}");
}

/// Graph risks against `risk_from_angles` on explicitly computed angles.
#[test]
fn matching_risk_matches_angle_formula() {
    let mut r = rng(4);
    let n = 10;
    let da = unit_rows(n, 6, &mut r);
    let db = unit_rows(n, 6, &mut r);
    let coords: Vec<[f64; 2]> = (0..n).map(|i| [10.0 * i as f64, 0.0]).collect();
    let neg = mine_negatives(&da, &db, &coords, &coords, SAFE_RADIUS);
    for swap in [false, true] {
        let mut g = Graph::new();
        let (a, b) = (g.constant(da.clone()), g.constant(db.clone()));
        let risks = matching_risk(&mut g, a, b, &neg, swap);
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * 6..i * 6 + 6].to_vec();
        for t in 0..neg.len() {
            let i = neg.anchors[t];
            let (anchor, pos) = if swap { (row(&db, i), row(&da, i)) } else { (row(&da, i), row(&db, i)) };
            let th = |o: Vec<f64>| angular_distance(&anchor, &o);
            let want = risk_from_angles(th(row(&db, neg.k[t])), th(row(&da, neg.j[t])), th(row(&db, neg.n[t])), th(row(&da, neg.m[t])), th(pos.clone()));
            assert!((g.value(risks).data()[t] - want).abs() < 1e-9 * want.max(1.0));
        }
    }
}

fn toy_rows(seed: u64, n: usize, c: usize) -> (Vec<Tensor<f64>>, Vec<[f64; 2]>) {
    let mut r = rng(seed);
    let coords = (0..n).map(|i| [8.0 * i as f64, 3.0 * (i % 3) as f64]).collect();
    (vec![uniform(&[n, c], -1.0, 1.0, &mut r), uniform(&[n, c], -1.0, 1.0, &mut r)], coords)
}

fn frozen_negatives(inputs: &[Tensor<f64>], coords: &[[f64; 2]]) -> NegativeSet {
    let mut g = Graph::new();
    let a = g.constant(inputs[0].clone());
    let b = g.constant(inputs[1].clone());
    let a = g.l2_normalize_rows(a);
    let b = g.l2_normalize_rows(b);
    mine_negatives(g.value(a), g.value(b), coords, coords, SAFE_RADIUS)
}

#[test]
fn desc_basic_gradient() {
    let (inputs, coords) = toy_rows(5, 8, 5);
    let neg = frozen_negatives(&inputs, &coords);
    assert_eq!(neg.len(), 8);
    for swap in [false, true] {
        check_gradient(&inputs, FD_TOL, |g, v| {
            let a = g.l2_normalize_rows(v[0]);
            let b = g.l2_normalize_rows(v[1]);
            let r = matching_risk(g, a, b, &neg, swap);
            desc_basic_loss(g, r)
        });
    }
}

#[test]
fn desc_recoupled_and_naive_gradients() {
    let (mut inputs, coords) = toy_rows(6, 8, 5);
    let mut r = rng(60);
    inputs.push(uniform(&[8], 0.05, 1.0, &mut r));
    inputs.push(uniform(&[8], 0.05, 1.0, &mut r));
    let neg = frozen_negatives(&inputs, &coords);
    let risk = |g: &mut Graph<f64>, v: &[mmfeat::Var]| {
        let a = g.l2_normalize_rows(v[0]);
        let b = g.l2_normalize_rows(v[1]);
        matching_risk(g, a, b, &neg, false)
    };
    check_gradient(&inputs, FD_TOL, |g, v| {
        let r = risk(g, v);
        naive_coupled_loss(g, r, v[2], v[3])
    });
    // The scores only enter through the detached weight, so only the
    // descriptor inputs are checked here.
    check_gradient(&inputs[..2], FD_TOL, |g, v| {
        let r = risk(g, v);
        let sa = g.constant(inputs[2].clone());
        let sb = g.constant(inputs[3].clone());
        desc_recoupled_loss(g, r, sa, sb)
    });
}

#[test]
fn naive_equals_recoupled_in_value() {
    let (inputs, coords) = toy_rows(7, 8, 5);
    let neg = frozen_negatives(&inputs, &coords);
    let mut r = rng(70);
    let mut g = Graph::new();
    let a = g.param(inputs[0].clone());
    let b = g.param(inputs[1].clone());
    let a = g.l2_normalize_rows(a);
    let b = g.l2_normalize_rows(b);
    let risks = matching_risk(&mut g, a, b, &neg, false);
    let sa = g.param(uniform(&[8], 0.1, 1.0, &mut r));
    let sb = g.param(uniform(&[8], 0.1, 1.0, &mut r));
    let naive = naive_coupled_loss(&mut g, risks, sa, sb);
    let re = desc_recoupled_loss(&mut g, risks, sa, sb);
    assert!((g.value(naive).item() - g.value(re).item()).abs() < 1e-12);
    let grads = g.backward(naive);
    assert!(grads.get(sa).unwrap().max_abs() > 0.0);
    let grads = g.backward(re);
    assert!(grads.get(sa).is_none());

    let mut g = Graph::new();
    let r0 = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let z = g.constant(Tensor::zeros(&[2]));
    let naive = naive_coupled_loss(&mut g, r0, z, z);
    assert_eq!(g.value(naive).item(), 0.0);
}

#[test]
fn desc_basic_descends_on_two_anchors() {
    let (mut inputs, coords) = toy_rows(8, 2, 4);
    let neg = frozen_negatives(&inputs, &coords);
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        let mut g = Graph::new();
        let va = g.param(inputs[0].clone());
        let vb = g.param(inputs[1].clone());
        let a = g.l2_normalize_rows(va);
        let b = g.l2_normalize_rows(vb);
        let r = matching_risk(&mut g, a, b, &neg, false);
        let loss = desc_basic_loss(&mut g, r);
        let value = g.value(loss).item();
        assert!(value <= last + 1e-6, "loss rose from {last} to {value}");
        last = value;
        let grads = g.backward(loss);
        for (t, v) in inputs.iter_mut().zip([va, vb]) {
            let gr = grads.get(v).unwrap();
            *t = t.zip_map(gr, |x, d| x - 1e-4 * d);
        }
    }
}

#[test]
fn peak_basic_closed_forms() {
    for fill in [0.0, 1.0] {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::full(&[1, 1, 20, 20], fill));
        let l = peak_basic_loss(&mut g, s, PATCH_SIZE);
        assert!((g.value(l).item() - 1.0).abs() < 1e-9);
    }
    let mut g = Graph::new();
    let s = g.constant(comb_map(68, 8, 17));
    let l = peak_basic_loss(&mut g, s, PATCH_SIZE);
    let want = (1.0f64 / 289.0).powi(2);
    assert!((g.value(l).item() - want).abs() / want < 0.1);
}

#[test]
fn peak_gradients() {
    let mut r = rng(9);
    let s = uniform(&[1, 1, 8, 8], -2.0, 2.0, &mut r);
    for window in [3, PATCH_SIZE] {
        check_gradient(std::slice::from_ref(&s), FD_TOL, |g, v| {
            let s = g.sigmoid(v[0]);
            peak_basic_loss(g, s, window)
        });
    }
    let anchors = uniform(&[5], 0.0, 1.0, &mut r);
    let risks = uniform(&[5], 0.0, 10.0, &mut r);
    let image = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    check_gradient(&[s, anchors], FD_TOL, |g, v| {
        let s = g.sigmoid(v[0]);
        peak_recoupled_loss(g, s, v[1], &risks, &image, PATCH_SIZE)
    });
}

#[test]
fn peak_recoupled_decomposes() {
    let mut r = rng(10);
    let s = uniform(&[1, 1, 12, 12], 0.0, 1.0, &mut r);
    // Equal risks give a = 0, leaving the basic and edge terms.
    let image = Tensor::from_fn(&[1, 1, 12, 12], |i| ((i / 12 + i % 12) % 2) as f64);
    let m = edge_prior(&image);
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let anchors = g.constant(Tensor::from_vec(&[2], vec![0.3, 0.6]));
    let risks = Tensor::from_vec(&[2], vec![2.0, 2.0]);
    let full = peak_recoupled_loss(&mut g, sv, anchors, &risks, &image, PATCH_SIZE);
    let basic = peak_basic_loss(&mut g, sv, PATCH_SIZE);
    let edge: f64 = m.data().iter().zip(s.data()).map(|(a, b)| (a * b).powi(2)).sum::<f64>() / 144.0;
    assert!((g.value(full).item() - g.value(basic).item() - edge).abs() < 1e-12);
}

#[test]
fn rep_basic_examples() {
    let mut r = rng(11);
    let mask = Mask::full(40, 40, true);
    let cfg = LossConfig::default();
    let s = uniform(&[1, 1, 40, 40], 0.1, 1.0, &mut r);
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let same = rep_basic_loss(&mut g, sv, sv, &mask, &cfg);
    assert!(g.value(same.loss).item().abs() < 1e-12);
    let left = Tensor::from_fn(&[1, 1, 40, 40], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let right = Tensor::from_fn(&[1, 1, 40, 40], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
    let (lv, rv) = (g.constant(left), g.constant(right));
    let disjoint = rep_basic_loss(&mut g, lv, rv, &mask, &cfg);
    assert!((g.value(disjoint.loss).item() - 1.0).abs() < 1e-12);
    let empty = rep_basic_loss(&mut g, sv, sv, &Mask::full(40, 40, false), &cfg);
    assert!(empty.no_valid_patch && g.value(empty.loss).item() == 0.0);
}

#[test]
fn rep_gradients() {
    let mut r = rng(12);
    let mask = Mask::full(8, 8, true);
    let cfg = LossConfig {
        patch_size: 3,
        patch_stride: 2,
        ..LossConfig::default()
    };
    let inputs = vec![uniform(&[1, 1, 8, 8], -2.0, 2.0, &mut r), uniform(&[1, 1, 8, 8], -2.0, 2.0, &mut r)];
    check_gradient(&inputs, FD_TOL, |g, v| {
        let (a, b) = (g.sigmoid(v[0]), g.sigmoid(v[1]));
        rep_basic_loss(g, a, b, &mask, &cfg).loss
    });
    let d = Tensor::from_fn(&[1, 2, 8, 8], |i| if i < 64 { 1.0 } else { 0.0 });
    let dw = Tensor::from_fn(&[1, 2, 8, 8], |i| if i < 64 { (i as f64 * 0.1).cos() } else { (i as f64 * 0.1).sin() });
    check_gradient(&inputs, FD_TOL, |g, v| {
        let (a, b) = (g.sigmoid(v[0]), g.sigmoid(v[1]));
        rep_recoupled_loss(g, a, b, &d, &dw, &mask, &cfg).loss
    });
}

#[test]
fn weight_b_examples() {
    let mut r = rng(13);
    let raw = uniform(&[1, 3, 17, 17], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let v = g.constant(raw);
    let d = g.l2_normalize_channels(v);
    let d = g.value(d).clone();
    assert!((weight_b((0, 0), 17, &d, &d) - 1.0).abs() < 1e-12);
    let e0 = Tensor::from_fn(&[1, 2, 17, 17], |i| if i < 289 { 1.0 } else { 0.0 });
    let e1 = Tensor::from_fn(&[1, 2, 17, 17], |i| if i < 289 { 0.0 } else { 1.0 });
    assert_eq!(weight_b((0, 0), 17, &e0, &e1), 0.0);
}

#[test]
fn rep_recoupled_weight_extremes() {
    let mut r = rng(14);
    let mask = Mask::full(17, 17, true);
    let cfg = LossConfig::default();
    let s = uniform(&[1, 1, 17, 17], 0.0, 1.0, &mut r);
    let sw = uniform(&[1, 1, 17, 17], 0.0, 1.0, &mut r);
    let ones = Tensor::from_fn(&[1, 2, 17, 17], |i| if i < 289 { 1.0 } else { 0.0 });
    let other = Tensor::from_fn(&[1, 2, 17, 17], |i| if i < 289 { 0.0 } else { 1.0 });
    let mut g = Graph::new();
    let (a, b) = (g.constant(s), g.constant(sw));
    let unit = rep_recoupled_loss(&mut g, a, b, &ones, &ones, &mask, &cfg);
    let basic = rep_basic_loss(&mut g, a, b, &mask, &cfg);
    assert!((g.value(unit.loss).item() - g.value(basic.loss).item()).abs() < 1e-12);
    let zero = rep_recoupled_loss(&mut g, a, b, &ones, &other, &mask, &cfg);
    assert_eq!(g.value(zero.loss).item(), 0.0);
}

#[test]
fn edge_prior_examples() {
    let step = Tensor::<f64>::from_fn(&[1, 1, 8, 12], |i| if i % 12 >= 6 { 0.8 } else { 0.1 });
    let m: Tensor<f64> = edge_prior(&step);
    for y in 0..8 {
        for x in 0..12 {
            let v = m.data()[y * 12 + x];
            if x == 5 || x == 6 {
                assert!(v < 1e-6, "({x},{y}) = {v}");
            } else {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }
    let rgb = Tensor::from_fn(&[1, 3, 6, 6], |i| 0.2 + 0.1 * (i / 36) as f64);
    assert!(edge_prior(&rgb).data().iter().all(|&v| v == 1.0));
}

#[test]
fn total_loss_breakdown_sums() {
    let toy = Toy::new(15, 8, 4);
    let mut g = Graph::new();
    let vars: Vec<_> = toy.inputs.iter().map(|t| g.param(t.clone())).collect();
    let (fa, fb) = Toy::features(&mut g, &vars);
    let out = total_loss(&mut g, fa, fb, &toy.pair(), &toy.cfg, Objective::Recoupled).unwrap();
    let b = out.breakdown;
    assert!(b.anchors > 0 && b.rep_patches > 0);
    let sum = b.desc_r + b.peak_r_a + b.peak_r_b + b.lambda * b.rep_r;
    assert!((sum - b.total).abs() <= 1e-6 * b.total.abs());
    assert_eq!(LossConfig::default().lambda, 8.0);
}

#[test]
fn total_loss_gradient() {
    let toy = Toy::new(16, 8, 4);
    let pair = toy.pair();
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<_> = toy.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let (fa, fb) = Toy::features(&mut g, &vars);
        total_loss(&mut g, fa, fb, &pair, &toy.cfg, Objective::Recoupled).unwrap().weights
    };
    check_gradient(&toy.inputs, FD_TOL, |g, v| {
        let (fa, fb) = Toy::features(g, v);
        total_loss_frozen(g, fa, fb, &pair, &toy.cfg, &weights).unwrap().total
    });
    check_gradient(&toy.inputs, FD_TOL, |g, v| {
        let (fa, fb) = Toy::features(g, v);
        total_loss(g, fa, fb, &pair, &toy.cfg, Objective::NaiveCoupled).unwrap().total
    });
}

#[test]
fn stop_gradients_are_exact() {
    for seed in 0..5 {
        let mut toy = Toy::new(100 + seed, 16, 8);
        toy.cfg = LossConfig {
            patch_size: 5,
            patch_stride: 4,
            ..toy.cfg
        };
        let mut g = Graph::new();
        let vars: Vec<_> = toy.inputs.iter().map(|t| g.param(t.clone())).collect();
        let (fa, fb) = Toy::features(&mut g, &vars);
        let out = total_loss(&mut g, fa, fb, &toy.pair(), &toy.cfg, Objective::Recoupled).unwrap();
        let zero = |g: &Graph<f64>, loss, v| {
            let grads = g.backward(loss);
            grads.get(v).map_or(0.0, |t| t.max_abs())
        };
        assert_eq!(zero(&g, out.terms.desc_r, vars[2]), 0.0);
        assert_eq!(zero(&g, out.terms.desc_r, vars[3]), 0.0);
        assert_eq!(zero(&g, out.terms.rep_r, vars[0]), 0.0);
        assert_eq!(zero(&g, out.terms.rep_r, vars[1]), 0.0);
        for peak in [out.terms.peak_r_a, out.terms.peak_r_b] {
            assert_eq!(zero(&g, peak, vars[0]), 0.0);
            assert_eq!(zero(&g, peak, vars[1]), 0.0);
        }
        // Live paths are present.
        assert!(zero(&g, out.terms.desc_r, vars[0]) > 0.0);
        assert!(zero(&g, out.terms.rep_r, vars[2]) > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_a_is_scale_free(risks in prop::collection::vec(0.01f64..100.0, 1..20), k in 0.01f64..100.0) {
        let r = Tensor::from_vec(&[risks.len()], risks.clone());
        let scaled = r.map(|v| v * k);
        let (a, b) = (weight_a(&r), weight_a(&scaled));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn edge_prior_is_scale_free(seed in 0u64..1000, k in 0.1f64..10.0) {
        let mut r = rng(seed);
        let img = uniform(&[1, 1, 9, 9], 0.0, 1.0, &mut r);
        let a = edge_prior(&img);
        let b = edge_prior(&img.map(|v| v * k));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn losses_are_finite_and_nonnegative(seed in 0u64..1000) {
        let toy = Toy::new(seed, 8, 4);
        let mut g = Graph::new();
        let vars: Vec<_> = toy.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let (fa, fb) = Toy::features(&mut g, &vars);
        let b = total_loss(&mut g, fa, fb, &toy.pair(), &toy.cfg, Objective::Recoupled).unwrap().breakdown;
        for v in [b.desc_r, b.peak_r_a, b.peak_r_b, b.rep_r, b.total] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn rep_basic_in_unit_interval(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mask = Mask::full(25, 25, true);
        let mut g = Graph::new();
        let a = g.constant(uniform(&[1, 1, 25, 25], 0.0, 1.0, &mut r));
        let b = g.constant(uniform(&[1, 1, 25, 25], 0.0, 1.0, &mut r));
        let l = rep_basic_loss(&mut g, a, b, &mask, &LossConfig::default());
        let v = g.value(l.loss).item();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
