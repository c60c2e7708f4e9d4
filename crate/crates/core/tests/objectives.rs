mod common;

use bootmae::masking::{random_mask, MaskPlan};
use bootmae::objectives::{loss_prediction, loss_regression, loss_total, pixel_target, Targets};
use bootmae::tensor::{Graph, Tensor};
use common::{grad_check, randn, rng};
use proptest::prelude::*;

/// Double loop: sum over masked k of w_k * mean_j (t - p)^2, over N_m.
fn oracle(pred: &Tensor<f64>, target_rows: &[Vec<f64>], idx: &[usize], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (r, &k) in idx.iter().enumerate() {
        let mut sq = 0.0;
        for j in 0..pred.shape()[1] {
            let d = target_rows[r][j] - pred.row(k)[j];
            sq += d * d;
        }
        total += weights[r] * sq / pred.shape()[1] as f64;
    }
    total / idx.len() as f64
}

fn value(pred: &Tensor<f64>, target: &Tensor<f64>, plan: &MaskPlan) -> f64 {
    let g = Graph::new();
    loss_regression(g.constant(pred.clone()), target, plan).unwrap().value.value().item()
}

#[test]
fn pixel_target_examples() {
    let plan = MaskPlan::from_indices(3, [0, 1, 2]).unwrap();
    let patches = Tensor::new(
        vec![3, 4],
        vec![5.0, 5.0, 5.0, 5.0, 0.0, 2.0, 0.0, 2.0, 0.3, -1.2, 2.5, 0.7],
    )
    .unwrap();
    let t = pixel_target(&patches, &plan).unwrap();
    assert!(t.row(0).iter().all(|&v| v == 0.0));
    for (v, e) in t.row(1).iter().zip([-1.0f64, 1.0, -1.0, 1.0]) {
        assert!((v - e).abs() < 1e-6);
    }

    // standardized-scale pixels: the eps bias on the variance is eps / var
    let big = randn(&[5, 48], &mut rng(1)).map(|v| 3.0 * v);
    let all = MaskPlan::from_indices(5, 0..5).unwrap();
    let t = pixel_target(&big, &all).unwrap();
    for i in 0..5 {
        let row = t.row(i);
        let mean = row.iter().sum::<f64>() / 48.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
    // only masked rows are produced, in index order
    let some = MaskPlan::from_indices(5, [3, 1]).unwrap();
    let s = pixel_target(&big, &some).unwrap();
    assert_eq!(s.row(0), t.row(1));
    assert_eq!(s.row(1), t.row(3));
}

#[test]
fn regression_examples() {
    let plan = MaskPlan::from_indices(4, [2]).unwrap();
    let target = Tensor::full(vec![1, 6], 0.5);
    let mut pred = Tensor::zeros(vec![4, 6]);
    pred.data_mut()[12..18].iter_mut().for_each(|v| *v = 0.5);
    assert_eq!(value(&pred, &target, &plan), 0.0);
    pred.data_mut()[12..18].iter_mut().for_each(|v| *v = 1.5);
    assert_eq!(value(&pred, &target, &plan), 1.0);

    let empty = MaskPlan::from_indices(4, []).unwrap();
    let g = Graph::new();
    let l = loss_regression(g.constant(pred), &Tensor::zeros(vec![0, 6]), &empty).unwrap();
    assert!(l.empty);
    assert_eq!(l.value.value().item(), 0.0);
}

#[test]
fn prediction_examples() {
    let plan = MaskPlan::from_indices(3, [1]).unwrap();
    let full = randn(&[3, 32], &mut rng(2));
    let targets = Targets::masked_rows(&full, &plan).unwrap();
    let g = Graph::new();
    assert_eq!(loss_prediction(g.constant(full.clone()), &targets, &plan).unwrap().value.value().item(), 0.0);
    let shifted = full.map(|v| v + 1.0);
    assert_eq!(loss_prediction(g.constant(shifted), &targets, &plan).unwrap().value.value().item(), 1.0);
}

#[test]
fn losses_match_double_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let plan = random_mask(16, 0.75, &mut r).unwrap();
        let pred = randn(&[16, 48], &mut r);
        let patches = randn(&[16, 48], &mut r);
        let target = pixel_target(&patches, &plan).unwrap();
        let rows: Vec<Vec<f64>> = (0..plan.n_masked()).map(|i| target.row(i).to_vec()).collect();
        let want = oracle(&pred, &rows, plan.masked(), plan.weights());
        assert!((value(&pred, &target, &plan) - want).abs() < 1e-6);

        let f_bar = randn(&[16, 32], &mut r);
        let full = randn(&[16, 32], &mut r);
        let t = Targets::masked_rows(&full, &plan).unwrap();
        let rows: Vec<Vec<f64>> = plan.masked().iter().map(|&i| full.row(i).to_vec()).collect();
        let want = oracle(&f_bar, &rows, plan.masked(), plan.weights());
        let g = Graph::new();
        let got = loss_prediction(g.constant(f_bar), &t, &plan).unwrap().value.value().item();
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn partial_targets_average_over_their_rows() {
    let plan = MaskPlan::from_indices(6, [0, 2, 3, 5]).unwrap();
    let f_bar = randn(&[6, 8], &mut rng(3));
    let full = randn(&[6, 8], &mut rng(4));
    let idx = vec![2, 5];
    let t = Targets {
        indices: idx.clone(),
        rows: full.select_rows(&idx).unwrap(),
    };
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| full.row(i).to_vec()).collect();
    let g = Graph::new();
    let got = loss_prediction(g.constant(f_bar.clone()), &t, &plan).unwrap().value.value().item();
    assert!((got - oracle(&f_bar, &rows, &idx, &[1.0, 1.0])).abs() < 1e-12);

    let visible = Targets {
        indices: vec![1],
        rows: full.select_rows(&[1]).unwrap(),
    };
    assert!(loss_prediction(g.constant(f_bar), &visible, &plan).is_err());
}

#[test]
fn gradients_vanish_on_visible_rows_and_match_fd_on_masked() {
    let plan = random_mask(8, 0.5, &mut rng(5)).unwrap();
    let patches = randn(&[8, 12], &mut rng(6));
    let target = pixel_target(&patches, &plan).unwrap();
    let pred = randn(&[8, 12], &mut rng(7));

    let g = Graph::new();
    let x = g.leaf(pred.clone());
    g.backward(loss_regression(x, &target, &plan).unwrap().value).unwrap();
    let grad = x.grad().unwrap();
    for i in plan.visible() {
        assert!(grad.row(i).iter().all(|&v| v == 0.0));
    }
    for &i in plan.masked() {
        assert!(grad.row(i).iter().any(|&v| v != 0.0));
    }

    let err = grad_check(&[pred], |_, v| Ok(loss_regression(v[0], &target, &plan)?.value));
    assert!(err < 1e-4);

    let full = randn(&[8, 6], &mut rng(8));
    let t = Targets::masked_rows(&full, &plan).unwrap();
    let err = grad_check(&[randn(&[8, 6], &mut rng(9))], |_, v| Ok(loss_prediction(v[0], &t, &plan)?.value));
    assert!(err < 1e-4);
}

#[test]
fn feature_targets_receive_no_gradient() {
    let plan = random_mask(8, 0.5, &mut rng(10)).unwrap();
    let g = Graph::new();
    let teacher = g.leaf(randn(&[8, 4], &mut rng(11)));
    let features = teacher.gelu();
    let t = Targets::masked_rows(&features.value(), &plan).unwrap();
    let student = g.leaf(randn(&[8, 4], &mut rng(12)));
    let l = loss_prediction(student, &t, &plan).unwrap().value;
    g.backward(l).unwrap();
    assert!(teacher.grad().is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(student.grad().is_some());
}

proptest! {
    #[test]
    fn weights_scale_contributions_exactly(seed in 0u64..500, which in 0usize..8) {
        let mut r = rng(seed);
        let plan = random_mask(16, 0.5, &mut r).unwrap();
        let pred = randn(&[16, 4], &mut r);
        let full = randn(&[16, 4], &mut r);
        let t = Targets::masked_rows(&full, &plan).unwrap();
        let rows: Vec<Vec<f64>> = plan.masked().iter().map(|&i| full.row(i).to_vec()).collect();
        let mut w = vec![1.0; plan.n_masked()];
        let base = oracle(&pred, &rows, plan.masked(), &w);
        w[which] = 2.0;
        let doubled = oracle(&pred, &rows, plan.masked(), &w);
        let k = plan.masked()[which];
        let term: f64 = (0..4).map(|j| (pred.row(k)[j] - full.row(k)[j]).powi(2)).sum::<f64>() / 4.0 / 8.0;
        prop_assert!((doubled - base - term).abs() < 1e-12);
        let g = Graph::new();
        let l = loss_prediction(g.constant(pred), &t, &plan).unwrap().value.value().item();
        prop_assert!((l - base).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_only_at_targets(seed in 0u64..500, ratio in 0.1f64..0.9) {
        let mut r = rng(seed);
        let plan = random_mask(16, ratio, &mut r).unwrap();
        let full = randn(&[16, 5], &mut r);
        let t = Targets::masked_rows(&full, &plan).unwrap();
        let g = Graph::new();
        let exact = loss_prediction(g.constant(full.clone()), &t, &plan).unwrap().value.value().item();
        prop_assert_eq!(exact, 0.0);
        let mut off = full.clone();
        off.data_mut()[plan.masked()[0] * 5] += 0.1;
        let l = loss_prediction(g.constant(off), &t, &plan).unwrap().value.value().item();
        prop_assert!(l > 0.0);
    }
}

#[test]
fn total_rejects_non_finite() {
    let b = loss_total(0.4, 0.6, 1.0).unwrap();
    assert_eq!((b.l_r, b.l_p, b.lambda, b.total), (0.4, 0.6, 1.0, 1.0));
    assert_eq!(loss_total(0.4, 0.6, 0.0).unwrap().total, 0.4);
    assert!(loss_total(0.4, f64::INFINITY, 1.0).is_err());
}
