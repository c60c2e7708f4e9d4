mod common;

use bootmae::masking::{random_mask, MaskPlan};
use bootmae::model::{BootMae, ModelConfig};
use bootmae::momentum::{ema_update, fed_set, momentum_at, target_features, FractionMode, MomentumSchedule};
use bootmae::objectives::loss_prediction;
use bootmae::params::ParamSet;
use bootmae::tensor::{Graph, Tensor};
use common::{randn, rng};
use proptest::prelude::*;

fn pair(seed: u64) -> (ParamSet<f64>, ParamSet<f64>) {
    let mut s = ParamSet::new();
    let mut l = ParamSet::new();
    let mut r = rng(seed);
    s.insert("enc.a", randn(&[3, 2], &mut r));
    s.insert("enc.b", randn(&[4], &mut r));
    l.insert("enc.a", randn(&[3, 2], &mut r));
    l.insert("enc.b", randn(&[4], &mut r));
    (s, l)
}

#[test]
fn ema_extremes() {
    let (s0, live) = pair(1);
    let mut s = s0.clone();
    ema_update(&mut s, &live, 1.0).unwrap();
    assert!(s.bit_eq(&s0));
    ema_update(&mut s, &live, 0.0).unwrap();
    assert!(s.bit_eq(&live));
}

#[test]
fn ema_matches_closed_form_after_100_steps() {
    let m = 0.99;
    let (s0, live) = pair(2);
    let before = live.clone();
    let mut s = s0.clone();
    for _ in 0..100 {
        ema_update(&mut s, &live, m).unwrap();
    }
    assert!(live.bit_eq(&before));
    let mm = m.powi(100);
    for (name, t) in s.iter() {
        for ((got, a), b) in t.data().iter().zip(s0.get(name).unwrap().data()).zip(live.get(name).unwrap().data()) {
            let want = mm * a + (1.0 - mm) * b;
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
    }
}

#[test]
fn ema_gap_shrinks_geometrically() {
    let m = 0.9;
    let (s0, live) = pair(3);
    let gap = |s: &ParamSet<f64>| -> f64 {
        s.iter()
            .flat_map(|(n, t)| t.data().iter().zip(live.get(n).unwrap().data()).map(|(a, b)| (a - b).powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let g0 = gap(&s0);
    let mut s = s0.clone();
    for t in 1..=50 {
        ema_update(&mut s, &live, m).unwrap();
        let expected = m.powi(t) * g0;
        assert!((gap(&s) - expected).abs() <= 1e-10 * expected);
    }
}

#[test]
fn ema_rejects_misaligned_sets() {
    let (mut s, live) = pair(4);
    let mut bad = live.clone();
    bad.insert("enc.a", Tensor::zeros(vec![2, 3]));
    assert!(ema_update(&mut s, &bad, 0.5).is_err());
    s.insert("enc.extra", Tensor::zeros(vec![1]));
    assert!(ema_update(&mut s, &live, 0.5).is_err());
}

#[test]
fn schedule_examples() {
    let s = MomentumSchedule::default();
    assert_eq!(momentum_at(0.0, &s), 0.999);
    assert!((momentum_at(50.0, &s) - 0.99945).abs() < 1e-15);
    assert_eq!(momentum_at(100.0, &s), 0.9999);
    assert_eq!(momentum_at(1000.0, &s), 0.9999);
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_continuous(a in 0.0f64..600.0, b in 0.0f64..600.0, second in any::<bool>()) {
        let s = if second { MomentumSchedule::with_second_ramp() } else { MomentumSchedule::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(momentum_at(lo, &s) <= momentum_at(hi, &s));
        // slope is bounded by the steepest ramp
        prop_assert!(momentum_at(hi, &s) - momentum_at(lo, &s) <= (hi - lo) * 0.0009 / 100.0 + 1e-15);
    }
}

#[test]
fn fed_set_modes() {
    let plan = random_mask(16, 0.75, &mut rng(5)).unwrap();
    let full = fed_set(&plan, 1.0, FractionMode::Image, &mut rng(6)).unwrap();
    assert_eq!(full.fed, (0..16).collect::<Vec<_>>());
    assert_eq!(full.targets, plan.masked());

    // a quarter of the image is exactly the visible set: no targets left
    assert!(fed_set(&plan, 0.25, FractionMode::Image, &mut rng(6)).is_err());

    let half = fed_set(&plan, 0.5, FractionMode::Image, &mut rng(6)).unwrap();
    assert_eq!(half.fed.len(), 8);
    assert_eq!(half.targets.len(), 4);
    assert!(plan.visible().iter().all(|v| half.fed.contains(v)));
    assert!(half.targets.iter().all(|&t| plan.is_masked(t)));

    let quarter = fed_set(&plan, 0.25, FractionMode::Masked, &mut rng(6)).unwrap();
    assert_eq!(quarter.targets.len(), 3);
    assert_eq!(quarter.fed, quarter.targets);

    assert!(fed_set(&plan, 0.0, FractionMode::Masked, &mut rng(6)).is_err());
}

#[test]
fn shadow_targets_are_deterministic_and_detached() {
    let model = BootMae::<f64>::new(ModelConfig::toy()).unwrap();
    let live = model.init_params(&mut rng(7));
    let shadow = live.subset("enc.");
    let patches = randn(&[16, 48], &mut rng(8));
    let plan = random_mask(16, 0.75, &mut rng(9)).unwrap();
    let fed = fed_set(&plan, 1.0, FractionMode::Image, &mut rng(10)).unwrap();
    let a = target_features(&model, &shadow, &patches, &plan, &fed).unwrap();
    let b = target_features(&model, &shadow, &patches, &plan, &fed).unwrap();
    assert!(a.rows.bit_eq(&b.rows));
    assert_eq!(a.rows.shape(), &[12, 32]);
    assert_eq!(a.indices, plan.masked());

    // backward of the feature loss touches only the student's graph
    let g = Graph::new();
    let bound = live.bind(&g, true);
    let art = model.forward_patches(&bound, &g, &patches, &plan).unwrap();
    g.backward(loss_prediction(art.f_bar, &a, &plan).unwrap().value).unwrap();
    let with_shadow = bound.grads();
    g.zero_grad();
    let frozen = a.clone();
    g.backward(loss_prediction(art.f_bar, &frozen, &plan).unwrap().value).unwrap();
    assert!(with_shadow.bit_eq(&bound.grads()));
    assert!(shadow.bit_eq(&live.subset("enc.")));
}

#[test]
fn partial_feed_uses_matching_positions() {
    let model = BootMae::<f64>::new(ModelConfig::toy()).unwrap();
    let shadow = model.init_params(&mut rng(11)).subset("enc.");
    let patches = randn(&[16, 48], &mut rng(12));
    let plan = MaskPlan::from_indices(16, 4..16).unwrap();
    let fed = fed_set(&plan, 0.5, FractionMode::Masked, &mut rng(13)).unwrap();
    let t = target_features(&model, &shadow, &patches, &plan, &fed).unwrap();
    assert_eq!(t.indices.len(), 6);

    let g = Graph::new();
    let bound = shadow.bind(&g, false);
    let enc = model
        .encode_tokens(&bound, g.constant(patches.select_rows(&fed.fed).unwrap()), &fed.fed)
        .unwrap();
    assert!(enc.z_hat.value().bit_eq(&t.rows));
}
