use bootmae::checkpoint::Checkpoint;
use bootmae::data::{synth_dataset, Dataset, SynthSpec};
use bootmae::eval::{
    augment, evaluate, extract_features, finetune, head_specs, layer_scale, linear_probe, FinetuneConfig,
    FinetuneState, ProbeConfig,
};
use bootmae::model::{BootMae, ModelConfig};
use bootmae::params::ParamSet;
use bootmae::tensor::Tensor;
use bootmae::train::TrainState;
use bootmae::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (BootMae<f32>, ParamSet<f32>) {
    let model = BootMae::new(ModelConfig::toy()).unwrap();
    let params = TrainState::new(&model, 4).params;
    (model, params)
}

fn data(count: usize, seed: u64) -> Dataset {
    let mut ds = synth_dataset(&SynthSpec { count, ..SynthSpec::default() }, seed).unwrap();
    ds.standardize();
    ds
}

fn quick() -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        batch_size: 8,
        blr: 0.05,
        warmup_epochs: 0.5,
        ..FinetuneConfig::default()
    }
}

#[test]
fn zero_rate_finetune_sits_at_chance() {
    let (model, params) = toy();
    let ds = data(25, 0);
    let cfg = FinetuneConfig { blr: 0.0, ..quick() };
    let mut st = FinetuneState::new(&model, &params, 5, 1).unwrap();
    let before = st.params.clone();
    let rows = finetune(&model, &mut st, &ds, &ds, &cfg, |_| Ok(())).unwrap();
    assert!(st.params.bit_eq(&before));
    let last = rows.last().unwrap();
    // Zero head: all logits tie, so every prediction is class 0.
    assert_eq!(last.top1, 0.2);
    assert!((last.loss - 5f64.ln()).abs() < 1e-6);
}

#[test]
fn head_has_d_times_k_plus_k_parameters() {
    let (model, params) = toy();
    let st = FinetuneState::new(&model, &params, 7, 0).unwrap();
    let head: usize = head_specs(32, 7).iter().map(|s| s.shape.iter().product::<usize>()).sum();
    assert_eq!(head, 32 * 7 + 7);
    assert_eq!(st.params.num_elements(), params.subset("enc.").num_elements() + head);
}

#[test]
fn probe_leaves_encoder_untouched() {
    let (model, params) = toy();
    let ds = data(30, 1);
    let (train, test) = ds.split(0.6, 0);
    let before = params.clone();
    let res = linear_probe(&model, &params, &train, &test, &ProbeConfig { epochs: 3, ..ProbeConfig::default() }, 0).unwrap();
    assert!(params.bit_eq(&before));
    assert_eq!(res.head.len(), 2);
    assert_eq!(res.rows.len(), 6);
    assert!(res.rows.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn probe_and_finetune_are_seed_deterministic() {
    let (model, params) = toy();
    let ds = data(20, 2);
    let pc = ProbeConfig { epochs: 2, ..ProbeConfig::default() };
    let a = linear_probe(&model, &params, &ds, &ds, &pc, 9).unwrap();
    let b = linear_probe(&model, &params, &ds, &ds, &pc, 9).unwrap();
    assert!(a.head.bit_eq(&b.head));
    let run = || {
        let mut st = FinetuneState::new(&model, &params, 5, 3).unwrap();
        finetune(&model, &mut st, &ds, &ds, &quick(), |_| Ok(())).unwrap();
        st.params
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn both_layer_decay_settings_finish_finite() {
    let (model, params) = toy();
    let ds = data(16, 3);
    for decay in [1.0, 0.65] {
        let mut st = FinetuneState::new(&model, &params, 5, 0).unwrap();
        let rows = finetune(&model, &mut st, &ds, &ds, &FinetuneConfig { layer_decay: decay, ..quick() }, |_| Ok(())).unwrap();
        assert!(rows.iter().all(|r| r.loss.is_finite()));
        assert!(st.params.is_finite());
    }
}

#[test]
fn layer_scale_grows_with_depth() {
    let d = 2;
    assert_eq!(layer_scale("enc.patch_embed.w", d, 0.5), 0.125);
    assert_eq!(layer_scale("enc.blocks.0.attn.q.w", d, 0.5), 0.25);
    assert_eq!(layer_scale("enc.blocks.1.mlp.fc1.w", d, 0.5), 0.5);
    assert_eq!(layer_scale("enc.norm.gain", d, 0.5), 1.0);
    assert_eq!(layer_scale("cls.w", d, 0.5), 1.0);
    assert_eq!(layer_scale("enc.blocks.0.attn.q.w", d, 1.0), 1.0);
}

#[test]
fn finetune_resumes_exactly_from_its_checkpoint() {
    let (model, params) = toy();
    let ds = data(20, 4);
    let cfg = FinetuneConfig { epochs: 3, ..quick() };

    let mut full = FinetuneState::new(&model, &params, 5, 8).unwrap();
    let mut saved = None;
    let full_rows = finetune(&model, &mut full, &ds, &ds, &cfg, |s| {
        if s.epoch == 1 {
            saved = Some(s.to_checkpoint("resume-test").to_bytes());
        }
        Ok(())
    })
    .unwrap();

    let ckpt = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = FinetuneState::from_checkpoint(&ckpt, &model, 5).unwrap();
    let tail = finetune(&model, &mut resumed, &ds, &ds, &cfg, |_| Ok(())).unwrap();
    assert!(resumed.params.bit_eq(&full.params));
    assert_eq!(resumed.step, full.step);
    assert_eq!(tail[..], full_rows[2..]);
}

#[test]
fn checkpoint_kind_and_class_count_are_checked() {
    let (model, params) = toy();
    let st = FinetuneState::new(&model, &params, 5, 0).unwrap();
    let c = st.to_checkpoint("");
    assert!(matches!(FinetuneState::from_checkpoint(&c, &model, 4), Err(Error::Checkpoint(_))));
    let pre = TrainState::new(&model, 0).to_checkpoint("");
    assert!(matches!(FinetuneState::<f32>::from_checkpoint(&pre, &model, 5), Err(Error::Checkpoint(_))));
}

#[test]
fn unlabelled_data_is_a_contract_error() {
    let (model, params) = toy();
    let mut ds = data(10, 5);
    ds.labels = None;
    let mut st = FinetuneState::new(&model, &params, 5, 0).unwrap();
    assert!(matches!(finetune(&model, &mut st, &ds, &ds, &quick(), |_| Ok(())), Err(Error::Contract(_))));
    let pc = ProbeConfig::default();
    assert!(matches!(linear_probe(&model, &params, &ds, &ds, &pc, 0), Err(Error::Contract(_))));
}

#[test]
fn evaluation_sees_every_token_and_ignores_batching() {
    let (model, params) = toy();
    let ds = data(12, 6);
    let st = FinetuneState::new(&model, &params, 5, 0).unwrap();
    let (a, la) = evaluate(&model, &st.params, &ds, 5).unwrap();
    let (b, lb) = evaluate(&model, &st.params, &ds, 12).unwrap();
    assert_eq!(a, b);
    assert!((la - lb).abs() < 1e-6);
    let f = extract_features(&model, &params, &ds).unwrap();
    assert_eq!(f.shape(), &[12, 32]);
}

#[test]
fn augmentation_shifts_within_one_patch_and_keeps_extent() {
    let img = Tensor::from_fn(vec![8, 8, 2], |i| 1.0 + i as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let out = augment(&img, 2, &mut rng);
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| v == 0.0 || img.data().contains(&v)));
        // At most two rows and two columns are padding.
        let kept = out.data().iter().filter(|&&v| v != 0.0).count();
        assert!(kept >= 6 * 6 * 2);
    }
}
