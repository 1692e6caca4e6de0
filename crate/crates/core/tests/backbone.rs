use paanet::backbone::{calibrate_stats, pretrain, PretextTask, PREFIX};
use paanet::data::synth_samples;
use paanet::nn::{Ctx, Init, Mode};
use paanet::training::backbone_bytes;
use paanet::{
    experiment, Backbone, BackboneConfig, ParamStore, RunConfig, Strategy, SynthConfig, Tape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(c: usize, seed: u64) -> (Backbone, ParamStore<f64>) {
    let cfg = BackboneConfig {
        base_channels: c,
        in_channels: 3,
        block_depth: 1,
        seed,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::build(&cfg, &mut store, &mut Init::new(seed)).unwrap();
    (bb, store)
}

fn random_images(n: usize, size: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::from_fn([1, 3, size, size], |_| rng.gen_range(0.0..1.0))).collect()
}

fn pyramid_shapes(bb: &Backbone, store: &mut ParamStore<f64>, x: Tensor<f64>, mode: Mode) -> Vec<[usize; 4]> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pyr = bb.forward(&mut Ctx::new(&mut tape, store, mode), xv).unwrap();
    pyr.validate(&tape, true).unwrap();
    pyr.0.iter().map(|&v| tape.shape(v)).collect()
}

fn eval_pyramid(bb: &Backbone, store: &mut ParamStore<f64>, x: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pyr = bb.forward(&mut Ctx::new(&mut tape, store, Mode::Eval), xv).unwrap();
    pyr.0.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn pyramid_shapes_at_64_with_c8() {
    let (bb, mut store) = build(8, 0);
    let shapes = pyramid_shapes(&bb, &mut store, Tensor::zeros([1, 3, 64, 64]), Mode::Train);
    assert_eq!(
        shapes,
        vec![[1, 8, 64, 64], [1, 16, 32, 32], [1, 32, 16, 16], [1, 64, 8, 8], [1, 128, 4, 4]]
    );
}

#[test]
fn zero_image_gives_finite_outputs() {
    let (bb, mut store) = build(4, 1);
    calibrate_stats(&bb, &mut store, &random_images(2, 32, 0), 2).unwrap();
    for level in eval_pyramid(&bb, &mut store, Tensor::zeros([1, 3, 32, 32])) {
        assert!(level.all_finite());
    }
}

#[test]
fn eval_mode_is_batch_independent() {
    let (bb, mut store) = build(4, 2);
    let imgs = random_images(2, 32, 5);
    calibrate_stats(&bb, &mut store, &imgs, 2).unwrap();
    let both = eval_pyramid(&bb, &mut store, Tensor::stack(&[&imgs[0], &imgs[1]]).unwrap());
    for (n, img) in imgs.iter().enumerate() {
        let single = eval_pyramid(&bb, &mut store, img.clone());
        for (b, s) in both.iter().zip(&single) {
            assert!(b.sample(n).max_abs_diff(s) < 1e-12);
        }
    }
}

#[test]
fn eval_mode_is_deterministic_for_a_seed() {
    let img = random_images(1, 32, 9).remove(0);
    let run = || {
        let (bb, mut store) = build(4, 3);
        calibrate_stats(&bb, &mut store, std::slice::from_ref(&img), 1).unwrap();
        eval_pyramid(&bb, &mut store, img.clone())
    };
    assert_eq!(run(), run());
}

fn tiny_config(strategy: Strategy) -> RunConfig {
    RunConfig {
        base_channels: 2,
        order: 1,
        input_size: 16,
        epochs: 25,
        lr_step: 25,
        lr: 1e-2,
        strategy,
        ..RunConfig::default()
    }
}

#[test]
fn frozen_backbone_survives_100_steps() {
    let data = synth_samples::<f64>(&SynthConfig::standard(16, 16, 3)).unwrap();
    let cfg = tiny_config(Strategy::Frozen);
    let mut trainer = experiment::trainer_for(&cfg, &data).unwrap();
    let before = backbone_bytes(&trainer.model.store);
    let stats_before: Vec<_> = trainer.model.store.all_stats().to_vec();
    trainer.train(&data).unwrap();
    assert_eq!(trainer.steps_taken(), 100);
    assert_eq!(backbone_bytes(&trainer.model.store), before);
    for (a, b) in stats_before.iter().zip(trainer.model.store.all_stats()) {
        if a.name.starts_with(PREFIX) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn unfrozen_backbone_moves_after_one_step() {
    let data = synth_samples::<f64>(&SynthConfig::standard(4, 16, 4)).unwrap();
    let cfg = tiny_config(Strategy::Unfrozen);
    let mut trainer = experiment::trainer_for(&cfg, &data).unwrap();
    let before = backbone_bytes(&trainer.model.store);
    trainer.run_epoch(&data).unwrap();
    assert_eq!(trainer.steps_taken(), 1);
    assert_ne!(backbone_bytes(&trainer.model.store), before);
}

#[test]
fn freezing_mid_run_stops_changes() {
    let data = synth_samples::<f64>(&SynthConfig::standard(8, 16, 5)).unwrap();
    let cfg = tiny_config(Strategy::Unfrozen);
    let mut trainer = experiment::trainer_for(&cfg, &data).unwrap();
    trainer.run_epoch(&data).unwrap();
    trainer.model.set_frozen(true);
    let mid = backbone_bytes(&trainer.model.store);
    trainer.run_epoch(&data).unwrap();
    trainer.run_epoch(&data).unwrap();
    assert_eq!(backbone_bytes(&trainer.model.store), mid);
}

#[test]
fn pretraining_lowers_pretext_loss() {
    let (bb, mut store) = build(4, 6);
    let task = PretextTask::new(16, 6);
    let losses = pretrain(&bb, &mut store, &task, 200).unwrap();
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "first {head} last {tail}");
    assert!(store.find("pretext.head.weight").is_none());
}

#[test]
fn pretrained_and_random_pyramids_differ() {
    let img = random_images(1, 16, 7).remove(0);
    let (bb, mut random) = build(4, 7);
    let mut trained = random.clone();
    pretrain(&bb, &mut trained, &PretextTask::new(16, 7), 20).unwrap();
    for store in [&mut random, &mut trained] {
        calibrate_stats(&bb, store, std::slice::from_ref(&img), 1).unwrap();
    }
    assert_ne!(eval_pyramid(&bb, &mut random, img.clone()), eval_pyramid(&bb, &mut trained, img));
}

#[test]
fn pretraining_a_frozen_backbone_is_rejected() {
    let (mut bb, mut store) = build(2, 0);
    bb.set_frozen(&mut store, true);
    assert!(pretrain(&bb, &mut store, &PretextTask::new(16, 0), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_contract_for_valid_sizes(c in 1usize..5, hm in 1usize..4, wm in 1usize..4, n in 1usize..3, depth in 1usize..3) {
        let cfg = BackboneConfig { base_channels: c, in_channels: 3, block_depth: depth, seed: 0 };
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut Init::new(0)).unwrap();
        let (h, w) = (16 * hm, 16 * wm);
        let shapes = pyramid_shapes(&bb, &mut store, Tensor::zeros([n, 3, h, w]), Mode::Train);
        for (i, s) in shapes.iter().enumerate() {
            prop_assert_eq!(*s, [n, c << i, h >> i, w >> i]);
        }
    }
}
