use paanet::{BackboneConfig, Mode, ModelConfig, PaaNet, Tape, Tensor};
use proptest::prelude::*;

fn config(c: usize, order: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: c,
            in_channels: 3,
            block_depth: 1,
            seed,
        },
        order,
        sfe_channels: None,
    }
}

fn shapes(model: &mut PaaNet<f64>, x: Tensor<f64>) -> (Vec<[usize; 4]>, Vec<[usize; 4]>, Vec<[usize; 4]>, [usize; 4]) {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let t = model.trace(&mut tape, xv, Mode::Train).unwrap();
    let sh = |p: &paanet::FeaturePyramid| p.0.iter().map(|&v| tape.shape(v)).collect::<Vec<_>>();
    let sides = t.outputs.sides.iter().map(|&v| tape.shape(v)).collect();
    (sh(&t.general), sh(&t.saliency), sides, tape.shape(t.outputs.fused))
}

#[test]
fn shape_contract_at_64_with_c8() {
    let mut model = PaaNet::<f64>::new(&config(8, 3, 0)).unwrap();
    let (general, saliency, sides, fused) = shapes(&mut model, Tensor::zeros([1, 3, 64, 64]));
    let want: Vec<[usize; 4]> = (0..5).map(|i| [1, 8 << i, 64 >> i, 64 >> i]).collect();
    assert_eq!(general, want);
    assert_eq!(saliency, want);
    assert_eq!(sides, vec![[1, 1, 64, 64]; 5]);
    assert_eq!(fused, [1, 1, 64, 64]);
}

#[test]
fn predictions_are_probabilities() {
    let mut model = PaaNet::<f64>::new(&config(2, 2, 1)).unwrap();
    let x = Tensor::from_fn([2, 3, 32, 32], |[n, c, y, x]| ((n + c + y * x) % 7) as f64 / 7.0);
    model.calibrate_all(std::slice::from_ref(&x), 2).unwrap();
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), [2, 1, 32, 32]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn same_seed_same_model() {
    let a = PaaNet::<f64>::new(&config(2, 2, 5)).unwrap();
    let b = PaaNet::<f64>::new(&config(2, 2, 5)).unwrap();
    let c = PaaNet::<f64>::new(&config(2, 2, 6)).unwrap();
    assert_eq!(a.store.params(), b.store.params());
    assert_ne!(a.store.params(), c.store.params());
}

#[test]
fn f32_and_f64_agree_roughly() {
    let x64 = Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((c * 31 + y * 7 + x) % 11) as f64 / 11.0);
    let x32 = Tensor::from_fn([1, 3, 16, 16], |i| x64.at(i) as f32);
    let mut m64 = PaaNet::<f64>::new(&config(2, 1, 3)).unwrap();
    let mut m32 = PaaNet::<f32>::new(&config(2, 1, 3)).unwrap();
    m64.calibrate_all(std::slice::from_ref(&x64), 1).unwrap();
    m32.calibrate_all(std::slice::from_ref(&x32), 1).unwrap();
    let (p64, p32) = (m64.predict(&x64).unwrap(), m32.predict(&x32).unwrap());
    for (a, b) in p64.data().iter().zip(p32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn invalid_inputs_rejected() {
    assert!(PaaNet::<f64>::new(&config(2, 0, 0)).is_err());
    assert!(PaaNet::<f64>::new(&config(0, 1, 0)).is_err());
    let mut model = PaaNet::<f64>::new(&config(2, 1, 0)).unwrap();
    assert!(model.predict(&Tensor::zeros([1, 3, 16, 16])).is_err());
    model.calibrate_all(&[Tensor::zeros([1, 3, 16, 16])], 1).unwrap();
    assert!(model.predict(&Tensor::zeros([1, 3, 16, 16])).is_ok());
    assert!(model.predict(&Tensor::zeros([1, 3, 20, 20])).is_err());
    assert!(model.predict(&Tensor::zeros([1, 1, 16, 16])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn shape_contract_holds(c in 1usize..4, order in 1usize..4, hm in 1usize..3, wm in 1usize..3, n in 1usize..3) {
        let mut model = PaaNet::<f64>::new(&config(c, order, 0)).unwrap();
        let (h, w) = (16 * hm, 16 * wm);
        let (general, saliency, sides, fused) = shapes(&mut model, Tensor::zeros([n, 3, h, w]));
        for i in 0..5 {
            prop_assert_eq!(general[i], [n, c << i, h >> i, w >> i]);
            prop_assert_eq!(saliency[i], general[i]);
            prop_assert_eq!(sides[i], [n, 1, h, w]);
        }
        prop_assert_eq!(fused, [n, 1, h, w]);
    }
}
