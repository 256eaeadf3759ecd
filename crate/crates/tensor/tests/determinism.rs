use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use underpass_tensor::par::{with_execution, Execution};
use underpass_tensor::{shape_trace, AdamConfig, LayerKind, Mode, OptimizerState, Sequential, Tape, Tensor};

fn net() -> Sequential<f32> {
    Sequential::new(
        vec![
            LayerKind::Conv2d { filters: 4, stride: 1 },
            LayerKind::InstanceNorm,
            LayerKind::ReLU,
            LayerKind::MaxPool2x2,
            LayerKind::Conv2d { filters: 4, stride: 2 },
            LayerKind::ResidualBlock { filters: 4 },
            LayerKind::TransposeConv2d { filters: 3 },
            LayerKind::Tanh,
            LayerKind::Dense { width: 6 },
            LayerKind::Dropout { rate: 0.3 },
            LayerKind::Dense { width: 4 },
        ],
        vec![3, 8, 8],
        11,
    )
    .unwrap()
}

fn batch(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![5, 3, 8, 8],
        (0..5 * 192).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn train_ten_steps() -> Sequential<f32> {
    let mut model = net();
    let mut opt = OptimizerState::new(AdamConfig::default(), model.params());
    for step in 0..10 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(batch(step));
        let logits = model.forward(&mut tape, &bound, x, Mode::Train { seed: step }).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 3, 0]).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        model.store_grads(&mut grads, &bound).unwrap();
        opt.step(model.params_mut()).unwrap();
    }
    model
}

#[test]
fn repeated_training_is_bit_identical() {
    assert_eq!(train_ten_steps(), train_ten_steps());
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let par = with_execution(Execution::Parallel, train_ten_steps);
    let seq = with_execution(Execution::Sequential, train_ten_steps);
    assert_eq!(par, seq);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(batch(1));
    let y = LayerKind::Dropout { rate: 0.5 }
        .forward(&mut tape, x, &[], Mode::Eval)
        .unwrap();
    assert_eq!(x, y);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_shape_follows_shape_algebra(
        c in 1usize..4, h in 2usize..12, w in 2usize..12, f in 1usize..5, stride in 1usize..3,
    ) {
        let layers = vec![
            LayerKind::Conv2d { filters: f, stride },
            LayerKind::ReLU,
            LayerKind::TransposeConv2d { filters: f },
            LayerKind::MaxPool2x2,
            LayerKind::Dense { width: 3 },
        ];
        let want = shape_trace(&layers, &[c, h, w]).unwrap();
        let net = Sequential::<f32>::new(layers, vec![c, h, w], 0).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let mut x = tape.constant(Tensor::full(vec![2, c, h, w], 0.5));
        for (i, (layer, vars)) in net.layers().iter().zip(bound_chunks(&net, &bound)).enumerate() {
            x = layer.forward(&mut tape, x, &vars, Mode::Eval).unwrap();
            prop_assert_eq!(&tape.shape(x)[1..], want[i + 1].as_slice());
            prop_assert!(tape.value(x).is_finite());
        }
    }
}

fn bound_chunks(net: &Sequential<f32>, bound: &underpass_tensor::Bound) -> Vec<Vec<underpass_tensor::Var>> {
    let mut vars = bound.vars();
    net.layers()
        .iter()
        .map(|l| (0..l.param_names().len()).map(|_| vars.next().unwrap()).collect())
        .collect()
}
