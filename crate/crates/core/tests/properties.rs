use ensemblekit_core::baselines::{
    akaike_weights, fit_constant_ma, greedy_select, model_losses, predict_static, quick_select, random_n, top_n,
    EnsembleWeights,
};
use ensemblekit_core::data::{LabelVector, MetaDataset, PredictionCube, Split, TaskKind};
use ensemblekit_core::neural::{
    batch_loss_and_grad, forward_ma_weights, inference_weights, param_count, predict, sample_mask, DropMask, Masking,
    Mode, NEConfig, NEParams,
};
use ensemblekit_core::nn::{gradcheck, init_dense_net, softmax, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

fn random_split(rng: &mut ChaCha8Rng, n: usize, m: usize, c: usize) -> Split {
    let mut values = Vec::with_capacity(n * m * c);
    for _ in 0..n * m {
        if c == 1 {
            values.push(rng.random_range(-2.0..2.0));
        } else {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            values.extend(raw.iter().map(|v| v / s));
        }
    }
    let labels = if c == 1 {
        LabelVector::Values((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    } else {
        LabelVector::Classes((0..n).map(|_| rng.random_range(0..c)).collect())
    };
    Split::new(PredictionCube::new(n, m, c, values).unwrap(), labels)
}

fn random_dataset(seed: u64, n: usize, m: usize, c: usize) -> MetaDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = if c == 1 {
        TaskKind::Regression
    } else {
        TaskKind::classification(c).unwrap()
    };
    let val = random_split(&mut rng, n, m, c);
    let test = random_split(&mut rng, n, m, c);
    MetaDataset::new(format!("random-{seed}"), task, val, test).unwrap()
}

fn assert_simplex(w: &[f64]) {
    assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)), "{w:?}");
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{w:?}");
}

fn class_count() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), 2usize..6]
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), k in -100.0f64..100.0) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_net_gradients_match_finite_differences(
        seed in any::<u64>(),
        dims in prop::collection::vec(1usize..7, 2..5),
        rows in 1usize..4,
    ) {
        let mut net = init_dense_net(&dims, seed).unwrap();
        prop_assume!(net.n_params() <= 500);
        // zero biases put dead units exactly on the rectifier kink
        net.params_mut().iter_mut().for_each(|w| *w += 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let input = Matrix::from_vec(rows, dims[0], (0..rows * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..rows * dims[dims.len() - 1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |net: &ensemblekit_core::nn::DenseNet| {
            let out = net.forward_batch(input.clone()).unwrap();
            out.output().as_slice().iter().zip(&target).map(|(o, t)| 0.5 * (o - t) * (o - t)).sum::<f64>()
        };
        let trace = net.forward_batch(input.clone()).unwrap();
        let g: Vec<f64> = trace.output().as_slice().iter().zip(&target).map(|(o, t)| o - t).collect();
        let g = Matrix::from_vec(rows, dims[dims.len() - 1], g).unwrap();
        let (grads, _) = net.backward(&trace, &g).unwrap();
        let mut probe = net.clone();
        let cmp = gradcheck::compare_multiscale(grads.as_slice(), |x| {
            probe.params_mut().copy_from_slice(x);
            loss(&probe)
        }, net.params(), &FD_STEPS, 1e-8);
        prop_assert!(cmp.passes(1e-4, 1e-7), "{cmp:?}");
    }

    #[test]
    fn inference_weights_are_simplex_rows(seed in any::<u64>(), m in 1usize..6, c in class_count(), h in 1usize..6, layers in 1usize..4) {
        let ds = random_dataset(seed, 6, m, c);
        let cfg = NEConfig { hidden_dim: h, layers, ..NEConfig::new(Mode::ModelAveraging) };
        let params = NEParams::init(&cfg, m, seed).unwrap();
        let w = inference_weights(&params, &ds.test().predictions).unwrap();
        for i in 0..w.rows() {
            assert_simplex(w.row(i));
        }
        let a = predict(&params, &ds.test().predictions).unwrap();
        let b = predict(&params, &ds.test().predictions).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masked_models_get_exactly_zero_weight(seed in any::<u64>(), m in 2usize..8, c in class_count(), gamma in 0.05f64..1.0) {
        let ds = random_dataset(seed, 3, m, c);
        let cfg = NEConfig { hidden_dim: 4, layers: 3, ..NEConfig::new(Mode::ModelAveraging) };
        let params = NEParams::init(&cfg, m, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(m, gamma, &mut rng);
        prop_assert!(mask.retained_count() >= 1);
        let theta = forward_ma_weights(&params, ds.test().predictions.instance(0), c, Some(&mask), gamma).unwrap();
        assert_simplex(&theta);
        for (k, &t) in theta.iter().enumerate() {
            if !mask.is_retained(k) {
                prop_assert_eq!(t, 0.0);
            }
        }
    }

    #[test]
    fn ma_class_probabilities_sum_to_one(seed in any::<u64>(), m in 1usize..6, c in 2usize..6) {
        let ds = random_dataset(seed, 10, m, c);
        let cfg = NEConfig { hidden_dim: 5, layers: 2, ..NEConfig::new(Mode::ModelAveraging) };
        let params = NEParams::init(&cfg, m, seed).unwrap();
        let p = predict(&params, &ds.test().predictions).unwrap();
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensembler_gradients_match_finite_differences(
        seed in any::<u64>(),
        stacking in any::<bool>(),
        m in 2usize..6,
        c in class_count(),
        h in 1usize..5,
        layers in 2usize..4,
    ) {
        let ds = random_dataset(seed, 5, m, c);
        let mode = if stacking { Mode::Stacking } else { Mode::ModelAveraging };
        let cfg = NEConfig { mode, hidden_dim: h, layers, ..NEConfig::default() };
        let mut params = NEParams::init(&cfg, m, seed).unwrap();
        let shifted: Vec<f64> = params.flat_params().iter().map(|w| w + 0.05).collect();
        params.set_flat_params(&shifted).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(m, 0.6, &mut rng);
        let rows = [0, 1, 2, 4, 4];
        let masking = Masking::Shared(&mask, 0.6);
        let (_, grads) = batch_loss_and_grad(&params, ds.validation(), &rows, masking).unwrap();
        let mut probe = params.clone();
        let cmp = gradcheck::compare_multiscale(&grads.flatten(), |x| {
            probe.set_flat_params(x).unwrap();
            batch_loss_and_grad(&probe, ds.validation(), &rows, masking).unwrap().0
        }, &params.flat_params(), &FD_STEPS, 1e-8);
        prop_assert!(cmp.passes(1e-4, 1e-7), "{cmp:?}");
    }

    #[test]
    fn parameter_count_ignores_classes(stacking in any::<bool>(), m in 1usize..30, h in 1usize..40, layers in 1usize..6) {
        let mode = if stacking { Mode::Stacking } else { Mode::ModelAveraging };
        let cfg = NEConfig { mode, hidden_dim: h, layers, ..NEConfig::default() };
        let params = NEParams::init(&cfg, m, 0).unwrap();
        prop_assert_eq!(params.n_params(), param_count(&cfg, m));
        // the same parameters run on cubes with any class count
        for c in [1usize, 2, 7] {
            let ds = random_dataset(1, 2, m, c);
            prop_assert_eq!(predict(&params, &ds.test().predictions).unwrap().cols(), c);
        }
    }

    #[test]
    fn static_weights_are_simplex_valid(seed in any::<u64>(), m in 1usize..7, c in class_count(), n_sel in 1usize..8) {
        let ds = random_dataset(seed, 12, m, c);
        let val = ds.validation();
        let weights = [
            top_n(val, n_sel).unwrap(),
            random_n(m, n_sel, seed).unwrap(),
            greedy_select(val, n_sel).unwrap().to_weights(m).unwrap(),
            quick_select(val, n_sel).unwrap().to_weights(m).unwrap(),
            akaike_weights(&model_losses(val).unwrap()).unwrap(),
            fit_constant_ma(val, 50, 1e-2, seed).unwrap(),
        ];
        for w in &weights {
            assert_simplex(w.as_slice());
            let preds = predict_static(w, &ds.test().predictions).unwrap();
            if c > 1 {
                for i in 0..preds.rows() {
                    prop_assert!((preds.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn masks_are_never_empty(seed in any::<u64>(), m in 1usize..10, gamma in 0.001f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(m, gamma, &mut rng);
        prop_assert_eq!(mask.len(), m);
        prop_assert!(DropMask::new(mask.as_slice().to_vec()).is_ok());
    }
}

#[test]
fn uniform_weights_reproduce_mean_prediction() {
    let ds = random_dataset(3, 4, 3, 2);
    let w = EnsembleWeights::uniform(3);
    let p = predict_static(&w, &ds.test().predictions).unwrap();
    let cube = &ds.test().predictions;
    let expected = (cube.get(2, 0, 1) + cube.get(2, 1, 1) + cube.get(2, 2, 1)) / 3.0;
    assert!((p.get(2, 1) - expected).abs() < 1e-15);
}
