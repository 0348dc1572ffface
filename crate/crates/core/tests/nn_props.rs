use list_core::nn::fixtures::{psi_bundle, LOCAL_CHANNELS};
use list_core::nn::{conv3d_forward, dense_forward, predict_sdf, Activation, Conv3d, Dense};
use list_core::reference::{conv3d_forward_naive, dense_forward_naive};
use list_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        Just(Activation::LeakyRelu),
        Just(Activation::Sigmoid),
        Just(Activation::Tanh),
        Just(Activation::None),
    ]
}

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn close(a: &Tensor, b: &Tensor, tol: f32) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.dims(), b.dims());
    for (x, y) in a.data().iter().zip(b.data()) {
        prop_assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dense_matches_naive(rows in 1usize..40, input in 1usize..48, output in 1usize..24, act in activation(), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let layer = Dense::new(input, output, values(&mut r, input * output), values(&mut r, output), act).unwrap();
        let mut x = values(&mut r, rows * input);
        // exact zeros exercise the sparse skip
        for v in x.iter_mut().step_by(5) {
            *v = 0.0;
        }
        let x = Tensor::new(vec![rows, input], x).unwrap();
        close(&dense_forward(&layer, &x).unwrap(), &dense_forward_naive(&layer, &x), 1e-5)?;
    }

    #[test]
    fn conv3d_matches_naive(
        in_ch in 1usize..4,
        out_ch in 1usize..4,
        kernel in 1usize..4,
        stride in 1usize..3,
        padding in 0usize..3,
        extent in prop::array::uniform3(1usize..9),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let k3 = kernel * kernel * kernel;
        let layer = Conv3d::new(in_ch, out_ch, kernel, stride, padding, values(&mut r, out_ch * in_ch * k3), values(&mut r, out_ch), act).unwrap();
        let x = Tensor::new(vec![in_ch, extent[0], extent[1], extent[2]], values(&mut r, in_ch * extent.iter().product::<usize>())).unwrap();
        let fits = extent.iter().all(|&e| e + 2 * padding >= kernel);
        match conv3d_forward(&layer, &x) {
            Ok(y) => {
                prop_assert!(fits);
                close(&y, &conv3d_forward_naive(&layer, &x), 1e-5)?;
            }
            Err(e) => prop_assert!(!fits, "unexpected error {e}"),
        }
    }

    #[test]
    fn predict_sdf_is_batch_partition_invariant(n in 2usize..300, split in 1usize..299, seed in any::<u64>()) {
        let split = split.min(n - 1);
        let fc_width = 21;
        let psi = psi_bundle(seed, fc_width + LOCAL_CHANNELS);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let f_c = Tensor::new(vec![n, fc_width], values(&mut r, n * fc_width)).unwrap();
        let f_l = Tensor::new(vec![n, LOCAL_CHANNELS], values(&mut r, n * LOCAL_CHANNELS)).unwrap();
        let whole = predict_sdf(&psi, &f_c, &f_l).unwrap();
        let head: Vec<usize> = (0..split).collect();
        let tail: Vec<usize> = (split..n).collect();
        let mut parts = predict_sdf(&psi, &f_c.gather_rows(&head), &f_l.gather_rows(&head)).unwrap();
        parts.extend(predict_sdf(&psi, &f_c.gather_rows(&tail), &f_l.gather_rows(&tail)).unwrap());
        prop_assert_eq!(whole.len(), n);
        for (a, b) in whole.iter().zip(&parts) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
