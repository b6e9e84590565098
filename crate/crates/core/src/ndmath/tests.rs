use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::stream;

fn spec(head: OutputHead) -> MlpSpec {
    MlpSpec::new(3, vec![8, 8], 2, Activation::Relu, head)
}

/// Central finite differences of `f` with respect to every parameter entry.
fn fd_param_grads(
    sp: &MlpSpec,
    params: &ParamBlock,
    f: &dyn Fn(&ParamBlock) -> f64,
    h: f64,
) -> Gradients {
    let mut layers = Vec::new();
    for li in 0..params.layers.len() {
        let mut dw = Tensor::zeros(params.layers[li].weight.shape());
        for i in 0..dw.len() {
            let mut plus = params.clone();
            plus.layers[li].weight.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.layers[li].weight.data_mut()[i] -= h;
            dw.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        let mut db = Tensor::zeros(params.layers[li].bias.shape());
        for i in 0..db.len() {
            let mut plus = params.clone();
            plus.layers[li].bias.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.layers[li].bias.data_mut()[i] -= h;
            db.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        layers.push((dw, db));
    }
    let _ = sp;
    Gradients { layers }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Loss of one (input, target) pair through the network, per head.
fn head_loss(sp: &MlpSpec, params: &ParamBlock, input: &Tensor, target: &Tensor) -> f64 {
    let out = mlp_forward(sp, params, input).unwrap();
    match sp.output_head {
        OutputHead::Linear => loss_mse(&out, target).unwrap().0,
        OutputHead::Sigmoid => loss_bce(&out, target).unwrap().0,
        OutputHead::Gaussian => {
            let (mean, var) = split_gaussian(sp, &out);
            loss_gaussian_nll(&mean, &var, target).unwrap().0
        }
    }
}

fn split_gaussian(sp: &MlpSpec, out: &Tensor) -> (Tensor, Tensor) {
    let batch = out.rows();
    let m = sp.output_dim;
    let mut mean = Tensor::zeros(&[batch, m]);
    let mut var = Tensor::zeros(&[batch, m]);
    for r in 0..batch {
        for j in 0..m {
            mean.data_mut()[r * m + j] = out.data()[r * 2 * m + j];
            var.data_mut()[r * m + j] = out.data()[r * 2 * m + m + j];
        }
    }
    (mean, var)
}

fn analytic_grads(sp: &MlpSpec, params: &ParamBlock, input: &Tensor, target: &Tensor) -> Gradients {
    let cache = mlp_forward_cached(sp, params, input).unwrap();
    let out = cache.output();
    let upstream = match sp.output_head {
        OutputHead::Linear => loss_mse(out, target).unwrap().1,
        OutputHead::Sigmoid => loss_bce(out, target).unwrap().1,
        OutputHead::Gaussian => {
            let (mean, var) = split_gaussian(sp, out);
            let (_, dmean, dvar) = loss_gaussian_nll(&mean, &var, target).unwrap();
            let batch = out.rows();
            let m = sp.output_dim;
            let mut up = Tensor::zeros(&[batch, 2 * m]);
            for r in 0..batch {
                for j in 0..m {
                    up.data_mut()[r * 2 * m + j] = dmean.data()[r * m + j];
                    up.data_mut()[r * 2 * m + m + j] = dvar.data()[r * m + j];
                }
            }
            up
        }
    };
    mlp_backward(sp, params, &cache, &upstream).unwrap().0
}

/// Shared oracle: check analytic vs finite-difference gradients for one head.
pub(crate) fn check_head_gradients(head: OutputHead, seed: u64) -> (usize, usize, f64) {
    let sp = spec(head);
    let mut rng = stream(seed, "gradcheck", 0);
    let params = ParamBlock::init(&sp, &mut rng);
    let input = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let target = match head {
        OutputHead::Sigmoid => {
            let data = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
            Tensor::from_vec(&[4, 2], data).unwrap()
        }
        _ => Tensor::uniform(&[4, 2], 1.0, &mut rng),
    };
    let analytic = analytic_grads(&sp, &params, &input, &target);
    let f = |p: &ParamBlock| head_loss(&sp, p, &input, &target);
    let fd = fd_param_grads(&sp, &params, &f, 1e-5);
    let mut total = 0usize;
    let mut ok = 0usize;
    let mut worst: f64 = 0.0;
    for (la, lf) in analytic.layers.iter().zip(&fd.layers) {
        for (a, b) in la.0.data().iter().zip(lf.0.data()) {
            total += 1;
            let e = rel_err(*a, *b);
            worst = worst.max(e);
            if e <= 1e-4 {
                ok += 1;
            }
        }
        for (a, b) in la.1.data().iter().zip(lf.1.data()) {
            total += 1;
            let e = rel_err(*a, *b);
            worst = worst.max(e);
            if e <= 1e-4 {
                ok += 1;
            }
        }
    }
    (ok, total, worst)
}

#[test]
fn zero_network_maps_to_zero() {
    let sp = spec(OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(0, "t", 0));
    for l in &mut params.layers {
        l.weight.data_mut().fill(0.0);
        l.bias.data_mut().fill(0.0);
    }
    let input = Tensor::uniform(&[3, 3], 2.0, &mut stream(0, "t", 1));
    let out = mlp_forward(&sp, &params, &input).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sigmoid_of_zero_preactivation_is_half() {
    let sp = spec(OutputHead::Sigmoid);
    let mut params = ParamBlock::init(&sp, &mut stream(1, "t", 0));
    for l in &mut params.layers {
        l.weight.data_mut().fill(0.0);
        l.bias.data_mut().fill(0.0);
    }
    let input = Tensor::uniform(&[2, 3], 1.0, &mut stream(1, "t", 1));
    let out = mlp_forward(&sp, &params, &input).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn single_affine_layer_arithmetic() {
    let sp = MlpSpec::new(1, vec![], 1, Activation::Relu, OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(2, "t", 0));
    params.layers[0].weight.data_mut()[0] = 2.0;
    params.layers[0].bias.data_mut()[0] = 1.0;
    let input = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
    let out = mlp_forward(&sp, &params, &input).unwrap();
    assert_eq!(out.data(), &[7.0]);
}

#[test]
fn linear_layer_weight_gradient_is_outer_product() {
    let sp = MlpSpec::new(2, vec![], 2, Activation::Relu, OutputHead::Linear);
    let params = ParamBlock::init(&sp, &mut stream(3, "t", 0));
    let input = Tensor::from_vec(&[1, 2], vec![1.5, -0.5]).unwrap();
    let cache = mlp_forward_cached(&sp, &params, &input).unwrap();
    let upstream = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
    let (grads, _) = mlp_backward(&sp, &params, &cache, &upstream).unwrap();
    // dW[i][j] = x[i] * g[j]
    let dw = &grads.layers[0].0;
    assert_eq!(dw.data(), &[3.0, 4.5, -1.0, -1.5]);
    assert_eq!(grads.layers[0].1.data(), &[2.0, 3.0]);
}

#[test]
fn relu_blocks_gradient_at_negative_preactivation() {
    let sp = MlpSpec::new(1, vec![1], 1, Activation::Relu, OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(4, "t", 0));
    // Force the hidden pre-activation negative.
    params.layers[0].weight.data_mut()[0] = 1.0;
    params.layers[0].bias.data_mut()[0] = -5.0;
    let input = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let cache = mlp_forward_cached(&sp, &params, &input).unwrap();
    let upstream = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let (grads, dinput) = mlp_backward(&sp, &params, &cache, &upstream).unwrap();
    assert_eq!(grads.layers[0].0.data(), &[0.0]);
    assert_eq!(grads.layers[0].1.data(), &[0.0]);
    assert_eq!(dinput.data(), &[0.0]);
}

#[test]
fn batch_gradient_is_sum_of_per_example_gradients() {
    let sp = spec(OutputHead::Linear);
    let params = ParamBlock::init(&sp, &mut stream(5, "t", 0));
    let mut rng = stream(5, "t", 1);
    let input = Tensor::uniform(&[3, 3], 1.0, &mut rng);
    let upstream = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let cache = mlp_forward_cached(&sp, &params, &input).unwrap();
    let (batch_grads, _) = mlp_backward(&sp, &params, &cache, &upstream).unwrap();

    let mut summed: Option<Gradients> = None;
    for r in 0..3 {
        let xin = Tensor::from_vec(&[1, 3], input.row(r).to_vec()).unwrap();
        let gup = Tensor::from_vec(&[1, 2], upstream.row(r).to_vec()).unwrap();
        let c = mlp_forward_cached(&sp, &params, &xin).unwrap();
        let (g, _) = mlp_backward(&sp, &params, &c, &gup).unwrap();
        summed = Some(match summed {
            None => g,
            Some(mut acc) => {
                for (la, lg) in acc.layers.iter_mut().zip(&g.layers) {
                    for (a, b) in la.0.data_mut().iter_mut().zip(lg.0.data()) {
                        *a += b;
                    }
                    for (a, b) in la.1.data_mut().iter_mut().zip(lg.1.data()) {
                        *a += b;
                    }
                }
                acc
            }
        });
    }
    let summed = summed.unwrap();
    for (la, lb) in batch_grads.layers.iter().zip(&summed.layers) {
        for (a, b) in la.0.data().iter().zip(lb.0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_all_heads() {
    for head in [OutputHead::Linear, OutputHead::Sigmoid, OutputHead::Gaussian] {
        let (ok, total, worst) = check_head_gradients(head, 42);
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "{head:?}: only {ok}/{total} coords within 1e-4"
        );
        assert!(worst <= 1e-3, "{head:?}: worst rel err {worst}");
    }
}

#[test]
fn forward_shape_mismatch_names_the_problem() {
    let sp = spec(OutputHead::Linear);
    let params = ParamBlock::init(&sp, &mut stream(6, "t", 0));
    let input = Tensor::zeros(&[2, 5]);
    let err = mlp_forward(&sp, &params, &input).unwrap_err();
    assert!(matches!(err, NdError::ShapeMismatch(_)));
}

#[test]
fn adam_first_step_magnitude() {
    let sp = MlpSpec::new(1, vec![], 1, Activation::Relu, OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(7, "t", 0));
    params.layers[0].weight.data_mut()[0] = 0.5;
    let before = params.layers[0].weight.data()[0];
    let grads = Gradients {
        layers: vec![(
            Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )],
    };
    adam_step(&mut params, &grads, &AdamHyperParams::with_lr(1e-3)).unwrap();
    let after = params.layers[0].weight.data()[0];
    // Bias-corrected first step is lr * g / (|g| + eps).
    assert!((before - after - 1e-3).abs() < 1e-8);
    assert_eq!(params.layers[0].weight_adam.step_count, 1);
}

#[test]
fn adam_zero_gradient_is_identity() {
    let sp = spec(OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(8, "t", 0));
    let snapshot = params.clone();
    let grads = Gradients {
        layers: params
            .layers
            .iter()
            .map(|l| (Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())))
            .collect(),
    };
    adam_step(&mut params, &grads, &AdamHyperParams::with_lr(1e-3)).unwrap();
    for (a, b) in params.layers.iter().zip(&snapshot.layers) {
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias.data(), b.bias.data());
        assert_eq!(a.weight_adam.step_count, b.weight_adam.step_count + 1);
    }
}

#[test]
fn adam_reduces_quadratic_loss() {
    let sp = MlpSpec::new(1, vec![], 1, Activation::Relu, OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(9, "t", 0));
    params.layers[0].weight.data_mut()[0] = 2.0;
    params.layers[0].bias.data_mut()[0] = 0.0;
    let input = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let target = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    let loss_of = |p: &ParamBlock| {
        let out = mlp_forward(&sp, p, &input).unwrap();
        loss_mse(&out, &target).unwrap().0
    };
    let initial = loss_of(&params);
    for _ in 0..2 {
        let cache = mlp_forward_cached(&sp, &params, &input).unwrap();
        let (_, grad) = loss_mse(cache.output(), &target).unwrap();
        let (grads, _) = mlp_backward(&sp, &params, &cache, &grad).unwrap();
        adam_step(&mut params, &grads, &AdamHyperParams::with_lr(0.05)).unwrap();
    }
    assert!(loss_of(&params) < initial);
}

#[test]
fn adam_rejects_nonfinite_gradient() {
    let sp = MlpSpec::new(1, vec![], 1, Activation::Relu, OutputHead::Linear);
    let mut params = ParamBlock::init(&sp, &mut stream(10, "t", 0));
    let grads = Gradients {
        layers: vec![(
            Tensor::from_vec(&[1, 1], vec![f64::NAN]).unwrap(),
            Tensor::zeros(&[1]),
        )],
    };
    let err = adam_step(&mut params, &grads, &AdamHyperParams::with_lr(1e-3)).unwrap_err();
    assert!(err.to_string().contains("layer0.weight"));
}

#[test]
fn mse_values() {
    let a = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let b = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    assert_eq!(loss_mse(&a, &a).unwrap().0, 0.0);
    assert_eq!(loss_mse(&a, &b).unwrap().0, 1.0);
}

#[test]
fn bce_values() {
    let p = Tensor::from_vec(&[1, 1], vec![0.999999]).unwrap();
    let y = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let (l, _) = loss_bce(&p, &y).unwrap();
    assert!(l < 2e-6, "near-perfect prediction loss {l}");

    let p = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
    let y = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
    let (l, _) = loss_bce(&p, &y).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

    // Soft targets are fine; out-of-range labels are not.
    let y = Tensor::from_vec(&[1, 1], vec![0.15]).unwrap();
    assert!(loss_bce(&p, &y).is_ok());
    let y = Tensor::from_vec(&[1, 1], vec![1.5]).unwrap();
    assert!(loss_bce(&p, &y).is_err());
}

#[test]
fn gaussian_nll_plug_in() {
    let d = 3;
    let mean = Tensor::zeros(&[1, d]);
    let var = Tensor::from_vec(&[1, d], vec![1.0; d]).unwrap();
    let target = Tensor::zeros(&[1, d]);
    let (l, dmean, _) = loss_gaussian_nll(&mean, &var, &target).unwrap();
    let expected = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    assert!((l - expected).abs() < 1e-12);
    assert!(dmean.data().iter().all(|&g| g == 0.0));
}

#[test]
fn gaussian_nll_rejects_sub_floor_variance() {
    let t = Tensor::zeros(&[1, 1]);
    let var = Tensor::from_vec(&[1, 1], vec![1e-6]).unwrap();
    assert!(loss_gaussian_nll(&t, &var, &t).is_err());
}

#[test]
fn kl_values() {
    let zero = Tensor::zeros(&[1, 2]);
    let (l, _, _) = loss_kl_diag_gaussian(&zero, &zero).unwrap();
    assert_eq!(l, 0.0);

    let mu = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
    let (l, _, _) = loss_kl_diag_gaussian(&mu, &zero).unwrap();
    assert!((l - 1.0).abs() < 1e-12); // 0.5 per coordinate
}

#[test]
fn init_is_deterministic_per_seed() {
    let sp = spec(OutputHead::Linear);
    let a = ParamBlock::init(&sp, &mut stream(77, "init", 0));
    let b = ParamBlock::init(&sp, &mut stream(77, "init", 0));
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 4),
                         lv in prop::collection::vec(-4.0f64..3.0, 4)) {
        let mu = Tensor::from_vec(&[1, 4], mu).unwrap();
        let lv = Tensor::from_vec(&[1, 4], lv).unwrap();
        let (l, _, _) = loss_kl_diag_gaussian(&mu, &lv).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn sigmoid_head_outputs_in_unit_interval(seed in 0u64..1000) {
        let sp = spec(OutputHead::Sigmoid);
        let mut rng = stream(seed, "prop", 0);
        let params = ParamBlock::init(&sp, &mut rng);
        let input = Tensor::uniform(&[2, 3], 10.0, &mut rng);
        let out = mlp_forward(&sp, &params, &input).unwrap();
        prop_assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
