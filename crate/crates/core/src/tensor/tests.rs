use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Central-difference check of `f` at `x` against the autodiff gradient.
fn check_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    let x = x.to_var();
    let grads = f(&x).backward().unwrap();
    let analytic = grads
        .get(&x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eps = 1e-5;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(plus, x.shape()).unwrap()).scalar().unwrap();
        let fm = f(&Tensor::from_vec(minus, x.shape()).unwrap()).scalar().unwrap();
        let numeric = (fp - fm) / (2.0 * eps);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        assert!(
            (numeric - analytic[i]).abs() / scale < 1e-4 || (numeric - analytic[i]).abs() < 1e-8,
            "element {i}: numeric {numeric} vs analytic {}",
            analytic[i]
        );
    }
}

/// Projects any tensor to a scalar with position-dependent weights.
fn weighted_sum(t: &Tensor<f64>) -> Tensor<f64> {
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 7919) % 13) as f64 / 7.0 - 0.8).collect();
    let w = Tensor::from_vec(w, t.shape()).unwrap();
    t.mul(&w).unwrap().sum_all()
}

#[test]
fn elementwise_gradients() {
    let mut r = rng();
    let a = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    let b = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
    check_grad(&a, |x| weighted_sum(&x.add(&b).unwrap()));
    check_grad(&a, |x| weighted_sum(&b.sub(x).unwrap()));
    check_grad(&a, |x| weighted_sum(&x.mul(x).unwrap()));
    check_grad(&a, |x| weighted_sum(&x.affine(-2.5, 0.3)));
    check_grad(&a, |x| weighted_sum(&x.sigmoid()));
    check_grad(&a, |x| weighted_sum(&x.elu()));
    check_grad(&a, |x| weighted_sum(&x.leaky_relu(0.2)));
    check_grad(&a, |x| weighted_sum(&x.relu()));
    check_grad(&a, |x| weighted_sum(&x.abs()));
    check_grad(&a, |x| weighted_sum(&x.square()));
    check_grad(&a, |x| x.exp().mean_all());
}

#[test]
fn div_scalar_gradient_flows_to_divisor() {
    let mut r = rng();
    let a = Tensor::<f64>::randn(&[3, 5], &mut r);
    let s = Tensor::<f64>::from_vec(vec![1.7], &[1]).unwrap();
    check_grad(&a, |x| weighted_sum(&x.div_scalar(&s).unwrap()));
    check_grad(&s, |d| weighted_sum(&a.div_scalar(d).unwrap()));
}

#[test]
fn shape_op_gradients() {
    let mut r = rng();
    let a = Tensor::<f64>::randn(&[2, 3, 2, 2], &mut r);
    let b = Tensor::<f64>::randn(&[2, 2, 2, 2], &mut r);
    check_grad(&a, |x| weighted_sum(&Tensor::cat(&[x, &b, x], 1).unwrap()));
    check_grad(&a, |x| weighted_sum(&x.narrow(1, 1, 2).unwrap()));
    check_grad(&a, |x| weighted_sum(&x.reshape(&[6, 4]).unwrap()));
    let m = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut r);
    check_grad(&m, |x| weighted_sum(&x.expand_channels(3).unwrap()));
    let p = Tensor::<f64>::randn(&[1, 8, 2, 3], &mut r);
    check_grad(&p, |x| weighted_sum(&x.pixel_shuffle(2).unwrap()));
    let q = Tensor::<f64>::randn(&[1, 2, 4, 5], &mut r);
    check_grad(&q, |x| weighted_sum(&x.max_pool2x2().unwrap()));
    let g = Tensor::<f64>::randn(&[2, 3, 2, 3], &mut r);
    check_grad(&g, |x| weighted_sum(&x.gram().unwrap()));
}

#[test]
fn conv_gradients_all_inputs() {
    let mut r = rng();
    let x = Tensor::<f64>::randn(&[2, 2, 6, 5], &mut r);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut r);
    let b = Tensor::<f64>::randn(&[3], &mut r);
    for cfg in [
        Conv2dConfig::same(3, 1, 1),
        Conv2dConfig::same(3, 2, 1),
        Conv2dConfig::same(3, 1, 2),
        Conv2dConfig::default(),
    ] {
        check_grad(&x, |t| weighted_sum(&t.conv2d(&w, Some(&b), cfg).unwrap()));
        check_grad(&w, |t| weighted_sum(&x.conv2d(t, Some(&b), cfg).unwrap()));
        check_grad(&b, |t| weighted_sum(&x.conv2d(&w, Some(t), cfg).unwrap()));
    }
}

/// Direct nested-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, cfg: Conv2dConfig) -> Vec<f64> {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let ho = cfg.output_len(h, k).unwrap();
    let wo = cfg.output_len(wd, k).unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * cfg.stride + ky * cfg.dilation) as isize - cfg.padding as isize;
                                let ix = (xx * cfg.stride + kx * cfg.dilation) as isize - cfg.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng();
    let x = Tensor::<f64>::randn(&[2, 3, 9, 7], &mut r);
    let w = Tensor::<f64>::randn(&[4, 3, 5, 5], &mut r);
    for cfg in [
        Conv2dConfig::same(5, 1, 1),
        Conv2dConfig::same(5, 2, 1),
        Conv2dConfig::same(5, 1, 2),
        Conv2dConfig { stride: 3, padding: 1, dilation: 1 },
    ] {
        let fast = x.conv2d(&w, None, cfg).unwrap();
        let slow = naive_conv(&x, &w, cfg);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
    assert!(matches!(
        x.conv2d(&w, None, Conv2dConfig::same(3, 1, 1)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::<f32>::var(vec![1.0, 2.0], &[2]).unwrap();
    let y = no_grad(|| x.square().sum_all());
    assert!(!y.requires_grad());
    let z = x.square().sum_all();
    assert!(z.requires_grad());
    let g = z.backward().unwrap();
    assert_eq!(g.get(&x).unwrap().to_vec(), vec![2.0, 4.0]);
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Tensor::<f64>::var(vec![3.0], &[1]).unwrap();
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
    let g = y.backward().unwrap();
    assert_eq!(g.get(&x).unwrap().to_vec(), vec![7.0]);
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::<f64>::var(vec![3.0], &[1]).unwrap();
    let y = x.detach().mul(&x).unwrap().sum_all();
    let g = y.backward().unwrap();
    assert_eq!(g.get(&x).unwrap().to_vec(), vec![3.0]);
}

#[test]
fn gated_activation_matches_composition_and_gradient() {
    let mut r = rng();
    let a = Tensor::<f64>::randn(&[2, 4, 3, 3], &mut r);
    let fused = a.gated_activation().unwrap();
    let composed = a
        .narrow(1, 0, 2)
        .unwrap()
        .elu()
        .mul(&a.narrow(1, 2, 2).unwrap().sigmoid())
        .unwrap();
    assert!(fused.max_abs_diff(&composed) < 1e-15);
    check_grad(&a, |x| weighted_sum(&x.gated_activation().unwrap()));
    assert!(Tensor::<f64>::zeros(&[1, 3, 2, 2]).gated_activation().is_err());
}
