use approx::assert_abs_diff_eq;
use ndarray::{Array3, Array4};
use rand::Rng;

use super::*;
use crate::seed::rng_for;

fn random_batch<T: Scalar>(n: usize, seed: u64) -> Array4<T> {
    let mut rng = rng_for(seed, &[]);
    Array4::from_shape_fn((n, 3, 64, 64), |_| T::from_f64(rng.random::<f64>()).unwrap())
}

/// Perturbs running statistics and BN affine terms so eval mode is not an
/// identity transform.
fn scramble_bn<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = rng_for(seed, &[1]);
    for i in 0..net.params().len() {
        if !net.params()[i].kind.decays() {
            net.param_mut(i)
                .mapv_inplace(|v| v + T::from_f64(rng.random_range(-0.3..0.3)).unwrap());
        }
    }
    for i in 0..net.buffers().len() {
        let is_var = net.buffers()[i].name.ends_with("running_var");
        net.buffer_mut(i).mapv_inplace(|v| {
            let d = T::from_f64(rng.random_range(0.0..0.5)).unwrap();
            if is_var {
                v + d
            } else {
                v - d
            }
        });
    }
}

#[test]
fn output_width_and_determinism() {
    let a = build_network(10, 3).unwrap();
    let b = build_network(10, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_network(10, 4).unwrap());
    let fc = &a.params()[a.param_index("fc.weight").unwrap()];
    assert_eq!(fc.value.shape()[0], 10);
    assert_eq!(a.parameter_count(), a.architecture().parameter_count());
    assert!(build_network(1, 0).is_err());
}

#[test]
fn softmax_closed_forms() {
    assert_eq!(softmax(&[0.0f64, 0.0]).values(), &[0.5, 0.5]);
    let p = softmax(&[2f64.ln(), 0.0]);
    assert_abs_diff_eq!(p.get(0), 2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p.get(1), 1.0 / 3.0, epsilon = 1e-12);
    let big = softmax(&[1000.0f32, 999.0]);
    assert!(big.values().iter().all(|v| v.is_finite()));
    assert_eq!(ProbVector::new(vec![0.5, 0.5]).unwrap().argmax(), 0);
    assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
}

#[test]
fn zero_inner_product_gives_uniform_output() {
    let mut net = build_network(5, 1).unwrap();
    for name in ["fc.weight", "fc.bias"] {
        let i = net.param_index(name).unwrap();
        net.param_mut(i).fill(0.0);
    }
    let batch = random_batch::<f32>(2, 9);
    for mode in [Mode::Eval, Mode::Train] {
        let (probs, _) = net.forward(&batch, mode, &Exec::sequential()).unwrap();
        for p in probs {
            for &v in p.values() {
                assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn wrong_patch_shape_is_rejected() {
    let net = build_network(2, 1).unwrap();
    let batch = Array4::<f32>::zeros((1, 3, 32, 32));
    assert!(matches!(net.forward_eval(&batch, &Exec::sequential()), Err(Error::Shape(_))));
    assert!(matches!(net.forward_train(&batch, &Exec::sequential()), Err(Error::Shape(_))));
    let small = ImageRgb::filled(63, 64, [0, 0, 0]);
    assert!(net.predict(&[&small], &Exec::sequential()).is_err());
}

#[test]
fn eval_is_independent_of_batch_composition() {
    let mut net = build_network(4, 2).unwrap();
    scramble_bn(&mut net, 2);
    let batch = random_batch::<f32>(3, 4);
    let (together, _) = net.forward(&batch, Mode::Eval, &Exec::sequential()).unwrap();
    for n in 0..3 {
        let single = batch.slice(s![n..n + 1, .., .., ..]).to_owned();
        let (alone, _) = net.forward(&single, Mode::Eval, &Exec::sequential()).unwrap();
        for (a, b) in alone[0].values().iter().zip(together[n].values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }
}

#[test]
fn inception_output_shape_and_errors() {
    let net = build_network(3, 0).unwrap();
    let x = Array3::<f32>::from_elem((32, 64, 64), 0.1);
    assert_eq!(net.inception_forward(0, x.view()).unwrap().dim(), (64, 64, 64));
    let err = net.inception_forward(1, x.view()).unwrap_err();
    assert!(err.to_string().contains("64") && err.to_string().contains("32"));
    assert!(net.inception_forward(2, x.view()).is_err());
}

// Straight-line scalar reference for one eval-mode conv + BN (+ ReLU) unit.
fn reference_unit(net: &Network<f64>, prefix: &str, x: &Array3<f64>, relu: bool) -> Array3<f64> {
    let w = &net.params()[net.param_index(&format!("{prefix}.conv")).unwrap()].value;
    let g = &net.params()[net.param_index(&format!("{prefix}.bn.scale")).unwrap()].value;
    let b = &net.params()[net.param_index(&format!("{prefix}.bn.shift")).unwrap()].value;
    let find = |suffix: &str| {
        net.buffers()
            .iter()
            .find(|bf| bf.name == format!("{prefix}.bn.{suffix}"))
            .unwrap()
            .value
            .clone()
    };
    let (mean, var) = (find("running_mean"), find("running_var"));
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (_, h, wd) = x.dim();
    let pad = (k / 2) as isize;
    let mut out = Array3::zeros((cout, h, wd));
    for o in 0..cout {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = 0.0;
                for i in 0..cin {
                    for dr in 0..k {
                        for dc in 0..k {
                            let rr = r as isize + dr as isize - pad;
                            let cc = c as isize + dc as isize - pad;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < wd {
                                acc += w[[o, i, dr, dc]] * x[[i, rr as usize, cc as usize]];
                            }
                        }
                    }
                }
                let y = (acc - mean[o]) / (var[o] + BN_EPS).sqrt() * g[[o]] + b[[o]];
                out[[o, r, c]] = if relu { y.max(0.0) } else { y };
            }
        }
    }
    out
}

fn reference_maxpool3(x: &Array3<f64>) -> Array3<f64> {
    let (ch, h, w) = x.dim();
    Array3::from_shape_fn((ch, h, w), |(c, r, col)| {
        let mut m = f64::NEG_INFINITY;
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in col.saturating_sub(1)..(col + 2).min(w) {
                m = m.max(x[[c, rr, cc]]);
            }
        }
        m
    })
}

#[test]
fn inception_matches_scalar_reference() {
    let mut net = Network::<f64>::build(Architecture::patch_net(3), 7).unwrap();
    scramble_bn(&mut net, 7);
    let mut rng = rng_for(8, &[]);
    let x = Array3::from_shape_fn((32, 16, 16), |_| rng.random_range(-1.0..1.0));
    let fast = net.inception_forward(0, x.view()).unwrap();

    let b1 = reference_unit(&net, "stage0.branch1", &x, true);
    let t3 = reference_unit(&net, "stage0.branch3_reduce", &x, true);
    let b3 = reference_unit(&net, "stage0.branch3", &t3, true);
    let t5 = reference_unit(&net, "stage0.branch5_reduce", &x, true);
    let b5 = reference_unit(&net, "stage0.branch5", &t5, true);
    let bp = reference_unit(&net, "stage0.pool_proj", &reference_maxpool3(&x), true);
    let sc = reference_unit(&net, "stage0.shortcut", &x, false);
    let cat = concatenate(Axis(0), &[b1.view(), b3.view(), b5.view(), bp.view()]).unwrap();
    let reference = (cat + sc).mapv(|v| v.max(0.0));
    let diff = (&fast - &reference).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-5, "max abs diff {diff}");
}

#[test]
fn residual_identity() {
    let mut net = Network::<f64>::build(Architecture::patch_net(2), 3).unwrap();
    for i in 0..net.params().len() {
        let name = net.params()[i].name.clone();
        if name.starts_with("stage0.") && name.ends_with(".conv") {
            let identity = name == "stage0.shortcut.conv";
            net.param_mut(i).indexed_iter_mut().for_each(|(ix, v)| {
                *v = if identity && ix[0] == ix[1] + 32 { 1.0 } else { 0.0 };
            });
        }
    }
    // Shortcut maps input channel c to output channel c + 32 (the 3x3 and
    // pool branches' slots) so the zeroed branches cannot mask it.
    let mut rng = rng_for(4, &[]);
    let x = Array3::from_shape_fn((32, 8, 8), |_| rng.random_range(0.0..2.0));
    let out = net.inception_forward(0, x.view()).unwrap();
    let scale = 1.0 / (1.0 + BN_EPS).sqrt();
    for ((c, r, col), &v) in out.indexed_iter() {
        let expected = if c >= 32 { x[[c - 32, r, col]] * scale } else { 0.0 };
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }
}

#[test]
fn zero_loss_gradient_gives_zero_gradients() {
    let net = build_network(3, 1).unwrap();
    let batch = random_batch::<f32>(2, 1);
    let (logits, cache) = net.forward_train(&batch, &Exec::sequential()).unwrap();
    let g = net.backward(&Array2::zeros(logits.raw_dim()), &cache, &Exec::sequential()).unwrap();
    assert!(g.is_zero());
}

#[test]
fn stale_cache_is_rejected() {
    let mut net = build_network(3, 1).unwrap();
    let batch = random_batch::<f32>(2, 1);
    let (logits, cache) = net.forward_train(&batch, &Exec::sequential()).unwrap();
    net.update_running_stats(&cache, 0.1);
    let err = net.backward(&logits, &cache, &Exec::sequential()).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let net = build_network(3, 6).unwrap();
    let batch = random_batch::<f32>(3, 6);
    let par = Exec::with_workers(2).unwrap();
    let (la, ca) = net.forward_train(&batch, &Exec::sequential()).unwrap();
    let (lb, cb) = net.forward_train(&batch, &par).unwrap();
    assert_eq!(la, lb);
    let ga = net.backward(&la, &ca, &Exec::sequential()).unwrap();
    let gb = net.backward(&lb, &cb, &par).unwrap();
    assert_eq!(ga.grads, gb.grads);
}

#[test]
fn pinned_forward_matches_plain_forward_at_its_own_pattern() {
    let net = Network::<f64>::build(Architecture::patch_net(3), 5).unwrap();
    let batch = random_batch::<f64>(2, 5);
    let exec = Exec::sequential();
    let (plain, cache) = net.forward_train(&batch, &exec).unwrap();
    let (pinned, again) = net.forward_train_pinned(&batch, &exec, &cache).unwrap();
    assert_eq!(plain, pinned);
    assert_eq!(cache.activation_signature(), again.activation_signature());
    let other = random_batch::<f64>(1, 5);
    assert!(net.forward_train_pinned(&other, &exec, &cache).is_err());
}

/// Richardson-extrapolated central differences (on the smooth piece holding
/// the current weights) on a few entries of every tensor, against the analytic gradient of a
/// random linear functional of the logits.
#[test]
fn gradients_match_finite_differences_spot_check() {
    let mut net = Network::<f64>::build(Architecture::patch_net(3), 11).unwrap();
    scramble_bn(&mut net, 11);
    let batch = random_batch::<f64>(2, 12);
    let exec = Exec::sequential();
    let mut rng = rng_for(13, &[]);
    let weights = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = net.forward_train(&batch, &exec).unwrap();
    let grads = net.backward(&weights, &cache, &exec).unwrap();
    let loss = |n: &Network<f64>| (n.forward_train_pinned(&batch, &exec, &cache).unwrap().0 * &weights).sum();
    let eps = 1e-3;
    for t in 0..net.params().len() {
        let len = net.params()[t].value.len();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            let j = rng.random_range(0..len);
            let orig = net.params()[t].value.as_slice().unwrap()[j];
            let mut central = |h: f64| {
                net.param_mut(t).as_slice_mut().unwrap()[j] = orig + h;
                let up = loss(&net);
                net.param_mut(t).as_slice_mut().unwrap()[j] = orig - h;
                let down = loss(&net);
                net.param_mut(t).as_slice_mut().unwrap()[j] = orig;
                (up - down) / (2.0 * h)
            };
            // Richardson step cancels the eps^2 truncation term.
            let fd = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
            let an = grads.grads[t].as_slice().unwrap()[j];
            num += (fd - an).powi(2);
            den += fd.powi(2).max(an.powi(2));
        }
        let rel = (num / den.max(1e-300)).sqrt();
        assert!(rel <= 1e-4 || num.sqrt() < 1e-10, "{}: relative error {rel}", net.params()[t].name);
    }
}
