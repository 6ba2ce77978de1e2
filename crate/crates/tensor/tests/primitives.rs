use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_tensor::gradcheck::{check_gradients, relative_error};
use sfda_tensor::{NormMode, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Random fixed weights turn any tensor into a scalar so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_fd<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(inputs, f, H, None).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_identity_and_orthogonal() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let mv = tape.constant(m.clone());
    let p = tape.matmul(eye, mv).unwrap();
    assert_eq!(tape.value(p), &m);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([3, 4]));
    let b = tape.constant(Tensor::zeros([3, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            weighted_sum(t, p, 1)
        },
        H,
        None,
    )
    .unwrap();
    assert_eq!(report.checked, 20);
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let v = tape.value(s).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert_eq!(v[0], 1.0);
    assert!(v[1] < 1e-300);

    // direct summation, no max subtraction needed at this scale
    let raw = [1.0f64, 2.0, 3.0];
    let denom: f64 = raw.iter().map(|z| z.exp()).sum();
    let x = tape.constant(Tensor::new([3], raw.to_vec()).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    for (p, z) in tape.value(s).data().iter().zip(raw) {
        assert!((p - z.exp() / denom).abs() < 1e-9);
    }
}

#[test]
fn relu_and_constant_batchnorm() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1], vec![-1.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0]);

    let x = tape.constant(Tensor::full([4, 3], 2.5));
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    let (y, stats) = tape.batch_norm(x, g, b, 1e-5, NormMode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.unwrap().mean, vec![2.5; 3]);
}

#[test]
fn conv_output_extent() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 14, 14]));
    let w = tape.constant(Tensor::zeros([5, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 6, 6]);
    let too_big = tape.constant(Tensor::zeros([1, 2, 15, 15]));
    assert!(tape.conv2d(x, too_big, None, 1, 0).is_err());
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let (stride, pad) = (2, 1);
    let mut tape = Tape::<f64>::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 4, 3, 3]);
    let px = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= 5 || j >= 5 {
            0.0
        } else {
            x.data()[((n * 3 + c) * 5 + i as usize) * 5 + j as usize]
        }
    };
    for n in 0..2 {
        for o in 0..4 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let i = (oi * stride + ki) as isize - pad as isize;
                                let j = (oj * stride + kj) as isize - pad as isize;
                                acc += w.data()[((o * 3 + c) * 3 + ki) * 3 + kj] * px(n, c, i, j);
                            }
                        }
                    }
                    let got = out.data()[((n * 4 + o) * 3 + oi) * 3 + oj];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn every_primitive_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(0.5..2.0));

    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    assert_fd("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 1)
    });
    assert_fd("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 2)
    });
    assert_fd("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    assert_fd("div", &[a.clone(), pos(&mut rng, &[3, 4])], |t, v| {
        let y = t.div(v[0], v[1])?;
        weighted_sum(t, y, 4)
    });
    let row = rand_tensor(&mut rng, &[4]);
    assert_fd("add_bcast", &[a.clone(), row.clone()], |t, v| {
        let y = t.add_bcast(v[0], v[1])?;
        weighted_sum(t, y, 5)
    });
    assert_fd("mul_bcast", &[a.clone(), row.clone()], |t, v| {
        let y = t.mul_bcast(v[0], v[1])?;
        weighted_sum(t, y, 6)
    });
    assert_fd("scale/add_scalar/exp", std::slice::from_ref(&a), |t, v| {
        let y = t.scale(v[0], -1.7);
        let y = t.add_scalar(y, 0.3);
        let y = t.exp(y);
        weighted_sum(t, y, 7)
    });
    assert_fd("log", &[pos(&mut rng, &[5])], |t, v| {
        let y = t.log(v[0]);
        weighted_sum(t, y, 8)
    });
    // keep inputs away from the kink
    let away = Tensor::from_fn([12], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    assert_fd("relu", &[away], |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 9)
    });
    assert_fd("gelu", std::slice::from_ref(&a), |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 10)
    });
    assert_fd("sum/mean", std::slice::from_ref(&a), |t, v| {
        let s = t.sum(v[0]);
        let sq = t.mul(v[0], v[0])?;
        let m = t.mean(sq);
        t.add(s, m)
    });
    let c = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        assert_fd("sum_axis", std::slice::from_ref(&c), move |t, v| {
            let y = t.sum_axis(v[0], axis)?;
            weighted_sum(t, y, 10 + axis as u64)
        });
        assert_fd("softmax", std::slice::from_ref(&c), move |t, v| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y, 20 + axis as u64)
        });
        assert_fd("log_softmax", std::slice::from_ref(&c), move |t, v| {
            let y = t.log_softmax(v[0], axis)?;
            weighted_sum(t, y, 30 + axis as u64)
        });
    }
    assert_fd("matmul", &[a.clone(), rand_tensor(&mut rng, &[4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 40)
    });
    assert_fd("bmm", &[rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 4, 5])], |t, v| {
        let y = t.bmm(v[0], v[1], false)?;
        weighted_sum(t, y, 41)
    });
    assert_fd("bmm_t", &[rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 5, 4])], |t, v| {
        let y = t.bmm(v[0], v[1], true)?;
        weighted_sum(t, y, 42)
    });
    assert_fd("reshape/permute", std::slice::from_ref(&c), |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, &[4, 6])?;
        weighted_sum(t, y, 43)
    });
    assert_fd("concat", &[rand_tensor(&mut rng, &[2, 1, 3]), rand_tensor(&mut rng, &[2, 4, 3])], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        weighted_sum(t, y, 44)
    });
    assert_fd("gather_rows", &[rand_tensor(&mut rng, &[3, 2])], |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
        weighted_sum(t, y, 45)
    });
    assert_fd("pick", std::slice::from_ref(&a), |t, v| {
        let y = t.pick(v[0], &[3, 0, 3])?;
        weighted_sum(t, y, 46)
    });
    let ln_in = [rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])];
    assert_fd("layer_norm", &ln_in, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 47)
    });
    let conv_in = [rand_tensor(&mut rng, &[2, 2, 5, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
    for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
        assert_fd("conv2d", &conv_in, move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(t, y, 48)
        });
    }
    let bn_in = [rand_tensor(&mut rng, &[4, 3, 2, 2]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])];
    assert_fd("batch_norm train", &bn_in, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?;
        weighted_sum(t, y, 49)
    });
    let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.9]);
    assert_fd("batch_norm eval", &bn_in, move |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Eval { mean: &rm, var: &rv })?;
        weighted_sum(t, y, 50)
    });
    assert_fd("avg_pool2d", &[rand_tensor(&mut rng, &[2, 2, 4, 4])], |t, v| {
        let y = t.avg_pool2d(v[0], 2, 2)?;
        weighted_sum(t, y, 51)
    });
    assert_fd("sq_dist", &[rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[2, 4])], |t, v| {
        let y = t.sq_dist(v[0], v[1])?;
        weighted_sum(t, y, 52)
    });
    assert_fd("row_norm", std::slice::from_ref(&a), |t, v| {
        let y = t.row_norm(v[0])?;
        weighted_sum(t, y, 53)
    });
}

#[test]
fn random_composition_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let inputs = [
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    assert_fd("composition", &inputs, |t, v| {
        let h = t.linear(v[0], v[1], v[2])?;
        let h = t.exp(h);
        let s = t.log_softmax(h, 1)?;
        let p = t.softmax(h, 0)?;
        let d = t.sq_dist(p, p)?;
        let n = t.row_norm(s)?;
        let a = t.sum(d);
        let b = t.mean(n);
        let ab = t.mul(a, b)?;
        Ok(ab)
    });
}

#[test]
fn gradient_never_reaches_constants_or_detached_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let c = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let d = tape.detach(x);
    let p = tape.mul(x, c).unwrap();
    let q = tape.mul(p, d).unwrap();
    let loss = tape.sum(q);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    // c·d, the detached factor contributes no second term
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 8.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn replay_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn([8, 16], |_| rng.gen_range(-1.0f32..1.0)));
        let w = tape.param(Tensor::from_fn([16, 4], |_| rng.gen_range(-1.0f32..1.0)));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.log_softmax(h, 1).unwrap();
        let loss = tape.mean(s);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), g.get(w).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-8);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3, 4], vals).unwrap());
        let s = tape.softmax(x, axis).unwrap();
        let sums = tape.sum_axis(s, axis).unwrap();
        prop_assert!(tape.value(s).data().iter().all(|&p| p >= 0.0));
        for &v in tape.value(sums).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn gelu_known_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap());
    let y = tape.gelu(x);
    // ½x(1 + tanh(√(2/π)(x + 0.044715x³))) evaluated by hand.
    let u = (2.0 / std::f64::consts::PI).sqrt() * 1.044715;
    let g1 = 0.5 * (1.0 + u.tanh());
    let want = [0.0, g1, g1 - 1.0];
    for (got, want) in tape.value(y).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
    assert!((g1 - 0.841192).abs() < 1e-6);
}
