use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::losses::{cmk_mmd, cst_loss, im_loss, total_loss, KernelSpec, LossWeights};
use sfda_core::CoreError;
use sfda_tensor::gradcheck::check_gradients;
use sfda_tensor::{Tape, Tensor, Var};

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::new([r, c], (0..r * c).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn lift(r: sfda_core::Result<Var>) -> sfda_tensor::Result<Var> {
    r.map_err(|e| match e {
        CoreError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn im_and_cst_match_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (b, c) = (rng.gen_range(1..9), rng.gen_range(2..6));
        let z = rand_t(&mut rng, b, c, 3.0);
        let za = rand_t(&mut rng, b, c, 3.0);
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();

        let p: Vec<Vec<f64>> = z.rows().map(softmax).collect();
        let ent: f64 = p.iter().map(|r| -r.iter().map(|v| v * v.ln()).sum::<f64>()).sum::<f64>() / b as f64;
        let div: f64 = (0..c)
            .map(|k| {
                let m = p.iter().map(|r| r[k]).sum::<f64>() / b as f64;
                m * (m + 1e-12).ln()
            })
            .sum();
        let pa: Vec<Vec<f64>> = za.rows().map(softmax).collect();
        let cst: f64 = (0..b).map(|i| -pa[i][y[i]].ln() - p[i][y[i]].ln()).sum::<f64>() / b as f64;

        let mut tape = Tape::new();
        let (vz, va) = (tape.constant(z.clone()), tape.constant(za.clone()));
        let im = im_loss(&mut tape, vz).unwrap();
        let cs = cst_loss(&mut tape, vz, va, &y).unwrap();
        assert!((tape.value(im).item() - (ent + div)).abs() < 1e-8);
        assert!((tape.value(cs).item() - cst).abs() < 1e-8);
        // Per-sample entropy lies in [0, log C].
        assert!(ent >= 0.0 && ent <= (c as f64).ln() + 1e-12);
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([2, 3]));
    assert!(cst_loss(&mut tape, z, z, &[0, 3]).is_err());
}

#[test]
fn mmd_is_symmetric_and_matches_two_sigma_squared_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = KernelSpec::default();
    for _ in 0..20 {
        let (m, n) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let x = rand_t(&mut rng, m, 3, 1.0);
        let y = rand_t(&mut rng, n, 3, 1.0);
        let lx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..2)).collect();
        let ly: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mut tape = Tape::new();
        let (vx, vy) = (tape.constant(x), tape.constant(y));
        let a = cmk_mmd(&mut tape, vx, &lx, vy, &ly, &spec).unwrap();
        let b = cmk_mmd(&mut tape, vy, &ly, vx, &lx, &spec).unwrap();
        assert!((tape.value(a.value).item() - tape.value(b.value).item()).abs() < 1e-12);
        assert_eq!(a.skipped, b.skipped);
    }
    // ‖x − y‖² = 2σ² gives 2 − 2/e.
    let sigma = 0.7;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
    let y = tape.constant(Tensor::new([1, 2], vec![sigma * 2f64.sqrt(), 0.0]).unwrap());
    let v = cmk_mmd(&mut tape, x, &[1], y, &[1], &KernelSpec::single(sigma)).unwrap();
    assert!((tape.value(v.value).item() - (2.0 - 2.0 / std::f64::consts::E)).abs() < 1e-12);
}

/// Features `f`, logits `z = f·W`, assistant logits `za`; every loss and the
/// total are checked against finite differences in all three inputs.
#[test]
fn losses_pass_finite_differences_in_their_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, d, c) = (8, 5, 3);
    let inputs = vec![rand_t(&mut rng, b, d, 1.0), rand_t(&mut rng, d, c, 1.0), rand_t(&mut rng, b, c, 2.0)];
    let y: Vec<usize> = (0..b).map(|i| i % c).collect();
    let easy: Vec<bool> = (0..b).map(|i| i < 5).collect();
    let spec = KernelSpec {
        bandwidth: Some(1.3),
        ..KernelSpec::default()
    };
    let mmd = |tape: &mut Tape<f64>, f: Var| -> sfda_tensor::Result<Var> {
        lift(sfda_core::losses::cmk_mmd_batch(tape, f, &easy, &y, &spec).map(|m| m.value))
    };
    let parts = |tape: &mut Tape<f64>, v: &[Var]| -> sfda_tensor::Result<[Var; 3]> {
        let z = tape.matmul(v[0], v[1])?;
        Ok([lift(im_loss(tape, z))?, lift(cst_loss(tape, z, v[2], &y))?, mmd(tape, v[0])?])
    };
    for which in 0..4 {
        let report = check_gradients(
            &inputs,
            |tape, v| {
                let p = parts(tape, v)?;
                if which < 3 {
                    Ok(p[which])
                } else {
                    lift(total_loss(tape, p[0], p[1], p[2], LossWeights::default()))
                }
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.passes(1e-4), "loss {which}: {report:?}");
    }

    // The total's gradient is the weighted sum of the parts' gradients.
    let w = LossWeights::default();
    let grad_f = |k: Option<usize>| -> Tensor<f64> {
        let mut tape = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let p = parts(&mut tape, &v).unwrap();
        let out = match k {
            Some(k) => p[k],
            None => total_loss(&mut tape, p[0], p[1], p[2], w).unwrap(),
        };
        // Features feed all three terms.
        tape.backward(out).unwrap().get(v[0]).unwrap().clone()
    };
    let (g, gi, gc, gm) = (grad_f(None), grad_f(Some(0)), grad_f(Some(1)), grad_f(Some(2)));
    for i in 0..g.len() {
        let want = gi.data()[i] + w.alpha * gc.data()[i] + w.beta * gm.data()[i];
        assert!((g.data()[i] - want).abs() < 1e-7);
    }
}
