use panofill_autograd::gradcheck::check_inputs;
use panofill_autograd::{ConvGeom, NormGroups, Padding, Tape, Tensor, Var, WidthPad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct amount to the scalar.
fn probe(tape: &Tape<f64>, y: Var) -> Var {
    let shape = tape.shape(y);
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 113) as f64 / 113.0) - 0.4);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv);
    tape.sum(p)
}

fn assert_ok(name: &str, report: panofill_autograd::gradcheck::GradCheckReport) {
    let worst = report.max_rel_error();
    assert!(worst <= TOL, "{name}: relative error {worst:e} ({:?})", report.worst());
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 4]);
        let s = rand_tensor(&mut rng, &[1]);
        assert_ok(
            "add/sub/mul",
            check_inputs(&[a.clone(), b.clone()], |t, v| {
                let x = t.add(v[0], v[1]);
                let y = t.sub(x, v[1]);
                let z = t.mul(y, v[1]);
                probe(t, z)
            }, STEP, None),
        );
        assert_ok(
            "activations",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let x = t.sigmoid(v[0]);
                let y = t.tanh(v[0]);
                let z = t.leaky_relu(v[0], 0.2);
                let q = t.square(v[0]);
                let s1 = t.add(x, y);
                let s2 = t.add(z, q);
                let s3 = t.scale(s2, 0.7);
                let s4 = t.add_scalar(s3, 0.3);
                let out = t.add(s1, s4);
                probe(t, out)
            }, STEP, None),
        );
        assert_ok(
            "mul_scalar",
            check_inputs(&[a.clone(), s.clone()], |t, v| {
                let y = t.mul_scalar(v[0], v[1]);
                probe(t, y)
            }, STEP, None),
        );
        assert_ok(
            "mean/sum",
            check_inputs(std::slice::from_ref(&a), |t, v| {
                let m = t.mean(v[0]);
                let q = t.square(v[0]);
                let s = t.sum(q);
                t.add(m, s)
            }, STEP, None),
        );
    }
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        let m = rand_tensor(&mut rng, &[2, 1, 4, 5]);
        assert_ok(
            "channel ops",
            check_inputs(&[x.clone(), b.clone()], |t, v| {
                let y = t.add_channel(v[0], v[1]);
                let z = t.mul_channel(y, v[1]);
                probe(t, z)
            }, STEP, None),
        );
        assert_ok(
            "mul_spatial",
            check_inputs(&[x.clone(), m.clone()], |t, v| {
                let y = t.mul_spatial(v[0], v[1]);
                probe(t, y)
            }, STEP, None),
        );
        assert_ok(
            "concat",
            check_inputs(&[x.clone(), m.clone()], |t, v| {
                let y = t.concat_channels(&[v[1], v[0], v[1]]);
                let r = t.reshape(y, &[2, 5 * 20]);
                probe(t, r)
            }, STEP, None),
        );
    }
}

#[test]
fn conv_pad_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (ConvGeom { stride: 1, dilation: 1 }, 3, WidthPad::Circular, 1),
        (ConvGeom { stride: 2, dilation: 1 }, 4, WidthPad::Circular, 1),
        (ConvGeom { stride: 1, dilation: 2 }, 3, WidthPad::Zero, 2),
        (ConvGeom { stride: 1, dilation: 1 }, 1, WidthPad::Zero, 0),
        (ConvGeom { stride: 2, dilation: 1 }, 3, WidthPad::Circular, 1),
    ];
    for (geom, k, mode, pad) in cases {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        assert_ok(
            "conv2d",
            check_inputs(&[x, w, b], |t, v| {
                let p = t.pad2d(v[0], Padding::uniform(pad, mode));
                let y = t.conv2d(p, v[1], Some(v[2]), geom);
                let u = t.upsample2x(y);
                probe(t, u)
            }, STEP, None),
        );
    }
}

#[test]
fn normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [NormGroups::Instance, NormGroups::Batch, NormGroups::Instance, NormGroups::Batch, NormGroups::Batch] {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        assert_ok(
            "normalize",
            check_inputs(&[x], |t, v| {
                let (y, _) = t.normalize(v[0], kind, 1e-5);
                probe(t, y)
            }, STEP, None),
        );
    }
}

#[test]
fn linear_gram_spectral() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        assert_ok(
            "linear",
            check_inputs(&[x, w.clone(), b], |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                probe(t, y)
            }, STEP, None),
        );
        let f = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        assert_ok("gram", check_inputs(&[f], |t, v| probe(t, t.gram(v[0])), STEP, None));

        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (u, v, _) = panofill_autograd::power_iteration(&w, &u);
        assert_ok(
            "spectral_normalize",
            check_inputs(&[w], move |t, vars| {
                let y = t.spectral_normalize(vars[0], &u, &v);
                probe(t, y)
            }, STEP, None),
        );
    }
}

#[test]
fn abs_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        // keep every element well away from zero
        let a = Tensor::from_fn(&[10], |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        assert_ok("abs", check_inputs(&[a], |t, v| probe(t, t.abs(v[0])), STEP, None));
    }
}
