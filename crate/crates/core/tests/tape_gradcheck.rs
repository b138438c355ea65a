//! Central finite-difference checks for every differentiable tape op.

use idnanet_core::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Scalarizes `out` as `sum(out * r)` for a fixed random `r`.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.shape(out), 1.0);
    let r = tape.constant(r);
    let m = tape.mul(out, r);
    tape.sum(m)
}

fn check<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_tol(name, inputs, 1e-2, 2e-2, build)
}

fn check_tol<F>(name: &str, inputs: Vec<Tensor>, h: f32, tol: f32, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let l = probe(&mut tape, out, 99);
        tape.value(l).item() as f64
    };
    let mut tape = Tape::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let l = probe(&mut tape, out, 99);
    let grads = tape.backward(l);
    for (vi, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[vi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[vi].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[vi].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let a = analytic.data()[e] as f64;
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                err <= tol as f64 * scale,
                "{name}: input {vi} elem {e}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 3], 1.0);
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7));
    check("gelu", vec![a.clone()], |t, v| t.gelu(v[0]));
    check("sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0]));
    check("relu", vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |t, v| {
        t.relu(v[0])
    });
    check("softmax", vec![a], |t, v| t.softmax(v[0]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 2, 4], 1.0);
    let c = rand_tensor(&mut rng, &[3], 1.0);
    let s = rand_tensor(&mut rng, &[1, 2, 4], 1.0);
    check("add_channel_bias", vec![x.clone(), c.clone()], |t, v| {
        t.add_channel_bias(v[0], v[1])
    });
    check("mul_channel", vec![x.clone(), c], |t, v| t.mul_channel(v[0], v[1]));
    check("mul_spatial", vec![x.clone(), s], |t, v| t.mul_spatial(v[0], v[1]));
    let y = rand_tensor(&mut rng, &[2, 2, 4], 1.0);
    let x6 = rand_tensor(&mut rng, &[6, 2, 4], 1.0);
    check("add_periodic", vec![x6.clone(), y.clone()], |t, v| {
        t.add_periodic(v[0], v[1], 1)
    });
    check("add_periodic_div", vec![x6, y], |t, v| t.add_periodic(v[0], v[1], 3));
}

#[test]
fn matmul_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ta in [false, true] {
        for tb in [false, true] {
            let a = if ta {
                rand_tensor(&mut rng, &[2, 4, 3], 1.0)
            } else {
                rand_tensor(&mut rng, &[2, 3, 4], 1.0)
            };
            let b = if tb {
                rand_tensor(&mut rng, &[2, 5, 4], 1.0)
            } else {
                rand_tensor(&mut rng, &[2, 4, 5], 1.0)
            };
            check("bmm", vec![a, b], move |t, v| t.matmul(v[0], v[1], ta, tb));
        }
    }
    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], 1.0);
    check("matmul2d", vec![a, b], |t, v| t.matmul(v[0], v[1], false, false));
}

#[test]
fn conv_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 5, 6], 1.0);
    let w3 = rand_tensor(&mut rng, &[6, 4, 3, 3], 0.5);
    check("conv3x3", vec![x.clone(), w3], |t, v| t.conv2d(v[0], v[1], 1, 1, 1));
    let wg = rand_tensor(&mut rng, &[6, 2, 3, 3], 0.5);
    check("conv_grouped", vec![x.clone(), wg], |t, v| t.conv2d(v[0], v[1], 1, 1, 2));
    let w1 = rand_tensor(&mut rng, &[3, 4, 1, 1], 0.5);
    check("conv1x1", vec![x, w1], |t, v| t.conv2d(v[0], v[1], 1, 0, 1));
    let x8 = rand_tensor(&mut rng, &[3, 8, 8], 1.0);
    let w4 = rand_tensor(&mut rng, &[2, 3, 4, 4], 0.5);
    check("conv_patch", vec![x8.clone(), w4], |t, v| t.conv2d(v[0], v[1], 4, 0, 1));
    let w7 = rand_tensor(&mut rng, &[1, 3, 7, 7], 0.3);
    check("conv7x7", vec![x8, w7], |t, v| t.conv2d(v[0], v[1], 1, 3, 1));
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let idx: Vec<u32> = vec![5, 0, 0, 23, 7, 7, 7, 1];
    check("gather", vec![x.clone()], move |t, v| t.gather(v[0], idx.clone(), &[2, 4]));
    check("reshape", vec![x.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    let y = rand_tensor(&mut rng, &[1, 3, 4], 1.0);
    check("concat", vec![x.clone(), y], |t, v| t.concat(&[v[0], v[1], v[0]]));
    check("select", vec![x.clone()], |t, v| t.select(v[0], 13));
    check("sum", vec![x], |t, v| t.sum(v[0]));
}

#[test]
fn normalization_and_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 2, 3], 1.0);
    let g = rand_tensor(&mut rng, &[5], 1.0);
    let b = rand_tensor(&mut rng, &[5], 1.0);
    check_tol("layer_norm", vec![x, g, b], 1e-3, 3e-2, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let x = rand_tensor(&mut rng, &[3, 4, 6], 1.0);
    check_tol("max_pool2", vec![x.clone()], 1e-3, 3e-2, |t, v| t.max_pool2(v[0]));
    check("global_avg_pool", vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
    check_tol("global_max_pool", vec![x.clone()], 1e-3, 3e-2, |t, v| t.global_max_pool(v[0]));
    check("channel_mean", vec![x.clone()], |t, v| t.channel_mean(v[0]));
    check_tol("channel_max", vec![x.clone()], 1e-3, 3e-2, |t, v| t.channel_max(v[0]));
    check("bilinear_up", vec![x.clone()], |t, v| t.bilinear(v[0], 8, 12));
    check("bilinear_any", vec![x], |t, v| t.bilinear(v[0], 7, 5));
}

#[test]
fn attention_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = rand_tensor(&mut rng, &[4, 3, 5], 1.0);
    let k = rand_tensor(&mut rng, &[4, 6, 5], 1.0);
    check_tol("cosine", vec![q, k], 1e-3, 3e-2, |t, v| t.cosine(v[0], v[1], 1e-6));
    let x = rand_tensor(&mut rng, &[6, 3, 3], 1.0);
    let s = Tensor::from_vec(&[2], vec![0.5, 1.2]);
    check("head_scale", vec![x.clone(), s], |t, v| t.head_scale(v[0], v[1], 4.6));
    // clamped head receives no scale gradient
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let sv = tape.constant(Tensor::from_vec(&[2], vec![9.0, 0.0]));
    let y = tape.head_scale(xv, sv, 100f32.ln());
    let l = tape.sum(y);
    let g = tape.backward(l);
    assert_eq!(g.wrt(sv).unwrap().data()[0], 0.0);
    assert!(g.wrt(sv).unwrap().data()[1] != 0.0);
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 4, 4], 2.0);
    let target = Tensor::from_vec(
        &[1, 4, 4],
        (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
    );
    let t1 = target.clone();
    check_tol("dice", vec![x.clone()], 1e-3, 2e-2, move |t, v| {
        let d = t.dice_loss(v[0], &t1, 1.0);
        t.scale(d, 10.0)
    });
    check_tol("bce", vec![x], 1e-3, 2e-2, move |t, v| {
        let d = t.bce_loss(v[0], &target, 1e-7);
        t.scale(d, 10.0)
    });
}
