use idnanet_core::blocks::*;
use idnanet_core::layers::Conv2d;
use idnanet_core::{Error, ParamBuilder, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = f(&mut ParamBuilder::new(&mut store, &mut rng));
    (store, out)
}

fn zero_conv(store: &mut ParamStore, c: &Conv2d) {
    store.get_mut(c.weight).fill(0.0);
    if let Some(b) = c.bias {
        store.get_mut(b).fill(0.0);
    }
}

fn identity3(store: &mut ParamStore, c: &Conv2d) {
    zero_conv(store, c);
    let w = store.get_mut(c.weight);
    let cin = w.dim(1);
    for o in 0..w.dim(0) {
        w.data_mut()[(o * cin + o) * 9 + 4] = 1.0;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn rcb_with_zero_body_is_identity() {
    for norm in [false, true] {
        let (mut store, rcb) = build(1, |b| Rcb::new(b, "rcb", 16, norm));
        zero_conv(&mut store, &rcb.conv1);
        zero_conv(&mut store, &rcb.conv2);
        zero_conv(&mut store, &rcb.ca.fc1);
        zero_conv(&mut store, &rcb.ca.fc2);
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[16, 8, 8], 1.0);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let g = rcb.ca.gate(&mut t, xv);
        assert!(t.value(g).data().iter().all(|&v| v == 0.5));
        let y = rcb.forward(&mut t, xv);
        assert_eq!(t.value(y).shape(), &[16, 8, 8]);
        assert_eq!(t.value(y).data(), x.data());
    }
}

#[test]
fn rcb_single_channel_hand_example() {
    let (mut store, rcb) = build(3, |b| Rcb::new(b, "rcb", 1, false));
    identity3(&mut store, &rcb.conv1);
    identity3(&mut store, &rcb.conv2);
    let (wa, wb) = (0.5f64, -2.0f64);
    store.get_mut(rcb.ca.fc1.weight).data_mut()[0] = wa as f32;
    store.get_mut(rcb.ca.fc2.weight).data_mut()[0] = wb as f32;
    let (s_mean, s_max) = (0.75f64, 0.25f64);
    {
        let w = store.get_mut(rcb.sa.conv.weight);
        w.fill(0.0);
        w.data_mut()[24] = s_mean as f32;
        w.data_mut()[49 + 24] = s_max as f32;
    }
    let x = [0.2f64, 0.4, 0.6, 1.0];
    let mut t = Tape::new(&store);
    let xv = t.constant(Tensor::from_vec(&[1, 2, 2], x.iter().map(|&v| v as f32).collect()));
    let y = rcb.forward(&mut t, xv);

    let mlp = |v: f64| wb * (wa * v).max(0.0);
    let avg = x.iter().sum::<f64>() / 4.0;
    let max = 1.0;
    let gc = sigmoid(mlp(avg) + mlp(max));
    for (p, &xp) in x.iter().enumerate() {
        let ca = gc * xp;
        let gs = sigmoid((s_mean + s_max) * ca);
        let want = xp + gs * ca;
        assert!((t.value(y).data()[p] as f64 - want).abs() < 1e-6, "pixel {p}");
    }
}

#[test]
fn merge_shapes_and_identity() {
    let (store, m) = build(4, |b| MergeConv::new(b, "m", 16, Some(8), Some(32), false));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new(&store);
    let prev = t.constant(rand_tensor(&mut rng, &[16, 8, 8], 1.0));
    let sh = t.constant(rand_tensor(&mut rng, &[8, 16, 16], 1.0));
    let de = t.constant(rand_tensor(&mut rng, &[32, 4, 4], 1.0));
    let out = m
        .forward(&mut t, &NodeInputs { same_row_prev: prev, shallower: Some(sh), deeper: Some(de) })
        .unwrap();
    assert_eq!(t.shape(out), &[16, 8, 8]);
    assert_eq!(store.get(m.fuse.weight).shape(), &[16, 48, 1, 1]);

    let (store, m0) = build(4, |b| MergeConv::new(b, "m", 16, None, Some(32), true));
    assert_eq!(store.get(m0.fuse.weight).shape(), &[16, 32, 1, 1]);
    let mut t = Tape::new(&store);
    let prev = t.constant(rand_tensor(&mut rng, &[16, 16, 16], 1.0));
    let de = t.constant(rand_tensor(&mut rng, &[32, 8, 8], 1.0));
    let out = m0
        .forward(&mut t, &NodeInputs { same_row_prev: prev, shallower: None, deeper: Some(de) })
        .unwrap();
    assert_eq!(t.shape(out), &[16, 16, 16]);

    let (mut store, m1) = build(4, |b| MergeConv::new(b, "m", 4, None, None, false));
    zero_conv(&mut store, &m1.fuse);
    for c in 0..4 {
        store.get_mut(m1.fuse.weight).data_mut()[c * 4 + c] = 1.0;
    }
    let x = rand_tensor(&mut rng, &[4, 8, 8], 1.0);
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let out = m1
        .forward(&mut t, &NodeInputs { same_row_prev: xv, shallower: None, deeper: None })
        .unwrap();
    assert_eq!(t.value(out).data(), x.data());
}

#[test]
fn merge_rejects_misaligned_operands() {
    let (store, m) = build(4, |b| MergeConv::new(b, "m", 16, None, Some(32), false));
    let mut t = Tape::new(&store);
    let prev = t.constant(Tensor::zeros(&[16, 8, 8]));
    let de = t.constant(Tensor::zeros(&[32, 8, 8]));
    let r = m.forward(&mut t, &NodeInputs { same_row_prev: prev, shallower: None, deeper: Some(de) });
    assert!(matches!(r, Err(Error::Invariant(_))));
    let r = m.forward(&mut t, &NodeInputs { same_row_prev: prev, shallower: None, deeper: None });
    assert!(matches!(r, Err(Error::Invariant(_))));
}

fn acmix(channels: usize, heads: usize, fuse: AcmixFuse) -> (ParamStore, Acmix) {
    build(6, |b| Acmix::new(b, "ab", channels, heads, fuse, false).unwrap())
}

#[test]
fn conv_path_zero_aggregation_is_zero() {
    let (mut store, a) = acmix(16, 4, AcmixFuse::Concat);
    store.get_mut(a.fc).fill(0.0);
    store.get_mut(a.dep_conv.bias.unwrap()).fill(0.0);
    let mut t = Tape::new(&store);
    let f = t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[16, 8, 8], 1.0));
    let (q, k, v) = a.project(&mut t, f);
    let ac = a.conv_path(&mut t, q, k, v);
    assert_eq!(t.shape(ac), &[16, 8, 8]);
    assert!(t.value(ac).data().iter().all(|&x| x == 0.0));
}

/// Output of the conv path when only shift slot `slot` reads the value group.
fn single_shift(slot: usize, input: &Tensor) -> (Tensor, Tensor) {
    let (mut store, a) = acmix(1, 1, AcmixFuse::Concat);
    {
        let fc = store.get_mut(a.fc);
        fc.fill(0.0);
        fc.data_mut()[slot * 3 + 2] = 1.0;
    }
    store.get_mut(a.dep_conv.bias.unwrap()).fill(0.0);
    let mut t = Tape::new(&store);
    let f = t.constant(input.clone());
    let (q, k, v) = a.project(&mut t, f);
    let ac = a.conv_path(&mut t, q, k, v);
    (t.value(ac).clone(), t.value(v).clone())
}

#[test]
fn conv_path_shift_table() {
    let input = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32 / 9.0).collect());
    let (out, v) = single_shift(4, &input);
    assert_eq!(out.data(), v.data());
    // slot s reads tap (s / 3, s % 3): out(y, x) = v(y + s/3 - 1, x + s%3 - 1), zero outside
    for slot in 0..9 {
        let (out, v) = single_shift(slot, &input);
        let (dy, dx) = (slot as i64 / 3 - 1, slot as i64 % 3 - 1);
        for y in 0..3i64 {
            for x in 0..3i64 {
                let (sy, sx) = (y + dy, x + dx);
                let want = if (0..3).contains(&sy) && (0..3).contains(&sx) {
                    v.data()[(sy * 3 + sx) as usize]
                } else {
                    0.0
                };
                assert_eq!(out.data()[(y * 3 + x) as usize], want, "slot {slot} at ({y},{x})");
            }
        }
    }
}

#[test]
fn attention_path_examples() {
    let (store, a) = acmix(8, 2, AcmixFuse::Concat);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new(&store);
    let f = t.constant(rand_tensor(&mut rng, &[8, 1, 1], 1.0));
    let (q, k, v) = a.project(&mut t, f);
    let at = a.attention_path(&mut t, q, k, v);
    assert_eq!(t.value(at).data(), t.value(v).data());

    let mut t = Tape::new(&store);
    let mut constant = Vec::new();
    for c in 0..8 {
        constant.extend(std::iter::repeat(c as f32 * 0.1 - 0.3).take(16));
    }
    let f = t.constant(Tensor::from_vec(&[8, 4, 4], constant));
    let (q, k, v) = a.project(&mut t, f);
    let at = a.attention_path(&mut t, q, k, v);
    assert!(t.value(at).max_abs_diff(t.value(v)) < 1e-6);
}

#[test]
fn attention_path_two_position_hand_example() {
    let (mut store, a) = acmix(1, 1, AcmixFuse::Concat);
    let (wq, wk, wv) = (1.5f64, -0.5f64, 2.0f64);
    for (conv, w) in [(&a.q, wq), (&a.k, wk), (&a.v, wv)] {
        zero_conv(&mut store, conv);
        store.get_mut(conv.weight).data_mut()[0] = w as f32;
    }
    let x = [0.8f64, -0.4];
    let mut t = Tape::new(&store);
    let f = t.constant(Tensor::from_vec(&[1, 1, 2], x.iter().map(|&v| v as f32).collect()));
    let (q, k, v) = a.project(&mut t, f);
    let at = a.attention_path(&mut t, q, k, v);
    for i in 0..2 {
        let logits: Vec<f64> = (0..2).map(|j| wq * x[i] * wk * x[j]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let want: f64 = (0..2).map(|j| logits[j].exp() / z * wv * x[j]).sum();
        assert!((t.value(at).data()[i] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn fusion_structure() {
    let (mut store, a) = acmix(4, 2, AcmixFuse::Concat);
    let conv = a.fuse_conv.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ac_val = rand_tensor(&mut rng, &[4, 3, 3], 1.0);
    {
        let mut t = Tape::new(&store);
        let ac = t.constant(ac_val.clone());
        let zero = t.constant(Tensor::zeros(&[4, 3, 3]));
        let out = a.combine(&mut t, ac, zero);
        let w = store.get(conv.weight).data();
        let b = store.get(conv.bias.unwrap()).data();
        for o in 0..4 {
            for p in 0..9 {
                let want: f32 = b[o] + (0..4).map(|c| w[o * 8 + c] * ac_val.data()[c * 9 + p]).sum::<f32>();
                assert!((t.value(out).data()[o * 9 + p] - want).abs() < 1e-5);
            }
        }
    }
    zero_conv(&mut store, &conv);
    let mut t = Tape::new(&store);
    let z = t.constant(Tensor::zeros(&[4, 3, 3]));
    let out = a.combine(&mut t, z, z);
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));

    let (store, add) = acmix(4, 2, AcmixFuse::Add);
    assert!(add.fuse_conv.is_none());
    let mut t = Tape::new(&store);
    let x = t.constant(ac_val.clone());
    let y = t.constant(ac_val.map(|v| -v));
    let out = add.combine(&mut t, x, y);
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ab_node_shape_at_desk_row_one() {
    let (store, blk) = build(9, |b| {
        let merge = MergeConv::new(b, "merge", 32, Some(16), Some(64), true);
        let acmix = Acmix::new(b, "acmix", 32, 4, AcmixFuse::Concat, false).unwrap();
        AcmixBlock { merge, acmix }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut t = Tape::new(&store);
    let prev = t.constant(rand_tensor(&mut rng, &[32, 8, 8], 1.0));
    let sh = t.constant(rand_tensor(&mut rng, &[16, 16, 16], 1.0));
    let de = t.constant(rand_tensor(&mut rng, &[64, 4, 4], 1.0));
    let inputs = NodeInputs { same_row_prev: prev, shallower: Some(sh), deeper: Some(de) };
    let out = blk.forward(&mut t, &inputs).unwrap();
    assert_eq!(t.shape(out), &[32, 8, 8]);
}

#[test]
fn acmix_output_depends_on_every_operand() {
    let (store, blk) = build(11, |b| {
        let merge = MergeConv::new(b, "merge", 16, Some(8), Some(32), false);
        let acmix = Acmix::new(b, "acmix", 16, 4, AcmixFuse::Concat, false).unwrap();
        AcmixBlock { merge, acmix }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let vals = [
        rand_tensor(&mut rng, &[16, 8, 8], 1.0),
        rand_tensor(&mut rng, &[8, 16, 16], 1.0),
        rand_tensor(&mut rng, &[32, 4, 4], 1.0),
    ];
    let run = |zeroed: Option<usize>| -> Tensor {
        let mut t = Tape::new(&store);
        let v: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, x)| t.constant(if zeroed == Some(i) { Tensor::zeros(x.shape()) } else { x.clone() }))
            .collect();
        let out = blk
            .forward(&mut t, &NodeInputs { same_row_prev: v[0], shallower: Some(v[1]), deeper: Some(v[2]) })
            .unwrap();
        t.value(out).clone()
    };
    let base = run(None);
    for i in 0..3 {
        assert!(run(Some(i)).max_abs_diff(&base) > 1e-4, "operand {i} has no effect");
    }
}

#[test]
fn shared_projections_feed_both_paths() {
    let (store, a) = acmix(8, 2, AcmixFuse::Concat);
    let f = rand_tensor(&mut ChaCha8Rng::seed_from_u64(13), &[8, 4, 4], 1.0);
    let paths = |store: &ParamStore| -> (Tensor, Tensor) {
        let mut t = Tape::new(store);
        let x = t.constant(f.clone());
        let (q, k, v) = a.project(&mut t, x);
        let ac = a.conv_path(&mut t, q, k, v);
        let at = a.attention_path(&mut t, q, k, v);
        (t.value(ac).clone(), t.value(at).clone())
    };
    let (ac0, at0) = paths(&store);
    for conv in [&a.q, &a.k, &a.v] {
        let mut s = store.clone();
        s.get_mut(conv.weight).data_mut()[3] += 1e-2;
        let (ac1, at1) = paths(&s);
        assert!(ac1.max_abs_diff(&ac0) > 1e-6);
        assert!(at1.max_abs_diff(&at0) > 1e-6);
    }
}

#[test]
fn up_and_keep() {
    let (store, u) = build(14, |b| up(b, "up", 3, 768, 0, 96).unwrap().unwrap());
    let mut t = Tape::new(&store);
    let x = t.constant(Tensor::full(&[768, 8, 8], 0.25));
    let y = u.forward(&mut t, x);
    assert_eq!(t.shape(y), &[96, 64, 64]);
    let y = t.value(y);
    for c in 0..96 {
        let plane = &y.data()[c * 4096..(c + 1) * 4096];
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-5));
    }
    let c = t.constant(Tensor::full(&[2, 3, 3], -1.5));
    let b = t.bilinear(c, 12, 12);
    assert!(t.value(b).data().iter().all(|&v| (v + 1.5).abs() < 1e-6));

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    assert!(up(&mut pb, "same", 2, 64, 2, 64).unwrap().is_none());
    assert!(matches!(up(&mut pb, "bad", 0, 16, 1, 32), Err(Error::Usage(_))));

    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let x = t.constant(Tensor::full(&[96, 4, 4], 2.0));
    assert_eq!(keep(keep(x)), x);
}
