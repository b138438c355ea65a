use idnanet_core::data::{synth_samples, SynthConfig};
use idnanet_core::optim::Adagrad;
use idnanet_core::train::{accumulate_sample, train_step};
use idnanet_core::loss::LossConfig;
use idnanet_core::{Error, ModelConfig, Network, ParamStore, Tensor, TrainConfig, Trainer};

fn samples(count: usize, seed: u64) -> Vec<idnanet_core::Sample> {
    synth_samples(&SynthConfig {
        count,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn adagrad_matches_reference_update() {
    let mut store = ParamStore::new();
    let id = store.insert("w".into(), Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
    let mut opt = Adagrad::new(&store, 0.05, 1e-10);
    let grads = [[0.2f64, -3.0, 0.0], [0.1, 1.0, 0.5], [-0.4, 0.0, 0.5]];
    let (mut w, mut g2) = ([0.5f64, -1.0, 2.0], [0.0f64; 3]);
    for g in grads {
        opt.step(&mut store, &[Some(Tensor::from_vec(&[3], g.map(|v| v as f32).to_vec()))]);
        for k in 0..3 {
            g2[k] += g[k] * g[k];
            w[k] -= 0.05 * g[k] / (g2[k].sqrt() + 1e-10);
        }
    }
    for k in 0..3 {
        assert!((store.get(id).data()[k] as f64 - w[k]).abs() < 1e-6);
    }
}

#[test]
fn lambda_is_projected_nonnegative() {
    let net = Network::new(&ModelConfig::desk(), &LossConfig::default(), 0).unwrap();
    let mut store = net.store.clone();
    let mut opt = net.optimizer(0.05, 1e-10);
    let mut grads = vec![None; store.len()];
    grads[net.loss.lambda.0] = Some(Tensor::full(&[5], 1e3));
    for _ in 0..400 {
        opt.step(&mut store, &grads);
    }
    assert!(store.get(net.loss.lambda).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_update_uses_the_mean_gradient() {
    let data = samples(2, 1);
    let mut net = Network::new(&ModelConfig::desk(), &LossConfig::default(), 3).unwrap();
    let mut reference = net.store.clone();
    let mut ref_opt = net.optimizer(0.05, 1e-10);
    let mut grads: Vec<Option<Tensor>> = vec![None; net.store.len()];
    for s in &data {
        let mut one = vec![None; net.store.len()];
        accumulate_sample(&net, s, 1.0, &mut one).unwrap();
        for (acc, g) in grads.iter_mut().zip(one) {
            if let Some(mut g) = g {
                g.scale_assign(0.5);
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
    }
    ref_opt.step(&mut reference, &grads);

    let mut opt = net.optimizer(0.05, 1e-10);
    let batch: Vec<_> = data.iter().collect();
    train_step(&mut net, &mut opt, &batch).unwrap();
    for id in net.store.ids() {
        assert!(net.store.get(id).max_abs_diff(reference.get(id)) < 1e-6, "{}", net.store.name(id));
    }
}

#[test]
fn non_finite_input_names_the_branch() {
    let mut s = samples(1, 2).remove(0);
    s.image.data_mut()[100] = f32::NAN;
    let mut net = Network::new(&ModelConfig::desk(), &LossConfig::default(), 4).unwrap();
    let mut opt = net.optimizer(0.05, 1e-10);
    match train_step(&mut net, &mut opt, &[&s]) {
        Err(Error::NonFiniteLoss { branch, .. }) => assert_eq!(branch, 1),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn training_is_deterministic() {
    let data = samples(4, 5);
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::new(&ModelConfig::desk(), &LossConfig::default(), 6).unwrap();
        let mut tr = Trainer::new(&net, &cfg, 6).unwrap();
        let logs: Vec<_> = (0..2).map(|_| tr.run_epoch(&mut net, &data).unwrap()).collect();
        (logs, net.store)
    };
    let (la, sa) = run();
    let (lb, sb) = run();
    assert_eq!(la, lb);
    for id in sa.ids() {
        assert_eq!(sa.get(id), sb.get(id));
    }
}

#[test]
fn one_epoch_on_one_sample_lowers_the_loss() {
    let cfg = TrainConfig {
        epochs: 1,
        batch: 8,
        ..TrainConfig::default()
    };
    let mut decreased = 0;
    for seed in 0..10u64 {
        let data = samples(1, 100 + seed);
        let mut net = Network::new(&ModelConfig::desk(), &LossConfig::default(), seed).unwrap();
        let loss = |net: &Network| {
            let mut g = vec![None; net.store.len()];
            accumulate_sample(net, &data[0], 1.0, &mut g).unwrap().l_all
        };
        let before = loss(&net);
        Trainer::new(&net, &cfg, seed).unwrap().run_epoch(&mut net, &data).unwrap();
        let after = loss(&net);
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 9, "{decreased}/10 seeds decreased");
}
