//! Analytic gradients of the hand-written backward passes against central
//! finite differences.

mod common;

use common::*;
use wrel_core::lrb::{sample_grad, PromptGrad};
use wrel_core::model::Network;
use wrel_core::params::ParamSet;

const SEEDS: [u64; 5] = checks::GRAD_SEEDS;

#[test]
fn every_parameter_group_matches_finite_differences() {
    for seed in SEEDS {
        let (e, name) = checks::model_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed} `{name}`: rel err {e:e}");
    }
}

#[test]
fn encoder_gradient_wrt_sequence_rows() {
    for seed in SEEDS {
        let e = checks::encoder_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed}: rel err {e:e}");
    }
}

#[test]
fn embedding_table_readout_gradient() {
    for seed in SEEDS {
        let m = small_scene(seed, 1);
        let net = small_net(&m, seed);
        let tokens = net.tokenize(&m.samples[0].expression).unwrap();
        let c = random_vec(net.encoder.dims.out_dim, 1.0, seed);
        let readout = |n: &Network| -> f64 {
            let r = n.encode(&n.embed(&tokens).unwrap()).unwrap();
            r.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let seq = net.embed(&tokens).unwrap();
        let (_, cache) = net.encode_with_cache(&seq).unwrap();
        let mut grads = net.params.zeros_like();
        let dx = net.encoder.encode_backward(&net.params, &cache, &c, Some(&mut grads)).unwrap();
        net.encoder.embed_backward(&tokens, &dx, &mut grads).unwrap();
        let base = net.params.get("text.embed").unwrap().data().to_vec();
        let d = net.encoder.dims.dim;
        let idx: Vec<usize> = (tokens.ids[1] * d..tokens.ids[1] * d + d).collect();
        let mut f = |v: &[f64]| {
            let mut n = net.clone();
            n.params.get_mut("text.embed").unwrap().data_mut().copy_from_slice(v);
            readout(&n)
        };
        let numeric: Vec<f64> = idx.iter().map(|&i| central_diff(&mut f, &base, i, FD_STEP)).collect();
        let analytic: Vec<f64> = idx.iter().map(|&i| grads.get("text.embed").unwrap().data()[i]).collect();
        assert!(rel_err(&analytic, &numeric) < FD_TOL);
    }
}

#[test]
fn mean_logit_gradient_wrt_embedding() {
    for seed in SEEDS {
        let m = small_scene(seed, 1);
        let net = small_net(&m, seed);
        let s = &m.samples[0];
        let r = random_vec(net.encoder.dims.out_dim, 1.0, seed + 100);
        let (logits, cache) = net.model.forward_with_cache(&net.params, &s.image, &r).unwrap();
        let n = logits.len() as f64;
        let dr = net.model.backward(&net.params, &cache, &vec![1.0 / n; logits.len()], None).unwrap();
        let mut f = |v: &[f64]| {
            let l = net.model.forward(&net.params, &s.image, v).unwrap();
            l.iter().sum::<f64>() / l.len() as f64
        };
        let numeric: Vec<f64> = (0..r.len()).map(|i| central_diff(&mut f, &r, i, FD_STEP)).collect();
        let e = rel_err(&dr, &numeric);
        assert!(e < FD_TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn enhance_path_gradient_wrt_prompts() {
    for seed in SEEDS {
        let e = checks::enhance_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn gradients_do_not_depend_on_accumulator_state() {
    let m = small_scene(9, 1);
    let net = small_net(&m, 9);
    let s = &m.samples[0];
    let tokens = net.tokenize(&s.expression).unwrap();
    let mut a = net.params.zeros_like();
    sample_grad(&net, &s.image, &s.mask, &tokens, None, 1.0, Some(&mut a), PromptGrad::Skip).unwrap();
    let mut b: ParamSet = net.params.zeros_like();
    sample_grad(&net, &s.image, &s.mask, &tokens, None, 0.5, Some(&mut b), PromptGrad::Skip).unwrap();
    sample_grad(&net, &s.image, &s.mask, &tokens, None, 0.5, Some(&mut b), PromptGrad::Skip).unwrap();
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }
}
