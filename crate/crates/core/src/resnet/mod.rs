//! The finite residual network: forward and backward recursions, per-unit
//! gradients, and full-batch gradient descent.

mod config;
mod data;
mod net;
mod pass;
pub mod snapshot;
mod train;

pub use config::{parse_json, BlockName, TrainConfig};
pub use data::{Dataset, LossKind};
pub use net::NetParams;
pub use pass::{
    backward_pass, batch_pass, branch_scale, forward_pass, full_gradient, mean_loss,
    unit_gradients, BackwardTrace, BatchPass, ForwardTrace, UnitGradients,
};
pub use train::{
    config_dataset, gd_step, init_net, train, train_from, train_with, GradientDescent, TrainRun,
    UpdateRule,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Activation, BlockKind, InitScales};
    use crate::tensor::{rms_norm, State};

    fn mlp_net(params: Vec<f64>, dim: usize, depth: usize, width: usize, act: Activation) -> NetParams {
        NetParams::from_parts(BlockKind::Mlp(act), dim, 1, depth, width, params, 0).unwrap()
    }

    fn random_net(kind: BlockKind, dim: usize, tokens: usize, depth: usize, width: usize, seed: u64) -> NetParams {
        NetParams::init(kind, dim, tokens, depth, width, InitScales { input: 1.0, output: 1.0 }, seed, false)
            .unwrap()
    }

    #[test]
    fn zero_alpha_and_zero_output_layer_are_identity() {
        let net = random_net(BlockKind::Mlp(Activation::Tanh), 3, 1, 4, 2, 1);
        let x = State::vector(vec![0.2, -0.4, 1.0]).unwrap();
        let tr = forward_pass(&net, &x, 0.0).unwrap();
        assert!(tr.states.iter().all(|h| h == &x));

        let mut zero_v = net.clone();
        for l in 0..4 {
            for j in 0..2 {
                zero_v.unit_mut(l, j)[3..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tr = forward_pass(&zero_v, &x, 1.0).unwrap();
        assert!(tr.states.iter().all(|h| h == &x));
        assert_eq!(tr.states.len(), 5);
    }

    #[test]
    fn two_layer_linear_net_matches_matrix_products() {
        // rho = identity: each layer is h <- (I + (alpha/L) v u^T / D) h
        let (u1, v1) = ([1.0, 2.0], [0.5, -1.0]);
        let (u2, v2) = ([-1.0, 1.0], [2.0, 0.5]);
        let net = mlp_net(
            vec![u1[0], u1[1], v1[0], v1[1], u2[0], u2[1], v2[0], v2[1]],
            2,
            2,
            1,
            Activation::Identity,
        );
        let x = [1.0, -1.0];
        let step = |u: [f64; 2], v: [f64; 2], h: [f64; 2]| -> [f64; 2] {
            let m = [
                [1.0 + 0.5 * v[0] * u[0] / 2.0, 0.5 * v[0] * u[1] / 2.0],
                [0.5 * v[1] * u[0] / 2.0, 1.0 + 0.5 * v[1] * u[1] / 2.0],
            ];
            [m[0][0] * h[0] + m[0][1] * h[1], m[1][0] * h[0] + m[1][1] * h[1]]
        };
        let h1 = step(u1, v1, x);
        let h2 = step(u2, v2, h1);
        // by hand: h1 = (0.875, -0.75), h2 = (0.0625, -0.953125)
        assert!((h2[0] - 0.0625).abs() < 1e-15 && (h2[1] + 0.953125).abs() < 1e-15);
        let tr = forward_pass(&net, &State::vector(x.to_vec()).unwrap(), 1.0).unwrap();
        for (a, b) in tr.output().as_slice().iter().zip(&h2) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tr.states[1].as_slice().iter().zip(&h1) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_with_zero_alpha_is_constant() {
        let net = random_net(BlockKind::Mlp(Activation::Tanh), 3, 1, 5, 2, 2);
        let x = State::vector(vec![0.1, 0.2, 0.3]).unwrap();
        let w = State::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let tr = forward_pass(&net, &x, 0.0).unwrap();
        let b = backward_pass(&net, &tr, &w, 0.0).unwrap();
        assert!(b.states.iter().all(|s| s == &w));
    }

    #[test]
    fn backward_is_the_adjoint_of_the_forward_map() {
        let eps = 1e-6;
        for (kind, t) in [
            (BlockKind::Mlp(Activation::Tanh), 1),
            (BlockKind::MatrixPost(Activation::Tanh), 1),
            (BlockKind::Attention { key_dim: 2 }, 2),
        ] {
            let net = random_net(kind, 4, t, 3, 2, 5);
            let x = State::new(4, t, (0..4 * t).map(|i| 0.3 * i as f64 - 0.5).collect()).unwrap();
            let delta = State::new(4, t, (0..4 * t).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
            let w = State::new(4, t, (0..4 * t).map(|i| 1.0 - 0.2 * i as f64).collect()).unwrap();
            let tr = forward_pass(&net, &x, 1.5).unwrap();
            let b = backward_pass(&net, &tr, &w, 1.5).unwrap();
            let plus = forward_pass(&net, &State::new(4, t, x.as_slice().iter().zip(delta.as_slice()).map(|(a, d)| a + eps * d).collect()).unwrap(), 1.5).unwrap();
            let minus = forward_pass(&net, &State::new(4, t, x.as_slice().iter().zip(delta.as_slice()).map(|(a, d)| a - eps * d).collect()).unwrap(), 1.5).unwrap();
            let fd = (plus.output().dot(&w) - minus.output().dot(&w)) / (2.0 * eps);
            let adj = b.states[0].dot(&delta);
            assert!((fd - adj).abs() <= 1e-5 * adj.abs().max(1e-3), "{kind:?}: {fd} vs {adj}");
        }
    }

    #[test]
    fn single_matrix_backward_is_transpose() {
        let d = 3;
        let w_mat = vec![0.2, -0.1, 0.4, 1.0, 0.3, -0.7, 0.05, 0.6, -0.2];
        let net = NetParams::from_parts(BlockKind::MatrixPre(Activation::Identity), d, 1, 1, 1, w_mat.clone(), 0).unwrap();
        let alpha = 0.8;
        let x = State::vector(vec![1.0, 2.0, -1.0]).unwrap();
        let w = State::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let tr = forward_pass(&net, &x, alpha).unwrap();
        let b = backward_pass(&net, &tr, &w, alpha).unwrap();
        // b^0 = (I + alpha W)^T w
        for i in 0..d {
            let mut e = w.as_slice()[i];
            for r in 0..d {
                e += alpha * w_mat[r * d + i] * w.as_slice()[r];
            }
            assert!((b.states[0].as_slice()[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_cotangent_and_structural_zeros() {
        let mut net = random_net(BlockKind::Mlp(Activation::Tanh), 4, 1, 3, 2, 3);
        net.unit_mut(1, 0)[4..].iter_mut().for_each(|v| *v = 0.0);
        let x = State::vector(vec![0.3, -0.2, 0.9, 1.1]).unwrap();
        let tr = forward_pass(&net, &x, 1.0).unwrap();
        let zero = State::zeros(4, 1);
        let b = backward_pass(&net, &tr, &zero, 1.0).unwrap();
        let g = unit_gradients(&net, &tr, &b, 1.0).unwrap();
        assert!(g.raw.iter().all(|&v| v == 0.0));

        let w = State::vector(vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        let b = backward_pass(&net, &tr, &w, 1.0).unwrap();
        let g = unit_gradients(&net, &tr, &b, 1.0).unwrap();
        let p = net.unit_len();
        let start = net.width() * p;
        assert!(g.raw[start..start + 4].iter().all(|&v| v == 0.0));
        assert!(g.raw[start + 4..start + 8].iter().any(|&v| v != 0.0));
        let resc = g.rescaled();
        assert!((resc[start + 4] - g.raw[start + 4] * 6.0).abs() < 1e-15);
    }

    #[test]
    fn unit_gradients_match_finite_differences() {
        let (d, l, m) = (4, 3, 2);
        let data = Dataset::synthetic(d, 1, 2, 4).unwrap();
        let net = random_net(BlockKind::Mlp(Activation::Tanh), d, 1, l, m, 6);
        let alpha = 1.0;
        let pass = batch_pass(&net, &data, alpha).unwrap();
        let grad = full_gradient(&net, &pass, alpha).unwrap();
        let eps = 1e-6;
        let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for c in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[c] += eps;
            let mut minus = net.clone();
            minus.params_mut()[c] -= eps;
            let fd = (mean_loss(&plus, &data, alpha).unwrap() - mean_loss(&minus, &data, alpha).unwrap()) / (2.0 * eps);
            let err = (grad[c] - fd).abs() / grad[c].abs().max(fd.abs()).max(1e-3 * scale);
            assert!(err <= 1e-5, "coord {c}: {} vs {fd}", grad[c]);
        }
        // the batched gradient is the mean of the per-sample ones
        let mut mean = vec![0.0; grad.len()];
        for i in 0..2 {
            let g = unit_gradients(&net, &pass.forward[i], &pass.backward[i], alpha).unwrap();
            mean.iter_mut().zip(&g.raw).for_each(|(a, b)| *a += b / 2.0);
        }
        for (a, b) in mean.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gd_step_with_zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::complete_mlp(3, 2, 2, 1, 4);
        let net = init_net(&cfg).unwrap();
        let inputs = Dataset::synthetic(3, 1, 2, 1).unwrap().inputs().to_vec();
        let targets = inputs.iter().map(|x| forward_pass(&net, x, 1.0).unwrap().output().clone()).collect();
        let data = Dataset::new(inputs, targets).unwrap();
        assert_eq!(gd_step(&net, &data, &cfg).unwrap(), net);
    }

    #[test]
    fn gd_step_on_a_single_unit_matches_hand_formula() {
        let d = 3;
        let mut cfg = TrainConfig::complete_mlp(d, 1, 1, 1, 0);
        cfg.alpha = 2.0;
        cfg.lr_u = 0.7;
        cfg.lr_v = 1.3;
        let (u, v) = ([0.5, -1.0, 2.0], [1.0, 0.25, -0.5]);
        let net = mlp_net([u, v].concat(), d, 1, 1, Activation::Tanh);
        let x = [0.3, 0.6, -0.9];
        let y = [1.0, -1.0, 0.5];
        let data = Dataset::new(vec![State::vector(x.to_vec()).unwrap()], vec![State::vector(y.to_vec()).unwrap()]).unwrap();

        // h = x + alpha v tanh(u.x/D); w = (h - y)/D; grad_z = alpha D2phi^T w;
        // z <- z - lr LM / alpha^2 * grad_z = z - (lr/alpha) D2phi^T w
        let a = (u[0] * x[0] + u[1] * x[1] + u[2] * x[2]) / 3.0;
        let h: Vec<f64> = (0..3).map(|i| x[i] + 2.0 * v[i] * a.tanh()).collect();
        let w: Vec<f64> = (0..3).map(|i| (h[i] - y[i]) / 3.0).collect();
        let vw: f64 = (0..3).map(|i| v[i] * w[i]).sum();
        let du: Vec<f64> = (0..3).map(|i| (1.0 - a.tanh().powi(2)) * vw * x[i] / 3.0).collect();
        let dv: Vec<f64> = (0..3).map(|i| a.tanh() * w[i]).collect();
        let next = gd_step(&net, &data, &cfg).unwrap();
        for i in 0..3 {
            assert!((next.params()[i] - (u[i] - 0.7 / 2.0 * du[i])).abs() < 1e-14);
            assert!((next.params()[3 + i] - (v[i] - 1.3 / 2.0 * dv[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_steps_and_zero_output_scale() {
        let mut cfg = TrainConfig::complete_mlp(5, 4, 2, 0, 3);
        cfg.sigma_v = 0.0;
        let data = config_dataset(&cfg).unwrap();
        let run = train(&cfg, &data).unwrap();
        assert_eq!(run.losses.len(), 1);
        assert_eq!(run.snapshots.keys().copied().collect::<Vec<_>>(), vec![0]);
        let raw: f64 = (0..data.len()).map(|i| data.loss(i, data.input(i))).sum::<f64>() / data.len() as f64;
        assert_eq!(run.losses[0], raw);
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = TrainConfig::complete_mlp(6, 16, 2, 8, 21);
        cfg.snapshots = vec![3];
        let data = config_dataset(&cfg).unwrap();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.snapshot(3).unwrap(), b.snapshot(3).unwrap());
        assert!(a.snapshot(4).is_err());
    }

    #[test]
    fn identity_at_init_shrinks_with_effective_width() {
        let d = 10;
        let data = Dataset::synthetic(d, 1, 10, 0).unwrap();
        let dev = |l: usize, m: usize| -> f64 {
            let mut acc = 0.0;
            for seed in 0..10 {
                let cfg = TrainConfig::complete_mlp(d, l, m, 0, 1000 + seed);
                let net = init_net(&cfg).unwrap();
                for x in data.inputs() {
                    let out = forward_pass(&net, x, 1.0).unwrap();
                    acc += rms_norm(&out.output().sub(x).unwrap()).unwrap();
                }
            }
            acc / 100.0
        };
        let ratio = dev(16, 2) / dev(64, 2);
        assert!((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn branch_multiplier_can_be_absorbed() {
        // alpha phi(x,(u,v)) = phi(x,(u, alpha v)); GD then needs lr_u / alpha^2
        for (act, tol) in [(Activation::Identity, 0.0), (Activation::Tanh, 1e-10)] {
            let mut a = TrainConfig::complete_mlp(5, 8, 2, 12, 31);
            a.activation = act;
            a.alpha = 4.0;
            a.sigma_v = 0.5;
            a.lr_u = 5.0;
            a.lr_v = 5.0;
            let mut b = a.clone();
            b.alpha = 1.0;
            b.sigma_v = 2.0;
            b.lr_u = 5.0 / 16.0;
            let data = config_dataset(&a).unwrap();
            let la = train(&a, &data).unwrap().losses;
            let lb = train(&b, &data).unwrap().losses;
            for (x, y) in la.iter().zip(&lb) {
                if tol == 0.0 {
                    assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs(), "{act:?}: {x} vs {y}");
                } else {
                    assert!((x - y).abs() <= tol, "{act:?}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn explosion_is_reported_with_layer() {
        let kind = BlockKind::MatrixPre(Activation::Identity);
        let net = NetParams::from_parts(kind, 1, 1, 3, 1, vec![1e200; 3], 0).unwrap();
        let x = State::vector(vec![1e200]).unwrap();
        match forward_pass(&net, &x, 3.0) {
            Err(crate::Error::Explosion { layer }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn divergence_carries_the_iteration() {
        let mut cfg = TrainConfig::complete_mlp(4, 2, 1, 50, 3);
        cfg.block = BlockName::MatrixPre;
        cfg.activation = Activation::Identity;
        cfg.lr_u = 1e6;
        cfg.lr_v = 1e6;
        let data = config_dataset(&cfg).unwrap();
        match train(&cfg, &data) {
            Err(crate::Error::Divergence { iteration }) => assert!(iteration >= 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
