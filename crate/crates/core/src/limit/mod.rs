//! Surrogates for the infinite-depth limits: a large reference ResNet for the
//! mean ODE, tracer particles coupled to a finite net's initialization, and
//! the linearized (lazy) network.

mod lazy;
mod reference;
mod tracers;

pub use lazy::{
    lazy_backward, lazy_forward, lazy_gradient, train_lazy, train_lazy_from, LazyParams, LazyRun,
};
pub use reference::{
    build_reference, build_reference_from, reference_config, reference_side, IterationFields,
    LimitFields, ReferenceModel, RESOLUTION_RATIO,
};
pub use tracers::{evolve_tracers, trace_tracers, TracerSet};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{block_apply, Activation, BlockKind};
    use crate::resnet::{forward_pass, init_net, train, Dataset, NetParams, TrainConfig};
    use crate::rng::{gaussian_sample, SeedPath};
    use crate::tensor::{rms_norm, State};

    fn small(dim: usize, depth: usize, width: usize, steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::complete_mlp(dim, depth, width, steps, seed);
        c.samples = 3;
        c
    }

    fn data(c: &TrainConfig) -> Dataset {
        Dataset::synthetic(c.dim, c.tokens, c.samples, c.data_seed).unwrap()
    }

    #[test]
    fn untrained_reference_without_output_weights_is_identity() {
        let mut c = small(4, 2, 1, 0, 3);
        c.sigma_v = 0.0;
        let d = data(&c);
        let r = build_reference(&c, &d, 8, 4).unwrap();
        let w = State::vector(vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        for x in d.inputs() {
            let f = r.query_limit_fields(0, x, Some(&w)).unwrap();
            assert!(f.forward.states.iter().all(|h| h == x));
            assert!(f.backward.unwrap().states.iter().all(|b| b == &w));
        }
    }

    #[test]
    fn fields_at_the_end_match_output_and_loss_gradient() {
        let c = small(3, 2, 1, 2, 5);
        let d = data(&c);
        let r = build_reference(&c, &d, 8, 4).unwrap();
        let net = r.snapshot(2).unwrap();
        for (i, x) in d.inputs().iter().enumerate() {
            let f = r.query_limit_fields(2, x, None).unwrap();
            let out = forward_pass(net, x, c.alpha).unwrap();
            assert_eq!(f.forward.output(), out.output());
            let b = f.backward.unwrap();
            assert_eq!(b.states[r.depth()], d.loss_grad(i, out.output()));
        }
    }

    #[test]
    fn unseen_inputs_need_a_snapshot() {
        let mut c = small(3, 2, 1, 3, 5);
        c.snapshots = vec![1];
        let d = data(&c);
        let r = build_reference(&c, &d, 8, 4).unwrap();
        let x = State::vector(vec![0.1, 0.2, 0.3]).unwrap();
        assert!(r.query_limit_fields(1, &x, None).unwrap().backward.is_none());
        assert!(matches!(r.query_limit_fields(2, &x, None), Err(crate::Error::Unrecorded(2))));
        assert!(r.query_limit_fields(2, d.input(0), None).is_ok());
        assert!(matches!(r.query_limit_fields(4, d.input(0), None), Err(crate::Error::Unrecorded(4))));
    }

    #[test]
    fn reference_must_be_much_larger() {
        let c = small(3, 8, 2, 0, 1);
        let d = data(&c);
        assert!(build_reference(&c, &d, 16, 15).is_err());
        let r = build_reference(&c, &d, 16, 16).unwrap();
        assert!(r.check_resolves(8, 2).is_ok());
        assert!(r.check_resolves(8, 3).is_err());
        assert_eq!(reference_side(300, 256 * 64), 512);
        assert_eq!(reference_side(300, 512), 300);
    }

    #[test]
    fn reference_seed_is_independent_of_the_finite_net() {
        let c = small(3, 2, 1, 0, 9);
        let rc = reference_config(&c, 8, 4);
        assert_ne!(rc.seed, c.seed);
        assert_eq!((rc.depth, rc.width, rc.alpha, rc.lr_u), (8, 4, c.alpha, c.lr_u));
    }

    #[test]
    fn tracers_start_coupled_and_ignore_zero_loss_gradient() {
        let mut c = small(3, 2, 1, 1, 2);
        c.sigma_v = 0.0;
        let inputs = Dataset::synthetic(3, 1, 2, 0).unwrap().inputs().to_vec();
        let d = Dataset::new(inputs.clone(), inputs).unwrap();
        let r = build_reference(&c, &d, 8, 4).unwrap();
        let net = init_net(&c).unwrap();
        let t0 = TracerSet::from_net(&net);
        assert_eq!(t0.params(), &net);
        assert_eq!(t0.len(), 2);
        let t1 = evolve_tracers(&t0, &r).unwrap();
        assert_eq!(t1.params().params(), net.params());
        assert_eq!(t1.iteration(), 1);
    }

    #[test]
    fn single_tracer_update_matches_hand_formula() {
        let mut c = small(2, 1, 1, 1, 4);
        c.activation = Activation::Identity;
        c.samples = 1;
        c.alpha = 2.0;
        c.lr_u = 0.3;
        c.lr_v = 0.7;
        let d = data(&c);
        let r = build_reference(&c, &d, 4, 4).unwrap();
        let z = vec![0.5, -1.0, 2.0, 0.25];
        let net = NetParams::from_parts(c.kind(), 2, 1, 1, 1, z.clone(), 0).unwrap();
        let t1 = evolve_tracers(&TracerSet::from_net(&net), &r).unwrap();

        let f = r.query_limit_fields(0, d.input(0), None).unwrap();
        let h = f.forward.states[0].as_slice();
        let b = f.backward.unwrap().states[1].as_slice().to_vec();
        let a = (z[0] * h[0] + z[1] * h[1]) / 2.0;
        let vb = z[2] * b[0] + z[3] * b[1];
        let expect = [
            z[0] - 0.3 / 2.0 * vb * h[0] / 2.0,
            z[1] - 0.3 / 2.0 * vb * h[1] / 2.0,
            z[2] - 0.7 / 2.0 * a * b[0],
            z[3] - 0.7 / 2.0 * a * b[1],
        ];
        for (got, want) in t1.params().params().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn tracers_need_recorded_fields() {
        let c = small(3, 2, 1, 1, 2);
        let d = data(&c);
        let r = build_reference(&c, &d, 8, 4).unwrap();
        let net = init_net(&c).unwrap();
        assert_eq!(trace_tracers(&net, &r, 1).unwrap().len(), 2);
        assert!(trace_tracers(&net, &r, 2).is_err());
    }

    fn lazy_net(act: Activation, seed: u64) -> NetParams {
        let mut c = small(3, 3, 2, 0, seed);
        c.activation = act;
        init_net(&c).unwrap()
    }

    fn random_zeta(n: usize, seed: u64) -> Vec<f64> {
        gaussian_sample(&SeedPath::new(seed), n, 1.0).unwrap()
    }

    #[test]
    fn zero_displacement_is_identity() {
        let p = LazyParams::new(lazy_net(Activation::Tanh, 1)).unwrap();
        let x = State::vector(vec![0.3, -0.2, 1.0]).unwrap();
        let f = lazy_forward(&p, &x).unwrap();
        assert!(f.states.iter().all(|h| h == &x));
    }

    #[test]
    fn lazy_increment_is_linear_in_zeta() {
        let net = lazy_net(Activation::Identity, 2);
        let zeta = random_zeta(net.params().len(), 5);
        let twice: Vec<f64> = zeta.iter().map(|z| 2.0 * z).collect();
        let x = State::vector(vec![0.3, -0.2, 1.0]).unwrap();
        let one = lazy_forward(&LazyParams::with_zeta(net.clone(), zeta).unwrap(), &x).unwrap();
        let two = lazy_forward(&LazyParams::with_zeta(net, twice).unwrap(), &x).unwrap();
        let inc1 = one.states[1].sub(&x).unwrap();
        let inc2 = two.states[1].sub(&x).unwrap();
        for (a, b) in inc1.as_slice().iter().zip(inc2.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lazy_layer_matches_finite_difference_of_block() {
        let net = lazy_net(Activation::Tanh, 3);
        let zeta = random_zeta(net.params().len(), 6);
        let p = LazyParams::with_zeta(net.clone(), zeta.clone()).unwrap();
        let x = State::vector(vec![0.3, -0.2, 1.0]).unwrap();
        let inc = lazy_forward(&p, &x).unwrap().states[1].sub(&x).unwrap();
        let eps = 1e-6;
        let mut fd = vec![0.0; 3];
        for j in 0..net.width() {
            let z = net.unit(0, j);
            let dz = &zeta[j * 6..(j + 1) * 6];
            let plus: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + eps * b).collect();
            let minus: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a - eps * b).collect();
            let hp = block_apply(net.kind(), &x, &plus).unwrap();
            let hm = block_apply(net.kind(), &x, &minus).unwrap();
            for i in 0..3 {
                fd[i] += (hp.as_slice()[i] - hm.as_slice()[i]) / (2.0 * eps) / net.units() as f64;
            }
        }
        for (a, b) in inc.as_slice().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn lazy_gradient_matches_finite_differences() {
        for kind in [
            BlockKind::Mlp(Activation::Tanh),
            BlockKind::MatrixPre(Activation::Tanh),
            BlockKind::MatrixPost(Activation::Tanh),
        ] {
            let (dim, depth, width) = (3, 3, 2);
            let p = kind.param_len(dim);
            let frozen = NetParams::from_parts(
                kind,
                dim,
                1,
                depth,
                width,
                random_zeta(depth * width * p, 11),
                0,
            )
            .unwrap();
            let zeta = random_zeta(depth * width * p, 12);
            let d = Dataset::synthetic(dim, 1, 2, 4).unwrap();
            let lp = LazyParams::with_zeta(frozen.clone(), zeta.clone()).unwrap();
            let (_, grad) = lazy_gradient(&lp, &d).unwrap();
            let eps = 1e-6;
            for idx in 0..zeta.len() {
                let mut zp = zeta.clone();
                zp[idx] += eps;
                let mut zm = zeta.clone();
                zm[idx] -= eps;
                let lp_ = lazy_gradient(&LazyParams::with_zeta(frozen.clone(), zp).unwrap(), &d).unwrap().0;
                let lm_ = lazy_gradient(&LazyParams::with_zeta(frozen.clone(), zm).unwrap(), &d).unwrap().0;
                let fd = (lp_ - lm_) / (2.0 * eps);
                let rel = (grad[idx] - fd).abs() / (fd.abs().max(grad[idx].abs()).max(1e-8));
                assert!(rel < 1e-5, "{kind:?} coord {idx}: {} vs {fd}", grad[idx]);
            }
        }
    }

    #[test]
    fn lazy_backward_is_the_adjoint() {
        let net = lazy_net(Activation::Tanh, 8);
        let zeta = random_zeta(net.params().len(), 9);
        let p = LazyParams::with_zeta(net, zeta).unwrap();
        let x = State::vector(vec![0.3, -0.2, 1.0]).unwrap();
        let dx = State::vector(vec![1.0, 0.5, -0.25]).unwrap();
        let w = State::vector(vec![-0.4, 0.9, 0.2]).unwrap();
        let trace = lazy_forward(&p, &x).unwrap();
        let b0 = &lazy_backward(&p, &trace, &w).unwrap().states[0];
        let eps = 1e-6;
        let at = |s: f64| {
            let xs = State::vector(x.as_slice().iter().zip(dx.as_slice()).map(|(a, b)| a + s * b).collect()).unwrap();
            lazy_forward(&p, &xs).unwrap().output().dot(&w)
        };
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        assert!((b0.dot(&dx) - fd).abs() < 1e-8, "{} vs {fd}", b0.dot(&dx));
    }

    #[test]
    fn lazy_needs_a_centered_tangent_block() {
        let mut c = small(3, 2, 1, 0, 1);
        c.block = crate::resnet::BlockName::MatrixPost;
        c.activation = Activation::Softplus;
        let net = init_net(&c).unwrap();
        assert!(matches!(LazyParams::new(net), Err(crate::Error::Config { .. })));
        c.block = crate::resnet::BlockName::Attention;
        c.tokens = 2;
        assert!(LazyParams::new(init_net(&c).unwrap()).is_err());
    }

    #[test]
    fn lazy_run_without_steps_stays_at_zero() {
        let c = small(3, 2, 2, 0, 1);
        let d = data(&c);
        let run = train_lazy(&c, &d).unwrap();
        let p = run.params(0).unwrap();
        assert!(p.zeta().iter().all(|&z| z == 0.0));
        assert_eq!(lazy_forward(&p, d.input(0)).unwrap().output(), d.input(0));
        assert_eq!(run.losses.len(), 1);
    }

    #[test]
    fn lazy_training_lowers_the_loss() {
        let mut c = small(4, 4, 2, 20, 1);
        c.sigma_v = 1.0;
        let d = data(&c);
        let run = train_lazy(&c, &d).unwrap();
        assert!(run.losses[20] < run.losses[0]);
    }

    #[test]
    fn deterministic_init_converges_at_first_order() {
        // every unit starts from the same draw, so there is no sampling error
        let (dim, width, steps) = (4, 1, 5);
        let mut c = small(dim, 1, width, steps, 21);
        c.sigma_v = 0.0;
        let d = data(&c);
        let z0 = init_net(&c).unwrap().unit(0, 0).to_vec();
        let tied = |depth: usize| {
            let params = (0..depth).flat_map(|_| z0.clone()).collect();
            NetParams::from_parts(c.kind(), dim, 1, depth, width, params, 21).unwrap()
        };
        let l_ref = 4096;
        let rc = TrainConfig { depth: l_ref, ..c.clone() };
        let r = build_reference_from(tied(l_ref), &rc, &d).unwrap();
        let depths = [4usize, 8, 16, 32];
        let mut errs = Vec::new();
        for &l in &depths {
            let fc = TrainConfig { depth: l, ..c.clone() };
            let run = crate::resnet::train_from(tied(l), &fc, &d, &mut crate::resnet::GradientDescent, |_, _, _| Ok(())).unwrap();
            let net = run.snapshot(steps).unwrap();
            let mut e = 0.0;
            for x in d.inputs() {
                let h = forward_pass(net, x, c.alpha).unwrap();
                let hr = r.query_limit_fields(steps, x, None).unwrap();
                e += rms_norm(&h.output().sub(hr.forward.output()).unwrap()).unwrap();
            }
            errs.push(e / d.len() as f64);
        }
        let xs: Vec<f64> = depths.iter().map(|&l| (l as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let slope = crate::experiments::log_log_slope(&xs, &ys);
        assert!((-1.1..=-0.9).contains(&slope), "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn training_the_reference_reduces_loss() {
        let c = small(3, 2, 1, 5, 1);
        let run = train(&reference_config(&c, 8, 4), &data(&c)).unwrap();
        assert!(run.losses[5] < run.losses[0]);
    }
}
