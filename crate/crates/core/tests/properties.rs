use proptest::prelude::*;
use statrs::function::erf::erf;

use thetafit::autodiff::{Real, Tape, Var};
use thetafit::evaluate::{kolmogorov_survival, ks_two_sample, r2};
use thetafit::forecast::{mc_forecast, normal_quantile};
use thetafit::likelihood::{regression_nll_2d, sde_quasi_nll};
use thetafit::models::{builtin_sde, sigma_ou, RegressionCaseSpec, SdeCoefficients};
use thetafit::neuralnet::{
    apply_heads, mlp_forward, mlp_init, parse_weights, theta_at, write_weights, HeadKind, MlpSpec, Weights, WeightsMeta,
};
use thetafit::simulate::{FnTheta, RegressionDataset, Rng, Trajectory};
use thetafit::train::{loss_and_gradient, loss_fn};

/// One node of a random expression: an op code and two operand picks.
#[derive(Debug, Clone, Copy)]
struct Step {
    op: u8,
    a: usize,
    b: usize,
}

fn steps() -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec((0u8..15, any::<usize>(), any::<usize>()), 1..=8)
        .prop_map(|v| v.into_iter().map(|(op, a, b)| Step { op, a, b }).collect())
}

/// Builds a chain where each node uses the previous one, keeping every
/// argument at least 0.1 away from a domain boundary or kink.
fn build<S: Real>(leaves: &[S], plan: &[Step]) -> S {
    let mut nodes: Vec<S> = leaves.to_vec();
    for s in plan {
        let x = *nodes.last().unwrap();
        let y = nodes[s.b % nodes.len()];
        let other = nodes[s.a % nodes.len()];
        let xv = x.value();
        let next = match s.op {
            0 => x + y,
            1 => x - y,
            2 if (xv * y.value()).abs() < 1e3 => x * y,
            3 if y.value().abs() > 0.1 && (xv / y.value()).abs() < 1e3 => x / y,
            4 => -x,
            5 if xv > 0.1 => x.try_ln().unwrap(),
            6 if xv < 3.0 => x.exp(),
            7 => x.sin(),
            8 => x.cos(),
            9 if xv > 0.1 => x.try_sqrt().unwrap(),
            10 => x.tanh(),
            11 => x.softplus(),
            12 if xv.abs() < 30.0 => x.square(),
            13 if xv.abs() > 0.1 => x.abs(),
            14 if xv.abs() > 0.1 => x.relu() + other,
            _ => x + other * 0.5,
        };
        nodes.push(next);
    }
    *nodes.last().unwrap()
}

fn close(g: f64, fd: f64, rel: f64) -> bool {
    (g - fd).abs() <= rel * g.abs().max(fd.abs()) + 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_graph_gradients_match_finite_differences(
        plan in steps(),
        x in prop::array::uniform3(0.5f64..2.0),
    ) {
        let tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| tape.var(v)).collect();
        let root = build(&leaves, &plan);
        let grad = tape.backward(root.node());
        let plain = build(&x, &plan);
        prop_assert_eq!(plain, root.value());
        for i in 0..3 {
            let h = 1e-6;
            let (mut hi, mut lo) = (x, x);
            hi[i] += h;
            lo[i] -= h;
            let fd = (build(&hi, &plan) - build(&lo, &plan)) / (2.0 * h);
            let g = grad.wrt(leaves[i].node());
            prop_assert!(close(g, fd, 1e-5), "leaf {}: ad {} fd {} plan {:?}", i, g, fd, plan);
        }
    }

    #[test]
    fn adjoints_are_linear(
        f in steps(),
        g in steps(),
        x in prop::array::uniform3(0.5f64..2.0),
    ) {
        let tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| tape.var(v)).collect();
        let a = build(&leaves, &f);
        let b = build(&leaves, &g);
        let sum = a + b;
        let (ga, gb, gs) = (tape.backward(a.node()), tape.backward(b.node()), tape.backward(sum.node()));
        for l in &leaves {
            let expect = ga.wrt(l.node()) + gb.wrt(l.node());
            prop_assert!(close(gs.wrt(l.node()), expect, 1e-12));
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical(plan in steps(), x in prop::array::uniform3(0.5f64..2.0)) {
        let tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|&v| tape.var(v)).collect();
        let root = build(&leaves, &plan);
        let first = tape.backward(root.node()).collect(&leaves.iter().map(|l| l.node()).collect::<Vec<_>>());
        let second = tape.backward(root.node()).collect(&leaves.iter().map(|l| l.node()).collect::<Vec<_>>());
        prop_assert_eq!(first, second);
        prop_assert_eq!(tape.reevaluate(), tape.values());
    }
}

fn random_traj(seed: u64, len: usize, h: f64) -> Trajectory {
    let mut rng = Rng::new(seed, 1);
    let mut v = vec![1.0];
    for _ in 1..len {
        let last = *v.last().unwrap();
        v.push(last + 0.3 * h.sqrt() * rng.standard_normal());
    }
    Trajectory::scalar(h, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diffusion_sign_flip_leaves_the_loss_unchanged(seed in any::<u64>(), scale in 0.1f64..3.0) {
        let model = builtin_sde("ex2").unwrap();
        let traj = random_traj(seed, 30, 0.01);
        let idx: Vec<usize> = (0..29).collect();
        let pos: f64 = sde_quasi_nll(&model.coeffs, &traj, &idx, |k| vec![scale * (1.0 + traj.time(k))]).unwrap();
        let neg: f64 = sde_quasi_nll(&model.coeffs, &traj, &idx, |k| vec![-scale * (1.0 + traj.time(k))]).unwrap();
        prop_assert_eq!(pos, neg);
    }

    #[test]
    fn losses_decompose_over_disjoint_index_sets(seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 40)) {
        let model = builtin_sde("ex3").unwrap();
        let traj = random_traj(seed, 41, 0.01);
        let (a, b): (Vec<usize>, Vec<usize>) = (0..40).partition(|&k| mask[k]);
        prop_assume!(!a.is_empty() && !b.is_empty());
        let th = |k: usize| vec![0.3 + (k as f64).sin()];
        let la: f64 = sde_quasi_nll(&model.coeffs, &traj, &a, th).unwrap();
        let lb: f64 = sde_quasi_nll(&model.coeffs, &traj, &b, th).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let lab: f64 = sde_quasi_nll(&model.coeffs, &traj, &all, th).unwrap();
        prop_assert!((la + lb - lab).abs() <= 1e-10 * lab.abs().max(1.0));

        let mut rng = Rng::new(seed, 2);
        let data = RegressionDataset {
            times: (0..40).map(|k| k as f64 * 0.1).collect(),
            obs: (0..40).map(|_| [rng.standard_normal(), rng.standard_normal()]).collect(),
        };
        let rt = |k: usize| vec![0.1, -0.2, 1.0 + 0.01 * k as f64, 0.8, 0.3];
        let ra: f64 = regression_nll_2d(&data, &a, rt).unwrap();
        let rb: f64 = regression_nll_2d(&data, &b, rt).unwrap();
        let rab: f64 = regression_nll_2d(&data, &all, rt).unwrap();
        prop_assert!((ra + rb - rab).abs() <= 1e-10 * rab.abs().max(1.0));
    }

    #[test]
    fn subset_gradient_is_the_sum_of_term_gradients(seed in any::<u64>(), pick in prop::collection::vec(0usize..30, 1..12)) {
        let model = builtin_sde("ex1").unwrap();
        let traj = random_traj(seed, 31, 0.02);
        let spec = MlpSpec::new(vec![1, 4, 1], vec![HeadKind::AbsSquareInLoss]).unwrap();
        let mut w = mlp_init(&spec, seed);
        w.0[spec.output_bias_index(0)] = 0.5;
        let mut idx = pick;
        idx.sort_unstable();
        idx.dedup();
        let builder = loss_fn(|_t, wv, ix| sde_quasi_nll(&model.coeffs, &traj, ix, |k| theta_at(&spec, wv, traj.time(k))));
        let (v, g) = loss_and_gradient(&w.0, &idx, &builder, true).unwrap();
        let mut vs = 0.0;
        let mut gs = vec![0.0; g.len()];
        for &k in &idx {
            let (vk, gk) = loss_and_gradient(&w.0, &[k], &builder, true).unwrap();
            vs += vk;
            for (a, b) in gs.iter_mut().zip(gk) {
                *a += b;
            }
        }
        prop_assert!((v - vs).abs() <= 1e-10 * v.abs().max(1.0));
        for (a, b) in g.iter().zip(&gs) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn weights_files_round_trip(
        hidden in prop::collection::vec(1usize..6, 0..3),
        heads in prop::collection::vec(0u8..3, 1..4),
        seed in any::<u64>(),
        scale in 0.01f64..10.0,
    ) {
        let heads: Vec<HeadKind> = heads
            .into_iter()
            .map(|h| [HeadKind::Identity, HeadKind::AbsSquareInLoss, HeadKind::TanhCorrelation][h as usize])
            .collect();
        let mut widths = vec![1];
        widths.extend(&hidden);
        widths.push(heads.len());
        let spec = MlpSpec::new(widths, heads).unwrap().with_input_scale(scale).unwrap();
        let mut rng = Rng::new(seed, 0);
        let w = Weights((0..spec.param_count()).map(|_| rng.standard_normal() * 1e3f64.powf(rng.uniform_range(-3.0, 3.0))).collect());
        let meta = WeightsMeta { epoch: Some(7), loss: Some(-1.25) };
        let (spec2, w2, meta2) = parse_weights(&write_weights(&spec, &w, &meta)).unwrap();
        prop_assert_eq!(spec2, spec);
        prop_assert_eq!(w2, w);
        prop_assert_eq!(meta2, meta);
    }

    #[test]
    fn trajectory_csv_round_trips(values in prop::collection::vec(-1e6f64..1e6, 2..50), h in 1e-5f64..1.0) {
        let t = Trajectory::scalar(h, values).unwrap();
        let back = Trajectory::from_csv(&t.to_csv()).unwrap();
        prop_assert_eq!(back.column(), t.column());
        prop_assert!((back.step() - h).abs() <= 1e-14 * h);
        for k in 0..t.len() {
            prop_assert!((back.time(k) - t.time(k)).abs() <= 1e-14 * t.time(k).max(1.0));
        }
    }

    #[test]
    fn correlation_head_stays_inside_the_unit_interval(raw in prop::num::f64::NORMAL) {
        let out = apply_heads(&[raw], &[HeadKind::TanhCorrelation])[0];
        prop_assert!(out.abs() < 1.0);
        prop_assert!(HeadKind::TanhCorrelation.report(raw).abs() < 1.0);
    }

    #[test]
    fn relu_network_is_locally_linear(seed in any::<u64>(), t in 0.0f64..3.0) {
        let spec = MlpSpec::four_layer(6, vec![HeadKind::Identity]).unwrap();
        let w = mlp_init(&spec, seed);
        let d = 1e-7;
        let f = |t: f64| mlp_forward(&spec, &w.0, t)[0];
        let (a, b, c) = (f(t), f(t + d), f(t + 2.0 * d));
        prop_assert!((a - 2.0 * b + c).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ks_is_invariant_under_increasing_maps(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let map = |v: &[f64]| v.iter().map(|x| x.powi(3) + 2.0 * x + x.exp()).collect::<Vec<_>>();
        let r = ks_two_sample(&a, &b).unwrap();
        let m = ks_two_sample(&map(&a), &map(&b)).unwrap();
        prop_assert_eq!(r.d, m.d);
        prop_assert!((0.0..=1.0).contains(&r.d) && (0.0..=1.0).contains(&r.p));
    }

    #[test]
    fn kolmogorov_tail_is_monotone(l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(kolmogorov_survival(lo) >= kolmogorov_survival(hi));
    }

    #[test]
    fn r2_is_affine_invariant(
        y in prop::collection::vec(-10.0f64..10.0, 3..30),
        noise in prop::collection::vec(-1.0f64..1.0, 30),
        c in 0.01f64..100.0,
        d in -100.0f64..100.0,
    ) {
        let y_hat: Vec<f64> = y.iter().zip(&noise).map(|(a, e)| a + e).collect();
        let base = match r2(&y, &y_hat) {
            Ok(v) => v,
            Err(_) => return Ok(()),
        };
        prop_assert!(base <= 1.0);
        let ty: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        let th: Vec<f64> = y_hat.iter().map(|v| c * v + d).collect();
        let moved = r2(&ty, &th).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * base.abs().max(1.0));
    }

    #[test]
    fn quantile_round_trips_through_the_erf_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
        let q = normal_quantile(p).unwrap();
        let cdf = 0.5 * (1.0 + erf(q / std::f64::consts::SQRT_2));
        prop_assert!((cdf - p).abs() <= 1e-8 * p.min(1.0 - p).max(1e-3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wider_coverage_nests_intervals(seed in any::<u64>(), a1 in 0.05f64..0.99, a2 in 0.05f64..0.99, x0 in -2.0f64..2.0) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let model = builtin_sde("ex1").unwrap();
        let th = FnTheta(|t: f64| vec![sigma_ou(t)]);
        let f = mc_forecast(&model.coeffs, &th, x0, 0.3, 25, 0.002, lo, &mut Rng::new(seed, 0)).unwrap();
        let g = mc_forecast(&model.coeffs, &th, x0, 0.3, 25, 0.002, hi, &mut Rng::new(seed, 0)).unwrap();
        for k in 0..25 {
            prop_assert!(g.lower[k] <= f.lower[k] && f.upper[k] <= g.upper[k]);
            prop_assert!(f.lower[k] <= f.centers[k] && f.centers[k] <= f.upper[k]);
        }
    }

    #[test]
    fn forecasts_have_the_prefix_property(seed in any::<u64>(), n in 1usize..40, extra in 0usize..40) {
        let model = builtin_sde("ex3").unwrap();
        let th = FnTheta(|t: f64| model.coeffs.true_theta(t).unwrap());
        let long = mc_forecast(&model.coeffs, &th, 1.2, 0.0, n + extra, 0.01, 0.9, &mut Rng::new(seed, 0)).unwrap();
        let short = mc_forecast(&model.coeffs, &th, 1.2, 0.0, n, 0.01, 0.9, &mut Rng::new(seed, 0)).unwrap();
        prop_assert_eq!(long.truncated(n), short);
    }

    #[test]
    fn interval_scales_ignore_the_diffusion_sign(seed in any::<u64>()) {
        let model = builtin_sde("ex1").unwrap();
        let pos = FnTheta(|t: f64| vec![sigma_ou(t)]);
        let neg = FnTheta(|t: f64| vec![-sigma_ou(t)]);
        let f = mc_forecast(&model.coeffs, &pos, 0.7, 0.0, 30, 0.01, 0.95, &mut Rng::new(seed, 0)).unwrap();
        let g = mc_forecast(&model.coeffs, &neg, 0.7, 0.0, 30, 0.01, 0.95, &mut Rng::new(seed, 0)).unwrap();
        prop_assert_eq!(f.scales, g.scales);
    }
}

#[test]
fn regression_heads_match_the_case_layout() {
    assert_eq!(RegressionCaseSpec::heads().len(), 5);
}
