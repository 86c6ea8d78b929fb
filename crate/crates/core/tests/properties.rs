use bm2::bm2::{median, Bm2Config};
use bm2::dist::{gaussian_sample, GaussianSpec};
use bm2::flow::{rhs, FlowProblem};
use bm2::metrics::{bw2, stratified_times};
use bm2::net::{read_checkpoint, write_checkpoint, DriftNet, Head, NetSpec};
use bm2::oracle::{gaussian_sb_coupling, mixture_sb_build, pentagon_potential, SbInstance};
use bm2::reference::{RefDynamics, Schedule};
use bm2::rng::RngStream;
use nalgebra::DMatrix;
use ndarray::Array1;
use proptest::prelude::*;

fn spec_1d() -> impl Strategy<Value = GaussianSpec> {
    (-3.0..3.0f64, 0.2..3.0f64).prop_map(|(m, v)| GaussianSpec::isotropic(vec![m], v).unwrap())
}

fn spec_2d() -> impl Strategy<Value = GaussianSpec> {
    (prop::array::uniform2(-3.0..3.0f64), prop::array::uniform4(-1.0..1.0f64)).prop_map(|(m, a)| {
        let l = DMatrix::from_row_slice(2, 2, &a);
        let cov = &l * l.transpose() + DMatrix::identity(2, 2) * 0.2;
        GaussianSpec::from_moments(&nalgebra::DVector::from_column_slice(&m), &cov).unwrap()
    })
}

fn schedule() -> impl Strategy<Value = Schedule> {
    prop_oneof![Just(Schedule::constant()), (0.05..1.0f64).prop_map(|a| Schedule::linear_ramp(a).unwrap())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bridge_is_pinned_at_the_ends(
        x0 in prop::collection::vec(-10.0..10.0f64, 3),
        x1 in prop::collection::vec(-10.0..10.0f64, 3),
        sigma in 0.05..5.0f64,
        sched in schedule(),
        seed in any::<u64>(),
    ) {
        let d = RefDynamics::new(sigma, sched).unwrap();
        let mut rng = RngStream::from_seed(seed);
        prop_assert_eq!(d.bridge_sample(&x0, &x1, 0.0, &mut rng).unwrap(), x0.clone());
        prop_assert_eq!(d.bridge_sample(&x0, &x1, 1.0, &mut rng).unwrap(), x1);
    }

    #[test]
    fn bridge_weights_sum_to_one(t in 0.0..=1.0f64, sigma in 0.05..5.0f64, sched in schedule()) {
        let d = RefDynamics::new(sigma, sched).unwrap();
        let (w0, w1, var) = d.bridge_coefficients(t, sigma);
        prop_assert!((w0 + w1 - 1.0).abs() < 1e-12);
        prop_assert!((var - sigma * sigma * w0 * w1).abs() < 1e-12);
        prop_assert!(var >= 0.0);
    }

    #[test]
    fn targets_point_at_the_pinned_endpoint(
        xt in prop::collection::vec(-5.0..5.0f64, 2),
        x0 in prop::collection::vec(-5.0..5.0f64, 2),
        x1 in prop::collection::vec(-5.0..5.0f64, 2),
        t in 0.01..0.99f64,
        sigma in 0.1..3.0f64,
    ) {
        // constant schedule: following the target for the remaining time lands on x1
        let d = RefDynamics::constant(sigma).unwrap();
        let f = d.fwd_drift_target(&xt, t, &x1).unwrap();
        let b = d.bwd_drift_target(&xt, t, &x0).unwrap();
        for i in 0..2 {
            prop_assert!((xt[i] + (1.0 - t) * f[i] - x1[i]).abs() < 1e-9);
            prop_assert!((xt[i] + t * b[i] - x0[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn split_streams_are_reproducible(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let root = RngStream::from_seed(seed);
        let a: Vec<f64> = { let mut r = root.split(&label); (0..8).map(|_| r.normal()).collect() };
        let b: Vec<f64> = { let mut r = root.split(&label); (0..8).map(|_| r.normal()).collect() };
        let c: Vec<f64> = { let mut r = root.split(&format!("{label}x")); (0..8).map(|_| r.normal()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn sampling_is_seed_deterministic(spec in spec_2d(), seed in any::<u64>()) {
        let a = gaussian_sample(&spec, 16, &mut RngStream::from_seed(seed)).unwrap();
        let b = gaussian_sample(&spec, 16, &mut RngStream::from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bw2_is_a_symmetric_premetric(a in spec_2d(), b in spec_2d()) {
        let ab = bw2(&a, &b).unwrap();
        let ba = bw2(&b, &a).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
        prop_assert!(bw2(&a, &a).unwrap().abs() < 1e-10);
        // the mean part is exact
        let mean_gap: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
        prop_assert!(ab >= mean_gap - 1e-9);
    }

    #[test]
    fn gaussian_coupling_has_the_right_marginals(a in spec_2d(), b in spec_2d(), eps in 0.05..10.0f64) {
        let inst = gaussian_sb_coupling(&a, &b, eps).unwrap();
        let (gain, offset, cov) = inst.conditional_map();
        let s0 = a.cov_matrix();
        let m1 = gain * a.mean_vector() + offset;
        let s1 = gain * &s0 * gain.transpose() + cov;
        prop_assert!((m1 - b.mean_vector()).amax() < 1e-8);
        prop_assert!((s1 - b.cov_matrix()).amax() < 1e-8);
        prop_assert!((inst.cross_cov() - &s0 * gain.transpose()).amax() < 1e-8);
    }

    #[test]
    fn gaussian_drift_at_t0_maps_means(a in spec_1d(), b in spec_1d(), eps in 0.1..5.0f64) {
        // E[mu(X0, 0)] = E[X1] - E[X0] for the optimal forward drift
        let inst = gaussian_sb_coupling(&a, &b, eps).unwrap();
        let drift = inst.sb_optimal_drift(&[a.mean[0]], 0.0).unwrap()[0];
        prop_assert!((drift - (b.mean[0] - a.mean[0])).abs() < 1e-8);
    }

    #[test]
    fn mixture_weights_form_a_distribution(x in prop::array::uniform2(-50.0..50.0f64), radius in 0.5..6.0f64, var in 0.05..2.0f64) {
        let inst = mixture_sb_build(&GaussianSpec::standard(2), &pentagon_potential(radius, var).unwrap(), 1.0).unwrap();
        let w = inst.conditional_weights(&x);
        prop_assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flow_fixed_point_at_the_bridge(mu0 in -3.0..3.0f64, mu1 in -3.0..3.0f64, v0 in 0.3..3.0f64, v1 in 0.3..3.0f64, sigma in 0.5..2.0f64) {
        let p = FlowProblem::new(mu0, v0, mu1, v1, sigma).unwrap();
        let r = rhs(&p.analytic_state().unwrap(), &p).unwrap();
        let norm = r.rates.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm < 1e-7, "norm {}", norm);
        prop_assert!(r.residual < 1e-7);
    }

    #[test]
    fn stratified_times_are_interior_and_sorted(n in 1usize..200, clip in 0.0001..0.4f64) {
        let t = stratified_times(n, clip);
        prop_assert_eq!(t.len(), n);
        prop_assert!(t.iter().all(|s| *s > clip && *s < 1.0 - clip));
        prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn median_splits_the_sample(xs in prop::collection::vec(-1e3..1e3f64, 1..50)) {
        let m = median(&xs);
        let below = xs.iter().filter(|x| **x < m).count();
        let above = xs.iter().filter(|x| **x > m).count();
        prop_assert!(below <= xs.len() / 2 && above <= xs.len() / 2);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), width in 1usize..12, layers in 1usize..4, dim in 1usize..4) {
        let mut net = DriftNet::<f32>::init(NetSpec::joint(dim, width, layers), &mut RngStream::from_seed(seed)).unwrap();
        let mut rng = RngStream::from_seed(seed ^ 1);
        for v in net.params_mut().iter_mut() {
            *v = rng.normal() as f32;
        }
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back: DriftNet<f32> = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.spec(), net.spec());
        prop_assert_eq!(back.params(), net.params());
    }

    #[test]
    fn heads_own_disjoint_output_blocks(width in 1usize..16, layers in 1usize..4, dim in 1usize..5) {
        let spec = NetSpec::joint(dim, width, layers);
        let f = spec.head_param_indices(Head::Forward);
        let b = spec.head_param_indices(Head::Backward);
        prop_assert_eq!(f.len(), (width + 1) * dim);
        prop_assert_eq!(b.len(), (width + 1) * dim);
        prop_assert!(f.iter().all(|i| !b.contains(i) && *i < spec.param_count()));
    }

    #[test]
    fn fresh_network_outputs_zero(seed in any::<u64>(), dim in 1usize..4, n in 1usize..10) {
        let net = DriftNet::<f64>::init(NetSpec::joint(dim, 8, 2), &mut RngStream::from_seed(seed)).unwrap();
        let x = ndarray::Array2::from_elem((n, dim), 0.3);
        let (f, b) = net.forward(x.view(), Array1::from_elem(n, 0.4).view(), None).unwrap();
        prop_assert!(f.iter().chain(b.iter()).all(|v| *v == 0.0));
    }
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<Bm2Config>(r#"{"steps": 3, "stepz": 4}"#).unwrap_err();
    assert!(err.to_string().contains("stepz"));
    let cfg: Bm2Config = serde_json::from_str(r#"{"steps": 3}"#).unwrap();
    assert_eq!(cfg.steps, 3);
    assert_eq!(cfg.batch_size, Bm2Config::default().batch_size);
}
