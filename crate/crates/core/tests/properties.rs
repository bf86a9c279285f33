use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smr_lab::etc::{perturb_samples, simulate_etc, trigger_check, EtcPlant, SimGrid};
use smr_lab::nss::{make_sine_task, perturb_grid, ModelConfig, NssModel};
use smr_lab::pendulum::{render_frame, simulate_states, PendulumConfig};
use smr_lab::runner::{parse_config, EtcConfig, NssConfig, PendulumRunConfig};
use smr_lab::smr::{smr_gate, SmrConfig, SmrGate};
use smr_lab::ssm::checkpoint::Checkpoint;
use smr_lab::ssm::{discretize_bilinear, spectral_radius, ssm_conv, ssm_kernel, ssm_scan, ContinuousSsm, ParamForm};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn stable_model() -> impl Strategy<Value = ContinuousSsm> {
    (1usize..6, 1usize..3).prop_flat_map(|(n, m)| {
        (matrix(n, n, -0.3, 0.3), matrix(n, m, -1.0, 1.0), matrix(m, n, -1.0, 1.0), 0.001f64..0.2).prop_map(move |(a, b, c, dt)| {
            let a = a - DMatrix::identity(n, n);
            ContinuousSsm::new(a, b, c, dt).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scan_and_conv_agree(model in stable_model(), len in 1usize..64, seed in any::<u64>()) {
        let d = discretize_bilinear(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(d.io_dim(), len, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let scan = ssm_scan(&d, &u, None).unwrap();
        let conv = ssm_conv(&ssm_kernel(&d, len), &u).unwrap();
        let scale = scan.y.amax().max(1e-300);
        prop_assert!((&scan.y - &conv).amax() / scale < 1e-9);
    }

    #[test]
    fn stable_continuous_maps_inside_unit_disc(model in stable_model()) {
        let d = discretize_bilinear(&model).unwrap();
        let rho = spectral_radius(&d.a_bar, ParamForm::Dense);
        let exact = d.a_bar.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
        prop_assert!(exact < 1.0);
        prop_assert!(rho.value < 1.0 + 1e-9);
        if rho.converged {
            prop_assert!((rho.value - exact).abs() < 1e-6 * exact.max(1.0), "{} vs {exact}", rho.value);
        }
    }

    #[test]
    fn diagonal_radius_is_exact(diag in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let a = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
        let want = diag.iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert_eq!(spectral_radius(&a, ParamForm::Diagonal).value, want);
    }

    #[test]
    fn gate_values_lie_in_unit_interval(c in 1usize..4, tau in 1usize..6, len in 1usize..30, seed in any::<u64>(), lin in any::<bool>()) {
        let cfg = SmrConfig { tau, use_linear: lin, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = SmrGate::random(c, &cfg, &mut rng);
        let u = DMatrix::from_fn(c, len, |_, _| rand::Rng::gen_range(&mut rng, -5.0..5.0));
        let out = smr_gate(&gate, &u).unwrap();
        prop_assert!(out.gate.iter().all(|g| *g > 0.0 && *g < 1.0));
        for (g, (x, y)) in out.gate.iter().zip(u.iter().zip(out.gated.iter())) {
            prop_assert!((g * x - y).abs() < 1e-15);
            prop_assert!(y.abs() <= x.abs());
        }
    }

    #[test]
    fn trigger_rule_honored_between_events(x1 in -3.0f64..3.0, x2 in -3.0f64..3.0, kappa in 0.01f64..0.9) {
        prop_assume!(x1.abs() + x2.abs() > 1e-3);
        let plant = EtcPlant::corrected().with_kappa(kappa).unwrap();
        let grid = SimGrid { t_end: 3.0, ..Default::default() };
        let traj = simulate_etc(&plant, &grid, &DVector::from_vec(vec![x1, x2]), false).unwrap();
        prop_assert_eq!(traj.trigger_indices[0], 0);
        prop_assert!(traj.trigger_indices.windows(2).all(|w| w[1] > w[0]));
        let mut held = traj.states[0].clone();
        for k in 0..traj.states.len() {
            prop_assert!(traj.lyapunov[k] >= 0.0);
            if traj.triggered[k] {
                held = traj.states[k].clone();
                prop_assert_eq!(traj.e_norm[k], 0.0);
            } else {
                let e = &held - &traj.states[k];
                prop_assert_eq!(traj.e_norm[k], e.norm());
                let t = trigger_check(&traj.states[k], &e, &plant);
                prop_assert!(t.lhs > 0.0 || t.suppressed);
            }
        }
    }

    #[test]
    fn zero_width_jitter_keeps_schedule(seed in any::<u64>()) {
        let plant = EtcPlant::corrected();
        let grid = SimGrid { t_end: 2.0, ..Default::default() };
        let traj = simulate_etc(&plant, &grid, &DVector::from_vec(vec![1.0, 0.0]), false).unwrap();
        prop_assert_eq!(perturb_samples(&traj, &plant, &grid, 0.0, seed).unwrap(), traj.schedule());
    }

    #[test]
    fn jittered_times_stay_ordered(count in 3usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let task = make_sine_task(count, 5.0 * std::f64::consts::PI).unwrap();
        let (t, u) = perturb_grid(&task.times, |x| task.eval(x), frac * task.grid_width(), seed).unwrap();
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
        for (i, (ti, ui)) in t.iter().zip(&u).enumerate() {
            prop_assert!((ti - task.times[i]).abs() <= frac * task.grid_width() / 2.0 + 1e-15);
            prop_assert_eq!(*ui, task.eval(*ti));
        }
    }

    #[test]
    fn undamped_pendulum_conserves_energy(theta in -3.1f64..3.1, omega in -0.5f64..0.5) {
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 5.0).collect();
        let energy = |s: [f64; 2]| 0.5 * s[1] * s[1] + (1.0 - s[0].cos());
        let e0 = energy([theta, omega]);
        for s in simulate_states(theta, omega, 1.0, 0.0, &times).unwrap() {
            prop_assert!((energy(s) - e0).abs() < 1e-6);
        }
    }

    #[test]
    fn frames_stay_in_range(theta in -10.0f64..10.0) {
        let f = render_frame(theta, 24);
        let s: f64 = f.iter().sum();
        prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s > 0.0 && s < 576.0);
    }

    #[test]
    fn checkpoint_round_trip(channels in 1usize..4, layers in 1usize..3, seed in any::<u64>(), diag in any::<bool>()) {
        let cfg = ModelConfig {
            channels,
            layers,
            state_size: 4,
            form: if diag { ParamForm::Diagonal } else { ParamForm::Dense },
            smr: Some(SmrConfig::default()),
            ..Default::default()
        };
        let model = NssModel::new(cfg, seed).unwrap();
        let mut buf = Vec::new();
        model.checkpoint().write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, model.checkpoint());
    }
}

#[test]
fn resolved_configs_round_trip() {
    let etc = EtcConfig::default();
    let text = toml::to_string(&etc).unwrap();
    assert_eq!(parse_config::<EtcConfig>(&[&text]).unwrap(), etc);
    let nss = NssConfig::sine(true);
    let text = toml::to_string(&nss).unwrap();
    assert_eq!(parse_config::<NssConfig>(&[&text]).unwrap(), nss);
    let pend = PendulumRunConfig::default();
    let text = toml::to_string(&pend).unwrap();
    assert_eq!(parse_config::<PendulumRunConfig>(&[&text]).unwrap(), pend);
}

#[test]
fn partial_tables_keep_run_defaults() {
    let cfg: PendulumRunConfig = parse_config(&["[regression.model]\nstate_size = 8\n", "data.train_size = 10"]).unwrap();
    assert_eq!(cfg.regression.model.state_size, 8);
    assert_eq!(cfg.regression.model.channels, 64);
    assert_eq!(cfg.data.train_size, 10);
    assert_eq!(cfg.data.test_size, PendulumConfig::default().test_size);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(parse_config::<EtcConfig>(&["kapa = 0.1"]).is_err());
    assert!(parse_config::<NssConfig>(&["[model]\nlayer = 2"]).is_err());
}
