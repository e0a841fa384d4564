use delayformer::lorenz::{generate, integrate, lorenz_derivative, LorenzConfig, NoiseMode};

/// Coupled chain written out directly, used as the derivative oracle.
fn oracle_rhs(s: &[f64], sigma: f64, rho: f64, beta: f64, gamma: f64) -> Vec<f64> {
    let n = s.len() / 3;
    let mut d = vec![0.0; s.len()];
    for i in 0..n {
        let (x, y, z) = (s[3 * i], s[3 * i + 1], s[3 * i + 2]);
        let drive = if i == 0 { 0.0 } else { gamma * s[3 * i - 1] };
        d[3 * i] = sigma * (y - x) + drive;
        d[3 * i + 1] = x * (rho - z) - y;
        d[3 * i + 2] = x * y - beta * z;
    }
    d
}

fn oracle_rk4(mut s: Vec<f64>, steps: usize, dt: f64, gamma: f64) -> Vec<f64> {
    let f = |v: &[f64]| oracle_rhs(v, 10.0, 28.0, 8.0 / 3.0, gamma);
    let axpy = |a: &[f64], k: &[f64], c: f64| a.iter().zip(k).map(|(x, y)| x + c * y).collect::<Vec<_>>();
    for _ in 0..steps {
        let k1 = f(&s);
        let k2 = f(&axpy(&s, &k1, dt / 2.0));
        let k3 = f(&axpy(&s, &k2, dt / 2.0));
        let k4 = f(&axpy(&s, &k3, dt));
        for i in 0..s.len() {
            s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    s
}

fn final_state(cfg: &LorenzConfig) -> Vec<f64> {
    let s = integrate(cfg).unwrap();
    (0..s.n_channels()).map(|k| *s.channel(k).last().unwrap()).collect()
}

fn cfg(n: usize) -> LorenzConfig {
    LorenzConfig {
        n_subsystems: n,
        ..Default::default()
    }
}

#[test]
fn derivative_matches_written_out_equations() {
    let c = LorenzConfig { gamma: 0.37, ..cfg(4) };
    let state: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin() * 10.0).collect();
    let got = lorenz_derivative(&state, &c, 3.0).unwrap();
    let want = oracle_rhs(&state, 10.0, 28.0, 8.0 / 3.0, 0.37);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    assert!(lorenz_derivative(&state[..11], &c, 0.0).is_err());
}

#[test]
fn time_varying_sigma_uses_integration_time() {
    let c = LorenzConfig {
        time_varying: true,
        ..cfg(1)
    };
    let s = [1.0, 3.0, 0.0];
    let at = |t: f64| lorenz_derivative(&s, &c, t).unwrap()[0];
    assert!((at(0.0) - 20.0).abs() < 1e-12);
    assert!((at(50.0) - 2.0 * 11.0).abs() < 1e-12);
}

#[test]
fn integrator_matches_oracle_rk4() {
    let c = LorenzConfig {
        n_points: 2,
        record_stride: 300,
        ..cfg(3)
    };
    let start = vec![-0.097, -0.094, -0.091, -0.094, -0.091, -0.088, -0.091, -0.088, -0.085];
    let want = oracle_rk4(start, 300, 0.01, 0.1);
    for (a, b) in final_state(&c).iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn rk4_is_fourth_order() {
    // Self-convergence at t = 0.5: successive differences shrink by 2^4.
    let at = |dt: f64| {
        final_state(&LorenzConfig {
            dt,
            n_points: 2,
            record_stride: (0.5 / dt).round() as usize,
            ..cfg(2)
        })
    };
    let (a, b, c) = (at(0.01), at(0.005), at(0.0025));
    let diff = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let ratio = diff(&a, &b) / diff(&b, &c);
    assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn uncoupled_chain_splits_into_identical_copies_of_single_system() {
    let chain = integrate(&LorenzConfig {
        gamma: 0.0,
        n_points: 500,
        ..cfg(3)
    })
    .unwrap();
    for n in 0..3 {
        // Subsystem n alone has the same equations but a shifted start.
        let start: Vec<f64> = (0..3).map(|i| chain.at(3 * n + i, 0)).collect();
        let alone = oracle_rk4(start, 499, 0.01, 0.0);
        for i in 0..3 {
            assert!((chain.at(3 * n + i, 499) - alone[i]).abs() < 1e-8);
        }
    }
}

#[test]
fn first_subsystem_ignores_the_rest_of_the_chain() {
    let one = integrate(&LorenzConfig {
        n_points: 800,
        ..cfg(1)
    })
    .unwrap();
    let many = integrate(&LorenzConfig {
        n_points: 800,
        ..cfg(5)
    })
    .unwrap();
    for k in 0..3 {
        assert_eq!(one.channel(k), many.channel(k));
    }
}

#[test]
fn default_dataset_shape_and_bounded() {
    let s = generate(&cfg(10)).unwrap();
    assert_eq!((s.n_channels(), s.len()), (30, 5000));
    assert_eq!(s.channel_names()[0], "x1");
    assert_eq!(s.channel_names()[29], "z10");
    assert!(s.values().data().iter().all(|v| v.is_finite() && v.abs() < 100.0));
}

#[test]
fn measurement_noise_is_reproducible_and_has_the_requested_scale() {
    let base = LorenzConfig {
        n_points: 4000,
        ..cfg(2)
    };
    let noisy = LorenzConfig {
        noise_strength: 0.5,
        noise_mode: NoiseMode::Measurement,
        seed: 11,
        ..base.clone()
    };
    let clean = generate(&base).unwrap();
    let a = generate(&noisy).unwrap();
    assert_eq!(a, generate(&noisy).unwrap());
    let resid: Vec<f64> = a
        .values()
        .data()
        .iter()
        .zip(clean.values().data())
        .map(|(x, y)| x - y)
        .collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
}

#[test]
fn process_noise_changes_the_trajectory() {
    let c = LorenzConfig {
        noise_strength: 0.1,
        noise_mode: NoiseMode::Process,
        n_points: 300,
        ..cfg(1)
    };
    let noisy = generate(&c).unwrap();
    let clean = generate(&LorenzConfig {
        noise_strength: 0.0,
        ..c.clone()
    })
    .unwrap();
    assert_eq!(noisy.channel(0)[0], clean.channel(0)[0]);
    assert_ne!(noisy.channel(0)[299], clean.channel(0)[299]);
    assert!(noisy.values().all_finite());
}
