//! Chain of coupled Lorenz subsystems.
//!
//! Subsystem `n` is driven by `z` of subsystem `n - 1` through its `x`
//! equation; the first subsystem is uncoupled. State vectors are ordered
//! `(x_1, y_1, z_1, …, x_n, y_n, z_n)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::MultivariateSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where Gaussian noise enters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Added to the recorded observations.
    #[default]
    Measurement,
    /// Injected into the dynamics at every integration step.
    Process,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub n_subsystems: usize,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Coupling strength from `z_{n-1}` into `dx_n`.
    pub gamma: f64,
    pub dt: f64,
    /// Integration steps between recorded samples.
    pub record_stride: usize,
    pub n_points: usize,
    pub noise_strength: f64,
    pub noise_mode: NoiseMode,
    /// Replace `sigma` by [`time_varying_sigma`] of the integration time.
    pub time_varying: bool,
    /// Use `dy = x(ρ - z) - x·y` instead of the canonical `x(ρ - z) - y`.
    pub as_printed: bool,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        LorenzConfig {
            n_subsystems: 10,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            gamma: 0.1,
            dt: 0.01,
            record_stride: 1,
            n_points: 5000,
            noise_strength: 0.0,
            noise_mode: NoiseMode::Measurement,
            time_varying: false,
            as_printed: false,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_points == 0 || self.n_subsystems == 0 || self.record_stride == 0 {
            return Err(Error::Config(format!(
                "lorenz needs dt > 0 and positive n_points/n_subsystems/record_stride, got dt={}, n_points={}, n_subsystems={}, record_stride={}",
                self.dt, self.n_points, self.n_subsystems, self.record_stride
            )));
        }
        if !(self.noise_strength >= 0.0) {
            return Err(Error::Config(format!(
                "noise_strength {} must be ≥ 0",
                self.noise_strength
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        3 * self.n_subsystems
    }
}

/// `σ(t) = 10 + 0.2·t/10`.
pub fn time_varying_sigma(t: f64) -> f64 {
    10.0 + 0.2 * t / 10.0
}

fn derivative_into(state: &[f64], cfg: &LorenzConfig, t: f64, out: &mut [f64]) {
    let sigma = if cfg.time_varying {
        time_varying_sigma(t)
    } else {
        cfg.sigma
    };
    let mut z_prev = 0.0;
    for (s, d) in state.chunks_exact(3).zip(out.chunks_exact_mut(3)) {
        let (x, y, z) = (s[0], s[1], s[2]);
        d[0] = sigma * (y - x) + cfg.gamma * z_prev;
        d[1] = if cfg.as_printed {
            x * (cfg.rho - z) - x * y
        } else {
            x * (cfg.rho - z) - y
        };
        d[2] = -cfg.beta * z + x * y;
        z_prev = z;
    }
}

/// Time derivative of the full chain at time `t`.
pub fn lorenz_derivative(state: &[f64], cfg: &LorenzConfig, t: f64) -> Result<Vec<f64>> {
    if state.len() != cfg.dimension() {
        return Err(Error::contract(format!(
            "state has {} entries, expected 3 × {} = {}",
            state.len(),
            cfg.n_subsystems,
            cfg.dimension()
        )));
    }
    let mut out = vec![0.0; state.len()];
    derivative_into(state, cfg, t, &mut out);
    Ok(out)
}

/// `x_n(0) = -0.1 + 0.003n`, `y_n(0) = -0.097 + 0.003n`, `z_n(0) = -0.094 + 0.003n`.
pub fn initial_state(n_subsystems: usize) -> Vec<f64> {
    (1..=n_subsystems)
        .flat_map(|n| {
            let shift = 0.003 * n as f64;
            [-0.1 + shift, -0.097 + shift, -0.094 + shift]
        })
        .collect()
}

pub fn channel_names(n_subsystems: usize) -> Vec<String> {
    (1..=n_subsystems)
        .flat_map(|n| [format!("x{n}"), format!("y{n}"), format!("z{n}")])
        .collect()
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, state: &mut [f64], cfg: &LorenzConfig, t: f64, dt: f64) {
        derivative_into(state, cfg, t, &mut self.k1);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * dt * self.k1[i];
        }
        derivative_into(&self.tmp, cfg, t + 0.5 * dt, &mut self.k2);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * dt * self.k2[i];
        }
        derivative_into(&self.tmp, cfg, t + 0.5 * dt, &mut self.k3);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + dt * self.k3[i];
        }
        derivative_into(&self.tmp, cfg, t + dt, &mut self.k4);
        for i in 0..state.len() {
            state[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Integrates the chain with classical RK4, recording every
/// `record_stride` steps from `t = 0`.
///
/// In [`NoiseMode::Process`] each step also adds `√dt·N(0, noise_strength²)`
/// per coordinate. Measurement noise is not applied here; see [`generate`].
pub fn integrate(cfg: &LorenzConfig) -> Result<MultivariateSeries> {
    cfg.validate()?;
    let dim = cfg.dimension();
    let mut state = initial_state(cfg.n_subsystems);
    let mut rk = Rk4::new(dim);
    let process = cfg.noise_mode == NoiseMode::Process && cfg.noise_strength > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_strength.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let sqrt_dt = cfg.dt.sqrt();

    let mut columns = vec![0.0; dim * cfg.n_points];
    let mut step_index: u64 = 0;
    for p in 0..cfg.n_points {
        for (k, v) in state.iter().enumerate() {
            columns[k * cfg.n_points + p] = *v;
        }
        if p + 1 == cfg.n_points {
            break;
        }
        for _ in 0..cfg.record_stride {
            let t = step_index as f64 * cfg.dt;
            rk.step(&mut state, cfg, t, cfg.dt);
            if process {
                for v in state.iter_mut() {
                    *v += sqrt_dt * normal.sample(&mut rng);
                }
            }
            step_index += 1;
        }
    }
    MultivariateSeries::new(
        Tensor::new(vec![dim, cfg.n_points], columns)?,
        channel_names(cfg.n_subsystems),
        cfg.dt * cfg.record_stride as f64,
    )
}

/// Adds i.i.d. `N(0, noise_strength²)` to every recorded value.
pub fn add_observation_noise(
    series: &MultivariateSeries,
    noise_strength: f64,
    seed: u64,
) -> Result<MultivariateSeries> {
    if !(noise_strength >= 0.0) {
        return Err(Error::contract(format!("noise strength {noise_strength} must be ≥ 0")));
    }
    if noise_strength == 0.0 {
        return Ok(series.clone());
    }
    let normal = Normal::new(0.0, noise_strength).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = series.values().clone();
    for v in values.data_mut() {
        *v += normal.sample(&mut rng);
    }
    MultivariateSeries::new(values, series.channel_names().to_vec(), series.dt())
}

/// [`integrate`] followed by measurement noise when configured.
pub fn generate(cfg: &LorenzConfig) -> Result<MultivariateSeries> {
    let clean = integrate(cfg)?;
    match cfg.noise_mode {
        NoiseMode::Measurement if cfg.noise_strength > 0.0 => {
            // Decorrelated from any process-noise stream drawn from the same seed.
            add_observation_noise(&clean, cfg.noise_strength, cfg.seed.wrapping_add(0x9e37_79b9))
        }
        _ => Ok(clean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> LorenzConfig {
        LorenzConfig {
            n_subsystems: 1,
            ..Default::default()
        }
    }

    #[test]
    fn origin_is_fixed_point() {
        let d = lorenz_derivative(&[0.0; 30], &LorenzConfig::default(), 0.0).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_substitution_single_system() {
        let d = lorenz_derivative(&[1.0, 2.0, 3.0], &single(), 0.0).unwrap();
        assert_eq!(d[0], 10.0);
        assert_eq!(d[1], 23.0);
        assert!((d[2] - (-6.0)).abs() < 1e-12);
    }

    #[test]
    fn coupling_term() {
        let cfg = LorenzConfig {
            n_subsystems: 2,
            ..Default::default()
        };
        // second subsystem at rest except z of the first = 5
        let d = lorenz_derivative(&[0.0, 0.0, 5.0, 0.0, 0.0, 0.0], &cfg, 0.0).unwrap();
        assert!((d[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn as_printed_variant() {
        let cfg = LorenzConfig {
            as_printed: true,
            ..single()
        };
        let d = lorenz_derivative(&[1.0, 2.0, 3.0], &cfg, 0.0).unwrap();
        assert_eq!(d[1], 23.0);
        let d = lorenz_derivative(&[2.0, 1.0, 3.0], &cfg, 0.0).unwrap();
        assert_eq!(d[1], 2.0 * 25.0 - 2.0);
    }

    #[test]
    fn sigma_schedule() {
        assert_eq!(time_varying_sigma(0.0), 10.0);
        assert!((time_varying_sigma(10.0) - 10.2).abs() < 1e-12);
        assert!((time_varying_sigma(100.0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_state_length() {
        assert!(lorenz_derivative(&[0.0; 4], &single(), 0.0).is_err());
    }

    #[test]
    fn first_row_is_initial_condition() {
        let cfg = LorenzConfig {
            n_points: 10,
            ..Default::default()
        };
        let s = integrate(&cfg).unwrap();
        assert_eq!(s.n_channels(), 30);
        let init = initial_state(10);
        for (k, v) in init.iter().enumerate() {
            assert_eq!(s.at(k, 0), *v);
        }
        assert_eq!(s.at(0, 0), -0.1 + 0.003);
        assert_eq!(s.channel_names()[4], "y2");
    }

    #[test]
    fn noise_is_seeded_and_centered() {
        let cfg = LorenzConfig {
            n_subsystems: 2,
            n_points: 2000,
            ..Default::default()
        };
        let clean = integrate(&cfg).unwrap();
        assert_eq!(add_observation_noise(&clean, 0.0, 1).unwrap(), clean);
        let a = add_observation_noise(&clean, 0.3, 7).unwrap();
        let b = add_observation_noise(&clean, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let diffs: Vec<f64> = a
            .values()
            .data()
            .iter()
            .zip(clean.values().data())
            .map(|(x, y)| x - y)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean.abs() < 4.0 * 0.3 / (diffs.len() as f64).sqrt(), "mean {mean}");
        assert!(add_observation_noise(&clean, -1.0, 0).is_err());
    }

    #[test]
    fn process_noise_perturbs_dynamics() {
        let base = LorenzConfig {
            n_subsystems: 1,
            n_points: 200,
            ..Default::default()
        };
        let noisy = LorenzConfig {
            noise_mode: NoiseMode::Process,
            noise_strength: 0.5,
            ..base.clone()
        };
        let a = integrate(&base).unwrap();
        let b = integrate(&noisy).unwrap();
        assert_eq!(a.at(0, 0), b.at(0, 0));
        assert_ne!(a.at(0, 199), b.at(0, 199));
        assert_eq!(b, integrate(&noisy).unwrap());
    }

    #[test]
    fn record_stride_subsamples() {
        let fine = integrate(&LorenzConfig {
            n_subsystems: 1,
            n_points: 21,
            ..Default::default()
        })
        .unwrap();
        let coarse = integrate(&LorenzConfig {
            n_subsystems: 1,
            n_points: 11,
            record_stride: 2,
            ..Default::default()
        })
        .unwrap();
        for p in 0..11 {
            assert_eq!(coarse.at(2, p), fine.at(2, 2 * p));
        }
    }
}
