use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Knobs for [`gradcheck_with`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check this many coordinates chosen uniformly without replacement;
    /// `None` checks all of them.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error. Coordinates whose true
    /// gradient is zero (a key bias under softmax, for one) are judged on
    /// absolute error against it; central differences carry roundoff of
    /// about `ε·|f| / h`, near `1e-11` at `h = 1e-5`.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            samples: None,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Max relative error between backward and central differences over every
/// coordinate of `point`.
pub fn finite_diff_gradcheck<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradcheckOptions {
        h,
        ..Default::default()
    };
    Ok(gradcheck_with(f, point, &opts)?.max_rel_error)
}

pub fn gradcheck_with<F>(f: F, point: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(Error::contract(format!("gradcheck step must be > 0, got {}", opts.h)));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let sizes: Vec<usize> = point.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = match opts.samples {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in coords {
        let (mut which, mut offset) = (0, flat);
        while offset >= sizes[which] {
            offset -= sizes[which];
            which += 1;
        }
        let analytic = grads.get(vars[which]).expect("trainable leaf").data()[offset];
        let orig = work[which].data()[offset];
        work[which].data_mut()[offset] = orig + opts.h;
        let plus = eval(&work)?;
        work[which].data_mut()[offset] = orig - opts.h;
        let minus = eval(&work)?;
        work[which].data_mut()[offset] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((which, offset, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, 0.5, 3.0, -1.0, 0.0, -1.0, 4.0]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.3, -0.7, 0.9]).unwrap();
        let err = finite_diff_gradcheck(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul(a, v[0])?;
                let prod = tape.mul(v[0], ax)?;
                Ok(tape.sum(prod))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn nonpositive_step_rejected() {
        let r = finite_diff_gradcheck(|tape, v| Ok(tape.sum(v[0])), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
