//! Forward noising and deterministic (eta = 0) DDIM sampling.

use alloc::format;
use alloc::vec::Vec;

use super::schedule::NoiseSchedule;
use crate::error::{shape_err, Error, Result};

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(z0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(shape_err(&[z0.len()], &[eps.len()]));
    }
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// The clean estimate implied by a noise prediction.
pub fn predict_z0(z_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if z_t.len() != eps_hat.len() {
        return Err(shape_err(&[z_t.len()], &[eps_hat.len()]));
    }
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(z_t.iter().zip(eps_hat).map(|(z, e)| (z - b * e) / a).collect())
}

pub fn ddim_step(z_t: &[f64], eps_hat: &[f64], t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::Param(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_step(t_prev)?;
    let mut out = predict_z0(z_t, eps_hat, t, sched)?;
    if t_prev == 0 {
        return Ok(out);
    }
    let ab = sched.alpha_bar(t_prev);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    for (o, e) in out.iter_mut().zip(eps_hat) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// `d z0 / d eps_hat` of a final DDIM step from `t` to 0 (elementwise constant).
pub fn final_step_eps_jacobian(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    -libm::sqrt(1.0 - ab) / libm::sqrt(ab)
}

/// Uniform descending sub-schedule `t = t_0 > t_1 > ... > t_m = 0`, with
/// `t_i = round(t (n - i) / n)` and repeated values dropped.
pub fn sub_schedule(t: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 {
        return Err(Error::Param("n_steps must be at least 1".into()));
    }
    let mut out: Vec<usize> = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        let ti = libm::round(t as f64 * (n_steps - i) as f64 / n_steps as f64) as usize;
        if out.last() != Some(&ti) {
            out.push(ti);
        }
    }
    Ok(out)
}

/// Anything that predicts the noise in `z_t`.
pub trait EpsModel {
    fn predict_eps(&self, z_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], usize) -> Result<Vec<f64>>> EpsModel for F {
    fn predict_eps(&self, z_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(z_t, t)
    }
}

/// Oracle that knows the clean sample and always returns the exact noise.
pub struct OracleEps<'a> {
    pub z0: &'a [f64],
    pub sched: &'a NoiseSchedule,
}

impl EpsModel for OracleEps<'_> {
    fn predict_eps(&self, z_t: &[f64], t: usize) -> Result<Vec<f64>> {
        if t == 0 {
            return Ok(alloc::vec![0.0; z_t.len()]);
        }
        let ab = self.sched.alpha_bar(t);
        let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        Ok(z_t.iter().zip(self.z0).map(|(z, z0)| (z - a * z0) / b).collect())
    }
}

/// State just before the last DDIM step, which is the only step that carries
/// gradients in final-step-only mode.
#[derive(Debug, Clone)]
pub struct FinalStep {
    pub z: Vec<f64>,
    pub t: usize,
}

/// Runs all steps but the last one. Returns `None` when `t == 0`.
pub fn run_to_final_step(
    model: &impl EpsModel,
    z_t: &[f64],
    t: usize,
    n_steps: usize,
    sched: &NoiseSchedule,
) -> Result<Option<FinalStep>> {
    sched.check_step(t)?;
    let ts = sub_schedule(t, n_steps)?;
    if ts.len() < 2 {
        return Ok(None);
    }
    let mut z = z_t.to_vec();
    for w in ts[..ts.len() - 1].windows(2) {
        let eps = model.predict_eps(&z, w[0])?;
        z = ddim_step(&z, &eps, w[0], w[1], sched)?;
    }
    Ok(Some(FinalStep { z, t: ts[ts.len() - 2] }))
}

/// Recovers `z0` from `z_t` with an `n_steps` DDIM sub-schedule.
pub fn sample_z0(model: &impl EpsModel, z_t: &[f64], t: usize, n_steps: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    match run_to_final_step(model, z_t, t, n_steps, sched)? {
        None => Ok(z_t.to_vec()),
        Some(last) => {
            let eps = model.predict_eps(&last.z, last.t)?;
            ddim_step(&last.z, &eps, last.t, 0, sched)
        }
    }
}

/// Mean squared error with `f64` accumulation, and its gradient w.r.t. `eps_hat`.
pub fn diff_loss(eps_hat: &[f64], eps: &[f64]) -> Result<(f64, Vec<f64>)> {
    if eps_hat.len() != eps.len() || eps.is_empty() {
        return Err(shape_err(&[eps_hat.len()], &[eps.len()]));
    }
    let n = eps.len() as f64;
    let mut sum = 0.0;
    let grad = eps_hat
        .iter()
        .zip(eps)
        .map(|(a, b)| {
            let d = a - b;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::super::schedule::make_schedule;
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn sched() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn add_noise_cases() {
        let s = sched();
        assert_eq!(add_noise(&[0.3, -0.7], &[1.0, 2.0], 0, &s).unwrap(), vec![0.3, -0.7]);
        let custom = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = add_noise(&[2.0], &[2.0], 1, &custom).unwrap()[0];
        assert!((z - 2.7320508075688772).abs() < 1e-12);
        let z = add_noise(&[2.0], &[0.0], 1, &custom).unwrap()[0];
        assert_eq!(z, 1.0);
        assert!(add_noise(&[0.0], &[0.0], 1001, &s).is_err());
    }

    #[test]
    fn step_cases() {
        let s = sched();
        let z = [0.4, -1.2];
        let e = [0.1, 0.3];
        assert_eq!(ddim_step(&z, &e, 300, 0, &s).unwrap(), predict_z0(&z, &e, 300, &s).unwrap());
        let zero = ddim_step(&z, &[0.0, 0.0], 300, 100, &s).unwrap();
        let r = libm::sqrt(s.alpha_bar(100) / s.alpha_bar(300));
        for (a, b) in zero.iter().zip(&z) {
            assert!((a - r * b).abs() < 1e-14);
        }
        assert!(ddim_step(&z, &e, 100, 100, &s).is_err());
    }

    #[test]
    fn sub_schedule_shape() {
        assert_eq!(sub_schedule(500, 1).unwrap(), vec![500, 0]);
        assert_eq!(sub_schedule(10, 4).unwrap(), vec![10, 8, 5, 3, 0]);
        assert_eq!(sub_schedule(3, 20).unwrap(), vec![3, 2, 1, 0]);
        assert_eq!(sub_schedule(0, 5).unwrap(), vec![0]);
        assert!(sub_schedule(5, 0).is_err());
    }

    #[test]
    fn oracle_inversion() {
        let s = sched();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let z0: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        for t in [1, 37, 500, 1000] {
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            for n in [1, 5, 20] {
                let got = sample_z0(&OracleEps { z0: &z0, sched: &s }, &zt, t, n, &s).unwrap();
                let err = got.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "t={t} n={n} err={err}");
            }
        }
    }

    #[test]
    fn diff_loss_cases() {
        assert_eq!(diff_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(diff_loss(&[2.0, 3.0], &[1.0, 2.0]).unwrap().0, 1.0);
        assert!(diff_loss(&[1.0], &[1.0, 2.0]).is_err());
    }
}
