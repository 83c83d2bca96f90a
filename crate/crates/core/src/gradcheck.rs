//! Central finite-difference oracle for tape gradients.
//!
//! The error measure for one coordinate is
//! `|analytic − numeric| / max(1, |numeric|)`. Functions containing a max
//! (max-pooling) are only checked at inputs away from ties; a probe that
//! straddles a tie is outside the oracle's domain.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which coordinates of each input tensor to probe.
#[derive(Clone, Debug)]
pub enum Probes {
    All,
    /// Up to `per_tensor` distinct coordinates per tensor, drawn with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// (tensor index, flat coordinate) of the worst probe.
    pub worst: (usize, usize),
    pub probes: usize,
}

fn eval_scalar<T: Scalar, F>(f: &F, points: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of `f` with respect to every tensor in `points`.
pub fn grad_check_many<T: Scalar, F>(
    f: F,
    points: &[Tensor<T>],
    eps: T,
    probes: &Probes,
) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        probes: 0,
    };
    let mut work: Vec<Tensor<T>> = points.to_vec();
    let two_eps = eps + eps;
    for (ti, point) in points.iter().enumerate() {
        let coords: Vec<usize> = match probes {
            Probes::All => (0..point.len()).collect(),
            Probes::Sample { per_tensor, seed } => {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(ti as u64));
                let n = (*per_tensor).min(point.len());
                let mut c = sample(&mut rng, point.len(), n).into_vec();
                c.sort_unstable();
                c
            }
        };
        for c in coords {
            let orig = point.data()[c];
            work[ti].data_mut()[c] = orig + eps;
            let plus = eval_scalar(&f, &work)?;
            work[ti].data_mut()[c] = orig - eps;
            let minus = eval_scalar(&f, &work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / two_eps;
            let a = analytic[ti].data()[c];
            let err = (a - numeric).abs() / numeric.abs().max(T::one());
            report.probes += 1;
            if err > report.max_rel_error || report.probes == 1 {
                report.max_rel_error = err;
                report.worst = (ti, c);
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of a scalar `f` and
/// central differences with step `eps`, over all coordinates of `point`.
pub fn grad_check<T: Scalar, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape: &mut Tape<T>, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
        &Probes::All,
    )?;
    Ok(report.max_rel_error)
}
