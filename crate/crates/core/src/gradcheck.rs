//! Central finite-difference checks of tape gradients.
//!
//! The checked function is rebuilt on a fresh tape for every perturbation,
//! so the numeric side never touches the recorded adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Coordinates whose two one-sided differences straddle a kink (relu,
    /// argmax switch) are skipped, up to this fraction of those checked.
    pub max_kink_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            max_kink_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks_skipped: usize,
    /// (input index, flat coordinate) of the worst smooth coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every (or a sample of each) input coordinate.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradient check needs a scalar output, got {}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward_scalar(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let f0 = eval(inputs)?;
    let h = opts.step;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;

            let a = analytic[k].data()[j];
            let central = (fp - fm) / (2.0 * h);
            let err = relative_error(a, central);
            report.checked += 1;
            if err >= 1e-5 {
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                let one_sided_agrees = relative_error(a, fwd).min(relative_error(a, bwd)) < 1e-3;
                let sides_disagree = relative_error(fwd, bwd) > 1e-2;
                if one_sided_agrees && sides_disagree {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = Some((k, j));
            }
        }
    }
    if report.kinks_skipped as f64 > opts.max_kink_fraction * report.checked as f64 {
        report.max_rel_err = f64::INFINITY;
    }
    Ok(report)
}

/// Reduces `out` to a scalar by an inner product with fixed pseudo-random
/// weights, so every output element carries a distinct adjoint.
pub fn random_projection<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = Tensor::from_fn(out.shape(), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let w = out.tape().leaf(w);
    Ok(out.mul(w)?.sum())
}
