//! Central-difference gradient verification.

use super::{LossNode, ParamSet};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `build`'s loss against central
/// differences, coordinate by coordinate over every trainable parameter.
///
/// Returns `max over coordinates of |ad − fd| / max(|ad|, |fd|, 1e-8)`;
/// 0 over an empty trainable set. The loss must be smooth at the probe
/// point (steering clear of |·| kinks is the caller's job) and `h` must
/// lie in `[1e-7, 1e-4]`.
pub fn finite_difference_check<F>(build: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<LossNode>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("finite_difference_check: h={h} outside [1e-7, 1e-4]")));
    }
    let analytic = build(params)?.backward()?;

    let mut work = params.clone();
    let names: Vec<String> = params.trainable_names();
    let mut max_rel: f64 = 0.0;
    for name in &names {
        let n = params.get(name)?.value.len();
        for idx in 0..n {
            let base = params.get(name)?.value.data()[idx];

            work.get_mut(name)?.value.data_mut()[idx] = base + h;
            let f_plus = build(&work)?.value();
            work.get_mut(name)?.value.data_mut()[idx] = base - h;
            let f_minus = build(&work)?.value();
            work.get_mut(name)?.value.data_mut()[idx] = base;

            let fd = (f_plus - f_minus) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite_difference_check: non-finite difference at {name}[{idx}]"
                )));
            }
            let ad = analytic
                .get(name)
                .expect("backward covers every trainable parameter")
                .data()[idx];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
