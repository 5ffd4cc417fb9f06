//! Univariate slice sampler with stepping-out and shrinkage.

use rand::Rng;

use crate::error::{Error, Result};

/// Result of one slice update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceOutcome {
    pub value: f64,
    /// Number of interval expansions performed.
    pub step_outs: u32,
    /// Whether the expansion limit stopped the stepping-out phase.
    pub capped: bool,
    pub evaluations: u32,
}

/// One slice-sampling transition for `log_density` from `x0`.
///
/// The initial interval of length `width` is placed at random around `x0`
/// and expanded in steps of `width` at most `max_step_outs` times in total
/// (split at random between the two sides), then shrunk towards `x0` until a
/// point inside the slice is found. The interval is clipped to
/// `[lower, upper]`; `log_density` is treated as `-inf` outside. Hitting the
/// expansion limit leaves the target invariant.
pub fn slice_update<R, F>(
    mut log_density: F,
    x0: f64,
    width: f64,
    lower: f64,
    upper: f64,
    max_step_outs: u32,
    rng: &mut R,
) -> Result<SliceOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> f64,
{
    if !x0.is_finite() || x0 < lower || x0 > upper {
        return Err(Error::Sampler(format!("slice start {x0} outside ({lower}, {upper})")));
    }
    let width = if width > 0.0 && width.is_finite() { width } else { 1.0 };
    let mut evaluations = 1u32;
    let f0 = log_density(x0);
    if !(f0 > f64::NEG_INFINITY) || f0.is_nan() {
        return Err(Error::Sampler(format!(
            "target density is {f0} at the current point {x0}"
        )));
    }
    let mut f = |x: f64| -> f64 {
        evaluations += 1;
        if x <= lower || x >= upper {
            f64::NEG_INFINITY
        } else {
            let v = log_density(x);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        }
    };

    // slice level: log y = f(x0) - Exp(1)
    let e: f64 = -(1.0 - rng.random::<f64>()).ln();
    let level = f0 - e;

    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let mut step_outs = 0u32;
    let mut capped = false;

    let budget = max_step_outs;
    let mut left_steps = (f64::from(budget) * rng.random::<f64>()).floor() as u32;
    let mut right_steps = budget.saturating_sub(1).saturating_sub(left_steps);
    if budget == 0 {
        left_steps = 0;
        right_steps = 0;
    }
    while left > lower && f(left) > level {
        if left_steps == 0 {
            capped = true;
            break;
        }
        left -= width;
        left_steps -= 1;
        step_outs += 1;
    }
    while right < upper && f(right) > level {
        if right_steps == 0 {
            capped = true;
            break;
        }
        right += width;
        right_steps -= 1;
        step_outs += 1;
    }
    left = left.max(lower);
    right = right.min(upper);

    loop {
        let x1 = left + rng.random::<f64>() * (right - left);
        if f(x1) > level {
            return Ok(SliceOutcome {
                value: x1,
                step_outs,
                capped,
                evaluations,
            });
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
        if right - left <= f64::EPSILON * x0.abs().max(1e-300) {
            return Ok(SliceOutcome {
                value: x0,
                step_outs,
                capped,
                evaluations,
            });
        }
    }
}
