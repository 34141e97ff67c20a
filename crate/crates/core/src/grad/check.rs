use super::{ParamTree, Tape};
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference comparison of a tape's reverse-mode gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-8)`
    pub normwise: f64,
    /// `max_i` of [`relative_error`] per coordinate.
    pub coordinatewise: f64,
}

/// Compares the reverse-mode gradient with central differences of the
/// replayed output. The step for coordinate `i` is `h * max(1, |param_i|)`;
/// with `extrapolate` it is the initial step of a Richardson tableau. The
/// tape is left evaluated at `params`.
pub fn grad_check(tape: &mut Tape, params: &ParamTree, h: f64, extrapolate: bool) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    tape.replay(params)?;
    let analytic = tape.gradient(params)?;
    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(params.total_dim());
    for i in 0..params.total_dim() {
        let x = params.as_slice()[i];
        let mut central = |step: f64| -> Result<f64> {
            probe.as_mut_slice()[i] = x + step;
            let up = tape.replay(&probe)?;
            probe.as_mut_slice()[i] = x - step;
            let down = tape.replay(&probe)?;
            probe.as_mut_slice()[i] = x;
            Ok((up - down) / (2.0 * step))
        };
        let step = h * x.abs().max(1.0);
        numeric.push(if extrapolate { ridders(&mut central, step)? } else { central(step)? });
    }
    tape.replay(params)?;
    let a = analytic.as_slice();
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(a).max(inf(&numeric)).max(1e-8);
    let mut out = GradCheck {
        normwise: 0.0,
        coordinatewise: 0.0,
    };
    for (x, y) in a.iter().zip(&numeric) {
        out.normwise = out.normwise.max((x - y).abs() / scale);
        out.coordinatewise = out.coordinatewise.max(relative_error(*x, *y));
    }
    Ok(out)
}

/// Norm-wise relative error of the tape gradient against plain central
/// differences with step `h * max(1, |param_i|)`.
pub fn check_grad(tape: &mut Tape, params: &ParamTree, h: f64) -> Result<f64> {
    Ok(grad_check(tape, params, h, false)?.normwise)
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 10;

/// Polynomial extrapolation of central differences to zero step.
fn ridders(central: &mut dyn FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = [[0.0f64; RIDDERS_TABLE]; RIDDERS_TABLE];
    let mut step = h0;
    table[0][0] = central(step)?;
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..RIDDERS_TABLE {
        step /= RIDDERS_SHRINK;
        table[0][i] = central(step)?;
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        // higher orders stopped helping
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}
