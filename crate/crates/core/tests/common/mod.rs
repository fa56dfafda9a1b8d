//! Reference implementations shared by the integration tests. They use
//! nothing from the library beyond plain data types.

#![allow(dead_code)]

use locmoe::toymoe::ExpertParams;
use ndarray::Array2;

/// Composite Simpson with `panels` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

pub fn erf_oracle(x: f64) -> f64 {
    let sign = x.signum();
    sign * 2.0 / std::f64::consts::PI.sqrt() * simpson(|t| (-t * t).exp(), 0.0, x.abs(), 4000)
}

pub fn phi_oracle(x: f64) -> f64 {
    0.5 * (1.0 + erf_oracle(x / std::f64::consts::SQRT_2))
}

/// I_x(1/2, b) through t = sin²θ, which leaves a smooth integrand on both ends.
pub fn inc_beta_half_oracle(x: f64, b: f64) -> f64 {
    let f = |th: f64| th.cos().powf(2.0 * b - 1.0);
    simpson(f, 0.0, x.sqrt().asin(), 20000) / simpson(f, 0.0, std::f64::consts::FRAC_PI_2, 20000)
}

/// Top-1 MoE forward written out with explicit loops.
pub fn forward_oracle(x: &Array2<f64>, wg: &Array2<f64>, experts: &[ExpertParams], cap: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    let n = wg.nrows();
    let mut y = x.clone();
    let mut used = vec![0usize; n];
    for m in 0..t {
        let mut s = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += wg[[i, k]] * x[[m, k]];
            }
            s[i] = if acc > 0.0 { acc } else { 0.0 };
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let mut best = 0;
        for i in 1..n {
            if s[i] > s[best] {
                best = i;
            }
        }
        let gate = (s[best] - max).exp() / z;
        if used[best] >= cap {
            continue;
        }
        used[best] += 1;
        let e = &experts[best];
        let h = e.w_in.nrows();
        let mut act = vec![0.0; h];
        for j in 0..h {
            let mut acc = 0.0;
            for k in 0..d {
                acc += e.w_in[[j, k]] * x[[m, k]];
            }
            act[j] = acc * phi_oracle(acc);
        }
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..h {
                acc += e.w_out[[k, j]] * act[j];
            }
            y[[m, k]] = gate * acc;
        }
    }
    y
}
