//! Special functions used by the KL terms and their gradients.

pub use statrs::function::beta::beta_reg;
pub use statrs::function::gamma::{digamma, ln_gamma};
use statrs::function::beta::inv_beta_reg;

/// ln B(a, b)
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Second derivative of ln Γ. Recurrence up to x ≥ 10, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return f64::INFINITY;
    }
    if x < 0.0 {
        // reflection: ψ1(1-x) + ψ1(x) = π² / sin²(πx)
        let s = (std::f64::consts::PI * x).sin();
        return -trigamma(1.0 - x) + std::f64::consts::PI.powi(2) / (s * s);
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + Σ B_{2n}/x^{2n+1}
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))));
    acc + series
}

pub fn beta_ln_pdf(a: f64, b: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Beta(a, b) quantile at `u`. Starts from statrs' inverse and polishes
/// with Newton steps on `ln I_x(a, b) = ln u` in `ln x`, which is nearly
/// linear in the lower tail. The upper half uses `I_x(a, b) = 1 - I_{1-x}(b, a)`.
pub fn beta_quantile(a: f64, b: f64, u: f64) -> f64 {
    if u > 0.5 {
        return 1.0 - lower_quantile(b, a, 1.0 - u);
    }
    lower_quantile(a, b, u)
}

fn lower_quantile(a: f64, b: f64, u: f64) -> f64 {
    let x0 = inv_beta_reg(a, b, u);
    if !(u > 0.0) {
        return 0.0;
    }
    let mut t = if x0 > 0.0 && x0 < 1.0 { x0.ln() } else { (0.5f64).ln() };
    let target = u.ln();
    for _ in 0..50 {
        let x = t.exp();
        let i = beta_reg(a, b, x);
        let slope = x * beta_ln_pdf(a, b, x).exp() / i;
        if !(i > 0.0 && slope > 0.0 && slope.is_finite()) {
            break;
        }
        // stay below ln 1 = 0, where the map flattens
        let next = (t - (i.ln() - target) / slope).min(0.5 * t);
        let done = (next - t).abs() <= 4.0 * f64::EPSILON * t.abs().max(1.0);
        t = next;
        if done {
            break;
        }
    }
    t.exp()
}

/// `(∂x/∂a, ∂x/∂b)` for `x = beta_quantile(a, b, u)`, by implicit
/// differentiation: `∂x/∂a = -(∂I_x/∂a) / pdf(x)`. The shape derivatives
/// of `I_x` are central differences. Zero where the density underflows.
pub fn beta_quantile_partials(a: f64, b: f64, x: f64) -> (f64, f64) {
    let d = beta_ln_pdf(a, b, x).exp();
    if !(d > 0.0 && d.is_finite() && x > 0.0 && x < 1.0) {
        return (0.0, 0.0);
    }
    let ha = 1e-5 * a;
    let hb = 1e-5 * b;
    let di_da = (beta_reg(a + ha, b, x) - beta_reg(a - ha, b, x)) / (2.0 * ha);
    let di_db = (beta_reg(a, b + hb, x) - beta_reg(a, b - hb, x)) / (2.0 * hb);
    (-di_da / d, -di_db / d)
}
