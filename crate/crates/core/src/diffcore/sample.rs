//! Reparameterized samplers. Noise is drawn from the caller's RNG and enters
//! the tape as a constant, so gradients flow to the distribution parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::special::{beta_quantile, beta_quantile_partials};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const UNIFORM_EPS: f64 = 1e-10;

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

/// Uniform draws clamped to `[1e-10, 1 - 1e-10]`.
pub fn open_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS))
        .collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

fn check_positive(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).data().iter().all(|&x| x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive and finite")))
    }
}

/// `mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn sample_normal_reparam<R: Rng + ?Sized>(tape: &mut Tape, mu: Var, sigma: Var, rng: &mut R) -> Result<Var> {
    check_positive(tape, sigma, "sigma")?;
    let [r, c] = tape.shape(mu);
    let eps = tape.constant(standard_normal(r, c, rng));
    normal_with_noise(tape, mu, sigma, eps)
}

/// Normal reparameterization with externally supplied noise.
pub fn normal_with_noise(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Result<Var> {
    let s = tape.mul(sigma, eps)?;
    tape.add(mu, s)
}

pub fn sample_lognormal_reparam<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    rng: &mut R,
) -> Result<Var> {
    let n = sample_normal_reparam(tape, mu, sigma, rng)?;
    Ok(tape.exp(n))
}

/// Beta(a, b) draw by inverting the CDF at fresh uniforms.
pub fn sample_beta_reparam<R: Rng + ?Sized>(tape: &mut Tape, a: Var, b: Var, rng: &mut R) -> Result<Var> {
    let [r, c] = tape.shape(a);
    let u = open_uniform(r, c, rng);
    beta_with_noise(tape, a, b, &u)
}

/// Beta(a, b) quantile at fixed uniforms `u`. Exact in distribution; the
/// gradient wrt `a`, `b` comes from implicit differentiation of the CDF.
pub fn beta_with_noise(tape: &mut Tape, a: Var, b: Var, u: &Tensor) -> Result<Var> {
    check_positive(tape, a, "beta parameter a")?;
    check_positive(tape, b, "beta parameter b")?;
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != u.shape() || bv.shape() != u.shape() {
        return Err(Error::Shape {
            op: "beta_with_noise",
            left: av.shape(),
            right: u.shape(),
        });
    }
    let [r, c] = u.shape();
    let n = r * c;
    let (mut x, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for ((&ai, &bi), &ui) in av.data().iter().zip(bv.data()).zip(u.data()) {
        // keep the draw strictly inside (0, 1)
        let xi = beta_quantile(ai, bi, ui).clamp(1e-300, 1.0 - f64::EPSILON);
        let (ga, gb) = beta_quantile_partials(ai, bi, xi);
        x.push(xi);
        da.push(ga);
        db.push(gb);
    }
    tape.with_partials(a, b, Tensor::new(r, c, x)?, Tensor::new(r, c, da)?, Tensor::new(r, c, db)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_sigma_returns_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::row(vec![0.3, -2.0]));
        let s = tape.constant(Tensor::row(vec![1e-12, 1e-12]));
        let x = sample_normal_reparam(&mut tape, mu, s, &mut rng).unwrap();
        assert!((tape.value(x).data()[0] - 0.3).abs() < 1e-9);
        assert!((tape.value(x).data()[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::scalar(0.0));
        let s = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(sample_normal_reparam(&mut tape, mu, s, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn beta_one_one_is_the_uniform_draw() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0; 3]));
        let b = tape.constant(Tensor::row(vec![1.0; 3]));
        let u = Tensor::row(vec![0.1, 0.5, 0.93]);
        let x = beta_with_noise(&mut tape, a, b, &u).unwrap();
        for (xi, ui) in tape.value(x).data().iter().zip(u.data()) {
            assert!((xi - ui).abs() < 1e-14);
        }
    }

    #[test]
    fn beta_draws_have_the_beta_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(a, b) in &[(16.0, 77.0), (0.5, 2.0), (3.0, 3.0)] {
            let mut tape = Tape::new();
            let n = 20_000;
            let av = tape.constant(Tensor::row(vec![a; n]));
            let bv = tape.constant(Tensor::row(vec![b; n]));
            let x = sample_beta_reparam(&mut tape, av, bv, &mut rng).unwrap();
            let m = tape.value(x).data().iter().sum::<f64>() / n as f64;
            let want = a / (a + b);
            let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0)) / n as f64).sqrt();
            assert!((m - want).abs() < 4.0 * sd, "a={a} b={b} mean {m} want {want}");
        }
    }

    #[test]
    fn beta_gradient_matches_differences() {
        let u = Tensor::row(vec![0.2, 0.75]);
        let f = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::row(vec![a, a]));
            let bv = tape.constant(Tensor::row(vec![b, b]));
            let x = beta_with_noise(&mut tape, av, bv, &u).unwrap();
            tape.value(x).data().iter().sum::<f64>()
        };
        let mut store = super::super::tape::ParamStore::new(0);
        let pa = store.insert("a", Tensor::row(vec![2.0, 2.0]));
        let pb = store.insert("b", Tensor::row(vec![5.0, 5.0]));
        let mut tape = Tape::new();
        let av = tape.param(&store, pa);
        let bv = tape.param(&store, pb);
        let x = beta_with_noise(&mut tape, av, bv, &u).unwrap();
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        let ga: f64 = g.get(&store, pa).unwrap().data().iter().sum();
        let gb: f64 = g.get(&store, pb).unwrap().data().iter().sum();
        let h = 1e-6;
        let fa = (f(2.0 + h, 5.0) - f(2.0 - h, 5.0)) / (2.0 * h);
        let fb = (f(2.0, 5.0 + h) - f(2.0, 5.0 - h)) / (2.0 * h);
        assert!((ga - fa).abs() < 1e-6 * fa.abs(), "{ga} {fa}");
        assert!((gb - fb).abs() < 1e-6 * fb.abs(), "{gb} {fb}");
    }
}
