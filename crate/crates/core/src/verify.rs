//! Self-checks of the closed forms against enumeration and Monte Carlo,
//! run by the `verify` subcommand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureDims;
use crate::diffcore::special::ln_beta;
use crate::diffcore::Tensor;
use crate::elbo::{kl_beta, kl_lognormal, kl_normal_diag};
use crate::error::Result;
use crate::generative::{
    comment_word_prob, masked_topic, masked_topic_bound, masked_topic_oracle, transcript_word_prob, GenerativeNets, ModelState,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let row = t.row_slice_mut(r);
        row.iter_mut().for_each(|x| *x = rng.random::<f64>() + 1e-3);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    random_rows(1, k, rng).into_data()
}

/// A random small model with U seed words embedded at distinct regular ids.
pub fn random_state<R: Rng + ?Sized>(k: usize, v: usize, u: usize, rng: &mut R) -> Result<ModelState> {
    let mut ids: Vec<usize> = (0..v).collect();
    ids.shuffle(rng);
    ids.truncate(u);
    let dims = FeatureDims { img: 1, mot: 1, aud: 1 };
    Ok(ModelState {
        phi_s: random_rows(k, u, rng),
        phi_r: random_rows(k, v, rng),
        phi_r_t: random_rows(k, v, rng),
        pi: (0..k).map(|_| rng.random()).collect(),
        pi_t: (0..k).map(|_| rng.random()).collect(),
        assoc: random_simplex(k, rng),
        b_r: random_rows(k, v, rng),
        b_s: random_rows(k, u, rng),
        seed_regular: ids,
        nets: GenerativeNets::new(k, dims, &[2], rng)?,
    })
}

/// P(w | z, x) of the original process.
fn word_given(w: usize, z: usize, regular: bool, phi_r: &Tensor, s: &ModelState) -> f64 {
    if regular {
        phi_r.get(z, w)
    } else {
        s.seed_regular.iter().position(|&r| r == w).map_or(0.0, |u| s.phi_s.get(z, u))
    }
}

/// Sum over the comment's origin t, topic z and regular/seed switch x.
pub fn enumerate_comment(w: usize, theta: &[f64], eta: f64, s: &ModelState) -> f64 {
    let mut p = 0.0;
    for t in [true, false] {
        let pt = if t { eta } else { 1.0 - eta };
        let dist = if t { theta } else { &s.assoc[..] };
        for (z, &pz) in dist.iter().enumerate() {
            for x in [true, false] {
                let px = if x { s.pi[z] } else { 1.0 - s.pi[z] };
                p += pt * pz * px * word_given(w, z, x, &s.phi_r, s);
            }
        }
    }
    p
}

pub fn enumerate_transcript(w: usize, theta_t: &[f64], s: &ModelState) -> f64 {
    let mut p = 0.0;
    for (z, &pz) in theta_t.iter().enumerate() {
        for x in [true, false] {
            let px = if x { s.pi_t[z] } else { 1.0 - s.pi_t[z] };
            p += pz * px * word_given(w, z, x, &s.phi_r_t, s);
        }
    }
    p
}

/// Exact E[θ̃] by enumerating all 2^K masks.
pub fn exact_masked_mean(h: &[f64]) -> Vec<f64> {
    let k = h.len();
    let mut mean = vec![0.0; k];
    for bits in 0u32..(1 << k) {
        let mask: Vec<bool> = (0..k).map(|i| bits >> i & 1 == 1).collect();
        let p: f64 = mask.iter().zip(h).map(|(&m, &x)| if m { x } else { 1.0 - x }).product();
        for (m, t) in mean.iter_mut().zip(masked_topic(h, &mask)) {
            *m += p * t;
        }
    }
    mean
}

struct McStat {
    mean: f64,
    stderr: f64,
}

fn mc<R: Rng + ?Sized>(n: usize, rng: &mut R, mut f: impl FnMut(&mut R) -> f64) -> McStat {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = f(rng);
        s += x;
        s2 += x * x;
    }
    let nf = n as f64;
    let mean = s / nf;
    McStat {
        mean,
        stderr: ((s2 / nf - mean * mean).max(0.0) / (nf - 1.0)).sqrt(),
    }
}

fn normal_logpdf(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyBudget {
    pub marginal_instances: usize,
    pub bound_vectors: usize,
    pub bound_samples: usize,
    pub kl_parameterizations: usize,
    pub kl_samples: usize,
}

impl Default for VerifyBudget {
    fn default() -> Self {
        Self {
            marginal_instances: 200,
            bound_vectors: 100,
            bound_samples: 20_000,
            kl_parameterizations: 10,
            kl_samples: 100_000,
        }
    }
}

pub fn run_verification(seed: u64, budget: VerifyBudget) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (mut worst_c, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..budget.marginal_instances {
        let k = rng.random_range(1..=4);
        let v = rng.random_range(2..=6);
        let u = rng.random_range(1..=v.min(4));
        let s = random_state(k, v, u, &mut rng)?;
        let theta = random_simplex(k, &mut rng);
        let theta_t = random_simplex(k, &mut rng);
        let eta = rng.random::<f64>();
        for w in 0..v {
            worst_c = worst_c.max((comment_word_prob(w, &theta, eta, &s) - enumerate_comment(w, &theta, eta, &s)).abs());
            worst_t = worst_t.max((transcript_word_prob(w, &theta_t, &s) - enumerate_transcript(w, &theta_t, &s)).abs());
        }
    }
    out.push(check("comment marginal vs enumeration", worst_c <= 1e-12, format!("max abs err {worst_c:.3e}")));
    out.push(check("transcript marginal vs enumeration", worst_t <= 1e-12, format!("max abs err {worst_t:.3e}")));

    let h: Vec<f64> = [0.2, 0.3, 0.5].iter().map(|t| 0.6 * t).collect();
    let tt = masked_topic(&h, &[true, false, true]);
    let ok = (h[0] - 0.12).abs() < 1e-15
        && (h[1] - 0.18).abs() < 1e-15
        && (h[2] - 0.30).abs() < 1e-15
        && (tt[0] - 2.0 / 7.0).abs() < 1e-15
        && tt[1] == 0.0
        && (tt[2] - 5.0 / 7.0).abs() < 1e-15;
    out.push(check("masking worked example", ok, format!("h {h:?}, masked {tt:?}")));

    let exact = exact_masked_mean(&[0.5, 0.5]);
    let bound = masked_topic_bound(&[0.5, 0.5]);
    let ok = (exact[0] - 0.375).abs() < 1e-15 && (bound[0] - 1.0 / 3.0).abs() < 1e-15 && bound[0] <= exact[0];
    out.push(check("masked mean bound, K=2 exact", ok, format!("exact {:.6}, bound {:.6}", exact[0], bound[0])));

    let mut violations = 0;
    for _ in 0..budget.bound_vectors {
        let k = rng.random_range(2..=8);
        let h: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let est = masked_topic_oracle(&h, budget.bound_samples.max(10_000), &mut rng)?;
        for i in 0..k {
            if est.bound[i] > est.mean[i] + 3.0 * est.stderr[i] {
                violations += 1;
            }
        }
    }
    out.push(check(
        "masked mean bound vs Monte Carlo",
        violations == 0,
        format!("{violations} coordinate violations over {} vectors", budget.bound_vectors),
    ));

    let n = budget.kl_samples;
    let mut worst = 0.0f64;
    let mut zero = true;
    for _ in 0..budget.kl_parameterizations {
        let (m1, s1) = (rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0));
        let pv: f64 = rng.random_range(0.3..3.0);
        let closed = kl_normal_diag(&[m1], &[s1], pv)?;
        let est = mc(n, &mut rng, |r| {
            let x = m1 + s1 * Distribution::<f64>::sample(&StandardNormal, r);
            normal_logpdf(x, m1, s1) - normal_logpdf(x, 0.0, pv.sqrt())
        });
        worst = worst.max((closed - est.mean).abs() / est.stderr.max(1e-300));
        let want = 0.5 * m1 * m1 / pv;
        zero &= (kl_normal_diag(&[m1], &[pv.sqrt()], pv)? - want).abs() <= 1e-12 * want.max(1.0);
    }
    zero &= kl_normal_diag(&[0.0], &[1.5], 2.25)? == 0.0;
    out.push(check("Normal KL vs Monte Carlo", worst < 3.0 && zero, format!("worst {worst:.2} stderr")));

    let mut worst = 0.0f64;
    for _ in 0..budget.kl_parameterizations {
        let (a, b) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
        let (a0, b0) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
        let closed = kl_beta(a, b, a0, b0)?;
        let dist = Beta::new(a, b).expect("positive");
        let est = mc(n, &mut rng, |r| {
            let x: f64 = dist.sample(r).clamp(1e-300, 1.0 - 1e-16);
            beta_logpdf(x, a, b) - beta_logpdf(x, a0, b0)
        });
        worst = worst.max((closed - est.mean).abs() / est.stderr.max(1e-300));
    }
    let zero = kl_beta(2.5, 0.7, 2.5, 0.7)? == 0.0;
    out.push(check("Beta KL vs Monte Carlo", worst < 3.0 && zero, format!("worst {worst:.2} stderr")));

    let mut worst = 0.0f64;
    for _ in 0..budget.kl_parameterizations {
        let (m, s) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..1.5));
        let (m0, g) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..1.5));
        let closed = kl_lognormal(m, s, m0, g)?;
        let est = mc(n, &mut rng, |r| {
            let y = (m + s * Distribution::<f64>::sample(&StandardNormal, r)).exp();
            let ly = y.ln();
            (normal_logpdf(ly, m, s) - ly) - (normal_logpdf(ly, m0, g) - ly)
        });
        worst = worst.max((closed - est.mean).abs() / est.stderr.max(1e-300));
    }
    let zero = kl_lognormal(-0.4, 0.9, -0.4, 0.9)? == 0.0;
    out.push(check("LogNormal KL vs Monte Carlo", worst < 3.0 && zero, format!("worst {worst:.2} stderr")));
    Ok(out)
}

pub fn render(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{tag}  {:<width$}  {}\n", c.name, c.detail));
    }
    s
}
