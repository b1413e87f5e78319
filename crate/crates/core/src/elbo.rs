//! The training objective: reconstruction lower bound minus the KL terms,
//! with closed-form KLs for the Normal, Beta and LogNormal families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::sample::{beta_with_noise, open_uniform, standard_normal};
use crate::diffcore::special::{digamma, ln_beta};
use crate::diffcore::gradcheck::{relative_error, GradCheckReport};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generative::{seed_embedding, HyperParams, ModelState, PROB_FLOOR};
use crate::inference::{BatchEncoding, VariationalState};

/// The four model-design switches. `true` keeps the design in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub multi_origin: bool,
    pub two_sets_of_topics: bool,
    pub auto_supervision: bool,
    pub pretrained_init: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            multi_origin: true,
            two_sets_of_topics: true,
            auto_supervision: true,
            pretrained_init: true,
        }
    }
}

impl Ablation {
    /// Parses a comma list of switch names to turn off.
    pub fn disable_list(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "multi_origin" => a.multi_origin = false,
                "two_sets_of_topics" => a.two_sets_of_topics = false,
                "auto_supervision" => a.auto_supervision = false,
                "pretrained_init" => a.pretrained_init = false,
                other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSettings {
    pub hp: HyperParams,
    pub ablation: Ablation,
    /// Transcript term uses π̃ and φ̃^R (`true`) or π and φ^R.
    pub transcript_tilde_params: bool,
    /// Number of training documents, for scaling the global KL terms.
    pub corpus_size: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_transcript: f64,
    pub recon_comment: f64,
    pub recon_label: f64,
    pub recon_img: f64,
    pub recon_mot: f64,
    pub recon_aud: f64,
    pub kl_theta: f64,
    pub kl_pi_t: f64,
    pub kl_pi: f64,
    pub kl_eta: f64,
    #[serde(rename = "kl_phiS")]
    pub kl_phi_s: f64,
    #[serde(rename = "kl_phiR")]
    pub kl_phi_r: f64,
    #[serde(rename = "kl_phiR_t")]
    pub kl_phi_r_t: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn recon_sum(&self) -> f64 {
        self.recon_transcript + self.recon_comment + self.recon_label + self.recon_img + self.recon_mot + self.recon_aud
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl_theta + self.kl_pi_t + self.kl_pi + self.kl_eta + self.kl_phi_s + self.kl_phi_r + self.kl_phi_r_t
    }

    pub fn add(&mut self, o: &ElboBreakdown) {
        self.recon_transcript += o.recon_transcript;
        self.recon_comment += o.recon_comment;
        self.recon_label += o.recon_label;
        self.recon_img += o.recon_img;
        self.recon_mot += o.recon_mot;
        self.recon_aud += o.recon_aud;
        self.kl_theta += o.kl_theta;
        self.kl_pi_t += o.kl_pi_t;
        self.kl_pi += o.kl_pi;
        self.kl_eta += o.kl_eta;
        self.kl_phi_s += o.kl_phi_s;
        self.kl_phi_r += o.kl_phi_r;
        self.kl_phi_r_t += o.kl_phi_r_t;
        self.total += o.total;
    }
}

// ---------- closed forms ----------

/// KL(N(μ, diag σ²) ‖ N(0, σ₀² I)) with σ₀² = (K-1)/(αK).
pub fn kl_normal_topic(mu: &[f64], sigma: &[f64], hp: &HyperParams) -> Result<f64> {
    kl_normal_diag(mu, sigma, hp.prior_variance())
}

pub fn kl_normal_diag(mu: &[f64], sigma: &[f64], prior_var: f64) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape {
            op: "kl_normal",
            left: [1, mu.len()],
            right: [1, sigma.len()],
        });
    }
    if sigma.iter().any(|&s| !(s > 0.0)) || !(prior_var > 0.0) {
        return Err(Error::Domain("normal scales must be positive".into()));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            // ratio form keeps identical distributions at exactly 0
            let r = s * s / prior_var;
            0.5 * (r - 1.0 - r.ln() + m * m / prior_var)
        })
        .sum())
}

/// KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²)) summed over coordinates.
pub fn kl_normal_pair(mu1: &[f64], s1: &[f64], mu2: &[f64], s2: &[f64]) -> f64 {
    mu1.iter()
        .zip(s1)
        .zip(mu2.iter().zip(s2))
        .map(|((&m1, &a), (&m2, &b))| (b / a).ln() + (a * a + (m1 - m2).powi(2)) / (2.0 * b * b) - 0.5)
        .sum()
}

/// KL(Beta(a, b) ‖ Beta(a0, b0)).
pub fn kl_beta(a: f64, b: f64, a0: f64, b0: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a0 > 0.0 && b0 > 0.0) {
        return Err(Error::Domain(format!("Beta parameters must be positive: ({a}, {b}) vs ({a0}, {b0})")));
    }
    let dab = digamma(a + b);
    Ok(ln_beta(a0, b0) - ln_beta(a, b) + (a - a0) * (digamma(a) - dab) + (b - b0) * (digamma(b) - dab))
}

/// KL(LogNormal(μ, σ) ‖ LogNormal(m, γ)) for one element; equal to the
/// KL of the underlying normals.
pub fn kl_lognormal(loc: f64, scale: f64, loc_pri: f64, scale_pri: f64) -> Result<f64> {
    if !(scale > 0.0 && scale_pri > 0.0) {
        return Err(Error::Domain("LogNormal scales must be positive".into()));
    }
    Ok((scale_pri / scale).ln() + (scale * scale + (loc - loc_pri).powi(2)) / (2.0 * scale_pri * scale_pri) - 0.5)
}

// ---------- tape versions ----------

fn kl_normal_on(tape: &mut Tape, mu: Var, sigma: Var, prior_var: f64) -> Result<Var> {
    let [r, c] = tape.shape(mu);
    let m2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let q = tape.add(m2, s2)?;
    let q = tape.scale(q, 0.5 / prior_var);
    let ls = tape.ln(sigma);
    let d = tape.sub(q, ls)?;
    let s = tape.sum(d);
    let n = (r * c) as f64;
    Ok(tape.add_scalar(s, n * 0.5 * (prior_var.ln() - 1.0)))
}

/// Diagonal-Gaussian KL between two tape distributions, summed.
pub fn kl_normal_pair_on(tape: &mut Tape, mu1: Var, s1: Var, mu2: Var, s2: Var) -> Result<Var> {
    let l1 = tape.ln(s1);
    let l2 = tape.ln(s2);
    let lr = tape.sub(l2, l1)?;
    let a2 = tape.square(s1);
    let dm = tape.sub(mu1, mu2)?;
    let dm2 = tape.square(dm);
    let num = tape.add(a2, dm2)?;
    let b2 = tape.square(s2);
    let b2 = tape.scale(b2, 2.0);
    let frac = tape.div(num, b2)?;
    let t = tape.add(lr, frac)?;
    let s = tape.sum(t);
    let [r, c] = tape.shape(mu1);
    Ok(tape.add_scalar(s, -0.5 * (r * c) as f64))
}

fn kl_beta_on(tape: &mut Tape, a: Var, b: Var, a0: f64, b0: f64) -> Result<Var> {
    let [r, c] = tape.shape(a);
    let ab = tape.add(a, b)?;
    let la = tape.lgamma(a);
    let lb = tape.lgamma(b);
    let lab = tape.lgamma(ab);
    let lnb = tape.add(la, lb)?;
    let lnb = tape.sub(lnb, lab)?;
    let da = tape.digamma(a);
    let db = tape.digamma(b);
    let dab = tape.digamma(ab);
    let ta = tape.sub(da, dab)?;
    let am = tape.add_scalar(a, -a0);
    let ta = tape.mul(am, ta)?;
    let tb = tape.sub(db, dab)?;
    let bm = tape.add_scalar(b, -b0);
    let tb = tape.mul(bm, tb)?;
    let t = tape.add(ta, tb)?;
    let t = tape.sub(t, lnb)?;
    let s = tape.sum(t);
    Ok(tape.add_scalar(s, (r * c) as f64 * ln_beta(a0, b0)))
}

fn kl_lognormal_on(tape: &mut Tape, loc: Var, scale: Var, prior_loc: &Tensor, gamma: f64) -> Result<Var> {
    let pl = tape.constant(prior_loc.clone());
    let d = tape.sub(loc, pl)?;
    let d2 = tape.square(d);
    let s2 = tape.square(scale);
    let q = tape.add(d2, s2)?;
    let q = tape.scale(q, 0.5 / (gamma * gamma));
    let ls = tape.ln(scale);
    let t = tape.sub(q, ls)?;
    let s = tape.sum(t);
    let n = prior_loc.len() as f64;
    Ok(tape.add_scalar(s, n * (gamma.ln() - 0.5)))
}

/// All random draws used by one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    pub eps_r: Tensor,
    pub u_eta: Tensor,
    pub u_pi: Tensor,
    pub u_pi_t: Tensor,
    pub eps_phi_r: Tensor,
    pub eps_phi_r_t: Tensor,
    pub eps_phi_s: Tensor,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(batch: usize, k: usize, v: usize, u: usize, rng: &mut R) -> Self {
        Self {
            eps_r: standard_normal(batch, k, rng),
            u_eta: open_uniform(batch, 1, rng),
            u_pi: open_uniform(1, k, rng),
            u_pi_t: open_uniform(1, k, rng),
            eps_phi_r: standard_normal(k, v, rng),
            eps_phi_r_t: standard_normal(k, v, rng),
            eps_phi_s: standard_normal(k, u, rng),
        }
    }
}

/// Which parameter stores receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub model: bool,
    pub variational: bool,
}

impl Trainable {
    pub const E_STEP: Self = Self {
        model: false,
        variational: true,
    };
    pub const M_STEP: Self = Self {
        model: true,
        variational: false,
    };
    pub const ALL: Self = Self {
        model: true,
        variational: true,
    };
}

/// Tape handles of every ELBO term.
pub struct ElboVars {
    pub total: Var,
    pub terms: [Option<Var>; 13],
}

impl ElboVars {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        let v = |i: usize| self.terms[i].map_or(0.0, |x| tape.value(x).item());
        ElboBreakdown {
            recon_transcript: v(0),
            recon_comment: v(1),
            recon_label: v(2),
            recon_img: v(3),
            recon_mot: v(4),
            recon_aud: v(5),
            kl_theta: v(6),
            kl_pi_t: v(7),
            kl_pi: v(8),
            kl_eta: v(9),
            kl_phi_s: v(10),
            kl_phi_r: v(11),
            kl_phi_r_t: v(12),
            total: tape.value(self.total).item(),
        }
    }
}

/// `π_col ∘ φ^R + (1 - π_col) ∘ φ^S_emb`, with `pi` a `[1, K]` row.
fn mixed_topics(tape: &mut Tape, pi: Var, phi_r: Var, phi_s_emb: Var) -> Result<Var> {
    let pc = tape.transpose(pi);
    let qc = tape.one_minus(pc);
    let a = tape.mul_col(phi_r, pc)?;
    let b = tape.mul_col(phi_s_emb, qc)?;
    tape.add(a, b)
}

/// `b'(θ)` row-wise: `(βθ_k)² / (βθ_k + Σ_{i≠k} (βθ_i)²)`.
pub fn b_prime_on(tape: &mut Tape, theta: Var, beta: f64) -> Result<Var> {
    let h = tape.scale(theta, beta);
    let h2 = tape.square(h);
    let s = tape.sum_rows(h2);
    let d = tape.sub(h, h2)?;
    let d = tape.add_col(d, s)?;
    tape.div(h2, d)
}

fn modality_term(
    tape: &mut Tape,
    model: &ModelState,
    net: &crate::diffcore::MlpNet,
    theta: Var,
    f: &Tensor,
    xi: f64,
    trainable: bool,
) -> Result<Option<Var>> {
    if f.cols() == 0 {
        return Ok(None);
    }
    let pred = net.forward(&model.nets.store, tape, theta, trainable)?;
    let fv = tape.constant(f.clone());
    let d = tape.sub(fv, pred)?;
    let d2 = tape.square(d);
    let ss = tape.sum_rows(d2);
    let norm = tape.sqrt(ss);
    let s = tape.sum(norm);
    Ok(Some(tape.scale(s, -xi)))
}

fn sample_phi(tape: &mut Tape, loc: Var, scale: Var, eps: &Tensor) -> Result<Var> {
    let e = tape.constant(eps.clone());
    let n = tape.mul(scale, e)?;
    let n = tape.add(loc, n)?;
    // normalize(exp(n)) row-wise
    Ok(tape.softmax_rows(n))
}

/// Records the objective for one batch. The total is the ELBO (to be
/// maximized); callers minimize its negation.
pub fn elbo_on_tape(
    tape: &mut Tape,
    model: &ModelState,
    vs: &VariationalState,
    settings: &ObjectiveSettings,
    enc: &BatchEncoding,
    noise: &ElboNoise,
    trainable: Trainable,
) -> Result<ElboVars> {
    let hp = &settings.hp;
    let ab = settings.ablation;
    let (k, v, u) = (vs.k, vs.v, vs.u);
    let tv = trainable.variational;
    let batch = enc.len();
    if settings.corpus_size == 0 {
        return Err(Error::Precondition("corpus_size must be positive".into()));
    }
    let global = batch as f64 / settings.corpus_size as f64;
    let mut terms: [Option<Var>; 13] = [None; 13];

    // θ
    let x = tape.constant(enc.complete_input()?);
    let (mu, sigma) = vs.theta_params_on(tape, x, tv)?;
    let eps = tape.constant(noise.eps_r.clone());
    let se = tape.mul(sigma, eps)?;
    let r = tape.add(mu, se)?;
    let theta = tape.softmax_rows(r);
    terms[6] = Some(kl_normal_on(tape, mu, sigma, hp.prior_variance())?);

    // φ^S is used by every variant
    let (ls, ss) = vs.phi_s_on(tape, tv)?;
    let phi_s = sample_phi(tape, ls, ss, &noise.eps_phi_s)?;
    let emb = tape.constant(seed_embedding(&model.seed_regular, v));
    let phi_s_emb = tape.matmul(phi_s, emb)?;
    let ln_bs = model.b_s.map(|x| x.max(PROB_FLOOR).ln());
    let kl_s = kl_lognormal_on(tape, ls, ss, &ln_bs, hp.gamma3(u))?;
    terms[10] = Some(tape.scale(kl_s, global));
    let ln_br = model.b_r.map(|x| x.max(PROB_FLOOR).ln());

    // comment-side topic mixture M
    let m = if ab.two_sets_of_topics {
        let (lr, sr) = vs.phi_r_on(tape, tv)?;
        let phi_r = sample_phi(tape, lr, sr, &noise.eps_phi_r)?;
        let kl = kl_lognormal_on(tape, lr, sr, &ln_br, hp.gamma1(v))?;
        terms[11] = Some(tape.scale(kl, global));
        let pi = if ab.auto_supervision {
            let (pa, pb) = vs.pi_on(tape, tv)?;
            let kl = kl_beta_on(tape, pa, pb, hp.delta1, hp.delta2)?;
            terms[8] = Some(tape.scale(kl, global));
            beta_with_noise(tape, pa, pb, &noise.u_pi)?
        } else {
            tape.constant(Tensor::full(1, k, 0.5))
        };
        mixed_topics(tape, pi, phi_r, phi_s_emb)?
    } else {
        phi_s_emb
    };

    // comments
    let theta_m = tape.matmul(theta, m)?;
    let p_comment = if ab.multi_origin {
        let (ea, eb) = vs.eta_on(tape, &enc.comment_bow, tv)?;
        let eta = beta_with_noise(tape, ea, eb, &noise.u_eta)?;
        terms[9] = Some(kl_beta_on(tape, ea, eb, hp.tau1, hp.tau2)?);
        let col = tape.sum_cols(m);
        let am = tape.scale(col, 1.0 / k as f64);
        let neg_am = tape.neg(am);
        let d = tape.add_row(theta_m, neg_am)?;
        let d = tape.mul_col(d, eta)?;
        tape.add_row(d, am)?
    } else {
        theta_m
    };
    let xc = tape.constant(enc.comment_counts.clone());
    let lp = tape.log_clamp(p_comment, PROB_FLOOR);
    let wc = tape.mul(xc, lp)?;
    terms[1] = Some(tape.sum(wc));

    // transcripts
    let q_transcript = if ab.multi_origin {
        let mt = if !ab.two_sets_of_topics {
            phi_s_emb
        } else {
            let (lt, st) = vs.phi_r_t_on(tape, tv)?;
            let phi_r_t = sample_phi(tape, lt, st, &noise.eps_phi_r_t)?;
            let kl = kl_lognormal_on(tape, lt, st, &ln_br, hp.gamma2(v))?;
            terms[12] = Some(tape.scale(kl, global));
            let pi_t = if ab.auto_supervision {
                let (pa, pb) = vs.pi_t_on(tape, tv)?;
                let kl = kl_beta_on(tape, pa, pb, hp.delta1_t, hp.delta2_t)?;
                terms[7] = Some(tape.scale(kl, global));
                beta_with_noise(tape, pa, pb, &noise.u_pi_t)?
            } else {
                tape.constant(Tensor::full(1, k, 0.5))
            };
            if settings.transcript_tilde_params {
                mixed_topics(tape, pi_t, phi_r_t, phi_s_emb)?
            } else {
                m
            }
        };
        let bp = b_prime_on(tape, theta, hp.beta_ratio)?;
        tape.matmul(bp, mt)?
    } else {
        theta_m
    };
    let xt = tape.constant(enc.transcript_counts.clone());
    let lq = tape.log_clamp(q_transcript, PROB_FLOOR);
    let wt = tape.mul(xt, lq)?;
    terms[0] = Some(tape.sum(wt));

    // label: -CE from logits
    let tm = trainable.model;
    let z = model.nets.label.forward(&model.nets.store, tape, theta, tm)?;
    let sp = tape.softplus(z);
    let y = tape.constant(enc.labels.clone());
    let yz = tape.mul(y, z)?;
    let ce = tape.sub(sp, yz)?;
    let ce = tape.sum(ce);
    terms[2] = Some(tape.neg(ce));

    terms[3] = modality_term(tape, model, &model.nets.img, theta, &enc.f_img, hp.xi_img, tm)?;
    terms[4] = modality_term(tape, model, &model.nets.mot, theta, &enc.f_mot, hp.xi_mot, tm)?;
    terms[5] = modality_term(tape, model, &model.nets.aud, theta, &enc.f_aud, hp.xi_aud, tm)?;

    let mut total: Option<Var> = None;
    for (i, t) in terms.iter().enumerate() {
        let Some(t) = *t else { continue };
        let signed = if i < 6 { t } else { tape.neg(t) };
        total = Some(match total {
            None => signed,
            Some(acc) => tape.add(acc, signed)?,
        });
    }
    Ok(ElboVars {
        total: total.expect("label term always present"),
        terms,
    })
}

/// Evaluation without gradients: draws the noise and returns the breakdown.
pub fn elbo_total<R: Rng + ?Sized>(
    enc: &BatchEncoding,
    model: &ModelState,
    vs: &VariationalState,
    settings: &ObjectiveSettings,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    let noise = ElboNoise::draw(enc.len(), vs.k, vs.v, vs.u, rng);
    let mut tape = Tape::new();
    let vars = elbo_on_tape(
        &mut tape,
        model,
        vs,
        settings,
        enc,
        &noise,
        Trainable {
            model: false,
            variational: false,
        },
    )?;
    Ok(vars.breakdown(&tape))
}

/// Finite-difference check of the full objective gradient with respect to
/// every generative and variational parameter, at fixed noise.
pub fn check_elbo_gradients(
    model: &mut ModelState,
    vs: &mut VariationalState,
    settings: &ObjectiveSettings,
    enc: &BatchEncoding,
    noise: &ElboNoise,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let eval = |model: &ModelState, vs: &VariationalState| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = elbo_on_tape(&mut tape, model, vs, settings, enc, noise, Trainable::ALL)?;
        Ok(tape.value(vars.total).item())
    };
    let (gm, gv) = {
        let mut tape = Tape::new();
        let vars = elbo_on_tape(&mut tape, model, vs, settings, enc, noise, Trainable::ALL)?;
        let g = tape.backward(vars.total)?;
        let grab = |store: &ParamStore| -> Vec<Option<Tensor>> {
            store.ids().map(|id| g.get(store, id).cloned()).collect()
        };
        (grab(&model.nets.store), grab(&vs.store))
    };
    let mut report = GradCheckReport::default();
    for which in 0..2 {
        let grads = if which == 0 { &gm } else { &gv };
        for (pi, grad) in grads.iter().enumerate() {
            let id = ParamId(pi);
            let n = if which == 0 { model.nets.store.get(id).len() } else { vs.store.get(id).len() };
            for e in 0..n {
                let at = |model: &mut ModelState, vs: &mut VariationalState, x: Option<f64>| -> f64 {
                    let store = if which == 0 { &mut model.nets.store } else { &mut vs.store };
                    let slot = &mut store.get_mut(id).data_mut()[e];
                    let old = *slot;
                    if let Some(x) = x {
                        *slot = x;
                    }
                    old
                };
                let orig = at(model, vs, None);
                at(model, vs, Some(orig + step));
                let up = eval(model, vs)?;
                at(model, vs, Some(orig - step));
                let down = eval(model, vs)?;
                at(model, vs, Some(orig));
                let numeric = (up - down) / (2.0 * step);
                let a = grad.as_ref().map_or(0.0, |g| g.data()[e]);
                let rel = relative_error(a, numeric, floor);
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = rel;
                    let store = if which == 0 { &model.nets.store } else { &vs.store };
                    report.worst = Some((store.name(id).to_string(), e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
