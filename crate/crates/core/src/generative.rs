//! Generative side of the model: hyperparameters, model state, the forward
//! sampler of the original process and the closed-form word likelihoods of
//! the transformed process.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureDims, VideoDoc, Vocabulary};
use crate::diffcore::tape::{sigmoid, softmax_rows};
use crate::diffcore::{Activation, MlpNet, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-300;

/// Store tag of the generative networks.
pub const MODEL_TAG: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta_ratio: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta1_t: f64,
    pub delta2_t: f64,
    /// `None` resolves to `(V-1)/V`.
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    /// `None` resolves to `(U-1)/U`.
    pub gamma3: Option<f64>,
    pub k: usize,
    pub xi_img: f64,
    pub xi_mot: f64,
    pub xi_aud: f64,
    pub learning_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_ratio: 0.6,
            tau1: 1.0,
            tau2: 1.0,
            delta1: 1.0,
            delta2: 1.0,
            delta1_t: 1.0,
            delta2_t: 1.0,
            gamma1: None,
            gamma2: None,
            gamma3: None,
            k: 40,
            xi_img: 1.0,
            xi_mot: 1.0,
            xi_aud: 1.0,
            learning_rate: 1e-3,
        }
    }
}

impl HyperParams {
    pub fn gamma1(&self, v: usize) -> f64 {
        self.gamma1.unwrap_or((v as f64 - 1.0) / v as f64)
    }

    pub fn gamma2(&self, v: usize) -> f64 {
        self.gamma2.unwrap_or((v as f64 - 1.0) / v as f64)
    }

    pub fn gamma3(&self, u: usize) -> f64 {
        self.gamma3.unwrap_or((u as f64 - 1.0) / u as f64)
    }

    /// Prior variance of each coordinate of r_d: `(K-1)/(αK)`.
    pub fn prior_variance(&self) -> f64 {
        (self.k as f64 - 1.0) / (self.alpha * self.k as f64)
    }

    pub fn validate(&self, v: usize, u: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} out of range")));
        if !(self.beta_ratio > 0.0 && self.beta_ratio <= 1.0) {
            return bad("beta_ratio");
        }
        if self.k < 2 {
            return bad("k (need at least 2 topics)");
        }
        for (name, x) in [
            ("alpha", self.alpha),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta1_t", self.delta1_t),
            ("delta2_t", self.delta2_t),
            ("gamma1", self.gamma1(v)),
            ("gamma2", self.gamma2(v)),
            ("learning_rate", self.learning_rate),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return bad(name);
            }
        }
        // γ₃ = (U-1)/U is 0 for a one-word lexicon; that is only usable if overridden
        if !(self.gamma3(u) > 0.0) {
            return Err(Error::Config(
                "gamma3 resolves to 0 (single seed word); set gamma3 explicitly".into(),
            ));
        }
        for (name, x) in [("xi_img", self.xi_img), ("xi_mot", self.xi_mot), ("xi_aud", self.xi_aud)] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(name);
            }
        }
        Ok(())
    }
}

/// Widths of the generative networks NN^L, NN^I, NN^M, NN^A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeNets {
    pub store: ParamStore,
    pub label: MlpNet,
    pub img: MlpNet,
    pub mot: MlpNet,
    pub aud: MlpNet,
}

impl GenerativeNets {
    pub fn new<R: Rng + ?Sized>(k: usize, dims: FeatureDims, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new(MODEL_TAG);
        let widths = |out: usize| {
            let mut w = vec![k];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        let label = MlpNet::new(&mut store, "nn_l", &widths(1), Activation::Relu, Activation::Identity, rng)?;
        let img = MlpNet::new(&mut store, "nn_i", &widths(dims.img.max(1)), Activation::Relu, Activation::Identity, rng)?;
        let mot = MlpNet::new(&mut store, "nn_m", &widths(dims.mot.max(1)), Activation::Relu, Activation::Identity, rng)?;
        let aud = MlpNet::new(&mut store, "nn_a", &widths(dims.aud.max(1)), Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            store,
            label,
            img,
            mot,
            aud,
        })
    }

    /// `(f^I, f^M, f^A)` for each row of `theta`.
    pub fn generate_modalities(&self, theta: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            self.img.apply(&self.store, theta)?,
            self.mot.apply(&self.store, theta)?,
            self.aud.apply(&self.store, theta)?,
        ))
    }

    /// Sigmoid of the label head, one value per row of `theta`.
    pub fn generate_label_prob(&self, theta: &Tensor) -> Result<Vec<f64>> {
        Ok(self.label.apply(&self.store, theta)?.data().iter().map(|&z| sigmoid(z)).collect())
    }
}

/// All generative-side quantities at a point estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub phi_s: Tensor,
    pub phi_r: Tensor,
    pub phi_r_t: Tensor,
    pub pi: Vec<f64>,
    pub pi_t: Vec<f64>,
    pub assoc: Vec<f64>,
    pub b_r: Tensor,
    pub b_s: Tensor,
    /// Regular-word index of every seed word.
    pub seed_regular: Vec<usize>,
    pub nets: GenerativeNets,
}

impl ModelState {
    pub fn num_topics(&self) -> usize {
        self.phi_r.rows()
    }

    pub fn num_regular(&self) -> usize {
        self.phi_r.cols()
    }

    pub fn num_seed(&self) -> usize {
        self.phi_s.cols()
    }

    /// Seed index of a regular word, if it is in the lexicon.
    pub fn regular_to_seed(&self, w: usize) -> Option<usize> {
        self.seed_regular.iter().position(|&r| r == w)
    }

    /// `U x V` 0/1 matrix mapping seed-lexicon entries onto regular words.
    pub fn seed_embedding(&self) -> Tensor {
        seed_embedding(&self.seed_regular, self.num_regular())
    }

    /// φ^S embedded into V-space, zero outside the lexicon.
    pub fn phi_s_embedded(&self) -> Tensor {
        self.phi_s.matmul(&self.seed_embedding()).expect("U x V embedding")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_topics();
        for (name, m) in [("phi_s", &self.phi_s), ("phi_r", &self.phi_r), ("phi_r_t", &self.phi_r_t)] {
            if m.rows() != k {
                return Err(Error::Schema(format!("{name} has {} rows, expected {k}", m.rows())));
            }
            for r in 0..k {
                let row = m.row_slice(r);
                if row.iter().any(|&x| !(x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!("{name} row {r} is not a distribution")));
                }
            }
        }
        for (name, v) in [("pi", &self.pi), ("pi_t", &self.pi_t)] {
            if v.len() != k || v.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Domain(format!("{name} must be {k} values in [0, 1]")));
            }
        }
        if self.seed_regular.len() != self.num_seed() || self.seed_regular.iter().any(|&w| w >= self.num_regular()) {
            return Err(Error::Schema("seed lexicon does not embed into the regular vocabulary".into()));
        }
        Ok(())
    }
}

pub fn seed_embedding(seed_regular: &[usize], v: usize) -> Tensor {
    let mut e = Tensor::zeros(seed_regular.len(), v);
    for (u, &w) in seed_regular.iter().enumerate() {
        e.set(u, w, 1.0);
    }
    e
}

pub fn seed_regular_map(vocab: &Vocabulary) -> Result<Vec<usize>> {
    vocab
        .seed_to_regular()
        .into_iter()
        .zip(vocab.seed_words())
        .map(|(r, w)| r.ok_or_else(|| Error::Schema(format!("seed word {w:?} is not a regular word"))))
        .collect()
}

/// Mixed topic-word column for word `w`: `π_k φ^R_k(w) + (1-π_k) φ^S_k(w)`.
fn mixed_column(w: usize, pi: &[f64], phi_r: &Tensor, state: &ModelState) -> Vec<f64> {
    let s = state.regular_to_seed(w);
    (0..pi.len())
        .map(|k| {
            let seed = s.map_or(0.0, |u| state.phi_s.get(k, u));
            pi[k] * phi_r.get(k, w) + (1.0 - pi[k]) * seed
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability of comment word `w` given θ and η (words outside the seed
/// lexicon have zero seed-topic mass).
pub fn comment_word_prob(w: usize, theta: &[f64], eta: f64, state: &ModelState) -> f64 {
    let c = mixed_column(w, &state.pi, &state.phi_r, state);
    eta * dot(&c, theta) + (1.0 - eta) * dot(&c, &state.assoc)
}

/// Log of [`comment_word_prob`], clamped at 1e-300. The flag reports a clamp.
pub fn comment_word_logprob(w: usize, theta: &[f64], eta: f64, state: &ModelState) -> (f64, bool) {
    clamp_ln(comment_word_prob(w, theta, eta, state))
}

fn clamp_ln(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (PROB_FLOOR.ln(), true)
    } else {
        (p.ln(), false)
    }
}

/// Exact transcript-word probability given the transcript topic θ̃.
pub fn transcript_word_prob(w: usize, theta_t: &[f64], state: &ModelState) -> f64 {
    dot(&mixed_column(w, &state.pi_t, &state.phi_r_t, state), theta_t)
}

/// Keep probabilities `h = β·θ` of the transcript topic mask.
pub fn mask_probabilities(theta: &[f64], beta: f64) -> Vec<f64> {
    theta.iter().map(|t| beta * t).collect()
}

/// `b'_k = (βθ_k)² / (βθ_k + Σ_{i≠k} (βθ_i)²)`.
pub fn b_prime(theta: &[f64], beta: f64) -> Vec<f64> {
    masked_topic_bound(&mask_probabilities(theta, beta))
}

/// `h_k² / (h_k + Σ_{i≠k} h_i²)`, 0 where h_k = 0.
pub fn masked_topic_bound(h: &[f64]) -> Vec<f64> {
    let sq: f64 = h.iter().map(|x| x * x).sum();
    h.iter()
        .map(|&hk| {
            if hk == 0.0 {
                0.0
            } else {
                hk * hk / (hk + sq - hk * hk)
            }
        })
        .collect()
}

/// Log of the transcript-word lower bound `mixed(w) · b'(θ)`.
pub fn transcript_word_logprob_lb(w: usize, theta: &[f64], state: &ModelState, hp: &HyperParams) -> (f64, bool) {
    let c = mixed_column(w, &state.pi_t, &state.phi_r_t, state);
    clamp_ln(dot(&c, &b_prime(theta, hp.beta_ratio)))
}

/// θ̃ = normalize(h ∘ mask), the zero vector for an all-zero mask.
pub fn masked_topic(h: &[f64], mask: &[bool]) -> Vec<f64> {
    let total: f64 = h.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
    h.iter()
        .zip(mask)
        .map(|(&x, &m)| if m && total > 0.0 { x / total } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTopicEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub bound: Vec<f64>,
}

/// Monte Carlo estimate of E[θ̃] under masks I_k ~ Bernoulli(h_k), with the
/// analytic lower bound.
pub fn masked_topic_oracle<R: Rng + ?Sized>(h: &[f64], n_samples: usize, rng: &mut R) -> Result<MaskedTopicEstimate> {
    if n_samples < 10_000 {
        return Err(Error::Precondition("masked_topic_oracle needs at least 10^4 samples".into()));
    }
    if h.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain("h must lie in [0, 1]".into()));
    }
    let k = h.len();
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut mask = vec![false; k];
    for _ in 0..n_samples {
        for (m, &p) in mask.iter_mut().zip(h) {
            *m = rng.random::<f64>() < p;
        }
        let t = masked_topic(h, &mask);
        for i in 0..k {
            sum[i] += t[i];
            sum_sq[i] += t[i] * t[i];
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = mean
        .iter()
        .zip(&sum_sq)
        .map(|(m, s2)| ((s2 / n - m * m).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    Ok(MaskedTopicEstimate {
        mean,
        stderr,
        bound: masked_topic_bound(h),
    })
}

/// Latent variables behind one sampled document.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDraw {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub h: Vec<f64>,
    pub mask: Vec<bool>,
    pub theta_t: Vec<f64>,
    pub eta: f64,
    pub t: Vec<bool>,
    pub z: Vec<usize>,
    pub x: Vec<bool>,
    pub z_t: Vec<usize>,
    pub x_t: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DocSizes {
    pub transcript_words: usize,
    pub comment_words: usize,
    /// Words per comment when splitting the flattened comment stream.
    pub words_per_comment: usize,
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &x) in p.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    // numerical slack: last index with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn draw_word<R: Rng + ?Sized>(
    z: usize,
    regular: bool,
    phi_r: &Tensor,
    state: &ModelState,
    rng: &mut R,
) -> usize {
    if regular {
        categorical(phi_r.row_slice(z), rng)
    } else {
        state.seed_regular[categorical(state.phi_s.row_slice(z), rng)]
    }
}

/// Runs the original generative process once. `forced_mask` overrides the
/// Bernoulli draw of I_d.
pub fn sample_document_with<R: Rng + ?Sized>(
    state: &ModelState,
    hp: &HyperParams,
    sizes: DocSizes,
    forced_mask: Option<&[bool]>,
    rng: &mut R,
) -> Result<(VideoDoc, LatentDraw)> {
    let k = state.num_topics();
    let sd = hp.prior_variance().sqrt();
    let r: Vec<f64> = (0..k).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    let theta = softmax_rows(&Tensor::row(r.clone())).into_data();
    let h = mask_probabilities(&theta, hp.beta_ratio);
    let mut mask: Vec<bool> = match forced_mask {
        Some(m) => m.to_vec(),
        None => h.iter().map(|&p| rng.random::<f64>() < p).collect(),
    };
    let mut transcript_words = sizes.transcript_words;
    if transcript_words > 0 && forced_mask.is_none() {
        let mut tries = 0;
        while !mask.iter().any(|&m| m) && tries < 100 {
            mask = h.iter().map(|&p| rng.random::<f64>() < p).collect();
            tries += 1;
        }
    }
    let theta_t = masked_topic(&h, &mask);
    if theta_t.iter().all(|&x| x == 0.0) {
        transcript_words = 0;
    }
    let eta = Beta::new(hp.tau1, hp.tau2)
        .map_err(|e| Error::Domain(e.to_string()))?
        .sample(rng);

    let mut z_t = Vec::with_capacity(transcript_words);
    let mut x_t = Vec::with_capacity(transcript_words);
    let mut transcript = Vec::with_capacity(transcript_words);
    for _ in 0..transcript_words {
        let z = categorical(&theta_t, rng);
        let x = rng.random::<f64>() < state.pi_t[z];
        transcript.push(draw_word(z, x, &state.phi_r_t, state, rng));
        z_t.push(z);
        x_t.push(x);
    }
    let mut ts = Vec::with_capacity(sizes.comment_words);
    let mut zs = Vec::with_capacity(sizes.comment_words);
    let mut xs = Vec::with_capacity(sizes.comment_words);
    let mut comments = Vec::with_capacity(sizes.comment_words);
    for _ in 0..sizes.comment_words {
        let t = rng.random::<f64>() < eta;
        let z = if t {
            categorical(&theta, rng)
        } else {
            categorical(&state.assoc, rng)
        };
        let x = rng.random::<f64>() < state.pi[z];
        comments.push(draw_word(z, x, &state.phi_r, state, rng));
        ts.push(t);
        zs.push(z);
        xs.push(x);
    }
    let per = sizes.words_per_comment.max(1);
    let mut comment_lengths = vec![per; sizes.comment_words / per];
    if !sizes.comment_words.is_multiple_of(per) {
        comment_lengths.push(sizes.comment_words % per);
    }

    let th = Tensor::row(theta.clone());
    let (fi, fm, fa) = state.nets.generate_modalities(&th)?;
    let p = state.nets.generate_label_prob(&th)?[0];
    let label = u8::from(rng.random::<f64>() < p);

    let doc = VideoDoc {
        id: String::new(),
        transcript: (!transcript.is_empty()).then_some(transcript),
        comments,
        comment_lengths,
        f_img: fi.into_data(),
        f_mot: fm.into_data(),
        f_aud: fa.into_data(),
        label: Some(label),
        comment_flags: None,
    };
    let draw = LatentDraw {
        r,
        theta,
        h,
        mask,
        theta_t,
        eta,
        t: ts,
        z: zs,
        x: xs,
        z_t,
        x_t,
    };
    Ok((doc, draw))
}

pub fn sample_document<R: Rng + ?Sized>(
    state: &ModelState,
    hp: &HyperParams,
    sizes: DocSizes,
    rng: &mut R,
) -> Result<(VideoDoc, LatentDraw)> {
    sample_document_with(state, hp, sizes, None, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_state(k: usize, v: usize, seed_regular: Vec<usize>, rng: &mut ChaCha8Rng) -> ModelState {
        let u = seed_regular.len();
        let rand_rows = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let row: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = row.iter().sum();
                for (c, x) in row.into_iter().enumerate() {
                    t.set(r, c, x / s);
                }
            }
            t
        };
        let dims = FeatureDims { img: 2, mot: 2, aud: 2 };
        ModelState {
            phi_s: rand_rows(k, u, rng),
            phi_r: rand_rows(k, v, rng),
            phi_r_t: rand_rows(k, v, rng),
            pi: (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
            pi_t: (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
            assoc: vec![1.0 / k as f64; k],
            b_r: rand_rows(k, v, rng),
            b_s: rand_rows(k, u, rng),
            seed_regular,
            nets: GenerativeNets::new(k, dims, &[4], rng).unwrap(),
        }
    }

    #[test]
    fn masking_worked_example() {
        let h: Vec<f64> = [0.2, 0.3, 0.5].iter().map(|t| 0.6 * t).collect();
        assert!((h[0] - 0.12).abs() < 1e-15 && (h[1] - 0.18).abs() < 1e-15 && (h[2] - 0.30).abs() < 1e-15);
        let t = masked_topic(&h, &[true, false, true]);
        assert!((t[0] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(t[1], 0.0);
        assert!((t[2] - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn b_prime_values() {
        let b = b_prime(&[0.2, 0.3, 0.5], 0.6);
        let expected = [0.0594059, 0.1139241, 0.2595156];
        for (x, e) in b.iter().zip(expected) {
            assert!((x - e).abs() < 1e-6, "{b:?}");
        }
        assert_eq!(b_prime(&[1.0, 0.0, 0.0], 1.0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eta_one_all_regular_collapses_to_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = toy_state(2, 3, vec![0], &mut rng);
        s.pi = vec![1.0, 1.0];
        s.phi_r = Tensor::from_rows(&[vec![0.1, 0.4, 0.5], vec![0.3, 0.3, 0.4]]).unwrap();
        let p = comment_word_prob(0, &[0.5, 0.5], 1.0, &s);
        assert!((p - 0.2).abs() < 1e-15);
    }

    #[test]
    fn comment_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = toy_state(3, 6, vec![4, 1], &mut rng);
        let theta = [0.2, 0.5, 0.3];
        let total: f64 = (0..6).map(|w| comment_word_prob(w, &theta, 0.37, &s)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_mask_with_unit_beta_keeps_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = toy_state(3, 5, vec![0, 1], &mut rng);
        let hp = HyperParams {
            beta_ratio: 1.0,
            k: 3,
            ..HyperParams::default()
        };
        let sizes = DocSizes {
            transcript_words: 5,
            comment_words: 7,
            words_per_comment: 3,
        };
        let (doc, draw) = sample_document_with(&s, &hp, sizes, Some(&[true; 3]), &mut rng).unwrap();
        for (a, b) in draw.theta.iter().zip(&draw.theta_t) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(doc.comment_lengths, vec![3, 3, 1]);
        assert_eq!(doc.transcript.as_ref().map(Vec::len), Some(5));
    }
}
