//! Planted-parameter corpora for recovery experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, Corpus, FeatureDims, SeedOntology, Vocabulary};
use crate::diffcore::tape::sigmoid;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::generative::{sample_document, seed_regular_map, DocSizes, GenerativeNets, HyperParams, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_docs: usize,
    pub k: usize,
    pub v: usize,
    pub transcript_words: usize,
    pub comment_words: usize,
    pub words_per_comment: usize,
    /// Share of documents generated without a transcript.
    pub missing_transcript_rate: f64,
    pub num_categories: usize,
    pub seeds_per_category: usize,
    pub dims: FeatureDims,
    pub feature_hidden: usize,
    /// Std of Gaussian noise added to every feature.
    pub feature_noise: f64,
    /// Share of each φ^R row's mass inside its own word block.
    pub block_mass: f64,
    /// Std of the log-normal jitter on planted φ entries.
    pub phi_jitter: f64,
    /// Label logit `label_scale · (Σ_{k<label_topics} θ_k − label_offset)`.
    pub label_scale: f64,
    pub label_topics: usize,
    pub label_offset: f64,
    pub flag_rate_positive: f64,
    pub flag_rate_negative: f64,
    /// Planted π_k and π̃_k are drawn uniformly from this range.
    pub pi_range: [f64; 2],
    /// Separate range for the first `num_categories` (seeded) topics.
    pub seeded_pi_range: Option<[f64; 2]>,
    pub alpha: f64,
    pub beta_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_docs: 500,
            k: 8,
            v: 200,
            transcript_words: 30,
            comment_words: 60,
            words_per_comment: 6,
            missing_transcript_rate: 0.3,
            num_categories: 4,
            seeds_per_category: 4,
            dims: FeatureDims { img: 8, mot: 8, aud: 8 },
            feature_hidden: 32,
            feature_noise: 0.01,
            block_mass: 0.9,
            phi_jitter: 0.3,
            label_scale: 300.0,
            label_topics: 2,
            label_offset: 0.25,
            flag_rate_positive: 0.35,
            flag_rate_negative: 0.05,
            pi_range: [0.5, 0.9],
            seeded_pi_range: None,
            alpha: 0.3,
            beta_ratio: 0.6,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_docs == 0 || self.k < 2 || self.v < self.k {
            return Err(Error::Config("synthetic corpus needs docs ≥ 1, K ≥ 2 and V ≥ K".into()));
        }
        if self.num_categories == 0 || self.num_categories > self.k {
            return Err(Error::Config("num_categories must be in 1..=K".into()));
        }
        if self.seeds_per_category == 0 || self.seeds_per_category > self.v / self.k {
            return Err(Error::Config("seeds_per_category must fit inside one word block".into()));
        }
        if self.comment_words == 0 || self.words_per_comment == 0 {
            return Err(Error::Config("documents need comments".into()));
        }
        for (name, p) in [
            ("missing_transcript_rate", self.missing_transcript_rate),
            ("block_mass", self.block_mass),
            ("flag_rate_positive", self.flag_rate_positive),
            ("flag_rate_negative", self.flag_rate_negative),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        let ordered = |[lo, hi]: [f64; 2]| 0.0 <= lo && lo <= hi && hi <= 1.0;
        if !ordered(self.pi_range) || !self.seeded_pi_range.is_none_or(ordered) {
            return Err(Error::Config("pi ranges must be ordered sub-intervals of [0, 1]".into()));
        }
        if self.label_topics == 0 || self.label_topics > self.k {
            return Err(Error::Config("label_topics must be in 1..=K".into()));
        }
        Ok(())
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            k: self.k,
            alpha: self.alpha,
            beta_ratio: self.beta_ratio,
            ..HyperParams::default()
        }
    }

    fn block(&self, w: usize) -> usize {
        (w * self.k / self.v).min(self.k - 1)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub ontology: SeedOntology,
    pub planted: ModelState,
    /// Topic proportions θ_d behind each document.
    pub thetas: Vec<Vec<f64>>,
}

fn jittered_rows<R: Rng + ?Sized>(base: &Tensor, jitter: f64, rng: &mut R) -> Tensor {
    let mut t = base.clone();
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        for x in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x *= (jitter * z).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Samples a corpus whose regular topics are block-structured and whose
/// first `num_categories` seed topics sit on category seed words.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, v) = (cfg.k, cfg.v);
    let words: Vec<String> = (0..v).map(|i| format!("w{i:03}")).collect();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let mut vocab = Vocabulary::new(&refs, &[])?;
    let block_start = |b: usize| (0..v).position(|w| cfg.block(w) == b).expect("non-empty block");
    let categories: Vec<Category> = (0..cfg.num_categories)
        .map(|c| Category {
            name: format!("category{c}"),
            seed_words: (0..cfg.seeds_per_category).map(|i| words[block_start(c) + i].clone()).collect(),
        })
        .collect();
    for c in &categories {
        for w in &c.seed_words {
            vocab.add_seed(w);
        }
    }
    let ontology = SeedOntology { categories };
    let u = vocab.num_seed();

    let mut base_r = Tensor::zeros(k, v);
    for t in 0..k {
        let inside = (0..v).filter(|&w| cfg.block(w) == t).count();
        for w in 0..v {
            let p = if cfg.block(w) == t {
                cfg.block_mass / inside as f64
            } else {
                (1.0 - cfg.block_mass) / (v - inside) as f64
            };
            base_r.set(t, w, p);
        }
    }
    let phi_r = jittered_rows(&base_r, cfg.phi_jitter, &mut rng);
    let phi_r_t = jittered_rows(&base_r, cfg.phi_jitter, &mut rng);
    let mut base_s = Tensor::full(k, u, 1.0 / u as f64);
    for c in 0..cfg.num_categories {
        let row = base_s.row_slice_mut(c);
        for (s, x) in row.iter_mut().enumerate() {
            let own = s / cfg.seeds_per_category == c;
            *x = if own { 0.9 / cfg.seeds_per_category as f64 } else { 0.1 / (u - cfg.seeds_per_category).max(1) as f64 };
        }
    }
    let phi_s = jittered_rows(&base_s, cfg.phi_jitter, &mut rng);
    let [lo, hi] = cfg.pi_range;
    let mut pi: Vec<f64> = (0..k).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let mut pi_t: Vec<f64> = (0..k).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    if let Some([slo, shi]) = cfg.seeded_pi_range {
        for c in 0..cfg.num_categories {
            pi[c] = slo + (shi - slo) * rng.random::<f64>();
            pi_t[c] = slo + (shi - slo) * rng.random::<f64>();
        }
    }
    let nets = GenerativeNets::new(k, cfg.dims, &[cfg.feature_hidden], &mut rng)?;
    let planted = ModelState {
        phi_s,
        phi_r,
        phi_r_t,
        pi,
        pi_t,
        assoc: vec![1.0 / k as f64; k],
        b_r: base_r,
        b_s: base_s,
        seed_regular: seed_regular_map(&vocab)?,
        nets,
    };
    planted.validate()?;

    let hp = cfg.hyper_params();
    let mut docs = Vec::with_capacity(cfg.num_docs);
    let mut thetas = Vec::with_capacity(cfg.num_docs);
    for d in 0..cfg.num_docs {
        let no_transcript = rng.random::<f64>() < cfg.missing_transcript_rate;
        let sizes = DocSizes {
            transcript_words: if no_transcript { 0 } else { cfg.transcript_words },
            comment_words: cfg.comment_words,
            words_per_comment: cfg.words_per_comment,
        };
        let (mut doc, draw) = sample_document(&planted, &hp, sizes, &mut rng)?;
        doc.id = format!("doc{d:05}");
        for f in doc.f_img.iter_mut().chain(doc.f_mot.iter_mut()).chain(doc.f_aud.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *f += cfg.feature_noise * z;
        }
        let mass: f64 = draw.theta[..cfg.label_topics].iter().sum();
        let p = sigmoid(cfg.label_scale * (mass - cfg.label_offset));
        let y = u8::from(rng.random::<f64>() < p);
        doc.label = Some(y);
        let rate = if y == 1 { cfg.flag_rate_positive } else { cfg.flag_rate_negative };
        doc.comment_flags = Some(
            doc.comment_lengths
                .iter()
                .map(|_| u8::from(rng.random::<f64>() < rate))
                .collect(),
        );
        docs.push(doc);
        thetas.push(draw.theta);
    }
    Ok(SyntheticData {
        corpus: Corpus {
            docs,
            vocab,
            dims: cfg.dims,
        },
        ontology,
        planted,
        thetas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_shape() {
        let cfg = SynthConfig {
            num_docs: 60,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.corpus.len(), 60);
        assert_eq!(data.corpus.vocab.num_seed(), 16);
        let missing = data.corpus.docs.iter().filter(|d| !d.has_transcript()).count();
        assert!(missing > 5 && missing < 35, "{missing}");
        for d in &data.corpus.docs {
            assert_eq!(d.comments.len(), 60);
            assert_eq!(d.comment_lengths.len(), 10);
            assert_eq!(d.comment_flags.as_ref().unwrap().len(), 10);
            assert_eq!(d.f_img.len(), 8);
        }
        for t in 0..8 {
            let row = data.planted.phi_r.row_slice(t);
            let inside: f64 = (0..200).filter(|&w| cfg.block(w) == t).map(|w| row[w]).sum();
            assert!(inside > 0.8, "{inside}");
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig {
            num_docs: 20,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus.docs, b.corpus.docs);
        assert_eq!(a.planted, b.planted);
    }
}
