//! Initialization matrices: B^S from the ontology and B^R from seeded LDA.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SeedOntology, Vocabulary};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub doc_topic_prior: f64,
    pub topic_word_prior: f64,
    pub seed_boost: f64,
    pub seed_smoothing: f64,
    pub chains: usize,
    pub use_transcripts: bool,
    pub use_comments: bool,
    /// Drop lexicon-word counts from B^R, leaving seed words to the seed
    /// topics at initialization.
    pub regular_excludes_seed_words: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            doc_topic_prior: 0.1,
            topic_word_prior: 0.1,
            seed_boost: 5.0,
            seed_smoothing: 1e-6,
            chains: 1,
            use_transcripts: true,
            use_comments: true,
            regular_excludes_seed_words: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsDiagnostics {
    pub iterations: usize,
    /// Complete-data log-likelihood after each sweep.
    pub log_likelihood: Vec<f64>,
    pub skipped_docs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainResult {
    pub b_r: Tensor,
    pub b_s: Tensor,
    pub diagnostics: GibbsDiagnostics,
}

/// Rows `k < K_s`: uniform over category k's seed words, plus `smoothing`
/// everywhere, renormalized. Rows `k ≥ K_s`: uniform over the lexicon.
pub fn build_seed_init(ontology: &SeedOntology, vocab: &Vocabulary, k: usize, smoothing: f64) -> Result<Tensor> {
    let ks = ontology.num_categories();
    if k < ks {
        return Err(Error::Precondition(format!("K = {k} is smaller than the {ks} ontology categories")));
    }
    let u = vocab.num_seed();
    let ids = ontology.seed_ids(vocab)?;
    let mut b = Tensor::zeros(k, u);
    for (row, cat) in ids.iter().enumerate() {
        let r = b.row_slice_mut(row);
        for &s in cat {
            r[s] = 1.0 / cat.len() as f64;
        }
        for x in r.iter_mut() {
            *x += smoothing;
        }
        let total: f64 = r.iter().sum();
        for x in r.iter_mut() {
            *x /= total;
        }
    }
    for row in ks..k {
        b.row_slice_mut(row).fill(1.0 / u as f64);
    }
    Ok(b)
}

/// Boost factor per (topic, regular word): `boost` where the word is a seed
/// word of that topic's category, 1 elsewhere.
fn boost_table(ontology: &SeedOntology, vocab: &Vocabulary, k: usize, boost: f64) -> Vec<Vec<f64>> {
    let v = vocab.num_regular();
    let mut table = vec![vec![1.0; v]; k];
    for (topic, cat) in ontology.categories.iter().enumerate().take(k) {
        for w in &cat.seed_words {
            if let Some(id) = vocab.regular_id(w) {
                table[topic][id] = boost;
            }
        }
    }
    table
}

/// Token streams fed to the sampler, one per document.
pub fn lda_documents(corpus: &Corpus, cfg: &PretrainConfig) -> Vec<Vec<usize>> {
    corpus
        .docs
        .iter()
        .map(|d| {
            let mut words = Vec::new();
            if cfg.use_transcripts {
                if let Some(t) = &d.transcript {
                    words.extend_from_slice(t);
                }
            }
            if cfg.use_comments {
                words.extend_from_slice(&d.comments);
            }
            words
        })
        .collect()
}

struct Chain {
    b_r: Tensor,
    trace: Vec<f64>,
}

fn run_chain<R: Rng + ?Sized>(
    docs: &[Vec<usize>],
    v: usize,
    k: usize,
    boost: &[Vec<f64>],
    excluded: &[bool],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Chain {
    let (alpha, beta) = (cfg.doc_topic_prior, cfg.topic_word_prior);
    let vbeta = v as f64 * beta;
    let mut n_dk = vec![vec![0usize; k]; docs.len()];
    let mut n_kw = vec![vec![0usize; v]; k];
    let mut n_k = vec![0usize; k];
    let mut z: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let zd: Vec<usize> = doc.iter().map(|_| rng.random_range(0..k)).collect();
        for (&w, &t) in doc.iter().zip(&zd) {
            n_dk[d][t] += 1;
            n_kw[t][w] += 1;
            n_k[t] += 1;
        }
        z.push(zd);
    }
    let mut p = vec![0.0; k];
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = z[d][i];
                n_dk[d][old] -= 1;
                n_kw[old][w] -= 1;
                n_k[old] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    let pt = (n_dk[d][t] as f64 + alpha) * (n_kw[t][w] as f64 + beta) / (n_k[t] as f64 + vbeta)
                        * boost[t][w];
                    total += pt;
                    p[t] = total;
                }
                let u = rng.random::<f64>() * total;
                let new = p.iter().position(|&c| u < c).unwrap_or(k - 1);
                z[d][i] = new;
                n_dk[d][new] += 1;
                n_kw[new][w] += 1;
                n_k[new] += 1;
            }
        }
        trace.push(complete_log_likelihood(&n_dk, &n_kw, &n_k, alpha, beta));
    }
    let mut b_r = Tensor::zeros(k, v);
    for (t, counts) in n_kw.iter().enumerate() {
        let kept = |w: usize| if excluded[w] { 0.0 } else { counts[w] as f64 };
        let total: f64 = (0..v).map(kept).sum::<f64>() + vbeta;
        for w in 0..v {
            b_r.set(t, w, (kept(w) + beta) / total);
        }
    }
    Chain { b_r, trace }
}

/// log p(w, z) of the collapsed model with symmetric Dirichlet priors.
fn complete_log_likelihood(n_dk: &[Vec<usize>], n_kw: &[Vec<usize>], n_k: &[usize], alpha: f64, beta: f64) -> f64 {
    use crate::diffcore::special::ln_gamma;
    let k = n_k.len();
    let v = n_kw.first().map_or(0, Vec::len);
    let mut ll = 0.0;
    for t in 0..k {
        ll += ln_gamma(v as f64 * beta) - ln_gamma(n_k[t] as f64 + v as f64 * beta);
        for &c in &n_kw[t] {
            if c > 0 {
                ll += ln_gamma(c as f64 + beta) - ln_gamma(beta);
            }
        }
    }
    for nd in n_dk {
        let len: usize = nd.iter().sum();
        ll += ln_gamma(k as f64 * alpha) - ln_gamma(len as f64 + k as f64 * alpha);
        for &c in nd {
            if c > 0 {
                ll += ln_gamma(c as f64 + alpha) - ln_gamma(alpha);
            }
        }
    }
    ll
}

/// Collapsed Gibbs sampling with a multiplicative seed boost on each
/// category's seed words in the matching topic. Returns the posterior-mean
/// topic-word matrix of the chain with the best final log-likelihood.
pub fn seeded_lda_gibbs<R: Rng + ?Sized>(
    corpus: &Corpus,
    ontology: &SeedOntology,
    k: usize,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<(Tensor, GibbsDiagnostics)> {
    if corpus.is_empty() {
        return Err(Error::Precondition("seeded LDA needs a non-empty corpus".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::Precondition("seeded LDA needs at least one iteration".into()));
    }
    if !(cfg.doc_topic_prior > 0.0 && cfg.topic_word_prior > 0.0 && cfg.seed_boost > 0.0) {
        return Err(Error::Config("LDA priors and seed boost must be positive".into()));
    }
    let all = lda_documents(corpus, cfg);
    let skipped = all.iter().filter(|d| d.is_empty()).count();
    if skipped > 0 {
        log::warn!("seeded LDA: skipping {skipped} empty documents");
    }
    let docs: Vec<Vec<usize>> = all.into_iter().filter(|d| !d.is_empty()).collect();
    let v = corpus.vocab.num_regular();
    let boost = boost_table(ontology, &corpus.vocab, k, cfg.seed_boost);
    let mut excluded = vec![false; v];
    if cfg.regular_excludes_seed_words {
        for w in ontology.categories.iter().flat_map(|c| &c.seed_words) {
            if let Some(id) = corpus.vocab.regular_id(w) {
                excluded[id] = true;
            }
        }
    }
    let mut best: Option<Chain> = None;
    for _ in 0..cfg.chains.max(1) {
        let chain = run_chain(&docs, v, k, &boost, &excluded, cfg, rng);
        let better = match &best {
            None => true,
            Some(b) => chain.trace.last() > b.trace.last(),
        };
        if better {
            best = Some(chain);
        }
    }
    let best = best.expect("at least one chain");
    Ok((
        best.b_r,
        GibbsDiagnostics {
            iterations: cfg.iterations,
            log_likelihood: best.trace,
            skipped_docs: skipped,
        },
    ))
}

pub fn pretrain<R: Rng + ?Sized>(
    corpus: &Corpus,
    ontology: &SeedOntology,
    k: usize,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainResult> {
    let b_s = build_seed_init(ontology, &corpus.vocab, k, cfg.seed_smoothing)?;
    let (b_r, diagnostics) = seeded_lda_gibbs(corpus, ontology, k, cfg, rng)?;
    Ok(PretrainResult { b_r, b_s, diagnostics })
}

/// Rows drawn Uniform(0, 1) and normalized; the non-pretrained initialization.
pub fn random_uniform_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let row = t.row_slice_mut(r);
        for x in row.iter_mut() {
            *x = rng.random::<f64>().max(1e-12);
        }
        let s: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    t
}
