//! Variational EM: alternating E and M passes over the corpus, convergence
//! control, distillation of the incomplete θ networks and checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureDims, SeedOntology, VideoDoc, Vocabulary};
use crate::diffcore::checkpoint::Container;
use crate::diffcore::{Adam, Tape, Tensor};
use crate::elbo::{elbo_on_tape, kl_normal_pair, kl_normal_pair_on, Ablation, ElboBreakdown, ElboNoise, ObjectiveSettings, Trainable};
use crate::error::{Error, Result};
use crate::generative::{seed_regular_map, GenerativeNets, HyperParams, ModelState};
use crate::inference::{beta_mean, lognormal_mean_rows, BatchEncoding, CorpusStats, IncompleteVariant, VariationalState};
use crate::pretrain::{pretrain, random_uniform_rows, GibbsDiagnostics, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Convergence is not tested before this many epochs.
    pub min_epochs: usize,
    /// Stop when `|ΔELBO| < convergence_threshold · |ELBO|`.
    pub convergence_threshold: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub transcript_tilde_params: bool,
    /// Hidden widths of the inference networks.
    pub inference_hidden: Vec<usize>,
    /// Hidden widths of NN^L, NN^I, NN^M, NN^A.
    pub generative_hidden: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub distill_epochs: usize,
    pub distill_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            batch_size: 64,
            max_epochs: 200,
            min_epochs: 20,
            convergence_threshold: 1e-3,
            seed: 0,
            ablation: Ablation::default(),
            transcript_tilde_params: true,
            inference_hidden: vec![128, 128],
            generative_hidden: vec![128, 128],
            pretrain: PretrainConfig::default(),
            distill_epochs: 50,
            distill_learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Config("convergence_threshold must be positive".into()));
        }
        if !(self.hp.learning_rate > 0.0 && self.distill_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.inference_hidden.contains(&0) || self.generative_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub elbo: ElboBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<ElboBreakdown>,
    pub converged: bool,
    /// Not serialized, so reports from identical runs are identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub pretrain: Option<GibbsDiagnostics>,
}

impl TrainReport {
    /// One JSON object per epoch, `epoch` plus every breakdown field.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for (epoch, elbo) in self.epochs.iter().enumerate() {
            let rec = EpochRecord { epoch, elbo: *elbo };
            out.push_str(&serde_json::to_string(&rec).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Everything needed to predict and report after training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub ontology: SeedOntology,
    pub model: ModelState,
    pub vs: VariationalState,
    pub distilled: bool,
}

const CHECKPOINT_FORMAT: &str = "kgntm-model-1";

impl TrainedModel {
    pub fn num_topics(&self) -> usize {
        self.model.num_topics()
    }

    pub fn dims(&self) -> FeatureDims {
        self.vs.dims
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "seed": self.config.seed,
            "distilled": self.distilled,
        }));
        c.pack("config", &self.config)?;
        c.pack("vocab", &self.vocab)?;
        c.pack("ontology", &self.ontology)?;
        c.pack("model", &self.model)?;
        c.pack("variational", &self.vs)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("not a {CHECKPOINT_FORMAT} checkpoint")));
        }
        let tm = Self {
            config: c.unpack("config")?,
            vocab: c.unpack("vocab")?,
            ontology: c.unpack("ontology")?,
            model: c.unpack("model")?,
            vs: c.unpack("variational")?,
            distilled: c.meta.get("distilled").and_then(|d| d.as_bool()).unwrap_or(false),
        };
        tm.model.validate()?;
        if tm.vocab.num_regular() != tm.model.num_regular() || tm.vocab.num_seed() != tm.model.num_seed() {
            return Err(Error::Checkpoint("vocabulary does not match the model dimensions".into()));
        }
        Ok(tm)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn settings(cfg: &TrainConfig, corpus_size: usize) -> ObjectiveSettings {
    ObjectiveSettings {
        hp: cfg.hp.clone(),
        ablation: cfg.ablation,
        transcript_tilde_params: cfg.transcript_tilde_params,
        corpus_size,
    }
}

/// Builds the initial states: B matrices, networks and point estimates.
pub fn initialize(
    corpus: &Corpus,
    ontology: &SeedOntology,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelState, VariationalState, Option<GibbsDiagnostics>)> {
    let vocab = &corpus.vocab;
    vocab.validate()?;
    let (k, v, u) = (cfg.hp.k, vocab.num_regular(), vocab.num_seed());
    cfg.hp.validate(v, u)?;
    let (b_r, b_s, diag) = if cfg.ablation.pretrained_init {
        let p = pretrain(corpus, ontology, k, &cfg.pretrain, rng)?;
        (p.b_r, p.b_s, Some(p.diagnostics))
    } else {
        if k < ontology.num_categories() {
            return Err(Error::Precondition(format!(
                "K = {k} is smaller than the {} ontology categories",
                ontology.num_categories()
            )));
        }
        (random_uniform_rows(k, v, rng), random_uniform_rows(k, u, rng), None)
    };
    let nets = GenerativeNets::new(k, corpus.dims, &cfg.generative_hidden, rng)?;
    let stats = CorpusStats::from_docs(&corpus.docs, v);
    let vs = VariationalState::new(k, v, u, corpus.dims, &cfg.inference_hidden, &b_r, &b_s, stats, rng)?;
    let mut model = ModelState {
        phi_s: b_s.clone(),
        phi_r: b_r.clone(),
        phi_r_t: b_r.clone(),
        pi: vec![0.5; k],
        pi_t: vec![0.5; k],
        assoc: vec![1.0 / k as f64; k],
        b_r,
        b_s,
        seed_regular: seed_regular_map(vocab)?,
        nets,
    };
    refresh_point_estimates(&mut model, &vs, cfg.ablation)?;
    Ok((model, vs, diag))
}

/// Sets the model's φ and π point values to the variational posterior means.
pub fn refresh_point_estimates(model: &mut ModelState, vs: &VariationalState, ablation: Ablation) -> Result<()> {
    let phis = vs.infer_phis()?;
    model.phi_s = lognormal_mean_rows(&phis.phi_s.0, &phis.phi_s.1);
    model.phi_r = lognormal_mean_rows(&phis.phi_r.0, &phis.phi_r.1);
    model.phi_r_t = lognormal_mean_rows(&phis.phi_r_t.0, &phis.phi_r_t.1);
    let k = vs.k;
    if !ablation.two_sets_of_topics {
        model.pi = vec![0.0; k];
        model.pi_t = vec![0.0; k];
    } else if !ablation.auto_supervision {
        model.pi = vec![0.5; k];
        model.pi_t = vec![0.5; k];
    } else {
        let (a, b) = vs.infer_pi()?;
        model.pi = a.iter().zip(&b).map(|(&a, &b)| beta_mean(a, b)).collect();
        let (a, b) = vs.infer_pi_t()?;
        model.pi_t = a.iter().zip(&b).map(|(&a, &b)| beta_mean(a, b)).collect();
    }
    Ok(())
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// One full pass with the given stores trainable. Returns the summed breakdown.
#[allow(clippy::too_many_arguments)]
fn run_pass(
    corpus: &Corpus,
    model: &mut ModelState,
    vs: &mut VariationalState,
    settings: &ObjectiveSettings,
    cfg: &TrainConfig,
    mode: Trainable,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<ElboBreakdown> {
    let (k, v, u) = (vs.k, vs.v, vs.u);
    let mut acc = ElboBreakdown::default();
    let mut clamps = 0usize;
    for idx in batches(corpus.len(), cfg.batch_size, rng) {
        let docs: Vec<&VideoDoc> = idx.iter().map(|&i| &corpus.docs[i]).collect();
        let enc = BatchEncoding::new(&docs, v, corpus.dims)?;
        let noise = ElboNoise::draw(enc.len(), k, v, u, rng);
        let mut tape = Tape::new();
        let vars = elbo_on_tape(&mut tape, model, vs, settings, &enc, &noise, mode)?;
        let loss = tape.neg(vars.total);
        let grads = tape.backward(loss)?;
        let b = vars.breakdown(&tape);
        if !b.total.is_finite() {
            return Err(Error::Domain("objective became non-finite".into()));
        }
        acc.add(&b);
        clamps += tape.clamp_events();
        if mode.variational {
            adam.step(&mut vs.store, &grads)?;
        }
        if mode.model {
            adam.step(&mut model.nets.store, &grads)?;
        }
    }
    if clamps > 0 {
        log::debug!("{clamps} probabilities clamped at the floor during the pass");
    }
    Ok(acc)
}

fn mean_breakdown(a: &ElboBreakdown, b: &ElboBreakdown) -> ElboBreakdown {
    let mut m = *a;
    m.add(b);
    let h = |x: f64| 0.5 * x;
    ElboBreakdown {
        recon_transcript: h(m.recon_transcript),
        recon_comment: h(m.recon_comment),
        recon_label: h(m.recon_label),
        recon_img: h(m.recon_img),
        recon_mot: h(m.recon_mot),
        recon_aud: h(m.recon_aud),
        kl_theta: h(m.kl_theta),
        kl_pi_t: h(m.kl_pi_t),
        kl_pi: h(m.kl_pi),
        kl_eta: h(m.kl_eta),
        kl_phi_s: h(m.kl_phi_s),
        kl_phi_r: h(m.kl_phi_r),
        kl_phi_r_t: h(m.kl_phi_r_t),
        total: h(m.total),
    }
}

/// Trains from scratch. Deterministic given `cfg.seed`.
pub fn train(
    corpus: &Corpus,
    ontology: &SeedOntology,
    cfg: &TrainConfig,
) -> Result<(ModelState, VariationalState, TrainReport)> {
    cfg.validate()?;
    corpus.require_labeled()?;
    if corpus.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut model, mut vs, diag) = initialize(corpus, ontology, cfg, &mut rng)?;
    let settings = settings(cfg, corpus.len());
    let mut adam = Adam::new(cfg.hp.learning_rate);
    let mut epochs = Vec::new();
    let mut converged = false;
    for epoch in 0..cfg.max_epochs {
        let e = run_pass(corpus, &mut model, &mut vs, &settings, cfg, Trainable::E_STEP, &mut adam, &mut rng)?;
        let m = run_pass(corpus, &mut model, &mut vs, &settings, cfg, Trainable::M_STEP, &mut adam, &mut rng)?;
        let rec = mean_breakdown(&e, &m);
        log::info!("epoch {epoch}: elbo {:.4}", rec.total);
        let prev = epochs.last().map(|p: &ElboBreakdown| p.total);
        epochs.push(rec);
        if let Some(prev) = prev {
            if epochs.len() >= cfg.min_epochs && (rec.total - prev).abs() < cfg.convergence_threshold * rec.total.abs() {
                converged = true;
                break;
            }
        }
    }
    refresh_point_estimates(&mut model, &vs, cfg.ablation)?;
    let report = TrainReport {
        epochs,
        converged,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checkpoint_path: None,
        pretrain: diag,
    };
    Ok((model, vs, report))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean KL over the routed training docs, at initialization and after
    /// each epoch. Empty when no doc routes to the variant.
    pub with_transcript: Vec<f64>,
    pub without_transcript: Vec<f64>,
}

impl DistillReport {
    pub fn trace(&self, variant: IncompleteVariant) -> &[f64] {
        match variant {
            IncompleteVariant::WithTranscript => &self.with_transcript,
            IncompleteVariant::WithoutTranscript => &self.without_transcript,
        }
    }
}

fn incomplete_input(enc: &BatchEncoding, variant: IncompleteVariant) -> Tensor {
    match variant {
        IncompleteVariant::WithTranscript => enc.incomplete_input_with_transcript(),
        IncompleteVariant::WithoutTranscript => enc.incomplete_input_without_transcript(),
    }
}

/// Docs a variant is distilled on. The features-only pair ignores
/// transcripts, so every doc can teach it.
pub fn distill_docs(corpus: &Corpus, variant: IncompleteVariant) -> Vec<&VideoDoc> {
    match variant {
        IncompleteVariant::WithTranscript => corpus.docs.iter().filter(|d| d.has_transcript()).collect(),
        IncompleteVariant::WithoutTranscript => corpus.docs.iter().collect(),
    }
}

/// Mean KL(complete ‖ incomplete) over `docs`. Docs with a transcript are
/// accepted for the features-only variant, which simply ignores it.
pub fn mean_distill_kl(vs: &VariationalState, docs: &[&VideoDoc], variant: IncompleteVariant) -> Result<f64> {
    if docs.is_empty() {
        return Ok(0.0);
    }
    if variant == IncompleteVariant::WithTranscript && docs.iter().any(|d| !d.has_transcript()) {
        return Err(Error::Precondition("with-transcript variant needs transcripts".into()));
    }
    let enc = BatchEncoding::new(docs, vs.v, vs.dims)?;
    let (mu, sd) = vs.infer_theta_complete(&enc)?;
    let x = incomplete_input(&enc, variant);
    let (m, s) = vs.incomplete_nets(variant);
    let (mu2, sd2) = (m.apply(&vs.store, &x)?, s.apply(&vs.store, &x)?);
    let mut total = 0.0;
    for d in 0..enc.len() {
        total += kl_normal_pair(mu.row_slice(d), sd.row_slice(d), mu2.row_slice(d), sd2.row_slice(d));
    }
    Ok(total / enc.len() as f64)
}

/// Fits the incomplete θ networks to the frozen complete posteriors. Docs
/// with a transcript train the with-transcript pair; all docs train the
/// features-only pair.
pub fn distill_incomplete(corpus: &Corpus, vs: &mut VariationalState, cfg: &TrainConfig) -> Result<DistillReport> {
    cfg.validate()?;
    corpus.require_labeled()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d157);
    let mut adam = Adam::new(cfg.distill_learning_rate);
    let mut report = DistillReport::default();
    for variant in [IncompleteVariant::WithTranscript, IncompleteVariant::WithoutTranscript] {
        let docs = distill_docs(corpus, variant);
        if docs.is_empty() {
            continue;
        }
        // complete posteriors are fixed targets
        let targets: Vec<(BatchEncoding, Tensor, Tensor, Tensor)> = {
            let mut out = Vec::new();
            for chunk in docs.chunks(cfg.batch_size) {
                let enc = BatchEncoding::new(chunk, vs.v, vs.dims)?;
                let (mu, sd) = vs.infer_theta_complete(&enc)?;
                let x = incomplete_input(&enc, variant);
                out.push((enc, mu, sd, x));
            }
            out
        };
        let mut trace = vec![mean_distill_kl(vs, &docs, variant)?];
        for _ in 0..cfg.distill_epochs {
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.shuffle(&mut rng);
            for i in order {
                let (enc, mu, sd, x) = &targets[i];
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let (m2, s2) = vs.incomplete_params_on(&mut tape, xv, variant, true)?;
                let m1 = tape.constant(mu.clone());
                let s1 = tape.constant(sd.clone());
                let kl = kl_normal_pair_on(&mut tape, m1, s1, m2, s2)?;
                let loss = tape.scale(kl, 1.0 / enc.len() as f64);
                let grads = tape.backward(loss)?;
                adam.step(&mut vs.store, &grads)?;
            }
            trace.push(mean_distill_kl(vs, &docs, variant)?);
        }
        match variant {
            IncompleteVariant::WithTranscript => report.with_transcript = trace,
            IncompleteVariant::WithoutTranscript => report.without_transcript = trace,
        }
    }
    Ok(report)
}

/// Train, refresh point estimates, then distill.
pub fn fit(
    corpus: &Corpus,
    ontology: &SeedOntology,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport, DistillReport)> {
    let (model, mut vs, report) = train(corpus, ontology, cfg)?;
    let distill = distill_incomplete(corpus, &mut vs, cfg)?;
    let tm = TrainedModel {
        config: cfg.clone(),
        vocab: corpus.vocab.clone(),
        ontology: ontology.clone(),
        model,
        vs,
        distilled: true,
    };
    Ok((tm, report, distill))
}
