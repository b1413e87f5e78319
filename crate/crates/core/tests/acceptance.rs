//! End-to-end acceptance checks. Runs without the test harness so every
//! criterion prints exactly one PASS or FAIL line, then exits non-zero if
//! any failed.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use kgntm::corpus::{Corpus, FeatureDims, VideoDoc};
use kgntm::diffcore::Tensor;
use kgntm::elbo::{check_elbo_gradients, kl_beta, kl_lognormal, kl_normal_diag, Ablation, ElboNoise, ObjectiveSettings};
use kgntm::evalkit::{recovery_train_config, run_synthetic_experiment, umass_coherence, ExperimentConfig, ExperimentOutcome};
use kgntm::generative::{
    comment_word_prob, mask_probabilities, masked_topic, masked_topic_bound, transcript_word_prob, GenerativeNets, HyperParams,
    ModelState,
};
use kgntm::inference::{BatchEncoding, CorpusStats, VariationalState};
use kgntm::pretrain::random_uniform_rows;
use kgntm::synth::{generate, SynthConfig};
use kgntm::trainer::train;

type Verdict = (bool, String);

// ---------------------------------------------------------------- helpers

fn simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn simplex_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        t.row_slice_mut(r).copy_from_slice(&simplex(cols, rng));
    }
    t
}

fn mean_and_stderr(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    let m = s / n;
    (m, ((s2 / n - m * m).max(0.0) / (n - 1.0)).sqrt())
}

fn normal_lnpdf(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn beta_lnpdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

// ------------------------------------------------------ 1. marginals

/// Joint probability of every (origin, topic, switch) path that emits `w`.
#[allow(clippy::needless_range_loop)]
fn brute_force_comment(w: usize, theta: &[f64], eta: f64, s: &ModelState) -> f64 {
    let k = theta.len();
    let mut total = 0.0;
    for from_doc in [true, false] {
        for z in 0..k {
            for regular in [true, false] {
                let p_origin = if from_doc { eta } else { 1.0 - eta };
                let p_topic = if from_doc { theta[z] } else { s.assoc[z] };
                let p_switch = if regular { s.pi[z] } else { 1.0 - s.pi[z] };
                let p_word = if regular {
                    s.phi_r.get(z, w)
                } else {
                    (0..s.seed_regular.len())
                        .filter(|&u| s.seed_regular[u] == w)
                        .map(|u| s.phi_s.get(z, u))
                        .sum()
                };
                total += p_origin * p_topic * p_switch * p_word;
            }
        }
    }
    total
}

fn brute_force_transcript(w: usize, theta_t: &[f64], s: &ModelState) -> f64 {
    let mut total = 0.0;
    for (z, &pz) in theta_t.iter().enumerate() {
        for regular in [true, false] {
            let p_switch = if regular { s.pi_t[z] } else { 1.0 - s.pi_t[z] };
            let p_word = if regular {
                s.phi_r_t.get(z, w)
            } else {
                (0..s.seed_regular.len())
                    .filter(|&u| s.seed_regular[u] == w)
                    .map(|u| s.phi_s.get(z, u))
                    .sum()
            };
            total += pz * p_switch * p_word;
        }
    }
    total
}

fn marginals() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let v = rng.random_range(2..=6);
        let u = rng.random_range(1..=v.min(4));
        let mut ids: Vec<usize> = (0..v).collect();
        for i in (1..v).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        ids.truncate(u);
        let dims = FeatureDims { img: 1, mot: 1, aud: 1 };
        let s = ModelState {
            phi_s: simplex_rows(k, u, &mut rng),
            phi_r: simplex_rows(k, v, &mut rng),
            phi_r_t: simplex_rows(k, v, &mut rng),
            pi: (0..k).map(|_| rng.random()).collect(),
            pi_t: (0..k).map(|_| rng.random()).collect(),
            assoc: simplex(k, &mut rng),
            b_r: simplex_rows(k, v, &mut rng),
            b_s: simplex_rows(k, u, &mut rng),
            seed_regular: ids,
            nets: GenerativeNets::new(k, dims, &[2], &mut rng).unwrap(),
        };
        let theta = simplex(k, &mut rng);
        let theta_t = simplex(k, &mut rng);
        let eta: f64 = rng.random();
        for w in 0..v {
            worst = worst.max((comment_word_prob(w, &theta, eta, &s) - brute_force_comment(w, &theta, eta, &s)).abs());
            worst = worst.max((transcript_word_prob(w, &theta_t, &s) - brute_force_transcript(w, &theta_t, &s)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst <= 1e-12 && secs < 10.0, format!("200 instances, max abs error {worst:.2e}, {secs:.2} s"))
}

// -------------------------------------------------------- 2. masked-topic bound

fn masked_bound() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let n = 100_000;
    let mut violations = 0;
    let mut mask = [false; 8];
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let h: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let bound = masked_topic_bound(&h);
        let mut sums = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for _ in 0..n {
            let mut total = 0.0;
            for i in 0..k {
                mask[i] = rng.random::<f64>() < h[i];
                if mask[i] {
                    total += h[i];
                }
            }
            if total > 0.0 {
                for i in 0..k {
                    if mask[i] {
                        let t = h[i] / total;
                        sums[i] += t;
                        sq[i] += t * t;
                    }
                }
            }
        }
        for i in 0..k {
            let m = sums[i] / n as f64;
            let se = ((sq[i] / n as f64 - m * m).max(0.0) / (n as f64 - 1.0)).sqrt();
            // independent evaluation of the bound formula
            let others: f64 = h.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x * x).sum();
            let direct = h[i] * h[i] / (h[i] + others);
            if (bound[i] - direct).abs() > 1e-15 || bound[i] > m + 3.0 * se {
                violations += 1;
            }
        }
    }
    // h = [0.5, 0.5]: E[θ̃_0] = 1/4 · 1/2 + 1/4 · 1 = 0.375
    let exact: f64 = [([true, true], 0.25), ([true, false], 0.25), ([false, true], 0.25), ([false, false], 0.25)]
        .iter()
        .map(|(m, p)| p * masked_topic(&[0.5, 0.5], m)[0])
        .sum();
    let b = masked_topic_bound(&[0.5, 0.5])[0];
    let k2 = (exact - 0.375).abs() < 1e-15 && (b - 1.0 / 3.0).abs() < 1e-15 && b <= exact;
    let secs = start.elapsed().as_secs_f64();
    (
        violations == 0 && k2 && secs < 60.0,
        format!("1000 vectors, {violations} violations; K=2 bound {b:.6} <= exact {exact:.6}; {secs:.1} s"),
    )
}

// -------------------------------------------------- 3. worked example

fn worked_example() -> Verdict {
    let h = mask_probabilities(&[0.2, 0.3, 0.5], 0.6);
    let t = masked_topic(&h, &[true, false, true]);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    let ok = close(h[0], 0.12)
        && close(h[1], 0.18)
        && close(h[2], 0.30)
        && close(t[0], 2.0 / 7.0)
        && t[1] == 0.0
        && close(t[2], 5.0 / 7.0);
    (ok, format!("h = {h:?}, masked topic = {t:?}"))
}

// ------------------------------------------------------- 4. KL forms

fn kl_forms() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = 1_000_000;
    let mut worst = [0.0f64; 3];

    for _ in 0..50 {
        let k = rng.random_range(1..=4);
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sd: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
        let pv: f64 = rng.random_range(0.3..3.0);
        let closed = kl_normal_diag(&mu, &sd, pv).unwrap();
        let (m, se) = mean_and_stderr((0..n).map(|_| {
            (0..k)
                .map(|i| {
                    let x = mu[i] + sd[i] * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    normal_lnpdf(x, mu[i], sd[i]) - normal_lnpdf(x, 0.0, pv.sqrt())
                })
                .sum::<f64>()
        }));
        worst[0] = worst[0].max((closed - m).abs() / se);
    }
    for _ in 0..50 {
        let (a, b) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
        let (a0, b0) = (rng.random_range(0.5..5.0), rng.random_range(0.5..5.0));
        let closed = kl_beta(a, b, a0, b0).unwrap();
        let q = Beta::new(a, b).unwrap();
        let (m, se) = mean_and_stderr((0..n).map(|_| {
            let x: f64 = q.sample(&mut rng).clamp(1e-300, 1.0 - 1e-16);
            beta_lnpdf(x, a, b) - beta_lnpdf(x, a0, b0)
        }));
        worst[1] = worst[1].max((closed - m).abs() / se);
    }
    for _ in 0..50 {
        let (loc, scale) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..1.5));
        let (loc0, scale0) = (rng.random_range(-2.0..2.0), rng.random_range(0.2..1.5));
        let closed = kl_lognormal(loc, scale, loc0, scale0).unwrap();
        let (m, se) = mean_and_stderr((0..n).map(|_| {
            let y = (loc + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp();
            let ly = y.ln();
            (normal_lnpdf(ly, loc, scale) - ly) - (normal_lnpdf(ly, loc0, scale0) - ly)
        }));
        worst[2] = worst[2].max((closed - m).abs() / se);
    }

    let zeros = [
        kl_normal_diag(&[0.0], &[1.5], 2.25).unwrap(),
        kl_normal_diag(&[0.0; 3], &[0.75; 3], 0.5625).unwrap(),
        kl_beta(2.5, 0.7, 2.5, 0.7).unwrap(),
        kl_beta(0.3, 4.0, 0.3, 4.0).unwrap(),
        kl_lognormal(-0.4, 0.9, -0.4, 0.9).unwrap(),
        kl_lognormal(1.2, 0.3, 1.2, 0.3).unwrap(),
    ];
    let exact_zero = zeros.iter().all(|&z| z == 0.0);
    (
        worst.iter().all(|&w| w < 3.0) && exact_zero,
        format!(
            "worst |closed - MC| / stderr: normal {:.2}, beta {:.2}, lognormal {:.2}; identical pairs exactly 0: {exact_zero}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------- 5. gradients

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (k, v, u) = (3, 10, 3);
    let dims = FeatureDims { img: 2, mot: 1, aud: 2 };
    let docs: Vec<VideoDoc> = (0..4)
        .map(|i| VideoDoc {
            id: format!("g{i}"),
            transcript: (i % 2 == 0).then(|| (0..6).map(|_| rng.random_range(0..v)).collect()),
            comments: (0..5).map(|_| rng.random_range(0..v)).collect(),
            comment_lengths: vec![5],
            f_img: vec![rng.random(), rng.random()],
            f_mot: vec![rng.random()],
            f_aud: vec![rng.random(), rng.random()],
            label: Some((i % 2) as u8),
            comment_flags: None,
        })
        .collect();
    let b_r = random_uniform_rows(k, v, &mut rng);
    let b_s = random_uniform_rows(k, u, &mut rng);
    let stats = CorpusStats::from_docs(&docs, v);
    let mut vs = VariationalState::new(k, v, u, dims, &[4], &b_r, &b_s, stats, &mut rng).unwrap();
    let mut model = ModelState {
        phi_s: b_s.clone(),
        phi_r: b_r.clone(),
        phi_r_t: b_r.clone(),
        pi: vec![0.5; k],
        pi_t: vec![0.5; k],
        assoc: vec![1.0 / k as f64; k],
        b_r,
        b_s,
        seed_regular: vec![1, 4, 7],
        nets: GenerativeNets::new(k, dims, &[4], &mut rng).unwrap(),
    };
    let refs: Vec<&VideoDoc> = docs.iter().collect();
    let enc = BatchEncoding::new(&refs, v, dims).unwrap();
    let settings = ObjectiveSettings {
        hp: HyperParams { k, ..HyperParams::default() },
        ablation: Ablation::default(),
        transcript_tilde_params: true,
        corpus_size: 8,
    };
    let noise = ElboNoise::draw(enc.len(), k, v, u, &mut rng);
    let r = check_elbo_gradients(&mut model, &mut vs, &settings, &enc, &noise, 1e-5, 1e-3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        r.passes(1e-4) && secs < 300.0,
        format!("{} partials, max relative error {:.2e}, {secs:.1} s", r.checked, r.max_rel_err),
    )
}

// ----------------------------------------- 6, 7, 12. synthetic experiment

fn progress(out: &ExperimentOutcome, secs: f64) -> Verdict {
    let r = &out.report;
    (
        r.elbo_last10_mean > r.elbo_first10_mean && secs < 1800.0,
        format!(
            "elbo first-10 mean {:.1}, last-10 mean {:.1}, {} epochs, {secs:.1} s",
            r.elbo_first10_mean, r.elbo_last10_mean, r.epochs
        ),
    )
}

fn recovery(out: &ExperimentOutcome) -> Verdict {
    let r = &out.report;
    (
        r.recovery.mean_cosine >= 0.7 && r.test.f1 >= 0.85,
        format!(
            "mean cosine {:.3} (target 0.7), test F1 {:.3} (target 0.85), majority baseline F1 {:.3}",
            r.recovery.mean_cosine, r.test.f1, r.majority_baseline_f1
        ),
    )
}

fn distillation(out: &ExperimentOutcome) -> Verdict {
    let d = &out.report.distillation;
    let a = (&d.with_transcript, &d.without_transcript);
    let drop = |t: &Vec<f64>| !t.is_empty() && t.last() < t.first();
    (
        drop(a.0) && drop(a.1),
        format!(
            "with transcript {:.3} -> {:.3}, features only {:.3} -> {:.3}",
            a.0.first().unwrap_or(&f64::NAN),
            a.0.last().unwrap_or(&f64::NAN),
            a.1.first().unwrap_or(&f64::NAN),
            a.1.last().unwrap_or(&f64::NAN)
        ),
    )
}

// ------------------------------------------------------- 8. ablations

fn ablations() -> Verdict {
    let data = generate(&SynthConfig::default()).unwrap();
    let corpus: &Corpus = &data.corpus;
    let final_elbo = |ablation: Ablation, seed: u64| -> f64 {
        let mut cfg = recovery_train_config();
        cfg.hp.k = 8;
        cfg.seed = seed;
        cfg.ablation = ablation;
        let (_, _, report) = train(corpus, &data.ontology, &cfg).unwrap();
        *report.totals().last().unwrap()
    };
    let seeds = [1u64, 2, 3];
    let base: Vec<f64> = seeds.iter().map(|&s| final_elbo(Ablation::default(), s)).collect();
    let base_mean = base.iter().sum::<f64>() / 3.0;
    let mut ok = true;
    let mut parts = vec![format!("full {base_mean:.0} (sd {:.0})", std_dev(&base))];
    for name in ["multi_origin", "two_sets_of_topics", "auto_supervision", "pretrained_init"] {
        let a = Ablation::disable_list(name).unwrap();
        let runs: Vec<f64> = seeds.iter().map(|&s| final_elbo(a, s)).collect();
        let m = runs.iter().sum::<f64>() / 3.0;
        let noise = 3.0 * std_dev(&base).max(std_dev(&runs));
        let moved = (m - base_mean).abs() > noise;
        ok &= moved;
        parts.push(format!("-{name} {m:.0} (|d| {:.0} vs 3sd {noise:.0})", (m - base_mean).abs()));
    }
    (ok, parts.join("; "))
}

// -------------------------------------------------- 9, 10. CLI

const SMALL_RUN: &str = r#"
seed = 5

[hyper]
k = 4
learning_rate = 0.01

[train]
max_epochs = 8
min_epochs = 4
inference_hidden = [16]
generative_hidden = [16]
distill_epochs = 5
distill_learning_rate = 0.01

[pretrain]
iterations = 30

[synth]
num_docs = 120
k = 4
v = 40
"#;

fn kgntm(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kgntm"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn cutoff_sweep_cli() -> Result<Verdict, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("run.toml"), SMALL_RUN).map_err(|e| e.to_string())?;
    let data = d.join("data");
    let data_s = data.to_str().unwrap();
    kgntm(&["simulate", "--out", data_s], d)?;
    let stdout = kgntm(
        &[
            "eval",
            "--corpus",
            &format!("{data_s}/corpus.jsonl"),
            "--ontology",
            &format!("{data_s}/ontology.json"),
            "--cutoff",
            "0.10,0.15,0.20,0.30",
            "--out",
            d.join("eval").to_str().unwrap(),
        ],
        d,
    )?;
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(d.join("eval/eval.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let cutoffs: Vec<f64> = rows.iter().filter_map(|r| r["cutoff"].as_f64()).collect();
    let has_metrics = rows.iter().all(|r| r["metrics"]["f1"].is_number());
    let table_rows = stdout.lines().skip(1).filter(|l| !l.trim().is_empty()).count();
    Ok((
        cutoffs == [0.10, 0.15, 0.20, 0.30] && has_metrics && table_rows == 4,
        format!("eval.json rows at cutoffs {cutoffs:?}, {table_rows} table rows on stdout"),
    ))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                files.push((e.strip_prefix(dir).unwrap().display().to_string(), fs::read(&e).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism_cli() -> Result<Verdict, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("run.toml"), SMALL_RUN).map_err(|e| e.to_string())?;
    let work = d.join("work");
    let w = work.to_str().unwrap().to_string();
    let pipeline = || -> Result<Vec<(String, Vec<u8>)>, String> {
        if work.exists() {
            fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
        }
        let corpus = format!("{w}/data/corpus.jsonl");
        let ont = format!("{w}/data/ontology.json");
        let ckpt = format!("{w}/model/model.kgntm");
        kgntm(&["simulate", "--out", &format!("{w}/data")], d)?;
        kgntm(&["train", "--corpus", &corpus, "--ontology", &ont, "--out", &format!("{w}/model")], d)?;
        kgntm(&["predict", "--corpus", &corpus, "--checkpoint", &ckpt, "--out", &format!("{w}/predict")], d)?;
        kgntm(&["topics", "--corpus", &corpus, "--checkpoint", &ckpt, "--out", &format!("{w}/topics")], d)?;
        kgntm(
            &["eval", "--corpus", &corpus, "--ontology", &ont, "--checkpoint", &ckpt, "--out", &format!("{w}/eval")],
            d,
        )?;
        Ok(snapshot(&work))
    };
    let first = pipeline()?;
    let second = pipeline()?;
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let must = ["model/model.kgntm", "predict/predictions.jsonl", "model/train_report.json", "eval/eval.json"];
    let present = must.iter().all(|m| first.iter().any(|(n, _)| n == m));
    Ok((
        first.len() == second.len() && differing.is_empty() && present,
        format!("{} artifacts compared byte for byte, {} differ {differing:?}", first.len(), differing.len()),
    ))
}

// ------------------------------------------------------ 11. coherence

fn coherence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let vocab = rng.random_range(6..16);
        let n_docs = rng.random_range(5..30);
        let docs: Vec<Vec<usize>> = (0..n_docs)
            .map(|_| (0..rng.random_range(1..10)).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        let mut present: Vec<usize> = (0..vocab).filter(|w| docs.iter().any(|d| d.contains(w))).collect();
        for i in (1..present.len()).rev() {
            present.swap(i, rng.random_range(0..=i));
        }
        let top: Vec<usize> = present[..rng.random_range(2..=present.len().min(6))].to_vec();
        let df = |a: usize| docs.iter().filter(|d| d.contains(&a)).count() as f64;
        let co = |a: usize, b: usize| docs.iter().filter(|d| d.contains(&a) && d.contains(&b)).count() as f64;
        let mut direct = 0.0;
        for m in 1..top.len() {
            for l in 0..m {
                direct += ((co(top[m], top[l]) + 1.0) / df(top[l])).ln();
            }
        }
        let sets: Vec<BTreeSet<usize>> = docs.iter().map(|d| d.iter().copied().collect()).collect();
        let got = umass_coherence(&top, &sets).unwrap();
        worst = worst.max((got - direct).abs());
    }
    (worst <= 1e-9, format!("20 toy corpora, max abs difference {worst:.2e}"))
}

// ------------------------------------------------------------ driver

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    }
}

fn report(id: usize, name: &str, v: &Verdict) {
    println!("{} {id:>2} {name}: {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut record = |id: usize, name: &str, v: Verdict| {
        report(id, name, &v);
        failed += usize::from(!v.0);
    };
    record(1, "marginals match enumeration", guarded(marginals));
    record(2, "masked-topic bound", guarded(masked_bound));
    record(3, "masking worked example", guarded(worked_example));
    record(4, "KL closed forms", guarded(kl_forms));
    record(5, "ELBO gradient check", guarded(gradients));

    let start = Instant::now();
    let experiment = catch_unwind(|| run_synthetic_experiment(&ExperimentConfig::default()).unwrap());
    let secs = start.elapsed().as_secs_f64();
    match &experiment {
        Ok(out) => {
            record(6, "training progress", guarded(|| progress(out, secs)));
            record(7, "planted recovery", guarded(|| recovery(out)));
        }
        Err(_) => {
            record(6, "training progress", (false, "experiment panicked".into()));
            record(7, "planted recovery", (false, "experiment panicked".into()));
        }
    }
    record(8, "ablations move the ELBO", guarded(ablations));
    record(
        9,
        "cutoff sweep from one command",
        guarded(|| cutoff_sweep_cli().unwrap_or_else(|e| (false, e))),
    );
    record(
        10,
        "bitwise determinism",
        guarded(|| determinism_cli().unwrap_or_else(|e| (false, e))),
    );
    record(11, "UMass coherence", guarded(coherence));
    match &experiment {
        Ok(out) => record(12, "distillation KL decreases", guarded(|| distillation(out))),
        Err(_) => record(12, "distillation KL decreases", (false, "experiment panicked".into())),
    }

    if failed == 0 {
        println!("all 12 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 12 criteria failed");
        ExitCode::FAILURE
    }
}
