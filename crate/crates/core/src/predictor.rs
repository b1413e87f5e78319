//! Prediction for new videos and topic summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoDoc;
use crate::diffcore::tape::{sigmoid, softmax_rows};
use crate::error::{Error, Result};
use crate::inference::{BatchEncoding, IncompleteVariant};
use crate::trainer::TrainedModel;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub label: u8,
    pub theta: Vec<f64>,
}

/// θ = softmax(μ′) from the incomplete network matching the doc.
pub fn infer_theta(tm: &TrainedModel, doc: &VideoDoc) -> Result<Vec<f64>> {
    let enc = BatchEncoding::new(&[doc], tm.vs.v, tm.vs.dims)?;
    let (mu, _) = tm.vs.infer_theta_incomplete(&enc, IncompleteVariant::for_doc(doc))?;
    Ok(softmax_rows(&mu).into_data())
}

/// Labels, comments and flags are ignored. `label` is 1 only when the
/// probability is strictly above `threshold`.
pub fn predict(tm: &TrainedModel, doc: &VideoDoc, threshold: f64) -> Result<Prediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut stripped = doc.clone();
    stripped.comments.clear();
    stripped.comment_lengths.clear();
    stripped.label = None;
    stripped.comment_flags = None;
    let theta = infer_theta(tm, &stripped)?;
    let z = tm
        .model
        .nets
        .label
        .apply(&tm.model.nets.store, &crate::diffcore::Tensor::row(theta.clone()))?
        .item();
    let probability = sigmoid(z);
    Ok(Prediction {
        id: doc.id.clone(),
        probability,
        label: u8::from(probability > threshold),
        theta,
    })
}

pub fn predict_all(tm: &TrainedModel, docs: &[VideoDoc], threshold: f64) -> Result<Vec<Prediction>> {
    docs.par_iter().map(|d| predict(tm, d, threshold)).collect()
}

pub fn predictions_jsonl(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("plain struct"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub word: String,
    pub index: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub topic: usize,
    /// Top words of E[φ^R_k].
    pub comment_words: Vec<WordWeight>,
    /// Top words of E[φ̃^R_k].
    pub transcript_words: Vec<WordWeight>,
    /// Posterior mean of 1 - π_k.
    pub seed_topic_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocTopics {
    pub id: String,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub topics: Vec<TopicEntry>,
    pub documents: Vec<DocTopics>,
}

/// Indices of the `n` largest entries, descending, ties by lower index.
pub fn top_indices(p: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn top_words(tm: &TrainedModel, row: &[f64], n: usize) -> Vec<WordWeight> {
    top_indices(row, n)
        .into_iter()
        .map(|i| WordWeight {
            word: tm.vocab.regular_words()[i].clone(),
            index: i,
            probability: row[i],
        })
        .collect()
}

pub fn topic_report(tm: &TrainedModel, docs: &[VideoDoc], top_n: usize) -> Result<TopicReport> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    let m = &tm.model;
    let topics = (0..m.num_topics())
        .map(|k| TopicEntry {
            topic: k,
            comment_words: top_words(tm, m.phi_r.row_slice(k), top_n),
            transcript_words: top_words(tm, m.phi_r_t.row_slice(k), top_n),
            seed_topic_weight: 1.0 - m.pi[k],
        })
        .collect();
    let documents = docs
        .par_iter()
        .map(|d| {
            let mut stripped = d.clone();
            stripped.comments.clear();
            Ok(DocTopics {
                id: d.id.clone(),
                theta: infer_theta(tm, &stripped)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TopicReport { topics, documents })
}

/// Plain-text table: one line per topic.
pub fn render_table(report: &TopicReport) -> String {
    let mut out = String::from("topic\tseed_weight\tcomment_words\ttranscript_words\n");
    for t in &report.topics {
        let words = |w: &[WordWeight]| w.iter().map(|x| x.word.as_str()).collect::<Vec<_>>().join(" ");
        out.push_str(&format!(
            "{}\t{:.4}\t{}\t{}\n",
            t.topic,
            t.seed_topic_weight,
            words(&t.comment_words),
            words(&t.transcript_words)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::{tiny_config, tiny_corpus};
    use crate::trainer::fit;

    fn trained() -> (TrainedModel, Vec<VideoDoc>) {
        let (corpus, ont) = tiny_corpus(16, 9);
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        cfg.min_epochs = 2;
        cfg.distill_epochs = 2;
        let (tm, _, _) = fit(&corpus, &ont, &cfg).unwrap();
        (tm, corpus.docs)
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(top_indices(&[0.2, 0.5, 0.2, 0.1], 3), vec![1, 0, 2]);
        assert_eq!(top_indices(&[0.0, 0.0, 1.0], 1), vec![2]);
    }

    #[test]
    fn predictions_ignore_comments_and_are_repeatable() {
        let (tm, docs) = trained();
        let a = predict(&tm, &docs[0], 0.5).unwrap();
        let mut other = docs[0].clone();
        other.comments = vec![3, 3, 3];
        other.label = Some(1 - other.label.unwrap());
        let b = predict(&tm, &other, 0.5).unwrap();
        assert_eq!(a, b);
        assert!((a.theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(predict_all(&tm, &docs, 0.5).unwrap()[0], a);
    }

    #[test]
    fn zeroed_label_head_gives_half_and_label_zero() {
        let (mut tm, docs) = trained();
        let net = tm.model.nets.label.clone();
        net.zero_final_layer(&mut tm.model.nets.store);
        let p = predict(&tm, &docs[1], 0.5).unwrap();
        assert_eq!(p.probability, 0.5);
        assert_eq!(p.label, 0);
    }

    #[test]
    fn missing_features_are_rejected() {
        let (tm, docs) = trained();
        let mut d = docs[0].clone();
        d.f_img.clear();
        assert!(predict(&tm, &d, 0.5).is_err());
    }

    #[test]
    fn report_shape_and_frozen_seed_weight() {
        let (mut tm, docs) = trained();
        let r = topic_report(&tm, &docs, 3).unwrap();
        assert_eq!(r.topics.len(), 4);
        assert_eq!(r.documents.len(), docs.len());
        for t in &r.topics {
            assert!(t.seed_topic_weight > 0.0 && t.seed_topic_weight < 1.0);
            let p: Vec<f64> = t.comment_words.iter().map(|w| w.probability).collect();
            assert!(p.windows(2).all(|w| w[0] >= w[1]));
        }
        tm.model.pi = vec![0.5; 4];
        let r = topic_report(&tm, &docs, 1).unwrap();
        assert!(r.topics.iter().all(|t| t.seed_topic_weight == 0.5));
        assert!(render_table(&r).lines().count() == 5);
    }
}
