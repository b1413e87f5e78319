//! Vocabulary, seed ontology, JSON-lines corpus I/O and cutoff labeling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabWire", into = "VocabWire")]
pub struct Vocabulary {
    regular_words: Vec<String>,
    seed_words: Vec<String>,
    regular_index: HashMap<String, usize>,
    seed_index: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabWire {
    regular_words: Vec<String>,
    seed_words: Vec<String>,
}

impl From<VocabWire> for Vocabulary {
    fn from(w: VocabWire) -> Self {
        let mut v = Vocabulary::default();
        for t in w.regular_words {
            v.add_regular(&t);
        }
        for t in w.seed_words {
            v.add_seed(&t);
        }
        v
    }
}

impl From<Vocabulary> for VocabWire {
    fn from(v: Vocabulary) -> Self {
        VocabWire {
            regular_words: v.regular_words,
            seed_words: v.seed_words,
        }
    }
}

impl Vocabulary {
    pub fn new(regular: &[&str], seed: &[&str]) -> Result<Self> {
        let mut v = Self::default();
        for t in regular {
            if v.regular_index.contains_key(*t) {
                return Err(Error::Schema(format!("duplicate regular word {t:?}")));
            }
            v.add_regular(t);
        }
        for t in seed {
            if v.seed_index.contains_key(*t) {
                return Err(Error::Schema(format!("duplicate seed word {t:?}")));
            }
            v.add_seed(t);
        }
        Ok(v)
    }

    /// Number of regular words V.
    pub fn num_regular(&self) -> usize {
        self.regular_words.len()
    }

    /// Number of seed words U.
    pub fn num_seed(&self) -> usize {
        self.seed_words.len()
    }

    pub fn regular_words(&self) -> &[String] {
        &self.regular_words
    }

    pub fn seed_words(&self) -> &[String] {
        &self.seed_words
    }

    pub fn regular_id(&self, token: &str) -> Option<usize> {
        self.regular_index.get(token).copied()
    }

    pub fn seed_id(&self, token: &str) -> Option<usize> {
        self.seed_index.get(token).copied()
    }

    /// Returns the index of `token`, inserting it if new.
    pub fn add_regular(&mut self, token: &str) -> usize {
        if let Some(&i) = self.regular_index.get(token) {
            return i;
        }
        self.regular_words.push(token.to_string());
        self.regular_index.insert(token.to_string(), self.regular_words.len() - 1);
        self.regular_words.len() - 1
    }

    pub fn add_seed(&mut self, token: &str) -> usize {
        if let Some(&i) = self.seed_index.get(token) {
            return i;
        }
        self.seed_words.push(token.to_string());
        self.seed_index.insert(token.to_string(), self.seed_words.len() - 1);
        self.seed_words.len() - 1
    }

    /// Regular-vocabulary index of each seed word, `None` when the seed word
    /// is not a regular word.
    pub fn seed_to_regular(&self) -> Vec<Option<usize>> {
        self.seed_words.iter().map(|w| self.regular_id(w)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_regular() < 2 {
            return Err(Error::Schema(format!("vocabulary needs at least 2 regular words, has {}", self.num_regular())));
        }
        if self.num_seed() < 1 {
            return Err(Error::Schema("vocabulary has no seed words".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub seed_words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOntology {
    pub categories: Vec<Category>,
}

impl SeedOntology {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Seed-lexicon indices of each category's words.
    pub fn seed_ids(&self, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
        self.categories
            .iter()
            .map(|c| {
                c.seed_words
                    .iter()
                    .map(|w| {
                        vocab
                            .seed_id(w)
                            .ok_or_else(|| Error::Schema(format!("seed word {w:?} missing from vocabulary")))
                    })
                    .collect()
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Schema("ontology has no categories".into()));
        }
        let mut names = HashSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate category {:?}", c.name)));
            }
            if c.seed_words.is_empty() {
                return Err(Error::Schema(format!("category {:?} has no seed words", c.name)));
            }
            let mut seen = HashSet::new();
            for w in &c.seed_words {
                if w.is_empty() || w.chars().any(char::is_whitespace) {
                    return Err(Error::Schema(format!("seed word {w:?} in {:?} is not a single token", c.name)));
                }
                if !seen.insert(w.as_str()) {
                    return Err(Error::Schema(format!("seed word {w:?} repeated in {:?}", c.name)));
                }
            }
        }
        Ok(())
    }
}

/// Parses an ontology and registers its seed words in `vocab`. Seed words
/// are also added to the regular vocabulary so the seed lexicon embeds into
/// regular-word space.
pub fn parse_ontology(text: &str, vocab: &mut Vocabulary) -> Result<SeedOntology> {
    let ont: SeedOntology = serde_json::from_str(text).map_err(|e| Error::Schema(format!("ontology: {e}")))?;
    ont.validate()?;
    for c in &ont.categories {
        for w in &c.seed_words {
            vocab.add_seed(w);
            vocab.add_regular(w);
        }
    }
    Ok(ont)
}

pub fn load_ontology(path: &Path, vocab: &mut Vocabulary) -> Result<SeedOntology> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ontology(&text, vocab)
}

pub fn save_ontology(ont: &SeedOntology, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ont).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub img: usize,
    pub mot: usize,
    pub aud: usize,
}

impl FeatureDims {
    pub fn total(&self) -> usize {
        self.img + self.mot + self.aud
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoDoc {
    pub id: String,
    pub transcript: Option<Vec<usize>>,
    /// All comment tokens, flattened in order.
    pub comments: Vec<usize>,
    /// Token count of each comment, summing to `comments.len()`.
    pub comment_lengths: Vec<usize>,
    pub f_img: Vec<f64>,
    pub f_mot: Vec<f64>,
    pub f_aud: Vec<f64>,
    pub label: Option<u8>,
    pub comment_flags: Option<Vec<u8>>,
}

impl VideoDoc {
    pub fn has_transcript(&self) -> bool {
        self.transcript.as_ref().is_some_and(|t| !t.is_empty())
    }

    pub fn features(&self) -> impl Iterator<Item = f64> + '_ {
        self.f_img.iter().chain(&self.f_mot).chain(&self.f_aud).copied()
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            img: self.f_img.len(),
            mot: self.f_mot.len(),
            aud: self.f_aud.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub docs: Vec<VideoDoc>,
    pub vocab: Vocabulary,
    pub dims: FeatureDims,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Subset by document index, sharing the vocabulary.
    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            docs: idx.iter().map(|&i| self.docs[i].clone()).collect(),
            vocab: self.vocab.clone(),
            dims: self.dims,
        }
    }

    /// Error unless every doc has a label and at least one comment token.
    pub fn require_labeled(&self) -> Result<()> {
        for d in &self.docs {
            if d.label.is_none() {
                return Err(Error::Precondition(format!("document {:?} has no label", d.id)));
            }
            if d.comments.is_empty() {
                return Err(Error::Precondition(format!("document {:?} has no comments", d.id)));
            }
        }
        Ok(())
    }
}

pub enum VocabPolicy {
    Build,
    Given(Vocabulary),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_tokens: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    id: String,
    transcript: Option<Vec<String>>,
    comments: Vec<Vec<String>>,
    f_img: Vec<f64>,
    f_mot: Vec<f64>,
    f_aud: Vec<f64>,
    label: Option<u8>,
    comment_flags: Option<Vec<u8>>,
}

pub fn load_corpus(path: &Path, policy: VocabPolicy, dims: Option<FeatureDims>) -> Result<(Corpus, LoadReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))?;
    parse_corpus(lines.iter().map(String::as_str), policy, dims)
}

pub fn parse_corpus<'a>(
    lines: impl Iterator<Item = &'a str>,
    policy: VocabPolicy,
    dims: Option<FeatureDims>,
) -> Result<(Corpus, LoadReport)> {
    let (mut vocab, build) = match policy {
        VocabPolicy::Build => (Vocabulary::default(), true),
        VocabPolicy::Given(v) => (v, false),
    };
    let mut report = LoadReport::default();
    let mut docs = Vec::new();
    let mut dims = dims;
    for (i, line) in lines.enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let raw: RawDoc =
            serde_json::from_value(value).map_err(|e| Error::Schema(format!("line {lineno}: {e}")))?;
        let mut map = |tokens: &[String]| -> Vec<usize> {
            tokens
                .iter()
                .filter_map(|t| {
                    if build {
                        Some(vocab.add_regular(t))
                    } else {
                        let id = vocab.regular_id(t);
                        if id.is_none() {
                            report.dropped_tokens += 1;
                        }
                        id
                    }
                })
                .collect()
        };
        let transcript = raw.transcript.as_deref().map(&mut map).filter(|t| !t.is_empty());
        let mut comments = Vec::new();
        let mut comment_lengths = Vec::with_capacity(raw.comments.len());
        for c in &raw.comments {
            let ids = map(c);
            comment_lengths.push(ids.len());
            comments.extend(ids);
        }
        if let Some(flags) = &raw.comment_flags {
            if flags.len() != raw.comments.len() {
                return Err(Error::Schema(format!(
                    "line {lineno}: {} comment_flags for {} comments",
                    flags.len(),
                    raw.comments.len()
                )));
            }
            if flags.iter().any(|&f| f > 1) {
                return Err(Error::Schema(format!("line {lineno}: comment_flags must be 0/1")));
            }
        }
        if raw.label.is_some_and(|l| l > 1) {
            return Err(Error::Schema(format!("line {lineno}: label must be 0, 1 or null")));
        }
        let doc = VideoDoc {
            id: raw.id,
            transcript,
            comments,
            comment_lengths,
            f_img: raw.f_img,
            f_mot: raw.f_mot,
            f_aud: raw.f_aud,
            label: raw.label,
            comment_flags: raw.comment_flags,
        };
        if doc.features().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("line {lineno}: non-finite feature value")));
        }
        match dims {
            None => dims = Some(doc.dims()),
            Some(d) if d != doc.dims() => {
                return Err(Error::Schema(format!(
                    "line {lineno}: feature dimensions {:?} differ from expected {:?}",
                    doc.dims(),
                    d
                )))
            }
            _ => {}
        }
        docs.push(doc);
    }
    if report.dropped_tokens > 0 {
        log::warn!("dropped {} out-of-vocabulary tokens", report.dropped_tokens);
    }
    let dims = dims.unwrap_or(FeatureDims { img: 0, mot: 0, aud: 0 });
    Ok((Corpus { docs, vocab, dims }, report))
}

fn to_raw(doc: &VideoDoc, vocab: &Vocabulary) -> RawDoc {
    let words = |ids: &[usize]| ids.iter().map(|&i| vocab.regular_words[i].clone()).collect::<Vec<_>>();
    let mut comments = Vec::with_capacity(doc.comment_lengths.len());
    let mut pos = 0;
    for &n in &doc.comment_lengths {
        comments.push(words(&doc.comments[pos..pos + n]));
        pos += n;
    }
    RawDoc {
        id: doc.id.clone(),
        transcript: doc.transcript.as_deref().map(words),
        comments,
        f_img: doc.f_img.clone(),
        f_mot: doc.f_mot.clone(),
        f_aud: doc.f_aud.clone(),
        label: doc.label,
        comment_flags: doc.comment_flags.clone(),
    }
}

pub fn doc_to_json(doc: &VideoDoc, vocab: &Vocabulary) -> String {
    serde_json::to_string(&to_raw(doc, vocab)).expect("plain data serializes")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in &corpus.docs {
        writeln!(w, "{}", doc_to_json(d, &corpus.vocab)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sets `doc.label` to 1 iff the flagged share of comments is at least `cutoff`.
pub fn label_by_cutoff(doc: &mut VideoDoc, cutoff: f64) -> Result<u8> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Domain(format!("cutoff {cutoff} outside (0, 1)")));
    }
    let flags = match &doc.comment_flags {
        Some(f) if !f.is_empty() => f,
        _ => {
            return Err(Error::Precondition(format!("document {:?} has no comment_flags", doc.id)));
        }
    };
    let flagged = flags.iter().filter(|&&f| f == 1).count();
    // compare flagged >= cutoff * n without dividing, exact for the boundary cases
    let label = u8::from(flagged as f64 >= cutoff * flags.len() as f64 - 1e-12);
    doc.label = Some(label);
    Ok(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, comments: &str) -> String {
        format!(
            r#"{{"id":"{id}","transcript":["a","b"],"comments":{comments},"f_img":[1.0],"f_mot":[0.5,2.0],"f_aud":[],"label":1,"comment_flags":null}}"#
        )
    }

    #[test]
    fn builds_vocab_in_first_seen_order() {
        let text = [line("x", r#"[["c","a"],["d"]]"#), line("y", r#"[["e"]]"#)];
        let (c, r) = parse_corpus(text.iter().map(String::as_str), VocabPolicy::Build, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.vocab.regular_words(), &["a", "b", "c", "d", "e"]);
        assert_eq!(c.docs[0].comments, vec![2, 0, 3]);
        assert_eq!(c.docs[0].comment_lengths, vec![2, 1]);
        assert_eq!(r.dropped_tokens, 0);
    }

    #[test]
    fn unknown_token_dropped_under_given_vocab() {
        let vocab = Vocabulary::new(&["a", "b", "c"], &[]).unwrap();
        let text = [line("x", r#"[["c","zzz"]]"#)];
        let (c, r) = parse_corpus(text.iter().map(String::as_str), VocabPolicy::Given(vocab), None).unwrap();
        assert_eq!(r.dropped_tokens, 1);
        assert_eq!(c.docs[0].comments, vec![2]);
    }

    #[test]
    fn missing_comments_is_schema_error_naming_field() {
        let text = [r#"{"id":"x","transcript":null,"f_img":[],"f_mot":[],"f_aud":[],"label":null,"comment_flags":null}"#];
        let err = parse_corpus(text.into_iter(), VocabPolicy::Build, None).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("comments")), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let good = line("x", r#"[["a"]]"#);
        let text = [good.as_str(), "{not json"];
        let err = parse_corpus(text.into_iter(), VocabPolicy::Build, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn feature_dimension_mismatch_is_schema_error() {
        let text = [line("x", r#"[["a"]]"#)];
        let dims = FeatureDims { img: 2, mot: 2, aud: 0 };
        let err = parse_corpus(text.iter().map(String::as_str), VocabPolicy::Build, Some(dims)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn ontology_words_indexed_in_both_lists() {
        let mut vocab = Vocabulary::new(&["sad", "cat"], &[]).unwrap();
        let ont = parse_ontology(
            r#"{"categories":[{"name":"mood","seed_words":["sad","hopeless"]},{"name":"sleep","seed_words":["insomnia"]}]}"#,
            &mut vocab,
        )
        .unwrap();
        assert_eq!(ont.num_categories(), 2);
        assert_eq!(vocab.num_seed(), 3);
        assert_eq!(vocab.regular_id("sad"), Some(0));
        assert_eq!(vocab.seed_id("sad"), Some(0));
        assert_eq!(vocab.regular_id("hopeless"), Some(2));
        assert_eq!(ont.seed_ids(&vocab).unwrap(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn ontology_errors() {
        let mut vocab = Vocabulary::default();
        let dup = r#"{"categories":[{"name":"suicidal ideation","seed_words":["a"]},{"name":"suicidal ideation","seed_words":["b"]}]}"#;
        assert!(parse_ontology(dup, &mut vocab).is_err());
        let empty = r#"{"categories":[{"name":"x","seed_words":[]}]}"#;
        assert!(parse_ontology(empty, &mut vocab).is_err());
    }

    fn flagged(n_flag: usize, n: usize) -> VideoDoc {
        VideoDoc {
            id: "d".into(),
            transcript: None,
            comments: vec![0; n],
            comment_lengths: vec![1; n],
            f_img: vec![],
            f_mot: vec![],
            f_aud: vec![],
            label: None,
            comment_flags: Some((0..n).map(|i| u8::from(i < n_flag)).collect()),
        }
    }

    #[test]
    fn cutoff_labels() {
        assert_eq!(label_by_cutoff(&mut flagged(3, 10), 0.20).unwrap(), 1);
        assert_eq!(label_by_cutoff(&mut flagged(0, 10), 0.10).unwrap(), 0);
        assert_eq!(label_by_cutoff(&mut flagged(1, 10), 0.10).unwrap(), 1);
        assert_eq!(label_by_cutoff(&mut flagged(3, 10), 0.30).unwrap(), 1);
        let mut d = flagged(0, 0);
        d.comment_flags = None;
        assert!(matches!(label_by_cutoff(&mut d, 0.1), Err(Error::Precondition(_))));
    }
}
