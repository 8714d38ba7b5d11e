//! Caption metrics, retrieval diagnostics and similarity-matrix export.
//!
//! Inputs are whitespace/lowercase token lists. Every candidate has one or
//! more references. Scores follow the percent convention except CIDEr-D,
//! which keeps its native 0–10 scale.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::MirrorLexicon;

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

pub type Tokens = Vec<String>;

/// Multiset of the `n`-grams of `tokens`.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n == 0 {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

fn check_pairs(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::dim(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::dim("every candidate needs at least one reference"));
    }
    Ok(())
}

/// Corpus BLEU-4 in `[0, 100]`.
///
/// `p_n = (clipped_n + ε) / (total_n + ε)`; brevity penalty against the sum
/// of closest reference lengths (shorter reference on ties).
pub fn bleu4(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &counts {
                clipped[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c_len == 0 {
        warn!("BLEU over empty candidates");
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| ((clipped[i] as f64 + BLEU_EPSILON) / (total[i] as f64 + BLEU_EPSILON)).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Longest common subsequence length.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L in `[0, 1]`: precision and recall are each maximized
/// over references, then combined with `β = 1.2`.
pub fn rouge_l_sentence(cand: &[String], refs: &[Tokens]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs.iter().filter(|r| !r.is_empty()) {
        let l = lcs_len(cand, rf) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rf.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Corpus-mean ROUGE-L in `[0, 100]`.
pub fn rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_sentence(c, r)).sum();
    Ok(100.0 * sum / candidates.len() as f64)
}

/// Reference-side document frequencies for CIDEr-D.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentFrequency {
    df: BTreeMap<Vec<String>, usize>,
    documents: usize,
}

impl DocumentFrequency {
    /// Each reference set is one document.
    pub fn from_references(references: &[Vec<Tokens>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::dim("CIDEr needs a non-empty reference corpus"));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for r in refs {
                for n in 1..=4 {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self { df, documents: references.len() })
    }

    pub fn get(&self, gram: &[String]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    pub fn documents(&self) -> usize {
        self.documents
    }
}

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; 4],
    norm: [f64; 4],
    /// Bigram count, the length convention of the reference implementation.
    length: f64,
}

fn tfidf(tokens: &[String], df: &DocumentFrequency) -> TfIdf {
    let log_docs = (df.documents as f64).ln();
    let mut vec: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    let mut norm = [0.0; 4];
    let mut length = 0.0;
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let w = tf as f64 * (log_docs - (df.get(g).max(1) as f64).ln());
            norm[n - 1] += w * w;
            vec[n - 1].insert(g.to_vec(), w);
            if n == 2 {
                length += tf as f64;
            }
        }
    }
    TfIdf { vec, norm: norm.map(f64::sqrt), length }
}

/// Sentence CIDEr-D: clipped TF-IDF cosine per `n`, Gaussian length
/// penalty, averaged over `n` and references, times 10.
pub fn cider_d_sentence(cand: &[String], refs: &[Tokens], df: &DocumentFrequency) -> f64 {
    let h = tfidf(cand, df);
    let mut total = 0.0;
    for r in refs {
        let rv = tfidf(r, df);
        let delta = h.length - rv.length;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_n = 0.0;
        for n in 0..4 {
            let mut val = 0.0;
            for (g, &hw) in &h.vec[n] {
                let rw = rv.vec[n].get(g).copied().unwrap_or(0.0);
                val += hw.min(rw) * rw;
            }
            if h.norm[n] != 0.0 && rv.norm[n] != 0.0 {
                val /= h.norm[n] * rv.norm[n];
            }
            per_n += val * penalty;
        }
        total += per_n / 4.0;
    }
    10.0 * total / refs.len() as f64
}

/// Corpus-mean CIDEr-D.
pub fn cider_d(candidates: &[Tokens], references: &[Vec<Tokens>], df: &DocumentFrequency) -> Result<f64> {
    check_pairs(candidates, references)?;
    if candidates.is_empty() {
        return Err(Error::dim("CIDEr over an empty corpus"));
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider_d_sentence(c, r, df))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Suffix-stripping stemmer. Rules, first match wins, only when at least
/// three characters remain: `-ing`, `-ed`, `-es`, `-ly`, then `-s`
/// (not `-ss`).
pub fn stem(word: &str) -> String {
    for suffix in ["ing", "ed", "es", "ly"] {
        if let Some(s) = word.strip_suffix(suffix) {
            if s.chars().count() >= 3 {
                return s.to_string();
            }
        }
    }
    if let Some(s) = word.strip_suffix('s') {
        if !s.ends_with('s') && s.chars().count() >= 3 {
            return s.to_string();
        }
    }
    word.to_string()
}

/// Matching `(candidate, reference)` position pairs, one stage at a time.
type Alignment = Vec<(usize, usize)>;

fn chunks(alignment: &Alignment) -> usize {
    let mut pairs = alignment.clone();
    pairs.sort();
    let mut count = 0;
    let mut last: Option<(usize, usize)> = None;
    for &(i, j) in &pairs {
        match last {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => count += 1,
        }
        last = Some((i, j));
    }
    count
}

const ALIGN_SEARCH_LIMIT: usize = 100_000;

/// Maximum matching between equal keys, extending `fixed`, with the fewest
/// chunks. Falls back to the first maximum matching found when the search
/// space is too large.
fn align_stage(cand: &[String], refs: &[String], fixed: &Alignment) -> Alignment {
    let used_c: BTreeSet<usize> = fixed.iter().map(|p| p.0).collect();
    let used_r: BTreeSet<usize> = fixed.iter().map(|p| p.1).collect();
    let free_c: Vec<usize> = (0..cand.len()).filter(|i| !used_c.contains(i)).collect();
    let free_r: Vec<usize> = (0..refs.len()).filter(|j| !used_r.contains(j)).collect();
    let mut by_key: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &i in &free_c {
        by_key.entry(cand[i].as_str()).or_default().0.push(i);
    }
    for &j in &free_r {
        by_key.entry(refs[j].as_str()).or_default().1.push(j);
    }
    let groups: Vec<(Vec<usize>, Vec<usize>)> = by_key
        .into_values()
        .filter(|(c, r)| !c.is_empty() && !r.is_empty())
        .collect();

    let mut search = Search { groups: &groups, current: fixed.clone(), best: None, visited: 0 };
    let first = groups.first().map_or(0, |g| g.1.len());
    search.run(0, 0, 0, &mut vec![false; first]);
    search.best.map(|b| b.1).unwrap_or_else(|| fixed.clone())
}

struct Search<'a> {
    groups: &'a [(Vec<usize>, Vec<usize>)],
    current: Alignment,
    best: Option<(usize, Alignment)>,
    visited: usize,
}

impl Search<'_> {
    /// Group `g`: candidate `cs[ci]` is either matched to a free reference
    /// slot or skipped, as long as the group can still reach its quota.
    fn run(&mut self, g: usize, ci: usize, matched: usize, used: &mut Vec<bool>) {
        if self.visited >= ALIGN_SEARCH_LIMIT && self.best.is_some() {
            return;
        }
        self.visited += 1;
        let Some((cs, rs)) = self.groups.get(g) else {
            let ch = chunks(&self.current);
            if self.best.as_ref().map_or(true, |(b, _)| ch < *b) {
                self.best = Some((ch, self.current.clone()));
            }
            return;
        };
        let need = cs.len().min(rs.len());
        if matched == need {
            let next = self.groups.get(g + 1).map_or(0, |n| n.1.len());
            self.run(g + 1, 0, 0, &mut vec![false; next]);
            return;
        }
        for rj in 0..rs.len() {
            if !used[rj] {
                used[rj] = true;
                self.current.push((cs[ci], rs[rj]));
                self.run(g, ci + 1, matched + 1, used);
                self.current.pop();
                used[rj] = false;
            }
        }
        if cs.len() - ci - 1 >= need - matched {
            self.run(g, ci + 1, matched, used);
        }
    }
}

/// Exact-then-stem alignment with the fewest chunks at each stage.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> Alignment {
    let exact = align_stage(cand, reference, &Vec::new());
    let cs: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    align_stage(&cs, &rs, &exact)
}

/// METEOR-lite of one candidate against one reference, in `[0, 1]`.
pub fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = meteor_alignment(cand, reference);
    let m = a.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks(&a) as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// Corpus-mean METEOR-lite in `[0, 100]`, best reference per candidate.
pub fn meteor_lite(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| meteor_pair(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * sum / candidates.len() as f64)
}

/// `a · bᵀ` in f64.
pub fn similarity(a: &Array2<f32>, b: &Array2<f32>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim(format!("embedding dims {} and {}", a.ncols(), b.ncols())));
    }
    Ok(a.mapv(f64::from).dot(&b.mapv(f64::from).t()))
}

/// Fraction of rows whose diagonal entry attains the row maximum, plus the
/// similarity matrix.
pub fn retrieval_top1(queries: &Array2<f32>, targets: &Array2<f32>) -> Result<(f64, Array2<f64>)> {
    if queries.nrows() == 0 || queries.nrows() != targets.nrows() {
        return Err(Error::dim(format!(
            "retrieval needs matching non-empty sets, got {} and {}",
            queries.nrows(),
            targets.nrows()
        )));
    }
    let sim = similarity(queries, targets)?;
    let hits = sim
        .outer_iter()
        .enumerate()
        .filter(|(i, row)| row.iter().all(|&x| x <= row[*i]))
        .count();
    Ok((hits as f64 / sim.nrows() as f64, sim))
}

/// A caption is right when it holds a directional word of the truth and
/// none of their mirrors.
pub fn direction_correct(generated: &str, truth: &str, lexicon: &MirrorLexicon) -> bool {
    let gen: BTreeSet<String> = crate::synth::tokenize(generated).into_iter().collect();
    let want: BTreeSet<String> = crate::synth::tokenize(truth)
        .into_iter()
        .filter(|w| lexicon.is_directional(w))
        .collect();
    let avoid: BTreeSet<String> = want.iter().filter_map(|w| lexicon.partner(w)).map(str::to_string).collect();
    want.iter().any(|w| gen.contains(w)) && !avoid.iter().any(|w| gen.contains(w))
}

/// Fraction of directional clips whose caption names the right side.
pub fn direction_accuracy(generated: &[String], truth: &[String], lexicon: &MirrorLexicon) -> Result<f64> {
    if generated.len() != truth.len() {
        return Err(Error::dim("generated and truth captions differ in count"));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    if let Some(t) = truth.iter().find(|t| !crate::synth::tokenize(t).iter().any(|w| lexicon.is_directional(w))) {
        return Err(Error::domain(format!("truth caption '{t}' has no directional word")));
    }
    let ok = generated
        .iter()
        .zip(truth)
        .filter(|(g, t)| direction_correct(g, t, lexicon))
        .count();
    Ok(ok as f64 / generated.len() as f64)
}

/// Writes `<stem>.csv` with every entry at round-trip precision and
/// `<stem>.png` where brighter means more similar.
pub fn export_similarity_heat(matrix: &Array2<f64>, stem: &Path) -> Result<()> {
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("similarity matrix has non-finite entries"));
    }
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(stem.with_extension("csv"))?;
    for row in matrix.outer_iter() {
        w.write_record(row.iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;

    let (n, m) = matrix.dim();
    let cell = 8u32;
    let lo = matrix.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = matrix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::RgbImage::from_fn(m as u32 * cell, n as u32 * cell, |x, y| {
        let v = (matrix[[(y / cell) as usize, (x / cell) as usize]] - lo) / span;
        heat_color(v)
    });
    img.save(stem.with_extension("png"))?;
    Ok(())
}

/// Black through red and yellow to white.
fn heat_color(v: f64) -> image::Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    image::Rgb([ch(v), ch(v - 1.0), ch(v - 2.0)])
}

/// Reads back a matrix written by [`export_similarity_heat`].
pub fn read_similarity_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("bad number '{s}': {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format { path: path.to_path_buf(), msg: "ragged rows".into() });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| Error::dim(e.to_string()))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metric deviations recorded in every report.
pub fn deviations() -> Vec<String> {
    vec![
        "METEOR-lite: exact and suffix-stem matching only, no synonym resources".into(),
        "SPICE omitted: requires a semantic scene-graph parser".into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub reference: String,
    pub candidate: String,
    pub truncated: bool,
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub arm: String,
    pub split: String,
    pub config_hash: String,
    pub seed: u64,
    pub clips: usize,
    pub scores: CorpusScores,
    /// `None` when the split has no directional clips.
    pub direction_accuracy: Option<f64>,
    pub retrieval_top1: f64,
    pub per_clip: Vec<ClipScore>,
    pub deviations: Vec<String>,
}

/// Scores generated captions against their references. `ids`, `candidates`
/// and `references` are parallel.
pub fn score_corpus(ids: &[String], candidates: &[String], truncated: &[bool], references: &[String]) -> Result<(CorpusScores, Vec<ClipScore>)> {
    if ids.len() != candidates.len() || candidates.len() != references.len() || truncated.len() != ids.len() {
        return Err(Error::dim("ids, candidates and references differ in length"));
    }
    let cand: Vec<Tokens> = candidates.iter().map(|c| crate::synth::tokenize(c)).collect();
    let refs: Vec<Vec<Tokens>> = references.iter().map(|r| vec![crate::synth::tokenize(r)]).collect();
    let df = DocumentFrequency::from_references(&refs)?;
    let scores = CorpusScores {
        bleu4: bleu4(&cand, &refs)?,
        meteor_lite: meteor_lite(&cand, &refs)?,
        rouge_l: rouge_l(&cand, &refs)?,
        cider_d: cider_d(&cand, &refs, &df)?,
    };
    let per_clip = (0..ids.len())
        .map(|i| {
            let one_c = std::slice::from_ref(&cand[i]);
            let one_r = std::slice::from_ref(&refs[i]);
            Ok(ClipScore {
                id: ids[i].clone(),
                reference: references[i].clone(),
                candidate: candidates[i].clone(),
                truncated: truncated[i],
                bleu4: bleu4(one_c, one_r)?,
                meteor_lite: meteor_lite(one_c, one_r)?,
                rouge_l: rouge_l(one_c, one_r)?,
                cider_d: cider_d_sentence(&cand[i], &refs[i], &df),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, per_clip))
}
