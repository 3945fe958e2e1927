//! Documents, activation ingestion and binary feature dictionaries.
//!
//! A document's dictionary row is `Y_i = Dict(Z_i)`: feature `j` is present
//! when its largest activation over the document's tokens is strictly above a
//! threshold (zero by default).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::{Error, FeatureId, Result};

/// Whitespace-delimited token spans (byte ranges) of `text`. Activation
/// records index into this tokenization.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (pos, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push(s..pos);
                start = None;
            }
            (false, None) => start = Some(pos),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: Option<String>,
    /// Treatment indicator or other scalar covariate `W_i`.
    pub covariate_w: Option<f64>,
    /// Number of whitespace tokens; `None` when the text is absent.
    pub token_count: Option<usize>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: Option<String>, covariate_w: Option<f64>) -> Self {
        let token_count = text.as_deref().map(|t| token_spans(t).len());
        Self {
            doc_id: doc_id.into(),
            text,
            covariate_w,
            token_count,
        }
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    doc_id: String,
    #[serde(default)]
    w: Option<f64>,
    #[serde(default)]
    text: Option<String>,
}

/// An ordered collection of documents with unique ids. Row `i` of every
/// matrix built from the corpus is document `i`.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate doc_id `{}`", d.doc_id)));
            }
        }
        Ok(Self { docs, index })
    }

    /// Reads the JSON-lines corpus layout (`doc_id`, `w`, `text`).
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut docs = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusLine = serde_json::from_str(&line)
                .map_err(|e| Error::parse(&name, lineno + 1, e.to_string()))?;
            docs.push(Document::new(rec.doc_id, rec.text, rec.w));
        }
        Self::new(docs)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, row: usize) -> &Document {
        &self.docs[row]
    }

    pub fn row_of(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.doc_id.clone()).collect()
    }

    /// The covariate vector, failing if any document lacks `w`.
    pub fn covariates(&self) -> Result<Vec<f64>> {
        self.docs
            .iter()
            .map(|d| {
                d.covariate_w.ok_or_else(|| {
                    Error::Validation(format!("document `{}` has no covariate w", d.doc_id))
                })
            })
            .collect()
    }
}

/// One raw dictionary activation of a feature on a token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub doc_id: String,
    pub feature_id: FeatureId,
    pub token_index: u32,
    pub value: f64,
}

fn parse_activation_line(line: &str, file: &str, lineno: usize) -> Result<ActivationRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::parse(
            file,
            lineno,
            format!("expected 4 tab-separated fields, found {}", fields.len()),
        ));
    }
    let feature_id = fields[1]
        .parse::<FeatureId>()
        .map_err(|e| Error::parse(file, lineno, format!("feature_id: {e}")))?;
    let token_index = fields[2]
        .parse::<u32>()
        .map_err(|e| Error::parse(file, lineno, format!("token_index: {e}")))?;
    let value = fields[3]
        .parse::<f64>()
        .map_err(|e| Error::parse(file, lineno, format!("value: {e}")))?;
    Ok(ActivationRecord {
        doc_id: fields[0].to_string(),
        feature_id,
        token_index,
        value,
    })
}

/// Streams `doc_id<TAB>feature_id<TAB>token_index<TAB>value` records.
pub fn read_activations(path: &Path) -> Result<impl Iterator<Item = Result<ActivationRecord>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Err(e) => Some(Err(Error::io(&owned, e))),
            Ok(l) if l.is_empty() => None,
            Ok(l) => Some(parse_activation_line(&l, &name, i + 1)),
        }))
}

pub fn write_activations(path: &Path, records: &[ActivationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.doc_id, r.feature_id, r.token_index, r.value).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// How a feature matrix was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    /// Max over tokens, then `max > threshold`.
    MaxPool { threshold: f64 },
    /// Read from a precomputed dictionary file.
    Precomputed,
    Synthetic,
}

/// Binary document × feature matrix `Y`, stored by column.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    doc_ids: Vec<String>,
    feature_ids: Vec<FeatureId>,
    /// Ascending row indices holding a 1, per feature.
    columns: Vec<Vec<u32>>,
    dropped: Vec<FeatureId>,
    provenance: Provenance,
}

impl FeatureMatrix {
    pub fn from_columns(
        doc_ids: Vec<String>,
        feature_ids: Vec<FeatureId>,
        columns: Vec<Vec<u32>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if feature_ids.len() != columns.len() {
            return Err(Error::Validation(format!(
                "{} feature ids for {} columns",
                feature_ids.len(),
                columns.len()
            )));
        }
        if feature_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("feature ids must be strictly increasing".into()));
        }
        let n = doc_ids.len();
        for (fid, col) in feature_ids.iter().zip(&columns) {
            if col.windows(2).any(|w| w[0] >= w[1]) || col.last().is_some_and(|&r| r as usize >= n) {
                return Err(Error::Validation(format!(
                    "column for feature {fid} has unsorted or out-of-range rows"
                )));
            }
        }
        Ok(Self {
            doc_ids,
            feature_ids,
            columns,
            dropped: Vec::new(),
            provenance,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn feature_ids(&self) -> &[FeatureId] {
        &self.feature_ids
    }

    /// Rows where feature at position `j` is 1.
    pub fn column(&self, j: usize) -> &[u32] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<u32>] {
        &self.columns
    }

    pub fn dropped_features(&self) -> &[FeatureId] {
        &self.dropped
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn position_of(&self, feature: FeatureId) -> Option<usize> {
        self.feature_ids.binary_search(&feature).ok()
    }

    pub fn get(&self, row: usize, j: usize) -> u8 {
        u8::from(self.columns[j].binary_search(&(row as u32)).is_ok())
    }

    /// Dense 0/1 row of document `row`.
    pub fn row(&self, row: usize) -> Vec<u8> {
        (0..self.n_features()).map(|j| self.get(row, j)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Restricts to `rows` (renumbered `0..rows.len()` in the given order);
    /// every feature is kept.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.n_docs();
        let mut new_index = vec![u32::MAX; n];
        for (new, &old) in rows.iter().enumerate() {
            if old >= n {
                return Err(Error::Validation(format!("row {old} out of range (n = {n})")));
            }
            if new_index[old] != u32::MAX {
                return Err(Error::Validation(format!("row {old} selected twice")));
            }
            new_index[old] = new as u32;
        }
        let columns = self
            .columns
            .iter()
            .map(|col| {
                let mut c: Vec<u32> = col
                    .iter()
                    .map(|&r| new_index[r as usize])
                    .filter(|&r| r != u32::MAX)
                    .collect();
                c.sort_unstable();
                c
            })
            .collect();
        Ok(Self {
            doc_ids: rows.iter().map(|&r| self.doc_ids[r].clone()).collect(),
            feature_ids: self.feature_ids.clone(),
            columns,
            dropped: self.dropped.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Reorders rows to follow `corpus`. Both must hold the same doc ids.
    pub fn align_to(&self, corpus: &Corpus) -> Result<Self> {
        if corpus.len() != self.n_docs() {
            return Err(Error::Validation(format!(
                "dictionary has {} documents, corpus has {}",
                self.n_docs(),
                corpus.len()
            )));
        }
        let mut rows = Vec::with_capacity(corpus.len());
        let local: HashMap<&str, usize> =
            self.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        for doc in corpus.docs() {
            let r = local
                .get(doc.doc_id.as_str())
                .ok_or_else(|| Error::UnknownDocument(doc.doc_id.clone()))?;
            rows.push(*r);
        }
        self.select_rows(&rows)
    }
}

/// Max-pools activations per (document, feature) and marks entries whose
/// maximum is strictly above `threshold`.
pub fn pool_and_binarize<I>(records: I, corpus: &Corpus, threshold: f64) -> Result<FeatureMatrix>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be nonnegative, got {threshold}")));
    }
    let mut maxima: HashMap<FeatureId, HashMap<u32, f64>> = HashMap::new();
    for rec in records {
        let rec = rec?;
        let row = corpus
            .row_of(&rec.doc_id)
            .ok_or_else(|| Error::UnknownDocument(rec.doc_id.clone()))?;
        if !(rec.value >= 0.0) || !rec.value.is_finite() {
            return Err(Error::Validation(format!(
                "activation value {} for doc `{}` feature {} must be finite and nonnegative",
                rec.value, rec.doc_id, rec.feature_id
            )));
        }
        if let Some(tc) = corpus.get(row).token_count {
            if rec.token_index as usize >= tc {
                return Err(Error::Validation(format!(
                    "token_index {} out of range for doc `{}` with {} tokens",
                    rec.token_index, rec.doc_id, tc
                )));
            }
        }
        let slot = maxima.entry(rec.feature_id).or_default().entry(row as u32).or_insert(0.0);
        if rec.value > *slot {
            *slot = rec.value;
        }
    }
    for doc in corpus.docs() {
        if doc.token_count == Some(0) {
            log::warn!("document `{}` has no tokens; its dictionary row is all zero", doc.doc_id);
        }
    }
    let mut feature_ids: Vec<FeatureId> = maxima.keys().copied().collect();
    feature_ids.sort_unstable();
    let columns = feature_ids
        .iter()
        .map(|f| {
            let mut col: Vec<u32> = maxima[f]
                .iter()
                .filter(|(_, &m)| m > threshold)
                .map(|(&r, _)| r)
                .collect();
            col.sort_unstable();
            col
        })
        .collect();
    FeatureMatrix::from_columns(corpus.doc_ids(), feature_ids, columns, Provenance::MaxPool { threshold })
}

/// Keeps the features with at least one nonzero entry among `scope` rows.
/// Removed feature ids are appended to the matrix's dropped list.
pub fn drop_degenerate(matrix: &FeatureMatrix, scope: &[usize]) -> Result<FeatureMatrix> {
    if scope.is_empty() {
        return Err(Error::Validation("degenerate-feature scope is empty".into()));
    }
    let n = matrix.n_docs();
    let mut in_scope = vec![false; n];
    for &r in scope {
        if r >= n {
            return Err(Error::Validation(format!("scope row {r} out of range (n = {n})")));
        }
        in_scope[r] = true;
    }
    let mut out = matrix.clone();
    out.feature_ids.clear();
    out.columns.clear();
    let mut dropped: BTreeSet<FeatureId> = matrix.dropped.iter().copied().collect();
    for (fid, col) in matrix.feature_ids.iter().zip(&matrix.columns) {
        if col.iter().any(|&r| in_scope[r as usize]) {
            out.feature_ids.push(*fid);
            out.columns.push(col.clone());
        } else {
            dropped.insert(*fid);
        }
    }
    out.dropped = dropped.into_iter().collect();
    Ok(out)
}

/// Random partition of `0..n_total` into estimation and evaluation rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub estim: Vec<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
}

/// Splits `n_total` rows; `m = round(eval_fraction * n_total)` rows go to the
/// evaluation split. Both index lists are returned in ascending order.
pub fn split_sample(n_total: usize, eval_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval fraction must lie in (0, 1), got {eval_fraction}")));
    }
    let m = (eval_fraction * n_total as f64).round() as usize;
    if m < 1 || n_total < m + 2 {
        return Err(Error::Config(format!(
            "split of {n_total} rows at fraction {eval_fraction} leaves {m} eval and {} estimation rows; need at least 1 and 2",
            n_total.saturating_sub(m)
        )));
    }
    let mut perm: Vec<usize> = (0..n_total).collect();
    perm.shuffle(&mut keyed_rng(seed, 0));
    let mut eval = perm[..m].to_vec();
    let mut estim = perm[m..].to_vec();
    eval.sort_unstable();
    estim.sort_unstable();
    Ok(SplitIndices { estim, eval, seed })
}

const DICT_MAGIC: &str = "DICT v1";

/// Serializes a matrix to the dictionary file layout:
///
/// ```text
/// DICT v1 n=<n> p_declared=<p>
/// @doc<TAB><doc_id>          (n lines, row order)
/// @feature<TAB><feature_id>  (p lines, increasing)
/// @dropped<TAB><feature_id>  (optional, increasing)
/// <doc_id><TAB><feature_id>  (one per nonzero, by row then feature)
/// ```
pub fn write_dictionary(matrix: &FeatureMatrix) -> String {
    let mut out = String::new();
    writeln!(out, "{DICT_MAGIC} n={} p_declared={}", matrix.n_docs(), matrix.n_features()).unwrap();
    for d in &matrix.doc_ids {
        writeln!(out, "@doc\t{d}").unwrap();
    }
    for f in &matrix.feature_ids {
        writeln!(out, "@feature\t{f}").unwrap();
    }
    for f in &matrix.dropped {
        writeln!(out, "@dropped\t{f}").unwrap();
    }
    let mut by_row: Vec<Vec<FeatureId>> = vec![Vec::new(); matrix.n_docs()];
    for (fid, col) in matrix.feature_ids.iter().zip(&matrix.columns) {
        for &r in col {
            by_row[r as usize].push(*fid);
        }
    }
    for (row, feats) in by_row.iter().enumerate() {
        for f in feats {
            writeln!(out, "{}\t{f}", matrix.doc_ids[row]).unwrap();
        }
    }
    out
}

pub fn save_dictionary_file(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(write_dictionary(matrix).as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn parse_header_field(tok: Option<&str>, key: &str, file: &str) -> Result<usize> {
    tok.and_then(|t| t.strip_prefix(key))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(file, 1, format!("header must carry `{key}<integer>`")))
}

/// Parses the dictionary layout written by [`write_dictionary`]. Pairs must
/// follow declaration order (row, then increasing feature id).
pub fn parse_dictionary(text: &str, file: &str) -> Result<FeatureMatrix> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let rest = header
        .strip_prefix(DICT_MAGIC)
        .ok_or_else(|| Error::parse(file, 1, format!("expected `{DICT_MAGIC}` header")))?;
    let mut toks = rest.split_whitespace();
    let n = parse_header_field(toks.next(), "n=", file)?;
    let p = parse_header_field(toks.next(), "p_declared=", file)?;
    if toks.next().is_some() {
        return Err(Error::parse(file, 1, "trailing header fields"));
    }

    let mut doc_ids = Vec::with_capacity(n);
    let mut doc_index: HashMap<String, usize> = HashMap::with_capacity(n);
    let mut feature_ids: Vec<FeatureId> = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<(usize, FeatureId)> = None;
    let mut lineno = 1;
    for line in lines {
        lineno += 1;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(file, lineno, "expected two tab-separated fields"))?;
        if b.contains('\t') {
            return Err(Error::parse(file, lineno, "expected two tab-separated fields"));
        }
        let parse_fid = |s: &str| {
            s.parse::<FeatureId>()
                .map_err(|e| Error::parse(file, lineno, format!("feature id `{s}`: {e}")))
        };
        match a {
            "@doc" => {
                if !pairs.is_empty() || !feature_ids.is_empty() {
                    return Err(Error::parse(file, lineno, "@doc after features or pairs"));
                }
                if doc_index.insert(b.to_string(), doc_ids.len()).is_some() {
                    return Err(Error::parse(file, lineno, format!("doc `{b}` declared twice")));
                }
                doc_ids.push(b.to_string());
            }
            "@feature" => {
                let f = parse_fid(b)?;
                if !pairs.is_empty() || !dropped.is_empty() {
                    return Err(Error::parse(file, lineno, "@feature after pairs"));
                }
                if feature_ids.last().is_some_and(|&l| l >= f) {
                    return Err(Error::parse(file, lineno, "feature ids must be strictly increasing"));
                }
                feature_ids.push(f);
            }
            "@dropped" => {
                let f = parse_fid(b)?;
                if !pairs.is_empty() {
                    return Err(Error::parse(file, lineno, "@dropped after pairs"));
                }
                if dropped.last().is_some_and(|&l| l >= f) {
                    return Err(Error::parse(file, lineno, "dropped ids must be strictly increasing"));
                }
                dropped.push(f);
            }
            doc => {
                let row = *doc_index
                    .get(doc)
                    .ok_or_else(|| Error::parse(file, lineno, format!("pair references undeclared doc `{doc}`")))?;
                let f = parse_fid(b)?;
                let col = feature_ids
                    .binary_search(&f)
                    .map_err(|_| Error::parse(file, lineno, format!("pair references undeclared feature {f}")))?;
                if let Some(prev) = last {
                    if prev == (row, f) {
                        return Err(Error::parse(file, lineno, format!("duplicate pair ({doc}, {f})")));
                    }
                    if prev > (row, f) {
                        return Err(Error::parse(file, lineno, "pairs out of order (row, then feature)"));
                    }
                }
                last = Some((row, f));
                pairs.push((row, col));
            }
        }
    }
    if doc_ids.len() != n {
        return Err(Error::parse(file, 1, format!("header declares n={n}, found {} @doc lines", doc_ids.len())));
    }
    if feature_ids.len() != p {
        return Err(Error::parse(
            file,
            1,
            format!("header declares p_declared={p}, found {} @feature lines", feature_ids.len()),
        ));
    }
    let mut columns = vec![Vec::new(); p];
    for (row, col) in pairs {
        columns[col].push(row as u32);
    }
    let mut m = FeatureMatrix::from_columns(doc_ids, feature_ids, columns, Provenance::Precomputed)?;
    m.dropped = dropped;
    Ok(m)
}

pub fn load_dictionary_file(path: &Path) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dictionary(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(doc: &str, f: u32, tok: u32, v: f64) -> Result<ActivationRecord> {
        Ok(ActivationRecord {
            doc_id: doc.into(),
            feature_id: FeatureId(f),
            token_index: tok,
            value: v,
        })
    }

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), Some(t.to_string()), Some((i % 2) as f64)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn strict_threshold_on_max() {
        let c = corpus(&["a b", "a b"]);
        let m = pool_and_binarize(
            vec![rec("d0", 3, 0, 0.0), rec("d0", 3, 1, 0.0), rec("d1", 3, 0, 0.0), rec("d1", 3, 1, 2.3)],
            &c,
            0.0,
        )
        .unwrap();
        assert_eq!(m.feature_ids(), &[FeatureId(3)]);
        assert_eq!(m.get(0, 0), 0);
        assert_eq!(m.get(1, 0), 1);
    }

    #[test]
    fn empty_document_gives_zero_row() {
        let c = corpus(&["", "x y"]);
        let m = pool_and_binarize(vec![rec("d1", 1, 1, 0.5)], &c, 0.0).unwrap();
        assert_eq!(m.row(0), vec![0]);
        assert_eq!(m.row(1), vec![1]);
    }

    #[test]
    fn ingestion_errors() {
        let c = corpus(&["a"]);
        match pool_and_binarize(vec![rec("nope", 1, 0, 1.0)], &c, 0.0) {
            Err(Error::UnknownDocument(id)) => assert_eq!(id, "nope"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            pool_and_binarize(vec![rec("d0", 1, 0, -1.0)], &c, 0.0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            pool_and_binarize(vec![rec("d0", 1, 4, 1.0)], &c, 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn drop_degenerate_cases() {
        let ids = (0..4).map(|i| format!("d{i}")).collect();
        let m = FeatureMatrix::from_columns(
            ids,
            vec![FeatureId(1), FeatureId(5), FeatureId(9)],
            vec![vec![0, 2], vec![], vec![3]],
            Provenance::Synthetic,
        )
        .unwrap();
        let all = drop_degenerate(&m, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.feature_ids(), &[FeatureId(1), FeatureId(9)]);
        assert_eq!(all.dropped_features(), &[FeatureId(5)]);
        // feature 9 is only nonzero on row 3, outside this scope
        let estim = drop_degenerate(&m, &[0, 1, 2]).unwrap();
        assert_eq!(estim.feature_ids(), &[FeatureId(1)]);
        assert_eq!(estim.dropped_features(), &[FeatureId(5), FeatureId(9)]);
        // identity case
        assert_eq!(drop_degenerate(&all, &[0, 1, 2, 3]).unwrap(), all);
        assert!(drop_degenerate(&m, &[]).is_err());
    }

    #[test]
    fn split_examples() {
        let s = split_sample(10, 0.1, 3).unwrap();
        assert_eq!(s.eval.len(), 1);
        assert_eq!(s.estim.len(), 9);
        assert!(s.eval.iter().all(|e| !s.estim.contains(e)));
        assert_eq!(s, split_sample(10, 0.1, 3).unwrap());
        assert!(split_sample(2, 0.9, 3).is_err());
        assert!(split_sample(10, 0.0, 3).is_err());
        assert!(split_sample(10, 1.0, 3).is_err());
    }

    #[test]
    fn dictionary_errors() {
        let ok = "DICT v1 n=2 p_declared=1\n@doc\ta\n@doc\tb\n@feature\t4\nb\t4\n";
        let m = parse_dictionary(ok, "t").unwrap();
        assert_eq!(m.row(1), vec![1]);
        assert_eq!(write_dictionary(&m), ok);

        let empty = "DICT v1 n=2 p_declared=1\n@doc\ta\n@doc\tb\n@feature\t4\n";
        assert_eq!(parse_dictionary(empty, "t").unwrap().nnz(), 0);

        let undeclared = "DICT v1 n=1 p_declared=1\n@doc\ta\n@feature\t4\nzz\t4\n";
        match parse_dictionary(undeclared, "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let dup = "DICT v1 n=1 p_declared=1\n@doc\ta\n@feature\t4\na\t4\na\t4\n";
        match parse_dictionary(dup, "t") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let malformed = "DICT v1 n=1 p_declared=1\n@doc\ta\n@feature\t4\na 4\n";
        assert!(matches!(parse_dictionary(malformed, "t"), Err(Error::Parse { line: 4, .. })));
        assert!(parse_dictionary("DICT v2 n=1 p_declared=0\n", "t").is_err());
    }

    #[test]
    fn token_spans_whitespace() {
        let t = "  a bb\tc\n";
        let spans: Vec<&str> = token_spans(t).into_iter().map(|r| &t[r]).collect();
        assert_eq!(spans, vec!["a", "bb", "c"]);
    }

    fn arb_matrix() -> impl Strategy<Value = FeatureMatrix> {
        (1usize..12, 0usize..8).prop_flat_map(|(n, p)| {
            let ids = proptest::collection::btree_set(0u32..500, p);
            let cols = proptest::collection::vec(proptest::collection::btree_set(0..n as u32, 0..=n), p);
            (Just(n), ids, cols).prop_map(|(n, ids, cols)| {
                let p = ids.len();
                FeatureMatrix::from_columns(
                    (0..n).map(|i| format!("doc-{i}")).collect(),
                    ids.into_iter().map(FeatureId).collect(),
                    cols.into_iter().take(p).map(|c| c.into_iter().collect()).collect(),
                    Provenance::Precomputed,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn dictionary_round_trip(m in arb_matrix()) {
            let text = write_dictionary(&m);
            let back = parse_dictionary(&text, "t").unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(write_dictionary(&back), text);
        }

        #[test]
        fn drop_degenerate_idempotent_and_commutes(m in arb_matrix(), mask in proptest::collection::vec(any::<bool>(), 12)) {
            let scope: Vec<usize> = (0..m.n_docs()).filter(|&i| mask[i]).collect();
            prop_assume!(!scope.is_empty());
            let once = drop_degenerate(&m, &scope).unwrap();
            prop_assert_eq!(&drop_degenerate(&once, &scope).unwrap(), &once);
            let sub = m.select_rows(&scope).unwrap();
            let all: Vec<usize> = (0..scope.len()).collect();
            let a = once.select_rows(&scope).unwrap();
            let b = drop_degenerate(&sub, &all).unwrap();
            prop_assert_eq!(a.feature_ids(), b.feature_ids());
            prop_assert_eq!(a.columns(), b.columns());
        }

        #[test]
        fn split_partitions(n in 3usize..200, frac in 0.05f64..0.6, seed in any::<u64>()) {
            if let Ok(s) = split_sample(n, frac, seed) {
                let mut all: Vec<usize> = s.estim.iter().chain(&s.eval).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(s.eval.len(), (frac * n as f64).round() as usize);
            }
        }

        #[test]
        fn raising_threshold_never_adds_entries(vals in proptest::collection::vec((0usize..4, 0u32..3, 0u32..3, 0.0f64..5.0), 0..40), t1 in 0.0f64..5.0, dt in 0.0f64..3.0) {
            let c = corpus(&["a b c", "a b c", "a b c", "a b c"]);
            let recs = || vals.iter().map(|&(d, f, tok, v)| rec(&format!("d{d}"), f, tok, v)).collect::<Vec<_>>();
            let lo = pool_and_binarize(recs(), &c, t1).unwrap();
            let hi = pool_and_binarize(recs(), &c, t1 + dt).unwrap();
            prop_assert_eq!(lo.feature_ids(), hi.feature_ids());
            for j in 0..lo.n_features() {
                for i in 0..4 {
                    prop_assert!(hi.get(i, j) <= lo.get(i, j));
                }
            }
        }
    }
}
