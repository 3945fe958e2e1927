use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{token_spans, ActivationRecord, Corpus};
use crate::{Error, FeatureId, Result};

pub const DEFAULT_EXEMPLARS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub doc_id: String,
    pub annotated_text: String,
    pub max_activation_value: f64,
}

/// At most `L` exemplars, by maximal activation descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub feature_id: FeatureId,
    pub exemplars: Vec<Exemplar>,
    pub limit: usize,
}

/// Wraps token `index` of `text` in `<<` and `>>`.
pub fn annotate(text: &str, index: usize) -> Option<String> {
    let span = token_spans(text).into_iter().nth(index)?;
    Some(format!("{}<<{}>>{}", &text[..span.start], &text[span.clone()], &text[span.end..]))
}

#[derive(Clone, Copy)]
struct Peak {
    value: f64,
    token: u32,
}

/// Exemplar sets for several features in one pass over `records`.
///
/// Only rows in `allowed_rows` (corpus row indices, normally the estimation
/// split) contribute. Within a document the earliest token reaching the
/// maximum is annotated; documents tied on the maximum keep corpus order.
pub fn extract_exemplar_sets<I>(
    records: I,
    corpus: &Corpus,
    allowed_rows: &[usize],
    features: &[FeatureId],
    limit: usize,
) -> Result<BTreeMap<FeatureId, ExemplarSet>>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    if limit == 0 {
        return Err(Error::Config("exemplar limit must be positive".into()));
    }
    let mut allowed = vec![false; corpus.len()];
    for &r in allowed_rows {
        allowed[r] = true;
    }
    let wanted: HashMap<FeatureId, usize> = features.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut peaks: Vec<HashMap<usize, Peak>> = vec![HashMap::new(); features.len()];
    for rec in records {
        let rec = rec?;
        let Some(&slot) = wanted.get(&rec.feature_id) else {
            continue;
        };
        let row = corpus
            .row_of(&rec.doc_id)
            .ok_or_else(|| Error::UnknownDocument(rec.doc_id.clone()))?;
        if !allowed[row] || !(rec.value > 0.0) {
            continue;
        }
        let e = peaks[slot].entry(row).or_insert(Peak {
            value: rec.value,
            token: rec.token_index,
        });
        if rec.value > e.value || (rec.value == e.value && rec.token_index < e.token) {
            *e = Peak {
                value: rec.value,
                token: rec.token_index,
            };
        }
    }

    let mut out = BTreeMap::new();
    for (slot, &feature) in features.iter().enumerate() {
        let mut docs: Vec<(usize, Peak)> = peaks[slot].iter().map(|(&r, &p)| (r, p)).collect();
        if docs.is_empty() {
            return Err(Error::DeadFeature(feature));
        }
        docs.sort_by(|a, b| b.1.value.total_cmp(&a.1.value).then(a.0.cmp(&b.0)));
        docs.truncate(limit);
        let exemplars = docs
            .into_iter()
            .map(|(row, peak)| {
                let doc = corpus.get(row);
                let text = doc
                    .text
                    .as_deref()
                    .ok_or_else(|| Error::Validation(format!("document `{}` has no text to annotate", doc.doc_id)))?;
                let annotated_text = annotate(text, peak.token as usize).ok_or_else(|| {
                    Error::Validation(format!("token {} out of range in document `{}`", peak.token, doc.doc_id))
                })?;
                Ok(Exemplar {
                    doc_id: doc.doc_id.clone(),
                    annotated_text,
                    max_activation_value: peak.value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(
            feature,
            ExemplarSet {
                feature_id: feature,
                exemplars,
                limit,
            },
        );
    }
    Ok(out)
}

pub fn extract_exemplars<I>(records: I, corpus: &Corpus, allowed_rows: &[usize], feature: FeatureId, limit: usize) -> Result<ExemplarSet>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    let mut sets = extract_exemplar_sets(records, corpus, allowed_rows, &[feature], limit)?;
    Ok(sets.remove(&feature).expect("requested feature present"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;

    fn rec(doc: &str, f: u32, t: u32, v: f64) -> Result<ActivationRecord> {
        Ok(ActivationRecord {
            doc_id: doc.into(),
            feature_id: FeatureId(f),
            token_index: t,
            value: v,
        })
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            Document::new("a", Some("x y z".into()), None),
            Document::new("b", Some("a b c".into()), None),
            Document::new("c", Some("one two".into()), None),
            Document::new("d", Some("held out".into()), None),
        ])
        .unwrap()
    }

    #[test]
    fn top_documents_in_order() {
        let recs = vec![rec("a", 1, 0, 2.0), rec("b", 1, 1, 5.0), rec("c", 1, 0, 1.0), rec("d", 1, 0, 9.0)];
        let set = extract_exemplars(recs, &corpus(), &[0, 1, 2], FeatureId(1), 2).unwrap();
        let ids: Vec<&str> = set.exemplars.iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(set.exemplars[0].max_activation_value, 5.0);
    }

    #[test]
    fn annotation_and_ties() {
        let recs = vec![rec("b", 1, 0, 0.0), rec("b", 1, 1, 7.0), rec("b", 1, 2, 0.0)];
        let set = extract_exemplars(recs, &corpus(), &[1], FeatureId(1), 20).unwrap();
        assert_eq!(set.exemplars[0].annotated_text, "a <<b>> c");
        let tied = vec![rec("a", 1, 2, 3.0), rec("a", 1, 1, 3.0)];
        let set = extract_exemplars(tied, &corpus(), &[0], FeatureId(1), 20).unwrap();
        assert_eq!(set.exemplars[0].annotated_text, "x <<y>> z");
    }

    #[test]
    fn dead_and_held_out_features() {
        let recs = vec![rec("d", 2, 0, 4.0)];
        assert!(matches!(
            extract_exemplars(recs, &corpus(), &[0, 1, 2], FeatureId(2), 5),
            Err(Error::DeadFeature(FeatureId(2)))
        ));
        assert!(extract_exemplars(vec![rec("zz", 2, 0, 1.0)], &corpus(), &[0], FeatureId(2), 5).is_err());
        assert!(extract_exemplars(vec![rec("a", 2, 9, 1.0)], &corpus(), &[0], FeatureId(2), 5).is_err());
    }

    #[test]
    fn annotate_keeps_whitespace() {
        assert_eq!(annotate("  hello\tworld ", 1).unwrap(), "  hello\t<<world>> ");
        assert!(annotate("a", 1).is_none());
    }
}
