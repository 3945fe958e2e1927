//! Plot-ready rows for ranked discoveries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use discovery_core::inference::InferenceReport;
use discovery_core::scoring::{sanitize_field, ScoreSummary};

pub const HEADER: &str = "rank\tfeature_id\testimate\tci_lower\tci_upper\tdescription\ta_score\ta_ci_lower\ta_ci_upper";

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

/// One row per selected feature, ranked by estimate. Every scored feature
/// must be a discovery of the report.
pub fn plot_rows(report: &InferenceReport, scores: &[ScoreSummary]) -> Result<String> {
    let mut by_id = BTreeMap::new();
    for s in scores {
        match report.record(s.feature_id) {
            Some(r) if r.rejected => {}
            Some(_) => bail!("score report has feature {} which the inference report did not select", s.feature_id),
            None => bail!("score report has feature {} which is absent from the inference report", s.feature_id),
        }
        by_id.insert(s.feature_id, s);
    }
    let mut recs: Vec<_> = report.per_feature.iter().filter(|r| r.rejected).collect();
    recs.sort_by(|a, b| b.theta_hat.total_cmp(&a.theta_hat).then(a.feature_id.cmp(&b.feature_id)));
    let mut out = format!("{HEADER}\n");
    for (rank, r) in recs.iter().enumerate() {
        let s = by_id.get(&r.feature_id);
        if s.is_none() {
            log::warn!("discovery {} has no description", r.feature_id);
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}",
            rank + 1,
            r.feature_id,
            r.theta_hat,
            opt(r.ci_lower, 6),
            opt(r.ci_upper, 6),
            s.map(|s| sanitize_field(&s.description)).unwrap_or_default(),
            opt(s.and_then(|s| s.a_score), 4),
            opt(s.and_then(|s| s.a_ci_lower), 4),
            opt(s.and_then(|s| s.a_ci_upper), 4),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use discovery_core::inference::{FeatureRecord, InferenceConfig};
    use discovery_core::transform::FeatureStatus;
    use discovery_core::FeatureId;

    fn report(thetas: &[(f64, bool)]) -> InferenceReport {
        let per_feature: Vec<FeatureRecord> = thetas
            .iter()
            .enumerate()
            .map(|(j, &(theta_hat, rejected))| FeatureRecord {
                feature_id: FeatureId(j as u32),
                theta_hat,
                t_stat: Some(theta_hat * 10.0),
                ci_lower: Some(theta_hat - 0.1),
                ci_upper: Some(theta_hat + 0.1),
                rejected,
                status: FeatureStatus::Testable,
            })
            .collect();
        InferenceReport {
            config: InferenceConfig::default(),
            n: 100,
            p: per_feature.len(),
            studentized: true,
            selected: per_feature.iter().filter(|r| r.rejected).map(|r| r.feature_id).collect(),
            critical_values: Vec::new(),
            subset_approximation: false,
            per_feature,
        }
    }

    fn summary(id: u32, desc: &str) -> ScoreSummary {
        ScoreSummary {
            feature_id: FeatureId(id),
            description: desc.into(),
            a_score: Some(0.8),
            a_ci_lower: Some(0.7),
            a_ci_upper: Some(0.9),
            p_score: None,
            r_score: None,
            m_effective: 50,
        }
    }

    #[test]
    fn ranks_by_estimate_and_joins_descriptions() {
        let r = report(&[(0.2, true), (0.5, true), (0.9, false)]);
        let text = plot_rows(&r, &[summary(0, "taxes")]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t1\t0.500000"));
        assert!(lines[1].contains("\t\t\t\t"), "undescribed row has empty fields: {}", lines[1]);
        assert!(lines[2].starts_with("2\t0\t") && lines[2].contains("taxes\t0.8000"));
    }

    #[test]
    fn scores_must_refer_to_discoveries() {
        let r = report(&[(0.2, true), (0.5, false)]);
        assert!(plot_rows(&r, &[summary(1, "x")]).is_err());
        assert!(plot_rows(&r, &[summary(7, "x")]).is_err());
    }
}
