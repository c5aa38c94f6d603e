//! Classification metrics and slice analysis: AUC-ROC (rank based, ties at
//! one half), accuracy and macro-F1, worst-group accuracy and gap, and the
//! Borkan bias triplet (Subgroup / BPSN / BNSP AUC).
//!
//! Metrics that cannot be computed (a slice with a single class) report
//! [`MetricValue::Undefined`] instead of a sentinel number.

use std::collections::BTreeMap;

use serde::ser::Serializer;
use serde::Serialize;
use thiserror::Error;

use crate::data::LabeledExample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not binary (expected exactly 0 or 1)")]
    NonBinaryLabel(f64),
    #[error("subgroup list empty")]
    NoSubgroups,
}

/// A metric value or an explicit "cannot be computed" marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Undefined => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, MetricValue::Value(_))
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v:.6}"),
            MetricValue::Undefined => write!(f, "undefined"),
        }
    }
}

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties counted one half. Rank statistics, O(n log n). Single-class
/// inputs are undefined.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<MetricValue, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(MetricValue::Undefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));

    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(MetricValue::Value(u / (n_pos as f64 * n_neg as f64)))
}

/// Confusion-matrix metrics at a score threshold (score >= threshold predicts
/// positive). Empty-denominator F1 is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub f1_positive: f64,
    pub f1_negative: f64,
    pub macro_f1: f64,
}

pub fn threshold_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ThresholdMetrics, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = |tp: usize, fp: usize, fnn: usize| -> f64 {
        let denom = 2 * tp + fp + fnn;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let f1_positive = f1(tp, fp, fnn);
    // Negative-class F1 swaps the roles: true negatives are its "hits".
    let f1_negative = f1(tn, fnn, fp);
    Ok(ThresholdMetrics {
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        f1_positive,
        f1_negative,
        macro_f1: (f1_positive + f1_negative) / 2.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupAccuracy {
    pub tag: String,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstGroupReport {
    pub avg_acc: f64,
    pub worst_acc: f64,
    pub gap: f64,
    pub groups: Vec<GroupAccuracy>,
    /// Subgroups excluded because no example carries them.
    pub empty_groups: Vec<String>,
}

/// Average accuracy over all examples, worst per-subgroup accuracy, and the
/// gap between the two. `group_tags` names the evaluated subpopulations; an
/// empty list derives them from the memberships.
pub fn worst_group(
    scores: &[f64],
    labels: &[bool],
    memberships: &[Vec<String>],
    group_tags: &[String],
    threshold: f64,
) -> Result<WorstGroupReport, MetricsError> {
    if scores.len() != labels.len() || scores.len() != memberships.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let tags: Vec<String> = if group_tags.is_empty() {
        let mut t: Vec<String> = memberships.iter().flatten().cloned().collect();
        t.sort();
        t.dedup();
        t
    } else {
        group_tags.to_vec()
    };
    if tags.is_empty() {
        return Err(MetricsError::NoSubgroups);
    }

    let correct: Vec<bool> =
        scores.iter().zip(labels).map(|(&s, &l)| (s >= threshold) == l).collect();
    let avg_acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;

    let mut groups = Vec::new();
    let mut empty_groups = Vec::new();
    for tag in &tags {
        let idx: Vec<usize> =
            (0..memberships.len()).filter(|&i| memberships[i].iter().any(|t| t == tag)).collect();
        if idx.is_empty() {
            empty_groups.push(tag.clone());
            continue;
        }
        let acc =
            idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64;
        groups.push(GroupAccuracy { tag: tag.clone(), accuracy: acc, count: idx.len() });
    }
    if groups.is_empty() {
        return Err(MetricsError::NoSubgroups);
    }
    let worst_acc = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(WorstGroupReport { avg_acc, worst_acc, gap: avg_acc - worst_acc, groups, empty_groups })
}

/// The Borkan bias triplet for one subgroup.
#[derive(Debug, Clone, Serialize)]
pub struct BiasTriplet {
    pub subgroup_auc: MetricValue,
    /// Background positives vs subgroup negatives; low values flag subgroup
    /// false positives.
    pub bpsn_auc: MetricValue,
    /// Background negatives vs subgroup positives; low values flag subgroup
    /// false negatives.
    pub bnsp_auc: MetricValue,
}

pub fn bias_triplet(
    scores: &[f64],
    labels: &[bool],
    in_subgroup: &[bool],
) -> Result<BiasTriplet, MetricsError> {
    if scores.len() != labels.len() || scores.len() != in_subgroup.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let subset = |keep: &dyn Fn(usize) -> bool| -> (Vec<f64>, Vec<bool>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..scores.len() {
            if keep(i) {
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        (s, l)
    };
    let auc_of = |keep: &dyn Fn(usize) -> bool| -> Result<MetricValue, MetricsError> {
        let (s, l) = subset(keep);
        if s.is_empty() {
            return Ok(MetricValue::Undefined);
        }
        auc_roc(&s, &l)
    };
    Ok(BiasTriplet {
        subgroup_auc: auc_of(&|i| in_subgroup[i])?,
        bpsn_auc: auc_of(&|i| (!in_subgroup[i] && labels[i]) || (in_subgroup[i] && !labels[i]))?,
        bnsp_auc: auc_of(&|i| (!in_subgroup[i] && !labels[i]) || (in_subgroup[i] && labels[i]))?,
    })
}

/// Metrics for one slice of the data.
#[derive(Debug, Clone, Serialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub auc_roc: MetricValue,
    pub accuracy: MetricValue,
    pub macro_f1: MetricValue,
}

/// Per-attribute evaluation keyed by slice.
#[derive(Debug, Clone, Serialize)]
pub struct AttributeReport {
    pub slices: BTreeMap<String, SliceMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_group: Option<WorstGroupReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub attributes: BTreeMap<String, AttributeReport>,
    pub examples: usize,
}

const DEFAULT_THRESHOLD: f64 = 0.5;

fn slice_metrics(scores: &[f64], labels: &[bool]) -> SliceMetrics {
    let auc = auc_roc(scores, labels).unwrap_or(MetricValue::Undefined);
    match threshold_metrics(scores, labels, DEFAULT_THRESHOLD) {
        Ok(t) => SliceMetrics {
            count: scores.len(),
            auc_roc: auc,
            accuracy: MetricValue::Value(t.accuracy),
            macro_f1: MetricValue::Value(t.macro_f1),
        },
        Err(_) => SliceMetrics {
            count: scores.len(),
            auc_roc: auc,
            accuracy: MetricValue::Undefined,
            macro_f1: MetricValue::Undefined,
        },
    }
}

/// Evaluate scored examples per attribute, sliced overall, by language, and
/// by subgroup, with a worst-group block when subgroups are present.
pub fn evaluate(
    examples: &[LabeledExample],
    attributes: &[String],
) -> Result<EvalReport, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let attrs: Vec<String> = if attributes.is_empty() {
        let mut a: Vec<String> =
            examples.iter().flat_map(|e| e.labels.keys().cloned()).collect();
        a.sort();
        a.dedup();
        a
    } else {
        attributes.to_vec()
    };

    let mut out = BTreeMap::new();
    for attr in &attrs {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut langs: Vec<Option<String>> = Vec::new();
        let mut groups: Vec<Vec<String>> = Vec::new();
        for ex in examples {
            let (Some(&label), Some(score)) = (ex.labels.get(attr), ex.score_for(attr)) else {
                continue;
            };
            if label != 0.0 && label != 1.0 {
                return Err(MetricsError::NonBinaryLabel(label));
            }
            scores.push(score);
            labels.push(label == 1.0);
            langs.push(ex.lang.clone());
            groups.push(ex.subgroups.clone());
        }
        if scores.is_empty() {
            continue;
        }

        let mut slices = BTreeMap::new();
        slices.insert("overall".to_string(), slice_metrics(&scores, &labels));

        let mut lang_tags: Vec<String> = langs.iter().flatten().cloned().collect();
        lang_tags.sort();
        lang_tags.dedup();
        for lang in &lang_tags {
            let idx: Vec<usize> =
                (0..scores.len()).filter(|&i| langs[i].as_deref() == Some(lang)).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            slices.insert(format!("lang:{lang}"), slice_metrics(&s, &l));
        }

        let mut group_tags: Vec<String> = groups.iter().flatten().cloned().collect();
        group_tags.sort();
        group_tags.dedup();
        for tag in &group_tags {
            let idx: Vec<usize> =
                (0..scores.len()).filter(|&i| groups[i].iter().any(|t| t == tag)).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            slices.insert(format!("subgroup:{tag}"), slice_metrics(&s, &l));
        }

        let wg = if group_tags.is_empty() {
            None
        } else {
            worst_group(&scores, &labels, &groups, &group_tags, DEFAULT_THRESHOLD).ok()
        };
        out.insert(attr.clone(), AttributeReport { slices, worst_group: wg });
    }
    Ok(EvalReport { attributes: out, examples: examples.len() })
}

/// Per-subgroup (and per subgroup-language) bias triplets for one attribute.
#[derive(Debug, Clone, Serialize)]
pub struct BiasReportRow {
    pub subgroup: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    pub count: usize,
    #[serde(flatten)]
    pub triplet: BiasTriplet,
}

pub fn bias_report(
    examples: &[LabeledExample],
    attribute: &str,
) -> Result<Vec<BiasReportRow>, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut langs: Vec<Option<String>> = Vec::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for ex in examples {
        let (Some(&label), Some(score)) = (ex.labels.get(attribute), ex.score_for(attribute))
        else {
            continue;
        };
        if label != 0.0 && label != 1.0 {
            return Err(MetricsError::NonBinaryLabel(label));
        }
        scores.push(score);
        labels.push(label == 1.0);
        langs.push(ex.lang.clone());
        groups.push(ex.subgroups.clone());
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }

    let mut tags: Vec<String> = groups.iter().flatten().cloned().collect();
    tags.sort();
    tags.dedup();
    let mut lang_tags: Vec<String> = langs.iter().flatten().cloned().collect();
    lang_tags.sort();
    lang_tags.dedup();

    let mut rows = Vec::new();
    for tag in &tags {
        let in_sub: Vec<bool> =
            groups.iter().map(|g| g.iter().any(|t| t == tag)).collect();
        let count = in_sub.iter().filter(|&&b| b).count();
        rows.push(BiasReportRow {
            subgroup: tag.clone(),
            lang: None,
            count,
            triplet: bias_triplet(&scores, &labels, &in_sub)?,
        });
        for lang in &lang_tags {
            let keep: Vec<usize> =
                (0..scores.len()).filter(|&i| langs[i].as_deref() == Some(lang)).collect();
            if keep.is_empty() {
                continue;
            }
            let s: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = keep.iter().map(|&i| labels[i]).collect();
            let m: Vec<bool> = keep.iter().map(|&i| in_sub[i]).collect();
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            rows.push(BiasReportRow {
                subgroup: tag.clone(),
                lang: Some(lang.clone()),
                count,
                triplet: bias_triplet(&s, &l, &m)?,
            });
        }
    }
    Ok(rows)
}

/// Plot-ready CSV: one row per attribute-slice-metric.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("attribute,slice,metric,value,count\n");
    for (attr, ar) in &report.attributes {
        for (slice, m) in &ar.slices {
            for (name, value) in [
                ("auc_roc", m.auc_roc),
                ("accuracy", m.accuracy),
                ("macro_f1", m.macro_f1),
            ] {
                out.push_str(&format!("{attr},{slice},{name},{value},{}\n", m.count));
            }
        }
        if let Some(wg) = &ar.worst_group {
            out.push_str(&format!("{attr},overall,avg_acc,{:.6},{}\n", wg.avg_acc, report.examples));
            out.push_str(&format!("{attr},overall,worst_acc,{:.6},{}\n", wg.worst_acc, report.examples));
            out.push_str(&format!("{attr},overall,gap,{:.6},{}\n", wg.gap, report.examples));
        }
    }
    out
}

/// CSV for bias rows: subgroup,lang,metric,value,count.
pub fn bias_rows_to_csv(rows: &[BiasReportRow]) -> String {
    let mut out = String::from("subgroup,lang,metric,value,count\n");
    for row in rows {
        let lang = row.lang.as_deref().unwrap_or("all");
        for (name, value) in [
            ("subgroup_auc", row.triplet.subgroup_auc),
            ("bpsn_auc", row.triplet.bpsn_auc),
            ("bnsp_auc", row.triplet.bnsp_auc),
        ] {
            out.push_str(&format!("{},{lang},{name},{value},{}\n", row.subgroup, row.count));
        }
    }
    out
}
