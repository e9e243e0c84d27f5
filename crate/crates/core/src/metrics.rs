//! Evaluation statistics for ΔΔG predictions.
//!
//! Ties are handled with average ranks (Spearman, ranking ratio) and half
//! credit (AUROC). A mutation is a positive for AUROC when its measured
//! ΔΔG is above zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{csv_err, MutationRecord};
use crate::error::{contract, Error, Result};

/// Groups with fewer mutations are left out of per-structure correlations.
pub const MIN_GROUP_SIZE: usize = 10;

fn undefined(what: &str) -> Error {
    Error::Numeric(format!("{what} is undefined for this input"))
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(contract(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(contract(format!("need at least {min} values, got {}", x.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(undefined("correlation of a constant series"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `(rmse, mae)`.
pub fn rmse_mae(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_pair(pred, truth, 1)?;
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

/// Probability that a random positive scores above a random negative.
pub fn auroc_labels(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(contract("scores and labels differ in length"));
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(undefined("AUROC with a single class"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let np = np as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn as f64))
}

/// AUROC with positives defined as `truth > 0`.
pub fn auroc(scores: &[f64], truth: &[f64]) -> Result<f64> {
    let labels: Vec<bool> = truth.iter().map(|&t| t > 0.0).collect();
    auroc_labels(scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerStructure {
    pub mean_pearson: f64,
    pub mean_spearman: f64,
    pub groups: usize,
    /// Ids of the groups that entered the means, sorted.
    pub included: Vec<String>,
}

/// Unweighted mean of within-group correlations over groups holding at
/// least [`MIN_GROUP_SIZE`] points. Groups whose correlation is undefined
/// (constant values) are skipped.
pub fn per_structure(groups: &[&str], pred: &[f64], truth: &[f64]) -> Result<PerStructure> {
    check_pair(pred, truth, 0)?;
    if groups.len() != pred.len() {
        return Err(contract("group labels and predictions differ in length"));
    }
    let mut by: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((g, p), t) in groups.iter().zip(pred).zip(truth) {
        let e = by.entry(g).or_default();
        e.0.push(*p);
        e.1.push(*t);
    }
    let (mut ps, mut ss, mut included) = (Vec::new(), Vec::new(), Vec::new());
    for (name, (p, t)) in &by {
        if p.len() < MIN_GROUP_SIZE {
            continue;
        }
        match (pearson(p, t), spearman(p, t)) {
            (Ok(a), Ok(b)) => {
                ps.push(a);
                ss.push(b);
                included.push(name.to_string());
            }
            _ => log::warn!("group {name}: correlation undefined, skipped"),
        }
    }
    if ps.is_empty() {
        return Err(Error::Data(format!(
            "no complex has {MIN_GROUP_SIZE} or more mutations with defined correlations"
        )));
    }
    Ok(PerStructure {
        mean_pearson: mean(&ps),
        mean_spearman: mean(&ss),
        groups: ps.len(),
        included,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub rank: f64,
    pub ratio: f64,
}

/// Rank of each target when all candidates are sorted by ascending
/// predicted ΔΔG, and that rank divided by the number of candidates.
pub fn ranking_ratio(candidates: &[(String, f64)], targets: &[String]) -> Result<Vec<RankEntry>> {
    if candidates.is_empty() {
        return Err(contract("no candidates to rank"));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let ranks = average_ranks(&scores);
    let total = candidates.len() as f64;
    targets
        .iter()
        .map(|t| {
            let i = candidates
                .iter()
                .position(|c| &c.0 == t)
                .ok_or_else(|| Error::Data(format!("target mutation {t} is not among the candidates")))?;
            Ok(RankEntry {
                id: t.clone(),
                rank: ranks[i],
                ratio: ranks[i] / total,
            })
        })
        .collect()
}

/// Anything that knows how many point mutations it describes.
pub trait MutationCount {
    fn mutation_count(&self) -> usize;
}

impl MutationCount for MutationRecord {
    fn mutation_count(&self) -> usize {
        self.mutations.len()
    }
}

/// `(single-point, multi-point)`.
pub fn subset_split<T: MutationCount + Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    items.iter().cloned().partition(|r| r.mutation_count() == 1)
}

/// One predicted (and possibly measured) ΔΔG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub complex_id: String,
    pub mutations: String,
    pub ddg_pred: f64,
    pub ddg_true: Option<f64>,
}

impl MutationCount for Prediction {
    fn mutation_count(&self) -> usize {
        self.mutations.split(';').filter(|s| !s.is_empty()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Single,
    Multiple,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Single => "single",
            Subset::Multiple => "multiple",
        }
    }
}

/// Overall statistics; a field is `None` when undefined for the subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: Subset,
    pub count: usize,
    pub overall: Overall,
    pub per_structure: Option<PerStructure>,
}

/// Report for one subset of labelled predictions.
pub fn report(subset: Subset, preds: &[Prediction]) -> EvalReport {
    let labelled: Vec<&Prediction> = preds.iter().filter(|p| p.ddg_true.is_some()).collect();
    let p: Vec<f64> = labelled.iter().map(|r| r.ddg_pred).collect();
    let t: Vec<f64> = labelled.iter().map(|r| r.ddg_true.expect("filtered")).collect();
    let ids: Vec<&str> = labelled.iter().map(|r| r.complex_id.as_str()).collect();
    let (rmse, mae) = match rmse_mae(&p, &t) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    EvalReport {
        subset,
        count: labelled.len(),
        overall: Overall {
            pearson: pearson(&p, &t).ok(),
            spearman: spearman(&p, &t).ok(),
            rmse,
            mae,
            auroc: auroc(&p, &t).ok(),
        },
        per_structure: per_structure(&ids, &p, &t).ok(),
    }
}

/// Reports for all, single-point and multi-point subsets.
pub fn evaluate(preds: &[Prediction]) -> Result<Vec<EvalReport>> {
    if !preds.iter().any(|p| p.ddg_true.is_some()) {
        return Err(Error::Data("no labelled predictions to evaluate".into()));
    }
    let (single, multiple) = subset_split(preds);
    Ok(vec![
        report(Subset::All, preds),
        report(Subset::Single, &single),
        report(Subset::Multiple, &multiple),
    ])
}

/// `complex_id,mutations,ddg_pred[,ddg_true]`; the last column appears when
/// any prediction carries a label.
pub fn write_predictions(preds: &[Prediction]) -> Result<String> {
    let labelled = preds.iter().any(|p| p.ddg_true.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["complex_id", "mutations", "ddg_pred"];
    if labelled {
        header.push("ddg_true");
    }
    w.write_record(&header).map_err(csv_err)?;
    for p in preds {
        let mut row = vec![p.complex_id.clone(), p.mutations.clone(), p.ddg_pred.to_string()];
        if labelled {
            row.push(p.ddg_true.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse { line: i + 2, message: format!("bad number `{s}`") })
        };
        if row.len() < 3 {
            return Err(Error::Parse { line: i + 2, message: "expected at least 3 columns".into() });
        }
        out.push(Prediction {
            complex_id: row[0].to_string(),
            mutations: row[1].to_string(),
            ddg_pred: num(&row[2])?,
            ddg_true: match row.get(3) {
                Some(s) if !s.is_empty() => Some(num(s)?),
                _ => None,
            },
        });
    }
    Ok(out)
}

/// Predicted-versus-measured pairs tagged by subset, for plotting.
pub fn write_scatter(preds: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subset", "complex_id", "mutations", "ddg_pred", "ddg_true"]).map_err(csv_err)?;
    for p in preds {
        let Some(t) = p.ddg_true else { continue };
        let subset = if p.mutation_count() == 1 { Subset::Single } else { Subset::Multiple };
        w.write_record([subset.name(), &p.complex_id, &p.mutations, &p.ddg_pred.to_string(), &t.to_string()])
            .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5);
        assert!((pearson(&[1.0, 2.0, 4.0], &[2.0, 4.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert!((spearman(&[1.0, 1.0, 2.0], &[3.0, 3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn error_metrics() {
        assert_eq!(rmse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(rmse_mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), (1.0, 1.0));
        let (r, m) = rmse_mae(&[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15 && m == 3.5);
        assert!(rmse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc_labels(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc_labels(&[0.9, 0.1, 0.4], &[true, true, false]).unwrap(), 0.5);
        assert_eq!(auroc_labels(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auroc_labels(&[0.1, 0.2], &[true, true]).is_err());
        assert_eq!(auroc(&[2.0, -1.0], &[0.5, -0.5]).unwrap(), 1.0);
    }

    #[test]
    fn per_structure_filter() {
        let mut groups = vec!["a"; 9];
        let mut p: Vec<f64> = (0..9).map(f64::from).collect();
        let mut t = p.clone();
        assert!(per_structure(&groups, &p, &t).is_err());
        groups.extend(["b"; 10]);
        p.extend((0..10).map(f64::from));
        t.extend((0..10).map(|i| f64::from(i) * 2.0));
        let r = per_structure(&groups, &p, &t).unwrap();
        assert_eq!(r.groups, 1);
        assert_eq!(r.included, ["b"]);
        assert!((r.mean_pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_structure_averages() {
        let mut groups = vec!["a"; 10];
        groups.extend(["b"; 10]);
        let p: Vec<f64> = (0..20).map(|i| f64::from(i % 10)).collect();
        // group a perfectly linear, group b symmetric (zero correlation)
        let mut t: Vec<f64> = (0..10).map(f64::from).collect();
        t.extend([1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 0.0, 0.0]);
        let r = per_structure(&groups, &p, &t).unwrap();
        let b = pearson(&p[10..], &t[10..]).unwrap();
        assert!((r.mean_pearson - (1.0 + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranking() {
        let c: Vec<(String, f64)> = [("a", 0.3), ("b", -1.0), ("c", 2.0), ("d", 0.3), ("e", 5.0)]
            .iter()
            .map(|(i, v)| (i.to_string(), *v))
            .collect();
        let r = ranking_ratio(&c, &["b".into(), "a".into(), "e".into()]).unwrap();
        assert_eq!(r[0].rank, 1.0);
        assert_eq!(r[1].rank, 2.5);
        assert_eq!(r[2].ratio, 1.0);
        assert!(ranking_ratio(&c, &["zz".into()]).is_err());
    }

    #[test]
    fn subsets_and_csv() {
        let preds = vec![
            Prediction { complex_id: "x".into(), mutations: "TH31W".into(), ddg_pred: 0.1, ddg_true: Some(1.0) },
            Prediction { complex_id: "x".into(), mutations: "TH31W;AH53F".into(), ddg_pred: -0.25, ddg_true: Some(-2.0) },
            Prediction { complex_id: "y".into(), mutations: "AH53F".into(), ddg_pred: 1.0 / 3.0, ddg_true: Some(0.5) },
        ];
        let (s, m) = subset_split(&preds);
        assert_eq!((s.len(), m.len()), (2, 1));
        let text = write_predictions(&preds).unwrap();
        assert!(text.starts_with("complex_id,mutations,ddg_pred,ddg_true\n"));
        assert_eq!(read_predictions(&text).unwrap(), preds);
        let reports = evaluate(&preds).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[2].count, 1);
        assert!(reports[2].overall.pearson.is_none());
        let json = serde_json::to_string(&reports).unwrap();
        assert!(json.contains("\"subset\":\"single\""));
        assert_eq!(write_scatter(&preds).unwrap().lines().count(), 4);
    }

    proptest! {
        #[test]
        fn affine_invariance(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            let xa: Vec<f64> = x.iter().map(|u| a * u + b).collect();
            if let (Ok(p0), Ok(p1)) = (pearson(&x, &y), pearson(&xa, &y)) {
                prop_assert!((p0 - p1).abs() < 1e-12);
            }
            let xc: Vec<f64> = x.iter().map(|u| u.powi(3) + u).collect();
            if let (Ok(s0), Ok(s1)) = (spearman(&x, &y), spearman(&xc, &y)) {
                prop_assert!((s0 - s1).abs() < 1e-12);
            }
            let labels: Vec<bool> = y.iter().map(|&u| u > 0.0).collect();
            if let (Ok(a0), Ok(a1)) = (auroc_labels(&x, &labels), auroc_labels(&xc, &labels)) {
                prop_assert_eq!(a0, a1);
            }
        }

        #[test]
        fn rmse_dominates_mae(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)) {
            let p: Vec<f64> = v.iter().map(|q| q.0).collect();
            let t: Vec<f64> = v.iter().map(|q| q.1).collect();
            let (r, m) = rmse_mae(&p, &t).unwrap();
            prop_assert!(r + 1e-12 >= m && m >= 0.0);
        }
    }
}
