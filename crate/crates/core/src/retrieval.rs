//! Ranking, Recall@K and ensembling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math;

/// Candidates of one gallery ranked by descending probability.
///
/// Candidates are identified by their gallery position; galleries are kept
/// sorted by id, so ties (broken by ascending position) fall back to
/// ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    /// Gallery positions, best first.
    pub order: Vec<usize>,
    /// Probability per gallery position (not reordered).
    pub probabilities: Vec<f64>,
    /// Log-probability per gallery position.
    pub log_probabilities: Vec<f64>,
}

impl RankedList {
    /// Ranks by `log_p`, normalizing it first.
    pub fn from_log_scores(mut log_p: Vec<f64>) -> Self {
        let z = math::logsumexp(&log_p);
        if z.is_finite() {
            log_p.iter_mut().for_each(|v| *v -= z);
        }
        let probabilities: Vec<f64> = log_p.iter().map(|&v| math::exp(v)).collect();
        let mut order: Vec<usize> = (0..log_p.len()).collect();
        order.sort_by(|&a, &b| {
            log_p[b]
                .partial_cmp(&log_p[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        Self {
            order,
            probabilities,
            log_probabilities: log_p,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// 1-based rank of gallery position `pos`.
    pub fn rank_of(&self, pos: usize) -> Option<usize> {
        self.order.iter().position(|&p| p == pos).map(|r| r + 1)
    }
}

/// Log-softmax over one score vector; `+inf` scores absorb all mass.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        let k = scores.iter().filter(|&&s| s == f64::INFINITY).count() as f64;
        return scores
            .iter()
            .map(|&s| if s == f64::INFINITY { -math::ln(k) } else { f64::NEG_INFINITY })
            .collect();
    }
    let z = math::logsumexp(scores);
    if !z.is_finite() {
        let k = scores.len() as f64;
        return alloc::vec![-math::ln(k); scores.len()];
    }
    scores.iter().map(|&s| s - z).collect()
}

/// `p ∝ softmax(s_r) ⊙ softmax(s_c)`, computed in the log domain.
pub fn combined_probability(s_r: &[f64], s_c: &[f64]) -> Result<RankedList> {
    if s_r.len() != s_c.len() || s_r.is_empty() {
        return Err(contract("score vectors must cover the same non-empty gallery"));
    }
    let (lr, lc) = (log_softmax(s_r), log_softmax(s_c));
    Ok(RankedList::from_log_scores(
        lr.iter().zip(&lc).map(|(a, b)| a + b).collect(),
    ))
}

/// Ranking by a single pathway's softmax.
pub fn single_probability(scores: &[f64]) -> Result<RankedList> {
    if scores.is_empty() {
        return Err(contract("empty gallery"));
    }
    Ok(RankedList::from_log_scores(log_softmax(scores)))
}

/// Geometric pooling: `p ∝ Π_m p_m`, renormalized.
pub fn ensemble_combine(per_model: &[Vec<f64>]) -> Result<RankedList> {
    let first = per_model
        .first()
        .ok_or_else(|| contract("ensemble needs at least one model"))?;
    if first.is_empty() || per_model.iter().any(|p| p.len() != first.len()) {
        return Err(contract("ensemble members must share one gallery"));
    }
    let mut log_p = alloc::vec![0.0; first.len()];
    for p in per_model {
        for (acc, &v) in log_p.iter_mut().zip(p) {
            *acc += math::ln(v);
        }
    }
    Ok(RankedList::from_log_scores(log_p))
}

/// Ensemble over per-model log-probabilities (avoids underflow).
pub fn ensemble_combine_log(per_model: &[Vec<f64>]) -> Result<RankedList> {
    let first = per_model
        .first()
        .ok_or_else(|| contract("ensemble needs at least one model"))?;
    if first.is_empty() || per_model.iter().any(|p| p.len() != first.len()) {
        return Err(contract("ensemble members must share one gallery"));
    }
    let mut log_p = alloc::vec![0.0; first.len()];
    for p in per_model {
        for (acc, &v) in log_p.iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok(RankedList::from_log_scores(log_p))
}

/// Fraction of queries whose ground truth is within the top `k`.
pub fn recall_at_k(ranked: &[RankedList], truths: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != truths.len() {
        return Err(contract("one ground truth per query"));
    }
    if ranked.is_empty() {
        return Err(contract("recall over zero queries"));
    }
    let mut hits = 0usize;
    for (list, &t) in ranked.iter().zip(truths) {
        let rank = list
            .rank_of(t)
            .ok_or_else(|| contract("ground truth absent from gallery"))?;
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Rank of one query's ground truth, tagged with its category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryOutcome {
    pub category: String,
    /// 1-based.
    pub truth_rank: usize,
}

/// Per-category Recall@K and their overall mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Category -> recall per entry of `ks`. Categories without queries are absent.
    pub per_category: BTreeMap<String, Vec<f64>>,
    /// Mean over every per-category, per-K value.
    pub overall: f64,
}

impl RecallReport {
    pub fn from_outcomes(outcomes: &[QueryOutcome], ks: &[usize]) -> Result<Self> {
        if ks.is_empty() {
            return Err(contract("empty K list"));
        }
        let mut grouped: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for o in outcomes {
            grouped.entry(o.category.clone()).or_default().push(o.truth_rank);
        }
        let per_category: BTreeMap<String, Vec<f64>> = grouped
            .into_iter()
            .map(|(cat, ranks)| {
                let n = ranks.len() as f64;
                let r = ks
                    .iter()
                    .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
                    .collect();
                (cat, r)
            })
            .collect();
        let values: Vec<f64> = per_category.values().flatten().copied().collect();
        let overall = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Ok(Self {
            ks: ks.to_vec(),
            per_category,
            overall,
        })
    }

    pub fn get(&self, category: &str, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        self.per_category.get(category).map(|v| v[i])
    }

    /// `category.rK = value` lines followed by `overall.avg`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (cat, vals) in &self.per_category {
            for (k, v) in self.ks.iter().zip(vals) {
                out.push_str(&format!("{cat}.r{k} = {v}\n"));
            }
        }
        out.push_str(&format!("overall.avg = {}\n", self.overall));
        out
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::from("category");
        for k in &self.ks {
            out.push_str(&format!("\tR@{k}"));
        }
        out.push('\n');
        for (cat, vals) in &self.per_category {
            out.push_str(cat);
            for v in vals {
                out.push_str(&format!("\t{v:.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("overall average\t{:.4}\n", self.overall));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn product_rule_example() {
        let lr: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|v| math::ln(*v)).collect();
        let lc: Vec<f64> = [0.2f64, 0.3, 0.5].iter().map(|v| math::ln(*v)).collect();
        let r = combined_probability(&lr, &lc).unwrap();
        let expect = [12.0 / 26.0, 9.0 / 26.0, 5.0 / 26.0];
        for (p, e) in r.probabilities.iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
        assert_eq!(r.order, vec![0, 1, 2]);
    }

    #[test]
    fn uniform_composition_defers_to_correction() {
        let r = combined_probability(&[1.0; 4], &[0.3, -2.0, 5.0, 0.9]).unwrap();
        assert_eq!(r.order, vec![2, 3, 0, 1]);
        assert!(combined_probability(&[1.0; 3], &[1.0; 4]).is_err());
    }

    #[test]
    fn ties_break_by_position() {
        let r = single_probability(&[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0, 3]);
    }

    #[test]
    fn recall_examples() {
        // Ground truth at ranks 1, 11, 2 of a 20-item gallery.
        let mk = |truth_rank: usize| {
            let scores: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
            (single_probability(&scores).unwrap(), truth_rank - 1)
        };
        let (lists, truths): (Vec<_>, Vec<_>) = [1, 11, 2].into_iter().map(mk).unzip();
        assert!((recall_at_k(&lists, &truths, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&lists, &truths, 20).unwrap(), 1.0);
        assert!(recall_at_k(&lists, &[0, 0, 99], 10).is_err());
    }

    #[test]
    fn infinite_scores() {
        let mut s = vec![0.0; 100];
        s[37] = f64::INFINITY;
        assert_eq!(single_probability(&s).unwrap().rank_of(37), Some(1));
        let mut s = vec![0.0; 100];
        s[37] = f64::NEG_INFINITY;
        assert_eq!(single_probability(&s).unwrap().rank_of(37), Some(100));
    }

    #[test]
    fn ensemble_identity() {
        let p = vec![0.5, 0.2, 0.3];
        let r = ensemble_combine(&[p.clone()]).unwrap();
        for (a, b) in r.probabilities.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(r.order, vec![0, 2, 1]);
        assert!(ensemble_combine(&[p, vec![1.0]]).is_err());
    }

    #[test]
    fn report_overall_and_absent_categories() {
        let outcomes = vec![
            QueryOutcome { category: "dress".into(), truth_rank: 3 },
            QueryOutcome { category: "dress".into(), truth_rank: 30 },
            QueryOutcome { category: "shirt".into(), truth_rank: 60 },
        ];
        let r = RecallReport::from_outcomes(&outcomes, &[10, 50]).unwrap();
        assert_eq!(r.get("dress", 10), Some(0.5));
        assert_eq!(r.get("dress", 50), Some(1.0));
        assert_eq!(r.get("shirt", 50), Some(0.0));
        assert_eq!(r.get("toptee", 10), None);
        assert!((r.overall - 1.5 / 4.0).abs() < 1e-15);
        let kv = r.to_key_values();
        assert!(kv.contains("dress.r10 = 0.5\n"));
        assert!(kv.ends_with("overall.avg = 0.375\n"));
    }
}
