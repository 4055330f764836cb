//! Full-ranking Recall@K / NDCG@K evaluation, overall and per popularity
//! group.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionDataset, PopularityGroups, Split};
use crate::error::{EgraError, Result};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Items ordered by descending score with `exclude` removed; ties go to the
/// lower item id. `exclude` must be sorted.
pub fn rank_items(scores: ArrayView1<'_, f64>, exclude: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// The first `k` entries of [`rank_items`] without sorting the whole list.
pub fn top_k_items(scores: ArrayView1<'_, f64>, exclude: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < items.len() {
        if k == 0 {
            return Vec::new();
        }
        items.select_nth_unstable_by(k - 1, order);
        items.truncate(k);
    }
    items.sort_by(order);
    items
}

/// `|top-K ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Users with at least one relevant item.
    pub num_users: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }

    /// `key = value` lines, prefixed with `prefix.` when nonempty.
    pub fn to_kv(&self, prefix: &str) -> String {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "{p}meta.{k} = {v:?}");
        }
        let _ = writeln!(out, "{p}users = {}", self.num_users);
        for (k, v) in &self.recall {
            let _ = writeln!(out, "{p}recall@{k} = {v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "{p}ndcg@{k} = {v:.6}");
        }
        out
    }
}

/// Per-user relevant item lists of a set of interactions.
pub fn relevance_lists(num_users: usize, interactions: &[Interaction]) -> Vec<Vec<usize>> {
    let mut rel = vec![Vec::new(); num_users];
    for x in interactions {
        rel[x.user].push(x.item);
    }
    for r in &mut rel {
        r.sort_unstable();
        r.dedup();
    }
    rel
}

/// Mean metrics over users with at least one relevant item. `embeddings`
/// holds users in rows `[0, |U|)` and items after them; train items are
/// excluded from each user's ranking.
pub fn evaluate_relevance(
    embeddings: ArrayView2<'_, f64>,
    ds: &InteractionDataset,
    relevant: &[Vec<usize>],
    ks: &[usize],
) -> Result<EvalReport> {
    if embeddings.nrows() != ds.num_users + ds.num_items {
        return Err(EgraError::Shape(format!(
            "embedding table has {} rows, expected {}",
            embeddings.nrows(),
            ds.num_users + ds.num_items
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let (users, items) = embeddings.split_at(Axis(0), ds.num_users);
    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..ds.num_users)
        .into_par_iter()
        .map(|u| {
            let rel = &relevant[u];
            if rel.is_empty() {
                return None;
            }
            let scores = items.dot(&users.row(u));
            let top = top_k_items(scores.view(), ds.train_items(u), max_k);
            Some((
                ks.iter().map(|&k| recall_at_k(&top, rel, k).unwrap()).collect(),
                ks.iter().map(|&k| ndcg_at_k(&top, rel, k).unwrap()).collect(),
            ))
        })
        .collect();

    let mut report = EvalReport::default();
    let mut sums_r = vec![0.0; ks.len()];
    let mut sums_n = vec![0.0; ks.len()];
    for (r, n) in per_user.into_iter().flatten() {
        report.num_users += 1;
        for k in 0..ks.len() {
            sums_r[k] += r[k];
            sums_n[k] += n[k];
        }
    }
    let denom = report.num_users.max(1) as f64;
    for (idx, &k) in ks.iter().enumerate() {
        report.recall.insert(k, sums_r[idx] / denom);
        report.ndcg.insert(k, sums_n[idx] / denom);
    }
    Ok(report)
}

pub fn evaluate(
    embeddings: ArrayView2<'_, f64>,
    ds: &InteractionDataset,
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    let relevant = relevance_lists(ds.num_users, ds.split(split));
    evaluate_relevance(embeddings, ds, &relevant, ks)
}

/// One report per popularity group (head first); `None` for groups without
/// test interactions. Rankings are always over all items.
pub fn longtail_evaluate(
    embeddings: ArrayView2<'_, f64>,
    ds: &InteractionDataset,
    groups: &PopularityGroups,
    ks: &[usize],
) -> Result<Vec<Option<EvalReport>>> {
    groups
        .group_test_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Ok(None);
            }
            let relevant = relevance_lists(ds.num_users, set);
            evaluate_relevance(embeddings, ds, &relevant, ks).map(Some)
        })
        .collect()
}

/// Tab-separated table with one row per named report.
pub fn report_table(rows: &[(String, EvalReport)], ks: &[usize]) -> String {
    let mut out = String::from("variant");
    for k in ks {
        let _ = write!(out, "\tR@{k}");
    }
    for k in ks {
        let _ = write!(out, "\tN@{k}");
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(name);
        for &k in ks {
            let _ = write!(out, "\t{:.4}", r.recall_at(k));
        }
        for &k in ks {
            let _ = write!(out, "\t{:.4}", r.ndcg_at(k));
        }
        out.push('\n');
    }
    out
}
