//! Exhaustive cosine search and Recall@N.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::records::{GroundTruth, PlaceRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub similarity: f64,
}

/// Immutable database of unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<u64>,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorIndex {
    pub fn build(ids: Vec<u64>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} descriptors of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Best `k` entries by dot product, descending; equal scores rank by
    /// ascending id. `k` beyond the database size returns everything.
    pub fn search_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query has {} dims, index holds {}",
                query.len(),
                self.dim
            )));
        }
        let mut hits: Vec<Hit> = self
            .data
            .chunks(self.dim)
            .zip(&self.ids)
            .map(|(row, &id)| Hit {
                id,
                similarity: row.iter().zip(query).map(|(a, b)| a * b).sum(),
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
        hits.truncate(k);
        Ok(hits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub mode: String,
    pub ns: Vec<usize>,
    /// Percentages, one per N.
    pub recall: Vec<f64>,
    pub evaluated: usize,
    /// Queries with no possible true match.
    pub excluded: Vec<u64>,
}

impl RecallReport {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&x| x == n).map(|i| self.recall[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.recall.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,recall\n");
        for (n, r) in self.ns.iter().zip(&self.recall) {
            s.push_str(&format!("{n},{r:.4}\n"));
        }
        s
    }
}

/// Share of queries with a true match among their first N results.
/// `rankings` pairs each query id with its ranked database ids.
pub fn recall_at_n(
    rankings: &[(u64, Vec<u64>)],
    records: &[PlaceRecord],
    gt: &dyn GroundTruth,
    ns: &[usize],
) -> Result<RecallReport> {
    let by_id: HashMap<u64, &PlaceRecord> = records.iter().map(|r| (r.id, r)).collect();
    let db: Vec<&PlaceRecord> = records.iter().filter(|r| r.split == Split::Database).collect();
    let lookup = |id: u64| {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown record id {id}")))
    };
    let mut hits = vec![0usize; ns.len()];
    let mut evaluated = 0;
    let mut excluded = Vec::new();
    for (qid, ranked) in rankings {
        let q = lookup(*qid)?;
        if !db.iter().any(|d| gt.is_match(q, d)) {
            excluded.push(*qid);
            continue;
        }
        evaluated += 1;
        let first = ranked
            .iter()
            .map(|&id| lookup(id).map(|d| gt.is_match(q, d)))
            .collect::<Result<Vec<bool>>>()?
            .iter()
            .position(|&m| m);
        for (h, &n) in hits.iter_mut().zip(ns) {
            if first.is_some_and(|p| p < n) {
                *h += 1;
            }
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} queries have no true match and were excluded", excluded.len());
    }
    let recall = hits
        .iter()
        .map(|&h| {
            if evaluated == 0 {
                0.0
            } else {
                100.0 * h as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(RecallReport {
        mode: gt.name().to_string(),
        ns: ns.to_vec(),
        recall,
        evaluated,
        excluded,
    })
}

/// Search every query and score the rankings.
pub fn evaluate(
    index: &DescriptorIndex,
    queries: &[(u64, Vec<f64>)],
    records: &[PlaceRecord],
    gt: &dyn GroundTruth,
    ns: &[usize],
) -> Result<RecallReport> {
    let k = ns.iter().copied().max().unwrap_or(1);
    let rankings = queries
        .iter()
        .map(|(id, q)| Ok((*id, index.search_topk(q, k)?.into_iter().map(|h| h.id).collect())))
        .collect::<Result<Vec<_>>>()?;
    recall_at_n(&rankings, records, gt, ns)
}
