//! Held-out retrieval, clustering and false-negative metrics.

use serde::{Deserialize, Serialize};

use crate::category_cl::sinkhorn_assign;
use crate::error::{invalid, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::Dataset;
use crate::harness::model::Model;
use crate::numerics::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub recall_i2t_at_1: f64,
    pub recall_i2t_at_5: f64,
    pub recall_t2i_at_1: f64,
    pub recall_t2i_at_5: f64,
    /// Mean of the two directions.
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub cluster_purity: f64,
    pub nmi: f64,
    pub false_negative_gap: f64,
}

impl EvalMetrics {
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("recall_i2t_at_1", self.recall_i2t_at_1),
            ("recall_i2t_at_5", self.recall_i2t_at_5),
            ("recall_t2i_at_1", self.recall_t2i_at_1),
            ("recall_t2i_at_5", self.recall_t2i_at_5),
            ("recall_at_1", self.recall_at_1),
            ("recall_at_5", self.recall_at_5),
            ("cluster_purity", self.cluster_purity),
            ("nmi", self.nmi),
            ("false_negative_gap", self.false_negative_gap),
        ]
    }
}

/// Fraction of rows whose paired column (`i`) ranks within the top `k`.
/// A candidate outranks the true pair when its score is larger, or equal
/// with a smaller index.
pub fn recall_at_k(scores: &Mat, k: usize) -> f64 {
    let n = scores.nrows();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let s = scores[[i, i]];
            let better = (0..scores.ncols()).filter(|&j| scores[[i, j]] > s || (scores[[i, j]] == s && j < i)).count();
            better < k
        })
        .count();
    hits as f64 / n as f64
}

/// Image→text and text→image recall@1/@5 from `v*`/`t*` rows.
pub fn retrieval(v: &Mat, t: &Mat) -> (f64, f64, f64, f64) {
    let s = v.dot(&t.t());
    let st = s.t().to_owned();
    (recall_at_k(&s, 1), recall_at_k(&s, 5), recall_at_k(&st, 1), recall_at_k(&st, 5))
}

fn contingency(labels: &[usize], clusters: &[usize]) -> Vec<Vec<usize>> {
    let nl = labels.iter().max().map_or(0, |m| m + 1);
    let nc = clusters.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; nl]; nc];
    for (&l, &c) in labels.iter().zip(clusters) {
        table[c][l] += 1;
    }
    table
}

/// Share of samples that carry their cluster's majority label.
pub fn purity(labels: &[usize], clusters: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let table = contingency(labels, clusters);
    table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum::<usize>() as f64 / labels.len() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information over the arithmetic mean of the two entropies; 1 when
/// both partitions are a single block.
pub fn nmi(labels: &[usize], clusters: &[usize]) -> f64 {
    let n = labels.len() as f64;
    if labels.is_empty() {
        return 0.0;
    }
    let table = contingency(labels, clusters);
    let nl = table.first().map_or(0, |r| r.len());
    let col = |l: usize| table.iter().map(|r| r[l]).sum::<usize>();
    let h_c = entropy(table.iter().map(|r| r.iter().sum()), n);
    let h_l = entropy((0..nl).map(col), n);
    if h_c + h_l == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for row in &table {
        let rc: usize = row.iter().sum();
        for (l, &c) in row.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p * n * n / (rc as f64 * col(l) as f64)).ln();
            }
        }
    }
    (2.0 * mi / (h_c + h_l)).max(0.0)
}

/// Mean `cos(v*_i, t*_j)` over same-class `i ≠ j` minus the mean over
/// different-class pairs. Rows are assumed unit-norm.
pub fn false_negative_gap(v: &Mat, t: &Mat, labels: &[usize]) -> f64 {
    let s = v.dot(&t.t());
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same += s[[i, j]];
                ns += 1;
            } else {
                diff += s[[i, j]];
                nd += 1;
            }
        }
    }
    if ns == 0 || nd == 0 {
        return 0.0;
    }
    same / ns as f64 - diff / nd as f64
}

/// Every metric over the samples `indices` of `data`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize], cfg: &TrainConfig) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(invalid("evaluation needs at least one sample"));
    }
    let images: Vec<_> = indices.iter().map(|&i| &data.samples[i].image).collect();
    let texts: Vec<_> = indices.iter().map(|&i| &data.samples[i].text).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].label).collect();
    let emb = model.embed(&images, &texts, cfg, 64)?;
    let (i1, i5, t1, t5) = retrieval(&emb.v_star, &emb.t_star);
    let codes = sinkhorn_assign(&emb.vkt, &model.prototypes(cfg.tau4), cfg.sinkhorn_eps, cfg.sinkhorn_eval_iters)?;
    let clusters = codes.argmax();
    Ok(EvalMetrics {
        recall_i2t_at_1: i1,
        recall_i2t_at_5: i5,
        recall_t2i_at_1: t1,
        recall_t2i_at_5: t5,
        recall_at_1: 0.5 * (i1 + t1),
        recall_at_5: 0.5 * (i5 + t5),
        cluster_purity: purity(&labels, &clusters),
        nmi: nmi(&labels, &clusters),
        false_negative_gap: false_negative_gap(&emb.v_star, &emb.t_star, &labels),
    })
}
