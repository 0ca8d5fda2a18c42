//! Label-matched top-k retrieval over paired embedding families with
//! per-query min-max normalization and unweighted score fusion.

use crate::state::ExpertLabel;

/// Two L2-normalized embedding vectors per case, one per encoder family.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// A retrieval-pool row: its label, embeddings, and expert labels.
#[derive(Debug, Clone)]
pub struct PoolRow {
    pub id: String,
    pub y: u8,
    pub emb: EmbeddingPair,
    pub expert_labels: Vec<ExpertLabel>,
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-query min-max normalization; a constant score vector maps to 0.5.
fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-15 {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&s| (s - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Sparse pseudo-labels: NA where no retained neighbor has the expert.
    pub labels: Vec<ExpertLabel>,
    /// Indices into the original pool, best first.
    pub neighbors: Vec<usize>,
    /// True when the label-matched pool was smaller than k.
    pub short_pool: bool,
}

/// Retrieves the top-k label-matched neighbors and assembles the query's
/// pseudo-labels. Each expert takes the label of the highest-ranked
/// neighbor that has one.
pub fn retrieve_pseudo_labels(
    query: &EmbeddingPair,
    y_query: u8,
    pool: &[PoolRow],
    n_experts: usize,
    k: usize,
) -> RetrievalResult {
    let matched: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].y == y_query).collect();
    let short_pool = matched.len() < k;
    let scores_a: Vec<f64> = matched.iter().map(|&i| dot(&query.a, &pool[i].emb.a)).collect();
    let scores_b: Vec<f64> = matched.iter().map(|&i| dot(&query.b, &pool[i].emb.b)).collect();
    let na = min_max(&scores_a);
    let nb = min_max(&scores_b);
    let fused: Vec<f64> = na.iter().zip(&nb).map(|(x, y)| 0.5 * (x + y)).collect();
    let mut order: Vec<usize> = (0..matched.len()).collect();
    order.sort_by(|&i, &j| {
        fused[j]
            .partial_cmp(&fused[i])
            .unwrap()
            .then(matched[i].cmp(&matched[j]))
    });
    order.truncate(k);
    let neighbors: Vec<usize> = order.iter().map(|&i| matched[i]).collect();
    let mut labels = vec![ExpertLabel::Na; n_experts];
    for &p in &neighbors {
        for (j, lab) in pool[p].expert_labels.iter().enumerate() {
            if matches!(labels[j], ExpertLabel::Na) && !matches!(lab, ExpertLabel::Na) {
                labels[j] = *lab;
            }
        }
    }
    RetrievalResult {
        labels,
        neighbors,
        short_pool,
    }
}
