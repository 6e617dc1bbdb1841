//! Distances, ranks, and retrieval quality over an embedded corpus.
//!
//! Ranks count from zero: `rank_of` is the number of corpus items strictly
//! closer to the query than the compared item, so tied items share the
//! better rank. Normalized ranks divide by corpus size, giving values in
//! [0,1) under the evaluation protocols used here (the compared item is a
//! corpus member or stands in for one).

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: index carries {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("embedding count {len} is not a multiple of dimension {dim}")]
    RaggedEmbeddings { len: usize, dim: usize },
    #[error("operation requires corpus labels")]
    MissingLabels,
}

/// Distance function over embedding space. Models never normalize their
/// outputs; the metric owns all normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    /// Pointwise distance. Cosine distance is `1 - a.b/(|a||b|)`, range
    /// [0,2]; it errors on a zero vector rather than guessing.
    pub fn distance(&self, a: &[f32], b: &[f32]) -> Result<f32, MetricsError> {
        assert_eq!(a.len(), b.len(), "distance: lengths {} vs {}", a.len(), b.len());
        match self {
            Metric::Euclidean => {
                let s: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let d = x as f64 - y as f64;
                        d * d
                    })
                    .sum();
                Ok(s.sqrt() as f32)
            }
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in a.iter().zip(b) {
                    dot += x as f64 * y as f64;
                    na += x as f64 * x as f64;
                    nb += y as f64 * y as f64;
                }
                if na == 0.0 || nb == 0.0 {
                    return Err(MetricsError::ZeroVector);
                }
                Ok((1.0 - dot / (na.sqrt() * nb.sqrt())) as f32)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" | "e" => Ok(Metric::Euclidean),
            "cosine" | "c" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric '{other}' (euclidean|cosine)")),
        }
    }
}

// ── Tape-side distance graphs ───────────────────────────────────────────

/// Distance between paired rows of two `[m,n]` tensors, as a `[m]` tape
/// expression. Either operand may be tracked.
pub fn paired_row_distances(metric: Metric, a: &Tensor, b: &Tensor) -> Tensor {
    match metric {
        Metric::Euclidean => a.sub(b).l2_norm_rows(),
        Metric::Cosine => {
            let dots = a.dot_rows(b);
            let denom = a.l2_norm_rows().mul(&b.l2_norm_rows());
            dots.div(&denom).scale(-1.0).offset(1.0)
        }
    }
}

/// Distances from one embedding `e` (`[1,n]`) to every row of `rows`
/// (`[k,n]`), as a `[k]` tape expression.
pub fn distances_to_rows(metric: Metric, e: &Tensor, rows: &Tensor) -> Tensor {
    let k = rows.shape()[0];
    match metric {
        Metric::Euclidean => rows.sub(e).l2_norm_rows(),
        Metric::Cosine => {
            let dots = rows.dot_rows(&e.broadcast_rows(k));
            let denom = rows.l2_norm_rows().mul(&e.l2_norm_rows());
            dots.div(&denom).scale(-1.0).offset(1.0)
        }
    }
}

// ── Corpus index ────────────────────────────────────────────────────────

/// Fixed corpus of embeddings, the reference set X for ranking.
pub struct RankingIndex {
    metric: Metric,
    dim: usize,
    emb: Vec<f32>,
    labels: Option<Vec<u8>>,
}

impl RankingIndex {
    pub fn from_embeddings(
        metric: Metric,
        emb: Vec<f32>,
        dim: usize,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, MetricsError> {
        if dim == 0 || emb.len() % dim != 0 {
            return Err(MetricsError::RaggedEmbeddings { len: emb.len(), dim });
        }
        let n = emb.len() / dim;
        if n == 0 {
            return Err(MetricsError::EmptyCorpus);
        }
        if let Some(l) = &labels {
            assert_eq!(l.len(), n, "labels: {} entries for {} embeddings", l.len(), n);
        }
        if metric == Metric::Cosine {
            for i in 0..n {
                if emb[i * dim..(i + 1) * dim].iter().all(|&v| v == 0.0) {
                    return Err(MetricsError::ZeroVector);
                }
            }
        }
        Ok(RankingIndex { metric, dim, emb, labels })
    }

    pub fn len(&self) -> usize {
        self.emb.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.emb.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.emb[i * self.dim..(i + 1) * self.dim]
    }

    /// All corpus embeddings as a constant `[n,dim]` tensor.
    pub fn embeddings_tensor(&self) -> Tensor {
        Tensor::from_vec(self.emb.clone(), vec![self.len(), self.dim])
    }

    /// Rows `ids` of the corpus as a constant `[k,dim]` tensor.
    pub fn embeddings_of(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.embedding(i));
        }
        Tensor::from_vec(data, vec![ids.len(), self.dim])
    }

    /// Distance from `q` to every corpus item.
    pub fn distances_from(&self, q: &[f32]) -> Result<Vec<f32>, MetricsError> {
        if q.len() != self.dim {
            return Err(MetricsError::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        (0..self.len()).map(|i| self.metric.distance(q, self.embedding(i))).collect()
    }

    /// Zero-based rank of an item at distance `d_item` from the query given
    /// the query's distances to the corpus: the count of strictly closer
    /// corpus items. `exclude` drops one corpus position (the item's own
    /// slot, or the query itself) from the comparison.
    pub fn rank_from_distances(dists: &[f32], d_item: f32, exclude: Option<usize>) -> usize {
        dists
            .iter()
            .enumerate()
            .filter(|&(i, &d)| Some(i) != exclude && d < d_item)
            .count()
    }

    /// Rank of embedding `c` w.r.t. query embedding `q` over this corpus.
    pub fn rank_of(
        &self,
        q: &[f32],
        c: &[f32],
        exclude: Option<usize>,
    ) -> Result<usize, MetricsError> {
        let d_item = self.metric.distance(q, c)?;
        let dists = self.distances_from(q)?;
        Ok(Self::rank_from_distances(&dists, d_item, exclude))
    }

    /// Indices of the `k` nearest corpus items to `q`, ascending by
    /// distance, ties broken by lower index. `exclude` positions are
    /// skipped.
    pub fn nearest(
        &self,
        q: &[f32],
        k: usize,
        exclude: &[usize],
    ) -> Result<Vec<usize>, MetricsError> {
        let dists = self.distances_from(q)?;
        let mut order: Vec<usize> = (0..self.len()).filter(|i| !exclude.contains(i)).collect();
        order.sort_by(|&a, &b| {
            dists[a].partial_cmp(&dists[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        order.truncate(k);
        Ok(order)
    }
}

/// Rank divided by corpus size.
pub fn normalized_rank(rank: usize, corpus_size: usize) -> f32 {
    assert!(corpus_size > 0, "normalized_rank: empty corpus");
    rank as f32 / corpus_size as f32
}

/// Fraction of corpus items whose nearest other item shares their label.
/// Ties resolve to the lowest index; the item itself is excluded.
pub fn recall_at_1(index: &RankingIndex) -> Result<f32, MetricsError> {
    let labels = index.labels().ok_or(MetricsError::MissingLabels)?;
    let n = index.len();
    if n < 2 {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut hits = 0usize;
    for i in 0..n {
        let dists = index.distances_from(index.embedding(i))?;
        let mut best: Option<(f32, usize)> = None;
        for (j, &d) in dists.iter().enumerate() {
            if j == i {
                continue;
            }
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let (_, j) = best.expect("n >= 2");
        if labels[i] == labels[j] {
            hits += 1;
        }
    }
    Ok(hits as f32 / n as f32)
}

/// Mean normalized ranks of an attack: one row per attacked target holding
/// its normalized ranks against each counterpart.
#[derive(Clone, Debug)]
pub struct RankReport {
    /// Mean normalized rank per attacked target.
    pub per_target: Vec<f32>,
    /// Mean over targets.
    pub mean: f32,
}

pub fn attack_performance(rows: &[Vec<f32>]) -> RankReport {
    assert!(!rows.is_empty(), "attack_performance: no targets");
    let per_target: Vec<f32> = rows
        .iter()
        .map(|r| {
            assert!(!r.is_empty(), "attack_performance: target with no counterparts");
            (r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64) as f32
        })
        .collect();
    let mean =
        (per_target.iter().map(|&v| v as f64).sum::<f64>() / per_target.len() as f64) as f32;
    RankReport { per_target, mean }
}
