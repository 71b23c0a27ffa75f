//! Retrieval metrics: Recall@1, averaged recall, forgetting and distance
//! histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Query,
    Gallery,
    Unified,
}

/// Row-major `n×dim` embeddings with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub labels: Vec<u32>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    pub fn new(dim: usize, embeddings: Vec<f64>, labels: Vec<u32>, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 || embeddings.len() != dim * labels.len() {
            return Err(Error::Eval(format!(
                "{} values cannot hold {} embeddings of width {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            embeddings,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy with every row scaled to unit L2 norm (zero rows left as is).
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.embeddings.chunks_mut(self.dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(set: &EmbeddingSet, i: usize, gallery: &EmbeddingSet, skip_self: bool) -> Option<usize> {
    let q = set.row(i);
    let mut best: Option<(f64, usize)> = None;
    for j in 0..gallery.len() {
        if skip_self && j == i {
            continue;
        }
        let d = sq_dist(q, gallery.row(j));
        // strict comparison keeps the lower index on ties
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Number of worker threads for evaluation: `OWCL_THREADS` if set, else 1.
pub fn eval_threads() -> usize {
    std::env::var("OWCL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn count_hits(set: &EmbeddingSet, queries: &[usize]) -> usize {
    queries
        .iter()
        .filter(|&&i| nearest(set, i, set, true).is_some_and(|j| set.labels[j] == set.labels[i]))
        .count()
}

/// Leave-one-out Recall@1 under L2: every sample queries all others and
/// scores a hit when its nearest neighbour shares its label. Ties go to
/// the lower index. Samples whose class has no other member are left out
/// of the denominator.
pub fn recall_at_1(set: &EmbeddingSet) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::Eval("recall needs at least two samples".into()));
    }
    let mut counts = std::collections::HashMap::new();
    for &l in &set.labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let queries: Vec<usize> = (0..set.len()).filter(|&i| counts[&set.labels[i]] > 1).collect();
    let skipped = set.len() - queries.len();
    if skipped > 0 {
        log::warn!("recall: {skipped} samples from singleton classes left out");
    }
    if queries.is_empty() {
        return Err(Error::Eval("no class has two or more samples".into()));
    }
    let threads = eval_threads().min(queries.len());
    let hits = if threads <= 1 {
        count_hits(set, &queries)
    } else {
        let chunk = queries.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|part| s.spawn(move || count_hits(set, part)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("recall worker")).sum()
        })
    };
    Ok(hits as f64 / queries.len() as f64)
}

/// Recall@1 of `queries` against a separate `gallery`.
pub fn recall_at_1_query_gallery(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<f64> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Eval("query and gallery must be nonempty".into()));
    }
    if queries.dim != gallery.dim {
        return Err(Error::Eval("query and gallery widths differ".into()));
    }
    let hits = (0..queries.len())
        .filter(|&i| nearest(queries, i, gallery, false).is_some_and(|j| gallery.labels[j] == queries.labels[i]))
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Digits after the decimal point in the shortest round-trip form of `x`.
fn decimal_places(x: f64) -> usize {
    let s = format!("{x}");
    s.split_once('.').map_or(0, |(_, frac)| frac.len())
}

/// `x · 10^places` as an integer, read from the shortest decimal form.
fn scaled(x: f64, places: usize) -> Option<i128> {
    let s = format!("{x}");
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let digits = format!("{int}{frac:0<places$}");
    digits.parse().ok()
}

/// `F_N = 1/(N_s−1) · Σ_{n≥2} max_{m<n} max(0, R_m − R_n)`.
///
/// Recalls are taken at their shortest decimal value and the sum is formed
/// in exact integer arithmetic, so `[0.5, 0.6, 0.4]` gives exactly `0.1`.
/// Inputs that need more than 30 decimal places fall back to `f64`.
pub fn forgetting(recalls: &[f64]) -> Result<f64> {
    if recalls.len() < 2 {
        return Err(Error::Eval("forgetting needs at least two stages".into()));
    }
    if recalls.iter().any(|r| !r.is_finite()) {
        return Err(Error::Eval("recalls must be finite".into()));
    }
    let places = recalls.iter().map(|&r| decimal_places(r)).max().unwrap_or(0);
    let exact: Option<Vec<i128>> = if places <= 30 {
        recalls.iter().map(|&r| scaled(r, places)).collect()
    } else {
        None
    };
    let n = (recalls.len() - 1) as f64;
    match exact {
        Some(v) => {
            let mut best = v[0];
            let mut total: i128 = 0;
            for &r in &v[1..] {
                total += (best - r).max(0);
                best = best.max(r);
            }
            Ok(total as f64 / (10f64.powi(places as i32) * n))
        }
        None => {
            let mut best = recalls[0];
            let mut total = 0.0;
            for &r in &recalls[1..] {
                total += (best - r).max(0.0);
                best = best.max(r);
            }
            Ok(total / n)
        }
    }
}

pub fn avg_recall(recalls: &[f64]) -> Result<f64> {
    if recalls.is_empty() {
        return Err(Error::Eval("average of an empty recall list".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub recalls: Vec<f64>,
    pub avg_recall: f64,
    pub forgetting: f64,
    pub num_stages: usize,
}

impl MetricsRecord {
    /// `F_N` is reported as 0 for a single stage.
    pub fn from_recalls(recalls: Vec<f64>) -> Result<Self> {
        let avg = avg_recall(&recalls)?;
        let f = if recalls.len() >= 2 { forgetting(&recalls)? } else { 0.0 };
        Ok(Self {
            num_stages: recalls.len(),
            avg_recall: avg,
            forgetting: f,
            recalls,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub bin_edges: Vec<f64>,
    pub intra_counts: Vec<usize>,
    pub inter_counts: Vec<usize>,
    pub mean_intra: f64,
    pub mean_inter: f64,
    pub gap: f64,
}

/// Splits all pairwise L2 distances into same-class and different-class
/// sets and bins both over a shared range.
pub fn distance_histogram(set: &EmbeddingSet, bins: usize) -> Result<HistogramReport> {
    if set.len() < 2 || bins == 0 {
        return Err(Error::Eval("histogram needs two samples and at least one bin".into()));
    }
    let first = set.labels[0];
    if set.labels.iter().all(|&l| l == first) {
        return Err(Error::Eval("histogram needs at least two classes".into()));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let d = sq_dist(set.row(i), set.row(j)).sqrt();
            if set.labels[i] == set.labels[j] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let max = intra.iter().chain(&inter).copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let bin_edges = (0..=bins).map(|k| k as f64 * width).collect();
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for &d in v {
            c[((d / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    let (mi, me) = (mean(&intra), mean(&inter));
    Ok(HistogramReport {
        bin_edges,
        intra_counts: count(&intra),
        inter_counts: count(&inter),
        mean_intra: mi,
        mean_inter: me,
        gap: me - mi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[&[f64]], labels: &[u32]) -> EmbeddingSet {
        let dim = points[0].len();
        EmbeddingSet::new(dim, points.concat(), labels.to_vec(), EmbeddingSource::Unified).unwrap()
    }

    #[test]
    fn separated_clusters_recall_one() {
        let s = set(&[&[0.0, 0.0], &[0.1, 0.0], &[10.0, 0.0], &[10.1, 0.0]], &[0, 0, 1, 1]);
        assert_eq!(recall_at_1(&s).unwrap(), 1.0);
    }

    #[test]
    fn singleton_class_excluded() {
        let s = set(&[&[0.0], &[2.0], &[1.0]], &[0, 0, 1]);
        assert_eq!(recall_at_1(&s).unwrap(), 0.0);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        // sample 0 is equidistant from 1 (other class) and 2 (same class)
        let s = set(&[&[0.0], &[-1.0], &[1.0], &[-1.0]], &[0, 1, 0, 1]);
        let r = recall_at_1(&s).unwrap();
        // 0 → 1 miss, 1 → 3 hit, 2 → 0 hit, 3 → 1 hit
        assert_eq!(r, 0.75);
    }

    #[test]
    fn forgetting_and_average_formulae() {
        assert_eq!(forgetting(&[0.5, 0.6, 0.4]).unwrap(), 0.1);
        assert!((forgetting(&[0.9358333333333333, 0.92, 0.9441666666666667]).unwrap() - 0.0079166666666666).abs() < 1e-12);
        assert_eq!(forgetting(&[0.8, 0.8]).unwrap(), 0.0);
        assert_eq!(forgetting(&[0.1, 0.2, 0.3]).unwrap(), 0.0);
        assert!(forgetting(&[0.5]).is_err());
        assert!((avg_recall(&[0.5, 0.6, 0.4]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(avg_recall(&[0.7]).unwrap(), 0.7);
        assert!(avg_recall(&[]).is_err());
    }

    #[test]
    fn histogram_geometry() {
        let s = set(&[&[0.0, 0.0], &[0.1, 0.0], &[10.0, 0.0], &[10.1, 0.0]], &[0, 0, 1, 1]);
        let h = distance_histogram(&s, 10).unwrap();
        assert!((h.gap - 10.0).abs() < 0.2);
        assert_eq!(h.intra_counts.iter().sum::<usize>(), 2);
        assert_eq!(h.inter_counts.iter().sum::<usize>(), 4);

        let same = set(&[&[1.0], &[1.0], &[1.0], &[1.0]], &[0, 0, 1, 1]);
        let h = distance_histogram(&same, 4).unwrap();
        assert_eq!((h.mean_intra, h.mean_inter, h.gap), (0.0, 0.0, 0.0));
        let one = set(&[&[1.0], &[2.0]], &[0, 0]);
        assert!(distance_histogram(&one, 4).is_err());
    }

    #[test]
    fn query_gallery_mode() {
        let q = set(&[&[0.0], &[10.0]], &[0, 1]);
        let g = set(&[&[0.5], &[9.0], &[20.0]], &[0, 1, 1]);
        assert_eq!(recall_at_1_query_gallery(&q, &g).unwrap(), 1.0);
    }
}
