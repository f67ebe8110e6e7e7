//! Prototype-to-real retrieval: rankings, precision-recall AUC, average
//! images and class-by-prototype distance matrices.

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::oneshot::squared_distance;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryItem {
    pub id: usize,
    pub label: usize,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedItem {
    pub id: usize,
    pub distance: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    pub query_label: usize,
    pub items: Vec<RankedItem>,
}

impl RankedRetrieval {
    pub fn positives(&self) -> usize {
        self.items.iter().filter(|i| i.label == self.query_label).count()
    }
}

/// Whole gallery sorted by Euclidean distance to `query`, ties by item id.
pub fn retrieve(query_label: usize, query: &[f32], gallery: &[GalleryItem]) -> Result<RankedRetrieval> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if let Some(g) = gallery.iter().find(|g| g.embedding.len() != query.len()) {
        return Err(Error::shape(
            "retrieve",
            format!("item {} has {} dims, query {}", g.id, g.embedding.len(), query.len()),
        ));
    }
    let mut items: Vec<RankedItem> = gallery
        .iter()
        .map(|g| RankedItem {
            id: g.id,
            distance: squared_distance(query, &g.embedding).sqrt(),
            label: g.label,
        })
        .collect();
    items.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    Ok(RankedRetrieval { query_label, items })
}

/// Area under the precision-recall curve of a ranking.
///
/// The curve has one point per relevant item at the rank where it is
/// retrieved: recall `j/P` and the precision at that cutoff. It starts at
/// recall 0 with the first point's precision, and consecutive points are
/// joined by trapezoids. A perfect ranking scores exactly 1, and a single
/// positive at rank `n` scores `1/n`.
pub fn pr_auc(ranking: &RankedRetrieval) -> Result<f64> {
    let positives = ranking.positives();
    if positives == 0 {
        return Err(Error::InvalidArgument(format!(
            "class {} has no relevant items in the gallery",
            ranking.query_label
        )));
    }
    let mut hits = 0usize;
    let mut prev: Option<f64> = None;
    let mut area = 0.0;
    for (rank, item) in ranking.items.iter().enumerate() {
        if item.label != ranking.query_label {
            continue;
        }
        hits += 1;
        let precision = hits as f64 / (rank + 1) as f64;
        area += (prev.unwrap_or(precision) + precision) / 2.0;
        prev = Some(precision);
    }
    Ok(area / positives as f64)
}

/// Unweighted mean of per-query AUCs.
pub fn mean_pr_auc(rankings: &[RankedRetrieval]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("no rankings".into()));
    }
    let total = rankings.iter().map(pr_auc).sum::<Result<f64>>()?;
    Ok(total / rankings.len() as f64)
}

/// Per-pixel mean of the top `k` ranked images.
pub fn average_image(
    ranking: &RankedRetrieval,
    k: usize,
    mut image: impl FnMut(usize) -> Result<ImageTensor>,
) -> Result<ImageTensor> {
    if k == 0 || k > ranking.items.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} ranked items",
            ranking.items.len()
        )));
    }
    let mut acc: Option<(usize, usize, usize, Vec<f64>)> = None;
    for item in &ranking.items[..k] {
        let img = image(item.id)?;
        let dims = (img.channels(), img.height(), img.width());
        let (c, h, w, sum) = acc.get_or_insert_with(|| (dims.0, dims.1, dims.2, vec![0.0; img.data().len()]));
        if (*c, *h, *w) != dims {
            return Err(Error::shape("average_image", "ranked images differ in size"));
        }
        for (s, &v) in sum.iter_mut().zip(img.data()) {
            *s += f64::from(v);
        }
    }
    let (c, h, w, sum) = acc.expect("k > 0");
    let data = sum.iter().map(|s| (s / k as f64) as f32).collect();
    let mut out = ImageTensor::from_vec(c, h, w, data)?;
    out.clamp01();
    Ok(out)
}

/// Rows are real-image classes, columns prototype classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub normalized: bool,
}

impl DistanceMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let (sum, n) = self.pairs().filter(|p| p.0).fold((0.0, 0), |(s, n), p| (s + p.1, n + 1));
        sum / n.max(1) as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let (sum, n) = self.pairs().filter(|p| !p.0).fold((0.0, 0), |(s, n), p| (s + p.1, n + 1));
        sum / n.max(1) as f64
    }

    fn pairs(&self) -> impl Iterator<Item = (bool, f64)> + '_ {
        self.row_labels.iter().enumerate().flat_map(move |(i, &r)| {
            self.col_labels
                .iter()
                .enumerate()
                .map(move |(j, &c)| (r == c, self.values[i][j]))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for c in &self.col_labels {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (i, r) in self.row_labels.iter().enumerate() {
            s.push_str(&r.to_string());
            for v in &self.values[i] {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale heat map (dark is near), `cell` pixels per entry. When
    /// `categories` gives a category per row/column label position, a band
    /// of category colors is drawn along the top and left edges.
    pub fn render(&self, cell: usize, categories: Option<&[usize]>) -> ImageTensor {
        const PALETTE: [[f32; 3]; 6] = [
            [0.85, 0.1, 0.1],
            [0.1, 0.3, 0.85],
            [0.95, 0.8, 0.1],
            [0.1, 0.7, 0.2],
            [0.6, 0.2, 0.7],
            [0.9, 0.5, 0.1],
        ];
        let band = if categories.is_some() { cell.max(2) } else { 0 };
        let (rows, cols) = (self.row_labels.len(), self.col_labels.len());
        let mut img = ImageTensor::filled(3, band + rows * cell, band + cols * cell, &[1.0]);
        let (lo, hi) = self
            .values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..rows {
            for j in 0..cols {
                let v = ((self.values[i][j] - lo) / span) as f32;
                for y in 0..cell {
                    for x in 0..cell {
                        for ch in 0..3 {
                            img.set(ch, band + i * cell + y, band + j * cell + x, v);
                        }
                    }
                }
            }
        }
        if let Some(cats) = categories {
            let color = |k: usize| PALETTE[cats.get(k).copied().unwrap_or(0) % PALETTE.len()];
            for j in 0..cols {
                for y in 0..band {
                    for x in 0..cell {
                        for ch in 0..3 {
                            img.set(ch, y, band + j * cell + x, color(j)[ch]);
                        }
                    }
                }
            }
            for i in 0..rows {
                for y in 0..cell {
                    for x in 0..band {
                        for ch in 0..3 {
                            img.set(ch, band + i * cell + y, x, color(i)[ch]);
                        }
                    }
                }
            }
        }
        img
    }
}

/// Entry `(i, j)`: mean Euclidean distance from the real embeddings of row
/// class `i` to prototype `j`. With `normalize`, each column is divided by
/// its sum.
pub fn distance_heatmap(
    reals: &[(usize, Vec<Vec<f32>>)],
    prototypes: &[(usize, Vec<f32>)],
    normalize: bool,
) -> Result<DistanceMatrix> {
    if let Some((label, _)) = reals.iter().find(|(_, e)| e.is_empty()) {
        return Err(Error::InvalidArgument(format!("class {label} has no real embeddings")));
    }
    let mut values: Vec<Vec<f64>> = reals
        .iter()
        .map(|(_, embs)| {
            prototypes
                .iter()
                .map(|(_, p)| {
                    embs.iter().map(|e| squared_distance(e, p).sqrt()).sum::<f64>() / embs.len() as f64
                })
                .collect()
        })
        .collect();
    if normalize {
        for j in 0..prototypes.len() {
            let total: f64 = values.iter().map(|row| row[j]).sum();
            if total > 0.0 {
                values.iter_mut().for_each(|row| row[j] /= total);
            }
        }
    }
    Ok(DistanceMatrix {
        row_labels: reals.iter().map(|r| r.0).collect(),
        col_labels: prototypes.iter().map(|p| p.0).collect(),
        values,
        normalized: normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(labels: &[usize], query: usize) -> RankedRetrieval {
        RankedRetrieval {
            query_label: query,
            items: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| RankedItem {
                    id: i,
                    distance: i as f64,
                    label: l,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_ranking_is_one() {
        assert_eq!(pr_auc(&ranking(&[1, 1, 1, 0, 0], 1)).unwrap(), 1.0);
    }

    #[test]
    fn single_positive_last() {
        for n in 1..20 {
            let mut labels = vec![0; n];
            labels[n - 1] = 1;
            let auc = pr_auc(&ranking(&labels, 1)).unwrap();
            assert!((auc - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn no_positives_rejected() {
        assert!(pr_auc(&ranking(&[0, 0], 1)).is_err());
    }

    #[test]
    fn retrieve_finds_itself_and_is_order_independent() {
        let gallery: Vec<GalleryItem> = (0..6)
            .map(|i| GalleryItem {
                id: i,
                label: i % 2,
                embedding: vec![(i % 3) as f32, 1.0],
            })
            .collect();
        let r = retrieve(1, &[2.0, 1.0], &gallery).unwrap();
        assert_eq!(r.items[0].distance, 0.0);
        assert_eq!(r.items[0].id, 2);
        let mut reversed = gallery.clone();
        reversed.reverse();
        let r2 = retrieve(1, &[2.0, 1.0], &reversed).unwrap();
        let ids = |r: &RankedRetrieval| r.items.iter().map(|i| i.id).collect::<Vec<_>>();
        assert_eq!(ids(&r), ids(&r2));
        assert!(retrieve(0, &[0.0], &[]).is_err());
    }

    #[test]
    fn average_image_cases() {
        let imgs = [ImageTensor::filled(1, 2, 2, &[0.0]), ImageTensor::filled(1, 2, 2, &[1.0])];
        let r = ranking(&[0, 0], 0);
        let avg = average_image(&r, 2, |id| Ok(imgs[id].clone())).unwrap();
        assert!(avg.data().iter().all(|&v| v == 0.5));
        let same = average_image(&r, 2, |_| Ok(imgs[1].clone())).unwrap();
        assert_eq!(same, imgs[1]);
        assert!(average_image(&r, 3, |id| Ok(imgs[id].clone())).is_err());
    }

    #[test]
    fn heatmap_diagonal_and_normalization() {
        let protos = vec![(0, vec![0.0, 0.0]), (1, vec![3.0, 4.0]), (2, vec![1.0, 1.0])];
        let reals: Vec<(usize, Vec<Vec<f32>>)> = protos.iter().map(|(l, p)| (*l, vec![p.clone()])).collect();
        let m = distance_heatmap(&reals, &protos, false).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], 0.0);
        }
        assert_eq!(m.values[0][1], 5.0);
        let n = distance_heatmap(&reals, &protos, true).unwrap();
        for j in 0..3 {
            let s: f64 = n.values.iter().map(|r| r[j]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(m.diagonal_mean() < m.off_diagonal_mean());
        let img = m.render(4, Some(&[0, 1, 1]));
        assert_eq!((img.height(), img.width()), (16, 16));
        assert!(img.in_unit_range());
    }
}
