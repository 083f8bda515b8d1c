//! Exact per-class nearest-neighbor search, reference-set selection, and the
//! DkNN plurality vote.
//!
//! Negative-l2 queries rank by squared euclidean distance on the stored
//! features. Cosine queries rank by squared distance between unit-normalized
//! copies, which orders identically to descending cosine. Ties at the k-th
//! position always break toward the smaller original row id, so results are
//! set-identical to a brute-force scan.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    NegL2,
}

/// How a query walks the stored points. The flat scan is the always-available
/// oracle path; the ball tree returns identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchStrategy {
    #[default]
    BallTree,
    FlatScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    Knn,
    Random,
}

/// One query result: the original dataset row and its rank key (squared
/// distance in rank space; smaller is more similar).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: u32,
    pub key: f64,
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const LEAF_SIZE: usize = 32;
const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    center: Vec<f64>,
    radius: f64,
    lo: u32,
    hi: u32,
    left: u32,
    right: u32,
}

/// Exact nearest-neighbor tree over one class's rank-space points.
#[derive(Debug, Clone)]
struct BallTree {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl BallTree {
    fn build(points: &[f64], dim: usize) -> BallTree {
        let n = points.len() / dim;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut tree = BallTree {
            nodes: Vec::new(),
            order: Vec::new(),
        };
        tree.build_range(points, dim, &mut order, 0, n);
        tree.order = order;
        tree
    }

    fn build_range(
        &mut self,
        points: &[f64],
        dim: usize,
        order: &mut [u32],
        lo: usize,
        hi: usize,
    ) -> u32 {
        let slice = &order[lo..hi];
        let mut center = vec![0.0; dim];
        for &i in slice.iter() {
            let p = &points[i as usize * dim..(i as usize + 1) * dim];
            for (c, v) in center.iter_mut().zip(p) {
                *c += v;
            }
        }
        let count = (hi - lo) as f64;
        for c in &mut center {
            *c /= count;
        }
        let radius = slice
            .iter()
            .map(|&i| d2(&center, &points[i as usize * dim..(i as usize + 1) * dim]))
            .fold(0.0f64, f64::max)
            .sqrt();

        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            center,
            radius,
            lo: lo as u32,
            hi: hi as u32,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        if hi - lo > LEAF_SIZE {
            // split on the coordinate with the largest spread
            let mut best_dim = 0;
            let mut best_spread = -1.0;
            for d in 0..dim {
                let mut mn = f64::INFINITY;
                let mut mx = f64::NEG_INFINITY;
                for &i in order[lo..hi].iter() {
                    let v = points[i as usize * dim + d];
                    mn = mn.min(v);
                    mx = mx.max(v);
                }
                if mx - mn > best_spread {
                    best_spread = mx - mn;
                    best_dim = d;
                }
            }
            if best_spread > 0.0 {
                let mid = (hi - lo) / 2;
                order[lo..hi].select_nth_unstable_by(mid, |&a, &b| {
                    let va = points[a as usize * dim + best_dim];
                    let vb = points[b as usize * dim + best_dim];
                    va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
                });
                let left = self.build_range(points, dim, order, lo, lo + mid);
                let right = self.build_range(points, dim, order, lo + mid, hi);
                self.nodes[id as usize].left = left;
                self.nodes[id as usize].right = right;
            }
        }
        id
    }

    /// Exact k-nearest by (squared distance, id), smallest first.
    fn query(&self, points: &[f64], dim: usize, q: &[f64], k: usize) -> Vec<(f64, u32)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.visit(0, points, dim, q, k, &mut best);
        best
    }

    fn visit(&self, node: u32, points: &[f64], dim: usize, q: &[f64], k: usize, best: &mut Vec<(f64, u32)>) {
        let n = &self.nodes[node as usize];
        let center_dist = d2(q, &n.center).sqrt();
        if best.len() == k {
            let lb = (center_dist - n.radius).max(0.0);
            if lb * lb > best[k - 1].0 {
                return;
            }
        }
        if n.left == NO_CHILD {
            for &i in &self.order[n.lo as usize..n.hi as usize] {
                let key = d2(q, &points[i as usize * dim..(i as usize + 1) * dim]);
                let cand = (key, i);
                let pos = best.partition_point(|&(d, id)| (d, id) < cand);
                if pos < k {
                    best.insert(pos, cand);
                    if best.len() > k {
                        best.pop();
                    }
                }
            }
        } else {
            let (l, r) = (n.left, n.right);
            let dl = d2(q, &self.nodes[l as usize].center);
            let dr = d2(q, &self.nodes[r as usize].center);
            let (first, second) = if dl <= dr { (l, r) } else { (r, l) };
            self.visit(first, points, dim, q, k, best);
            self.visit(second, points, dim, q, k, best);
        }
    }
}

#[derive(Debug, Clone)]
struct ClassBlock {
    /// Original dataset row ids, in row order.
    rows: Vec<u32>,
    /// Raw layer-l features, row-major.
    feats: Vec<f64>,
    /// Rank-space points: `feats` for neg-l2, unit-normalized for cosine.
    ranked: Vec<f64>,
    tree: BallTree,
}

impl ClassBlock {
    fn feature(&self, local: usize, dim: usize) -> &[f64] {
        &self.feats[local * dim..(local + 1) * dim]
    }

    fn len(&self) -> usize {
        self.rows.len()
    }
}

/// Per-class exact nearest-neighbor index over encoded features at one layer.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    metric: Metric,
    layer: usize,
    dim: usize,
    classes: Vec<ClassBlock>,
    strategy: SearchStrategy,
}

/// In-class and per-class out-of-class reference features for one anchor.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub anchor_label: usize,
    pub in_class: Vec<Vec<f64>>,
    pub out_class: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ReferenceSet {
    /// Classes that appear in `out_class`, ascending.
    pub fn out_classes(&self) -> Vec<usize> {
        self.out_class.keys().copied().collect()
    }
}

/// Builds the per-class index over `encoder` features at `layer`.
pub fn build_index(
    data: &LabeledDataset,
    encoder: &Encoder,
    layer: usize,
    metric: Metric,
) -> Result<KnnIndex> {
    if !encoder.taps().contains(&layer) {
        return Err(Error::rejected(format!(
            "layer {layer} is not a tapped layer of the encoder"
        )));
    }
    if data.dim() != encoder.input_dim() {
        return Err(Error::rejected(format!(
            "dataset dimension {} does not match encoder input {}",
            data.dim(),
            encoder.input_dim()
        )));
    }
    let hist = data.class_histogram();
    if let Some(c) = hist.iter().position(|&n| n == 0) {
        return Err(Error::rejected(format!(
            "class {c} has no points; every class must be searchable"
        )));
    }
    let dim = encoder.layer_dim(layer);
    let mut per_class: Vec<(Vec<u32>, Vec<f64>)> = (0..data.class_count())
        .map(|c| (Vec::with_capacity(hist[c]), Vec::with_capacity(hist[c] * dim)))
        .collect();
    for i in 0..data.len() {
        let feats = encoder.forward(data.row(i))?;
        let f = &feats[&layer];
        let c = data.label(i);
        per_class[c].0.push(i as u32);
        per_class[c].1.extend_from_slice(f);
    }
    KnnIndex::from_parts(metric, layer, dim, per_class)
}

impl KnnIndex {
    /// Assembles an index from per-class `(row ids, raw features)` blocks.
    pub fn from_parts(
        metric: Metric,
        layer: usize,
        dim: usize,
        per_class: Vec<(Vec<u32>, Vec<f64>)>,
    ) -> Result<Self> {
        if per_class.len() < 2 {
            return Err(Error::rejected("index needs at least 2 classes"));
        }
        let mut classes = Vec::with_capacity(per_class.len());
        for (c, (rows, feats)) in per_class.into_iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::rejected(format!("class {c} has no points")));
            }
            if feats.len() != rows.len() * dim {
                return Err(Error::rejected(format!(
                    "class {c} feature block has wrong size"
                )));
            }
            let ranked = match metric {
                Metric::NegL2 => feats.clone(),
                Metric::Cosine => {
                    let mut out = Vec::with_capacity(feats.len());
                    for i in 0..rows.len() {
                        let f = &feats[i * dim..(i + 1) * dim];
                        let n = norm(f);
                        if n <= 0.0 {
                            return Err(Error::rejected(format!(
                                "zero vector in class {c} cannot be ranked under cosine"
                            )));
                        }
                        out.extend(f.iter().map(|v| v / n));
                    }
                    out
                }
            };
            let tree = BallTree::build(&ranked, dim);
            classes.push(ClassBlock {
                rows,
                feats,
                ranked,
                tree,
            });
        }
        Ok(KnnIndex {
            metric,
            layer,
            dim,
            classes,
            strategy: SearchStrategy::BallTree,
        })
    }

    pub fn with_strategy(mut self, strategy: SearchStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_size(&self, c: usize) -> usize {
        self.classes[c].len()
    }

    /// Per-class `(row ids, raw features)` blocks, for persistence.
    pub fn to_parts(&self) -> Vec<(Vec<u32>, Vec<f64>)> {
        self.classes
            .iter()
            .map(|b| (b.rows.clone(), b.feats.clone()))
            .collect()
    }

    fn rank_query(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::rejected(format!(
                "query has dimension {}, index expects {}",
                q.len(),
                self.dim
            )));
        }
        match self.metric {
            Metric::NegL2 => Ok(q.to_vec()),
            Metric::Cosine => {
                let n = norm(q);
                if n <= 0.0 {
                    return Err(Error::rejected("zero query vector under cosine"));
                }
                Ok(q.iter().map(|v| v / n).collect())
            }
        }
    }

    /// The `k` most similar class-`c` points to the feature vector `q`,
    /// most similar first. Returns all points if the class has fewer than `k`.
    pub fn query_class(&self, c: usize, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if c >= self.classes.len() {
            return Err(Error::rejected(format!("class {c} out of range")));
        }
        let rq = self.rank_query(q)?;
        let block = &self.classes[c];
        let k = k.min(block.len());
        let hits = match self.strategy {
            SearchStrategy::BallTree => block.tree.query(&block.ranked, self.dim, &rq, k),
            SearchStrategy::FlatScan => {
                let mut all: Vec<(f64, u32)> = (0..block.len())
                    .map(|i| (d2(&rq, &block.ranked[i * self.dim..(i + 1) * self.dim]), i as u32))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.truncate(k);
                all
            }
        };
        Ok(hits
            .into_iter()
            .map(|(key, local)| Neighbor {
                row: block.rows[local as usize],
                key,
            })
            .collect())
    }

    /// The `k` most similar points across every class, most similar first,
    /// paired with their class label.
    pub fn query_all(&self, q: &[f64], k: usize) -> Result<Vec<(Neighbor, usize)>> {
        let mut merged: Vec<(Neighbor, usize)> = Vec::new();
        for c in 0..self.classes.len() {
            for n in self.query_class(c, q, k)? {
                merged.push((n, c));
            }
        }
        merged.sort_by(|a, b| {
            (a.0.key, a.0.row)
                .partial_cmp(&(b.0.key, b.0.row))
                .unwrap()
        });
        merged.truncate(k);
        Ok(merged)
    }

    fn class_feature_by_row(&self, c: usize, row: u32) -> &[f64] {
        let block = &self.classes[c];
        let local = block.rows.binary_search(&row).expect("row id in class");
        block.feature(local, self.dim)
    }

    /// Selects in-class and out-of-class reference features for an anchor
    /// whose layer-`l` feature vector is `q`.
    ///
    /// `Knn` mode takes the nearest points per class; `Random` mode draws the
    /// out-of-class points uniformly without replacement (in-class stays kNN).
    pub fn select_reference(
        &self,
        q: &[f64],
        y: usize,
        k_pos: usize,
        k_neg: usize,
        mode: ReferenceMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ReferenceSet> {
        if y >= self.classes.len() {
            return Err(Error::rejected(format!("anchor label {y} out of range")));
        }
        if k_pos == 0 || k_neg == 0 {
            return Err(Error::rejected("reference counts must be positive"));
        }
        if self.classes[y].len() < k_pos {
            return Err(Error::rejected(format!(
                "class {y} has {} points, need {k_pos} in-class references",
                self.classes[y].len()
            )));
        }
        for (c, block) in self.classes.iter().enumerate() {
            if c != y && block.len() < k_neg {
                return Err(Error::rejected(format!(
                    "class {c} has {} points, need {k_neg} out-of-class references",
                    block.len()
                )));
            }
        }
        let in_class = self
            .query_class(y, q, k_pos)?
            .into_iter()
            .map(|n| self.class_feature_by_row(y, n.row).to_vec())
            .collect();
        let mut out_class = BTreeMap::new();
        for c in 0..self.classes.len() {
            if c == y {
                continue;
            }
            let feats: Vec<Vec<f64>> = match mode {
                ReferenceMode::Knn => self
                    .query_class(c, q, k_neg)?
                    .into_iter()
                    .map(|n| self.class_feature_by_row(c, n.row).to_vec())
                    .collect(),
                ReferenceMode::Random => {
                    let block = &self.classes[c];
                    let mut picks =
                        rand::seq::index::sample(rng, block.len(), k_neg).into_vec();
                    picks.sort_unstable();
                    picks
                        .into_iter()
                        .map(|local| block.feature(local, self.dim).to_vec())
                        .collect()
                }
            };
            out_class.insert(c, feats);
        }
        Ok(ReferenceSet {
            anchor_label: y,
            in_class,
            out_class,
        })
    }
}

/// DkNN prediction: per layer, each of the `k` nearest neighbors votes with
/// weight `1/k`; the per-layer scores are summed and the highest-scoring class
/// wins, ties broken toward the lowest class index.
pub fn dknn_predict(
    x: &[f64],
    encoder: &Encoder,
    indexes: &BTreeMap<usize, KnnIndex>,
    k: usize,
) -> Result<(usize, Vec<f64>)> {
    if indexes.is_empty() {
        return Err(Error::contract("dknn_predict needs at least one index"));
    }
    if k == 0 {
        return Err(Error::rejected("k must be positive"));
    }
    let feats = encoder.forward(x)?;
    let class_count = indexes.values().next().unwrap().class_count();
    let mut scores = vec![0.0; class_count];
    for (&layer, index) in indexes {
        let feat = feats.get(&layer).ok_or_else(|| {
            Error::contract(format!("encoder does not tap layer {layer} used by an index"))
        })?;
        let hits = index.query_all(feat, k)?;
        for (_, c) in &hits {
            scores[*c] += 1.0 / k as f64;
        }
    }
    let mut best = 0;
    for c in 1..class_count {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use rand::Rng;

    fn brute_force(points: &[Vec<f64>], q: &[f64], k: usize) -> Vec<u32> {
        let mut all: Vec<(f64, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (d2(q, p), i as u32))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        all.into_iter().map(|(_, i)| i).collect()
    }

    #[test]
    fn self_query_finds_self() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ];
        let data =
            LabeledDataset::from_rows(rows.clone(), vec![0, 0, 1, 1], 2).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let c = data.label(i);
            let hits = idx.query_class(c, r, 1).unwrap();
            assert_eq!(hits[0].row, i as u32);
            assert_eq!(hits[0].key, 0.0);
        }
    }

    #[test]
    fn tree_matches_brute_force_on_random_points() {
        let mut rng = SeedSplitter::new(2024).fork("points");
        let n = 1000;
        let dim = 8;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let data = LabeledDataset::from_rows(rows.clone(), labels.clone(), 10).unwrap();
        let enc = Encoder::identity(dim);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        for qi in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            for c in 0..10 {
                let class_rows: Vec<usize> = data.class_indices(c);
                let class_pts: Vec<Vec<f64>> =
                    class_rows.iter().map(|&i| rows[i].clone()).collect();
                let oracle: Vec<u32> = brute_force(&class_pts, &q, 5)
                    .into_iter()
                    .map(|local| class_rows[local as usize] as u32)
                    .collect();
                let got: Vec<u32> = idx
                    .query_class(c, &q, 5)
                    .unwrap()
                    .into_iter()
                    .map(|n| n.row)
                    .collect();
                assert_eq!(got, oracle, "query {qi} class {c}");
            }
        }
    }

    #[test]
    fn cosine_queries_are_scale_invariant() {
        let mut rng = SeedSplitter::new(77).fork("pts");
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.random::<f64>() + 0.1).collect())
            .collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let data = LabeledDataset::from_rows(rows.clone(), labels.clone(), 3).unwrap();
        let enc = Encoder::identity(4);
        let idx = build_index(&data, &enc, 0, Metric::Cosine).unwrap();
        // positive rescaling of the stored vectors must not change results
        let scaled_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 12.25).collect())
            .collect();
        let scaled_data = LabeledDataset::from_rows(scaled_rows, labels, 3).unwrap();
        let scaled_idx = build_index(&scaled_data, &enc, 0, Metric::Cosine).unwrap();
        let q = vec![0.3, 0.9, 0.2, 0.4];
        let scaled_q: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        for c in 0..3 {
            let a: Vec<u32> = idx.query_class(c, &q, 5).unwrap().iter().map(|n| n.row).collect();
            let b: Vec<u32> = idx
                .query_class(c, &scaled_q, 5)
                .unwrap()
                .iter()
                .map(|n| n.row)
                .collect();
            let c2: Vec<u32> = scaled_idx
                .query_class(c, &q, 5)
                .unwrap()
                .iter()
                .map(|n| n.row)
                .collect();
            assert_eq!(a, b);
            assert_eq!(a, c2);
        }
    }

    #[test]
    fn build_rejects_empty_class() {
        let data = LabeledDataset::from_rows(
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![0, 0],
            2,
        )
        .unwrap();
        let enc = Encoder::identity(2);
        assert!(matches!(
            build_index(&data, &enc, 0, Metric::NegL2),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn select_reference_honors_counts_and_zero_distance() {
        let mut rng = SeedSplitter::new(5).fork("data");
        let data = crate::data::gaussian_mixture_2d(70, 3, 0.15, &mut rng).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let anchor_row = 11;
        let x = data.row(anchor_row).to_vec();
        let y = data.label(anchor_row);
        let mut rr = SeedSplitter::new(5).fork("refs");
        let refs = idx
            .select_reference(&x, y, 3, 7, ReferenceMode::Knn, &mut rr)
            .unwrap();
        assert_eq!(refs.in_class.len(), 3);
        assert_eq!(refs.out_class.len(), 2);
        for (_, v) in &refs.out_class {
            assert_eq!(v.len(), 7);
        }
        // anchor coincides with a stored class-y point, so it must come first
        assert_eq!(refs.in_class[0], x);
    }

    #[test]
    fn select_reference_matches_brute_force_per_class() {
        // seeded 200-point 3-class set, K+ = K- = 5
        let mut rng = SeedSplitter::new(200).fork("data");
        let data = crate::data::gaussian_mixture_2d(67, 3, 0.2, &mut rng).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let mut rr = SeedSplitter::new(200).fork("refs");
        for anchor in (0..data.len()).step_by(13) {
            let x = data.row(anchor).to_vec();
            let y = data.label(anchor);
            let refs = idx
                .select_reference(&x, y, 5, 5, ReferenceMode::Knn, &mut rr)
                .unwrap();
            for c in 0..3 {
                let members = data.class_indices(c);
                let mut scored: Vec<(f64, usize)> = members
                    .iter()
                    .map(|&i| (d2(&x, data.row(i)), i))
                    .collect();
                scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<Vec<f64>> = scored
                    .iter()
                    .take(5)
                    .map(|&(_, i)| data.row(i).to_vec())
                    .collect();
                let got = if c == y {
                    &refs.in_class
                } else {
                    &refs.out_class[&c]
                };
                assert_eq!(got, &want, "anchor {anchor} class {c}");
            }
        }
    }

    #[test]
    fn random_mode_is_seeded_and_in_class_stays_knn() {
        let mut rng = SeedSplitter::new(6).fork("data");
        let data = crate::data::gaussian_mixture_2d(50, 3, 0.2, &mut rng).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let x = data.row(0).to_vec();
        let y = data.label(0);
        let mut r1 = SeedSplitter::new(9).fork("r");
        let mut r2 = SeedSplitter::new(9).fork("r");
        let a = idx
            .select_reference(&x, y, 4, 4, ReferenceMode::Random, &mut r1)
            .unwrap();
        let b = idx
            .select_reference(&x, y, 4, 4, ReferenceMode::Random, &mut r2)
            .unwrap();
        assert_eq!(a.in_class, b.in_class);
        for (c, v) in &a.out_class {
            assert_eq!(v, &b.out_class[c]);
        }
        let knn = idx
            .select_reference(&x, y, 4, 4, ReferenceMode::Knn, &mut r1)
            .unwrap();
        assert_eq!(a.in_class, knn.in_class);
    }

    #[test]
    fn select_reference_rejects_class_deficit() {
        let data = LabeledDataset::from_rows(
            vec![vec![0.0], vec![0.1], vec![1.0]],
            vec![0, 0, 1],
            2,
        )
        .unwrap();
        let enc = Encoder::identity(1);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let mut rng = SeedSplitter::new(1).fork("r");
        assert!(matches!(
            idx.select_reference(&[0.0], 0, 1, 2, ReferenceMode::Knn, &mut rng),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn unanimous_vote_predicts_that_class() {
        // six class-3 points hug the query; the other classes sit far away
        let mut rows = vec![vec![0.0, 0.0]; 6];
        for (i, r) in rows.iter_mut().enumerate() {
            r[0] = i as f64 * 0.01;
        }
        rows.push(vec![10.0, 10.0]);
        rows.push(vec![12.0, 10.0]);
        rows.push(vec![10.0, 12.0]);
        let labels = vec![3, 3, 3, 3, 3, 3, 0, 1, 2];
        let data = LabeledDataset::from_rows(rows, labels, 4).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let mut indexes = BTreeMap::new();
        indexes.insert(0usize, idx);
        let (label, scores) = dknn_predict(&[0.0, 0.0], &enc, &indexes, 5).unwrap();
        assert_eq!(label, 3);
        assert!((scores[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_breaks_to_lowest_class_index() {
        // one layer, k=2: one neighbor from each of classes 1 and 2
        let rows = vec![vec![0.0], vec![2.0], vec![100.0]];
        let labels = vec![2, 1, 0];
        let data = LabeledDataset::from_rows(rows, labels, 3).unwrap();
        let enc = Encoder::identity(1);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let mut indexes = BTreeMap::new();
        indexes.insert(0usize, idx);
        let (label, scores) = dknn_predict(&[1.0], &enc, &indexes, 2).unwrap();
        assert!((scores[1] - scores[2]).abs() < 1e-12);
        assert_eq!(label, 1);
    }

    #[test]
    fn single_layer_k1_equals_nearest_neighbor() {
        let mut rng = SeedSplitter::new(31).fork("data");
        let data = crate::data::gaussian_mixture_2d(40, 3, 0.2, &mut rng).unwrap();
        let enc = Encoder::identity(2);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let mut indexes = BTreeMap::new();
        indexes.insert(0usize, idx.clone());
        for qi in 0..30 {
            let q = data.row(qi).to_vec();
            let (label, _) = dknn_predict(&q, &enc, &indexes, 1).unwrap();
            let nn = idx.query_all(&q, 1).unwrap();
            assert_eq!(label, nn[0].1);
        }
    }

    #[test]
    fn flat_scan_and_tree_agree() {
        let mut rng = SeedSplitter::new(8).fork("data");
        let data = crate::data::gaussian_mixture_2d(80, 3, 0.25, &mut rng).unwrap();
        let enc = Encoder::identity(2);
        let tree = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let flat = tree.clone().with_strategy(SearchStrategy::FlatScan);
        for qi in 0..40 {
            let q = data.row(qi).to_vec();
            for c in 0..3 {
                let a: Vec<u32> = tree.query_class(c, &q, 7).unwrap().iter().map(|n| n.row).collect();
                let b: Vec<u32> = flat.query_class(c, &q, 7).unwrap().iter().map(|n| n.row).collect();
                assert_eq!(a, b);
            }
        }
    }
}
