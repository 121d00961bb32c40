//! Non-temporal baseline: a multi-output regression forest from the current
//! frame's structure feature to the marker coordinates.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::features::{fit_normalizer, frame_features, FeatureError, Normalizer};
use crate::geometry::ColonFrame;
use crate::recording::InsertionRecording;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("no training samples")]
    Empty,
    #[error("sample {index}: {what} length {found}, expected {expected}")]
    Length { index: usize, what: &'static str, expected: usize, found: usize },
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error("malformed forest: {0}")]
    Malformed(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 50, max_depth: 12, min_samples_leaf: 5, features_per_split: None, bootstrap: true, seed: 0 }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.trees == 0 {
            return Err(ForestError::Config("trees must be ≥ 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::Config("min_samples_leaf must be ≥ 1".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::Config("features_per_split must be ≥ 1".into()));
        }
        Ok(())
    }

    fn mtry(&self, d: usize) -> usize {
        self.features_per_split.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go to `left`.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(Vec<f64>),
}

/// Nodes in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_for(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf(v) => return v,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf(_) => 0,
            }
        }
        go(&self.nodes, 0)
    }

    /// Checks that every child index points forward into the node list, so
    /// traversal terminates and every leaf has the expected size.
    pub fn validate(&self, n_features: usize, n_outputs: usize) -> Result<(), ForestError> {
        if self.nodes.is_empty() {
            return Err(ForestError::Malformed("empty tree".into()));
        }
        let mut reached = vec![false; self.nodes.len()];
        reached[0] = true;
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split { feature, threshold, left, right } => {
                    if *feature >= n_features || !threshold.is_finite() {
                        return Err(ForestError::Malformed(format!("node {i}: bad split")));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= self.nodes.len() || reached[c] {
                            return Err(ForestError::Malformed(format!("node {i}: bad child {c}")));
                        }
                        reached[c] = true;
                    }
                }
                Node::Leaf(v) => {
                    if v.len() != n_outputs || v.iter().any(|x| !x.is_finite()) {
                        return Err(ForestError::Malformed(format!("node {i}: bad leaf")));
                    }
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(ForestError::Malformed(format!("node {i} is unreachable")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionForest {
    pub n_features: usize,
    pub n_outputs: usize,
    pub trees: Vec<Tree>,
}

/// Mean that is exact when every value is equal.
fn stable_mean<'a, I: Iterator<Item = &'a [f64]>>(mut rows: I, k: usize) -> Vec<f64> {
    let Some(first) = rows.next() else { return vec![0.0; k] };
    let mut acc = vec![0.0; k];
    let mut n = 1usize;
    for r in rows {
        for ((a, &v), &f) in acc.iter_mut().zip(r).zip(first) {
            *a += v - f;
        }
        n += 1;
    }
    first.iter().zip(&acc).map(|(&f, &a)| f + a / n as f64).collect()
}

struct Data<'a> {
    x: &'a [f64],
    y: &'a [f64],
    d: usize,
    k: usize,
}

impl Data<'_> {
    fn xf(&self, i: usize, f: usize) -> f64 {
        self.x[i * self.d + f]
    }
    fn yr(&self, i: usize) -> &[f64] {
        &self.y[i * self.k..][..self.k]
    }
}

struct Builder<'a, R> {
    data: Data<'a>,
    cfg: &'a ForestConfig,
    mtry: usize,
    rng: R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let v = stable_mean(idx.iter().map(|&i| self.data.yr(i)), self.data.k);
        self.nodes.push(Node::Leaf(v));
        self.nodes.len() - 1
    }

    /// Best (feature, threshold, gain) among sampled features.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let (d, k, n) = (self.data.d, self.data.k, idx.len());
        let mut feats = if self.mtry >= d {
            (0..d).collect::<Vec<_>>()
        } else {
            sample_indices(&mut self.rng, d, self.mtry).into_vec()
        };
        feats.sort_unstable();
        // Shift targets by the first sample so constant targets sum exactly to 0.
        let base = self.data.yr(idx[0]).to_vec();
        let shifted = |i: usize| self.data.yr(i).iter().zip(&base).map(|(v, b)| v - b);
        let mut total = vec![0.0; k];
        for &i in idx {
            total.iter_mut().zip(shifted(i)).for_each(|(t, v)| *t += v);
        }
        let norm2 = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        let parent = norm2(&total) / n as f64;
        let min_leaf = self.cfg.min_samples_leaf;

        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        let mut left = vec![0.0; k];
        for f in feats {
            order.sort_by(|&a, &b| self.data.xf(a, f).total_cmp(&self.data.xf(b, f)));
            left.iter_mut().for_each(|v| *v = 0.0);
            for pos in 0..n - 1 {
                left.iter_mut().zip(shifted(order[pos])).for_each(|(l, v)| *l += v);
                let (a, b) = (self.data.xf(order[pos], f), self.data.xf(order[pos + 1], f));
                let nl = pos + 1;
                let nr = n - nl;
                if a == b || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let gain = norm2(&left) / nl as f64 + norm2(&right) / nr as f64 - parent;
                if gain > 0.0 && best.is_none_or(|(_, _, g)| gain > g) {
                    let mut thr = a + (b - a) / 2.0;
                    if thr >= b {
                        thr = a;
                    }
                    best = Some((f, thr, gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> usize {
        let first = self.data.yr(idx[0]);
        let constant = idx.iter().all(|&i| self.data.yr(i) == first);
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_samples_leaf || constant {
            return self.leaf(idx);
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.data.xf(i, feature) <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let left = self.build(&l, depth + 1);
        let right = self.build(&r, depth + 1);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
}

fn flatten(samples: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>, usize, usize), ForestError> {
    let (d, k) = match samples.first() {
        Some((x, y)) => (x.len(), y.len()),
        None => return Err(ForestError::Empty),
    };
    if d == 0 || k == 0 {
        return Err(ForestError::Config("features and targets must be non-empty".into()));
    }
    let mut xs = Vec::with_capacity(samples.len() * d);
    let mut ys = Vec::with_capacity(samples.len() * k);
    for (i, (x, y)) in samples.iter().enumerate() {
        if x.len() != d {
            return Err(ForestError::Length { index: i, what: "feature", expected: d, found: x.len() });
        }
        if y.len() != k {
            return Err(ForestError::Length { index: i, what: "target", expected: k, found: y.len() });
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(ForestError::Config(format!("sample {i} has a non-finite value")));
        }
        xs.extend_from_slice(x);
        ys.extend_from_slice(y);
    }
    Ok((xs, ys, d, k))
}

fn train_tree(x: &[f64], y: &[f64], d: usize, k: usize, cfg: &ForestConfig, t: usize) -> Tree {
    let n = y.len() / k;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64));
    let idx: Vec<usize> = if cfg.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
    let mut b = Builder { data: Data { x, y, d, k }, cfg, mtry: cfg.mtry(d), rng, nodes: Vec::new() };
    b.build(&idx, 0);
    Tree { nodes: b.nodes }
}

pub fn forest_train(samples: &[(Vec<f64>, Vec<f64>)], cfg: &ForestConfig) -> Result<RegressionForest, ForestError> {
    forest_train_threaded(samples, cfg, 1)
}

/// Trees are independent given their derived seeds, so any thread count
/// yields the same forest.
pub fn forest_train_threaded(
    samples: &[(Vec<f64>, Vec<f64>)],
    cfg: &ForestConfig,
    threads: usize,
) -> Result<RegressionForest, ForestError> {
    cfg.validate()?;
    let (x, y, d, k) = flatten(samples)?;
    let threads = threads.clamp(1, cfg.trees);
    let trees = if threads == 1 {
        (0..cfg.trees).map(|t| train_tree(&x, &y, d, k, cfg, t)).collect()
    } else {
        let mut slots: Vec<Option<Tree>> = vec![None; cfg.trees];
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(cfg.trees.div_ceil(threads)).enumerate() {
                let (x, y) = (&x, &y);
                let start = w * cfg.trees.div_ceil(threads);
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(train_tree(x, y, d, k, cfg, start + j));
                    }
                });
            }
        });
        slots.into_iter().map(|t| t.expect("every tree slot is filled")).collect()
    };
    Ok(RegressionForest { n_features: d, n_outputs: k, trees })
}

pub fn forest_predict(forest: &RegressionForest, feature: &[f64]) -> Result<Vec<f64>, ForestError> {
    if feature.len() != forest.n_features {
        return Err(ForestError::Length { index: 0, what: "feature", expected: forest.n_features, found: feature.len() });
    }
    Ok(stable_mean(forest.trees.iter().map(|t| t.leaf_for(feature)), forest.n_outputs))
}

/// A forest together with the normalizer of its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub forest: RegressionForest,
    pub normalizer: Normalizer,
}

/// (normalized structure feature of frame t, normalized markers of frame t).
pub fn forest_samples(recordings: &[InsertionRecording], norm: &Normalizer) -> Vec<(Vec<f64>, Vec<f64>)> {
    recordings
        .iter()
        .flat_map(|r| r.frames.iter())
        .map(|p| (frame_features(&p.scope, norm).structure.to_vec(), norm.normalize_markers(&p.colon.markers)))
        .collect()
}

pub fn train_forest_model(
    recordings: &[InsertionRecording],
    cfg: &ForestConfig,
    threads: usize,
) -> Result<ForestModel, ForestError> {
    let normalizer = fit_normalizer(recordings)?;
    let forest = forest_train_threaded(&forest_samples(recordings, &normalizer), cfg, threads)?;
    Ok(ForestModel { forest, normalizer })
}

impl ForestModel {
    /// Per-frame estimates for frames `from..=T` (1-based).
    pub fn estimate_recording(&self, rec: &InsertionRecording, from: usize) -> Result<Vec<ColonFrame>, ForestError> {
        rec.frames
            .iter()
            .filter(|p| p.scope.frame_index >= from)
            .map(|p| {
                let x = frame_features(&p.scope, &self.normalizer).structure.to_vec();
                let y = forest_predict(&self.forest, &x)?;
                Ok(ColonFrame::new(self.normalizer.denormalize_markers(&y), p.scope.frame_index))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(Vec<f64>, Vec<f64>)> {
        // 8 samples, 2 features, 2 outputs.
        let xs = [[0.0, 5.0], [1.0, 3.0], [2.0, 8.0], [3.0, 1.0], [4.0, 7.0], [5.0, 2.0], [6.0, 6.0], [7.0, 4.0]];
        let ys = [[1.0, 0.0], [1.2, 0.1], [0.9, 4.0], [5.0, 0.2], [5.2, 4.1], [4.8, 0.0], [9.0, 3.9], [9.1, 0.3]];
        xs.iter().zip(ys).map(|(x, y)| (x.to_vec(), y.to_vec())).collect()
    }

    fn single(depth: usize, leaf: usize) -> ForestConfig {
        ForestConfig { trees: 1, max_depth: depth, min_samples_leaf: leaf, features_per_split: None, bootstrap: false, seed: 0 }
    }

    fn sse(rows: &[&(Vec<f64>, Vec<f64>)]) -> f64 {
        let k = rows[0].1.len();
        let n = rows.len() as f64;
        (0..k)
            .map(|j| {
                let m = rows.iter().map(|r| r.1[j]).sum::<f64>() / n;
                rows.iter().map(|r| (r.1[j] - m).powi(2)).sum::<f64>()
            })
            .sum()
    }

    /// Exhaustive search over every feature and every midpoint threshold.
    fn oracle(samples: &[&(Vec<f64>, Vec<f64>)], depth: usize, max_depth: usize) -> String {
        if depth == max_depth || samples.len() < 2 || sse(samples) == 0.0 {
            return "L".into();
        }
        let parent = sse(samples);
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..samples[0].0.len() {
            let mut vals: Vec<f64> = samples.iter().map(|s| s.0[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<_>, Vec<_>) = samples.iter().partition(|s| s.0[f] <= t);
                let gain = parent - sse(&l) - sse(&r);
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    best = Some((gain, f, t));
                }
            }
        }
        match best {
            None => "L".into(),
            Some((_, f, t)) => {
                let (l, r): (Vec<_>, Vec<_>) = samples.iter().partition(|s| s.0[f] <= t);
                format!("S({f},{t})[{}][{}]", oracle(&l, depth + 1, max_depth), oracle(&r, depth + 1, max_depth))
            }
        }
    }

    fn render(tree: &Tree, i: usize) -> String {
        match &tree.nodes[i] {
            Node::Split { feature, threshold, left, right } => {
                format!("S({feature},{threshold})[{}][{}]", render(tree, *left), render(tree, *right))
            }
            Node::Leaf(_) => "L".into(),
        }
    }

    #[test]
    fn depth_zero_is_mean() {
        let f = forest_train(&toy(), &single(0, 1)).unwrap();
        let p = forest_predict(&f, &[0.0, 0.0]).unwrap();
        let mx = toy().iter().map(|s| s.1[0]).sum::<f64>() / 8.0;
        assert!((p[0] - mx).abs() < 1e-12);
        assert_eq!(f.trees[0].nodes.len(), 1);
    }

    #[test]
    fn constant_targets_predicted_exactly() {
        let s: Vec<_> = toy().into_iter().map(|(x, _)| (x, vec![0.1, 0.7])).collect();
        let f = forest_train(&s, &ForestConfig { min_samples_leaf: 1, ..ForestConfig::default() }).unwrap();
        for x in [[-3.0, 2.0], [100.0, 0.5]] {
            assert_eq!(forest_predict(&f, &x).unwrap(), vec![0.1, 0.7]);
        }
    }

    #[test]
    fn matches_brute_force_split_search() {
        let s = toy();
        let f = forest_train(&s, &single(2, 1)).unwrap();
        let refs: Vec<_> = s.iter().collect();
        let want = oracle(&refs, 0, 2);
        let got = render(&f.trees[0], 0);
        assert_eq!(got, want);
        for x in s.iter().map(|s| &s.0) {
            let leaf = f.trees[0].leaf_for(x);
            let same: Vec<_> = s.iter().filter(|o| f.trees[0].leaf_for(&o.0) == leaf).collect();
            let mean0 = same.iter().map(|o| o.1[0]).sum::<f64>() / same.len() as f64;
            assert!((leaf[0] - mean0).abs() < 1e-12);
        }
        assert_eq!(f.trees[0].depth(), 2);
    }

    #[test]
    fn prediction_is_average_of_trees() {
        let s = toy();
        let f = forest_train(&s, &ForestConfig { trees: 7, min_samples_leaf: 1, seed: 3, ..ForestConfig::default() }).unwrap();
        let x = [2.5, 4.5];
        let p = forest_predict(&f, &x).unwrap();
        for j in 0..2 {
            let hand = f.trees.iter().map(|t| t.leaf_for(&x)[j]).sum::<f64>() / 7.0;
            assert!((p[j] - hand).abs() < 1e-12);
        }
        let dup = RegressionForest { trees: vec![f.trees[0].clone(); 3], ..f.clone() };
        assert_eq!(forest_predict(&dup, &x).unwrap(), f.trees[0].leaf_for(&x));
    }

    #[test]
    fn deep_single_tree_interpolates() {
        let s = toy();
        let f = forest_train(&s, &single(usize::MAX, 1)).unwrap();
        for (x, y) in &s {
            assert_eq!(&forest_predict(&f, x).unwrap(), y);
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let s = toy();
        let cfg = ForestConfig { trees: 9, min_samples_leaf: 1, seed: 42, ..ForestConfig::default() };
        let a = forest_train(&s, &cfg).unwrap();
        assert_eq!(a, forest_train(&s, &cfg).unwrap());
        assert_eq!(a, forest_train_threaded(&s, &cfg, 4).unwrap());
        for t in &a.trees {
            t.validate(2, 2).unwrap();
        }
    }

    #[test]
    fn errors() {
        assert_eq!(forest_train(&[], &ForestConfig::default()), Err(ForestError::Empty));
        let mut s = toy();
        s[3].0.push(1.0);
        assert!(matches!(forest_train(&s, &ForestConfig::default()), Err(ForestError::Length { index: 3, .. })));
        let f = forest_train(&toy(), &single(1, 1)).unwrap();
        assert!(matches!(forest_predict(&f, &[1.0]), Err(ForestError::Length { .. })));
        assert!(matches!(forest_train(&toy(), &ForestConfig { trees: 0, ..ForestConfig::default() }), Err(ForestError::Config(_))));
    }
}
