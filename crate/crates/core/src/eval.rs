//! Retrieval metrics and linear read-outs of learned representations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Outputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which representation is matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    /// Fused appearance representation.
    R,
    /// Concatenated selection signature.
    Fs,
    /// Pooled output of the last block.
    Yn,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::R, FeatureKind::Fs, FeatureKind::Yn];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::R => "R",
            FeatureKind::Fs => "FS",
            FeatureKind::Yn => "YN",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R" => Ok(FeatureKind::R),
            "FS" => Ok(FeatureKind::Fs),
            "YN" => Ok(FeatureKind::Yn),
            _ => Err(Error::Config(format!("unknown feature kind `{}` (expected R, FS or YN)", s))),
        }
    }
}

/// Per-image feature rows with their identity and view labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub data: Tensor<f64>,
    pub ids: Vec<usize>,
    pub views: Vec<usize>,
}

impl FeatureSet {
    pub fn new(kind: FeatureKind, data: Tensor<f64>, ids: Vec<usize>, views: Vec<usize>) -> Result<Self> {
        if data.rank() != 2 || data.shape()[0] != ids.len() || ids.len() != views.len() {
            return Err(Error::Eval(format!("{} rows for {} ids and {} views", data.shape()[0], ids.len(), views.len())));
        }
        Ok(Self { kind, data, ids, views })
    }

    /// Pick `kind` out of network outputs.
    pub fn from_outputs<T: Scalar>(out: &Outputs<T>, kind: FeatureKind, ids: Vec<usize>, views: Vec<usize>) -> Result<Self> {
        let t = match kind {
            FeatureKind::R => &out.features,
            FeatureKind::Yn => &out.pooled,
            FeatureKind::Fs => out
                .signature
                .as_ref()
                .ok_or_else(|| Error::Eval(String::from("this network variant has no selection signature")))?,
        };
        Self::new(kind, t.cast(), ids, views)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data.data()[i * d..(i + 1) * d]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            kind: self.kind,
            data: self.data.select_rows(rows)?,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            views: rows.iter().map(|&r| self.views[r]).collect(),
        })
    }
}

/// Euclidean distances, `[probes, gallery]`.
pub fn distance_matrix(probe: &Tensor<f64>, gallery: &Tensor<f64>) -> Result<Tensor<f64>> {
    if probe.rank() != 2 || gallery.rank() != 2 || probe.shape()[1] != gallery.shape()[1] {
        return Err(Error::Eval(format!("feature shapes {:?} and {:?} do not match", probe.shape(), gallery.shape())));
    }
    let (p, g) = (probe.shape()[0], gallery.shape()[0]);
    let mut out = Vec::with_capacity(p * g);
    for a in probe.rows() {
        for b in gallery.rows() {
            out.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    Tensor::new(&[p, g], out)
}

/// Gallery order for one probe: ascending distance, ties by gallery index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

fn check_inputs(dist: &Tensor<f64>, probe_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    if dist.rank() != 2 || dist.shape() != [probe_ids.len(), gallery_ids.len()] {
        return Err(Error::Eval(format!(
            "distance matrix {:?} for {} probes and {} gallery items",
            dist.shape(),
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    if probe_ids.is_empty() {
        return Err(Error::Eval(String::from("no probes")));
    }
    if let Some(p) = probe_ids.iter().find(|p| !gallery_ids.contains(p)) {
        return Err(Error::Eval(format!("probe identity {} is absent from the gallery", p)));
    }
    Ok(())
}

/// 1-based rank of the first true match of each probe.
pub fn first_match_ranks(dist: &Tensor<f64>, probe_ids: &[usize], gallery_ids: &[usize]) -> Result<Vec<usize>> {
    check_inputs(dist, probe_ids, gallery_ids)?;
    Ok(dist
        .rows()
        .zip(probe_ids)
        .map(|(row, &pid)| ranking(row).iter().position(|&g| gallery_ids[g] == pid).expect("checked") + 1)
        .collect())
}

/// Cumulative matching characteristic at each of `ranks` (1-based).
pub fn cmc(dist: &Tensor<f64>, probe_ids: &[usize], gallery_ids: &[usize], ranks: &[usize]) -> Result<Vec<f64>> {
    if ranks.contains(&0) {
        return Err(Error::Eval(String::from("ranks are 1-based")));
    }
    let first = first_match_ranks(dist, probe_ids, gallery_ids)?;
    let n = first.len() as f64;
    Ok(ranks.iter().map(|&r| first.iter().filter(|&&f| f <= r).count() as f64 / n).collect())
}

/// Average precision of one ranked list given relevance flags in rank order.
pub fn average_precision(relevant_in_order: impl IntoIterator<Item = bool>) -> f64 {
    let (mut hits, mut total) = (0usize, 0.0);
    for (k, rel) in relevant_in_order.into_iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

/// Mean average precision and the per-query values.
pub fn mean_average_precision(dist: &Tensor<f64>, probe_ids: &[usize], gallery_ids: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_inputs(dist, probe_ids, gallery_ids)?;
    let aps: Vec<f64> = dist
        .rows()
        .zip(probe_ids)
        .map(|(row, &pid)| average_precision(ranking(row).into_iter().map(|g| gallery_ids[g] == pid)))
        .collect();
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kind: FeatureKind,
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub ap: Vec<f64>,
}

impl EvalReport {
    pub fn from_distances(
        kind: FeatureKind,
        dist: &Tensor<f64>,
        probe_ids: &[usize],
        gallery_ids: &[usize],
        ranks: &[usize],
    ) -> Result<Self> {
        let cmc = cmc(dist, probe_ids, gallery_ids, ranks)?;
        let (map, ap) = mean_average_precision(dist, probe_ids, gallery_ids)?;
        Ok(Self { kind, ranks: ranks.to_vec(), cmc, map, ap })
    }

    /// CMC at rank `r`, if it was requested.
    pub fn rank(&self, r: usize) -> Option<f64> {
        self.ranks.iter().position(|&x| x == r).map(|i| self.cmc[i])
    }
}

/// L2 matching of probes against gallery.
pub fn evaluate(probes: &FeatureSet, gallery: &FeatureSet, ranks: &[usize]) -> Result<EvalReport> {
    let dist = distance_matrix(&probes.data, &gallery.data)?;
    EvalReport::from_distances(probes.kind, &dist, &probes.ids, &gallery.ids, ranks)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + Float::exp(-z))
    } else {
        let e = Float::exp(z);
        e / (1.0 + e)
    }
}

/// Solve `A x = b` for symmetric positive-definite `A` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Eval(String::from("normal matrix is not positive definite")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// Hyper-parameters of the pair matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMatcherConfig {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub newton_steps: usize,
    /// Positive and negative pairs drawn per training image.
    pub pairs_per_image: usize,
    pub seed: u64,
}

impl Default for PairMatcherConfig {
    fn default() -> Self {
        Self { l2: 1e-3, newton_steps: 25, pairs_per_image: 2, seed: 0 }
    }
}

/// Balanced same/different pairs `(a, b, same)`. Positives prefer a
/// different view of the identity when one exists.
pub fn sample_pairs(ids: &[usize], views: &[usize], per_image: usize, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in 0..ids.len() {
        let mut same: Vec<usize> = (0..ids.len()).filter(|&b| b != a && ids[b] == ids[a] && views[b] != views[a]).collect();
        if same.is_empty() {
            same = (0..ids.len()).filter(|&b| b != a && ids[b] == ids[a]).collect();
        }
        let other: Vec<usize> = (0..ids.len()).filter(|&b| ids[b] != ids[a]).collect();
        if same.is_empty() || other.is_empty() {
            continue;
        }
        for _ in 0..per_image {
            out.push((a, *same.choose(&mut rng).expect("non-empty"), true));
            out.push((a, *other.choose(&mut rng).expect("non-empty"), false));
        }
    }
    if out.is_empty() {
        return Err(Error::Eval(String::from("no identity has two images and a distinct counterpart")));
    }
    Ok(out)
}

/// Logistic classifier on `|a − b|`: higher score means more likely the
/// same identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatcher {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PairMatcher {
    /// Fit by damped Newton iterations on the penalised log-likelihood.
    pub fn fit(diffs: &Tensor<f64>, same: &[bool], cfg: &PairMatcherConfig) -> Result<Self> {
        if diffs.rank() != 2 || diffs.shape()[0] != same.len() {
            return Err(Error::Eval(format!("{:?} pair rows for {} labels", diffs.shape(), same.len())));
        }
        if same.iter().all(|&s| s) || same.iter().all(|&s| !s) {
            return Err(Error::Eval(String::from("pair matcher needs both same and different pairs")));
        }
        let d = diffs.shape()[1];
        let n = d + 1;
        let mut theta = vec![0.0; n];
        let objective = |theta: &[f64]| -> f64 {
            let mut f = 0.5 * cfg.l2 * theta[..d].iter().map(|w| w * w).sum::<f64>();
            for (x, &y) in diffs.rows().zip(same) {
                let z = theta[d] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
                // log(1 + e^{-z}) for positives, log(1 + e^{z}) for negatives
                let m = if y { -z } else { z };
                f += if m > 0.0 { m + Float::ln_1p(Float::exp(-m)) } else { Float::ln_1p(Float::exp(m)) };
            }
            f
        };
        let mut current = objective(&theta);
        for _ in 0..cfg.newton_steps {
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            for (x, &y) in diffs.rows().zip(same) {
                let z = theta[d] + x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
                let p = sigmoid(z);
                let r = p - if y { 1.0 } else { 0.0 };
                let w = (p * (1.0 - p)).max(1e-12);
                let xa = |i: usize| if i < d { x[i] } else { 1.0 };
                for i in 0..n {
                    grad[i] += r * xa(i);
                    for j in 0..=i {
                        hess[i * n + j] += w * xa(i) * xa(j);
                    }
                }
            }
            for i in 0..n {
                for j in 0..i {
                    hess[j * n + i] = hess[i * n + j];
                }
                let reg = if i < d { cfg.l2 } else { 1e-9 };
                grad[i] += if i < d { cfg.l2 * theta[i] } else { 0.0 };
                hess[i * n + i] += reg;
            }
            let step = cholesky_solve(&hess, &grad, n)?;
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-6 {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
                let f = objective(&cand);
                if f <= current {
                    accepted = f < current;
                    theta = cand;
                    current = f;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self { bias: theta[d], weights: theta[..d].to_vec() })
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        self.bias + a.iter().zip(b).zip(&self.weights).map(|((x, y), w)| (x - y).abs() * w).sum::<f64>()
    }

    /// Train on balanced pairs drawn from `train`.
    pub fn train(train: &FeatureSet, cfg: &PairMatcherConfig) -> Result<Self> {
        let pairs = sample_pairs(&train.ids, &train.views, cfg.pairs_per_image, cfg.seed)?;
        let d = train.dim();
        let mut diffs = Vec::with_capacity(pairs.len() * d);
        for &(a, b, _) in &pairs {
            diffs.extend(train.row(a).iter().zip(train.row(b)).map(|(x, y)| (x - y).abs()));
        }
        let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        Self::fit(&Tensor::new(&[pairs.len(), d], diffs)?, &same, cfg)
    }

    /// Negated scores, usable wherever a distance matrix is expected.
    pub fn distance_matrix(&self, probe: &Tensor<f64>, gallery: &Tensor<f64>) -> Result<Tensor<f64>> {
        if probe.shape()[1] != self.weights.len() || gallery.shape()[1] != self.weights.len() {
            return Err(Error::Eval(format!("matcher expects width {}", self.weights.len())));
        }
        let mut out = Vec::with_capacity(probe.shape()[0] * gallery.shape()[0]);
        for a in probe.rows() {
            for b in gallery.rows() {
                out.push(-self.score(a, b));
            }
        }
        Tensor::new(&[probe.shape()[0], gallery.shape()[0]], out)
    }

    pub fn accuracy(&self, diffs: &Tensor<f64>, same: &[bool]) -> f64 {
        let zero = vec![0.0; self.weights.len()];
        let hits = diffs.rows().zip(same).filter(|(x, &y)| (self.score(x, &zero) > 0.0) == y).count();
        hits as f64 / same.len() as f64
    }
}

/// Multinomial logistic regression on standardised features, fit by full
/// batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-3, lr: 0.5, iterations: 500 }
    }
}

impl SoftmaxProbe {
    pub fn fit(x: &Tensor<f64>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n != y.len() || n == 0 || y.iter().any(|&c| c >= classes) {
            return Err(Error::Eval(format!("{} rows, {} labels, {} classes", n, y.len(), classes)));
        }
        let mut mean = vec![0.0; d];
        for r in x.rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; d];
        for r in x.rows() {
            scale.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let z: Vec<Vec<f64>> =
            x.rows().map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).chain([1.0]).collect()).collect();
        let mut w = vec![vec![0.0; d + 1]; classes];
        let mut probs = vec![0.0; classes];
        for _ in 0..cfg.iterations {
            let mut g = vec![vec![0.0; d + 1]; classes];
            for (zi, &yi) in z.iter().zip(y) {
                for (c, p) in probs.iter_mut().enumerate() {
                    *p = w[c].iter().zip(zi).map(|(a, b)| a * b).sum();
                }
                softmax_in_place(&mut probs);
                for c in 0..classes {
                    let r = probs[c] - if c == yi { 1.0 } else { 0.0 };
                    g[c].iter_mut().zip(zi).for_each(|(gc, v)| *gc += r * v / n as f64);
                }
            }
            for c in 0..classes {
                for k in 0..=d {
                    let reg = if k < d { cfg.l2 * w[c][k] } else { 0.0 };
                    w[c][k] -= cfg.lr * (g[c][k] + reg);
                }
            }
        }
        Ok(Self { mean, scale, weights: w })
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let z: Vec<f64> = row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).chain([1.0]).collect();
        let score = |c: usize| self.weights[c].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        (0..self.weights.len()).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).expect("classes > 0")
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = Float::exp(*x - m);
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Held-out accuracy of one attribute read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeResult {
    pub name: String,
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent training value.
    pub majority: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub results: Vec<AttributeResult>,
    /// Attributes left out because they are constant on the training rows.
    pub skipped: Vec<String>,
}

impl ProbeReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.results.iter().map(|r| r.accuracy))
    }

    pub fn mean_majority(&self) -> f64 {
        mean(self.results.iter().map(|r| r.majority))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Fit one probe per attribute column on `train` rows and score on `test`
/// rows. `labels[i][a]` is attribute `a` of row `i`.
pub fn attribute_probe(
    train: &Tensor<f64>,
    train_labels: &[Vec<usize>],
    test: &Tensor<f64>,
    test_labels: &[Vec<usize>],
    names: &[&str],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (a, &name) in names.iter().enumerate() {
        let ytr: Vec<usize> = train_labels.iter().map(|l| l[a]).collect();
        let yte: Vec<usize> = test_labels.iter().map(|l| l[a]).collect();
        let classes = ytr.iter().chain(&yte).copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; classes];
        ytr.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            skipped.push(String::from(name));
            continue;
        }
        let majority_class = (0..classes).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("classes > 0");
        let probe = SoftmaxProbe::fit(train, &ytr, classes, cfg)?;
        let hits = test.rows().zip(&yte).filter(|(r, &y)| probe.predict(r) == y).count();
        let majority = yte.iter().filter(|&&y| y == majority_class).count();
        let n = yte.len().max(1) as f64;
        results.push(AttributeResult { name: String::from(name), accuracy: hits as f64 / n, majority: majority as f64 / n });
    }
    Ok(ProbeReport { results, skipped })
}

#[cfg(test)]
mod tests;
