//! Desk-scale learning tasks with analytic gradients and the Gamma-based
//! non-i.i.d. partitioner.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::GradientVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Regression target; classifiers ignore it.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::param(format!(
                    "label {} outside [0, {num_classes})",
                    s.label
                )));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    fn subset(&self, idx: impl IntoIterator<Item = usize>) -> Dataset {
        Dataset {
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }
}

/// Gaussian class clusters: centres `~ N(0, separation^2 I)`, samples
/// `centre + N(0, I)`, labels uniform. Returns train and test sets drawn from
/// the same centres.
pub fn gaussian_clusters<R: Rng + ?Sized>(
    train: usize,
    test: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 || dim == 0 {
        return Err(Error::param("clusters need at least one class and one feature"));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| separation * normal.sample(rng)).collect())
        .collect();
    let draw = |n: usize, rng: &mut R| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..classes);
                let features = centres[label].iter().map(|c| c + normal.sample(rng)).collect();
                Sample {
                    features,
                    label,
                    target: label as f64,
                }
            })
            .collect()
    };
    let tr = draw(train, rng);
    let te = draw(test, rng);
    Ok((Dataset::new(tr, classes)?, Dataset::new(te, classes)?))
}

/// Noise-free linear regression on clustered features: targets are
/// `a . w_star`, so `w_star` attains zero loss on every subset. Features are
/// scaled by `1/sqrt(dim)`; labels keep the cluster id for partitioning.
pub fn linear_regression<R: Rng + ?Sized>(
    train: usize,
    test: usize,
    dim: usize,
    clusters: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset, GradientVector)> {
    let (tr, te) = gaussian_clusters(train, test, dim, clusters, 1.0, rng)?;
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let w_star: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let fix = |d: Dataset| -> Result<Dataset> {
        let samples = d
            .samples
            .into_iter()
            .map(|mut s| {
                s.features.iter_mut().for_each(|v| *v *= scale);
                s.target = dot(&s.features, &w_star);
                s
            })
            .collect();
        Dataset::new(samples, clusters)
    };
    Ok((fix(tr)?, fix(te)?, GradientVector::from_vec(w_star)))
}

/// Load `feature,...,feature,label` rows (no header). The class count is the
/// largest label plus one.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut samples = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() < 2 {
            return Err(Error::param(format!("row {line}: need features and a label")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::param(format!("row {line}: {e}")))
        };
        let features = row
            .iter()
            .take(row.len() - 1)
            .map(parse)
            .collect::<Result<Vec<f64>>>()?;
        let label_str = &row[row.len() - 1];
        let label: usize = label_str
            .parse()
            .map_err(|e| Error::param(format!("row {line}: label `{label_str}`: {e}")))?;
        samples.push(Sample {
            features,
            label,
            target: label as f64,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Dataset::new(samples, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `1/2 (a . w - y)^2`
    Quadratic,
    /// Multinomial logistic regression with bias.
    Logistic,
    /// One tanh hidden layer, softmax output.
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ModelKind::Quadratic),
            "logistic" => Ok(ModelKind::Logistic),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::param(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture of a model; parameters live in a flat [`GradientVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
}

impl Model {
    pub fn new(kind: ModelKind, features: usize, classes: usize, hidden: usize) -> Self {
        Self {
            kind,
            features,
            classes,
            hidden,
        }
    }

    /// Model size `s`.
    pub fn num_params(&self) -> usize {
        let (d, i, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            ModelKind::Quadratic => d,
            ModelKind::Logistic => i * d + i,
            ModelKind::Mlp => h * d + h + i * h + i,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::Quadratic)
    }

    /// Zeros for convex models; scaled Gaussian weights for the MLP.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> GradientVector {
        let mut w = GradientVector::zeros(self.num_params());
        if self.kind == ModelKind::Mlp {
            let (d, h, i) = (self.features, self.hidden, self.classes);
            let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
            let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("finite std");
            let w2_start = h * d + h;
            for j in 0..h * d {
                w[j] = n1.sample(rng);
            }
            for j in 0..i * h {
                w[w2_start + j] = n2.sample(rng);
            }
        }
        w
    }

    fn check(&self, w: &GradientVector, data: &Dataset) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: w.len(),
            });
        }
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if data.dim() != self.features {
            return Err(Error::Dimension {
                expected: self.features,
                got: data.dim(),
            });
        }
        if self.is_classifier() && data.num_classes() > self.classes {
            return Err(Error::param(format!(
                "data has {} classes, model {}",
                data.num_classes(),
                self.classes
            )));
        }
        Ok(())
    }

    /// Mean per-sample loss.
    pub fn loss(&self, w: &GradientVector, data: &Dataset) -> Result<f64> {
        self.check(w, data)?;
        let mut scratch = Scratch::new(self);
        let total: f64 = data
            .samples()
            .iter()
            .map(|s| self.sample_loss(w.as_slice(), s, &mut scratch))
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Analytic mean gradient over `batch`.
    pub fn grad(&self, w: &GradientVector, batch: &Dataset) -> Result<GradientVector> {
        self.check(w, batch)?;
        let mut g = GradientVector::zeros(w.len());
        let mut scratch = Scratch::new(self);
        for s in batch.samples() {
            self.accumulate_grad(w.as_slice(), s, g.as_mut_slice(), &mut scratch);
        }
        g.scale(1.0 / batch.len() as f64);
        Ok(g)
    }

    /// Fraction of correctly classified samples (classifiers only).
    pub fn accuracy(&self, w: &GradientVector, data: &Dataset) -> Result<f64> {
        self.check(w, data)?;
        if !self.is_classifier() {
            return Err(Error::param("accuracy is undefined for regression"));
        }
        let mut scratch = Scratch::new(self);
        let hits = data
            .samples()
            .iter()
            .filter(|s| {
                self.logits(w.as_slice(), &s.features, &mut scratch);
                argmax(&scratch.logits) == s.label
            })
            .count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Accuracy for classifiers, held-out loss for regression.
    pub fn test_metric(&self, w: &GradientVector, data: &Dataset) -> Result<f64> {
        if self.is_classifier() {
            self.accuracy(w, data)
        } else {
            self.loss(w, data)
        }
    }

    fn logits(&self, w: &[f64], x: &[f64], sc: &mut Scratch) {
        let (d, i, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            ModelKind::Quadratic => unreachable!("regression has no logits"),
            ModelKind::Logistic => {
                let bias = &w[i * d..];
                for c in 0..i {
                    sc.logits[c] = dot(&w[c * d..(c + 1) * d], x) + bias[c];
                }
            }
            ModelKind::Mlp => {
                let b1 = &w[h * d..h * d + h];
                let off = h * d + h;
                let w2 = &w[off..off + i * h];
                let b2 = &w[off + i * h..];
                for j in 0..h {
                    sc.hidden[j] = (dot(&w[j * d..(j + 1) * d], x) + b1[j]).tanh();
                }
                for c in 0..i {
                    sc.logits[c] = dot(&w2[c * h..(c + 1) * h], &sc.hidden) + b2[c];
                }
            }
        }
    }

    fn sample_loss(&self, w: &[f64], s: &Sample, sc: &mut Scratch) -> f64 {
        if self.kind == ModelKind::Quadratic {
            let r = dot(w, &s.features) - s.target;
            return 0.5 * r * r;
        }
        self.logits(w, &s.features, sc);
        log_sum_exp(&sc.logits) - sc.logits[s.label]
    }

    fn accumulate_grad(&self, w: &[f64], s: &Sample, g: &mut [f64], sc: &mut Scratch) {
        let x = &s.features;
        let (d, i, h) = (self.features, self.classes, self.hidden);
        if self.kind == ModelKind::Quadratic {
            let r = dot(w, x) - s.target;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
            return;
        }
        self.logits(w, x, sc);
        softmax_in_place(&mut sc.logits);
        sc.logits[s.label] -= 1.0;
        let dz = &sc.logits;
        match self.kind {
            ModelKind::Logistic => {
                for c in 0..i {
                    let row = &mut g[c * d..(c + 1) * d];
                    for (gj, xj) in row.iter_mut().zip(x) {
                        *gj += dz[c] * xj;
                    }
                    g[i * d + c] += dz[c];
                }
            }
            ModelKind::Mlp => {
                let off = h * d + h;
                let w2 = &w[off..off + i * h];
                for j in 0..h {
                    let back: f64 = (0..i).map(|c| dz[c] * w2[c * h + j]).sum();
                    sc.delta[j] = back * (1.0 - sc.hidden[j] * sc.hidden[j]);
                }
                for c in 0..i {
                    for j in 0..h {
                        g[off + c * h + j] += dz[c] * sc.hidden[j];
                    }
                    g[off + i * h + c] += dz[c];
                }
                for j in 0..h {
                    let row = &mut g[j * d..(j + 1) * d];
                    for (gj, xj) in row.iter_mut().zip(x) {
                        *gj += sc.delta[j] * xj;
                    }
                    g[h * d + j] += sc.delta[j];
                }
            }
            ModelKind::Quadratic => unreachable!(),
        }
    }
}

/// Largest eigenvalue of the regression Hessian `(1/n) sum a a^T`, by power
/// iteration; the smoothness constant `L` of the quadratic task.
pub fn quadratic_smoothness(data: &Dataset) -> f64 {
    let d = data.dim();
    if d == 0 || data.is_empty() {
        return 0.0;
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut next = vec![0.0; d];
        for s in data.samples() {
            let p = dot(&s.features, &v);
            for (n, a) in next.iter_mut().zip(&s.features) {
                *n += p * a;
            }
        }
        next.iter_mut().for_each(|x| *x /= data.len() as f64);
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let converged = (norm - lambda).abs() <= 1e-12 * norm;
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    lambda
}

struct Scratch {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    delta: Vec<f64>,
}

impl Scratch {
    fn new(m: &Model) -> Self {
        Self {
            logits: vec![0.0; m.classes],
            hidden: vec![0.0; m.hidden],
            delta: vec![0.0; m.hidden],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Uniform minibatch: without replacement when `batch_size <= |D|`,
/// with replacement otherwise.
pub fn sample_batch<R: Rng + ?Sized>(data: &Dataset, batch_size: usize, rng: &mut R) -> Result<Dataset> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = data.len();
    if batch_size <= n {
        Ok(data.subset(index::sample(rng, n, batch_size)))
    } else {
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        Ok(data.subset(idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Concentration `rho`; small values give skewed devices.
    pub rho: f64,
    pub devices: usize,
    /// Class prior `Z-bar`; must sum to one.
    pub class_prior: Vec<f64>,
}

impl PartitionSpec {
    pub fn balanced(rho: f64, devices: usize, classes: usize) -> Self {
        Self {
            rho,
            devices,
            class_prior: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::param(format!("rho must be positive, got {}", self.rho)));
        }
        if self.devices == 0 {
            return Err(Error::param("need at least one device"));
        }
        let sum: f64 = self.class_prior.iter().sum();
        if self.class_prior.iter().any(|z| !(*z >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("class prior must be a probability vector"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub datasets: Vec<Dataset>,
    /// Drawn class proportions per device (before quota rounding).
    pub proportions: Vec<Vec<f64>>,
}

/// Per-device class proportions `z_i ~ Gamma(rho * Zbar_i, 1)`, normalised.
/// If every draw underflows to zero the device gets a single class drawn
/// from the prior.
pub fn draw_class_proportions<R: Rng + ?Sized>(spec: &PartitionSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let classes = spec.class_prior.len();
    let mut out = Vec::with_capacity(spec.devices);
    for _ in 0..spec.devices {
        let mut z = vec![0.0; classes];
        for (zi, prior) in z.iter_mut().zip(&spec.class_prior) {
            if *prior > 0.0 {
                let g = Gamma::new(spec.rho * prior, 1.0).map_err(|e| Error::param(e.to_string()))?;
                *zi = g.sample(rng);
            }
        }
        let total: f64 = z.iter().sum();
        if total > 0.0 && total.is_finite() {
            z.iter_mut().for_each(|v| *v /= total);
        } else {
            let mut u = rng.random::<f64>();
            let mut pick = classes - 1;
            for (c, p) in spec.class_prior.iter().enumerate() {
                if u < *p {
                    pick = c;
                    break;
                }
                u -= p;
            }
            z.iter_mut().for_each(|v| *v = 0.0);
            z[pick] = 1.0;
        }
        out.push(z);
    }
    Ok(out)
}

/// Split `data` over devices with Gamma-drawn class proportions. Each device
/// gets an equal share of samples (remainder to the first devices); samples
/// are taken without replacement. When a class runs out the shortfall moves
/// to the classes that still have samples.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    data: &Dataset,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<Partition> {
    spec.validate()?;
    if spec.class_prior.len() != data.num_classes() {
        return Err(Error::Dimension {
            expected: data.num_classes(),
            got: spec.class_prior.len(),
        });
    }
    let proportions = draw_class_proportions(spec, rng)?;
    let classes = data.num_classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in data.samples().iter().enumerate() {
        pools[s.label].push(i);
    }
    for pool in pools.iter_mut() {
        // shuffle so that class pools are consumed in random order
        let perm = index::sample(rng, pool.len(), pool.len()).into_vec();
        *pool = perm.into_iter().map(|j| pool[j]).collect();
    }

    let n = data.len();
    let base = n / spec.devices;
    let extra = n % spec.devices;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); spec.devices];
    let mut warned = false;
    for (dev, z) in proportions.iter().enumerate() {
        let quota = base + usize::from(dev < extra);
        let mut want = largest_remainder(quota, z);
        // take what is available, then spread the shortfall
        let mut short = 0;
        for c in 0..classes {
            let take = want[c].min(pools[c].len());
            short += want[c] - take;
            want[c] = take;
        }
        if short > 0 {
            if !warned {
                log::warn!("class pools exhausted during partitioning; rebalancing to remaining classes");
                warned = true;
            }
            while short > 0 {
                let avail: Vec<f64> = (0..classes).map(|c| (pools[c].len() - want[c]) as f64).collect();
                let total: f64 = avail.iter().sum();
                if total == 0.0 {
                    break;
                }
                let weights: Vec<f64> = avail.iter().map(|a| a / total).collect();
                let extra_take = largest_remainder(short, &weights);
                let mut moved = 0;
                for c in 0..classes {
                    let t = extra_take[c].min(pools[c].len() - want[c]);
                    want[c] += t;
                    moved += t;
                }
                if moved == 0 {
                    break;
                }
                short -= moved;
            }
        }
        for c in 0..classes {
            let at = pools[c].len() - want[c];
            assigned[dev].extend(pools[c].drain(at..));
        }
    }
    // anything still unassigned goes round-robin
    let leftovers: Vec<usize> = pools.into_iter().flatten().collect();
    for (j, i) in leftovers.into_iter().enumerate() {
        assigned[j % spec.devices].push(i);
    }
    let datasets = assigned
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            data.subset(idx)
        })
        .collect();
    Ok(Partition {
        datasets,
        proportions,
    })
}

/// Integer split of `total` proportional to `weights` (largest remainder).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(weights.len() * 2) {
        if left == 0 {
            break;
        }
        if weights[c] > 0.0 {
            out[c] += 1;
            left -= 1;
        }
    }
    out
}
