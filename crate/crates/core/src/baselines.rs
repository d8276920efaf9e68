//! Classical classifiers over the same MFCC rows as the neural models.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Confusion, MetricsReport};
use crate::dataset::{ClassWeights, DatasetError, Label, MfccDataset};
use crate::seed::{self, Rng};

/// Floor added to every naive Bayes variance.
pub const VAR_EPS: f64 = 1e-9;
pub const LOGREG_TOL: f64 = 1e-6;
pub const LOGREG_MAX_ITER: usize = 10_000;
pub const FOREST_TREES: usize = 100;

#[derive(Error, Debug)]
pub enum BaselineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("model expects {expected} features, got {found}")]
    FeatureCount { expected: usize, found: usize },
    #[error("training data must contain both classes")]
    SingleClass,
    #[error("evaluation failed: {0}")]
    Metrics(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Logreg,
    Gnb,
    Rforest,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Logreg, BaselineKind::Gnb, BaselineKind::Rforest];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Logreg => "logreg",
            BaselineKind::Gnb => "gnb",
            BaselineKind::Rforest => "rforest",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BaselineKind::Logreg => "Logistic Regression",
            BaselineKind::Gnb => "Naive Bayes",
            BaselineKind::Rforest => "Random Forest",
        }
    }
}

fn check_binary(y: &[f64]) -> Result<()> {
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    if pos == 0 || pos == y.len() {
        return Err(BaselineError::SingleClass);
    }
    Ok(())
}

fn sample_weights(y: &[f64], w: &ClassWeights) -> Vec<f64> {
    y.iter().map(|&v| w.for_target(v)).collect()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Class-weighted logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub coef: Array1<f64>,
    pub intercept: f64,
    pub iterations: usize,
}

impl LogisticRegression {
    /// Weighted mean BCE of parameters `(coef, intercept)` on standardized `x`, and its gradient.
    pub fn loss_and_grad(x: ArrayView2<f64>, y: &[f64], sw: &[f64], coef: ArrayView1<f64>, intercept: f64) -> (f64, Array1<f64>, f64) {
        let n = x.nrows() as f64;
        let z = x.dot(&coef) + intercept;
        let mut loss = 0.0;
        let mut r = Array1::zeros(x.nrows());
        for i in 0..x.nrows() {
            loss += sw[i] * (softplus(z[i]) - y[i] * z[i]);
            r[i] = sw[i] * (crate::nn::sigmoid(z[i]) - y[i]) / n;
        }
        (loss / n, x.t().dot(&r), r.sum())
    }

    pub fn fit(x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights) -> Result<Self> {
        check_binary(y)?;
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        let xs = (&x - &mean) / &scale;
        let sw = sample_weights(y, weights);
        let n = x.nrows() as f64;
        let w_max = sw.iter().cloned().fold(0.0, f64::max);
        // Lipschitz bound of the gradient via the Frobenius norm of [X, 1]
        let lipschitz = w_max / 4.0 * (xs.iter().map(|v| v * v).sum::<f64>() + n) / n;
        let step = 1.0 / lipschitz;
        let mut coef = Array1::zeros(x.ncols());
        let mut intercept = 0.0;
        let mut iterations = 0;
        while iterations < LOGREG_MAX_ITER {
            let (_, g, gb) = Self::loss_and_grad(xs.view(), y, &sw, coef.view(), intercept);
            let g_inf = g.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
            if g_inf < LOGREG_TOL {
                break;
            }
            coef.scaled_add(-step, &g);
            intercept -= step * gb;
            iterations += 1;
        }
        Ok(Self {
            mean,
            scale,
            coef,
            intercept,
            iterations,
        })
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let xs = (&x - &self.mean) / &self.scale;
        (xs.dot(&self.coef) + self.intercept).mapv(crate::nn::sigmoid).to_vec()
    }
}

/// Per-class Gaussian likelihoods with independent features.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNb {
    /// Row 0 is the negative class, row 1 the positive class.
    pub means: Array2<f64>,
    pub vars: Array2<f64>,
    pub log_priors: [f64; 2],
}

impl GaussianNb {
    pub fn fit(x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights) -> Result<Self> {
        check_binary(y)?;
        let sw = sample_weights(y, weights);
        let d = x.ncols();
        let mut means = Array2::zeros((2, d));
        let mut vars = Array2::zeros((2, d));
        let mut mass = [0.0; 2];
        for (i, row) in x.rows().into_iter().enumerate() {
            let c = y[i] as usize;
            mass[c] += sw[i];
            means.row_mut(c).scaled_add(sw[i], &row);
        }
        for c in 0..2 {
            means.row_mut(c).mapv_inplace(|v| v / mass[c]);
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            let c = y[i] as usize;
            let diff = &row - &means.row(c);
            vars.row_mut(c).scaled_add(sw[i], &(&diff * &diff));
        }
        for c in 0..2 {
            vars.row_mut(c).mapv_inplace(|v| v / mass[c] + VAR_EPS);
        }
        let total = mass[0] + mass[1];
        Ok(Self {
            means,
            vars,
            log_priors: [(mass[0] / total).ln(), (mass[1] / total).ln()],
        })
    }

    fn joint_log_likelihood(&self, row: ArrayView1<f64>, c: usize) -> f64 {
        let mut ll = self.log_priors[c];
        for ((&x, &m), &v) in row.iter().zip(self.means.row(c)).zip(self.vars.row(c)) {
            ll -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v);
        }
        ll
    }

    /// Posterior of the positive class via log-sum-exp.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let (l0, l1) = (self.joint_log_likelihood(row, 0), self.joint_log_likelihood(row, 1));
                let m = l0.max(l1);
                let log_norm = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                (l1 - log_norm).exp()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Weighted fraction of positives reaching the leaf.
    Leaf { p_pos: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeOptions {
    /// Features examined per split before falling back to the rest.
    pub max_features: usize,
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
}

fn gini(pos: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let p = pos / total;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    sw: &'a [f64],
    opts: TreeOptions,
    rng: Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn best_split(&self, idx: &[usize], feature: usize, total_w: f64, pos_w: f64) -> Option<(f64, f64)> {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| self.x[[a, feature]].total_cmp(&self.x[[b, feature]]));
        let parent = total_w * gini(pos_w, total_w);
        let (mut lw, mut lp) = (0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        for k in 0..order.len() - 1 {
            let i = order[k];
            lw += self.sw[i];
            lp += self.sw[i] * self.y[i];
            let (a, b) = (self.x[[i, feature]], self.x[[order[k + 1], feature]]);
            if a == b {
                continue;
            }
            let gain = parent - lw * gini(lp, lw) - (total_w - lw) * gini(pos_w - lp, total_w - lw);
            if gain > 1e-12 && best.is_none_or(|(g, _)| gain > g) {
                let mid = 0.5 * (a + b);
                best = Some((gain, if mid < b { mid } else { a }));
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let total_w: f64 = idx.iter().map(|&i| self.sw[i]).sum();
        let pos_w: f64 = idx.iter().map(|&i| self.sw[i] * self.y[i]).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            p_pos: if total_w > 0.0 { pos_w / total_w } else { 0.0 },
        });
        let pure = pos_w <= 0.0 || pos_w >= total_w;
        if pure || idx.len() < 2 || self.opts.max_depth.is_some_and(|m| depth >= m) {
            return id;
        }
        let d = self.x.ncols();
        let k = self.opts.max_features.clamp(1, d);
        let perm = index::sample(&mut self.rng, d, d).into_vec();
        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, &f) in perm.iter().enumerate() {
            if tried >= k && best.is_some() {
                break;
            }
            if let Some((gain, thr)) = self.best_split(&idx, f, total_w, pos_w) {
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl DecisionTree {
    /// Grows on the rows in `idx` (repeats allowed) with per-row weights `sw`.
    pub fn fit_weighted(
        x: ArrayView2<f64>,
        y: &[f64],
        sw: &[f64],
        idx: Vec<usize>,
        opts: TreeOptions,
        seed: u64,
    ) -> Self {
        let mut g = Grower {
            x,
            y,
            sw,
            opts,
            rng: seed::rng(seed),
            nodes: Vec::new(),
        };
        g.grow(idx, 0);
        Self {
            nodes: g.nodes,
            n_features: x.ncols(),
        }
    }

    pub fn fit(x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights, opts: TreeOptions, seed: u64) -> Result<Self> {
        check_binary(y)?;
        let sw = sample_weights(y, weights);
        Ok(Self::fit_weighted(x, y, &sw, (0..x.nrows()).collect(), opts, seed))
    }

    pub fn leaf_probability(&self, row: ArrayView1<f64>) -> f64 {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf { p_pos } => return p_pos,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn vote(&self, row: ArrayView1<f64>) -> bool {
        self.leaf_probability(row) >= 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestOptions {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub tree: TreeOptions,
}

impl ForestOptions {
    /// 100 bootstrapped trees, `round(sqrt(d))` features per split, unlimited depth.
    pub fn standard(n_features: usize) -> Self {
        Self {
            n_trees: FOREST_TREES,
            bootstrap: true,
            tree: TreeOptions {
                max_features: ((n_features as f64).sqrt().round() as usize).max(1),
                max_depth: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn tree_seed(seed: u64, tree: usize) -> u64 {
        seed::derive_seed(seed, &["tree", &tree.to_string()])
    }

    pub fn fit(x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights, opts: ForestOptions, seed: u64) -> Result<Self> {
        check_binary(y)?;
        let sw = sample_weights(y, weights);
        let n = x.nrows();
        let trees = (0..opts.n_trees.max(1))
            .map(|t| {
                let tree_seed = Self::tree_seed(seed, t);
                let idx = if opts.bootstrap {
                    let mut rng = seed::rng(seed::derive_seed(tree_seed, &["bootstrap"]));
                    let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                    idx.sort_unstable();
                    idx
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit_weighted(x, y, &sw, idx, opts.tree, tree_seed)
            })
            .collect();
        Ok(Self { trees })
    }

    /// Fraction of trees voting positive.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| self.trees.iter().filter(|t| t.vote(row)).count() as f64 / self.trees.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineModel {
    Logreg(LogisticRegression),
    Gnb(GaussianNb),
    Rforest(RandomForest),
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Logreg(_) => BaselineKind::Logreg,
            BaselineModel::Gnb(_) => BaselineKind::Gnb,
            BaselineModel::Rforest(_) => BaselineKind::Rforest,
        }
    }

    fn n_features(&self) -> usize {
        match self {
            BaselineModel::Logreg(m) => m.coef.len(),
            BaselineModel::Gnb(m) => m.means.ncols(),
            BaselineModel::Rforest(m) => m.trees[0].n_features,
        }
    }

    /// Labels (score >= 0.5) and scores.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<(Vec<Label>, Vec<f64>)> {
        if x.ncols() != self.n_features() {
            return Err(BaselineError::FeatureCount {
                expected: self.n_features(),
                found: x.ncols(),
            });
        }
        let scores = match self {
            BaselineModel::Logreg(m) => m.predict_proba(x),
            BaselineModel::Gnb(m) => m.predict_proba(x),
            BaselineModel::Rforest(m) => m.predict_proba(x),
        };
        let labels = scores
            .iter()
            .map(|&s| if s >= 0.5 { Label::Speaker } else { Label::Other })
            .collect();
        Ok((labels, scores))
    }

    pub fn evaluate(&self, data: &MfccDataset) -> Result<MetricsReport> {
        let (pred, _) = self.predict(data.features().view())?;
        let actual: Vec<Label> = data.rows().iter().map(|r| r.label).collect();
        MetricsReport::from_confusion(Confusion::from_predictions(&pred, &actual))
            .map_err(|e| BaselineError::Metrics(e.to_string()))
    }
}

pub fn fit_baseline(kind: BaselineKind, train: &MfccDataset, weights: &ClassWeights, seed: u64) -> Result<BaselineModel> {
    train.require_both_classes()?;
    let (x, y) = (train.features(), train.targets());
    Ok(match kind {
        BaselineKind::Logreg => BaselineModel::Logreg(LogisticRegression::fit(x.view(), &y, weights)?),
        BaselineKind::Gnb => BaselineModel::Gnb(GaussianNb::fit(x.view(), &y, weights)?),
        BaselineKind::Rforest => BaselineModel::Rforest(RandomForest::fit(
            x.view(),
            &y,
            weights,
            ForestOptions::standard(x.ncols()),
            seed,
        )?),
    })
}
