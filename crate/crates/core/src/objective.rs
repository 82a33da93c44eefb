//! Training losses and evaluation metrics.
//!
//! The contrastive term maps the fused vector `h_p` back toward each unimodal
//! vector `h_m` through a learned map `F_m`, scores every pair in the batch by
//! cosine similarity and applies InfoNCE with the matching pair as positive.
//! The task loss is MAE plus `α` times the sum of the three InfoNCE terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mlp2;
use crate::numcore::{Graph, ParamStore, Var};
use crate::Modality;

/// Guard for normalizing zero vectors.
pub const NORM_EPS: f64 = 1e-8;

/// `S[i, k] = ⟨F(h_p[i])/‖F(h_p[i])‖, h_m[k]/‖h_m[k]‖⟩` for `K×d` inputs.
pub fn similarity_scores(g: &mut Graph<'_>, h_m: Var, h_p: Var, f: &Mlp2) -> Result<Var> {
    let (km, kp) = (g.value(h_m).rows(), g.value(h_p).rows());
    if km != kp {
        return Err(Error::dim("similarity_scores", g.value(h_m).shape(), g.value(h_p).shape()));
    }
    let mapped = f.forward(g, h_p)?;
    cosine_matrix(g, mapped, h_m)
}

/// Row-normalized `a·bᵀ`.
pub fn cosine_matrix(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let a = g.normalize_rows(a, NORM_EPS)?;
    let b = g.normalize_rows(b, NORM_EPS)?;
    let bt = g.transpose(b)?;
    g.matmul(a, bt)
}

/// `−(1/K) Σ_i log softmax(S[i,·]/τ)[i]`. The positive sits in its own
/// denominator, so the loss is nonnegative, and it is at most `ln K` when
/// every positive is the largest score of its row.
pub fn infonce_loss(g: &mut Graph<'_>, s: Var, tau: f64) -> Result<Var> {
    let shape = g.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape {
            shape,
            reason: "score matrix must be square".into(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let scaled = if tau == 1.0 { s } else { g.scale(s, 1.0 / tau)? };
    let log_p = g.log_softmax_rows(scaled)?;
    let diag = g.diag(log_p)?;
    let m = g.mean(diag)?;
    g.scale(m, -1.0)
}

/// One reverse map `F_m: d → d → d` per modality, indexed by
/// [`Modality::index`].
#[derive(Clone, Debug)]
pub struct NceHeads {
    pub f: [Mlp2; 3],
}

impl NceHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let mut f = Vec::with_capacity(3);
        for m in Modality::PRIORITY {
            f.push(Mlp2::new(store, &format!("{name}.f.{}", m.code()), [d, d, d], false, rng)?);
        }
        Ok(NceHeads { f: [f[0], f[1], f[2]] })
    }
}

/// `L^{p,l} + L^{p,a} + L^{p,v}` for `K×d` batches; `h_m` indexed by
/// [`Modality::index`].
pub fn nce_total(g: &mut Graph<'_>, h_p: Var, h_m: [Var; 3], heads: &NceHeads, tau: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for m in Modality::PRIORITY {
        let s = similarity_scores(g, h_m[m.index()], h_p, &heads.f[m.index()])?;
        terms.push(infonce_loss(g, s, tau)?);
    }
    g.add_all(&terms)
}

/// Mean absolute error of two equally shaped tensors.
pub fn regression_loss(g: &mut Graph<'_>, pred: Var, truth: Var) -> Result<Var> {
    let diff = g.sub(pred, truth)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

/// `L_reg + α·L_NCE`.
pub fn total_loss(g: &mut Graph<'_>, reg: Var, nce: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(reg);
    }
    let weighted = g.scale(nce, alpha)?;
    g.add(reg, weighted)
}

/// Regression quality plus accuracies of binned scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub corr: f64,
    /// Non-negative vs negative, all samples.
    pub acc2_nonneg: f64,
    /// Positive vs negative, zero-labelled samples excluded.
    pub acc2_posneg: f64,
    pub f1_nonneg: f64,
    pub f1_posneg: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub acc7: f64,
    /// Set when either series has zero variance; `corr` is then 0.
    #[serde(skip)]
    pub corr_degenerate: bool,
}

/// Edges of the three-way bins on the `[-1, 1]` scale.
pub const ACC3_EDGE: f64 = 0.1;
/// Inner and outer edges of the five-way bins on the `[-1, 1]` scale.
pub const ACC5_EDGES: [f64; 2] = [0.1, 0.7];

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let constant = |v: &[f64]| v.iter().all(|e| *e == v[0]);
    if x.len() < 2 || constant(x) || constant(y) || sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Weighted F1 of a binary labelling; each class's F1 is weighted by its
/// support among the true labels.
fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let support = tp + fneg;
        if support == 0 {
            continue;
        }
        let denom = 2 * tp + fp + fneg;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        total += f1 * support as f64 / truth.len() as f64;
    }
    total
}

fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn bin3(x: f64) -> i8 {
    if x < -ACC3_EDGE {
        0
    } else if x <= ACC3_EDGE {
        1
    } else {
        2
    }
}

fn bin5(x: f64) -> i8 {
    let [inner, outer] = ACC5_EDGES;
    if x < -outer {
        0
    } else if x < -inner {
        1
    } else if x <= inner {
        2
    } else if x <= outer {
        3
    } else {
        4
    }
}

/// Metrics of predictions against labels drawn from `label_range`.
///
/// MAE, correlation and both binary conventions use the raw scores with
/// threshold 0. Acc7 maps `label_range` linearly onto `[-3, 3]`, clamps and
/// rounds half to even. Acc3 and Acc5 map onto `[-1, 1]` and bin with
/// [`ACC3_EDGE`] and [`ACC5_EDGES`].
pub fn compute_metrics(pred: &[f64], truth: &[f64], label_range: [f64; 2]) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metrics need equal, nonzero lengths (got {} and {})",
            pred.len(),
            truth.len()
        )));
    }
    let [lo, hi] = label_range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("label range [{lo}, {hi}] is empty")));
    }
    // Scaling before the division keeps range endpoints and bin edges exact.
    let scaled = |x: f64, s: f64| (s * (2.0 * x - (lo + hi)) / (hi - lo)).clamp(-s, s);
    let unit = |x: f64| scaled(x, 1.0);

    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    let corr = pearson(pred, truth);

    let p_nn: Vec<bool> = pred.iter().map(|&x| x >= 0.0).collect();
    let t_nn: Vec<bool> = truth.iter().map(|&x| x >= 0.0).collect();
    let keep: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != 0.0).collect();
    let p_pn: Vec<bool> = keep.iter().map(|&i| pred[i] > 0.0).collect();
    let t_pn: Vec<bool> = keep.iter().map(|&i| truth[i] > 0.0).collect();

    let seven = |x: f64| scaled(x, 3.0).round_ties_even() as i8;
    let p7: Vec<i8> = pred.iter().map(|&x| seven(x)).collect();
    let t7: Vec<i8> = truth.iter().map(|&x| seven(x)).collect();
    let p3: Vec<i8> = pred.iter().map(|&x| bin3(unit(x))).collect();
    let t3: Vec<i8> = truth.iter().map(|&x| bin3(unit(x))).collect();
    let p5: Vec<i8> = pred.iter().map(|&x| bin5(unit(x))).collect();
    let t5: Vec<i8> = truth.iter().map(|&x| bin5(unit(x))).collect();

    Ok(MetricReport {
        mae,
        corr: corr.unwrap_or(0.0),
        acc2_nonneg: accuracy(&p_nn, &t_nn),
        acc2_posneg: accuracy(&p_pn, &t_pn),
        f1_nonneg: weighted_f1(&p_nn, &t_nn),
        f1_posneg: weighted_f1(&p_pn, &t_pn),
        acc3: accuracy(&p3, &t3),
        acc5: accuracy(&p5, &t5),
        acc7: accuracy(&p7, &t7),
        corr_degenerate: corr.is_none(),
    })
}
