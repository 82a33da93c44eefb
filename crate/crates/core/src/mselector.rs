//! Per-sample choice of a primary modality.
//!
//! Each sequence is pooled to one vector by attention over its timesteps, an
//! MLP scores the concatenation `(h_a, h_l, h_v)`, and a softmax turns the
//! scores into weights `(w_a, w_t, w_v)`. The heaviest modality becomes the
//! primary `p`; the other two become auxiliaries `a1`, `a2` by descending
//! weight. Every sequence is scaled by its own weight.
//!
//! `w_t` is the language weight; the text channel and the language modality
//! are the same thing.

use rand::Rng;

use crate::error::Result;
use crate::layers::Mlp2;
use crate::numcore::{uniform_fan_in, Graph, ParamId, ParamStore, Var};
use crate::Modality;

/// Order of the MLP inputs and of the weight vector.
pub const WEIGHT_ORDER: [Modality; 3] = [Modality::Acoustic, Modality::Language, Modality::Visual];

/// Position of `m` in [`WEIGHT_ORDER`].
pub fn weight_slot(m: Modality) -> usize {
    match m {
        Modality::Acoustic => 0,
        Modality::Language => 1,
        Modality::Visual => 2,
    }
}

/// Attention pooling parameter `w ∈ R^d`, stored as a `d×1` column.
#[derive(Clone, Copy, Debug)]
pub struct Aggregator {
    pub w: ParamId,
}

impl Aggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let w = store.insert(name, uniform_fan_in(rng, &[d, 1], d))?;
        Ok(Aggregator { w })
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let w = g.param(self.w);
        adaptive_aggregate(g, h, w)
    }
}

/// `a = softmax((H·w)/√d)ᵀ` over timesteps, then `a·H` (`1×d`).
pub fn adaptive_aggregate(g: &mut Graph<'_>, h: Var, w: Var) -> Result<Var> {
    let d = g.value(h).cols() as f64;
    let scores = g.matmul(h, w)?;
    let scores = g.scale(scores, 1.0 / d.sqrt())?;
    let scores = g.transpose(scores)?;
    let a = g.softmax_rows(scores)?;
    g.matmul(a, h)
}

/// Softmax of the MLP scores of `(h_a, h_l, h_v)`, as a `1×3` row in
/// [`WEIGHT_ORDER`].
pub fn modality_weights(g: &mut Graph<'_>, h_a: Var, h_l: Var, h_v: Var, mlp: &Mlp2) -> Result<Var> {
    let cat = g.concat_cols(&[h_a, h_l, h_v])?;
    let logits = mlp.forward(g, cat)?;
    g.softmax_rows(logits)
}

/// `[p, a1, a2]` for weights in [`WEIGHT_ORDER`]: descending weight, ties
/// broken by the priority language, acoustic, visual.
pub fn rank_modalities(weights: [f64; 3]) -> [Modality; 3] {
    let mut order = Modality::PRIORITY;
    // Stable sort keeps priority order among equal weights.
    order.sort_by(|&x, &y| weights[weight_slot(y)].total_cmp(&weights[weight_slot(x)]));
    order
}

#[derive(Clone, Debug)]
pub struct MSelectorParams {
    /// Pooling per modality, indexed by [`Modality::index`].
    pub agg: [Aggregator; 3],
    /// Absent when the primary modality is fixed.
    pub mlp: Option<Mlp2>,
}

impl MSelectorParams {
    /// The last MLP layer starts at zero, so initial weights are exactly 1/3.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, with_mlp: bool, rng: &mut R) -> Result<Self> {
        let mut agg = Vec::with_capacity(3);
        for m in Modality::PRIORITY {
            agg.push(Aggregator::new(store, &format!("{name}.agg.{}", m.code()), d, rng)?);
        }
        let mlp = if with_mlp {
            Some(Mlp2::new(store, &format!("{name}.mlp"), [3 * d, d, 3], true, rng)?)
        } else {
            None
        };
        Ok(MSelectorParams {
            agg: [agg[0], agg[1], agg[2]],
            mlp,
        })
    }
}

/// Weights, roles and scaled sequences of one sample.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    /// `(w_a, w_t, w_v)`.
    pub weights: [f64; 3],
    /// `1×3` weights in the graph; `None` when the primary is fixed.
    pub weights_var: Option<Var>,
    /// `[p, a1, a2]`.
    pub roles: [Modality; 3],
    pub h_p: Var,
    pub h_a1: Var,
    pub h_a2: Var,
    /// Pooled unweighted sequences, indexed by [`Modality::index`].
    pub pooled: [Var; 3],
}

impl SelectionOutcome {
    pub fn primary(&self) -> Modality {
        self.roles[0]
    }

    pub fn weight(&self, m: Modality) -> f64 {
        self.weights[weight_slot(m)]
    }
}

fn pool_all(g: &mut Graph<'_>, params: &MSelectorParams, seqs: [Var; 3]) -> Result<[Var; 3]> {
    Ok([
        params.agg[0].forward(g, seqs[0])?,
        params.agg[1].forward(g, seqs[1])?,
        params.agg[2].forward(g, seqs[2])?,
    ])
}

/// Learned selection over `seqs` indexed by [`Modality::index`].
///
/// Panics if `params` has no MLP.
pub fn select_primary(g: &mut Graph<'_>, params: &MSelectorParams, seqs: [Var; 3]) -> Result<SelectionOutcome> {
    let mlp = params.mlp.as_ref().expect("selector built without an MLP");
    let pooled = pool_all(g, params, seqs)?;
    let [h_l, h_a, h_v] = pooled;
    let w = modality_weights(g, h_a, h_l, h_v, mlp)?;
    let wv = g.value(w).data();
    let weights = [wv[0], wv[1], wv[2]];
    let roles = rank_modalities(weights);
    let mut scaled = Vec::with_capacity(3);
    for m in roles {
        let s = g.slice_cols(w, weight_slot(m), 1)?;
        scaled.push(g.mul_scalar(seqs[m.index()], s)?);
    }
    Ok(SelectionOutcome {
        weights,
        weights_var: Some(w),
        roles,
        h_p: scaled[0],
        h_a1: scaled[1],
        h_a2: scaled[2],
        pooled,
    })
}

/// Selection with a fixed primary: its weight is 1, the others 0, and all
/// three sequences pass unscaled. Auxiliaries follow priority order.
pub fn fixed_selection(
    g: &mut Graph<'_>,
    params: &MSelectorParams,
    primary: Modality,
    seqs: [Var; 3],
) -> Result<SelectionOutcome> {
    let pooled = pool_all(g, params, seqs)?;
    let mut weights = [0.0; 3];
    weights[weight_slot(primary)] = 1.0;
    let mut roles = [primary; 3];
    let mut k = 1;
    for m in Modality::PRIORITY {
        if m != primary {
            roles[k] = m;
            k += 1;
        }
    }
    Ok(SelectionOutcome {
        weights,
        weights_var: None,
        roles,
        h_p: seqs[roles[0].index()],
        h_a1: seqs[roles[1].index()],
        h_a2: seqs[roles[2].index()],
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Modality::{Acoustic as A, Language as L, Visual as V};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn aggregate(h: Tensor, w: Tensor) -> Tensor {
        let mut g = Graph::new();
        let (hv, wv) = (g.constant(h).unwrap(), g.constant(w).unwrap());
        let y = adaptive_aggregate(&mut g, hv, wv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn equal_scores_pool_to_column_mean() {
        let h = Tensor::from_rows(&[[1.0, 2.0], [3.0, -2.0], [5.0, 3.0]]);
        let y = aggregate(h, Tensor::zeros(&[2, 1]));
        assert!(y.max_abs_diff(&Tensor::row_vector(&[3.0, 1.0])) < 1e-15);
    }

    #[test]
    fn single_step_pools_to_itself() {
        let h = Tensor::from_rows(&[[0.25, -4.0, 7.5]]);
        let y = aggregate(h.clone(), Tensor::column_vector(&[1.0, 2.0, 3.0]));
        assert_eq!(y.data(), h.data());
    }

    #[test]
    fn two_step_scores_zero_and_ln2() {
        // With d = 1, w = 1: scores are the entries themselves, ln 2 vs 0
        // after a shift, so the attention is (1/3, 2/3).
        let ln2 = std::f64::consts::LN_2;
        let h = Tensor::from_rows(&[[0.0], [ln2]]);
        let y = aggregate(h, Tensor::from_rows(&[[1.0]]));
        assert!((y.item() - 2.0 / 3.0 * ln2).abs() < 1e-15);

        // d = 2: scores (0, ln 2) need w scaled by √2.
        let h = Tensor::from_rows(&[[0.0, 4.0], [ln2, 1.0]]);
        let w = Tensor::column_vector(&[2f64.sqrt(), 0.0]);
        let y = aggregate(h.clone(), w);
        let expect = [h.at(0, 0) / 3.0 + 2.0 * h.at(1, 0) / 3.0, 4.0 / 3.0 + 2.0 / 3.0];
        assert!(y.max_abs_diff(&Tensor::row_vector(&expect)) < 1e-15);
    }

    fn weights_from_logits(logits: [f64; 3]) -> Tensor {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row_vector(&logits)).unwrap();
        let w = g.softmax_rows(z).unwrap();
        g.value(w).clone()
    }

    #[test]
    fn logits_to_weights() {
        assert!(weights_from_logits([0.7; 3]).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-16));
        let w = weights_from_logits([0.0, std::f64::consts::LN_2, 0.0]);
        assert!(w.max_abs_diff(&Tensor::row_vector(&[0.25, 0.5, 0.25])) < 1e-15);
    }

    #[test]
    fn fresh_selector_is_uniform() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = MSelectorParams::new(&mut store, "msel", d, true, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let seqs = [0, 1, 2].map(|_| g.constant(random(&mut rng, &[5, d])).unwrap());
        let out = select_primary(&mut g, &p, seqs).unwrap();
        assert_eq!(out.weights, [1.0 / 3.0; 3]);
        assert_eq!(out.roles, [L, A, V]);
    }

    #[test]
    fn ranking_follows_weights_then_priority() {
        assert_eq!(rank_modalities([0.5, 0.3, 0.2]), [A, L, V]);
        assert_eq!(rank_modalities([1.0 / 3.0; 3]), [L, A, V]);
        assert_eq!(rank_modalities([0.2, 0.2, 0.6]), [V, L, A]);
        assert_eq!(rank_modalities([0.4, 0.2, 0.4]), [A, V, L]);
    }

    fn selector_with_logits(logits: [f64; 3]) -> (ParamStore, MSelectorParams) {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = MSelectorParams::new(&mut store, "msel", d, true, &mut rng).unwrap();
        *store.get_mut(p.mlp.unwrap().second.b) = Tensor::row_vector(&logits);
        (store, p)
    }

    #[test]
    fn sequences_are_scaled_by_their_own_weight() {
        let ln = |x: f64| x.ln();
        let (store, p) = selector_with_logits([ln(5.0), ln(3.0), ln(2.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[3, 2])).collect();
        let mut g = Graph::with_params(&store);
        let seqs = [0, 1, 2].map(|i| g.constant(raw[i].clone()).unwrap());
        let out = select_primary(&mut g, &p, seqs).unwrap();
        assert!((out.weights[0] - 0.5).abs() < 1e-15 && (out.weights[1] - 0.3).abs() < 1e-15);
        assert_eq!(out.roles, [A, L, V]);
        let check = |v: Var, m: Modality| {
            let expect = raw[m.index()].map(|x| x * out.weight(m));
            assert_eq!(g.value(v).data(), expect.data());
        };
        check(out.h_p, A);
        check(out.h_a1, L);
        check(out.h_a2, V);
    }

    #[test]
    fn fixed_primary_passes_sequences_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = MSelectorParams::new(&mut store, "msel", 3, false, &mut rng).unwrap();
        assert!(p.mlp.is_none());
        let mut g = Graph::with_params(&store);
        let seqs = [0, 1, 2].map(|_| g.constant(random(&mut rng, &[2, 3])).unwrap());
        let out = fixed_selection(&mut g, &p, V, seqs).unwrap();
        assert_eq!(out.weights, [0.0, 0.0, 1.0]);
        assert_eq!(out.roles, [V, L, A]);
        assert_eq!((out.h_p, out.h_a1, out.h_a2), (seqs[2], seqs[0], seqs[1]));
    }

    #[test]
    fn selector_passes_grad_check() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = MSelectorParams::new(&mut store, "msel", d, true, &mut rng).unwrap();
        // Move off the uniform start so the ranking is strict.
        let last = p.mlp.unwrap().second;
        *store.get_mut(last.w) = random(&mut rng, &[d, 3]);
        *store.get_mut(last.b) = Tensor::row_vector(&[0.3, -0.2, 0.1]);
        let raw: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[4, d])).collect();
        let probes: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[4, d])).collect();
        let report = grad_check(&store, 1e-5, 1e-4, |g| {
            let seqs = [0, 1, 2].map(|i| g.constant(raw[i].clone()).unwrap());
            let out = select_primary(g, &p, seqs)?;
            let mut terms = Vec::new();
            for (v, probe) in [out.h_p, out.h_a1, out.h_a2].into_iter().zip(&probes) {
                let w = g.constant(probe.clone())?;
                let m = g.mul(v, w)?;
                terms.push(g.sum(m)?);
            }
            for v in out.pooled {
                terms.push(g.sum(v)?);
            }
            g.add_all(&terms)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn weights_stay_on_simplex(seed in any::<u64>(), scale in 0.1f64..4.0) {
            let d = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let p = MSelectorParams::new(&mut store, "msel", d, true, &mut rng).unwrap();
            let last = p.mlp.unwrap().second;
            *store.get_mut(last.w) = random(&mut rng, &[d, 3]).map(|x| x * scale);
            let mut g = Graph::with_params(&store);
            let seqs = [0, 1, 2].map(|_| g.constant(random(&mut rng, &[3, d]).map(|x| x * scale)).unwrap());
            let out = select_primary(&mut g, &p, seqs).unwrap();
            prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(out.weights.iter().all(|&w| w > 0.0 && w < 1.0));
            let best = out.weights.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(out.weight(out.primary()), best);
        }

        #[test]
        fn common_logit_shift_changes_nothing(l in prop::array::uniform3(-5.0f64..5.0), c in -50.0f64..50.0) {
            let base = weights_from_logits(l);
            let shifted = weights_from_logits(l.map(|x| x + c));
            prop_assert!(base.max_abs_diff(&shifted) < 1e-12);
            let gaps = [(l[0] - l[1]).abs(), (l[1] - l[2]).abs(), (l[0] - l[2]).abs()];
            prop_assume!(gaps.iter().all(|&g| g > 1e-9));
            let w = |t: &Tensor| [t.data()[0], t.data()[1], t.data()[2]];
            prop_assert_eq!(rank_modalities(w(&base))[0], rank_modalities(w(&shifted))[0]);
        }
    }
}
