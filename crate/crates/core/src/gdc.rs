//! Sequence compression through capsule routing and graph convolution.
//!
//! A `T×d_m` sequence becomes `J` graph nodes of width `d`: every frame casts
//! one capsule vote per node, dynamic routing mixes the votes into nodes,
//! scaled dot-product scores between nodes give nonnegative edges, and a stack
//! of GCN layers refines the nodes over that graph. The output shape depends
//! only on `J`, never on `T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numcore::{uniform_fan_in, Graph, ParamId, ParamStore, Tensor, Var};

/// How capsule weights are indexed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapsuleMode {
    /// One `d×d_m` matrix per node, reused at every timestep.
    #[default]
    Shared,
    /// One `d×d_m` matrix per (timestep, node) pair, up to `max_len` steps.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdcConfig {
    pub d_in: usize,
    pub d: usize,
    /// Largest node count `J` the capsule weights can serve.
    pub max_nodes: usize,
    /// Largest sequence length in [`CapsuleMode::Full`].
    pub max_len: usize,
    pub routing_iters: usize,
    pub gcn_layers: usize,
    pub mode: CapsuleMode,
}

/// Parameters of one compressor.
#[derive(Clone, Debug)]
pub struct GdcParams {
    pub cfg: GdcConfig,
    /// Capsule weights; `J_max×d×d_m` or `T_max×J_max×d×d_m`. Absent for a
    /// compressor that only refines externally built nodes.
    pub caps: Option<ParamId>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub gcn: Vec<Linear>,
}

impl GdcParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: GdcConfig, rng: &mut R) -> Result<Self> {
        if cfg.d == 0 || cfg.d_in == 0 || cfg.max_nodes == 0 || cfg.routing_iters == 0 {
            return Err(Error::InvalidArgument(format!("degenerate compressor config {cfg:?}")));
        }
        let caps_shape = match cfg.mode {
            CapsuleMode::Shared => vec![cfg.max_nodes, cfg.d, cfg.d_in],
            CapsuleMode::Full => {
                if cfg.max_len == 0 {
                    return Err(Error::InvalidArgument("full capsule mode needs max_len >= 1".into()));
                }
                vec![cfg.max_len, cfg.max_nodes, cfg.d, cfg.d_in]
            }
        };
        let caps = Some(store.insert(format!("{name}.caps.w"), uniform_fan_in(rng, &caps_shape, cfg.d_in))?);
        let (wq, wk, gcn) = Self::graph_params(store, name, &cfg, rng)?;
        Ok(GdcParams { cfg, caps, wq, wk, gcn })
    }

    /// Edge and GCN parameters only, for [`compress_with_nodes`].
    pub fn refiner<R: Rng>(store: &mut ParamStore, name: &str, cfg: GdcConfig, rng: &mut R) -> Result<Self> {
        if cfg.d == 0 {
            return Err(Error::InvalidArgument(format!("degenerate compressor config {cfg:?}")));
        }
        let (wq, wk, gcn) = Self::graph_params(store, name, &cfg, rng)?;
        Ok(GdcParams {
            cfg,
            caps: None,
            wq,
            wk,
            gcn,
        })
    }

    fn graph_params<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &GdcConfig,
        rng: &mut R,
    ) -> Result<(ParamId, ParamId, Vec<Linear>)> {
        let wq = store.insert(format!("{name}.edge.wq"), uniform_fan_in(rng, &[cfg.d, cfg.d], cfg.d))?;
        let wk = store.insert(format!("{name}.edge.wk"), uniform_fan_in(rng, &[cfg.d, cfg.d], cfg.d))?;
        let gcn = (0..cfg.gcn_layers)
            .map(|l| Linear::new(store, &format!("{name}.gcn.{l}"), cfg.d, cfg.d, rng))
            .collect::<Result<_>>()?;
        Ok((wq, wk, gcn))
    }
}

/// Routing logits, coefficients and nodes after the last iteration.
#[derive(Clone, Copy, Debug)]
pub struct RoutingState {
    /// `T×J`.
    pub b: Var,
    /// `T×J`, `softmax_rows(b)`.
    pub r: Var,
    /// `J×d`.
    pub nodes: Var,
}

/// Intermediate values of one compression.
#[derive(Clone, Debug)]
pub struct Compression {
    pub caps: Option<Var>,
    pub routing: Option<RoutingState>,
    pub nodes: Var,
    pub edges: Var,
    pub output: Var,
}

/// Capsules `caps[i, j] = W^{ij}·h_i` as a `T×J×d` tensor.
pub fn build_capsules(g: &mut Graph<'_>, h: Var, params: &GdcParams, j: usize) -> Result<Var> {
    let cfg = &params.cfg;
    let t = g.value(h).rows();
    if j == 0 || j > cfg.max_nodes {
        return Err(Error::InvalidArgument(format!(
            "node count {j} outside 1..={} supported by the capsule weights",
            cfg.max_nodes
        )));
    }
    let caps = params
        .caps
        .ok_or_else(|| Error::InvalidArgument("compressor was built without capsule weights".into()))?;
    let w = g.param(caps);
    match cfg.mode {
        CapsuleMode::Shared => g.capsules_shared(h, w, j),
        CapsuleMode::Full => {
            if t > cfg.max_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence length {t} exceeds max_len {} of full capsule mode",
                    cfg.max_len
                )));
            }
            g.capsules_full(h, w, j)
        }
    }
}

/// Dynamic routing over a `T×J×d` capsule tensor.
///
/// Every iteration sets `r = softmax_rows(b)` and `N = Σ_i r[i,·]·caps[i,·]`;
/// all but the last then add the agreement `⟨caps[i,j], tanh(N_j)⟩` to `b`,
/// so the returned state satisfies `r = softmax_rows(b)`.
pub fn dynamic_routing(g: &mut Graph<'_>, caps: Var, iters: usize) -> Result<RoutingState> {
    dynamic_routing_traced(g, caps, iters).map(|(s, _)| s)
}

/// [`dynamic_routing`] plus the coefficients of every iteration.
pub fn dynamic_routing_traced(g: &mut Graph<'_>, caps: Var, iters: usize) -> Result<(RoutingState, Vec<Var>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let shape = g.value(caps).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            shape,
            reason: "capsules must be T×J×d".into(),
        });
    }
    let mut b = g.constant(Tensor::zeros(&shape[..2]))?;
    let mut history = Vec::with_capacity(iters);
    let mut last = None;
    for it in 0..iters {
        let r = g.softmax_rows(b)?;
        let nodes = g.route_nodes(r, caps)?;
        history.push(r);
        last = Some((r, nodes));
        if it + 1 < iters {
            let squashed = g.tanh(nodes)?;
            let agree = g.route_agreement(caps, squashed)?;
            b = g.add(b, agree)?;
        }
    }
    let (r, nodes) = last.expect("iters >= 1");
    Ok((RoutingState { b, r, nodes }, history))
}

/// `E = relu((N·W_qᵀ)(N·W_kᵀ)ᵀ / √d)`, so `E[j, j']` scores node `j` against `j'`.
pub fn build_edges(g: &mut Graph<'_>, nodes: Var, wq: Var, wk: Var) -> Result<Var> {
    let d = g.value(nodes).cols() as f64;
    let wqt = g.transpose(wq)?;
    let wkt = g.transpose(wk)?;
    let q = g.matmul(nodes, wqt)?;
    let k = g.matmul(nodes, wkt)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / d.sqrt())?;
    g.relu(s)
}

/// One graph convolution over a normalized adjacency `Â`:
/// `relu(Â·H·W + b)`.
pub fn gcn_propagate(g: &mut Graph<'_>, h: Var, a_hat: Var, layer: &Linear) -> Result<Var> {
    let mixed = g.matmul(a_hat, h)?;
    let y = layer.forward(g, mixed)?;
    g.relu(y)
}

/// One graph convolution over raw edges: self-loops are added and the
/// adjacency is symmetrically normalized by its degrees before mixing.
pub fn gcn_layer(g: &mut Graph<'_>, h: Var, edges: Var, layer: &Linear) -> Result<Var> {
    let a_hat = g.gcn_normalize(edges)?;
    gcn_propagate(g, h, a_hat, layer)
}

fn refine(g: &mut Graph<'_>, nodes: Var, params: &GdcParams) -> Result<(Var, Var)> {
    let (wq, wk) = (g.param(params.wq), g.param(params.wk));
    let edges = build_edges(g, nodes, wq, wk)?;
    let mut h = nodes;
    if !params.gcn.is_empty() {
        let a_hat = g.gcn_normalize(edges)?;
        for layer in &params.gcn {
            h = gcn_propagate(g, h, a_hat, layer)?;
        }
    }
    Ok((edges, h))
}

/// Full compression of `h: T×d_m` into `J×d`.
pub fn compress(g: &mut Graph<'_>, h: Var, params: &GdcParams, j: usize) -> Result<Compression> {
    let caps = build_capsules(g, h, params, j)?;
    let routing = dynamic_routing(g, caps, params.cfg.routing_iters)?;
    let (edges, output) = refine(g, routing.nodes, params)?;
    Ok(Compression {
        caps: Some(caps),
        routing: Some(routing),
        nodes: routing.nodes,
        edges,
        output,
    })
}

pub fn compress_sequence(g: &mut Graph<'_>, h: Var, params: &GdcParams, j: usize) -> Result<Var> {
    compress(g, h, params, j).map(|c| c.output)
}

/// Edges and GCN layers over externally built nodes; capsules and routing
/// are skipped.
pub fn compress_with_nodes(g: &mut Graph<'_>, nodes: Var, params: &GdcParams) -> Result<Compression> {
    let (edges, output) = refine(g, nodes, params)?;
    Ok(Compression {
        caps: None,
        routing: None,
        nodes,
        edges,
        output,
    })
}

/// `J×T` averaging matrix: row `j` is the mean over frames
/// `floor(j·T/J) .. ceil((j+1)·T/J)`. Works for `T < J` by reusing frames.
pub fn adaptive_pool_matrix(t: usize, j: usize) -> Result<Tensor> {
    if t == 0 || j == 0 {
        return Err(Error::InvalidArgument(format!("cannot pool {t} frames into {j} slots")));
    }
    let mut data = vec![0.0; j * t];
    for row in 0..j {
        let start = row * t / j;
        let end = ((row + 1) * t).div_ceil(j);
        let w = 1.0 / (end - start) as f64;
        for c in start..end {
            data[row * t + c] = w;
        }
    }
    Tensor::new(vec![j, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(d_in: usize, d: usize, mode: CapsuleMode) -> GdcConfig {
        GdcConfig {
            d_in,
            d,
            max_nodes: 4,
            max_len: 12,
            routing_iters: 3,
            gcn_layers: 2,
            mode,
        }
    }

    fn setup(c: GdcConfig, seed: u64) -> (ParamStore, GdcParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GdcParams::new(&mut store, "gdc", c, &mut rng).unwrap();
        (store, p)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        *store.get_mut(id) = t;
    }

    #[test]
    fn identity_capsules_copy_frames() {
        let (mut store, p) = setup(cfg(3, 3, CapsuleMode::Shared), 0);
        let eye: Vec<f64> = (0..4).flat_map(|_| Tensor::eye(3).into_data()).collect();
        set(&mut store, p.caps.unwrap(), Tensor::new(vec![4, 3, 3], eye).unwrap());
        let h = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]);
        let mut g = Graph::with_params(&store);
        let hv = g.constant(h.clone()).unwrap();
        let caps = build_capsules(&mut g, hv, &p, 3).unwrap();
        let c = g.value(caps);
        assert_eq!(c.shape(), &[2, 3, 3]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(&c.data()[(i * 3 + j) * 3..(i * 3 + j + 1) * 3], h.row(i));
            }
        }
    }

    #[test]
    fn zero_sequence_gives_zero_capsules() {
        for mode in [CapsuleMode::Shared, CapsuleMode::Full] {
            let (store, p) = setup(cfg(3, 2, mode), 1);
            let mut g = Graph::with_params(&store);
            let hv = g.constant(Tensor::zeros(&[5, 3])).unwrap();
            let caps = build_capsules(&mut g, hv, &p, 4).unwrap();
            assert!(g.value(caps).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn hand_set_scalar_capsules() {
        // T = 2, J = 1, d = d_m = 1; full mode gives each step its own weight.
        let (mut store, p) = setup(cfg(1, 1, CapsuleMode::Full), 2);
        let mut w = Tensor::zeros(&[12, 4, 1, 1]);
        w.data_mut()[0] = 2.0;
        w.data_mut()[4] = -3.0;
        set(&mut store, p.caps.unwrap(), w);
        let mut g = Graph::with_params(&store);
        let hv = g.constant(Tensor::column_vector(&[0.5, 1.5])).unwrap();
        let caps = build_capsules(&mut g, hv, &p, 1).unwrap();
        assert_eq!(g.value(caps).data(), &[1.0, -4.5]);
    }

    #[test]
    fn full_mode_rejects_long_sequences() {
        let (store, p) = setup(cfg(2, 2, CapsuleMode::Full), 3);
        let mut g = Graph::with_params(&store);
        let hv = g.constant(Tensor::zeros(&[13, 2])).unwrap();
        assert!(build_capsules(&mut g, hv, &p, 2).is_err());
        let hv = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(build_capsules(&mut g, hv, &p, 5).is_err());
    }

    #[test]
    fn routing_starts_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let caps = g.constant(random(&mut rng, &[5, 3, 2])).unwrap();
        let (_, hist) = dynamic_routing_traced(&mut g, caps, 1).unwrap();
        assert!(g.value(hist[0]).data().iter().all(|&x| x == 1.0 / 3.0));
    }

    #[test]
    fn single_frame_nodes_are_scaled_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random(&mut rng, &[1, 4, 3]);
        let mut g = Graph::new();
        let caps = g.constant(c.clone()).unwrap();
        let s = dynamic_routing(&mut g, caps, 1).unwrap();
        let expect: Vec<f64> = c.data().iter().map(|x| x / 4.0).collect();
        assert_eq!(g.value(s.nodes).data(), &expect[..]);
    }

    #[test]
    fn agreeing_capsule_gains_weight() {
        // Capsule (0,0) points along node 0's direction and (0,1) against
        // node 1's, so ⟨caps, tanh(N)⟩ is largest at j = 0 every iteration.
        let c = Tensor::new(vec![2, 2, 2], vec![2.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let caps = g.constant(c).unwrap();
        let (_, hist) = dynamic_routing_traced(&mut g, caps, 5).unwrap();
        let r00: Vec<f64> = hist.iter().map(|&r| g.value(r).at(0, 0)).collect();
        assert_eq!(r00[0], 0.5);
        for w in r00.windows(2) {
            assert!(w[1] > w[0], "{r00:?}");
        }
    }

    #[test]
    fn returned_state_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let caps = g.constant(random(&mut rng, &[6, 3, 4])).unwrap();
        let s = dynamic_routing(&mut g, caps, 3).unwrap();
        let expect = g.value(s.b).softmax_rows().unwrap();
        assert_eq!(g.value(s.r).data(), expect.data());
    }

    #[test]
    fn edges_zero_nodes_and_identity_gram() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::eye(3)).unwrap();
        let zero = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let e = build_edges(&mut g, zero, eye, eye).unwrap();
        assert!(g.value(e).data().iter().all(|&x| x == 0.0));

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let n = g.constant(Tensor::from_rows(&[[s, s, 0.0], [s, -s, 0.0], [0.0, 0.0, 1.0]])).unwrap();
        let e = build_edges(&mut g, n, eye, eye).unwrap();
        let expect = Tensor::eye(3).map(|x| x / 3f64.sqrt());
        assert!(g.value(e).max_abs_diff(&expect) < 1e-15);

        let n = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])).unwrap();
        let e = build_edges(&mut g, n, eye, eye).unwrap();
        assert_eq!(g.value(e).at(0, 1), 0.0);
        assert!(g.value(e).at(0, 0) > 0.0);
    }

    fn gcn_with(e: Tensor, h: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let layer = Linear {
            w: store.insert("w", w).unwrap(),
            b: store.insert("b", b).unwrap(),
        };
        let mut g = Graph::with_params(&store);
        let (ev, hv) = (g.constant(e).unwrap(), g.constant(h).unwrap());
        let y = gcn_layer(&mut g, hv, ev, &layer).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn gcn_isolated_nodes_reduce_to_dense_layer() {
        let h = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let w = Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        let b = Tensor::row_vector(&[0.1, -0.2]);
        let y = gcn_with(Tensor::zeros(&[2, 2]), h.clone(), w.clone(), b.clone());
        let expect = h.matmul(&w).unwrap();
        let expect = Tensor::from_rows(&[
            [(expect.at(0, 0) + 0.1).max(0.0), (expect.at(0, 1) - 0.2).max(0.0)],
            [(expect.at(1, 0) + 0.1).max(0.0), (expect.at(1, 1) - 0.2).max(0.0)],
        ]);
        assert!(y.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn gcn_single_node_with_self_edge() {
        let y = gcn_with(
            Tensor::from_rows(&[[1.0]]),
            Tensor::from_rows(&[[3.0, -1.0]]),
            Tensor::from_rows(&[[2.0], [1.0]]),
            Tensor::row_vector(&[0.25]),
        );
        // Ẽ = [2] and D = [2], so Â = 2^{-1/2}·2·2^{-1/2} = 1.
        assert!((y.item() - (3.0 * 2.0 - 1.0 + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn gcn_zero_weights_give_zero() {
        let y = gcn_with(
            Tensor::from_rows(&[[0.5, 2.0], [2.0, 0.0]]),
            Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[3]),
        );
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_ignores_sequence_length() {
        let (store, p) = setup(cfg(5, 4, CapsuleMode::Shared), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in [5, 50, 500] {
            let mut g = Graph::with_params(&store);
            let hv = g.constant(random(&mut rng, &[t, 5])).unwrap();
            let y = compress_sequence(&mut g, hv, &p, 3).unwrap();
            assert_eq!(g.value(y).shape(), &[3, 4]);
        }
    }

    #[test]
    fn zero_gcn_layers_return_routed_nodes() {
        let c = GdcConfig {
            gcn_layers: 0,
            ..cfg(3, 3, CapsuleMode::Shared)
        };
        let (store, p) = setup(c, 9);
        let mut g = Graph::with_params(&store);
        let hv = g.constant(Tensor::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])).unwrap();
        let out = compress(&mut g, hv, &p, 2).unwrap();
        assert_eq!(out.output, out.nodes);
    }

    #[test]
    fn repeated_frames_keep_routing_uniform_over_time() {
        let (store, p) = setup(cfg(3, 4, CapsuleMode::Shared), 10);
        let frame = [0.3, -1.2, 0.7];
        let mut g = Graph::with_params(&store);
        let hv = g.constant(Tensor::from_rows(&[frame; 6])).unwrap();
        let out = compress(&mut g, hv, &p, 3).unwrap();
        let r = g.value(out.routing.unwrap().r).clone();
        for i in 1..6 {
            assert_eq!(r.row(i), r.row(0));
        }
        // Σ_i r[i,j]·c_j = 6·r[0,j]·c_j with every frame's capsule equal to c_j.
        let caps = g.value(out.caps.unwrap()).clone();
        let nodes = g.value(out.nodes);
        for j in 0..3 {
            for k in 0..4 {
                let expect = 6.0 * r.at(0, j) * caps.data()[j * 4 + k];
                assert!((nodes.at(j, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_matrix_rows_average() {
        let p = adaptive_pool_matrix(5, 2).unwrap();
        assert_eq!(p.row(0), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let p = adaptive_pool_matrix(2, 4).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert_eq!(p.row(3), &[0.0, 1.0]);
        assert_eq!(adaptive_pool_matrix(8, 4).unwrap().row(1), &[0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn compression_passes_grad_check() {
        for mode in [CapsuleMode::Shared, CapsuleMode::Full] {
            let (mut store, p) = setup(cfg(3, 4, mode), 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let h = store.insert("h", random(&mut rng, &[6, 3])).unwrap();
            let probe = random(&mut rng, &[4, 4]);
            let report = grad_check(&store, 1e-5, 1e-4, |g| {
                let hv = g.param(h);
                let y = compress_sequence(g, hv, &p, 4)?;
                let w = g.constant(probe.clone())?;
                let m = g.mul(y, w)?;
                g.sum(m)
            })
            .unwrap();
            assert!(report.passed(), "{mode:?}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn routing_rows_stay_on_simplex(seed in any::<u64>(), t in 1usize..8, j in 1usize..5, iters in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let caps = g.constant(random(&mut rng, &[t, j, 3]).map(|x| 3.0 * x)).unwrap();
            let (_, hist) = dynamic_routing_traced(&mut g, caps, iters).unwrap();
            for r in hist {
                let r = g.value(r);
                for i in 0..t {
                    prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn gcn_output_is_finite_for_nonnegative_edges(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random(&mut rng, &[n, n]).map(|x| if x < 0.0 { 0.0 } else { 100.0 * x });
            let y = gcn_with(e, random(&mut rng, &[n, 3]), random(&mut rng, &[3, 2]), random(&mut rng, &[2]));
            prop_assert!(y.is_finite());
        }
    }
}
