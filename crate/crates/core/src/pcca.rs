//! Cross-attention stack centred on the primary modality.
//!
//! Per layer the auxiliaries `a1`, `a2` inject into the primary through
//! cross-attention, the primary attends to itself, and the fused primary
//! flows back into each auxiliary. Auxiliaries never attend to each other.
//! The last layer keeps only the flow into the primary; its auxiliary
//! outputs are its inputs. No positional encodings are used, so every block
//! is equivariant under a joint permutation of rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Mlp2};
use crate::numcore::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PccaConfig {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    /// Inner width of the feed-forward blocks is `ff_mult·d`.
    pub ff_mult: usize,
}

/// Scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }
}

/// Attention output plus the per-head weight matrices (queries × keys).
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Queries from `query_source`, keys and values from `kv_source`; softmax
/// over key positions.
pub fn cross_attention(g: &mut Graph<'_>, kv_source: Var, query_source: Var, p: &Attention) -> Result<Attended> {
    let d = g.value(query_source).cols();
    if g.value(kv_source).cols() != d {
        return Err(Error::dim("cross_attention", g.value(kv_source).shape(), g.value(query_source).shape()));
    }
    let q = p.q.forward(g, query_source)?;
    let k = p.k.forward(g, kv_source)?;
    let v = p.v.forward(g, kv_source)?;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows(s)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = p.o.forward(g, cat)?;
    Ok(Attended { output, weights })
}

pub fn self_attention(g: &mut Graph<'_>, h: Var, p: &Attention) -> Result<Attended> {
    cross_attention(g, h, h, p)
}

/// Role of a sequence inside the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Primary,
    Aux1,
    Aux2,
}

/// One attention block: `from` supplies keys and values, `to` the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionEdge {
    pub layer: usize,
    pub from: Role,
    pub to: Role,
}

/// Flow from the fused primary back into the auxiliaries.
#[derive(Clone, Debug)]
pub struct BackFlow {
    pub ca: [Attention; 2],
    pub ln_ff: [LayerNorm; 2],
    pub ff: [Mlp2; 2],
}

#[derive(Clone, Debug)]
pub struct PccaLayerParams {
    pub ln_p: LayerNorm,
    pub ln_a: [LayerNorm; 2],
    pub ca_to_p: [Attention; 2],
    pub sa_p: Attention,
    pub ln_ff_p: LayerNorm,
    pub ff_p: Mlp2,
    /// `None` in the final layer.
    pub back: Option<BackFlow>,
}

impl PccaLayerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &PccaConfig, is_final: bool, rng: &mut R) -> Result<Self> {
        let d = cfg.d;
        let ff = [d, cfg.ff_mult * d, d];
        let ln_p = LayerNorm::new(store, &format!("{name}.ln_p"), d)?;
        let ln_a = [
            LayerNorm::new(store, &format!("{name}.ln_a1"), d)?,
            LayerNorm::new(store, &format!("{name}.ln_a2"), d)?,
        ];
        let ca_to_p = [
            Attention::new(store, &format!("{name}.ca_a1_p"), d, cfg.heads, rng)?,
            Attention::new(store, &format!("{name}.ca_a2_p"), d, cfg.heads, rng)?,
        ];
        let sa_p = Attention::new(store, &format!("{name}.sa_p"), d, cfg.heads, rng)?;
        let back = if is_final {
            None
        } else {
            Some(BackFlow {
                ca: [
                    Attention::new(store, &format!("{name}.ca_p_a1"), d, cfg.heads, rng)?,
                    Attention::new(store, &format!("{name}.ca_p_a2"), d, cfg.heads, rng)?,
                ],
                ln_ff: [
                    LayerNorm::new(store, &format!("{name}.ln_ff_a1"), d)?,
                    LayerNorm::new(store, &format!("{name}.ln_ff_a2"), d)?,
                ],
                ff: [
                    Mlp2::new(store, &format!("{name}.ff_a1"), ff, false, rng)?,
                    Mlp2::new(store, &format!("{name}.ff_a2"), ff, false, rng)?,
                ],
            })
        };
        let ln_ff_p = LayerNorm::new(store, &format!("{name}.ln_ff_p"), d)?;
        let ff_p = Mlp2::new(store, &format!("{name}.ff_p"), ff, false, rng)?;
        Ok(PccaLayerParams {
            ln_p,
            ln_a,
            ca_to_p,
            sa_p,
            ln_ff_p,
            ff_p,
            back,
        })
    }

    pub fn is_final(&self) -> bool {
        self.back.is_none()
    }
}

/// `depth` layers, the last in final mode.
pub fn build_stack<R: Rng>(store: &mut ParamStore, name: &str, cfg: &PccaConfig, rng: &mut R) -> Result<Vec<PccaLayerParams>> {
    if cfg.depth == 0 {
        return Err(Error::InvalidArgument("the cross-attention stack needs at least one layer".into()));
    }
    (0..cfg.depth)
        .map(|i| PccaLayerParams::new(store, &format!("{name}.{i}"), cfg, i + 1 == cfg.depth, rng))
        .collect()
}

/// Outputs of one layer or of the whole stack.
pub struct PccaOutput {
    pub h_p: Var,
    pub h_a1: Var,
    pub h_a2: Var,
    pub edges: Vec<AttentionEdge>,
    /// Every attention weight matrix computed.
    pub attention: Vec<Var>,
}

/// One layer. `index` only labels the recorded edges.
pub fn pcca_layer(
    g: &mut Graph<'_>,
    h_p: Var,
    h_a: [Var; 2],
    p: &PccaLayerParams,
    index: usize,
) -> Result<PccaOutput> {
    let aux = [Role::Aux1, Role::Aux2];
    let mut edges = Vec::new();
    let mut attention = Vec::new();

    let ln_p = p.ln_p.forward(g, h_p)?;
    let mut fused = Vec::with_capacity(4);
    for k in 0..2 {
        let ln_a = p.ln_a[k].forward(g, h_a[k])?;
        let att = cross_attention(g, ln_a, ln_p, &p.ca_to_p[k])?;
        fused.push(att.output);
        attention.extend(att.weights);
        edges.push(AttentionEdge {
            layer: index,
            from: aux[k],
            to: Role::Primary,
        });
    }
    let sa = self_attention(g, ln_p, &p.sa_p)?;
    attention.extend(sa.weights);
    edges.push(AttentionEdge {
        layer: index,
        from: Role::Primary,
        to: Role::Primary,
    });
    let update = g.add(sa.output, h_p)?;
    fused.push(update);
    let h_p_mid = g.add_all(&fused)?;

    let mut out_a = h_a;
    if let Some(back) = &p.back {
        for k in 0..2 {
            let att = cross_attention(g, h_p_mid, h_a[k], &back.ca[k])?;
            attention.extend(att.weights);
            edges.push(AttentionEdge {
                layer: index,
                from: Role::Primary,
                to: aux[k],
            });
            let normed = back.ln_ff[k].forward(g, att.output)?;
            let ff = back.ff[k].forward(g, normed)?;
            out_a[k] = g.add(ff, att.output)?;
        }
    }
    let normed = p.ln_ff_p.forward(g, h_p_mid)?;
    let ff = p.ff_p.forward(g, normed)?;
    let h_p_out = g.add(ff, h_p_mid)?;
    Ok(PccaOutput {
        h_p: h_p_out,
        h_a1: out_a[0],
        h_a2: out_a[1],
        edges,
        attention,
    })
}

/// All layers in order; the returned `h_p` feeds regression.
pub fn pcca_stack(g: &mut Graph<'_>, h_p: Var, h_a1: Var, h_a2: Var, layers: &[PccaLayerParams]) -> Result<PccaOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("the cross-attention stack needs at least one layer".into()));
    }
    let mut state = PccaOutput {
        h_p,
        h_a1,
        h_a2,
        edges: Vec::new(),
        attention: Vec::new(),
    };
    for (i, layer) in layers.iter().enumerate() {
        let out = pcca_layer(g, state.h_p, [state.h_a1, state.h_a2], layer, i)?;
        state.edges.extend(out.edges);
        state.attention.extend(out.attention);
        state.h_p = out.h_p;
        state.h_a1 = out.h_a1;
        state.h_a2 = out.h_a2;
    }
    Ok(state)
}
