//! Finite-difference checks of every module at small dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ModelConfig;
use super::model::Model;
use crate::dataio::{FeatureDims, MultimodalSample};
use crate::error::Result;
use crate::gdc::{compress, CapsuleMode, GdcConfig, GdcParams};
use crate::mselector::{select_primary, MSelectorParams};
use crate::numcore::{grad_check_with, GradCheckOptions, GradReport, Graph, ParamStore, Tensor, Var};
use crate::objective::{nce_total, regression_loss, total_loss, NceHeads};
use crate::pcca::{build_stack, pcca_stack, PccaConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Dimensions of the suite: hidden width, nodes, longest sequence, batch.
pub const D: usize = 8;
pub const J: usize = 4;
pub const T_MAX: usize = 12;
pub const K: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub modules: Vec<ModuleCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.modules.iter().all(|m| m.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.modules.iter().map(|m| m.report.max_rel_error).fold(0.0, f64::max)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Contracts `v` with a fixed random tensor so every entry receives a
/// distinct upstream gradient.
fn probe(g: &mut Graph<'_>, v: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

struct Ctx<'a> {
    opts: GradCheckOptions<'a>,
    out: Vec<ModuleCheck>,
}

impl Ctx<'_> {
    fn check(&mut self, module: &str, store: &ParamStore, f: impl Fn(&mut Graph<'_>) -> Result<Var>) -> Result<()> {
        let report = grad_check_with(store, STEP, TOLERANCE, &self.opts, f)?;
        self.out.push(ModuleCheck {
            module: module.to_string(),
            report,
        });
        Ok(())
    }
}

fn numcore(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let x = store.insert("x", random(rng, &[J, D]))?;
    let w = store.insert("w", random(rng, &[D, D]))?;
    let gain = store.insert("gain", random(rng, &[D]))?;
    let bias = store.insert("bias", random(rng, &[D]))?;
    let pw = random(rng, &[J, 3 * D]);
    ctx.check("numcore", &store, |g| {
        let (xv, wv, gv, bv) = (g.param(x), g.param(w), g.param(gain), g.param(bias));
        let h = g.linear(xv, wv, bv)?;
        let t = g.tanh(h)?;
        let ln = g.layer_norm(t, gv, bv, 1e-5)?;
        let sm = g.softmax_rows(ln)?;
        let n = g.normalize_rows(xv, 1e-8)?;
        let cat = g.concat_cols(&[sm, n, ln])?;
        probe(g, cat, &pw)
    })
}

fn gdc(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng, mode: CapsuleMode) -> Result<()> {
    let d_in = 5;
    let cfg = GdcConfig {
        d_in,
        d: D,
        max_nodes: J,
        max_len: T_MAX,
        routing_iters: 3,
        gcn_layers: 2,
        mode,
    };
    let mut store = ParamStore::new();
    let params = GdcParams::new(&mut store, "gdc", cfg, rng)?;
    let h = store.insert("input", random(rng, &[T_MAX, d_in]))?;
    let w = random(rng, &[J, D]);
    let name = match mode {
        CapsuleMode::Shared => "gdc.shared",
        CapsuleMode::Full => "gdc.full",
    };
    ctx.check(name, &store, |g| {
        let hv = g.param(h);
        let c = compress(g, hv, &params, J)?;
        probe(g, c.output, &w)
    })
}

fn mselector(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let mut params = MSelectorParams::new(&mut store, "sel", D, true, rng)?;
    // The zero-initialized output layer would hide half the chain rule.
    let mlp = params.mlp.as_mut().expect("built with an MLP");
    *store.get_mut(mlp.second.w) = random(rng, &[D, 3]);
    *store.get_mut(mlp.second.b) = random(rng, &[3]);
    let seqs: Vec<_> = (0..3)
        .map(|i| store.insert(format!("seq{i}"), random(rng, &[J, D])))
        .collect::<Result<_>>()?;
    let w = [random(rng, &[J, D]), random(rng, &[J, D]), random(rng, &[J, D])];
    ctx.check("mselector", &store, |g| {
        let s = [g.param(seqs[0]), g.param(seqs[1]), g.param(seqs[2])];
        let out = select_primary(g, &params, s)?;
        let terms = [
            probe(g, out.h_p, &w[0])?,
            probe(g, out.h_a1, &w[1])?,
            probe(g, out.h_a2, &w[2])?,
        ];
        g.add_all(&terms)
    })
}

fn pcca(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = PccaConfig {
        d: D,
        depth: 2,
        heads: 2,
        ff_mult: 2,
    };
    let mut store = ParamStore::new();
    let layers = build_stack(&mut store, "pcca", &cfg, rng)?;
    let ins: Vec<_> = ["h_p", "h_a1", "h_a2"]
        .iter()
        .map(|n| store.insert(*n, random(rng, &[J, D])))
        .collect::<Result<_>>()?;
    let w = random(rng, &[J, D]);
    ctx.check("pcca", &store, |g| {
        let (p, a1, a2) = (g.param(ins[0]), g.param(ins[1]), g.param(ins[2]));
        let out = pcca_stack(g, p, a1, a2, &layers)?;
        probe(g, out.h_p, &w)
    })
}

fn objective(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let heads = NceHeads::new(&mut store, "nce", D, rng)?;
    // Zero biases can leave a mapped row at the origin, where the cosine has no gradient.
    for m in ["l", "a", "v"] {
        for layer in 0..2 {
            let id = store.id(&format!("nce.f.{m}.{layer}.b")).expect("head bias");
            *store.get_mut(id) = random(rng, &[D]);
        }
    }
    let h_p = store.insert("h_p", random(rng, &[K, D]))?;
    let h_m: Vec<_> = ["h_l", "h_a", "h_v"]
        .iter()
        .map(|n| store.insert(*n, random(rng, &[K, D])))
        .collect::<Result<_>>()?;
    let pred = store.insert("pred", random(rng, &[K, 1]))?;
    let truth = random(rng, &[K, 1]).map(|x| 3.0 * x);
    ctx.check("objective", &store, |g| {
        let p = g.param(h_p);
        let m = [g.param(h_m[0]), g.param(h_m[1]), g.param(h_m[2])];
        let nce = nce_total(g, p, m, &heads, 0.5)?;
        let (pv, tv) = (g.param(pred), g.constant(truth.clone())?);
        let reg = regression_loss(g, pv, tv)?;
        total_loss(g, reg, nce, 0.1)
    })
}

fn forward(ctx: &mut Ctx<'_>, rng: &mut ChaCha8Rng, seed: u64) -> Result<()> {
    let dims = FeatureDims {
        language: 6,
        acoustic: 5,
        visual: 3,
    };
    let cfg = ModelConfig {
        d: D,
        pcca_depth: 2,
        heads: 2,
        max_nodes: J,
        max_len: T_MAX,
        alpha: 0.1,
        tau: 0.5,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&cfg, dims, seed)?;
    // Nonzero selector output and head biases keep every path active.
    for (name, shape) in [("sel.mlp.1.w", &[D, 3][..]), ("sel.mlp.1.b", &[3][..])] {
        let id = model.store.id(name).expect("selector output layer");
        *model.store.get_mut(id) = random(rng, shape);
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).starts_with("nce.") && model.store.name(id).ends_with(".b") {
            let n = model.store.get(id).numel();
            *model.store.get_mut(id) = random(rng, &[n]);
        }
    }
    let batch: Vec<MultimodalSample> = (0..K)
        .map(|i| {
            let t_a = rng.gen_range(J..=T_MAX);
            let t_v = rng.gen_range(2..=T_MAX);
            MultimodalSample {
                id: format!("g{i}"),
                label: rng.gen_range(-3.0..3.0),
                language: random(rng, &[J, dims.language]),
                acoustic: random(rng, &[t_a, dims.acoustic]),
                visual: random(rng, &[t_v, dims.visual]),
                planted_primary: None,
            }
        })
        .collect();
    let refs: Vec<&MultimodalSample> = batch.iter().collect();
    let store = model.store.clone();
    ctx.check("forward", &store, |g| Ok(model.batch_loss(g, &refs)?.total))
}

/// Runs every module check. `corrupt` names a parameter whose analytic
/// gradient is deliberately offset.
pub fn run_grad_suite(seed: u64, corrupt: Option<&str>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Ctx {
        opts: GradCheckOptions { corrupt },
        out: Vec::new(),
    };
    numcore(&mut ctx, &mut rng)?;
    gdc(&mut ctx, &mut rng, CapsuleMode::Shared)?;
    gdc(&mut ctx, &mut rng, CapsuleMode::Full)?;
    mselector(&mut ctx, &mut rng)?;
    pcca(&mut ctx, &mut rng)?;
    objective(&mut ctx, &mut rng)?;
    forward(&mut ctx, &mut rng, seed)?;
    Ok(SuiteReport { modules: ctx.out })
}
