use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::dataio::{FeatureDims, MultimodalSample};
use crate::error::{Error, Result};
use crate::gdc::{adaptive_pool_matrix, compress, compress_with_nodes, GdcConfig, GdcParams};
use crate::layers::{Linear, Mlp2};
use crate::mselector::{fixed_selection, select_primary, Aggregator, MSelectorParams, SelectionOutcome};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::objective::{nce_total, regression_loss, total_loss, NceHeads};
use crate::pcca::{build_stack, pcca_stack, PccaConfig, PccaLayerParams};
use crate::Modality;

/// ChaCha stream reserved for parameter initialization; batch shuffling
/// uses the epoch index as its stream.
const INIT_STREAM: u64 = u64::MAX;

/// How an acoustic or visual sequence becomes `J` rows of width `d`.
#[derive(Clone, Debug)]
enum Compressor {
    Gdc(GdcParams),
    /// Projection and average pooling.
    Pooled(Linear),
    /// Projection, average pooling, then edges and GCN.
    PooledGraph(Linear, GdcParams),
}

#[derive(Clone, Debug)]
struct Parts {
    proj_l: Linear,
    /// Acoustic, visual.
    nonverbal: [Compressor; 2],
    selector: MSelectorParams,
    pcca: Vec<PccaLayerParams>,
    head_agg: Aggregator,
    head: Mlp2,
    nce: NceHeads,
}

/// Parameters and structure of the full fusion model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: FeatureDims,
    pub store: ParamStore,
    parts: Parts,
}

/// Graph nodes for one sample.
pub struct SampleForward {
    /// `1×1` prediction.
    pub pred: Var,
    pub selection: SelectionOutcome,
    /// Aggregated fused primary, `1×d`.
    pub fused: Var,
}

/// Loss of one batch plus its parts as plain numbers.
pub struct BatchLoss {
    pub total: Var,
    pub regression: f64,
    pub nce: f64,
    pub predictions: Vec<f64>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, dims: FeatureDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if [dims.language, dims.acoustic, dims.visual].contains(&0) {
            return Err(Error::InvalidArgument(format!("feature widths must be positive, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let d = config.d;
        let proj_l = Linear::new(&mut store, "proj.l", dims.language, d, &mut rng)?;
        let mut nonverbal = Vec::with_capacity(2);
        for m in [Modality::Acoustic, Modality::Visual] {
            let gdc_cfg = GdcConfig {
                d_in: dims.get(m),
                d,
                max_nodes: config.max_nodes,
                max_len: config.max_len,
                routing_iters: config.routing_iters,
                gcn_layers: config.gcn_layers,
                mode: config.capsule_mode,
            };
            let name = format!("gdc.{m}");
            let proj = format!("proj.{m}");
            nonverbal.push(if config.ablation.no_gdc {
                Compressor::Pooled(Linear::new(&mut store, &proj, dims.get(m), d, &mut rng)?)
            } else if config.ablation.no_caps {
                let p = Linear::new(&mut store, &proj, dims.get(m), d, &mut rng)?;
                Compressor::PooledGraph(p, GdcParams::refiner(&mut store, &name, gdc_cfg, &mut rng)?)
            } else {
                Compressor::Gdc(GdcParams::new(&mut store, &name, gdc_cfg, &mut rng)?)
            });
        }
        let with_mlp = config.ablation.fixed_primary.is_none();
        let selector = MSelectorParams::new(&mut store, "sel", d, with_mlp, &mut rng)?;
        let pcca = if config.ablation.no_pcca {
            Vec::new()
        } else {
            let pc = PccaConfig {
                d,
                depth: config.pcca_depth,
                heads: config.heads,
                ff_mult: config.ff_mult,
            };
            build_stack(&mut store, "pcca", &pc, &mut rng)?
        };
        let head_agg = Aggregator::new(&mut store, "head.agg", d, &mut rng)?;
        let head = Mlp2::new(&mut store, "head.mlp", [d, d, 1], false, &mut rng)?;
        let nce = NceHeads::new(&mut store, "nce", d, &mut rng)?;
        let [a, v]: [Compressor; 2] = nonverbal.try_into().expect("two compressors");
        Ok(Model {
            config: config.clone(),
            dims,
            store,
            parts: Parts {
                proj_l,
                nonverbal: [a, v],
                selector,
                pcca,
                head_agg,
                head,
                nce,
            },
        })
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_params<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in values {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter `{name}`")))?;
            let slot = self.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            seen += 1;
        }
        if seen != self.store.len() {
            return Err(Error::Incompatible(format!(
                "{seen} parameters supplied, model has {}",
                self.store.len()
            )));
        }
        Ok(())
    }

    fn check_sample(&self, s: &MultimodalSample) -> Result<()> {
        for m in Modality::PRIORITY {
            let t = s.sequence(m);
            if t.rank() != 2 || t.rows() == 0 || t.cols() != self.dims.get(m) {
                return Err(Error::Dimension {
                    op: "model input",
                    lhs: t.shape().to_vec(),
                    rhs: vec![0, self.dims.get(m)],
                });
            }
        }
        Ok(())
    }

    fn compress_nonverbal(&self, g: &mut Graph<'_>, c: &Compressor, h: Var, j: usize) -> Result<Var> {
        let pooled = |g: &mut Graph<'_>, proj: &Linear| -> Result<Var> {
            let x = proj.forward(g, h)?;
            let pool = g.constant(adaptive_pool_matrix(g.value(h).rows(), j)?)?;
            g.matmul(pool, x)
        };
        match c {
            Compressor::Gdc(p) => Ok(compress(g, h, p, j)?.output),
            Compressor::Pooled(proj) => pooled(g, proj),
            Compressor::PooledGraph(proj, p) => {
                let nodes = pooled(g, proj)?;
                Ok(compress_with_nodes(g, nodes, p)?.output)
            }
        }
    }

    /// Forward pass of one sample on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, s: &MultimodalSample) -> Result<SampleForward> {
        self.check_sample(s)?;
        let j = s.language.rows();
        let l_in = g.constant(s.language.clone())?;
        let h_l = self.parts.proj_l.forward(g, l_in)?;
        let mut seqs = [h_l; 3];
        for (c, m) in self.parts.nonverbal.iter().zip([Modality::Acoustic, Modality::Visual]) {
            let x = g.constant(s.sequence(m).clone())?;
            seqs[m.index()] = self.compress_nonverbal(g, c, x, j)?;
        }
        let selection = match self.config.ablation.fixed_primary {
            Some(p) => fixed_selection(g, &self.parts.selector, p, seqs)?,
            None => select_primary(g, &self.parts.selector, seqs)?,
        };
        let h_p = if self.parts.pcca.is_empty() {
            selection.h_p
        } else {
            pcca_stack(g, selection.h_p, selection.h_a1, selection.h_a2, &self.parts.pcca)?.h_p
        };
        let fused = self.parts.head_agg.forward(g, h_p)?;
        let pred = self.parts.head.forward(g, fused)?;
        Ok(SampleForward { pred, selection, fused })
    }

    /// `L_reg + α·L_NCE` over a batch; negatives for the contrastive term
    /// are the other samples of the batch.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &[&MultimodalSample]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut preds = Vec::with_capacity(batch.len());
        let mut fused = Vec::with_capacity(batch.len());
        let mut pooled: [Vec<Var>; 3] = Default::default();
        for s in batch {
            let out = self.forward(g, s)?;
            preds.push(out.pred);
            fused.push(out.fused);
            for (dst, v) in pooled.iter_mut().zip(out.selection.pooled) {
                dst.push(v);
            }
        }
        let pred = g.concat_rows(&preds)?;
        let labels: Vec<f64> = batch.iter().map(|s| s.label).collect();
        let truth = g.constant(Tensor::column_vector(&labels))?;
        let reg = regression_loss(g, pred, truth)?;
        let h_p = g.concat_rows(&fused)?;
        let h_m = [
            g.concat_rows(&pooled[0])?,
            g.concat_rows(&pooled[1])?,
            g.concat_rows(&pooled[2])?,
        ];
        let nce = nce_total(g, h_p, h_m, &self.parts.nce, self.config.tau)?;
        let total = total_loss(g, reg, nce, self.config.alpha)?;
        Ok(BatchLoss {
            total,
            regression: g.value(reg).item(),
            nce: g.value(nce).item(),
            predictions: g.value(pred).data().to_vec(),
        })
    }

    /// Prediction and selection of one sample.
    pub fn predict(&self, s: &MultimodalSample) -> Result<(f64, SelectionOutcome)> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, s)?;
        Ok((g.value(out.pred).item(), out.selection))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::Ablation;
    use rand::Rng;

    fn sample(rng: &mut ChaCha8Rng, dims: FeatureDims, t: [usize; 3]) -> MultimodalSample {
        let mut seq = |rows: usize, cols: usize| {
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        MultimodalSample {
            id: "s".into(),
            label: 0.5,
            language: seq(t[0], dims.language),
            acoustic: seq(t[1], dims.acoustic),
            visual: seq(t[2], dims.visual),
            planted_primary: None,
        }
    }

    fn small(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            d: 8,
            pcca_depth: 2,
            heads: 2,
            max_nodes: 8,
            max_len: 16,
            ablation,
            ..ModelConfig::default()
        }
    }

    fn dims() -> FeatureDims {
        FeatureDims {
            language: 5,
            acoustic: 4,
            visual: 3,
        }
    }

    #[test]
    fn zero_inputs_predict_zero() {
        let model = Model::new(&small(Ablation::default()), dims(), 1).unwrap();
        let mut s = sample(&mut ChaCha8Rng::seed_from_u64(0), dims(), [4, 7, 9]);
        for m in Modality::PRIORITY {
            *s.sequence_mut(m) = s.sequence(m).map(|_| 0.0);
        }
        assert_eq!(model.predict(&s).unwrap().0, 0.0);
    }

    #[test]
    fn language_only_model_ignores_other_modalities() {
        let ablation = Ablation {
            fixed_primary: Some(Modality::Language),
            no_pcca: true,
            ..Ablation::default()
        };
        let model = Model::new(&small(ablation), dims(), 2).unwrap();
        let s = sample(&mut ChaCha8Rng::seed_from_u64(1), dims(), [4, 7, 9]);
        let (y, sel) = model.predict(&s).unwrap();
        let mut z = s.clone();
        z.acoustic = z.acoustic.map(|_| 0.0);
        z.visual = z.visual.map(|_| 0.0);
        assert_eq!(model.predict(&z).unwrap().0.to_bits(), y.to_bits());
        assert_eq!(sel.weights, [0.0, 1.0, 0.0]);
        assert_ne!(y, 0.0);
    }

    #[test]
    fn initial_selection_weights_are_uniform() {
        let model = Model::new(&small(Ablation::default()), dims(), 3).unwrap();
        let s = sample(&mut ChaCha8Rng::seed_from_u64(2), dims(), [3, 5, 12]);
        let (_, sel) = model.predict(&s).unwrap();
        for w in sel.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(sel.primary(), Modality::Language);
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        let flags = ["full", "no_gdc", "no_caps", "fixed_a", "no_pcca"];
        let s = sample(&mut ChaCha8Rng::seed_from_u64(3), dims(), [4, 11, 2]);
        for f in flags {
            let mut a = Ablation::default();
            a.apply(f).unwrap();
            let model = Model::new(&small(a), dims(), 4).unwrap();
            let (y, _) = model.predict(&s).unwrap();
            assert!(y.is_finite(), "{f}");
            let has_caps = model.store.id("gdc.a.caps.w").is_some();
            assert_eq!(has_caps, f != "no_gdc" && f != "no_caps", "{f}");
            assert_eq!(model.store.id("sel.mlp.0.w").is_some(), f != "fixed_a", "{f}");
            assert_eq!(model.store.id("pcca.0.ln_p.gain").is_some(), f != "no_pcca", "{f}");
        }
    }

    #[test]
    fn wrong_feature_width_is_a_dimension_error() {
        let model = Model::new(&small(Ablation::default()), dims(), 5).unwrap();
        let mut s = sample(&mut ChaCha8Rng::seed_from_u64(4), dims(), [4, 5, 6]);
        s.visual = Tensor::zeros(&[6, 4]);
        assert!(matches!(model.predict(&s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn language_longer_than_max_nodes_is_rejected() {
        let model = Model::new(&small(Ablation::default()), dims(), 5).unwrap();
        let s = sample(&mut ChaCha8Rng::seed_from_u64(5), dims(), [9, 5, 6]);
        assert!(matches!(model.predict(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn batch_loss_of_single_sample_has_zero_nce() {
        let model = Model::new(&small(Ablation::default()), dims(), 6).unwrap();
        let s = sample(&mut ChaCha8Rng::seed_from_u64(6), dims(), [4, 5, 6]);
        let mut g = Graph::with_params(&model.store);
        let loss = model.batch_loss(&mut g, &[&s]).unwrap();
        assert_eq!(loss.nce, 0.0);
        assert_eq!(loss.regression, (loss.predictions[0] - 0.5).abs());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(&small(Ablation::default()), dims(), 9).unwrap();
        let b = Model::new(&small(Ablation::default()), dims(), 9).unwrap();
        let c = Model::new(&small(Ablation::default()), dims(), 10).unwrap();
        let flat = |m: &Model| m.store.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}
