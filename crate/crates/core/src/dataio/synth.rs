//! Seeded synthetic data with a planted dominant modality.
//!
//! Every sample draws a planted modality `m` and a label `y`. Each modality
//! has a fixed unit direction `u`; its base frames carry nuisance content
//! orthogonal to `u`, and only the planted modality adds `y·u/√T` to every
//! frame (`T` its final length). Acoustic and visual base frames are repeated
//! `redundancy` times consecutively, each copy with fresh noise.
//!
//! Three ChaCha8 streams of the same seed keep draws independent: stream 0
//! for labels, lengths and content, stream 1 for noise, stream 2 for the
//! directions. Changing `noise_std` or `redundancy` therefore leaves labels,
//! planted modalities and content untouched.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, FeatureDims, MultimodalSample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::Modality;

/// Inclusive `[min, max]` sequence lengths. Acoustic and visual ranges count
/// base frames, before repetition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqLenRanges {
    pub l: [usize; 2],
    pub a: [usize; 2],
    pub v: [usize; 2],
}

impl SeqLenRanges {
    fn get(&self, m: Modality) -> [usize; 2] {
        match m {
            Modality::Language => self.l,
            Modality::Acoustic => self.a,
            Modality::Visual => self.v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub n_samples: usize,
    pub dims: FeatureDims,
    pub seq_len: SeqLenRanges,
    /// Probabilities of planting `(l, a, v)`.
    pub dominance_mix: [f64; 3],
    pub redundancy: usize,
    pub noise_std: f64,
    /// Scale of the label-independent content in every frame.
    pub content_std: f64,
    pub label_range: [f64; 2],
    /// `(train, val, test)` fractions.
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            n_samples: 1000,
            dims: FeatureDims::uniform(8),
            seq_len: SeqLenRanges {
                l: [6, 6],
                a: [4, 8],
                v: [4, 8],
            },
            dominance_mix: [1.0 / 3.0; 3],
            redundancy: 4,
            noise_std: 0.5,
            content_std: 1.0,
            label_range: [-3.0, 3.0],
            split_fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let mix = self.dominance_mix;
        if mix.iter().any(|p| !p.is_finite() || *p < 0.0) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("dominance_mix {mix:?} is not a probability vector"));
        }
        let fr = self.split_fractions;
        if fr.iter().any(|p| !p.is_finite() || *p < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split_fractions {fr:?} must be nonnegative and sum to 1"));
        }
        for m in Modality::PRIORITY {
            let [lo, hi] = self.seq_len.get(m);
            if lo == 0 || lo > hi {
                return bad(format!("sequence length range [{lo}, {hi}] for {m} must satisfy 1 <= min <= max"));
            }
            if self.dims.get(m) == 0 {
                return bad(format!("feature width for {m} must be positive"));
            }
        }
        if self.redundancy == 0 {
            return bad("redundancy must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.content_std >= 0.0) {
            return bad("noise_std and content_std must be nonnegative".into());
        }
        let [lo, hi] = self.label_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return bad(format!("label_range [{lo}, {hi}] is empty"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn remove_component(x: &mut [f64], u: &[f64]) {
    let dot: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
    for (a, b) in x.iter_mut().zip(u) {
        *a -= dot * b;
    }
}

/// Generates a dataset with splits `train`, `val` and `test`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<MultimodalSample>)> {
    cfg.validate()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let (mut meta, mut noise, mut dirs) = (stream(0), stream(1), stream(2));
    let directions: Vec<Vec<f64>> = Modality::PRIORITY
        .iter()
        .map(|&m| unit_direction(&mut dirs, cfg.dims.get(m)))
        .collect();
    let pick = WeightedIndex::new(cfg.dominance_mix).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let [lo, hi] = cfg.label_range;
    let width = cfg.n_samples.max(1).to_string().len().max(5);

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let planted = Modality::from_index(pick.sample(&mut meta));
        let label = meta.gen_range(lo..=hi);
        let mut seqs = Vec::with_capacity(3);
        for m in Modality::PRIORITY {
            let d = cfg.dims.get(m);
            let u = &directions[m.index()];
            let [tmin, tmax] = cfg.seq_len.get(m);
            let base = meta.gen_range(tmin..=tmax);
            let repeat = if m == Modality::Language { 1 } else { cfg.redundancy };
            let t = base * repeat;
            let shift = if m == planted { label / (t as f64).sqrt() } else { 0.0 };
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..base {
                let mut frame: Vec<f64> = gaussian(&mut meta, d).into_iter().map(|x| x * cfg.content_std).collect();
                remove_component(&mut frame, u);
                for (x, ui) in frame.iter_mut().zip(u) {
                    *x += shift * ui;
                }
                for _ in 0..repeat {
                    let eps = gaussian(&mut noise, d);
                    data.extend(frame.iter().zip(&eps).map(|(x, e)| x + cfg.noise_std * e));
                }
            }
            let mut x = Tensor::new(vec![t, d], data)?;
            x.round_to_f32();
            seqs.push(x);
        }
        let visual = seqs.pop().unwrap();
        let acoustic = seqs.pop().unwrap();
        let language = seqs.pop().unwrap();
        samples.push(MultimodalSample {
            id: format!("syn{i:0width$}"),
            label,
            language,
            acoustic,
            visual,
            planted_primary: Some(planted),
        });
    }

    let mut manifest = DatasetManifest::new(cfg.name.clone(), cfg.label_range, cfg.dims);
    manifest.seed = Some(cfg.seed);
    let n = cfg.n_samples;
    let n_train = (((n as f64) * cfg.split_fractions[0]).round() as usize).min(n);
    let n_val = (((n as f64) * cfg.split_fractions[1]).round() as usize).min(n - n_train);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    manifest.splits.insert("train".into(), ids[..n_train].to_vec());
    manifest.splits.insert("val".into(), ids[n_train..n_train + n_val].to_vec());
    manifest.splits.insert("test".into(), ids[n_train + n_val..].to_vec());
    for s in &samples {
        manifest.labels.insert(s.id.clone(), s.label);
        manifest.planted_primary.insert(s.id.clone(), s.planted_primary.unwrap());
    }
    Ok((manifest, samples))
}
