use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Precision, Tensor};

/// Adam with decoupled weight decay.
///
/// Moments are aligned with the store's parameter order. A parameter absent
/// from a step's gradients is left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub const BETAS: (f64, f64) = (0.9, 0.999);
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        AdamW {
            beta1: Self::BETAS.0,
            beta2: Self::BETAS.1,
            eps: Self::EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`; parameters and moments
    /// are then stored at `precision`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
        weight_decay: f64,
        precision: Precision,
    ) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (id, grad) in grads {
            let i = id.index();
            let p = store.get_mut(*id);
            if p.shape() != grad.shape() {
                return Err(Error::dim("adamw", p.shape(), grad.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pk, mk), vk), &gk) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let adam = (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
                *pk -= lr * (adam + weight_decay * *pk);
            }
            precision.quantize(p);
            precision.quantize(m);
            precision.quantize(v);
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f64]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row_vector(values)).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + ε).
        let (mut store, id) = one_param(&[1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&store);
        let g = Tensor::row_vector(&[0.3, -4.0, 0.0]);
        opt.update(&mut store, &[(id, g)], 0.1, 0.0, Precision::F64).unwrap();
        let x = store.get(id).data();
        assert!((x[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((x[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut store, id) = one_param(&[0.5, -0.25]);
        let before = store.get(id).clone();
        let mut opt = AdamW::new(&store);
        for _ in 0..5 {
            let g = Tensor::row_vector(&[1.0, -1.0]);
            opt.update(&mut store, &[(id, g)], 0.0, 0.5, Precision::F32).unwrap();
        }
        assert_eq!(store.get(id).data(), before.data());
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let (mut store, id) = one_param(&[2.0]);
        let mut opt = AdamW::new(&store);
        opt.update(&mut store, &[(id, Tensor::row_vector(&[0.0]))], 0.1, 0.5, Precision::F64).unwrap();
        assert!((store.get(id).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn f32_precision_rounds_parameters_and_moments() {
        let (mut store, id) = one_param(&[0.1]);
        let mut opt = AdamW::new(&store);
        opt.update(&mut store, &[(id, Tensor::row_vector(&[0.123456789]))], 0.01, 0.0, Precision::F32).unwrap();
        for x in [store.get(id).item(), opt.m[0].item(), opt.v[0].item()] {
            assert_eq!(x, x as f32 as f64);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let (mut store, id) = one_param(&[3.0, -1.5]);
        let mut opt = AdamW::new(&store);
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * x);
            opt.update(&mut store, &[(id, g)], 0.01, 0.0, Precision::F64).unwrap();
        }
        assert!(store.get(id).norm() < 1e-2);
    }
}
