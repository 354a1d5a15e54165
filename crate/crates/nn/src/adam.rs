use crate::params::{ParamKind, ParamStore};
use crate::scalar::Float;
use crate::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction and a constant step size.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr_t = T::of(self.cfg.lr * c2.sqrt() / c1);
        let eps_t = T::of(self.cfg.eps * c2.sqrt());
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ib1, ib2) = (T::one() - b1t, T::one() - b2t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1t * *m + ib1 * g;
                *v = b2t * *v + ib2 * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps_t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tape::{Mode, Tape};
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update has magnitude ~lr.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full([1, 1, 1, 1], 1.0), ParamKind::Trainable);
        let grads = {
            let mut tape = Tape::new(&store, Mode::Eval);
            let x = tape.input(Tensor::full([1, 1, 1, 1], 1.0));
            let y = tape.linear(x, w, None).unwrap();
            tape.backward(vec![(y, Tensor::full([1, 1, 1, 1], 5.0))]).unwrap()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
        opt.step(&mut store, &grads);
        assert!((store.get(w).data()[0] - 0.9).abs() < 1e-6);
    }
}
