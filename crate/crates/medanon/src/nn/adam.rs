//! Adam optimizer over one parameter set.

use super::params::ParamSet;
use super::tape::GradMap;
use super::{Element, Tensor};

/// First-order adaptive optimizer with the usual (0.9, 0.999) moments.
pub struct Adam<E: Element> {
    set_id: u32,
    lr: E,
    beta1: E,
    beta2: E,
    eps: E,
    t: i32,
    moments: Vec<Option<(Tensor<E>, Tensor<E>)>>,
}

impl<E: Element> Adam<E> {
    pub fn new(set: &ParamSet<E>, lr: f64) -> Self {
        Adam {
            set_id: set.id(),
            lr: E::from_f64(lr),
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            t: 0,
            moments: (0..set.len()).map(|_| None).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = E::from_f64(lr);
    }

    /// Applies one update from `grads`; entries for other sets are ignored.
    pub fn step(&mut self, set: &mut ParamSet<E>, grads: &GradMap<E>) {
        assert_eq!(set.id(), self.set_id, "optimizer bound to another set");
        self.t += 1;
        let bc1 = E::one() - self.beta1.powi(self.t);
        let bc2 = E::one() - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (key, g) in grads {
            if key.set != self.set_id {
                continue;
            }
            let idx = key.index as usize;
            let slot = &mut self.moments[idx];
            if slot.is_none() {
                *slot = Some((
                    Tensor::<E>::zeros(g.raw_dim()),
                    Tensor::<E>::zeros(g.raw_dim()),
                ));
            }
            let (m, v) = slot.as_mut().unwrap();
            let gs = g.as_slice().expect("contiguous grad");
            let ms = m.as_slice_mut().expect("contiguous moment");
            let vs = v.as_slice_mut().expect("contiguous moment");
            for ((mv, vv), gv) in ms.iter_mut().zip(vs.iter_mut()).zip(gs) {
                *mv = b1 * *mv + (E::one() - b1) * *gv;
                *vv = b2 * *vv + (E::one() - b2) * *gv * *gv;
            }
            set.update(idx, |p| {
                let ps = p.as_slice_mut().expect("contiguous param");
                for ((pv, mv), vv) in ps.iter_mut().zip(ms.iter()).zip(vs.iter()) {
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Binding, Tape};
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut set = ParamSet::<f64>::new("q");
        let w = set.add("w", ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let mut opt = Adam::new(&set, 0.1);
        let loss_at = |set: &ParamSet<f64>| {
            let mut t = Tape::<f64>::new();
            let wv = t.param(set, w, Binding::Trainable);
            let sq = t.mul(wv, wv);
            let loss = t.mean_all(sq);
            (t.scalar(loss), t.backward(loss))
        };
        let (initial, _) = loss_at(&set);
        for _ in 0..200 {
            let (_, grads) = loss_at(&set);
            opt.step(&mut set, &grads);
        }
        let (fin, _) = loss_at(&set);
        assert!(fin < initial * 1e-3, "adam failed to optimize: {fin}");
    }
}
