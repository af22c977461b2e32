use crate::tensor::{ParamSet, Real};

use super::TrainError;

/// Mean of `(p − y)²` over steps where `mask` is set.
pub fn masked_mse(predictions: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64, TrainError> {
    if predictions.len() != labels.len() || labels.len() != mask.len() {
        return Err(TrainError::Shape(format!(
            "predictions {}, labels {}, mask {}",
            predictions.len(),
            labels.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, y), &m) in predictions.iter().zip(labels).zip(mask) {
        if m {
            sum += (p - y) * (p - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation without weight decay. Moment buffers follow
/// the canonical tensor order of the parameter set.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Tensors whose index is rejected by `update` keep their
    /// values and moments.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &mut P, lr: f64, update: impl Fn(usize) -> bool) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (c1, c2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(eps);
        let grads = grads.tensors_mut();
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            if !update(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + c1 * gj;
                v[j] = b2 * v[j] + c2 * gj * gj;
                p.data[j] = p.data[j] - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(T::from_f64(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[derive(Clone, Debug)]
    struct Toy(Tensor<f64>);

    impl ParamSet<f64> for Toy {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.0]
        }
    }

    fn toy(v: &[f64]) -> Toy {
        Toy(Tensor { shape: vec![v.len()], data: v.to_vec() })
    }

    #[test]
    fn mse_examples() {
        assert_eq!(masked_mse(&[1.0, 2.0], &[0.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(masked_mse(&[1.5, 2.0], &[1.5, 2.0], &[true, true]).unwrap(), 0.0);
        assert!(matches!(masked_mse(&[1.0], &[0.0], &[false]), Err(TrainError::EmptyMask)));
        let a = masked_mse(&[1.0, 3.0], &[0.5, 1.0], &[true, true]).unwrap();
        let b = masked_mse(&[1.0, 9.0, 3.0, -4.0], &[0.5, 0.0, 1.0, 7.0], &[true, false, true, false]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_matches_hand_update() {
        let mut p = toy(&[0.5, -1.0]);
        let mut g = toy(&[0.2, -0.4]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &mut g, 0.01, |_| true);
        // first step: m̂ = g, v̂ = g², update = lr · g / (|g| + ε)
        let e0 = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
        let e1 = -1.0 + 0.01 * 0.4 / (0.4 + 1e-8);
        assert!((p.0.data[0] - e0).abs() < 1e-12);
        assert!((p.0.data[1] - e1).abs() < 1e-12);

        // second step with new gradients, written out in full
        let mut g2 = toy(&[-0.1, 0.3]);
        opt.step(&mut p, &mut g2, 0.01, |_| true);
        let hand = |theta: f64, g1: f64, g2: f64| {
            let m = 0.9 * (0.1 * g1) + 0.1 * g2;
            let v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
            let mh = m / (1.0 - 0.81);
            let vh = v / (1.0 - 0.999f64 * 0.999);
            theta - 0.01 * mh / (vh.sqrt() + 1e-8)
        };
        assert!((p.0.data[0] - hand(e0, 0.2, -0.1)).abs() < 1e-12);
        assert!((p.0.data[1] - hand(e1, -0.4, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = toy(&[1.0]);
        let mut g = toy(&[3.0]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &mut g, 0.1, |_| false);
        assert_eq!(p.0.data, vec![1.0]);
    }

    proptest! {
        #[test]
        fn clipping_bounds_the_norm(v in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
            let mut g = toy(&v);
            let before = clip_global_norm(&mut g, max);
            let after = g.global_norm();
            prop_assert!(after <= max + 1e-9);
            if before <= max {
                prop_assert_eq!(&g.0.data, &v);
            }
        }

        #[test]
        fn rmse_squared_is_mse(
            data in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, any::<bool>()), 1..40)
        ) {
            let p: Vec<f64> = data.iter().map(|d| d.0).collect();
            let y: Vec<f64> = data.iter().map(|d| d.1).collect();
            let mut m: Vec<bool> = data.iter().map(|d| d.2).collect();
            m[0] = true;
            let mse = masked_mse(&p, &y, &m).unwrap();
            let r = crate::eval::rmse(&p, &y, &m).unwrap();
            prop_assert!((r * r - mse).abs() <= 1e-9 * mse.max(1.0));
        }
    }
}
