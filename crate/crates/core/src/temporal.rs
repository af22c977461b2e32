//! Single-layer LSTM over per-day embeddings with a linear regression head.
//!
//! Gate order inside every `4·H` block is input, forget, cell candidate,
//! output.

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamSet, Real, Tensor};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("window step {step}: embedding has dimension {found}, expected {expected}")]
    Dimension { step: usize, expected: usize, found: usize },
    #[error("upstream gradient has {found} steps, window has {expected}")]
    Upstream { expected: usize, found: usize },
    #[error("empty window")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub config: LstmConfig,
    /// input → gates, `D × 4H`
    pub w_ih: Tensor<T>,
    /// hidden → gates, `H × 4H`
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Real> ParamSet<T> for LstmParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("bias".into(), &self.bias),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias, &mut self.head_w, &mut self.head_b]
    }
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(config: &LstmConfig) -> Self {
        let (d, h) = (config.input_dim, config.hidden);
        Self {
            config: config.clone(),
            w_ih: Tensor::zeros(&[d, 4 * h]),
            w_hh: Tensor::zeros(&[h, 4 * h]),
            bias: Tensor::zeros(&[4 * h]),
            head_w: Tensor::zeros(&[h]),
            head_b: Tensor::zeros(&[1]),
        }
    }

    /// Uniform(±1/√fan-in) weights, zero biases except the forget gate (1.0).
    pub fn init<R: Rng>(config: &LstmConfig, rng: &mut R) -> Self {
        let (d, h) = (config.input_dim, config.hidden);
        let mut p = Self::zeros(config);
        p.w_ih = Tensor::uniform(&[d, 4 * h], 1.0 / (d as f64).sqrt(), rng);
        p.w_hh = Tensor::uniform(&[h, 4 * h], 1.0 / (h as f64).sqrt(), rng);
        p.head_w = Tensor::uniform(&[h], 1.0 / (h as f64).sqrt(), rng);
        for j in h..2 * h {
            p.bias.data[j] = T::ONE;
        }
        p
    }

    pub fn cast<U: Real>(&self) -> LstmParams<U> {
        LstmParams {
            config: self.config.clone(),
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            bias: self.bias.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// `W` consecutive days of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub site_id: String,
    pub dates: Vec<NaiveDate>,
    pub embeddings: Vec<Vec<T>>,
    pub labels: Vec<Option<f64>>,
}

impl<T> Window<T> {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn label_mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }
}

struct StepTape<T> {
    i: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
}

/// Activations kept for backpropagation through time.
pub struct LstmTape<T> {
    steps: Vec<StepTape<T>>,
}

impl<T: Real> LstmParams<T> {
    fn check(&self, inputs: &[Vec<T>]) -> Result<(), TemporalError> {
        if inputs.is_empty() {
            return Err(TemporalError::Empty);
        }
        let d = self.config.input_dim;
        for (step, x) in inputs.iter().enumerate() {
            if x.len() != d {
                return Err(TemporalError::Dimension { step, expected: d, found: x.len() });
            }
        }
        Ok(())
    }

    /// Predictions for every step, starting from zero hidden and cell state.
    pub fn forward(&self, inputs: &[Vec<T>]) -> Result<(Vec<T>, LstmTape<T>), TemporalError> {
        self.check(inputs)?;
        let (d, h) = (self.config.input_dim, self.config.hidden);
        let mut h_prev = vec![T::ZERO; h];
        let mut c_prev = vec![T::ZERO; h];
        let mut preds = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        let mut z = vec![T::ZERO; 4 * h];
        for x in inputs {
            z.copy_from_slice(&self.bias.data);
            crate::tensor::matmul_acc(1, d, 4 * h, x, &self.w_ih.data, &mut z);
            crate::tensor::matmul_acc(1, h, 4 * h, &h_prev, &self.w_hh.data, &mut z);
            let i: Vec<T> = z[..h].iter().map(|v| v.sigmoid()).collect();
            let f: Vec<T> = z[h..2 * h].iter().map(|v| v.sigmoid()).collect();
            let g: Vec<T> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
            let o: Vec<T> = z[3 * h..].iter().map(|v| v.sigmoid()).collect();
            let c: Vec<T> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
            let hv: Vec<T> = (0..h).map(|j| o[j] * tanh_c[j]).collect();
            let y = hv.iter().zip(&self.head_w.data).map(|(&a, &b)| a * b).sum::<T>() + self.head_b.data[0];
            preds.push(y);
            h_prev.clone_from(&hv);
            c_prev.clone_from(&c);
            steps.push(StepTape { i, f, g, o, c, tanh_c, h: hv });
        }
        Ok((preds, LstmTape { steps }))
    }

    pub fn predict(&self, inputs: &[Vec<T>]) -> Result<Vec<T>, TemporalError> {
        self.forward(inputs).map(|(p, _)| p)
    }

    /// Backpropagation through time. Accumulates parameter gradients into
    /// `grads` and returns the gradient with respect to each input.
    pub fn backward(
        &self,
        inputs: &[Vec<T>],
        tape: &LstmTape<T>,
        upstream: &[T],
        grads: &mut LstmParams<T>,
    ) -> Result<Vec<Vec<T>>, TemporalError> {
        if upstream.len() != tape.steps.len() {
            return Err(TemporalError::Upstream { expected: tape.steps.len(), found: upstream.len() });
        }
        let (d, h) = (self.config.input_dim, self.config.hidden);
        let steps = &tape.steps;
        let zero = vec![T::ZERO; h];
        let mut dh_next = vec![T::ZERO; h];
        let mut dc_next = vec![T::ZERO; h];
        let mut dz = vec![T::ZERO; 4 * h];
        let mut dx_all = vec![Vec::new(); steps.len()];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            let (h_prev, c_prev) = if t == 0 { (&zero, &zero) } else { (&steps[t - 1].h, &steps[t - 1].c) };
            let dy = upstream[t];
            grads.head_b.data[0] += dy;
            let mut dh = dh_next.clone();
            for j in 0..h {
                grads.head_w.data[j] += dy * s.h[j];
                dh[j] += dy * self.head_w.data[j];
            }
            for j in 0..h {
                let do_ = dh[j] * s.tanh_c[j];
                let dc = dc_next[j] + dh[j] * s.o[j] * (T::ONE - s.tanh_c[j] * s.tanh_c[j]);
                let di = dc * s.g[j];
                let df = dc * c_prev[j];
                let dg = dc * s.i[j];
                dc_next[j] = dc * s.f[j];
                dz[j] = di * s.i[j] * (T::ONE - s.i[j]);
                dz[h + j] = df * s.f[j] * (T::ONE - s.f[j]);
                dz[2 * h + j] = dg * (T::ONE - s.g[j] * s.g[j]);
                dz[3 * h + j] = do_ * s.o[j] * (T::ONE - s.o[j]);
            }
            for (b, &v) in grads.bias.data.iter_mut().zip(&dz) {
                *b += v;
            }
            crate::tensor::matmul_at_acc(d, 1, 4 * h, &inputs[t], &dz, &mut grads.w_ih.data);
            crate::tensor::matmul_at_acc(h, 1, 4 * h, h_prev, &dz, &mut grads.w_hh.data);
            let mut dx = vec![T::ZERO; d];
            crate::tensor::matmul_bt_acc(1, 4 * h, d, &dz, &self.w_ih.data, &mut dx);
            dh_next.iter_mut().for_each(|v| *v = T::ZERO);
            crate::tensor::matmul_bt_acc(1, 4 * h, h, &dz, &self.w_hh.data, &mut dh_next);
            dx_all[t] = dx;
        }
        Ok(dx_all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_predicts_head_bias() {
        let cfg = LstmConfig { input_dim: 3, hidden: 4 };
        let mut p = LstmParams::<f64>::zeros(&cfg);
        p.head_b.data[0] = 2.5;
        let preds = p.predict(&vec![vec![0.0; 3]; 6]).unwrap();
        assert_eq!(preds, vec![2.5; 6]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // 1 input, 2 units; weights chosen by hand.
        let cfg = LstmConfig { input_dim: 1, hidden: 2 };
        let mut p = LstmParams::<f64>::zeros(&cfg);
        // columns: i0 i1 f0 f1 g0 g1 o0 o1
        p.w_ih.data = vec![0.5, -0.5, 0.1, 0.2, 1.0, -1.0, 0.3, 0.4];
        p.bias.data = vec![0.0, 0.1, 1.0, 1.0, 0.0, 0.2, -0.1, 0.0];
        p.head_w.data = vec![1.5, -2.0];
        p.head_b.data = vec![0.25];
        let x = 2.0;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut expect = 0.25;
        for j in 0..2 {
            let i = sig(p.w_ih.data[j] * x + p.bias.data[j]);
            let g = (p.w_ih.data[4 + j] * x + p.bias.data[4 + j]).tanh();
            let o = sig(p.w_ih.data[6 + j] * x + p.bias.data[6 + j]);
            let c = i * g; // c_prev = 0, so the forget gate drops out
            expect += p.head_w.data[j] * o * c.tanh();
        }
        let y = p.predict(&[vec![x]]).unwrap()[0];
        assert!((y - expect).abs() < 1e-14);
        // frozen value of the same computation
        assert!((y - 1.185_607_587_780_248_3).abs() < 1e-12, "{y}");
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let cfg = LstmConfig { input_dim: 3, hidden: 4 };
        let p = LstmParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&p.bias.data[4..8], &[1.0; 4]);
        assert!(p.bias.data[..4].iter().chain(&p.bias.data[8..]).all(|&b| b == 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let cfg = LstmConfig { input_dim: 3, hidden: 4 };
        let p = LstmParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let xs: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64 * 0.1, -0.2, 0.3]).collect();
        let (_, tape) = p.forward(&xs).unwrap();
        let mut g = LstmParams::zeros(&cfg);
        let dx = p.backward(&xs, &tape, &[0.0; 5], &mut g).unwrap();
        assert_eq!(g.global_norm(), 0.0);
        assert!(dx.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = LstmConfig { input_dim: 3, hidden: 4 };
        let p = LstmParams::<f64>::zeros(&cfg);
        assert!(matches!(p.predict(&[vec![0.0; 2]]), Err(TemporalError::Dimension { .. })));
        assert!(matches!(p.predict(&[]), Err(TemporalError::Empty)));
    }
}
