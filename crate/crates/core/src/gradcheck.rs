//! Central finite-difference checks of the analytic encoder and LSTM
//! gradients, run in `f64`.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
//! entries whose true gradient is (numerically) zero from dividing by noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encode::{encode_backward, EncoderConfig, EncoderParams};
use crate::temporal::{LstmConfig, LstmParams};
use crate::tensor::{ParamSet, Tensor};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub component: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn perturb<P: ParamSet<f64>>(p: &mut P, tensor: usize, idx: usize, delta: f64) {
    p.tensors_mut()[tensor].data[idx] += delta;
}

/// Compares every entry of `analytic` against central differences of `loss`.
fn check_all<P: ParamSet<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> (usize, f64, String) {
    let mut work = params.clone();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Tensor<f64>> = analytic.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut worst = (0.0, String::new());
    let mut entries = 0;
    for (ti, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            perturb(&mut work, ti, idx, STEP);
            let up = loss(&work);
            perturb(&mut work, ti, idx, -2.0 * STEP);
            let down = loss(&work);
            perturb(&mut work, ti, idx, STEP);
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_error(g.data[idx], numeric);
            entries += 1;
            if e > worst.0 {
                worst = (e, format!("{}[{idx}] analytic={:.6e} numeric={:.6e}", names[ti], g.data[idx], numeric));
            }
        }
    }
    (entries, worst.0, worst.1)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Encoder check on a small config (V=20, D=8, L=1, H=2).
pub fn check_encoder(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig { vocab_size: 20, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 12 };
    let mut params = EncoderParams::<f64>::init(&cfg, &mut rng).expect("valid config");
    // move gains and biases away from their init values
    for b in &mut params.blocks {
        for t in [&mut b.ln1_g, &mut b.ln1_b, &mut b.ln2_g, &mut b.ln2_b, &mut b.bq, &mut b.bk, &mut b.bv, &mut b.bo, &mut b.b1, &mut b.b2] {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let len = rng.gen_range(4..=10);
    let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(2..20)).collect();
    let upstream = random_vec(cfg.d_model, &mut rng);
    let analytic = encode_backward(&tokens, &params, &upstream).expect("valid tokens");
    let loss = |p: &EncoderParams<f64>| {
        let e = p.encode(&tokens).expect("valid tokens");
        e.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let (entries, max, worst) = check_all(&params, &analytic, loss);
    GradReport { seed, component: "encoder".into(), entries, max_rel_error: max, worst }
}

/// LSTM check on (D=4, H=3, W=5), covering parameters and input embeddings.
pub fn check_lstm(seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cfg = LstmConfig { input_dim: 4, hidden: 3 };
    let mut params = LstmParams::<f64>::init(&cfg, &mut rng);
    for v in params.bias.data.iter_mut().chain(&mut params.head_b.data) {
        *v += rng.gen_range(-0.5..0.5);
    }
    let inputs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(4, &mut rng)).collect();
    let upstream = random_vec(5, &mut rng);
    let (_, tape) = params.forward(&inputs).expect("valid window");
    let mut grads = LstmParams::zeros(&cfg);
    let d_inputs = params.backward(&inputs, &tape, &upstream, &mut grads).expect("valid window");

    let loss_of = |p: &LstmParams<f64>, xs: &[Vec<f64>]| {
        let y = p.predict(xs).expect("valid window");
        y.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let (entries, max, worst) = check_all(&params, &grads, |p| loss_of(p, &inputs));
    let param_report = GradReport { seed, component: "lstm".into(), entries, max_rel_error: max, worst };

    let mut worst = (0.0, String::new());
    let mut xs = inputs.clone();
    for t in 0..xs.len() {
        for j in 0..4 {
            xs[t][j] += STEP;
            let up = loss_of(&params, &xs);
            xs[t][j] -= 2.0 * STEP;
            let down = loss_of(&params, &xs);
            xs[t][j] += STEP;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_error(d_inputs[t][j], numeric);
            if e > worst.0 {
                worst = (e, format!("input[{t}][{j}] analytic={:.6e} numeric={numeric:.6e}", d_inputs[t][j]));
            }
        }
    }
    let input_report = GradReport {
        seed,
        component: "lstm_inputs".into(),
        entries: 20,
        max_rel_error: worst.0,
        worst: worst.1,
    };
    vec![param_report, input_report]
}

/// Encoder, LSTM parameter and LSTM input checks for `count` seeds starting
/// at `seed`.
pub fn run_suite(seed: u64, count: u64) -> Vec<GradReport> {
    let mut out = Vec::new();
    for s in seed..seed + count {
        out.push(check_encoder(s));
        out.extend(check_lstm(s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        for r in run_suite(11, 1) {
            assert!(r.max_rel_error < TOLERANCE, "{r:?}");
        }
    }
}
