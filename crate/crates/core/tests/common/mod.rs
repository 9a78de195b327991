//! Oracles shared by integration test targets.

#![allow(dead_code)]

use ctf_grpo::policy::{PolicyConfig, PolicyParameters};
use ctf_grpo::trajectory::TokenMask;
use ctf_grpo::vocab::{Token, BOS, OBS_MARK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gradcheck_config() -> PolicyConfig {
    PolicyConfig { vocab_size: 16, embed_dim: 8, context_len: 16, n_layers: 2, n_heads: 2, lora_rank: 2, lora_alpha: 1.0 }
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

fn objective(p: &PolicyParameters, stream: &[Token], mask: &TokenMask, weights: &[f64], temperature: f64) -> f64 {
    // Σ w_t log π_t, evaluated through per-position masks only.
    let net = p.network().with_temperature(temperature).unwrap();
    let mut total = 0.0;
    for (t, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            let mut bits = vec![false; stream.len()];
            bits[t] = true;
            total += w * net.sequence_logprob(stream, &TokenMask::from_bits(bits)).unwrap();
        }
    }
    assert_eq!(mask.len(), stream.len());
    total
}

/// Central finite differences over every adapter entry, perturbing the
/// stored single-precision value by `h` and dividing by the delta that was
/// actually applied. Log-probabilities are taken at `temperature`.
pub fn finite_difference_check(seed: u64, h: f32, temperature: f64) -> GradCheck {
    let config = gradcheck_config();
    let mut params = PolicyParameters::init(config, seed).unwrap();
    params.randomize_adapters(0.3, seed + 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
    let n = config.context_len;
    let mut stream = vec![BOS];
    while stream.len() < n {
        let t = Token(rng.random_range(1..config.vocab_size as u32));
        if t != OBS_MARK {
            stream.push(t);
        }
    }
    let bits: Vec<bool> = (0..n).map(|t| t > 0 && rng.random_bool(0.6)).collect();
    let weights: Vec<f64> = bits.iter().map(|b| if *b { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
    let mask = TokenMask::from_bits(bits);
    let net = params.network().with_temperature(temperature).unwrap();
    let analytic = net.backward(&stream, &mask, &weights).unwrap().1.flatten();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_arrays = params.trainable_arrays().len();
    for a in 0..n_arrays {
        let len = params.trainable_arrays()[a].1.len();
        for i in 0..len {
            let x = params.trainable_arrays()[a].1.data[i];
            let (xp, xm) = (x + h, x - h);
            params.trainable_arrays_mut()[a].data[i] = xp;
            let fp = objective(&params, &stream, &mask, &weights, temperature);
            params.trainable_arrays_mut()[a].data[i] = xm;
            let fm = objective(&params, &stream, &mask, &weights, temperature);
            params.trainable_arrays_mut()[a].data[i] = x;
            numeric.push((fp - fm) / (xp as f64 - xm as f64));
        }
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max);
    GradCheck { max_rel_error, entries: analytic.len() }
}
