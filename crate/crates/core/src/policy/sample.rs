//! Token selection from logit rows. Tokens in [`NON_EMITTABLE`] are never
//! produced by the policy and carry no probability mass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{Token, NON_EMITTABLE};

fn emittable(i: usize) -> bool {
    !NON_EMITTABLE.iter().any(|t| t.index() == i)
}

/// Log-softmax over emittable tokens; `-inf` at the rest.
pub fn log_softmax_emittable(row: &[f64]) -> Vec<f64> {
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| emittable(*i))
        .fold(f64::NEG_INFINITY, |m, (_, v)| m.max(*v));
    let z: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| emittable(*i))
        .map(|(_, v)| (v - max).exp())
        .sum();
    let log_z = max + z.ln();
    row.iter()
        .enumerate()
        .map(|(i, v)| if emittable(i) { v - log_z } else { f64::NEG_INFINITY })
        .collect()
}

pub(crate) fn softmax_emittable(row: &[f64]) -> Vec<f64> {
    log_softmax_emittable(row).into_iter().map(f64::exp).collect()
}

/// Draws from `softmax(row / temperature)` restricted to emittable tokens.
pub fn sample_token(row: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<Token> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let probs = softmax_emittable(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(Token(i as u32));
            }
        }
    }
    Ok(Token(last as u32))
}

/// Highest-scoring emittable token; ties resolve to the lowest id.
pub fn argmax_token(row: &[f64]) -> Result<Token> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in row.iter().enumerate().filter(|(i, _)| emittable(*i)) {
        if best.is_none_or(|(_, b)| *v > b) {
            best = Some((i, *v));
        }
    }
    best.map(|(i, _)| Token(i as u32)).ok_or(Error::NonFiniteLogits)
}
