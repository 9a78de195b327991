//! Group-relative advantages, the advantage-weighted offline objective and
//! the clipped multi-turn surrogate.
//!
//! Every loss here is returned together with the gradient of that loss
//! (not of the objective), ready for a minimizing optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradientSet, Network, PolicyParameters};
use crate::trajectory::{EpisodeReturn, TokenMask, Trajectory};
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// One ratio over the concatenated assistant tokens of a trajectory.
    Trajectory,
    /// One ratio per assistant token, averaged within the trajectory.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub std_normalize: bool,
    pub ratio_mode: RatioMode,
    pub log_ratio_clamp: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            std_normalize: false,
            ratio_mode: RatioMode::Trajectory,
            log_ratio_clamp: 20.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(Error::Config(format!("grpo.clip_epsilon must be positive, got {}", self.clip_epsilon)));
        }
        if !(self.log_ratio_clamp > 0.0) {
            return Err(Error::Config(format!("grpo.log_ratio_clamp must be positive, got {}", self.log_ratio_clamp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Â_i = R_i − mean(R)`, optionally divided by `std(R) + 1e-8`.
pub fn group_advantages(returns: &[f64], config: &GrpoConfig) -> Result<AdvantageGroup> {
    if returns.len() < 2 {
        return Err(Error::GroupTooSmall(returns.len()));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteReward);
    }
    let (mean, std) = mean_std(returns);
    let advantages = returns
        .iter()
        .map(|r| {
            let a = r - mean;
            if config.std_normalize {
                a / (std + 1e-8)
            } else {
                a
            }
        })
        .collect();
    Ok(AdvantageGroup { returns: returns.to_vec(), advantages })
}

/// `ρ = exp(clamp(new − old, ±log_ratio_clamp))`.
pub fn trajectory_ratio(new_logprob: f64, old_logprob: f64, config: &GrpoConfig) -> f64 {
    let c = config.log_ratio_clamp;
    (new_logprob - old_logprob).clamp(-c, c).exp()
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is strictly smaller, which cuts the gradient.
fn clip_active(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage < ratio * advantage
}

/// A window of tokens fed to the policy in one forward pass, with the
/// positions whose log-probabilities count toward a sequence score.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub stream: Vec<Token>,
    pub mask: TokenMask,
}

impl Segment {
    pub fn new(stream: Vec<Token>, mask: TokenMask) -> Result<Self> {
        if stream.len() != mask.len() {
            return Err(Error::Shape(format!("mask length {} != stream length {}", mask.len(), stream.len())));
        }
        Ok(Self { stream, mask })
    }
}

/// Per-position log-probabilities of every segment under `params`.
pub fn segment_logprobs(params: &PolicyParameters, segments: &[Segment]) -> Result<Vec<Vec<f64>>> {
    network_logprobs(&params.network(), segments)
}

fn network_logprobs(net: &Network, segments: &[Segment]) -> Result<Vec<Vec<f64>>> {
    segments.iter().map(|s| net.token_logprobs(&s.stream, &s.mask)).collect()
}

pub fn sequence_score(params: &PolicyParameters, segments: &[Segment]) -> Result<f64> {
    Ok(segment_logprobs(params, segments)?.iter().flatten().sum())
}

/// Accumulates `Σ_s Σ_t weight(s, t) · ∇ log π` into `grads` and returns the
/// weighted log-probability sum.
fn accumulate(
    net: &Network,
    segments: &[Segment],
    weight: impl Fn(usize, usize) -> f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    let mut total = 0.0;
    for (si, seg) in segments.iter().enumerate() {
        let weights: Vec<f64> = seg
            .mask
            .bits()
            .iter()
            .enumerate()
            .map(|(t, on)| if *on && t > 0 { weight(si, t) } else { 0.0 })
            .collect();
        let (value, g) = net.backward(&seg.stream, &seg.mask, &weights)?;
        total += value;
        grads.add_scaled(&g, 1.0);
    }
    Ok(total)
}

/// One sampled completion scored as a group member in the offline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub segments: Vec<Segment>,
}

/// `loss = −Σ_i Â_i · log π(completion_i | context)` and its gradient.
pub fn offline_objective(
    params: &PolicyParameters,
    group: &[Completion],
    advantages: &[f64],
    temperature: f64,
) -> Result<(f64, GradientSet)> {
    if group.len() != advantages.len() {
        return Err(Error::Shape(format!(
            "{} advantages for a group of {}",
            advantages.len(),
            group.len()
        )));
    }
    let net = params.network().with_temperature(temperature)?;
    let mut grads = GradientSet::zeros_like(params);
    let mut loss = 0.0;
    for (c, &a) in group.iter().zip(advantages) {
        if a != 0.0 {
            loss += accumulate(&net, &c.segments, |_, _| -a, &mut grads)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::GradientOverflow);
    }
    Ok((loss, grads))
}

/// One trajectory of a rollout group with its generation-time scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutItem {
    pub trajectory: Trajectory,
    pub episode_return: EpisodeReturn,
    /// Windows that were fed to the policy when each assistant turn was
    /// generated; together they cover the assistant span exactly once.
    pub segments: Vec<Segment>,
    /// Old-policy per-position log-probabilities, one vector per segment.
    pub old_token_logprobs: Vec<Vec<f64>>,
}

impl RolloutItem {
    pub fn old_logprob(&self) -> f64 {
        self.old_token_logprobs.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub prompt_id: String,
    pub items: Vec<RolloutItem>,
    /// Sampling temperature of the rollouts; old and new log-probabilities
    /// are both scored at it.
    pub temperature: f64,
}

/// Per-update numbers handed to the metrics sink.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateDiagnostics {
    pub loss: f64,
    pub mean_return: f64,
    pub return_std: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

fn check_batch(batch: &RolloutBatch) -> Result<()> {
    let first = batch.items.first().ok_or(Error::EmptyBatch)?;
    let prompt = first.trajectory.turns().first().map(|t| t.tokens());
    for item in &batch.items {
        if item.trajectory.turns().first().map(|t| t.tokens()) != prompt {
            return Err(Error::Shape(format!("batch {} mixes task prompts", batch.prompt_id)));
        }
        if item.segments.len() != item.old_token_logprobs.len() {
            return Err(Error::Shape("old log-probabilities do not cover every segment".into()));
        }
        for (s, lp) in item.segments.iter().zip(&item.old_token_logprobs) {
            if s.stream.len() != lp.len() {
                return Err(Error::Shape("old log-probability length mismatch".into()));
            }
        }
    }
    Ok(())
}

/// Clipped surrogate loss `−mean_i min(ρ_i Â_i, clip(ρ_i) Â_i)` over one
/// rollout group, with its gradient through assistant tokens only.
pub fn grpo_update(
    params: &PolicyParameters,
    batch: &RolloutBatch,
    config: &GrpoConfig,
) -> Result<(GradientSet, UpdateDiagnostics)> {
    check_batch(batch)?;
    let returns: Vec<f64> = batch.items.iter().map(|i| i.episode_return.value).collect();
    let group = group_advantages(&returns, config)?;
    let n = batch.items.len() as f64;
    let eps = config.clip_epsilon;
    let net = params.network().with_temperature(batch.temperature)?;
    let mut grads = GradientSet::zeros_like(params);
    let mut total = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;

    for (item, &adv) in batch.items.iter().zip(&group.advantages) {
        let new_lp = network_logprobs(&net, &item.segments)?;
        match config.ratio_mode {
            RatioMode::Trajectory => {
                let new: f64 = new_lp.iter().flatten().sum();
                let raw = new - item.old_logprob();
                let ratio = trajectory_ratio(new, item.old_logprob(), config);
                ratio_sum += ratio;
                total += clipped_objective(ratio, adv, eps);
                let active = !clip_active(ratio, adv, eps) && raw.abs() < config.log_ratio_clamp;
                if clip_active(ratio, adv, eps) {
                    clipped += 1;
                }
                if active && adv != 0.0 {
                    let w = -adv * ratio / n;
                    accumulate(&net, &item.segments, |_, _| w, &mut grads)?;
                }
            }
            RatioMode::PerToken => {
                let count: usize = item.segments.iter().map(|s| s.mask.bits().iter().skip(1).filter(|b| **b).count()).sum();
                if count == 0 {
                    ratio_sum += 1.0;
                    continue;
                }
                let mut contrib = 0.0;
                let mut ratios = vec![];
                let mut any_clipped = false;
                for (si, seg) in item.segments.iter().enumerate() {
                    let mut r = vec![0.0; seg.stream.len()];
                    for t in 1..seg.stream.len() {
                        if seg.mask.bits()[t] {
                            let raw = new_lp[si][t] - item.old_token_logprobs[si][t];
                            let rho = trajectory_ratio(new_lp[si][t], item.old_token_logprobs[si][t], config);
                            contrib += clipped_objective(rho, adv, eps);
                            ratio_sum += rho / count as f64;
                            any_clipped |= clip_active(rho, adv, eps);
                            let active = !clip_active(rho, adv, eps) && raw.abs() < config.log_ratio_clamp;
                            r[t] = if active { -adv * rho / (n * count as f64) } else { 0.0 };
                        }
                    }
                    ratios.push(r);
                }
                total += contrib / count as f64;
                clipped += usize::from(any_clipped);
                if adv != 0.0 {
                    accumulate(&net, &item.segments, |s, t| ratios[s][t], &mut grads)?;
                }
            }
        }
    }
    let loss = -total / n;
    if !loss.is_finite() {
        return Err(Error::GradientOverflow);
    }
    let (mean_return, return_std) = mean_std(&returns);
    Ok((
        grads,
        UpdateDiagnostics {
            loss,
            mean_return,
            return_std,
            mean_ratio: ratio_sum / n,
            clip_fraction: clipped as f64 / n,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::trajectory::{build_mask, total_return, Terminal, Turn};
    use crate::vocab::{BOS, EOS};
    use proptest::prelude::*;

    fn cfg() -> GrpoConfig {
        GrpoConfig::default()
    }

    fn tiny() -> PolicyParameters {
        let c = PolicyConfig { vocab_size: 16, embed_dim: 8, context_len: 32, n_layers: 1, n_heads: 1, lora_rank: 2, lora_alpha: 1.0 };
        let mut p = PolicyParameters::init(c, 3).unwrap();
        p.randomize_adapters(0.2, 4);
        p
    }

    fn descend(p: &mut PolicyParameters, g: &GradientSet, lr: f64) {
        for (m, grad) in p.trainable_arrays_mut().into_iter().zip(g.arrays()) {
            for (x, d) in m.data.iter_mut().zip(grad) {
                *x -= (lr * d) as f32;
            }
        }
    }

    fn completion(tokens: &[u32], context: usize) -> Completion {
        let stream: Vec<Token> = tokens.iter().map(|t| Token(*t)).collect();
        let bits = (0..stream.len()).map(|t| t >= context).collect();
        Completion { segments: vec![Segment::new(stream, TokenMask::from_bits(bits)).unwrap()] }
    }

    fn rollout(p: &PolicyParameters, turns: &[(&[u32], bool)], ret: f64) -> RolloutItem {
        let turns: Vec<Turn> = turns
            .iter()
            .enumerate()
            .map(|(i, (toks, asst))| {
                let toks = toks.iter().map(|t| Token(*t)).collect();
                if *asst { Turn::assistant(toks, i) } else { Turn::user(toks, i) }.unwrap()
            })
            .collect();
        let trajectory = Trajectory::from_turns(turns, Terminal::StepBudgetExhausted).unwrap();
        let seg = Segment::new(trajectory.flatten(), build_mask(&trajectory).unwrap()).unwrap();
        let old = segment_logprobs(p, std::slice::from_ref(&seg)).unwrap();
        RolloutItem {
            trajectory,
            episode_return: total_return(&[ret]).unwrap(),
            segments: vec![seg],
            old_token_logprobs: old,
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0; 4], &cfg()).unwrap().advantages, vec![0.0; 4]);
        let a = group_advantages(&[1.2, 0.2, 0.2, 0.2], &cfg()).unwrap().advantages;
        for (x, y) in a.iter().zip([0.75, -0.25, -0.25, -0.25]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(group_advantages(&[2.0, 0.0], &cfg()).unwrap().advantages, vec![1.0, -1.0]);
        assert!(matches!(group_advantages(&[1.0], &cfg()), Err(Error::GroupTooSmall(1))));
        let norm = GrpoConfig { std_normalize: true, ..cfg() };
        let a = group_advantages(&[2.0, 0.0], &norm).unwrap().advantages;
        assert!((a[0] - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(trajectory_ratio(-3.0, -3.0, &cfg()), 1.0);
        assert!((trajectory_ratio(2f64.ln(), 0.0, &cfg()) - 2.0).abs() < 1e-15);
        assert_eq!(trajectory_ratio(100.0, 0.0, &cfg()), 20f64.exp());
        assert_eq!(trajectory_ratio(0.0, 100.0, &cfg()), (-20f64).exp());
    }

    #[test]
    fn clip_examples() {
        assert!((clipped_objective(1.5, 0.5, 0.2) - 0.6).abs() < 1e-15);
        assert!((clipped_objective(0.5, -1.0, 0.2) - -0.8).abs() < 1e-15);
        for a in [-2.0, -0.1, 0.0, 0.3, 5.0] {
            for e in [0.05, 0.2, 0.9] {
                assert_eq!(clipped_objective(1.0, a, e), a);
            }
        }
    }

    #[test]
    fn offline_zero_and_negated_advantages() {
        let p = tiny();
        let group = vec![completion(&[0, 9, 10, 11, 1], 2), completion(&[0, 9, 12, 1], 2)];
        let (loss, g) = offline_objective(&p, &group, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
        let (l1, g1) = offline_objective(&p, &group, &[0.5, -0.5], 1.0).unwrap();
        let (l2, g2) = offline_objective(&p, &group, &[-0.5, 0.5], 1.0).unwrap();
        assert_eq!(l1, -l2);
        assert_eq!(g1.flatten(), g2.flatten().iter().map(|x| -x).collect::<Vec<_>>());
        assert!(offline_objective(&p, &group, &[1.0], 1.0).is_err());
    }

    #[test]
    fn positive_advantage_step_raises_logprob() {
        let mut p = tiny();
        let group = vec![completion(&[0, 9, 10, 11, 1], 2)];
        let before = sequence_score(&p, &group[0].segments).unwrap();
        let (_, g) = offline_objective(&p, &group, &[1.0], 1.0).unwrap();
        descend(&mut p, &g, 1e-2);
        let after = sequence_score(&p, &group[0].segments).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn on_policy_update_has_unit_ratio_and_zero_loss() {
        let p = tiny();
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 11, 1], true), (&[6, 12], false), (&[13, 1], true)], 1.2),
            rollout(&p, &[(&[0, 9], false), (&[14, 1], true)], 0.2),
            rollout(&p, &[(&[0, 9], false), (&[11, 11, 1], true), (&[6, 9], false)], -0.1),
        ];
        let batch = RolloutBatch { prompt_id: "p".into(), items, temperature: 1.0 };
        let (g, d) = grpo_update(&p, &batch, &cfg()).unwrap();
        assert!((d.mean_ratio - 1.0).abs() < 1e-12);
        assert!(d.loss.abs() < 1e-12);
        assert_eq!(d.clip_fraction, 0.0);
        assert!(!g.is_zero());
    }

    #[test]
    fn equal_returns_give_zero_update() {
        let p = tiny();
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 1], true)], 0.3),
            rollout(&p, &[(&[0, 9], false), (&[12, 1], true)], 0.3),
        ];
        let (g, d) = grpo_update(&p, &RolloutBatch { prompt_id: "p".into(), items, temperature: 1.0 }, &cfg()).unwrap();
        assert!(g.is_zero());
        assert_eq!(d.loss, 0.0);
        let err = grpo_update(&p, &RolloutBatch { prompt_id: "p".into(), items: vec![], temperature: 1.0 }, &cfg());
        assert!(matches!(err, Err(Error::EmptyBatch)));
    }

    #[test]
    fn mixed_prompts_are_rejected() {
        let p = tiny();
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 1], true)], 0.3),
            rollout(&p, &[(&[0, 10], false), (&[12, 1], true)], 0.1),
        ];
        assert!(grpo_update(&p, &RolloutBatch { prompt_id: "p".into(), items, temperature: 1.0 }, &cfg()).is_err());
    }

    #[test]
    fn trajectory_gradient_matches_manual_weighting() {
        // With ρ = 1 and no clipping the surrogate gradient equals the
        // advantage-weighted log-probability gradient divided by N.
        let p = tiny();
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 11, 1], true), (&[6, 12], false), (&[13, EOS.0], true)], 1.0),
            rollout(&p, &[(&[BOS.0, 9], false), (&[14, 1], true)], 0.0),
        ];
        let batch = RolloutBatch { prompt_id: "p".into(), items: items.clone(), temperature: 1.0 };
        let (g, _) = grpo_update(&p, &batch, &cfg()).unwrap();
        let group: Vec<Completion> = items.iter().map(|i| Completion { segments: i.segments.clone() }).collect();
        let (_, reference) = offline_objective(&p, &group, &[0.25, -0.25], 1.0).unwrap();
        for (a, b) in g.flatten().iter().zip(reference.flatten()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn per_token_mode_is_on_policy_neutral() {
        let p = tiny();
        let config = GrpoConfig { ratio_mode: RatioMode::PerToken, ..cfg() };
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 11, 1], true)], 1.0),
            rollout(&p, &[(&[0, 9], false), (&[14, 1], true)], 0.0),
        ];
        let (g, d) = grpo_update(&p, &RolloutBatch { prompt_id: "p".into(), items, temperature: 1.0 }, &config).unwrap();
        assert!((d.mean_ratio - 1.0).abs() < 1e-12);
        assert!(d.loss.abs() < 1e-12);
        assert!(!g.is_zero());
    }

    #[test]
    fn clipped_trajectories_carry_no_gradient() {
        let mut p = tiny();
        let items = vec![
            rollout(&p, &[(&[0, 9], false), (&[10, 11, 1], true)], 1.0),
            rollout(&p, &[(&[0, 9], false), (&[14, 1], true)], 0.0),
        ];
        // Push the first trajectory's probability far up so ρ > 1 + ε.
        let group = vec![Completion { segments: items[0].segments.clone() }];
        for _ in 0..200 {
            let (_, g) = offline_objective(&p, &group, &[1.0], 1.0).unwrap();
            descend(&mut p, &g, 0.05);
        }
        let batch = RolloutBatch { prompt_id: "p".into(), items, temperature: 1.0 };
        let (_, d) = grpo_update(&p, &batch, &cfg()).unwrap();
        assert!(d.clip_fraction > 0.0);
        assert!(d.mean_ratio > 1.0);
    }

    proptest! {
        #[test]
        fn advantages_are_centered(returns in prop::collection::vec(-2.0f64..2.0, 2..12)) {
            let a = group_advantages(&returns, &cfg()).unwrap();
            prop_assert!(a.advantages.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn clip_is_bounded(ratio in 0.0f64..5.0, adv in -3.0f64..3.0, eps in 0.01f64..0.9) {
            let c = clipped_objective(ratio, adv, eps);
            prop_assert!(c <= ratio * adv + 1e-15);
            prop_assert!(c.abs() <= (adv.abs() * (1.0 + eps)).max(adv.abs() * ratio) + 1e-12);
        }
    }
}
