//! Temperature / nucleus token selection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_TOP_P: f64 = 1.0;
pub const DEFAULT_MAX_TOKENS: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("temperature must be finite and >= 0, got {0}")]
    Temperature(f64),
    #[error("top_p must be in (0, 1], got {0}")]
    TopP(f64),
    #[error("max_tokens must be positive")]
    MaxTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ParamError::Temperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ParamError::TopP(self.top_p));
        }
        if self.max_tokens == 0 {
            return Err(ParamError::MaxTokens);
        }
        Ok(())
    }
}

/// Picks an index from `probs`.
///
/// Temperature 0 is argmax with ties going to the smallest `name`. Otherwise
/// probabilities are raised to `1/T`, truncated to the smallest
/// highest-probability prefix reaching `top_p`, renormalized and sampled.
/// Returns `None` when every probability is zero.
pub fn select_token<'a, R: Rng + ?Sized>(
    probs: &[f64],
    name: impl Fn(usize) -> &'a str,
    params: &GenParams,
    rng: &mut R,
) -> Option<usize> {
    if params.temperature == 0.0 {
        let mut best: Option<usize> = None;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if p > probs[b] || (p == probs[b] && name(i) < name(b)) => Some(i),
                keep => keep,
            };
        }
        return best;
    }

    let inv_t = 1.0 / params.temperature;
    let mut cands: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i, p.ln() * inv_t))
        .collect();
    if cands.is_empty() {
        return None;
    }
    let max_logit = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    for c in cands.iter_mut() {
        c.1 = (c.1 - max_logit).exp();
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| name(a.0).cmp(name(b.0))));
    let total: f64 = cands.iter().map(|c| c.1).sum();
    let mut cum = 0.0;
    let mut keep = cands.len();
    for (i, c) in cands.iter().enumerate() {
        cum += c.1 / total;
        if cum >= params.top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    cands.truncate(keep);
    let kept: f64 = cands.iter().map(|c| c.1).sum();
    let mut u = rng.random::<f64>() * kept;
    for &(i, w) in &cands {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    cands.last().map(|c| c.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NAMES: [&str; 4] = ["d", "b", "a", "c"];

    fn name(i: usize) -> &'static str {
        NAMES[i]
    }

    #[test]
    fn greedy_tie_breaks_lexicographically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = [0.3, 0.3, 0.1, 0.3];
        assert_eq!(
            select_token(&probs, name, &GenParams::greedy(), &mut rng),
            Some(1)
        );
        assert_eq!(
            select_token(&[0.0; 4], name, &GenParams::greedy(), &mut rng),
            None
        );
    }

    #[test]
    fn nucleus_keeps_only_the_head() {
        let params = GenParams {
            temperature: 1.0,
            top_p: 0.5,
            ..GenParams::default()
        };
        let probs = [0.6, 0.2, 0.1, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            assert_eq!(select_token(&probs, name, &params, &mut rng), Some(0));
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let params = GenParams::default().with_temperature(0.8);
        let probs = [0.4, 0.3, 0.2, 0.1];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| select_token(&probs, name, &params, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let d = draw(5);
        assert!(d.iter().any(|&i| i != 0));
    }

    #[test]
    fn param_validation() {
        assert!(GenParams::default().validate().is_ok());
        assert!(GenParams {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenParams {
            top_p: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenParams {
            max_tokens: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
