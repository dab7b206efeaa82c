use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Site of the Gaussian perturbation in a soft or fuzzy step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoisePlacement {
    /// On the mixture embedding fed back as input.
    Embedding,
    /// On every logit, before the temperature softmax.
    Logits,
    /// On the `k` largest logits; all others are masked to `-inf`.
    LogitsTopK(usize),
    /// On the final hidden row, before decoding.
    FinalHidden,
}

impl fmt::Display for NoisePlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoisePlacement::Embedding => f.write_str("embedding"),
            NoisePlacement::Logits => f.write_str("logits"),
            NoisePlacement::LogitsTopK(k) => write!(f, "logits_topk:{k}"),
            NoisePlacement::FinalHidden => f.write_str("final_hidden"),
        }
    }
}

impl FromStr for NoisePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "embedding" => Ok(NoisePlacement::Embedding),
            "logits" => Ok(NoisePlacement::Logits),
            "final_hidden" => Ok(NoisePlacement::FinalHidden),
            _ => {
                let k = s
                    .strip_prefix("logits_topk:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "unknown noise placement {s:?} (embedding, logits, logits_topk:K, final_hidden)"
                        ))
                    })?;
                if k == 0 {
                    return Err(Error::InvalidConfig("logits_topk needs k >= 1".into()));
                }
                Ok(NoisePlacement::LogitsTopK(k))
            }
        }
    }
}

impl TryFrom<String> for NoisePlacement {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<NoisePlacement> for String {
    fn from(p: NoisePlacement) -> String {
        p.to_string()
    }
}

/// `clean + sigma * eps` with `eps` i.i.d. standard normal drawn from
/// `rng` in coordinate order. `sigma = 0` returns `clean` unchanged.
pub fn inject_noise<R: Rng + ?Sized>(clean: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    clean
        .iter()
        .map(|&c| {
            let eps: f64 = rng.sample(StandardNormal);
            if sigma == 0.0 {
                c
            } else {
                c + sigma * eps
            }
        })
        .collect()
}

/// Indices of the `k` largest values, in ascending index order; ties keep
/// the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn placement_strings_round_trip() {
        for p in [
            NoisePlacement::Embedding,
            NoisePlacement::Logits,
            NoisePlacement::LogitsTopK(5),
            NoisePlacement::FinalHidden,
        ] {
            assert_eq!(p.to_string().parse::<NoisePlacement>().unwrap(), p);
        }
        assert!("logits_topk:0".parse::<NoisePlacement>().is_err());
        assert!("everywhere".parse::<NoisePlacement>().is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let clean = vec![0.1, -3.0, f64::MAX];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_noise(&clean, 0.0, &mut rng), clean);
    }

    #[test]
    fn top_k_ties_go_low() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 1), vec![1]);
        assert_eq!(top_k_indices(&[0.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let sigma = 0.7;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let clean = [0.25, -1.0];
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let noisy = inject_noise(&clean, sigma, &mut rng);
            for c in 0..2 {
                let d = noisy[c] - clean[c];
                sums[c] += d;
                sq[c] += d * d;
            }
        }
        let target = sigma * sigma;
        for c in 0..2 {
            let mean = sums[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            // std of a sample variance of normals is sigma^2 sqrt(2/n)
            let se = target * (2.0 / n as f64).sqrt();
            assert!((var - target).abs() < 3.0 * se, "coordinate {c}: {var} vs {target}");
        }
    }
}
