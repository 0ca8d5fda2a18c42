//! Semi-synthetic expert panels: case-specific operating points and the
//! exact conditional Poisson-binomial correctness sampler.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::policy::sigmoid;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Baseline operating characteristics and modulation gains of one expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertProfile {
    /// Evidence-model weights (shared fit of geometry on the label).
    pub evidence_weights: [f64; 5],
    /// Calibration temperature for the evidence score.
    pub temperature: f64,
    pub se: f64,
    pub sp: f64,
    /// Sensitivity response to calibrated evidence.
    pub alpha: f64,
    /// Specificity response to calibrated evidence.
    pub gamma_mod: f64,
}

/// Global difficulty and modulation constants shared by every expert.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyGlobals {
    pub kappa_diff: f64,
    pub rho_ref: f64,
    pub b: f64,
    pub d: f64,
}

impl Default for DifficultyGlobals {
    fn default() -> Self {
        DifficultyGlobals {
            kappa_diff: 5.0,
            rho_ref: 0.5,
            b: 0.5,
            d: 0.5,
        }
    }
}

/// Case-specific operating point of one expert.
#[derive(Debug, Clone, Copy)]
pub struct OperatingPoint {
    pub se: f64,
    pub sp: f64,
    pub difficulty: f64,
}

/// Shifts the expert's baseline logits by calibrated evidence and the
/// geometry-only difficulty score `beta = exp(-kappa |vcdr_med - tau|)`.
pub fn operating_points(
    vcdr_med: f64,
    p_cal: f64,
    profile: &ExpertProfile,
    tau: f64,
    globals: &DifficultyGlobals,
) -> OperatingPoint {
    let beta = (-globals.kappa_diff * (vcdr_med - tau).abs()).exp();
    let se_logit = logit(profile.se) + profile.alpha * (p_cal - globals.rho_ref) - globals.b * beta;
    let sp_logit =
        logit(profile.sp) - profile.gamma_mod * (p_cal - globals.rho_ref) - globals.d * beta;
    OperatingPoint {
        se: sigmoid(se_logit),
        sp: sigmoid(sp_logit),
        difficulty: beta,
    }
}

/// Suffix table of the Poisson-binomial law: `table[j][s] = P(sum of
/// c_j..c_{J-1} equals s)`. The first row is the full pmf.
pub fn suffix_table(phi: &[f64]) -> Vec<Vec<f64>> {
    let j_total = phi.len();
    let mut table = vec![Vec::new(); j_total + 1];
    table[j_total] = vec![1.0];
    for j in (0..j_total).rev() {
        let next = &table[j + 1];
        let len = next.len() + 1;
        let mut row = vec![0.0; len];
        for s in 0..len {
            let stay = if s < next.len() { (1.0 - phi[j]) * next[s] } else { 0.0 };
            let take = if s >= 1 { phi[j] * next[s - 1] } else { 0.0 };
            row[s] = stay + take;
        }
        table[j] = row;
    }
    table
}

/// Poisson-binomial pmf of the number of correct experts.
pub fn poisson_binomial_pmf(phi: &[f64]) -> Vec<f64> {
    suffix_table(phi)[0].clone()
}

/// Draws a correctness vector conditioned on at least `k_min` correct
/// entries, exactly, via the suffix dynamic program: first the total count
/// from the truncated law, then each entry sequentially.
pub fn conditional_correctness_sampler<R: Rng>(
    phi: &[f64],
    k_min: usize,
    rng: &mut R,
) -> Result<Vec<u8>, SimError> {
    let j_total = phi.len();
    assert!(phi.iter().all(|&p| p > 0.0 && p < 1.0), "phi must lie in (0,1)");
    assert!(k_min <= j_total, "k_min cannot exceed the panel size");
    let table = suffix_table(phi);
    let z: f64 = table[0][k_min..].iter().sum();
    if z < 1e-300 {
        return Err(SimError::InfeasibleConstraint { k_min });
    }
    // draw K ~ P(K = k | K >= k_min)
    let u: f64 = rng.sample::<f64, _>(Open01) * z;
    let mut acc = 0.0;
    let mut k = j_total;
    for (cand, &p) in table[0].iter().enumerate().skip(k_min) {
        acc += p;
        if u <= acc {
            k = cand;
            break;
        }
    }
    // sequential conditional draws
    let mut c = vec![0u8; j_total];
    let mut remaining = k;
    for j in 0..j_total {
        if remaining == 0 {
            break;
        }
        let denom = table[j][remaining];
        let take = if remaining >= 1 && remaining - 1 < table[j + 1].len() {
            phi[j] * table[j + 1][remaining - 1] / denom
        } else {
            0.0
        };
        let u: f64 = rng.sample(Open01);
        if u < take {
            c[j] = 1;
            remaining -= 1;
        }
    }
    debug_assert_eq!(c.iter().filter(|&&v| v == 1).count(), k);
    Ok(c)
}

/// Expert labels from the correctness pattern: agree with the truth when
/// correct, flip it otherwise.
pub fn instantiate_expert_labels(y: u8, correctness: &[u8]) -> Vec<u8> {
    correctness
        .iter()
        .map(|&c| if c == 1 { y } else { 1 - y })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(se: f64, sp: f64, alpha: f64, gamma_mod: f64) -> ExpertProfile {
        ExpertProfile {
            evidence_weights: [0.0; 5],
            temperature: 1.0,
            se,
            sp,
            alpha,
            gamma_mod,
        }
    }

    #[test]
    fn unmodulated_profile_is_baseline() {
        let g = DifficultyGlobals {
            kappa_diff: 5.0,
            rho_ref: 0.5,
            b: 0.0,
            d: 0.0,
        };
        let op = operating_points(0.4, 0.9, &profile(0.8, 0.9, 0.0, 0.0), 0.6, &g);
        assert_relative_eq!(op.se, 0.8, epsilon = 1e-12);
        assert_relative_eq!(op.sp, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn borderline_case_is_maximally_difficult() {
        let g = DifficultyGlobals::default();
        let op = operating_points(0.6, 0.5, &profile(0.8, 0.9, 1.0, 1.0), 0.6, &g);
        assert_relative_eq!(op.difficulty, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn operating_point_closed_form() {
        let g = DifficultyGlobals {
            kappa_diff: 5.0,
            rho_ref: 0.5,
            b: 0.5,
            d: 0.0,
        };
        // difficulty 1 at the threshold; logit(0.8) + 2(0.9-0.5) - 0.5
        let op = operating_points(0.6, 0.9, &profile(0.8, 0.9, 2.0, 0.0), 0.6, &g);
        assert_relative_eq!(op.se, sigmoid(4.0f64.ln() + 0.8 - 0.5), epsilon = 1e-12);
        assert_relative_eq!(op.se, 0.843736, epsilon = 1e-5);
    }

    #[test]
    fn suffix_pmf_matches_direct_convolution() {
        let phi = [0.9, 0.8, 0.7, 0.35, 0.55];
        let pmf = poisson_binomial_pmf(&phi);
        // direct convolution oracle
        let mut conv = vec![1.0];
        for &p in &phi {
            let mut next = vec![0.0; conv.len() + 1];
            for (s, &v) in conv.iter().enumerate() {
                next[s] += (1.0 - p) * v;
                next[s + 1] += p * v;
            }
            conv = next;
        }
        for (a, b) in pmf.iter().zip(&conv) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn truncated_count_law_example() {
        // J = 3, phi = (0.9, 0.8, 0.7), k_min = 2
        let pmf = poisson_binomial_pmf(&[0.9, 0.8, 0.7]);
        let z = pmf[2] + pmf[3];
        assert_relative_eq!(pmf[3] / z, 0.558759, epsilon = 1e-6);
        assert_relative_eq!(pmf[2] / z, 0.441241, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained_marginals_match_phi() {
        let phi = [0.9, 0.5, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let c = conditional_correctness_sampler(&phi, 0, &mut rng).unwrap();
            for (j, &v) in c.iter().enumerate() {
                counts[j] += v as usize;
            }
        }
        for j in 0..3 {
            let emp = counts[j] as f64 / n as f64;
            let se = (phi[j] * (1.0 - phi[j]) / n as f64).sqrt();
            assert!(
                (emp - phi[j]).abs() < 3.0 * se + 1e-9,
                "expert {j}: {emp} vs {}",
                phi[j]
            );
        }
    }

    #[test]
    fn forced_correctness_all_ones() {
        let phi = [0.3, 0.6, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let c = conditional_correctness_sampler(&phi, 3, &mut rng).unwrap();
            assert_eq!(c, vec![1, 1, 1]);
        }
    }

    #[test]
    fn constraint_never_violated() {
        let phi = [0.4, 0.55, 0.3, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let c = conditional_correctness_sampler(&phi, 2, &mut rng).unwrap();
            assert!(c.iter().map(|&v| v as usize).sum::<usize>() >= 2);
        }
    }

    #[test]
    fn label_instantiation_rules() {
        assert_eq!(instantiate_expert_labels(1, &[1, 1, 1]), vec![1, 1, 1]);
        assert_eq!(instantiate_expert_labels(1, &[1, 0, 1]), vec![1, 0, 1]);
        assert_eq!(instantiate_expert_labels(0, &[1, 0]), vec![0, 1]);
    }

    #[test]
    fn label_marginal_matches_closed_form() {
        let phi = [0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let c = conditional_correctness_sampler(&phi, 0, &mut rng).unwrap();
            let labels = instantiate_expert_labels(0, &c);
            ones += labels[0] as usize;
        }
        // y = 0: P(label = 1) = 1 - phi
        let emp = ones as f64 / n as f64;
        let expect = 0.2;
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((emp - expect).abs() < 3.0 * se + 1e-9, "{emp}");
    }
}
