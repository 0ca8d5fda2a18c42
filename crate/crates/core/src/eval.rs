//! Deployment-facing metrics: classification quality, cost accounting,
//! deferral statistics, expert-collapse diagnostics, and risk-stratified
//! cost curves.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::cost::CostConfig;
use crate::state::DecisionState;

/// One hard-routed sample.
#[derive(Debug, Clone)]
pub struct RoutedOutcome {
    pub id: String,
    pub cohort: String,
    pub y: u8,
    /// 0 = AI action, j >= 1 = expert j.
    pub hard_action: usize,
    pub final_pred: u8,
    pub defer_soft: f64,
    /// Action probabilities over AI + M experts.
    pub pi: Vec<f64>,
    pub vcdr: f64,
    pub acdr: f64,
    pub vim_risk_z: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationBlock {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Standard confusion-matrix metrics; MCC and ratio metrics use the
/// zero-denominator-means-zero convention.
pub fn confusion_metrics(outcomes: &[RoutedOutcome]) -> ClassificationBlock {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for o in outcomes {
        match (o.y, o.final_pred) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => unreachable!("labels are binary"),
        }
    }
    let n = outcomes.len() as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mcc_den =
        ((tp + fp) as f64 * (tp + fn_) as f64 * (tn + fp) as f64 * (tn + fn_) as f64).sqrt();
    let mcc = if mcc_den == 0.0 {
        0.0
    } else {
        (tp as f64 * tn as f64 - fp as f64 * fn_ as f64) / mcc_den
    };
    ClassificationBlock {
        tp,
        fp,
        fn_,
        tn,
        accuracy: if n == 0.0 { 0.0 } else { (tp + tn) as f64 / n },
        precision,
        recall,
        specificity: ratio(tn, tn + fp),
        f1,
        mcc,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostBlock {
    pub clinical: f64,
    pub expert: f64,
    pub total: f64,
}

/// Realized clinical cost of the final predictions plus the tier cost of
/// consulted experts, both averaged over every sample.
pub fn cost_metrics(outcomes: &[RoutedOutcome], cfg: &CostConfig) -> CostBlock {
    let n = outcomes.len() as f64;
    let mut clinical = 0.0;
    let mut expert = 0.0;
    for o in outcomes {
        clinical += match (o.y, o.final_pred) {
            (1, 0) => cfg.c_fn,
            (0, 1) => cfg.c_fp,
            _ => 0.0,
        };
        if o.hard_action >= 1 {
            expert += cfg.gamma_tier * cfg.kappa[o.hard_action - 1];
        }
    }
    clinical /= n;
    expert /= n;
    CostBlock {
        clinical,
        expert,
        total: clinical + expert,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeferralBlock {
    pub defer_soft: f64,
    pub defer_hard: f64,
    /// Mean action probability per expert over all samples.
    pub soft_loads: Vec<f64>,
    /// Hard routing frequency per expert over all samples.
    pub hard_freqs: Vec<f64>,
}

pub fn deferral_rates(outcomes: &[RoutedOutcome], n_experts: usize) -> DeferralBlock {
    let n = outcomes.len() as f64;
    let mut soft_loads = vec![0.0; n_experts];
    let mut hard_freqs = vec![0.0; n_experts];
    let mut defer_soft = 0.0;
    let mut defer_hard = 0.0;
    for o in outcomes {
        defer_soft += o.defer_soft;
        if o.hard_action >= 1 {
            defer_hard += 1.0;
            hard_freqs[o.hard_action - 1] += 1.0;
        }
        for j in 0..n_experts {
            soft_loads[j] += o.pi[j + 1];
        }
    }
    for v in soft_loads.iter_mut().chain(hard_freqs.iter_mut()) {
        *v /= n;
    }
    DeferralBlock {
        defer_soft: defer_soft / n,
        defer_hard: defer_hard / n,
        soft_loads,
        hard_freqs,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationStats {
    pub top1: f64,
    pub top2: f64,
    pub entropy: f64,
    pub entropy_norm: f64,
    pub entropy_collapse: f64,
    pub n_eff: f64,
    pub hhi: f64,
    pub hhi_norm: f64,
    pub gini_norm: f64,
}

/// Concentration measures of a frequency vector over M experts.
pub fn concentration_stats(freqs: &[f64]) -> Option<ConcentrationStats> {
    let m = freqs.len();
    let total: f64 = freqs.iter().sum();
    if m == 0 || total <= 0.0 {
        return None;
    }
    let f: Vec<f64> = freqs.iter().map(|&v| v / total).collect();
    let mut sorted = f.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top1 = sorted[0];
    let top2 = if m >= 2 { sorted[0] + sorted[1] } else { sorted[0] };
    let entropy: f64 = f.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let ln_m = (m as f64).ln();
    let entropy_norm = if m == 1 { 1.0 } else { entropy / ln_m };
    let hhi: f64 = f.iter().map(|&p| p * p).sum();
    let hhi_norm = if m == 1 {
        0.0
    } else {
        (hhi - 1.0 / m as f64) / (1.0 - 1.0 / m as f64)
    };
    // mean absolute difference Gini, rescaled by M/(M-1)
    let gini_norm = if m == 1 {
        0.0
    } else {
        let mut abs_diff = 0.0;
        for i in 0..m {
            for j in 0..m {
                abs_diff += (f[i] - f[j]).abs();
            }
        }
        let mean = 1.0 / m as f64;
        let gini = abs_diff / (2.0 * (m * m) as f64 * mean);
        gini * m as f64 / (m as f64 - 1.0)
    };
    Some(ConcentrationStats {
        top1,
        top2,
        entropy,
        entropy_norm,
        entropy_collapse: 1.0 - entropy_norm,
        n_eff: entropy.exp(),
        hhi,
        hhi_norm,
        gini_norm,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CollapseBlock {
    pub routed_n: usize,
    /// Concentration of hard routing frequencies over the routed subset.
    pub hard: Option<ConcentrationStats>,
    /// Concentration of normalized soft expert loads.
    pub soft: Option<ConcentrationStats>,
    pub load_cv_soft: Option<f64>,
    pub dead_frac_soft: Option<f64>,
}

/// Collapse diagnostics over the human-routed subset. An empty routed
/// subset leaves the block undefined.
pub fn collapse_diagnostics(outcomes: &[RoutedOutcome], n_experts: usize) -> CollapseBlock {
    let mut counts = vec![0.0; n_experts];
    let mut routed_n = 0usize;
    for o in outcomes {
        if o.hard_action >= 1 {
            counts[o.hard_action - 1] += 1.0;
            routed_n += 1;
        }
    }
    let hard = if routed_n == 0 {
        None
    } else {
        concentration_stats(&counts)
    };
    let soft_loads = deferral_rates(outcomes, n_experts).soft_loads;
    let soft_total: f64 = soft_loads.iter().sum();
    let soft = if soft_total > 0.0 {
        concentration_stats(&soft_loads)
    } else {
        None
    };
    let (load_cv_soft, dead_frac_soft) = if soft_total > 0.0 {
        let m = n_experts as f64;
        let mean = soft_total / m;
        let var = soft_loads.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / m;
        let cv = var.sqrt() / mean;
        let dead = soft_loads
            .iter()
            .filter(|&&v| v < soft_total / (10.0 * m))
            .count() as f64
            / m;
        (Some(cv), Some(dead))
    } else {
        (None, None)
    };
    CollapseBlock {
        routed_n,
        hard,
        soft,
        load_cv_soft,
        dead_frac_soft,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskAxis {
    Structural,
    Reliability,
}

impl std::fmt::Display for RiskAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RiskAxis::Structural => write!(f, "structural"),
            RiskAxis::Reliability => write!(f, "reliability"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskBin {
    pub bin: usize,
    pub n: usize,
    pub mean_clinical_cost: f64,
}

/// Average rank in [0,1], ties averaged.
fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 1 {
        return vec![0.5; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Per-quantile clinical cost along a risk axis. Fewer samples than bins
/// fall back to coarser binning (flagged by the returned bool).
pub fn risk_stratified_costs(
    outcomes: &[RoutedOutcome],
    axis: RiskAxis,
    n_bins: usize,
    cfg: &CostConfig,
) -> (Vec<RiskBin>, bool) {
    let n = outcomes.len();
    let (fa, fb): (Vec<f64>, Vec<f64>) = match axis {
        RiskAxis::Structural => (
            outcomes.iter().map(|o| o.vcdr).collect(),
            outcomes.iter().map(|o| o.acdr).collect(),
        ),
        RiskAxis::Reliability => (
            outcomes.iter().map(|o| o.vim_risk_z).collect(),
            outcomes.iter().map(|o| o.uncertainty).collect(),
        ),
    };
    let ra = rank_normalize(&fa);
    let rb = rank_normalize(&fb);
    let scores: Vec<f64> = ra.iter().zip(&rb).map(|(a, b)| 0.5 * (a + b)).collect();
    let coarsened = n < n_bins;
    let bins = n_bins.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        let members = &order[lo..hi];
        let mut cost = 0.0;
        for &i in members {
            let o = &outcomes[i];
            cost += match (o.y, o.final_pred) {
                (1, 0) => cfg.c_fn,
                (0, 1) => cfg.c_fp,
                _ => 0.0,
            };
        }
        out.push(RiskBin {
            bin: b,
            n: members.len(),
            mean_clinical_cost: if members.is_empty() {
                0.0
            } else {
                cost / members.len() as f64
            },
        });
    }
    (out, coarsened)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionBlock {
    pub n: usize,
    pub accuracy: f64,
    pub n_ai: usize,
    pub acc_ai: f64,
    pub n_routed: usize,
    pub acc_routed: f64,
    /// `N*Acc - (N_ai*Acc_ai + N_routed*Acc_routed)`; the identity says zero.
    pub identity_gap: f64,
}

pub fn decomposition(outcomes: &[RoutedOutcome]) -> DecompositionBlock {
    let n = outcomes.len();
    let correct = |o: &RoutedOutcome| (o.final_pred == o.y) as usize;
    let total_correct: usize = outcomes.iter().map(correct).sum();
    let ai: Vec<&RoutedOutcome> = outcomes.iter().filter(|o| o.hard_action == 0).collect();
    let routed: Vec<&RoutedOutcome> = outcomes.iter().filter(|o| o.hard_action != 0).collect();
    let ai_correct: usize = ai.iter().map(|o| correct(o)).sum();
    let routed_correct: usize = routed.iter().map(|o| correct(o)).sum();
    let acc = |c: usize, d: usize| if d == 0 { 0.0 } else { c as f64 / d as f64 };
    let accuracy = acc(total_correct, n);
    let acc_ai = acc(ai_correct, ai.len());
    let acc_routed = acc(routed_correct, routed.len());
    DecompositionBlock {
        n,
        accuracy,
        n_ai: ai.len(),
        acc_ai,
        n_routed: routed.len(),
        acc_routed,
        identity_gap: n as f64 * accuracy
            - (ai.len() as f64 * acc_ai + routed.len() as f64 * acc_routed),
    }
}

/// AI-only reference outcomes: every case keeps the frozen prediction.
pub fn ai_only_outcomes(rows: &[&DecisionState], n_experts: usize) -> Vec<RoutedOutcome> {
    rows.iter()
        .map(|r| {
            let mut pi = vec![0.0; n_experts + 1];
            pi[0] = 1.0;
            RoutedOutcome {
                id: r.id.clone(),
                cohort: r.cohort.clone(),
                y: r.y,
                hard_action: 0,
                final_pred: (r.prob_1 >= 0.5) as u8,
                defer_soft: 0.0,
                pi,
                vcdr: r.vcdr,
                acdr: r.acdr,
                vim_risk_z: r.vim_risk_z,
                uncertainty: r.uncertainty,
            }
        })
        .collect()
}

/// Uniform-random-defer reference: defer with probability `p_defer` to a
/// uniformly random feasible expert; AI otherwise.
pub fn uniform_defer_outcomes(
    rows: &[&DecisionState],
    n_experts: usize,
    p_defer: f64,
    stream: &crate::rng::NoiseStream,
) -> Vec<RoutedOutcome> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let feasible = r.mask.feasible_set();
            let k = feasible.len();
            let mut rng = stream.rng(crate::rng::domain::UNIFORM_REF, 0, i as u64);
            let d_eff = if k == 0 { 0.0 } else { p_defer };
            let deferred = k > 0 && rng.random_range(0.0..1.0) < p_defer;
            let mut pi = vec![0.0; n_experts + 1];
            pi[0] = 1.0 - d_eff;
            for &j in &feasible {
                pi[j + 1] = d_eff / k as f64;
            }
            let (hard_action, final_pred) = if deferred {
                let pick = feasible[rng.random_range(0..k)];
                let label = r.expert_labels[pick]
                    .as_u8()
                    .expect("feasible expert has a label");
                (pick + 1, label)
            } else {
                (0, (r.prob_1 >= 0.5) as u8)
            };
            RoutedOutcome {
                id: r.id.clone(),
                cohort: r.cohort.clone(),
                y: r.y,
                hard_action,
                final_pred,
                defer_soft: d_eff,
                pi,
                vcdr: r.vcdr,
                acdr: r.acdr,
                vim_risk_z: r.vim_risk_z,
                uncertainty: r.uncertainty,
            }
        })
        .collect()
}

/// One method's full metric block over a set of outcomes.
#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub n: usize,
    pub classification: ClassificationBlock,
    pub costs: CostBlock,
    pub deferral: DeferralBlock,
    pub collapse: CollapseBlock,
    pub decomposition: DecompositionBlock,
    pub per_cohort: BTreeMap<String, CohortBlock>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortBlock {
    pub n: usize,
    pub classification: ClassificationBlock,
    pub costs: CostBlock,
    pub defer_soft: f64,
    pub defer_hard: f64,
}

pub fn method_report(
    method: &str,
    outcomes: &[RoutedOutcome],
    n_experts: usize,
    cfg: &CostConfig,
) -> MethodReport {
    let mut per_cohort = BTreeMap::new();
    let mut by_cohort: BTreeMap<String, Vec<RoutedOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_cohort.entry(o.cohort.clone()).or_default().push(o.clone());
    }
    for (tag, subset) in by_cohort {
        let rates = deferral_rates(&subset, n_experts);
        per_cohort.insert(
            tag,
            CohortBlock {
                n: subset.len(),
                classification: confusion_metrics(&subset),
                costs: cost_metrics(&subset, cfg),
                defer_soft: rates.defer_soft,
                defer_hard: rates.defer_hard,
            },
        );
    }
    MethodReport {
        method: method.to_string(),
        n: outcomes.len(),
        classification: confusion_metrics(outcomes),
        costs: cost_metrics(outcomes, cfg),
        deferral: deferral_rates(outcomes, n_experts),
        collapse: collapse_diagnostics(outcomes, n_experts),
        decomposition: decomposition(outcomes),
        per_cohort,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn outcome(y: u8, pred: u8, action: usize, m: usize) -> RoutedOutcome {
        let mut pi = vec![0.0; m + 1];
        if action == 0 {
            pi[0] = 1.0;
        } else {
            pi[0] = 0.3;
            pi[action] = 0.7;
        }
        RoutedOutcome {
            id: "t".into(),
            cohort: "c".into(),
            y,
            hard_action: action,
            final_pred: pred,
            defer_soft: if action == 0 { 0.1 } else { 0.7 },
            pi,
            vcdr: 0.5,
            acdr: 0.3,
            vim_risk_z: 0.0,
            uncertainty: 0.2,
        }
    }

    #[test]
    fn perfect_predictions() {
        let outcomes = vec![outcome(1, 1, 0, 2), outcome(0, 0, 0, 2)];
        let c = confusion_metrics(&outcomes);
        assert_eq!(c.accuracy, 1.0);
        assert_eq!(c.f1, 1.0);
        assert_eq!(c.mcc, 1.0);
    }

    #[test]
    fn degenerate_mcc_is_zero() {
        // always predict positive on balanced truth
        let outcomes = vec![outcome(1, 1, 0, 2), outcome(0, 1, 0, 2)];
        let c = confusion_metrics(&outcomes);
        assert_eq!(c.mcc, 0.0);
    }

    #[test]
    fn confusion_example_2_1_1_6() {
        let mut outcomes = Vec::new();
        for _ in 0..2 {
            outcomes.push(outcome(1, 1, 0, 2));
        }
        outcomes.push(outcome(0, 1, 0, 2));
        outcomes.push(outcome(1, 0, 0, 2));
        for _ in 0..6 {
            outcomes.push(outcome(0, 0, 0, 2));
        }
        let c = confusion_metrics(&outcomes);
        assert_relative_eq!(c.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.recall, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.specificity, 6.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(c.f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.mcc, 11.0 / 21.0, epsilon = 1e-12);
        assert_relative_eq!(c.mcc, 0.523810, epsilon = 1e-6);
    }

    #[test]
    fn cost_examples() {
        let cfg = CostConfig {
            kappa: vec![0.2, 0.2],
            gamma_tier: 1.0,
            ..CostConfig::default()
        };
        // zero errors, zero deferrals
        let clean = vec![outcome(1, 1, 0, 2), outcome(0, 0, 0, 2)];
        let c = cost_metrics(&clean, &cfg);
        assert_eq!(c.clinical, 0.0);
        assert_eq!(c.expert, 0.0);
        assert_eq!(c.total, 0.0);

        // one FN among four
        let one_fn = vec![
            outcome(1, 0, 0, 2),
            outcome(0, 0, 0, 2),
            outcome(0, 0, 0, 2),
            outcome(1, 1, 0, 2),
        ];
        let c = cost_metrics(&one_fn, &cfg);
        assert_relative_eq!(c.clinical, 0.5, epsilon = 1e-12);

        // everything deferred to tier 0.2 with gamma 1
        let deferred = vec![outcome(1, 1, 1, 2), outcome(0, 0, 2, 2)];
        let c = cost_metrics(&deferred, &cfg);
        assert_relative_eq!(c.expert, 0.2, epsilon = 1e-12);
        assert_relative_eq!(c.total, c.clinical + c.expert, epsilon = 1e-15);
    }

    #[test]
    fn deferral_rates_mean() {
        let mut a = outcome(1, 1, 0, 2);
        a.defer_soft = 0.2;
        let mut b = outcome(1, 1, 1, 2);
        b.defer_soft = 0.6;
        let rates = deferral_rates(&[a, b], 2);
        assert_relative_eq!(rates.defer_soft, 0.4, epsilon = 1e-12);
        assert_relative_eq!(rates.defer_hard, 0.5, epsilon = 1e-12);
        // soft loads are column means of the action probabilities
        assert_relative_eq!(rates.soft_loads[0], (0.0 + 0.7) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn collapse_uniform_and_concentrated() {
        let m = 4;
        let uniform: Vec<RoutedOutcome> = (0..m).map(|j| outcome(1, 1, j + 1, m)).collect();
        let block = collapse_diagnostics(&uniform, m);
        let hard = block.hard.unwrap();
        assert_relative_eq!(hard.top1, 1.0 / m as f64, epsilon = 1e-12);
        assert_relative_eq!(hard.n_eff, m as f64, epsilon = 1e-9);
        assert_relative_eq!(hard.gini_norm, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hard.hhi_norm, 0.0, epsilon = 1e-12);

        let collapsed: Vec<RoutedOutcome> = (0..6).map(|_| outcome(1, 1, 1, m)).collect();
        let block = collapse_diagnostics(&collapsed, m);
        let hard = block.hard.unwrap();
        assert_relative_eq!(hard.top1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(hard.entropy_collapse, 1.0, epsilon = 1e-12);
        assert_relative_eq!(hard.n_eff, 1.0, epsilon = 1e-12);
        assert_relative_eq!(hard.gini_norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn collapse_formula_example() {
        let s = concentration_stats(&[0.5, 0.3, 0.2]).unwrap();
        assert_relative_eq!(s.entropy, 1.029653, epsilon = 1e-6);
        assert_relative_eq!(s.n_eff, s.entropy.exp(), epsilon = 1e-12);
        assert_relative_eq!(s.n_eff, 2.800094, epsilon = 1e-6);
        assert_relative_eq!(s.hhi, 0.38, epsilon = 1e-12);
        assert_relative_eq!(s.top2, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn empty_routed_subset_is_undefined() {
        let outcomes = vec![outcome(1, 1, 0, 3)];
        let block = collapse_diagnostics(&outcomes, 3);
        assert_eq!(block.routed_n, 0);
        assert!(block.hard.is_none());
    }

    #[test]
    fn risk_bins_match_sort_and_slice_oracle() {
        let cfg = CostConfig::default().with_default_tiers(2);
        let mut outcomes = Vec::new();
        for i in 0..10 {
            let mut o = outcome((i % 2) as u8, ((i + 1) % 2) as u8, 0, 2);
            o.vcdr = i as f64 / 10.0;
            o.acdr = i as f64 / 10.0;
            outcomes.push(o);
        }
        let (bins, warn) = risk_stratified_costs(&outcomes, RiskAxis::Structural, 5, &cfg);
        assert!(!warn);
        assert_eq!(bins.len(), 5);
        // oracle: samples sorted by vcdr fall in index order, 2 per bin
        for (b, bin) in bins.iter().enumerate() {
            let members = [2 * b, 2 * b + 1];
            let mut cost = 0.0;
            for &i in &members {
                let o = &outcomes[i];
                cost += match (o.y, o.final_pred) {
                    (1, 0) => cfg.c_fn,
                    (0, 1) => cfg.c_fp,
                    _ => 0.0,
                };
            }
            assert_relative_eq!(bin.mean_clinical_cost, cost / 2.0, epsilon = 1e-12);
            assert_eq!(bin.n, 2);
        }
    }

    #[test]
    fn degenerate_axis_single_bin_warning() {
        let cfg = CostConfig::default().with_default_tiers(2);
        let outcomes = vec![outcome(1, 1, 0, 2), outcome(0, 0, 0, 2)];
        let (bins, warn) = risk_stratified_costs(&outcomes, RiskAxis::Structural, 5, &cfg);
        assert!(warn);
        assert_eq!(bins.len(), 2);
    }

    #[test]
    fn decomposition_identity_holds() {
        let outcomes = vec![
            outcome(1, 1, 0, 2),
            outcome(0, 1, 0, 2),
            outcome(1, 1, 1, 2),
            outcome(0, 0, 2, 2),
            outcome(1, 0, 1, 2),
        ];
        let d = decomposition(&outcomes);
        assert!(d.identity_gap.abs() < 1e-9);
        assert_eq!(d.n_ai + d.n_routed, d.n);
    }

    #[test]
    fn collapse_invariant_under_expert_relabeling() {
        let m = 3;
        let outcomes: Vec<RoutedOutcome> = vec![
            outcome(1, 1, 1, m),
            outcome(1, 1, 1, m),
            outcome(0, 0, 2, m),
            outcome(1, 0, 3, m),
        ];
        let permuted: Vec<RoutedOutcome> = outcomes
            .iter()
            .map(|o| {
                let mut p = o.clone();
                p.hard_action = match o.hard_action {
                    1 => 3,
                    3 => 1,
                    a => a,
                };
                let mut pi = o.pi.clone();
                pi.swap(1, 3);
                p.pi = pi;
                p
            })
            .collect();
        let a = collapse_diagnostics(&outcomes, m).hard.unwrap();
        let b = collapse_diagnostics(&permuted, m).hard.unwrap();
        assert_relative_eq!(a.top1, b.top1);
        assert_relative_eq!(a.entropy, b.entropy, epsilon = 1e-12);
        assert_relative_eq!(a.gini_norm, b.gini_norm, epsilon = 1e-12);
    }
}
