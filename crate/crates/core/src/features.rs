//! Train-split feature standardization.
//!
//! The five network-scale features (`logit_0`, `logit_1`, `vim_risk_z`,
//! `quality_risk`, `uncertainty`) are z-scored with statistics fit on the
//! training split and reused verbatim elsewhere. `prob_1`, `vCDR`, and
//! `aCDR` stay on their native probability/ratio scale because the
//! structural head compares them on that scale.

use serde::{Deserialize, Serialize};

use crate::state::{CohortTable, DecisionState, Split};

pub const STANDARDIZED_FEATURES: [&str; 5] = [
    "logit_0",
    "logit_1",
    "vim_risk_z",
    "quality_risk",
    "uncertainty",
];

const STD_FLOOR: f64 = 1e-6;

/// Per-feature mean and population standard deviation, frozen after fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
    /// Names of features whose std hit the floor during fit.
    pub floored: Vec<String>,
}

fn feature_values(row: &DecisionState) -> [f64; 5] {
    [
        row.logit_0,
        row.logit_1,
        row.vim_risk_z,
        row.quality_risk,
        row.uncertainty,
    ]
}

impl FeatureStats {
    /// Fits on the training split only (population convention, std floored
    /// at 1e-6 with a warning record).
    pub fn fit(cohort: &CohortTable) -> Self {
        let rows = cohort.split_rows(Split::Train);
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 5];
        for row in &rows {
            let v = feature_values(row);
            for k in 0..5 {
                mean[k] += v[k];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0; 5];
        for row in &rows {
            let v = feature_values(row);
            for k in 0..5 {
                let d = v[k] - mean[k];
                var[k] += d * d;
            }
        }
        let mut std = [0.0; 5];
        let mut floored = Vec::new();
        for k in 0..5 {
            let s = (var[k] / n).sqrt();
            if s < STD_FLOOR {
                std[k] = STD_FLOOR;
                floored.push(STANDARDIZED_FEATURES[k].to_string());
            } else {
                std[k] = s;
            }
        }
        FeatureStats { mean, std, floored }
    }

    fn apply_row(&self, row: &DecisionState) -> DecisionState {
        let mut out = row.clone();
        out.logit_0 = (row.logit_0 - self.mean[0]) / self.std[0];
        out.logit_1 = (row.logit_1 - self.mean[1]) / self.std[1];
        out.vim_risk_z = (row.vim_risk_z - self.mean[2]) / self.std[2];
        out.quality_risk = (row.quality_risk - self.mean[3]) / self.std[3];
        out.uncertainty = (row.uncertainty - self.mean[4]) / self.std[4];
        out
    }

    /// Applies the frozen statistics to every row of a cohort.
    pub fn apply(&self, cohort: &CohortTable) -> CohortTable {
        CohortTable::new(
            cohort.n_experts,
            cohort.rows.iter().map(|r| self.apply_row(r)).collect(),
        )
    }
}

/// Fits on the train split and standardizes the whole table in one step.
pub fn standardize_features(cohort: &CohortTable) -> (CohortTable, FeatureStats) {
    let stats = FeatureStats::fit(cohort);
    (stats.apply(cohort), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ExpertMask;
    use crate::state::{DecisionState, ExpertLabel};
    use approx::assert_relative_eq;

    fn row(id: &str, vim: f64, split: Split) -> DecisionState {
        DecisionState {
            id: id.into(),
            cohort: "c".into(),
            y: 0,
            logit_0: 0.0,
            logit_1: 0.0,
            prob_1: 0.5,
            vim_risk_z: vim,
            quality_risk: 0.5,
            uncertainty: 0.5,
            vcdr: 0.5,
            acdr: 0.3,
            expert_labels: vec![ExpertLabel::Zero],
            mask: ExpertMask::new(vec![1]),
            split,
        }
    }

    #[test]
    fn constant_feature_maps_to_zero_with_warning() {
        let cohort = CohortTable::new(1, vec![row("a", 1.0, Split::Train), row("b", 1.0, Split::Train)]);
        let (std, stats) = standardize_features(&cohort);
        assert!(stats.floored.contains(&"vim_risk_z".to_string()));
        assert_eq!(std.rows[0].vim_risk_z, 0.0);
        assert_eq!(std.rows[1].vim_risk_z, 0.0);
    }

    #[test]
    fn population_convention() {
        // values (1,2,3): mean 2, population std sqrt(2/3)
        let cohort = CohortTable::new(
            1,
            vec![
                row("a", 1.0, Split::Train),
                row("b", 2.0, Split::Train),
                row("c", 3.0, Split::Train),
            ],
        );
        let (std, stats) = standardize_features(&cohort);
        assert_relative_eq!(stats.mean[2], 2.0);
        assert_relative_eq!(stats.std[2], (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(std.rows[2].vim_risk_z, 1.0 / (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn stats_frozen_across_splits() {
        let cohort = CohortTable::new(
            1,
            vec![
                row("a", 1.0, Split::Train),
                row("b", 3.0, Split::Train),
                row("c", 100.0, Split::Test),
            ],
        );
        let stats = FeatureStats::fit(&cohort);
        let before = stats.clone();
        let _ = stats.apply(&cohort);
        assert_eq!(stats, before);
        // test row standardized with train stats (mean 2, std 1)
        let out = stats.apply(&cohort);
        assert_relative_eq!(out.rows[2].vim_risk_z, 98.0, epsilon = 1e-12);
    }

    #[test]
    fn raw_scale_features_untouched() {
        let cohort = CohortTable::new(1, vec![row("a", 1.0, Split::Train), row("b", 5.0, Split::Train)]);
        let (std, _) = standardize_features(&cohort);
        assert_eq!(std.rows[0].prob_1, 0.5);
        assert_eq!(std.rows[0].vcdr, 0.5);
        assert_eq!(std.rows[0].acdr, 0.3);
    }
}
