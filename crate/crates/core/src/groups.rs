//! Hybrid group assignment: an availability-support family keyed by the
//! exact mask bit-pattern, refined by a within-family quantile cluster of
//! the frozen-AI probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::state::DecisionState;

/// Identifier of a hybrid group `(family, cluster)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub family: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FamilyInfo {
    id: usize,
    /// Quantile bin edges of `prob_1` within the family (len = n_clusters-1).
    edges: Vec<f64>,
}

/// Deterministic group assigner fit on the training split. Re-evaluating on
/// the same rows yields the same ids; unseen mask patterns map to `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupModel {
    n_clusters: usize,
    families: BTreeMap<u64, FamilyInfo>,
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

impl GroupModel {
    /// Fits families and per-family cluster edges. Family ids follow the
    /// ascending order of the mask bit patterns so ids are stable.
    pub fn fit(rows: &[&DecisionState], n_clusters: usize) -> Self {
        assert!(n_clusters >= 1);
        let mut by_pattern: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for row in rows {
            by_pattern
                .entry(row.mask.pattern_key())
                .or_default()
                .push(row.prob_1);
        }
        let mut families = BTreeMap::new();
        for (id, (pattern, mut probs)) in by_pattern.into_iter().enumerate() {
            probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let edges = (1..n_clusters)
                .map(|k| quantile_sorted(&probs, k as f64 / n_clusters as f64))
                .collect();
            families.insert(pattern, FamilyInfo { id, edges });
        }
        GroupModel {
            n_clusters,
            families,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Group of a state, or `None` when its mask pattern was unseen at fit
    /// time (such samples contribute no group-prior loss).
    pub fn assign(&self, state: &DecisionState) -> Option<GroupId> {
        let info = self.families.get(&state.mask.pattern_key())?;
        let cluster = info
            .edges
            .iter()
            .filter(|&&e| state.prob_1 >= e)
            .count()
            .min(self.n_clusters - 1);
        Some(GroupId {
            family: info.id,
            cluster,
        })
    }

    /// All group ids that can occur for the fitted families.
    pub fn group_ids(&self) -> Vec<GroupId> {
        let mut out = Vec::new();
        for info in self.families.values() {
            for cluster in 0..self.n_clusters {
                out.push(GroupId {
                    family: info.id,
                    cluster,
                });
            }
        }
        out
    }

    /// Mask pattern key of a family id, if present.
    pub fn family_pattern(&self, family: usize) -> Option<u64> {
        self.families
            .iter()
            .find(|(_, info)| info.id == family)
            .map(|(&pattern, _)| pattern)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ExpertMask;
    use crate::state::{ExpertLabel, Split};

    fn row(id: &str, prob_1: f64, bits: Vec<u8>) -> DecisionState {
        let labels = bits
            .iter()
            .map(|&b| if b == 1 { ExpertLabel::One } else { ExpertLabel::Na })
            .collect();
        DecisionState {
            id: id.into(),
            cohort: "c".into(),
            y: 1,
            logit_0: 0.0,
            logit_1: 0.0,
            prob_1,
            vim_risk_z: 0.0,
            quality_risk: 0.0,
            uncertainty: 1.0 - prob_1.max(1.0 - prob_1),
            vcdr: 0.5,
            acdr: 0.3,
            expert_labels: labels,
            mask: ExpertMask::new(bits),
            split: Split::Train,
        }
    }

    #[test]
    fn same_mask_same_bin_share_group() {
        let rows = vec![
            row("a", 0.1, vec![1, 1]),
            row("b", 0.12, vec![1, 1]),
            row("c", 0.8, vec![1, 1]),
            row("d", 0.9, vec![1, 1]),
        ];
        let refs: Vec<&DecisionState> = rows.iter().collect();
        let model = GroupModel::fit(&refs, 2);
        assert_eq!(model.assign(&rows[0]), model.assign(&rows[1]));
        assert_ne!(model.assign(&rows[0]), model.assign(&rows[3]));
    }

    #[test]
    fn different_masks_different_families() {
        let rows = vec![row("a", 0.5, vec![1, 0]), row("b", 0.5, vec![0, 1])];
        let refs: Vec<&DecisionState> = rows.iter().collect();
        let model = GroupModel::fit(&refs, 2);
        let ga = model.assign(&rows[0]).unwrap();
        let gb = model.assign(&rows[1]).unwrap();
        assert_ne!(ga.family, gb.family);
    }

    #[test]
    fn quantile_bins_match_oracle() {
        // family of 4 with prob_1 = (0.1, 0.2, 0.8, 0.9) and 2 bins
        let rows = vec![
            row("a", 0.1, vec![1]),
            row("b", 0.2, vec![1]),
            row("c", 0.8, vec![1]),
            row("d", 0.9, vec![1]),
        ];
        let refs: Vec<&DecisionState> = rows.iter().collect();
        let model = GroupModel::fit(&refs, 2);
        let clusters: Vec<usize> = rows.iter().map(|r| model.assign(r).unwrap().cluster).collect();
        assert_eq!(clusters, vec![0, 0, 1, 1]);
    }

    #[test]
    fn unseen_pattern_maps_to_none() {
        let rows = vec![row("a", 0.5, vec![1, 0])];
        let refs: Vec<&DecisionState> = rows.iter().collect();
        let model = GroupModel::fit(&refs, 2);
        let other = row("x", 0.5, vec![1, 1]);
        assert!(model.assign(&other).is_none());
    }
}
