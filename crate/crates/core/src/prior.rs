//! Hierarchical reliability-weighted prior over experts.
//!
//! The tree pools Laplace-smoothed expert error statistics from the global
//! cohort down to availability families and hybrid groups, converts them to
//! badness-weighted distributions, and shrinks each level toward its parent
//! with count-based weights. Built on the training split only and frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::groups::{GroupId, GroupModel};
use crate::state::DecisionState;

/// Floor applied to prior mass inside KL terms and to stored support
/// entries that underflowed.
pub const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorHyper {
    /// Family-level pseudo-count.
    pub n_fam0: f64,
    /// Group-level pseudo-count.
    pub n_grp0: f64,
    /// Global bleed-through weight.
    pub rho_glob: f64,
    pub u_glob: f64,
    pub u_fam: f64,
    pub u_grp: f64,
    /// Concentration toward low-badness experts.
    pub tau_bad: f64,
    /// Minimum observed labels for group-level eligibility.
    pub n_min_grp: usize,
    /// Minimum observed labels for family/global eligibility.
    pub n_min_fam: usize,
    /// Optional capacity multipliers v_j (empty = all ones).
    pub capacity: Vec<f64>,
}

impl Default for PriorHyper {
    fn default() -> Self {
        PriorHyper {
            n_fam0: 20.0,
            n_grp0: 10.0,
            rho_glob: 0.1,
            u_glob: 0.05,
            u_fam: 0.05,
            u_grp: 0.05,
            tau_bad: 1.0,
            n_min_grp: 5,
            n_min_fam: 1,
            capacity: Vec::new(),
        }
    }
}

/// Per-expert reliability estimates over one subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertReliability {
    pub labels: usize,
    pub fnr: f64,
    pub fpr: f64,
    pub badness: f64,
}

/// One level's prior: its support, the mixed distribution, the evidence it
/// was built from, and the shrinkage weights used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelPrior {
    pub n_rows: usize,
    pub support: Vec<usize>,
    /// Length-M distribution, exactly zero off support.
    pub probs: Vec<f64>,
    pub reliability: Vec<Option<ExpertReliability>>,
    pub weight_self: f64,
    pub weight_parent: f64,
    pub weight_global: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorTree {
    pub n_experts: usize,
    pub hyper: PriorHyper,
    pub global: Option<LevelPrior>,
    pub families: BTreeMap<usize, LevelPrior>,
    pub groups: BTreeMap<GroupId, LevelPrior>,
}

struct SubsetEvidence {
    n_rows: usize,
    support: Vec<usize>,
    reliability: Vec<Option<ExpertReliability>>,
    /// Badness-weighted distribution on the eligible support, uniform-mixed.
    nu_hat: Option<Vec<f64>>,
}

fn subset_evidence(
    rows: &[&DecisionState],
    cfg: &CostConfig,
    hyper: &PriorHyper,
    n_experts: usize,
    n_min: usize,
    u_level: f64,
) -> SubsetEvidence {
    let mut n1 = vec![0usize; n_experts];
    let mut fn_cnt = vec![0usize; n_experts];
    let mut n0 = vec![0usize; n_experts];
    let mut fp_cnt = vec![0usize; n_experts];
    for row in rows {
        for j in 0..n_experts {
            if let Some(yhat) = row.expert_labels[j].as_u8() {
                if row.y == 1 {
                    n1[j] += 1;
                    if yhat == 0 {
                        fn_cnt[j] += 1;
                    }
                } else {
                    n0[j] += 1;
                    if yhat == 1 {
                        fp_cnt[j] += 1;
                    }
                }
            }
        }
    }
    let mut support = Vec::new();
    let mut reliability: Vec<Option<ExpertReliability>> = vec![None; n_experts];
    for j in 0..n_experts {
        let labels = n1[j] + n0[j];
        if labels == 0 {
            continue;
        }
        support.push(j);
        let fnr = (fn_cnt[j] as f64 + 1.0) / (n1[j] as f64 + 2.0);
        let fpr = (fp_cnt[j] as f64 + 1.0) / (n0[j] as f64 + 2.0);
        let badness = cfg.c_fn_prior * fnr + cfg.c_fp_prior * fpr + cfg.kappa[j];
        reliability[j] = Some(ExpertReliability {
            labels,
            fnr,
            fpr,
            badness,
        });
    }
    let eligible: Vec<usize> = support
        .iter()
        .copied()
        .filter(|&j| reliability[j].as_ref().unwrap().labels >= n_min)
        .collect();
    let nu_hat = if eligible.is_empty() {
        None
    } else {
        let cap = |j: usize| -> f64 {
            if hyper.capacity.is_empty() {
                1.0
            } else {
                hyper.capacity[j]
            }
        };
        let b_min = eligible
            .iter()
            .map(|&j| reliability[j].as_ref().unwrap().badness)
            .fold(f64::INFINITY, f64::min);
        let mut nu = vec![0.0; n_experts];
        let mut z = 0.0;
        for &j in &eligible {
            let b = reliability[j].as_ref().unwrap().badness;
            let w = cap(j) * (-(hyper.tau_bad) * (b - b_min)).exp();
            nu[j] = w;
            z += w;
        }
        let unif = 1.0 / eligible.len() as f64;
        for &j in &eligible {
            nu[j] = (1.0 - u_level) * nu[j] / z + u_level * unif;
        }
        Some(nu)
    };
    SubsetEvidence {
        n_rows: rows.len(),
        support,
        reliability,
        nu_hat,
    }
}

/// Restricts a mixture to `support`, renormalizes, and floors underflowed
/// support entries so every stored prior is strictly positive there.
fn restrict_and_normalize(mix: Vec<f64>, support: &[usize], n_experts: usize) -> Option<Vec<f64>> {
    let mut probs = vec![0.0; n_experts];
    let mut total = 0.0;
    for &j in support {
        probs[j] = mix[j].max(0.0);
        total += probs[j];
    }
    if total <= 0.0 {
        return None;
    }
    for &j in support {
        probs[j] /= total;
    }
    let mut refloor = false;
    for &j in support {
        if probs[j] < PRIOR_FLOOR {
            probs[j] = PRIOR_FLOOR;
            refloor = true;
        }
    }
    if refloor {
        let z: f64 = support.iter().map(|&j| probs[j]).sum();
        for &j in support {
            probs[j] /= z;
        }
    }
    Some(probs)
}

impl PriorTree {
    /// Builds the tree from training rows. Group ids come from the fitted
    /// `GroupModel`; rows whose group cannot be resolved are skipped.
    pub fn build(
        rows: &[&DecisionState],
        model: &GroupModel,
        cfg: &CostConfig,
        hyper: &PriorHyper,
    ) -> PriorTree {
        let n_experts = cfg.kappa.len();
        let glob_ev = subset_evidence(rows, cfg, hyper, n_experts, hyper.n_min_fam, hyper.u_glob);
        let global = glob_ev.nu_hat.clone().map(|nu| LevelPrior {
            n_rows: glob_ev.n_rows,
            support: glob_ev.support.clone(),
            probs: restrict_and_normalize(nu, &glob_ev.support, n_experts)
                .expect("global prior must normalize"),
            reliability: glob_ev.reliability.clone(),
            weight_self: 1.0,
            weight_parent: 0.0,
            weight_global: 0.0,
        });

        let mut by_family: BTreeMap<usize, Vec<&DecisionState>> = BTreeMap::new();
        let mut by_group: BTreeMap<GroupId, Vec<&DecisionState>> = BTreeMap::new();
        for row in rows {
            if let Some(g) = model.assign(row) {
                by_family.entry(g.family).or_default().push(row);
                by_group.entry(g).or_default().push(row);
            }
        }

        let mut families = BTreeMap::new();
        for (&fam, fam_rows) in &by_family {
            let ev = subset_evidence(fam_rows, cfg, hyper, n_experts, hyper.n_min_fam, hyper.u_fam);
            if ev.support.is_empty() {
                continue;
            }
            let a_f = ev.n_rows as f64 / (ev.n_rows as f64 + hyper.n_fam0);
            let (w_self, w_glob) = match (&ev.nu_hat, &global) {
                (Some(_), Some(_)) => (a_f, 1.0 - a_f),
                (Some(_), None) => (1.0, 0.0),
                (None, Some(_)) => (0.0, 1.0),
                (None, None) => continue,
            };
            let mut mix = vec![0.0; n_experts];
            if let Some(nu) = &ev.nu_hat {
                for j in 0..n_experts {
                    mix[j] += w_self * nu[j];
                }
            }
            if let Some(g) = &global {
                for j in 0..n_experts {
                    mix[j] += w_glob * g.probs[j];
                }
            }
            if let Some(probs) = restrict_and_normalize(mix, &ev.support, n_experts) {
                families.insert(
                    fam,
                    LevelPrior {
                        n_rows: ev.n_rows,
                        support: ev.support,
                        probs,
                        reliability: ev.reliability,
                        weight_self: w_self,
                        weight_parent: 0.0,
                        weight_global: w_glob,
                    },
                );
            }
        }

        let mut groups = BTreeMap::new();
        for (&gid, grp_rows) in &by_group {
            let ev = subset_evidence(grp_rows, cfg, hyper, n_experts, hyper.n_min_grp, hyper.u_grp);
            if ev.support.is_empty() {
                continue;
            }
            let parent = families.get(&gid.family);
            // a_g capped at 1 - rho_glob so the three weights sum to one.
            let rho = if global.is_some() { hyper.rho_glob } else { 0.0 };
            let a_raw = ev.n_rows as f64 / (ev.n_rows as f64 + hyper.n_grp0);
            let mut w_self = if ev.nu_hat.is_some() {
                a_raw.min(1.0 - rho)
            } else {
                0.0
            };
            let mut w_parent = if parent.is_some() {
                (1.0 - w_self - rho).max(0.0)
            } else {
                0.0
            };
            let mut w_glob = rho;
            let total = w_self + w_parent + w_glob;
            if total <= 0.0 {
                continue;
            }
            w_self /= total;
            w_parent /= total;
            w_glob /= total;
            let mut mix = vec![0.0; n_experts];
            if let Some(nu) = &ev.nu_hat {
                for j in 0..n_experts {
                    mix[j] += w_self * nu[j];
                }
            }
            if let Some(p) = parent {
                for j in 0..n_experts {
                    mix[j] += w_parent * p.probs[j];
                }
            }
            if let Some(g) = &global {
                for j in 0..n_experts {
                    mix[j] += w_glob * g.probs[j];
                }
            }
            if let Some(probs) = restrict_and_normalize(mix, &ev.support, n_experts) {
                groups.insert(
                    gid,
                    LevelPrior {
                        n_rows: ev.n_rows,
                        support: ev.support,
                        probs,
                        reliability: ev.reliability,
                        weight_self: w_self,
                        weight_parent: w_parent,
                        weight_global: w_glob,
                    },
                );
            }
        }

        PriorTree {
            n_experts,
            hyper: hyper.clone(),
            global,
            families,
            groups,
        }
    }

    /// Group prior distribution, or `None` when the group is undefined
    /// (unseen or empty support); such groups contribute no GSDP loss.
    pub fn group_prior(&self, g: GroupId) -> Option<&LevelPrior> {
        self.groups.get(&g)
    }

    /// Human-readable audit report of supports, badness, priors, and
    /// shrinkage weights at every level.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let fmt_level = |out: &mut String, name: &str, lp: &LevelPrior| {
            let _ = writeln!(
                out,
                "{name}: n={} support={:?} weights(self/parent/global)=({:.4},{:.4},{:.4})",
                lp.n_rows, lp.support, lp.weight_self, lp.weight_parent, lp.weight_global
            );
            for &j in &lp.support {
                let r = lp.reliability[j].as_ref().unwrap();
                let _ = writeln!(
                    out,
                    "  expert_{:<3} labels={:<5} fnr={:.4} fpr={:.4} badness={:.4} prior={:.6}",
                    j + 1,
                    r.labels,
                    r.fnr,
                    r.fpr,
                    r.badness,
                    lp.probs[j]
                );
            }
        };
        match &self.global {
            Some(g) => fmt_level(&mut out, "global", g),
            None => out.push_str("global: undefined (no observed expert labels)\n"),
        }
        for (fam, lp) in &self.families {
            fmt_level(&mut out, &format!("family {fam}"), lp);
        }
        for (gid, lp) in &self.groups {
            fmt_level(
                &mut out,
                &format!("group ({}, {})", gid.family, gid.cluster),
                lp,
            );
        }
        out
    }
}
