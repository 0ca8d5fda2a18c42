//! Synthetic multi-expert cohort generation.
//!
//! Geometry is sampled from configurable annotation distributions, a
//! simulated frozen-AI probability is attached per sub-cohort, expert
//! labels come from the calibrated evidence / operating-point /
//! Poisson-binomial pipeline, and an optional sub-cohort is labeled by
//! embedding retrieval instead.

use std::collections::BTreeMap;

use rand::distr::Open01;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::mask::ExpertMask;
use crate::policy::sigmoid;
use crate::rng::{domain, NoiseStream};
use crate::sim::ellipse::{
    geometry_features, structural_biomarkers, Ellipse, EllipseAnnotation,
};
use crate::sim::evidence::{calibrate_temperature, fit_evidence_model, youden_threshold};
use crate::sim::panel::{
    conditional_correctness_sampler, instantiate_expert_labels, operating_points,
    DifficultyGlobals, ExpertProfile,
};
use crate::sim::retrieval::{l2_normalize, retrieve_pseudo_labels, EmbeddingPair, PoolRow};
use crate::state::{CohortTable, DecisionState, ExpertLabel, Split};

/// Availability-mask regime of one sub-cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskRegime {
    /// A fixed block of experts is available for every case (1-based ids).
    Block { experts: Vec<usize> },
    /// Each expert is independently available at the given rate.
    Random { rate: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubCohortSpec {
    pub name: String,
    pub fraction: f64,
    /// Slope of the simulated AI logit in the realized vCDR.
    pub ai_scale: f64,
    /// Additive logit shift (miscalibration under shift).
    pub ai_shift: f64,
    /// Logit noise standard deviation.
    pub ai_noise: f64,
    /// Out-of-distribution severity driving the OOD score feature.
    pub ood_level: f64,
    pub mask: MaskRegime,
    /// Label this sub-cohort by retrieval instead of the expert panel.
    #[serde(default)]
    pub retrieval_labels: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertSpec {
    pub se: f64,
    pub sp: f64,
    pub alpha: f64,
    pub gamma_mod: f64,
}

impl Default for ExpertSpec {
    fn default() -> Self {
        ExpertSpec {
            se: 0.8,
            sp: 0.9,
            alpha: 1.0,
            gamma_mod: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSpec {
    /// Log-normal parameters of the disc vertical size (pixels).
    pub disc_log_mean: f64,
    pub disc_log_sd: f64,
    /// Beta shape parameters of the target vCDR per class.
    pub vcdr_neg_shape: [f64; 2],
    pub vcdr_pos_shape: [f64; 2],
    /// vCDR support per class (the Beta draw is scaled into it).
    pub vcdr_neg_range: [f64; 2],
    pub vcdr_pos_range: [f64; 2],
    /// Pivot of the simulated frozen-AI logistic response.
    pub ai_pivot: f64,
}

impl Default for AnnotationSpec {
    fn default() -> Self {
        AnnotationSpec {
            disc_log_mean: 4.0,
            disc_log_sd: 0.18,
            vcdr_neg_shape: [2.2, 3.8],
            vcdr_pos_shape: [4.2, 2.2],
            vcdr_neg_range: [0.2, 0.75],
            vcdr_pos_range: [0.38, 0.95],
            ai_pivot: 0.55,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSpec {
    pub k: usize,
    pub embed_dim: usize,
    pub embed_noise: f64,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        RetrievalSpec {
            k: 7,
            embed_dim: 8,
            embed_noise: 0.15,
        }
    }
}

/// Full generation spec. Every field has a default; unknown keys reject.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n: usize,
    pub n_experts: usize,
    pub prevalence: f64,
    pub split_fractions: [f64; 3],
    /// Exact split counts override the fractions when set.
    pub split_counts: Option<[usize; 3]>,
    pub subcohorts: Vec<SubCohortSpec>,
    /// Explicit expert profiles; when empty they are drawn from the ranges.
    pub experts: Vec<ExpertSpec>,
    pub expert_se_range: [f64; 2],
    pub expert_sp_range: [f64; 2],
    pub expert_alpha_range: [f64; 2],
    pub expert_gamma_range: [f64; 2],
    pub difficulty: DifficultyGlobals,
    /// Minimum correct experts per case; default is ceil(J/3).
    pub k_min: Option<usize>,
    pub annotations: AnnotationSpec,
    pub retrieval: RetrievalSpec,
    /// Heavy-tail contamination rate of the image-quality risk.
    pub quality_contamination: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n: 2000,
            n_experts: 12,
            prevalence: 0.3,
            split_fractions: [0.5, 0.25, 0.25],
            split_counts: None,
            subcohorts: vec![
                SubCohortSpec {
                    name: "site_a".into(),
                    fraction: 0.4,
                    ai_scale: 9.0,
                    ai_shift: 0.0,
                    ai_noise: 0.7,
                    ood_level: 0.0,
                    mask: MaskRegime::Block {
                        experts: vec![1, 2, 3, 4, 5],
                    },
                    retrieval_labels: false,
                },
                SubCohortSpec {
                    name: "site_b".into(),
                    fraction: 0.35,
                    ai_scale: 4.0,
                    ai_shift: -1.2,
                    ai_noise: 1.6,
                    ood_level: 1.0,
                    mask: MaskRegime::Block {
                        experts: vec![6, 7, 8, 9, 10, 11, 12],
                    },
                    retrieval_labels: false,
                },
                SubCohortSpec {
                    name: "site_c".into(),
                    fraction: 0.25,
                    ai_scale: 1.5,
                    ai_shift: 1.4,
                    ai_noise: 2.2,
                    ood_level: 2.0,
                    mask: MaskRegime::Random { rate: 0.35 },
                    retrieval_labels: false,
                },
            ],
            experts: Vec::new(),
            expert_se_range: [0.46, 0.95],
            expert_sp_range: [0.70, 0.99],
            expert_alpha_range: [0.5, 2.0],
            expert_gamma_range: [0.5, 2.0],
            difficulty: DifficultyGlobals::default(),
            k_min: None,
            annotations: AnnotationSpec::default(),
            retrieval: RetrievalSpec::default(),
            quality_contamination: 0.1,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.n == 0 {
            return err("n must be positive".into());
        }
        if self.n_experts == 0 || self.n_experts > 64 {
            return err(format!("n_experts {} out of 1..=64", self.n_experts));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return err(format!("prevalence {} not in (0,1)", self.prevalence));
        }
        let frac_sum: f64 = self.split_fractions.iter().sum();
        if (frac_sum - 1.0).abs() > 1e-6 {
            return err(format!("split fractions sum to {frac_sum}, expected 1"));
        }
        if let Some(counts) = self.split_counts {
            if counts.iter().sum::<usize>() != self.n {
                return err("split counts must sum to n".into());
            }
        }
        if self.subcohorts.is_empty() {
            return err("at least one sub-cohort required".into());
        }
        let sub_sum: f64 = self.subcohorts.iter().map(|s| s.fraction).sum();
        if (sub_sum - 1.0).abs() > 1e-6 {
            return err(format!("sub-cohort fractions sum to {sub_sum}, expected 1"));
        }
        for sc in &self.subcohorts {
            if let MaskRegime::Block { experts } = &sc.mask {
                if experts.iter().any(|&e| e == 0 || e > self.n_experts) {
                    return err(format!("sub-cohort {} names an unknown expert", sc.name));
                }
            }
            if let MaskRegime::Random { rate } = sc.mask {
                if !(0.0..=1.0).contains(&rate) {
                    return err(format!("sub-cohort {} availability rate {rate}", sc.name));
                }
            }
        }
        if !self.experts.is_empty() && self.experts.len() != self.n_experts {
            return err(format!(
                "{} expert profiles given for {} experts",
                self.experts.len(),
                self.n_experts
            ));
        }
        if let Some(k) = self.k_min {
            if k > self.n_experts {
                return err(format!("k_min {k} exceeds the expert count"));
            }
        }
        Ok(())
    }
}

/// Generation provenance for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub n: usize,
    pub n_experts: usize,
    pub rows_per_split: BTreeMap<String, usize>,
    pub rows_per_cohort: BTreeMap<String, usize>,
    pub evidence_ridge_fallback: bool,
    pub temperature: f64,
    pub temperature_boundary: bool,
    pub youden_tau: f64,
}

struct RowDraft {
    subcohort: usize,
    split: Split,
    y: u8,
    biomarkers: crate::sim::ellipse::Biomarkers,
    features: [f64; 5],
    prob_1: f64,
    logit_0: f64,
    logit_1: f64,
    vim_raw: f64,
    quality_risk: f64,
    mask_bits: Vec<u8>,
}

fn assignment_blocks(n: usize, weights: &[f64]) -> Vec<usize> {
    // largest-remainder apportionment, deterministic
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * n as f64).floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w * n as f64 - counts[i] as f64, i))
        .collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut deficit = n - counts.iter().sum::<usize>();
    for (_, i) in rem {
        if deficit == 0 {
            break;
        }
        counts[i] += 1;
        deficit -= 1;
    }
    let mut out = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat(i).take(c));
    }
    out
}

fn draw_profiles(spec: &GenSpec, stream: &NoiseStream) -> Vec<ExpertProfile> {
    if !spec.experts.is_empty() {
        return spec
            .experts
            .iter()
            .map(|e| ExpertProfile {
                evidence_weights: [0.0; 5],
                temperature: 1.0,
                se: e.se,
                sp: e.sp,
                alpha: e.alpha,
                gamma_mod: e.gamma_mod,
            })
            .collect();
    }
    (0..spec.n_experts)
        .map(|j| {
            let mut rng = stream.rng(domain::SIM_PANEL, 0, j as u64);
            ExpertProfile {
                evidence_weights: [0.0; 5],
                temperature: 1.0,
                se: rng.random_range(spec.expert_se_range[0]..spec.expert_se_range[1]),
                sp: rng.random_range(spec.expert_sp_range[0]..spec.expert_sp_range[1]),
                alpha: rng.random_range(spec.expert_alpha_range[0]..spec.expert_alpha_range[1]),
                gamma_mod: rng
                    .random_range(spec.expert_gamma_range[0]..spec.expert_gamma_range[1]),
            }
        })
        .collect()
}

fn synth_embedding(
    draft: &RowDraft,
    family: u64,
    noise: f64,
    dim: usize,
    stream: &NoiseStream,
    row: u64,
) -> Vec<f64> {
    // fixed random projection of the geometry features, keyed per family
    let feats = [
        draft.biomarkers.vcdr,
        draft.biomarkers.acdr,
        draft.biomarkers.dec,
        draft.biomarkers.disc_vd.ln(),
        draft.quality_risk,
        1.0,
    ];
    let mut proj_rng = stream.rng(domain::SIM_EMBED, family, u64::MAX);
    let mut emb = vec![0.0; dim];
    for e in emb.iter_mut() {
        for &f in &feats {
            let w: f64 = proj_rng.random_range(-1.0..1.0);
            *e += w * f;
        }
    }
    let mut noise_rng = stream.rng(domain::SIM_EMBED, family, row);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for e in emb.iter_mut() {
        *e += noise * normal.sample(&mut noise_rng);
    }
    l2_normalize(&mut emb);
    emb
}

/// Output of `generate_cohort`: the table, provenance counts, and the
/// optional embedding sidecar (id, family-a vector, family-b vector).
pub struct Generated {
    pub table: CohortTable,
    pub summary: GenSummary,
    pub embeddings: Option<Vec<(String, Vec<f64>, Vec<f64>)>>,
}

pub fn generate_cohort(spec: &GenSpec, seed: u64) -> Result<Generated, SimError> {
    spec.validate()?;
    let stream = NoiseStream::new(seed);
    let m = spec.n_experts;

    // deterministic sub-cohort assignment, then split assignment stratified
    // within each sub-cohort so split compositions match
    let weights: Vec<f64> = spec.subcohorts.iter().map(|s| s.fraction).collect();
    let mut subcohort_of = assignment_blocks(spec.n, &weights);
    subcohort_of.shuffle(&mut stream.rng(domain::SIM_ROW, u64::MAX, 0));
    let split_labels = {
        let global = match spec.split_counts {
            Some(c) => c,
            None => {
                let blocks = assignment_blocks(spec.n, &spec.split_fractions.to_vec());
                let mut c = [0usize; 3];
                for b in blocks {
                    c[b] += 1;
                }
                c
            }
        };
        let n_sub = spec.subcohorts.len();
        let members: Vec<Vec<usize>> = (0..n_sub)
            .map(|c| (0..spec.n).filter(|&i| subcohort_of[i] == c).collect())
            .collect();
        let mut remaining = global;
        let mut labels = vec![Split::Train; spec.n];
        for (c, rows) in members.iter().enumerate() {
            let counts = if c + 1 == n_sub {
                remaining
            } else {
                let frac: Vec<f64> = global
                    .iter()
                    .map(|&g| g as f64 / spec.n as f64)
                    .collect();
                let mut alloc = assignment_blocks(rows.len(), &frac);
                let mut counts = [0usize; 3];
                for b in alloc.drain(..) {
                    counts[b] += 1;
                }
                // never exceed the remaining global capacity
                for s in 0..3 {
                    counts[s] = counts[s].min(remaining[s]);
                }
                let mut deficit = rows.len() - counts.iter().sum::<usize>();
                for s in 0..3 {
                    let slack = remaining[s] - counts[s];
                    let take = deficit.min(slack);
                    counts[s] += take;
                    deficit -= take;
                }
                counts
            };
            let mut sub_labels = Vec::with_capacity(rows.len());
            sub_labels.extend(std::iter::repeat(Split::Train).take(counts[0]));
            sub_labels.extend(std::iter::repeat(Split::Val).take(counts[1]));
            sub_labels.extend(std::iter::repeat(Split::Test).take(counts[2]));
            sub_labels.shuffle(&mut stream.rng(domain::SIM_ROW, u64::MAX, 2 + c as u64));
            for (&row, &lab) in rows.iter().zip(&sub_labels) {
                labels[row] = lab;
            }
            for s in 0..3 {
                remaining[s] -= counts[s];
            }
        }
        labels
    };

    // per-row geometry, simulated AI state, and masks
    let mut drafts = Vec::with_capacity(spec.n);
    let ann = &spec.annotations;
    for i in 0..spec.n {
        let sc_idx = subcohort_of[i];
        let sc = &spec.subcohorts[sc_idx];
        let mut rng = stream.rng(domain::SIM_ROW, 0, i as u64);
        let y = (rng.sample::<f64, _>(Open01) < spec.prevalence) as u8;

        let disc_h = LogNormal::new(ann.disc_log_mean, ann.disc_log_sd)
            .unwrap()
            .sample(&mut rng);
        let disc_w = disc_h * rng.random_range(0.85..1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (shape, range) = if y == 1 {
            (ann.vcdr_pos_shape, ann.vcdr_pos_range)
        } else {
            (ann.vcdr_neg_shape, ann.vcdr_neg_range)
        };
        let t = Beta::new(shape[0], shape[1]).unwrap().sample(&mut rng);
        let target_vcdr = range[0] + t * (range[1] - range[0]);
        let jitter_w = rng.random_range(0.92..1.08);
        let jitter_h = rng.random_range(0.92..1.08);
        let normal = Normal::new(0.0, 0.02 * disc_h).unwrap();
        let off_x: f64 = normal.sample(&mut rng);
        let off_y: f64 = normal.sample(&mut rng);
        let disc = Ellipse {
            w: disc_w,
            h: disc_h,
            theta,
            cx: 0.0,
            cy: 0.0,
        };
        let cup = Ellipse {
            w: disc_w * target_vcdr * jitter_w,
            h: disc_h * target_vcdr * jitter_h,
            theta,
            cx: off_x,
            cy: off_y,
        };
        let bio = structural_biomarkers(&EllipseAnnotation { disc, cup })?;

        let eps: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let ai_logit =
            sc.ai_scale * (bio.vcdr - ann.ai_pivot) + sc.ai_shift + sc.ai_noise * eps;
        let p = sigmoid(ai_logit).clamp(1e-6, 1.0 - 1e-6);
        let logit_1 = 0.5 * (p / (1.0 - p)).ln();
        let logit_0 = -logit_1;
        let e0 = (logit_0 - logit_0.max(logit_1)).exp();
        let e1 = (logit_1 - logit_0.max(logit_1)).exp();
        let prob_1 = e1 / (e0 + e1);

        let vim_raw = sc.ood_level + 0.5 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let quality_risk = if rng.sample::<f64, _>(Open01) < spec.quality_contamination {
            rng.random_range(0.3..1.0)
        } else {
            rng.random_range(0.0..0.3)
        };

        let mask_bits: Vec<u8> = match &sc.mask {
            MaskRegime::Block { experts } => {
                let mut bits = vec![0u8; m];
                for &e in experts {
                    bits[e - 1] = 1;
                }
                bits
            }
            MaskRegime::Random { rate } => (0..m)
                .map(|_| (rng.sample::<f64, _>(Open01) < *rate) as u8)
                .collect(),
        };

        drafts.push(RowDraft {
            subcohort: sc_idx,
            split: split_labels[i],
            y,
            features: geometry_features(&bio),
            biomarkers: bio,
            prob_1,
            logit_0,
            logit_1,
            vim_raw,
            quality_risk,
            mask_bits,
        });
    }

    // standardize the OOD score over the generated population
    let vim_mean = drafts.iter().map(|d| d.vim_raw).sum::<f64>() / spec.n as f64;
    let vim_var = drafts
        .iter()
        .map(|d| (d.vim_raw - vim_mean).powi(2))
        .sum::<f64>()
        / spec.n as f64;
    let vim_std = vim_var.sqrt().max(1e-6);

    // evidence model on the train split, temperature on validation
    let train_idx: Vec<usize> = (0..spec.n).filter(|&i| drafts[i].split == Split::Train).collect();
    let val_idx: Vec<usize> = (0..spec.n).filter(|&i| drafts[i].split == Split::Val).collect();
    let xs: Vec<[f64; 5]> = train_idx.iter().map(|&i| drafts[i].features).collect();
    let ys: Vec<u8> = train_idx.iter().map(|&i| drafts[i].y).collect();
    let fit = fit_evidence_model(&xs, &ys)?;
    let val_scores: Vec<f64> = val_idx
        .iter()
        .map(|&i| {
            fit.weights
                .iter()
                .zip(&drafts[i].features)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect();
    let val_ys: Vec<u8> = val_idx.iter().map(|&i| drafts[i].y).collect();
    let temp = if val_idx.is_empty() {
        crate::sim::evidence::Temperature { t: 1.0, boundary: false }
    } else {
        calibrate_temperature(&val_scores, &val_ys)
    };
    let train_vcdr: Vec<f64> = train_idx.iter().map(|&i| drafts[i].biomarkers.vcdr).collect();
    let train_y: Vec<u8> = train_idx.iter().map(|&i| drafts[i].y).collect();
    let (tau, _) = youden_threshold(&train_vcdr, &train_y)?;

    let mut profiles = draw_profiles(spec, &stream);
    for p in &mut profiles {
        p.evidence_weights = fit.weights;
        p.temperature = temp.t;
    }

    // panel labels per row (retrieval sub-cohorts are labeled afterwards)
    let mut expert_labels: Vec<Vec<ExpertLabel>> = Vec::with_capacity(spec.n);
    for (i, draft) in drafts.iter().enumerate() {
        let sc = &spec.subcohorts[draft.subcohort];
        if sc.retrieval_labels {
            expert_labels.push(vec![ExpertLabel::Na; m]);
            continue;
        }
        let available: Vec<usize> = (0..m).filter(|&j| draft.mask_bits[j] == 1).collect();
        if available.is_empty() {
            expert_labels.push(vec![ExpertLabel::Na; m]);
            continue;
        }
        let score: f64 = fit
            .weights
            .iter()
            .zip(&draft.features)
            .map(|(w, v)| w * v)
            .sum();
        let p_cal = sigmoid(score / temp.t);
        let phi: Vec<f64> = available
            .iter()
            .map(|&j| {
                let op = operating_points(
                    draft.biomarkers.vcdr,
                    p_cal,
                    &profiles[j],
                    tau,
                    &spec.difficulty,
                );
                let p = if draft.y == 1 { op.se } else { op.sp };
                p.clamp(1e-3, 1.0 - 1e-3)
            })
            .collect();
        let j_avail = available.len();
        let k_min = spec
            .k_min
            .map(|k| k.min(j_avail))
            .unwrap_or_else(|| j_avail.div_ceil(3));
        let mut rng = stream.rng(domain::SIM_PANEL, 1, i as u64);
        let correctness = conditional_correctness_sampler(&phi, k_min, &mut rng)?;
        let labels_avail = instantiate_expert_labels(draft.y, &correctness);
        let mut labels = vec![ExpertLabel::Na; m];
        for (slot, &j) in available.iter().enumerate() {
            labels[j] = if labels_avail[slot] == 1 {
                ExpertLabel::One
            } else {
                ExpertLabel::Zero
            };
        }
        expert_labels.push(labels);
    }

    // retrieval-based pseudo-labels for flagged sub-cohorts
    let any_retrieval = spec.subcohorts.iter().any(|s| s.retrieval_labels);
    let mut embeddings_out = None;
    if any_retrieval {
        let embed = |i: usize, draft: &RowDraft| {
            (
                synth_embedding(draft, 0, spec.retrieval.embed_noise, spec.retrieval.embed_dim, &stream, i as u64),
                synth_embedding(draft, 1, spec.retrieval.embed_noise, spec.retrieval.embed_dim, &stream, i as u64),
            )
        };
        let mut all_embeddings: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(spec.n);
        for (i, draft) in drafts.iter().enumerate() {
            all_embeddings.push(embed(i, draft));
        }
        let pool: Vec<PoolRow> = (0..spec.n)
            .filter(|&i| !spec.subcohorts[drafts[i].subcohort].retrieval_labels)
            .map(|i| PoolRow {
                id: format!("case_{i:06}"),
                y: drafts[i].y,
                emb: EmbeddingPair {
                    a: all_embeddings[i].0.clone(),
                    b: all_embeddings[i].1.clone(),
                },
                expert_labels: expert_labels[i].clone(),
            })
            .collect();
        for i in 0..spec.n {
            if !spec.subcohorts[drafts[i].subcohort].retrieval_labels {
                continue;
            }
            let query = EmbeddingPair {
                a: all_embeddings[i].0.clone(),
                b: all_embeddings[i].1.clone(),
            };
            let r = retrieve_pseudo_labels(&query, drafts[i].y, &pool, m, spec.retrieval.k);
            expert_labels[i] = r.labels;
            drafts[i].mask_bits = expert_labels[i]
                .iter()
                .map(|l| if matches!(l, ExpertLabel::Na) { 0 } else { 1 })
                .collect();
        }
        embeddings_out = Some(
            (0..spec.n)
                .map(|i| {
                    (
                        format!("case_{i:06}"),
                        all_embeddings[i].0.clone(),
                        all_embeddings[i].1.clone(),
                    )
                })
                .collect(),
        );
    }

    // assemble rows
    let mut rows = Vec::with_capacity(spec.n);
    let mut rows_per_split: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows_per_cohort: BTreeMap<String, usize> = BTreeMap::new();
    for (i, draft) in drafts.iter().enumerate() {
        let sc = &spec.subcohorts[draft.subcohort];
        let uncertainty = 1.0 - draft.prob_1.max(1.0 - draft.prob_1);
        let labels = expert_labels[i].clone();
        let bits: Vec<u8> = labels
            .iter()
            .map(|l| if matches!(l, ExpertLabel::Na) { 0 } else { 1 })
            .collect();
        *rows_per_split.entry(draft.split.to_string()).or_default() += 1;
        *rows_per_cohort.entry(sc.name.clone()).or_default() += 1;
        rows.push(DecisionState {
            id: format!("case_{i:06}"),
            cohort: sc.name.clone(),
            y: draft.y,
            logit_0: draft.logit_0,
            logit_1: draft.logit_1,
            prob_1: draft.prob_1,
            vim_risk_z: (draft.vim_raw - vim_mean) / vim_std,
            quality_risk: draft.quality_risk,
            uncertainty,
            vcdr: draft.biomarkers.vcdr.min(1.5),
            acdr: draft.biomarkers.acdr.min(1.5),
            expert_labels: labels,
            mask: ExpertMask::new(bits),
            split: draft.split,
        });
    }
    let table = CohortTable::new(m, rows);
    table
        .validate()
        .map_err(|e| SimError::InvalidSpec(format!("generated table invalid: {e}")))?;
    let summary = GenSummary {
        n: spec.n,
        n_experts: m,
        rows_per_split,
        rows_per_cohort,
        evidence_ridge_fallback: fit.ridge_fallback,
        temperature: temp.t,
        temperature_boundary: temp.boundary,
        youden_tau: tau,
    };
    Ok(Generated {
        table,
        summary,
        embeddings: embeddings_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            n: 400,
            n_experts: 6,
            subcohorts: vec![
                SubCohortSpec {
                    name: "site_a".into(),
                    fraction: 0.5,
                    ai_scale: 9.0,
                    ai_shift: 0.0,
                    ai_noise: 0.7,
                    ood_level: 0.0,
                    mask: MaskRegime::Block {
                        experts: vec![1, 2, 3],
                    },
                    retrieval_labels: false,
                },
                SubCohortSpec {
                    name: "site_b".into(),
                    fraction: 0.5,
                    ai_scale: 2.0,
                    ai_shift: -1.0,
                    ai_noise: 1.5,
                    ood_level: 1.5,
                    mask: MaskRegime::Random { rate: 0.6 },
                    retrieval_labels: false,
                },
            ],
            ..GenSpec::default()
        }
    }

    #[test]
    fn default_spec_produces_requested_shape() {
        let spec = GenSpec {
            n: 300,
            ..GenSpec::default()
        };
        let g = generate_cohort(&spec, 42).unwrap();
        assert_eq!(g.table.n_experts, 12);
        assert_eq!(g.table.rows.len(), 300);
        assert!(g.table.rows.iter().all(|r| r.mask.len() == 12));
        g.table.validate().unwrap();
    }

    #[test]
    fn byte_identical_per_seed() {
        let spec = small_spec();
        let a = generate_cohort(&spec, 7).unwrap();
        let b = generate_cohort(&spec, 7).unwrap();
        let mut buf_a = Vec::new();
        a.table.write_csv(&mut buf_a).unwrap();
        let mut buf_b = Vec::new();
        b.table.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        let c = generate_cohort(&spec, 8).unwrap();
        let mut buf_c = Vec::new();
        c.table.write_csv(&mut buf_c).unwrap();
        assert_ne!(buf_a, buf_c);
    }

    #[test]
    fn split_counts_are_exact_when_requested() {
        let spec = GenSpec {
            n: 3195,
            split_counts: Some([1411, 885, 899]),
            ..small_spec()
        };
        let g = generate_cohort(&spec, 3).unwrap();
        assert_eq!(g.summary.rows_per_split["train"], 1411);
        assert_eq!(g.summary.rows_per_split["val"], 885);
        assert_eq!(g.summary.rows_per_split["test"], 899);
    }

    #[test]
    fn per_expert_accuracy_tracks_operating_points() {
        // fixed operating points (no modulation), unconstrained panel
        let spec = GenSpec {
            n: 4000,
            n_experts: 2,
            k_min: Some(0),
            experts: vec![
                ExpertSpec {
                    se: 0.9,
                    sp: 0.9,
                    alpha: 0.0,
                    gamma_mod: 0.0,
                },
                ExpertSpec {
                    se: 0.6,
                    sp: 0.6,
                    alpha: 0.0,
                    gamma_mod: 0.0,
                },
            ],
            difficulty: DifficultyGlobals {
                kappa_diff: 5.0,
                rho_ref: 0.5,
                b: 0.0,
                d: 0.0,
            },
            subcohorts: vec![SubCohortSpec {
                name: "only".into(),
                fraction: 1.0,
                ai_scale: 5.0,
                ai_shift: 0.0,
                ai_noise: 1.0,
                ood_level: 0.0,
                mask: MaskRegime::Block { experts: vec![1, 2] },
                retrieval_labels: false,
            }],
            ..GenSpec::default()
        };
        let g = generate_cohort(&spec, 11).unwrap();
        for (j, expect) in [(0usize, 0.9f64), (1, 0.6)] {
            let mut correct = 0usize;
            let mut total = 0usize;
            for row in &g.table.rows {
                if let Some(yhat) = row.expert_labels[j].as_u8() {
                    total += 1;
                    if yhat == row.y {
                        correct += 1;
                    }
                }
            }
            let acc = correct as f64 / total as f64;
            let se = (expect * (1.0 - expect) / total as f64).sqrt();
            assert!(
                (acc - expect).abs() < 3.0 * se + 0.01,
                "expert {j}: acc {acc} vs {expect}"
            );
        }
    }

    #[test]
    fn retrieval_cohort_gets_sparse_masks_and_sidecar() {
        let mut spec = small_spec();
        spec.subcohorts[1].retrieval_labels = true;
        spec.n = 600;
        let g = generate_cohort(&spec, 9).unwrap();
        assert!(g.embeddings.is_some());
        let retrieval_rows: Vec<_> = g
            .table
            .rows
            .iter()
            .filter(|r| r.cohort == "site_b")
            .collect();
        assert!(!retrieval_rows.is_empty());
        // pseudo-labeled rows only carry experts present in the pool block
        for r in retrieval_rows {
            for j in 3..6 {
                assert!(matches!(r.expert_labels[j], ExpertLabel::Na));
            }
        }
        g.table.validate().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.prevalence = 0.0;
        assert!(matches!(
            generate_cohort(&spec, 1),
            Err(SimError::InvalidSpec(_))
        ));
        let mut spec = small_spec();
        spec.subcohorts[0].fraction = 0.9;
        assert!(generate_cohort(&spec, 1).is_err());
    }
}
