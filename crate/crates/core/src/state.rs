//! Decision-time states and the cohort table, with the canonical CSV schema.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::mask::ExpertMask;

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-expert observed label: correct class, or unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertLabel {
    Zero,
    One,
    Na,
}

impl ExpertLabel {
    pub fn as_u8(&self) -> Option<u8> {
        match self {
            ExpertLabel::Zero => Some(0),
            ExpertLabel::One => Some(1),
            ExpertLabel::Na => None,
        }
    }
}

/// The routing input for one case: the eight decision-time features, the
/// ground-truth label, the per-expert observations, and the availability
/// mask derived from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionState {
    pub id: String,
    pub cohort: String,
    pub y: u8,
    pub logit_0: f64,
    pub logit_1: f64,
    pub prob_1: f64,
    pub vim_risk_z: f64,
    pub quality_risk: f64,
    pub uncertainty: f64,
    pub vcdr: f64,
    pub acdr: f64,
    pub expert_labels: Vec<ExpertLabel>,
    pub mask: ExpertMask,
    pub split: Split,
}

impl DecisionState {
    /// Checks the raw-state invariants: softmax consistency of `prob_1`,
    /// the uncertainty identity, and mask/NA agreement.
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| DataError::InvalidRow {
            id: self.id.clone(),
            msg,
        };
        if self.y > 1 {
            return Err(err(format!("label {} not in {{0,1}}", self.y)));
        }
        let z = (self.logit_0.max(self.logit_1)).max(0.0);
        let e0 = (self.logit_0 - z).exp();
        let e1 = (self.logit_1 - z).exp();
        let p1 = e1 / (e0 + e1);
        if (p1 - self.prob_1).abs() > 1e-6 {
            return Err(err(format!(
                "prob_1 {} inconsistent with softmax(logits) {}",
                self.prob_1, p1
            )));
        }
        let u = 1.0 - self.prob_1.max(1.0 - self.prob_1);
        if (u - self.uncertainty).abs() > 1e-6 {
            return Err(err(format!(
                "uncertainty {} inconsistent with 1 - max-prob {}",
                self.uncertainty, u
            )));
        }
        if self.expert_labels.len() != self.mask.len() {
            return Err(err("expert label / mask length mismatch".into()));
        }
        for (j, lab) in self.expert_labels.iter().enumerate() {
            let available = !matches!(lab, ExpertLabel::Na);
            if available != self.mask.feasible(j) {
                return Err(err(format!("mask bit {j} inconsistent with NA pattern")));
            }
        }
        if !(0.0..=1.5).contains(&self.vcdr) || !(0.0..=1.5).contains(&self.acdr) {
            return Err(err(format!(
                "cup-to-disc ratios ({}, {}) out of [0, 1.5]",
                self.vcdr, self.acdr
            )));
        }
        Ok(())
    }
}

/// A dataset of decision states sharing one expert set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortTable {
    pub n_experts: usize,
    pub rows: Vec<DecisionState>,
}

impl CohortTable {
    pub fn new(n_experts: usize, rows: Vec<DecisionState>) -> Self {
        CohortTable { n_experts, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.rows.is_empty() {
            return Err(DataError::EmptyCohort);
        }
        for row in &self.rows {
            if row.expert_labels.len() != self.n_experts {
                return Err(DataError::ExpertCountMismatch {
                    table: self.n_experts,
                    expected: row.expert_labels.len(),
                });
            }
            row.validate()?;
        }
        Ok(())
    }

    /// Rows belonging to one split, in table order.
    pub fn split_rows(&self, split: Split) -> Vec<&DecisionState> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_nonempty(&self, split: Split) -> Result<Vec<&DecisionState>, DataError> {
        let rows = self.split_rows(split);
        if rows.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        Ok(rows)
    }

    fn header(n_experts: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "id",
            "cohort",
            "y",
            "logit_0",
            "logit_1",
            "prob_1",
            "vim_risk_z",
            "quality_risk",
            "uncertainty",
            "vCDR",
            "aCDR",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for j in 1..=n_experts {
            h.push(format!("expert_{j}"));
        }
        h.push("split".to_string());
        h
    }

    /// Writes the canonical CSV. Float formatting uses the shortest
    /// round-trip representation so output is byte-stable per seed.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(self.n_experts))?;
        for row in &self.rows {
            let mut rec: Vec<String> = vec![
                row.id.clone(),
                row.cohort.clone(),
                row.y.to_string(),
                format!("{}", row.logit_0),
                format!("{}", row.logit_1),
                format!("{}", row.prob_1),
                format!("{}", row.vim_risk_z),
                format!("{}", row.quality_risk),
                format!("{}", row.uncertainty),
                format!("{}", row.vcdr),
                format!("{}", row.acdr),
            ];
            for lab in &row.expert_labels {
                rec.push(match lab {
                    ExpertLabel::Zero => "0".to_string(),
                    ExpertLabel::One => "1".to_string(),
                    ExpertLabel::Na => "NA".to_string(),
                });
            }
            rec.push(row.split.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(DataError::Io)?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(f)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let fixed_prefix = 11usize;
        if headers.len() < fixed_prefix + 1 {
            return Err(DataError::HeaderMismatch {
                expected: "id,cohort,y,...,expert_*,split".into(),
                found: headers.join(","),
            });
        }
        let n_experts = headers.len() - fixed_prefix - 1;
        let expected = Self::header(n_experts);
        if headers != expected {
            return Err(DataError::HeaderMismatch {
                expected: expected.join(","),
                found: headers.join(","),
            });
        }
        let parse_f64 = |id: &str, field: &str, v: &str| -> Result<f64, DataError> {
            v.parse::<f64>().map_err(|_| DataError::InvalidRow {
                id: id.to_string(),
                msg: format!("field {field} not a float: {v:?}"),
            })
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec[0].to_string();
            let y: u8 = rec[2].parse().map_err(|_| DataError::InvalidRow {
                id: id.clone(),
                msg: format!("label not 0/1: {:?}", &rec[2]),
            })?;
            let mut expert_labels = Vec::with_capacity(n_experts);
            let mut bits = Vec::with_capacity(n_experts);
            for j in 0..n_experts {
                let cell = &rec[fixed_prefix + j];
                let lab = match cell {
                    "0" => ExpertLabel::Zero,
                    "1" => ExpertLabel::One,
                    "NA" => ExpertLabel::Na,
                    other => {
                        return Err(DataError::InvalidRow {
                            id,
                            msg: format!("expert cell {other:?} not in {{0,1,NA}}"),
                        })
                    }
                };
                bits.push(if matches!(lab, ExpertLabel::Na) { 0 } else { 1 });
                expert_labels.push(lab);
            }
            let split: Split = rec[fixed_prefix + n_experts]
                .parse()
                .map_err(|e| DataError::InvalidRow {
                    id: id.clone(),
                    msg: e,
                })?;
            rows.push(DecisionState {
                cohort: rec[1].to_string(),
                y,
                logit_0: parse_f64(&id, "logit_0", &rec[3])?,
                logit_1: parse_f64(&id, "logit_1", &rec[4])?,
                prob_1: parse_f64(&id, "prob_1", &rec[5])?,
                vim_risk_z: parse_f64(&id, "vim_risk_z", &rec[6])?,
                quality_risk: parse_f64(&id, "quality_risk", &rec[7])?,
                uncertainty: parse_f64(&id, "uncertainty", &rec[8])?,
                vcdr: parse_f64(&id, "vCDR", &rec[9])?,
                acdr: parse_f64(&id, "aCDR", &rec[10])?,
                expert_labels,
                mask: ExpertMask::new(bits),
                split,
                id,
            });
        }
        Ok(CohortTable { n_experts, rows })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn demo_state(id: &str, prob_1: f64, labels: Vec<ExpertLabel>) -> DecisionState {
        let logit_1 = 0.5 * (prob_1 / (1.0 - prob_1)).ln();
        let bits = labels
            .iter()
            .map(|l| if matches!(l, ExpertLabel::Na) { 0 } else { 1 })
            .collect();
        DecisionState {
            id: id.to_string(),
            cohort: "site_a".into(),
            y: 1,
            logit_0: -logit_1,
            logit_1,
            prob_1,
            vim_risk_z: 0.1,
            quality_risk: 0.2,
            uncertainty: 1.0 - prob_1.max(1.0 - prob_1),
            vcdr: 0.6,
            acdr: 0.4,
            mask: ExpertMask::new(bits),
            expert_labels: labels,
            split: Split::Train,
        }
    }

    #[test]
    fn validate_accepts_consistent_row() {
        let s = demo_state("r1", 0.7, vec![ExpertLabel::One, ExpertLabel::Na]);
        s.validate().unwrap();
    }

    #[test]
    fn validate_rejects_mask_na_mismatch() {
        let mut s = demo_state("r1", 0.7, vec![ExpertLabel::One, ExpertLabel::Na]);
        s.mask = ExpertMask::new(vec![1, 1]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn validate_rejects_bad_uncertainty() {
        let mut s = demo_state("r1", 0.7, vec![ExpertLabel::One]);
        s.uncertainty = 0.4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let rows = vec![
            demo_state("a", 0.7, vec![ExpertLabel::One, ExpertLabel::Na]),
            demo_state("b", 0.2, vec![ExpertLabel::Na, ExpertLabel::Zero]),
        ];
        let table = CohortTable::new(2, rows);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = CohortTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.n_experts, 2);
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].id, "a");
        assert_eq!(back.rows[0].prob_1, table.rows[0].prob_1);
        assert_eq!(back.rows[1].expert_labels[0], ExpertLabel::Na);
        back.validate().unwrap();
    }

    #[test]
    fn csv_rejects_alien_header() {
        let bad = "id,cohort,nope\n1,x,2\n";
        assert!(CohortTable::read_csv(bad.as_bytes()).is_err());
    }
}
