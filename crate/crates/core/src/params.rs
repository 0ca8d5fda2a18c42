//! Router parameter storage: a flat fp64 vector with a fixed layout so the
//! optimizer, checkpointing, and finite-difference probes all address
//! coordinates uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{domain, NoiseStream};

/// Hidden sizes of the router. None of these come from the method itself;
/// they are config-tunable capacity choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub risk_hidden: usize,
    pub str_hidden: usize,
    pub ai_hidden: usize,
    pub fuse_hidden: usize,
    pub trunk_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            risk_hidden: 16,
            str_hidden: 16,
            ai_hidden: 16,
            fuse_hidden: 32,
            trunk_hidden: 32,
        }
    }
}

/// One named segment of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Offsets of every tensor in the flat vector. Weight matrices are stored
/// row-major as `rows x cols`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub arch: ArchConfig,
    pub n_experts: usize,
    pub total: usize,
    w_struct: (usize, usize),
    b_struct: (usize, usize),
    w_risk: (usize, usize),
    b_risk: (usize, usize),
    w_str_enc: (usize, usize),
    b_str_enc: (usize, usize),
    w_ai: (usize, usize),
    b_ai: (usize, usize),
    w_fuse: (usize, usize),
    b_fuse: (usize, usize),
    w_def: (usize, usize),
    b_def: (usize, usize),
    w_trunk: (usize, usize),
    b_trunk: (usize, usize),
    w_gate: (usize, usize),
    c_gate: (usize, usize),
    w_alloc: (usize, usize),
    c_alloc: (usize, usize),
}

macro_rules! segment_accessor {
    ($name:ident, $field:ident) => {
        pub fn $name(&self) -> Segment {
            Segment {
                offset: self.$field.0,
                len: self.$field.1,
            }
        }
    };
}

impl ParamLayout {
    pub fn new(arch: ArchConfig, n_experts: usize) -> Self {
        let mut off = 0usize;
        let mut seg = |len: usize| {
            let s = (off, len);
            off += len;
            s
        };
        let fuse_in = arch.risk_hidden + arch.str_hidden + arch.ai_hidden;
        let w_struct = seg(2);
        let b_struct = seg(1);
        let w_risk = seg(arch.risk_hidden * 3);
        let b_risk = seg(arch.risk_hidden);
        let w_str_enc = seg(arch.str_hidden * 2);
        let b_str_enc = seg(arch.str_hidden);
        let w_ai = seg(arch.ai_hidden * 2);
        let b_ai = seg(arch.ai_hidden);
        let w_fuse = seg(arch.fuse_hidden * fuse_in);
        let b_fuse = seg(arch.fuse_hidden);
        let w_def = seg(arch.fuse_hidden);
        let b_def = seg(1);
        let w_trunk = seg(arch.trunk_hidden * arch.fuse_hidden);
        let b_trunk = seg(arch.trunk_hidden);
        let w_gate = seg(n_experts * arch.trunk_hidden);
        let c_gate = seg(n_experts);
        let w_alloc = seg(n_experts * arch.trunk_hidden);
        let c_alloc = seg(n_experts);
        ParamLayout {
            arch,
            n_experts,
            total: off,
            w_struct,
            b_struct,
            w_risk,
            b_risk,
            w_str_enc,
            b_str_enc,
            w_ai,
            b_ai,
            w_fuse,
            b_fuse,
            w_def,
            b_def,
            w_trunk,
            b_trunk,
            w_gate,
            c_gate,
            w_alloc,
            c_alloc,
        }
    }

    segment_accessor!(w_struct_seg, w_struct);
    segment_accessor!(b_struct_seg, b_struct);
    segment_accessor!(w_risk_seg, w_risk);
    segment_accessor!(b_risk_seg, b_risk);
    segment_accessor!(w_str_enc_seg, w_str_enc);
    segment_accessor!(b_str_enc_seg, b_str_enc);
    segment_accessor!(w_ai_seg, w_ai);
    segment_accessor!(b_ai_seg, b_ai);
    segment_accessor!(w_fuse_seg, w_fuse);
    segment_accessor!(b_fuse_seg, b_fuse);
    segment_accessor!(w_def_seg, w_def);
    segment_accessor!(b_def_seg, b_def);
    segment_accessor!(w_trunk_seg, w_trunk);
    segment_accessor!(b_trunk_seg, b_trunk);
    segment_accessor!(w_gate_seg, w_gate);
    segment_accessor!(c_gate_seg, c_gate);
    segment_accessor!(w_alloc_seg, w_alloc);
    segment_accessor!(c_alloc_seg, c_alloc);

    /// Segments whose rows are indexed by expert, as (segment, row length).
    /// Used by permutation-equivariance checks.
    pub fn expert_row_segments(&self) -> Vec<(Segment, usize)> {
        vec![
            (self.w_gate_seg(), self.arch.trunk_hidden),
            (self.c_gate_seg(), 1),
            (self.w_alloc_seg(), self.arch.trunk_hidden),
            (self.c_alloc_seg(), 1),
        ]
    }
}

/// The trainable router parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
}

impl RouterParams {
    /// Zero-initialized parameters.
    pub fn zeros(arch: ArchConfig, n_experts: usize) -> Self {
        let layout = ParamLayout::new(arch, n_experts);
        let theta = vec![0.0; layout.total];
        RouterParams { layout, theta }
    }

    /// Seeded initialization: uniform fan-in scaling for weights, zero
    /// biases. Draw order is fixed by the layout so results are
    /// reproducible for a given seed.
    pub fn init(arch: ArchConfig, n_experts: usize, stream: &NoiseStream) -> Self {
        let mut p = Self::zeros(arch, n_experts);
        let mut rng = stream.rng(domain::INIT, 0, 0);
        let fuse_in = arch.risk_hidden + arch.str_hidden + arch.ai_hidden;
        let weight_segs: Vec<(Segment, usize)> = vec![
            (p.layout.w_struct_seg(), 2),
            (p.layout.w_risk_seg(), 3),
            (p.layout.w_str_enc_seg(), 2),
            (p.layout.w_ai_seg(), 2),
            (p.layout.w_fuse_seg(), fuse_in),
            (p.layout.w_def_seg(), arch.fuse_hidden),
            (p.layout.w_trunk_seg(), arch.fuse_hidden),
            (p.layout.w_gate_seg(), arch.trunk_hidden),
            (p.layout.w_alloc_seg(), arch.trunk_hidden),
        ];
        for (seg, fan_in) in weight_segs {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.theta[seg.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn seg(&self, s: Segment) -> &[f64] {
        &self.theta[s.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// y = W x + b with row-major W (rows x cols).
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// Backward of `affine`: accumulates into gw, gb, and optionally gx.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (r, &g) in gy.iter().enumerate() {
        gb[r] += g;
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (c, xv) in x.iter().enumerate() {
            row[c] += g * xv;
        }
    }
    if let Some(gx) = gx {
        for (c, gxc) in gx.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (r, &g) in gy.iter().enumerate() {
                acc += w[r * cols + c] * g;
            }
            *gxc += acc;
        }
    }
}
