//! Optic-disc/cup ellipse annotations and structural biomarkers.

use crate::error::SimError;

/// One fitted ellipse: width/height in pixels, rotation in radians, center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Paired disc and cup ellipses for one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseAnnotation {
    pub disc: Ellipse,
    pub cup: Ellipse,
}

/// Vertical diameter of an ellipse: `2 sqrt(a^2 sin^2 t + b^2 cos^2 t)`
/// with semi-axes `a = w/2`, `b = h/2`.
pub fn vertical_diameter(w: f64, h: f64, theta: f64) -> f64 {
    let a = w / 2.0;
    let b = h / 2.0;
    let (s, c) = theta.sin_cos();
    2.0 * (a * a * s * s + b * b * c * c).sqrt()
}

/// The three structural biomarkers: vertical cup-to-disc ratio, area
/// cup-to-disc ratio, and normalized cup-disc decentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biomarkers {
    pub vcdr: f64,
    pub acdr: f64,
    pub dec: f64,
    pub disc_vd: f64,
}

pub fn structural_biomarkers(ann: &EllipseAnnotation) -> Result<Biomarkers, SimError> {
    let vd_disc = vertical_diameter(ann.disc.w, ann.disc.h, ann.disc.theta);
    if vd_disc <= 0.0 {
        return Err(SimError::ZeroDiscDiameter);
    }
    let vd_cup = vertical_diameter(ann.cup.w, ann.cup.h, ann.cup.theta);
    let area_ratio =
        (ann.cup.w / 2.0 * ann.cup.h / 2.0) / (ann.disc.w / 2.0 * ann.disc.h / 2.0);
    let dx = ann.cup.cx - ann.disc.cx;
    let dy = ann.cup.cy - ann.disc.cy;
    Ok(Biomarkers {
        vcdr: vd_cup / vd_disc,
        acdr: area_ratio,
        dec: (dx * dx + dy * dy).sqrt() / vd_disc,
        disc_vd: vd_disc,
    })
}

/// Geometry feature vector `[1, vCDR, aCDR, log VD_disc, dec]`.
pub fn geometry_features(b: &Biomarkers) -> [f64; 5] {
    [1.0, b.vcdr, b.acdr, b.disc_vd.ln(), b.dec]
}
