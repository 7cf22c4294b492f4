//! Angle of progression (AoP) and head-symphysis distance (HSD) from PS/FH
//! masks.
//!
//! The construction: fit ellipses to the PS and FH boundary pixels (direct
//! least-squares conic fit constrained to an ellipse), take the PS major
//! axis, pick the endpoint closer to the FH centroid as the inferior end,
//! and measure
//!
//! - AoP: the angle at that endpoint between the ray along the PS major axis
//!   pointing away from the other endpoint and the tangent ray to the fitted
//!   FH ellipse on the advancing side (the tangent ray maximizing the angle);
//! - HSD: the distance from the inferior endpoint to the nearest FH boundary
//!   pixel, so HSD measures against the actual segmented surface.

use crate::metrics::{LabelMask, FH, PS};
use nalgebra::{Matrix3, Vector3};
use std::fmt;

// ── Errors ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum BiometryError {
    TooFewPoints { needed: usize, got: usize },
    /// The conic fit failed or did not produce an ellipse.
    FitFailed(String),
    /// A required class has no pixels in the mask.
    MissingClass { class: u8 },
    /// The tangent construction is impossible (inferior endpoint inside the
    /// head ellipse, or coincident geometry).
    DegenerateGeometry(String),
}

impl fmt::Display for BiometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewPoints { needed, got } => {
                write!(f, "ellipse fit needs {needed} points, got {got}")
            }
            Self::FitFailed(msg) => write!(f, "ellipse fit failed: {msg}"),
            Self::MissingClass { class } => write!(f, "class {class} missing from mask"),
            Self::DegenerateGeometry(msg) => write!(f, "degenerate geometry: {msg}"),
        }
    }
}

impl std::error::Error for BiometryError {}

// ── Ellipse ────────────────────────────────────────────────────────────────

/// Geometric ellipse: center, semi-axes (major >= minor) and the major-axis
/// angle against +x in [0, π).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Boundary point at parameter `t`.
    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (px, py) = (self.semi_major * t.cos(), self.semi_minor * t.sin());
        (self.cx + c * px - s * py, self.cy + s * px + c * py)
    }

    /// Map a point into the canonical frame (center at origin, major axis
    /// on +x).
    fn to_canonical(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn from_canonical(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.cx + c * x - s * y, self.cy + s * x + c * y)
    }

    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_canonical(x, y);
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) < 1.0
    }

    /// Endpoints of the major axis.
    pub fn major_endpoints(&self) -> [(f64, f64); 2] {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (self.semi_major * c, self.semi_major * s);
        [(self.cx + dx, self.cy + dy), (self.cx - dx, self.cy - dy)]
    }

    /// Points where the tangent lines from an exterior point touch the
    /// ellipse. In the canonical frame the chord of contact gives
    /// cos(t - φ) = 1/R with R = |(px/a, py/b)|; R < 1 means the point is
    /// interior and no tangent exists.
    pub fn tangent_points(&self, x: f64, y: f64) -> Result<[(f64, f64); 2], BiometryError> {
        let (u, v) = self.to_canonical(x, y);
        let (u1, u2) = (u / self.semi_major, v / self.semi_minor);
        let r = (u1 * u1 + u2 * u2).sqrt();
        if r <= 1.0 {
            return Err(BiometryError::DegenerateGeometry(format!(
                "point ({x:.2}, {y:.2}) is not outside the ellipse"
            )));
        }
        let phi = u2.atan2(u1);
        let dt = (1.0 / r).acos();
        let p1 = (
            self.semi_major * (phi + dt).cos(),
            self.semi_minor * (phi + dt).sin(),
        );
        let p2 = (
            self.semi_major * (phi - dt).cos(),
            self.semi_minor * (phi - dt).sin(),
        );
        Ok([
            self.from_canonical(p1.0, p1.1),
            self.from_canonical(p2.0, p2.1),
        ])
    }
}

// ── Direct least-squares ellipse fit ───────────────────────────────────────

/// Fit an ellipse to boundary points by the direct least-squares conic fit
/// with the ellipse constraint (4AC − B² > 0), solved through the reduced
/// 3x3 eigenproblem. Points are normalized to their centroid and mean radius
/// before fitting.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<Ellipse, BiometryError> {
    if points.len() < 6 {
        return Err(BiometryError::TooFewPoints {
            needed: 6,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x / n, ay + y / n));
    let mean_r = points
        .iter()
        .map(|&(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_r < 1e-12 {
        return Err(BiometryError::FitFailed("coincident points".into()));
    }
    let scale = std::f64::consts::SQRT_2 / mean_r;

    // Scatter blocks of the design [x², xy, y² | x, y, 1].
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let x = (px - mx) * scale;
        let y = (py - my) * scale;
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| BiometryError::FitFailed("degenerate point configuration".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // C1⁻¹ M for the constraint matrix C1 = [[0,0,2],[0,-1,0],[2,0,0]]
    let sys = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );
    let a1 = constrained_eigenvector(&sys)
        .ok_or_else(|| BiometryError::FitFailed("no ellipse eigenvector".into()))?;
    let a2 = t * a1;

    // Denormalize x' = (x - mx)·s, y' = (y - my)·s back to image coordinates.
    let (a, b, c) = (a1[0], a1[1], a1[2]);
    let (d, e, f) = (a2[0], a2[1], a2[2]);
    let s = scale;
    let (ai, bi, ci) = (a * s * s, b * s * s, c * s * s);
    let di = -2.0 * a * s * s * mx - b * s * s * my + d * s;
    let ei = -b * s * s * mx - 2.0 * c * s * s * my + e * s;
    let fi = a * s * s * mx * mx + b * s * s * mx * my + c * s * s * my * my
        - d * s * mx
        - e * s * my
        + f;
    conic_to_ellipse([ai, bi, ci, di, ei, fi])
}

/// Real eigenvalues of a 3x3 matrix via the characteristic cubic, and the
/// eigenvector satisfying the ellipse constraint 4 a₀ a₂ − a₁² > 0.
fn constrained_eigenvector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let tr = m.trace();
    let minor_sum = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
        + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let det = m.determinant();
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in cubic_roots(-tr, minor_sum, -det) {
        let shifted = m - Matrix3::identity() * lambda;
        // null space direction: the largest cross product of two rows
        let rows: [Vector3<f64>; 3] = [
            shifted.row(0).transpose(),
            shifted.row(1).transpose(),
            shifted.row(2).transpose(),
        ];
        let candidates = [
            rows[0].cross(&rows[1]),
            rows[0].cross(&rows[2]),
            rows[1].cross(&rows[2]),
        ];
        let v = candidates
            .iter()
            .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())?
            .clone_owned();
        if v.norm() < 1e-12 {
            continue;
        }
        let v = v / v.norm();
        let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
        if constraint > 0.0 {
            // among valid candidates prefer the strongest constraint value
            if best.as_ref().map_or(true, |(c, _)| constraint > *c) {
                best = Some((constraint, v));
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Real roots of λ³ + p λ² + q λ + r.
fn cubic_roots(p: f64, q: f64, r: f64) -> Vec<f64> {
    // depressed cubic t³ + at + b with λ = t − p/3
    let a = q - p * p / 3.0;
    let b = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let shift = -p / 3.0;
    let disc = (b / 2.0).powi(2) + (a / 3.0).powi(3);
    if disc > 1e-14 {
        let sq = disc.sqrt();
        let u = (-b / 2.0 + sq).cbrt();
        let v = (-b / 2.0 - sq).cbrt();
        vec![u + v + shift]
    } else {
        // three real roots (or multiple): trigonometric form
        let m = (-a / 3.0).max(0.0).sqrt();
        if m < 1e-30 {
            return vec![shift];
        }
        let arg = (3.0 * b / (2.0 * a * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| 2.0 * m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    }
}

/// General conic A x² + B xy + C y² + D x + E y + F = 0 to geometric
/// parameters; fails when the coefficients do not describe a real ellipse.
fn conic_to_ellipse(coef: [f64; 6]) -> Result<Ellipse, BiometryError> {
    let [a, b, c, d, e, f] = coef;
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        return Err(BiometryError::FitFailed("conic is not an ellipse".into()));
    }
    let denom = -disc;
    let cx = (b * e - 2.0 * c * d) / denom;
    let cy = (b * d - 2.0 * a * e) / denom;
    // value of the conic at the center
    let fc = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    if fc.abs() < 1e-18 {
        return Err(BiometryError::FitFailed("degenerate (point) ellipse".into()));
    }
    // eigenvalues of the quadratic part; the direction θ belongs to λ_max
    let half_sum = (a + c) / 2.0;
    let diff = (((a - c) / 2.0).powi(2) + (b / 2.0).powi(2)).sqrt();
    let (l_max, l_min) = (half_sum + diff, half_sum - diff);
    let r_along_theta_sq = -fc / l_max;
    let r_across_sq = -fc / l_min;
    if r_along_theta_sq <= 0.0 || r_across_sq <= 0.0 {
        return Err(BiometryError::FitFailed("imaginary ellipse".into()));
    }
    let theta = if (a - c).abs() < 1e-15 && b.abs() < 1e-15 {
        0.0
    } else {
        0.5 * b.atan2(a - c)
    };
    let (along, across) = (r_along_theta_sq.sqrt(), r_across_sq.sqrt());
    // the axis along θ pairs with λ_max, i.e. the shorter one
    let (semi_major, semi_minor, mut angle) = if across >= along {
        (across, along, theta + std::f64::consts::FRAC_PI_2)
    } else {
        (along, across, theta)
    };
    while angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    while angle >= std::f64::consts::PI {
        angle -= std::f64::consts::PI;
    }
    Ok(Ellipse {
        cx,
        cy,
        semi_major,
        semi_minor,
        angle,
    })
}

// ── AoP / HSD ──────────────────────────────────────────────────────────────

/// AoP and HSD with the fitted geometry they came from.
#[derive(Debug, Clone)]
pub struct BiometryResult {
    /// Angle of progression in degrees, in (0, 180).
    pub aop_deg: f64,
    /// Head-symphysis distance (pixels, or millimetres when the mask carries
    /// a spacing).
    pub hsd: f64,
    pub ps_ellipse: Ellipse,
    pub fh_ellipse: Ellipse,
    /// Inferior endpoint of the PS major axis.
    pub ps_inferior: (f64, f64),
}

/// AoP for exact ellipse geometry: `reference` disambiguates the inferior
/// endpoint (the one closer to it wins). Returns the angle and the inferior
/// endpoint. This is the same construction the mask path uses, applied to
/// noise-free parameters, so synthetic scenes have closed-form ground truth.
pub fn aop_from_geometry(
    ps: &Ellipse,
    fh: &Ellipse,
    reference: (f64, f64),
) -> Result<(f64, (f64, f64)), BiometryError> {
    let [e0, e1] = ps.major_endpoints();
    let d0 = (e0.0 - reference.0).powi(2) + (e0.1 - reference.1).powi(2);
    let d1 = (e1.0 - reference.0).powi(2) + (e1.1 - reference.1).powi(2);
    let (inferior, other) = if d0 <= d1 { (e0, e1) } else { (e1, e0) };
    let axis = normalize((inferior.0 - other.0, inferior.1 - other.1))?;
    let touches = fh.tangent_points(inferior.0, inferior.1)?;
    let mut best = f64::NAN;
    for t in touches {
        let dir = normalize((t.0 - inferior.0, t.1 - inferior.1))?;
        for ray in [dir, (-dir.0, -dir.1)] {
            let ang = angle_between(axis, ray);
            if !(ang <= best) {
                best = ang;
            }
        }
    }
    Ok((best.to_degrees(), inferior))
}

fn normalize(v: (f64, f64)) -> Result<(f64, f64), BiometryError> {
    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
    if n < 1e-12 {
        return Err(BiometryError::DegenerateGeometry("zero-length direction".into()));
    }
    Ok((v.0 / n, v.1 / n))
}

fn angle_between(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 * b.0 + a.1 * b.1).clamp(-1.0, 1.0).acos()
}

fn fitted_class_ellipse(mask: &LabelMask, class: u8) -> Result<Ellipse, BiometryError> {
    let boundary = mask.boundary(class);
    if boundary.is_empty() {
        return Err(BiometryError::MissingClass { class });
    }
    let pts: Vec<(f64, f64)> = boundary.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let fit = fit_ellipse(&pts)?;
    // Boundary pixel centers are the last points inside the shape, about
    // half a pixel inside the continuous contour; dilate to compensate.
    Ok(Ellipse {
        semi_major: fit.semi_major + 0.5,
        semi_minor: fit.semi_minor + 0.5,
        ..fit
    })
}

fn class_centroid(mask: &LabelMask, class: u8) -> Result<(f64, f64), BiometryError> {
    let px = mask.class_pixels(class);
    if px.is_empty() {
        return Err(BiometryError::MissingClass { class });
    }
    let n = px.len() as f64;
    Ok(px
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64 / n, ay + y as f64 / n)))
}

/// Distance from a point to the nearest pixel of a boundary set.
pub(crate) fn nearest_boundary_distance(p: (f64, f64), boundary: &[(usize, usize)]) -> f64 {
    boundary
        .iter()
        .map(|&(x, y)| ((x as f64 - p.0).powi(2) + (y as f64 - p.1).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Full biometry from one mask holding both classes.
pub fn compute_biometry(mask: &LabelMask) -> Result<BiometryResult, BiometryError> {
    let ps_ellipse = fitted_class_ellipse(mask, PS)?;
    let fh_ellipse = fitted_class_ellipse(mask, FH)?;
    let fh_centroid = class_centroid(mask, FH)?;
    let (aop_deg, inferior) = aop_from_geometry(&ps_ellipse, &fh_ellipse, fh_centroid)?;
    let hsd_px = nearest_boundary_distance(inferior, &mask.boundary(FH));
    Ok(BiometryResult {
        aop_deg,
        hsd: hsd_px * mask.spacing,
        ps_ellipse,
        fh_ellipse,
        ps_inferior: inferior,
    })
}

/// Angle of progression in degrees; `ps` provides the PS class pixels and
/// `fh` the FH class pixels (they may be the same mask).
pub fn compute_aop(ps: &LabelMask, fh: &LabelMask) -> Result<f64, BiometryError> {
    let ps_ellipse = fitted_class_ellipse(ps, PS)?;
    let fh_ellipse = fitted_class_ellipse(fh, FH)?;
    let fh_centroid = class_centroid(fh, FH)?;
    Ok(aop_from_geometry(&ps_ellipse, &fh_ellipse, fh_centroid)?.0)
}

/// Head-symphysis distance: inferior PS endpoint to the nearest FH boundary
/// pixel, times the mask spacing.
pub fn compute_hsd(ps: &LabelMask, fh: &LabelMask) -> Result<f64, BiometryError> {
    let ps_ellipse = fitted_class_ellipse(ps, PS)?;
    let fh_centroid = class_centroid(fh, FH)?;
    let [e0, e1] = ps_ellipse.major_endpoints();
    let d0 = (e0.0 - fh_centroid.0).powi(2) + (e0.1 - fh_centroid.1).powi(2);
    let d1 = (e1.0 - fh_centroid.0).powi(2) + (e1.1 - fh_centroid.1).powi(2);
    let inferior = if d0 <= d1 { e0 } else { e1 };
    let boundary = fh.boundary(FH);
    if boundary.is_empty() {
        return Err(BiometryError::MissingClass { class: FH });
    }
    Ok(nearest_boundary_distance(inferior, &boundary) * fh.spacing)
}

/// Absolute AoP and HSD differences between a prediction and a reference,
/// units preserved.
pub fn biometry_error(pred: &BiometryResult, gt: &BiometryResult) -> (f64, f64) {
    ((pred.aop_deg - gt.aop_deg).abs(), (pred.hsd - gt.hsd).abs())
}
