//! Label masks and the segmentation evaluation metrics: Dice similarity
//! coefficient on pixel sets, Hausdorff distance and average surface
//! distance on boundary pixels.
//!
//! Distances are Euclidean between pixel centers, multiplied by the mask's
//! spacing (millimetres per pixel). Everything is evaluated by the plain
//! O(|A|·|B|) definition; masks here are desk-scale.

use std::fmt;

pub const BACKGROUND: u8 = 0;
pub const PS: u8 = 1;
pub const FH: u8 = 2;
pub const NUM_CLASSES: usize = 3;

// ── Errors ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    ExtentMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    /// The metric is undefined on an empty pixel or boundary set.
    Undefined { metric: &'static str, class: u8 },
    InvalidMask(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ExtentMismatch { a, b } => {
                write!(f, "mask extents differ: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)
            }
            Self::Undefined { metric, class } => {
                write!(f, "{metric} undefined: class {class} has no pixels")
            }
            Self::InvalidMask(msg) => write!(f, "invalid mask: {msg}"),
        }
    }
}

impl std::error::Error for MetricError {}

// ── LabelMask ──────────────────────────────────────────────────────────────

/// Per-pixel class map over {background, PS, FH}, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    labels: Vec<u8>,
    /// Millimetres per pixel.
    pub spacing: f64,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, MetricError> {
        Self::with_spacing(width, height, labels, 1.0)
    }

    pub fn with_spacing(
        width: usize,
        height: usize,
        labels: Vec<u8>,
        spacing: f64,
    ) -> Result<Self, MetricError> {
        if width == 0 || height == 0 {
            return Err(MetricError::InvalidMask("zero extent".into()));
        }
        if labels.len() != width * height {
            return Err(MetricError::InvalidMask(format!(
                "buffer length {} != {width}x{height}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(MetricError::InvalidMask(format!("label {bad} out of range")));
        }
        if !(spacing > 0.0) {
            return Err(MetricError::InvalidMask(format!("spacing {spacing} not positive")));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
            spacing,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// All (x, y) pixels of one class.
    pub fn class_pixels(&self, class: u8) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == class {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Boundary of one class: its pixels having at least one 4-neighbor
    /// outside the class, with the image border counting as outside.
    pub fn boundary(&self, class: u8) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != class {
                    continue;
                }
                let exposed = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || self.get(x - 1, y) != class
                    || self.get(x + 1, y) != class
                    || self.get(x, y - 1) != class
                    || self.get(x, y + 1) != class;
                if exposed {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

fn check_pair(a: &LabelMask, b: &LabelMask) -> Result<(), MetricError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricError::ExtentMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    if a.spacing != b.spacing {
        return Err(MetricError::InvalidMask(format!(
            "spacings differ: {} vs {}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

// ── Metrics ────────────────────────────────────────────────────────────────

/// Dice similarity coefficient 2|A∩B| / (|A|+|B|) on the class pixel sets;
/// 1.0 when both sets are empty.
pub fn dsc(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (la, lb) in a.labels.iter().zip(&b.labels) {
        let ia = *la == class;
        let ib = *lb == class;
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn dist(p: (usize, usize), q: (usize, usize)) -> f64 {
    let dx = p.0 as f64 - q.0 as f64;
    let dy = p.1 as f64 - q.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

fn min_dist(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Symmetric Hausdorff distance between the class boundaries, in mm.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let ba = a.boundary(class);
    let bb = b.boundary(class);
    if ba.is_empty() || bb.is_empty() {
        return Err(MetricError::Undefined {
            metric: "hausdorff",
            class,
        });
    }
    let fwd = ba.iter().map(|&p| min_dist(p, &bb)).fold(0.0, f64::max);
    let bwd = bb.iter().map(|&p| min_dist(p, &ba)).fold(0.0, f64::max);
    Ok(fwd.max(bwd) * a.spacing)
}

/// Average surface distance: the symmetric mean of directed mean
/// nearest-boundary distances, in mm.
pub fn asd(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let ba = a.boundary(class);
    let bb = b.boundary(class);
    if ba.is_empty() || bb.is_empty() {
        return Err(MetricError::Undefined {
            metric: "asd",
            class,
        });
    }
    let fwd: f64 = ba.iter().map(|&p| min_dist(p, &bb)).sum::<f64>() / ba.len() as f64;
    let bwd: f64 = bb.iter().map(|&p| min_dist(p, &ba)).sum::<f64>() / bb.len() as f64;
    Ok(0.5 * (fwd + bwd) * a.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, h: usize, fg: &[(usize, usize)]) -> LabelMask {
        let mut labels = vec![0u8; w * h];
        for &(x, y) in fg {
            labels[y * w + x] = 1;
        }
        LabelMask::new(w, h, labels).unwrap()
    }

    fn random_mask(w: usize, h: usize, seed: u64) -> LabelMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..3u8)).collect();
        LabelMask::new(w, h, labels).unwrap()
    }

    #[test]
    fn mask_construction_validates() {
        assert!(LabelMask::new(2, 2, vec![0, 1, 2, 3]).is_err());
        assert!(LabelMask::new(2, 2, vec![0, 1, 2]).is_err());
        assert!(LabelMask::with_spacing(2, 2, vec![0; 4], 0.0).is_err());
        assert!(LabelMask::new(2, 2, vec![0, 1, 2, 0]).is_ok());
    }

    #[test]
    fn dsc_identity_is_one() {
        let a = mask(4, 4, &[(1, 1), (2, 1)]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn dsc_disjoint_is_zero() {
        let a = mask(4, 4, &[(0, 0)]);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dsc_hand_arithmetic() {
        // |A| = 6, |B| = 4, |A∩B| = 3 -> 2*3/10 = 0.6
        let a = mask(8, 8, &[(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)]);
        let b = mask(8, 8, &[(0, 0), (1, 0), (2, 0), (7, 7)]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.6);
    }

    #[test]
    fn dsc_both_empty_is_one_by_convention() {
        let a = mask(4, 4, &[]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn dsc_rejects_extent_mismatch() {
        let a = mask(4, 4, &[]);
        let b = mask(4, 5, &[]);
        assert!(matches!(
            dsc(&a, &b, 1),
            Err(MetricError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn hausdorff_identity_is_zero() {
        let a = mask(6, 6, &[(2, 2), (3, 2), (2, 3), (3, 3)]);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_three_four_five() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), 5.0);
    }

    #[test]
    fn hausdorff_errors_on_empty_class() {
        let a = mask(4, 4, &[(0, 0)]);
        let b = mask(4, 4, &[]);
        assert!(matches!(
            hausdorff(&a, &b, 1),
            Err(MetricError::Undefined { metric: "hausdorff", .. })
        ));
    }

    #[test]
    fn asd_identity_and_single_points() {
        let a = mask(6, 6, &[(1, 1), (2, 1)]);
        assert_eq!(asd(&a, &a, 1).unwrap(), 0.0);
        let p = mask(4, 4, &[(0, 0)]);
        let q = mask(4, 4, &[(0, 2)]);
        assert_eq!(asd(&p, &q, 1).unwrap(), 2.0);
    }

    #[test]
    fn boundary_single_pixel_is_itself() {
        let a = mask(3, 3, &[(1, 1)]);
        assert_eq!(a.boundary(1), vec![(1, 1)]);
    }

    #[test]
    fn boundary_of_solid_square_is_its_perimeter() {
        let fg: Vec<(usize, usize)> = (1..5).flat_map(|y| (1..5).map(move |x| (x, y))).collect();
        let a = mask(6, 6, &fg);
        let b = a.boundary(1);
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&(2, 2)) && !b.contains(&(3, 3)));
    }

    #[test]
    fn boundary_predicate_holds_on_random_blobs() {
        for seed in 0..5 {
            let m = random_mask(12, 12, 200 + seed);
            for cls in 0..3u8 {
                let boundary = m.boundary(cls);
                for &(x, y) in &boundary {
                    assert_eq!(m.get(x, y), cls);
                    let exposed = x == 0
                        || y == 0
                        || x == 11
                        || y == 11
                        || m.get(x - 1, y) != cls
                        || m.get(x + 1, y) != cls
                        || m.get(x, y - 1) != cls
                        || m.get(x, y + 1) != cls;
                    assert!(exposed, "({x},{y}) listed but enclosed");
                }
                // completeness: every exposed class pixel is listed
                for y in 0..12 {
                    for x in 0..12 {
                        if m.get(x, y) != cls {
                            continue;
                        }
                        let exposed = x == 0
                            || y == 0
                            || x == 11
                            || y == 11
                            || m.get(x - 1, y) != cls
                            || m.get(x + 1, y) != cls
                            || m.get(x, y - 1) != cls
                            || m.get(x, y + 1) != cls;
                        assert_eq!(exposed, boundary.contains(&(x, y)));
                    }
                }
            }
        }
    }

    #[test]
    fn distances_match_brute_force_and_hd_bounds_asd() {
        // independent double-loop oracle over boundary point sets
        let brute = |pa: &[(usize, usize)], pb: &[(usize, usize)]| -> (f64, f64) {
            let d = |p: (usize, usize), q: (usize, usize)| {
                let dx = p.0 as f64 - q.0 as f64;
                let dy = p.1 as f64 - q.1 as f64;
                (dx * dx + dy * dy).sqrt()
            };
            let mins_ab: Vec<f64> = pa
                .iter()
                .map(|&p| pb.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
                .collect();
            let mins_ba: Vec<f64> = pb
                .iter()
                .map(|&p| pa.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
                .collect();
            let hd = mins_ab
                .iter()
                .chain(&mins_ba)
                .cloned()
                .fold(0.0, f64::max);
            let asd = 0.5
                * (mins_ab.iter().sum::<f64>() / mins_ab.len() as f64
                    + mins_ba.iter().sum::<f64>() / mins_ba.len() as f64);
            (hd, asd)
        };
        let mut checked = 0;
        for seed in 0..40 {
            let a = random_mask(16, 16, 300 + seed);
            let b = random_mask(16, 16, 400 + seed);
            for cls in 1..3u8 {
                let (ba, bb) = (a.boundary(cls), b.boundary(cls));
                if ba.is_empty() || bb.is_empty() {
                    continue;
                }
                let (hd_ref, asd_ref) = brute(&ba, &bb);
                let hd = hausdorff(&a, &b, cls).unwrap();
                let asd_v = asd(&a, &b, cls).unwrap();
                assert!((hd - hd_ref).abs() < 1e-9, "seed {seed} cls {cls}");
                assert!((asd_v - asd_ref).abs() < 1e-9, "seed {seed} cls {cls}");
                assert!(hd + 1e-12 >= asd_v, "max of mins below mean of mins");
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} pairs exercised");
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = random_mask(10, 10, 500);
        let b = random_mask(10, 10, 501);
        assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), hausdorff(&b, &a, 1).unwrap());
        assert_eq!(asd(&a, &b, 1).unwrap(), asd(&b, &a, 1).unwrap());
    }

    #[test]
    fn distances_scale_linearly_with_spacing() {
        let mut a = random_mask(10, 10, 502);
        let mut b = random_mask(10, 10, 503);
        let hd1 = hausdorff(&a, &b, 2).unwrap();
        let asd1 = asd(&a, &b, 2).unwrap();
        a.spacing = 2.5;
        b.spacing = 2.5;
        assert!((hausdorff(&a, &b, 2).unwrap() - 2.5 * hd1).abs() < 1e-12);
        assert!((asd(&a, &b, 2).unwrap() - 2.5 * asd1).abs() < 1e-12);
        // dsc is dimensionless
        assert_eq!(dsc(&a, &b, 2).unwrap(), {
            a.spacing = 1.0;
            b.spacing = 1.0;
            dsc(&a, &b, 2).unwrap()
        });
    }
}
