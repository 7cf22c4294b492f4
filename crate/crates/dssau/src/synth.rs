//! Synthetic ellipse scenes standing in for clinical PS/FH data: a small
//! elongated "symphysis" ellipse and a large "head" ellipse below it, with
//! speckle noise and an intensity gradient on the image side, exact masks,
//! and a manifest carrying the true geometry for biometry ground truth.

use crate::biometry::{aop_from_geometry, Ellipse};
use crate::metrics::{LabelMask, BACKGROUND, FH, PS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::Path;

/// One generated case: geometry plus the derived biometry ground truth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthCase {
    pub name: String,
    pub ps: Ellipse,
    pub fh: Ellipse,
    /// Closed-form angle of progression from the true geometry, degrees.
    pub aop_deg: f64,
    /// True inferior-endpoint-to-head-boundary distance, pixels.
    pub hsd_px: f64,
}

/// Rasterize the two ellipses into a label mask; pixel (x, y) samples the
/// point (x, y). The symphysis class wins where the shapes would overlap
/// (generation rejects such scenes anyway).
pub fn rasterize(ps: &Ellipse, fh: &Ellipse, size: usize) -> LabelMask {
    let mut labels = vec![BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            if ps.contains(fx, fy) {
                labels[y * size + x] = PS;
            } else if fh.contains(fx, fy) {
                labels[y * size + x] = FH;
            }
        }
    }
    LabelMask::new(size, size, labels).expect("rasterized labels are in range")
}

/// Grayscale rendering: darkish background with a diagonal intensity
/// gradient, bright symphysis, mid-bright head, multiplicative speckle.
pub fn render_image(ps: &Ellipse, fh: &Ellipse, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let base = if ps.contains(fx, fy) {
                0.85
            } else if fh.contains(fx, fy) {
                0.62
            } else {
                0.30 + 0.12 * ((fx + fy) / (2.0 * size as f64) - 0.5)
            };
            // speckle: zero-mean Gaussian via Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let v = (base * (1.0 + 0.08 * n)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Distance from a point to an ellipse boundary by dense parameter sampling.
fn point_to_ellipse_distance(p: (f64, f64), e: &Ellipse) -> f64 {
    let samples = 8192;
    (0..samples)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / samples as f64;
            let (x, y) = e.point_at(t);
            ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sample one valid scene: both shapes inside the frame with a margin, no
/// overlap, the symphysis inferior endpoint clearly outside the head so the
/// tangent construction is well defined.
pub fn generate_scene(size: usize, rng: &mut ChaCha8Rng) -> (Ellipse, Ellipse) {
    let n = size as f64;
    for _attempt in 0..1000 {
        let ps_a = rng.gen_range(0.10..0.14) * n;
        let ps_b = ps_a * rng.gen_range(0.30..0.45);
        let phi = rng.gen_range(20f64.to_radians()..70f64.to_radians());
        let ps = Ellipse {
            cx: rng.gen_range(0.22..0.34) * n,
            cy: rng.gen_range(0.24..0.38) * n,
            semi_major: ps_a,
            semi_minor: ps_b,
            angle: phi,
        };
        // inferior end points down-right (y grows downward)
        let inferior = (ps.cx + ps_a * phi.cos(), ps.cy + ps_a * phi.sin());
        let fh_a = rng.gen_range(0.17..0.24) * n;
        let fh_b = fh_a * rng.gen_range(0.75..0.95);
        let jitter = rng.gen_range(-15f64.to_radians()..15f64.to_radians());
        let dir = (phi + jitter).sin_cos();
        let d = rng.gen_range(1.30..1.70) * fh_a;
        let fh = Ellipse {
            cx: inferior.0 + d * dir.1,
            cy: inferior.1 + d * dir.0,
            semi_major: fh_a,
            semi_minor: fh_b,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        if !scene_is_valid(&ps, &fh, size) {
            continue;
        }
        return (ps, fh);
    }
    panic!("scene sampling failed to converge; the parameter ranges should make this unreachable");
}

fn scene_is_valid(ps: &Ellipse, fh: &Ellipse, size: usize) -> bool {
    let n = size as f64;
    let margin = 2.0;
    let inside = |e: &Ellipse| {
        e.cx - e.semi_major >= margin
            && e.cy - e.semi_major >= margin
            && e.cx + e.semi_major <= n - 1.0 - margin
            && e.cy + e.semi_major <= n - 1.0 - margin
    };
    if !inside(ps) || !inside(fh) {
        return false;
    }
    let [e0, e1] = ps.major_endpoints();
    let inferior = if (e0.1, e0.0) >= (e1.1, e1.0) { e0 } else { e1 };
    // inferior endpoint well outside the head, and the shapes separated
    if fh.contains(inferior.0, inferior.1) {
        return false;
    }
    if point_to_ellipse_distance(inferior, fh) < 2.0 {
        return false;
    }
    // no overlap: sample the symphysis boundary against the head interior
    for i in 0..256 {
        let t = 2.0 * std::f64::consts::PI * i as f64 / 256.0;
        let (x, y) = ps.point_at(t);
        if fh.contains(x, y) {
            return false;
        }
    }
    true
}

/// Generate `count` cases into `out_dir/images`, `out_dir/masks` and
/// `out_dir/manifest.jsonl`. Deterministic for a fixed seed.
pub fn generate_dataset(
    count: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> std::io::Result<Vec<SynthCase>> {
    assert!(size % 32 == 0, "image size must be divisible by 32");
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = fs::File::create(out_dir.join("manifest.jsonl"))?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let (ps, fh) = generate_scene(size, &mut rng);
        let name = format!("case_{i:04}");
        let image = render_image(&ps, &fh, size, &mut rng);
        let mask = rasterize(&ps, &fh, size);
        crate::imageio::save_gray(&images.join(format!("{name}.png")), size, size, &image)
            .map_err(std::io::Error::other)?;
        crate::imageio::save_gray(&masks.join(format!("{name}.png")), size, size, mask.labels())
            .map_err(std::io::Error::other)?;
        let (aop_deg, inferior) =
            aop_from_geometry(&ps, &fh, (fh.cx, fh.cy)).expect("generated scenes are valid");
        let case = SynthCase {
            name,
            ps,
            fh,
            aop_deg,
            hsd_px: point_to_ellipse_distance(inferior, &fh),
        };
        serde_json::to_writer(&mut manifest, &case)?;
        manifest.write_all(b"\n")?;
        cases.push(case);
    }
    Ok(cases)
}

/// Parse a manifest written by [`generate_dataset`].
pub fn read_manifest(path: &Path) -> std::io::Result<Vec<SynthCase>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
