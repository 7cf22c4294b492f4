//! Training-time augmentations: axis flips (p = 0.5 each), rotation uniform
//! in ±15°, contrast gain uniform in [0.8, 1.25]. Images are f32 in [0, 1];
//! masks rotate with nearest-neighbor sampling so labels stay crisp.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.25);

/// Apply one random augmentation draw to an image/mask pair.
pub fn augment_pair(
    image: &[f32],
    labels: &[u8],
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<u8>) {
    let mut img = image.to_vec();
    let mut lab = labels.to_vec();

    if rng.gen_bool(0.5) {
        flip_h(&mut img, width, height);
        flip_h(&mut lab, width, height);
    }
    if rng.gen_bool(0.5) {
        flip_v(&mut img, width, height);
        flip_v(&mut lab, width, height);
    }

    let angle = rng
        .gen_range(-MAX_ROTATION_DEG.to_radians()..MAX_ROTATION_DEG.to_radians());
    let (img_r, lab_r) = rotate(&img, &lab, width, height, angle);

    let gain = rng.gen_range(CONTRAST_RANGE.0..CONTRAST_RANGE.1) as f32;
    let img_c = img_r
        .into_iter()
        .map(|v| ((v - 0.5) * gain + 0.5).clamp(0.0, 1.0))
        .collect();
    (img_c, lab_r)
}

fn flip_h<T: Copy>(buf: &mut [T], width: usize, height: usize) {
    for y in 0..height {
        buf[y * width..(y + 1) * width].reverse();
    }
}

fn flip_v<T: Copy>(buf: &mut [T], width: usize, height: usize) {
    for y in 0..height / 2 {
        for x in 0..width {
            buf.swap(y * width + x, (height - 1 - y) * width + x);
        }
    }
}

/// Rotate about the image center: bilinear for the image (border clamp),
/// nearest for the labels.
fn rotate(
    image: &[f32],
    labels: &[u8],
    width: usize,
    height: usize,
    angle: f64,
) -> (Vec<f32>, Vec<u8>) {
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut img = vec![0f32; image.len()];
    let mut lab = vec![0u8; labels.len()];
    for y in 0..height {
        for x in 0..width {
            // inverse map into the source
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (width - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (height - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let top = image[y0 * width + x0] * (1.0 - fx) + image[y0 * width + x1] * fx;
            let bot = image[y1 * width + x0] * (1.0 - fx) + image[y1 * width + x1] * fx;
            img[y * width + x] = top * (1.0 - fy) + bot * fy;
            let (nx, ny) = (sx.round() as usize, sy.round() as usize);
            lab[y * width + x] = labels[ny * width + nx];
        }
    }
    (img, lab)
}
