//! 8-bit grayscale image I/O (PNG and PGM by extension). Color inputs are
//! collapsed to luma on load.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ImageIoError {
    Io(std::io::Error),
    Decode(String),
    Encode(String),
}

impl fmt::Display for ImageIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "image io: {e}"),
            Self::Decode(m) => write!(f, "image decode: {m}"),
            Self::Encode(m) => write!(f, "image encode: {m}"),
        }
    }
}

impl std::error::Error for ImageIoError {}

impl From<std::io::Error> for ImageIoError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Load any 8-bit image as (width, height, luma bytes).
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>), ImageIoError> {
    let img = image::open(path).map_err(|e| ImageIoError::Decode(e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok((w, h, gray.into_raw()))
}

/// Save luma bytes; the format follows the extension (.png or .pgm).
pub fn save_gray(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), ImageIoError> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| ImageIoError::Encode("buffer does not match extents".into()))?;
    buf.save(path).map_err(|e| ImageIoError::Encode(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_pgm_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dssau_imageio_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data: Vec<u8> = (0..64u32).map(|v| (v * 4) as u8).collect();
        for name in ["t.png", "t.pgm"] {
            let p = dir.join(name);
            save_gray(&p, 8, 8, &data).unwrap();
            let (w, h, back) = load_gray(&p).unwrap();
            assert_eq!((w, h), (8, 8));
            assert_eq!(back, data, "{name}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
