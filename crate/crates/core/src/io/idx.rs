//! IDX image/label pairs (the MNIST container format).

use std::path::Path;

use crate::error::{Error, Result};

use super::{read_file, Dataset, Reader};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Maps a byte intensity to `[-1, 1]`.
pub fn scale_pixel(p: u8) -> f32 {
    2.0 * p as f32 / 255.0 - 1.0
}

/// Decodes IDX images and labels; grayscale is replicated to three channels.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut ri = Reader::new(images, "idx images");
    let magic = ri.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(ri.error(0, format!("expected magic 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}")));
    }
    let n = ri.u32_be()? as usize;
    let h = ri.u32_be()? as usize;
    let w = ri.u32_be()? as usize;
    let raw = ri.take(n * h * w)?;

    let mut rl = Reader::new(labels, "idx labels");
    let magic = rl.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(rl.error(0, format!("expected magic 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}")));
    }
    let nl = rl.u32_be()? as usize;
    if nl != n {
        return Err(rl.error(4, format!("{nl} labels for {n} images")));
    }
    let lab: Vec<u32> = rl.take(n)?.iter().map(|&l| l as u32).collect();
    let classes = lab.iter().max().map_or(0, |&m| m as usize + 1);

    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    for img in raw.chunks(h * w) {
        for _ in 0..3 {
            pixels.extend(img.iter().map(|&p| scale_pixel(p)));
        }
    }
    if n == 0 {
        return Err(Error::invalid("idx file holds no images"));
    }
    Dataset::new(3, h, w, classes, pixels, lab)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    decode_idx(&read_file(images)?, &read_file(labels)?)
}
