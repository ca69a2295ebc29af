//! Labelled image sets and their `PKDS` file format.
//!
//! Layout (little-endian): `PKDS`, then `u32` sample count, channels,
//! height, width and class count; pixels as `f32` (N·C·H·W, row-major);
//! labels as `u32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{read_file, write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"PKDS";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let d = Self {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.sample_len();
        if per == 0 {
            return Err(Error::invalid("dataset samples must be non-empty"));
        }
        if self.pixels.len() != per * self.labels.len() {
            return Err(Error::invalid(format!(
                "{} pixels do not match {} samples of {per}",
                self.pixels.len(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::invalid(format!("label {l} out of range for {} classes", self.classes)));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into an NCHW tensor, mirroring those with
    /// `flip[k]` set.
    pub fn batch<T: Real>(&self, indices: &[usize], flip: Option<&[bool]>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range for {} samples", self.len())));
            }
            let s = self.sample(i);
            let mirror = flip.is_some_and(|f| f[k]);
            for plane in s.chunks(h * w).take(c) {
                for row in plane.chunks(w) {
                    if mirror {
                        data.extend(row.iter().rev().map(|&v| T::lit(v as f64)));
                    } else {
                        data.extend(row.iter().map(|&v| T::lit(v as f64)));
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range")));
            }
            pixels.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.channels, self.height, self.width, self.classes, pixels, labels)
    }

    /// Even-indexed samples and odd-indexed samples.
    pub fn split_halves(&self) -> Result<(Self, Self)> {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        Ok((self.subset(&even)?, self.subset(&odd)?))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(24 + 4 * (self.pixels.len() + self.labels.len()));
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.channels, self.height, self.width, self.classes] {
            let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}")));
        }
        let mut head = [0usize; 5];
        for h in &mut head {
            *h = r.u32()? as usize;
        }
        let [n, c, h, w, classes] = head;
        let pixels = r.f32s(n * c * h * w)?;
        let labels = r.u32s(n)?;
        if r.remaining() != 0 {
            return Err(r.error(r.offset(), format!("{} trailing bytes", r.remaining())));
        }
        Self::new(c, h, w, classes, pixels, labels).map_err(|e| r.error(24, e.to_string()))
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &d.encode()?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let px: Vec<f32> = (0..2 * 2 * 2 * 3).map(|i| i as f32 / 24.0).collect();
        Dataset::new(2, 2, 3, 3, px, vec![0, 2]).unwrap()
    }

    #[test]
    fn roundtrip() {
        let d = tiny();
        assert_eq!(Dataset::decode(&d.encode().unwrap()).unwrap(), d);
    }

    #[test]
    fn rejects_bad_labels_and_pixels() {
        assert!(Dataset::new(1, 1, 1, 2, vec![0.0], vec![2]).is_err());
        assert!(Dataset::new(1, 1, 1, 2, vec![1.5], vec![0]).is_err());
    }

    #[test]
    fn flip_mirrors_rows() {
        let d = tiny();
        let (t, labels) = d.batch::<f32>(&[1], Some(&[true])).unwrap();
        assert_eq!(labels, vec![2]);
        let s = d.sample(1);
        assert_eq!(&t.data()[..3], &[s[2], s[1], s[0]]);
    }
}
