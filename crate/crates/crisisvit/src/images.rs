//! Image carriers and loading.
//!
//! Pixel batches are `(batch, channels, size, size)` f64 tensors, normalized
//! with a declared per-channel mean/std that is recorded into checkpoint
//! provenance so training and evaluation can never silently disagree.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array3, Array4, Axis, Dimension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-channel normalization constants applied to raw `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Identity normalization (mean 0, std 1 for 3 channels).
    pub fn unit() -> Self {
        Normalization {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        }
    }

    /// The conventional large-corpus statistics used for transfer learning.
    pub fn imagenet() -> Self {
        Normalization {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(
                "normalization",
                format!("expected {channels} mean/std entries"),
            ));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("normalization.std", "std must be positive"));
        }
        Ok(())
    }
}

/// A normalized pixel batch plus per-item source identifiers.
#[derive(Debug, Clone)]
pub struct ImageTensorBatch {
    pub pixels: Array4<f64>,
    pub ids: Vec<String>,
    pub normalization: Normalization,
}

impl ImageTensorBatch {
    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_images(
        images: Vec<(String, Array3<f64>)>,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("empty image batch".into()));
        }
        let shape = images[0].1.raw_dim();
        let mut pixels = Array4::zeros((images.len(), shape[0], shape[1], shape[2]));
        let mut ids = Vec::with_capacity(images.len());
        for (i, (id, img)) in images.into_iter().enumerate() {
            if img.raw_dim() != shape {
                return Err(Error::Dimension(format!(
                    "image {id} has shape {:?}, expected {:?}",
                    img.shape(),
                    shape.slice()
                )));
            }
            pixels.index_axis_mut(Axis(0), i).assign(&img);
            ids.push(id);
        }
        Ok(ImageTensorBatch {
            pixels,
            ids,
            normalization,
        })
    }
}

/// Source of decoded, normalized images keyed by an opaque reference
/// (an entry id, a relative path, or a synthetic key in tests).
pub trait ImageProvider: Sync {
    /// Load one image as `(channels, size, size)`, resized and normalized.
    fn load(&self, image_ref: &str) -> Result<Array3<f64>>;

    fn load_batch(
        &self,
        refs: &[String],
        normalization: Normalization,
    ) -> Result<ImageTensorBatch> {
        let mut images = Vec::with_capacity(refs.len());
        for r in refs {
            images.push((r.clone(), self.load(r)?));
        }
        ImageTensorBatch::from_images(images, normalization)
    }
}

/// Decode raw encoded bytes into a normalized `(c, size, size)` tensor:
/// resize the shorter side to `size`, center-crop, scale to `[0, 1]`,
/// then apply the per-channel normalization.
pub fn decode_image(
    bytes: &[u8],
    size: usize,
    normalization: &Normalization,
) -> Result<Array3<f64>> {
    normalization.validate(3)?;
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Data(format!("undecodable image: {e}")))?;
    let (w, h) = (img.width(), img.height());
    let scale = size as f64 / w.min(h) as f64;
    let (nw, nh) = (
        ((w as f64 * scale).round() as u32).max(size as u32),
        ((h as f64 * scale).round() as u32).max(size as u32),
    );
    let resized = img.resize_exact(nw, nh, FilterType::Triangle);
    let left = (nw - size as u32) / 2;
    let top = (nh - size as u32) / 2;
    let cropped = resized
        .crop_imm(left, top, size as u32, size as u32)
        .to_rgb8();

    let mut out = Array3::<f64>::zeros((3, size, size));
    for (x, y, pixel) in cropped.enumerate_pixels() {
        for c in 0..3 {
            let raw = pixel.0[c] as f64 / 255.0;
            out[[c, y as usize, x as usize]] = (raw - normalization.mean[c]) / normalization.std[c];
        }
    }
    Ok(out)
}

/// Content-addressed blob store for crawled image bytes: one file per
/// digest, fanned out over a two-character prefix directory.
#[derive(Debug, Clone)]
pub struct ImageStoreDir {
    root: PathBuf,
}

impl ImageStoreDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ImageStoreDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2.min(digest.len())]).join(digest)
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let digest = hex::encode(Sha256::digest(bytes));
        let path = self.path_for(&digest);
        if !path.exists() {
            fs::create_dir_all(path.parent().unwrap())?;
            fs::write(&path, bytes)?;
        }
        Ok(digest)
    }

    pub fn has(&self, digest: &str) -> bool {
        self.path_for(digest).exists()
    }

    pub fn get(&self, digest: &str) -> Result<Vec<u8>> {
        fs::read(self.path_for(digest)).map_err(|e| Error::Data(format!("blob {digest}: {e}")))
    }
}

/// Provider that loads store blobs by digest.
pub struct StoreImageProvider {
    store: ImageStoreDir,
    size: usize,
    normalization: Normalization,
    /// Optional indirection from entry ids to content digests.
    index: HashMap<String, String>,
}

impl StoreImageProvider {
    pub fn new(store: ImageStoreDir, size: usize, normalization: Normalization) -> Self {
        StoreImageProvider {
            store,
            size,
            normalization,
            index: HashMap::new(),
        }
    }

    pub fn with_index(mut self, index: HashMap<String, String>) -> Self {
        self.index = index;
        self
    }
}

impl ImageProvider for StoreImageProvider {
    fn load(&self, image_ref: &str) -> Result<Array3<f64>> {
        let digest = self
            .index
            .get(image_ref)
            .map(|s| s.as_str())
            .unwrap_or(image_ref);
        let bytes = self.store.get(digest)?;
        decode_image(&bytes, self.size, &self.normalization)
    }
}

/// Provider that reads image files relative to a root directory.
pub struct DirImageProvider {
    root: PathBuf,
    size: usize,
    normalization: Normalization,
}

impl DirImageProvider {
    pub fn new(root: impl Into<PathBuf>, size: usize, normalization: Normalization) -> Self {
        DirImageProvider {
            root: root.into(),
            size,
            normalization,
        }
    }
}

impl ImageProvider for DirImageProvider {
    fn load(&self, image_ref: &str) -> Result<Array3<f64>> {
        let path = self.root.join(image_ref);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        decode_image(&bytes, self.size, &self.normalization)
    }
}

/// In-memory provider for synthetic desk-scale runs.
#[derive(Default)]
pub struct MemoryImageProvider {
    images: HashMap<String, Array3<f64>>,
}

impl MemoryImageProvider {
    pub fn new() -> Self {
        MemoryImageProvider::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, image: Array3<f64>) {
        self.images.insert(key.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageProvider for MemoryImageProvider {
    fn load(&self, image_ref: &str) -> Result<Array3<f64>> {
        self.images
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("unknown image ref {image_ref}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb(rgb));
        let mut out = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .unwrap();
        out
    }

    #[test]
    fn decode_resizes_and_normalizes() {
        let bytes = png_bytes(20, 30, [255, 0, 128]);
        let norm = Normalization {
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.5, 0.5, 0.5],
        };
        let img = decode_image(&bytes, 16, &norm).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert!((img[[0, 8, 8]] - 1.0).abs() < 1e-9);
        assert!((img[[1, 8, 8]] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn undecodable_bytes_are_data_errors() {
        let norm = Normalization::unit();
        match decode_image(b"not an image", 16, &norm) {
            Err(Error::Data(msg)) => assert!(msg.contains("undecodable")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn store_put_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStoreDir::open(dir.path()).unwrap();
        let digest = store.put(b"hello").unwrap();
        assert!(store.has(&digest));
        assert_eq!(store.get(&digest).unwrap(), b"hello");
        // second put of same content is a no-op
        assert_eq!(store.put(b"hello").unwrap(), digest);
    }
}
