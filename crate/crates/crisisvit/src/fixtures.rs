//! Synthetic desk-scale fixtures: class-coded images, toy manifests, and
//! toy benchmark trees. The full-corpus experiments need hundreds of GPU
//! hours, so tests and example experiments run on these instead; the class
//! signal is a color/gradient pattern a small model can learn quickly.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::benchmark::{BenchmarkRecord, Split, TaskId};
use crate::data::manifest::DatasetManifestEntry;
use crate::data::vocab::LabelVocabulary;
use crate::error::Result;
use crate::images::MemoryImageProvider;

/// A deterministic image whose dominant color encodes `class_index`;
/// `noise_seed` perturbs it slightly so examples are not identical.
pub fn class_image(
    class_index: usize,
    num_classes: usize,
    size: usize,
    noise_seed: u64,
) -> Array3<f64> {
    let hue = class_index as f64 / num_classes.max(1) as f64;
    let base = [
        (2.0 * std::f64::consts::PI * hue).sin() * 0.5 + 0.5,
        (2.0 * std::f64::consts::PI * (hue + 1.0 / 3.0)).sin() * 0.5 + 0.5,
        (2.0 * std::f64::consts::PI * (hue + 2.0 / 3.0)).sin() * 0.5 + 0.5,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ (class_index as u64) << 32);
    let mut img = Array3::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let gradient = 0.15 * (x as f64 / size as f64 - 0.5) * (c as f64 + 1.0);
                let noise: f64 = rng.random_range(-0.05..0.05);
                img[[c, y, x]] = (base[c] + gradient + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// An image whose class signal is positional: a bright 2x2 block at the
/// grid cell `cell % (size/2)^2` over a dim noise background. Distinct
/// cells occupy disjoint pixel subspaces, so each class is a separate
/// lesson for a model to learn (or forget).
pub fn positional_image(cell: usize, size: usize, noise_seed: u64) -> Array3<f64> {
    let grid = size / 2;
    let cell = cell % (grid * grid);
    let (cy, cx) = (cell / grid, cell % grid);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x5bd1_e995);
    let mut img = Array3::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                img[[c, y, x]] = rng.random_range(0.0..0.2);
            }
        }
    }
    for c in 0..3 {
        for dy in 0..2 {
            for dx in 0..2 {
                img[[c, cy * 2 + dy, cx * 2 + dx]] = 0.95;
            }
        }
    }
    img
}

/// Like [`labeled_corpus`] but with positional class coding: the class at
/// joint index `j` lights cell `j`.
pub fn positional_corpus(
    vocabulary: &LabelVocabulary,
    n: usize,
    image_size: usize,
    seed: u64,
) -> (Vec<DatasetManifestEntry>, MemoryImageProvider) {
    let incident = LabelVocabulary::incident();
    let joint = LabelVocabulary::joint();
    let mut entries = Vec::with_capacity(n);
    let mut provider = MemoryImageProvider::new();
    for i in 0..n {
        let class_index = i % vocabulary.len();
        let class = vocabulary.classes()[class_index].clone();
        let cell = joint.index_of(&class).unwrap_or(class_index);
        let id = format!("p{i:04}");
        let mut entry = DatasetManifestEntry::pending(&id, format!("http://fixture/{id}"));
        if incident.contains(&class) {
            entry.incident_labels = vec![class];
        } else {
            entry.place_labels = vec![class];
        }
        provider.insert(
            id,
            positional_image(cell, image_size, seed.wrapping_add(i as u64)),
        );
        entries.push(entry);
    }
    (entries, provider)
}

/// A single positionally-coded downstream task: class `j` lights `cells[j]`.
pub fn positional_task_records(
    task: TaskId,
    cells: &[usize],
    per_split: usize,
    image_size: usize,
    seed: u64,
) -> (
    std::collections::BTreeMap<Split, Vec<BenchmarkRecord>>,
    MemoryImageProvider,
) {
    let classes = task.class_names();
    assert_eq!(cells.len(), classes.len());
    let mut provider = MemoryImageProvider::new();
    let mut splits = std::collections::BTreeMap::new();
    for (si, split) in [Split::Train, Split::Validation, Split::Test]
        .into_iter()
        .enumerate()
    {
        let mut records = Vec::with_capacity(per_split);
        for i in 0..per_split {
            let class_index = i % classes.len();
            let key = format!("{}-{}-{i}", task.as_str(), split.as_str());
            provider.insert(
                key.clone(),
                positional_image(
                    cells[class_index],
                    image_size,
                    seed.wrapping_add((si * per_split + i) as u64),
                ),
            );
            records.push(BenchmarkRecord {
                id: key.clone(),
                image: key,
                label: classes[class_index].to_string(),
            });
        }
        splits.insert(split, records);
    }
    (splits, provider)
}

/// A labeled corpus over a vocabulary: `n` manifest entries whose first
/// listed label cycles through the classes, plus a provider serving the
/// matching class-coded images keyed by entry id.
pub fn labeled_corpus(
    vocabulary: &LabelVocabulary,
    n: usize,
    image_size: usize,
    seed: u64,
) -> (Vec<DatasetManifestEntry>, MemoryImageProvider) {
    let incident = LabelVocabulary::incident();
    let mut entries = Vec::with_capacity(n);
    let mut provider = MemoryImageProvider::new();
    for i in 0..n {
        let class_index = i % vocabulary.len();
        let class = vocabulary.classes()[class_index].clone();
        let id = format!("e{i:04}");
        let mut entry = DatasetManifestEntry::pending(&id, format!("http://fixture/{id}"));
        if incident.contains(&class) {
            entry.incident_labels = vec![class];
        } else {
            entry.place_labels = vec![class];
        }
        provider.insert(
            id,
            class_image(
                class_index,
                vocabulary.len(),
                image_size,
                seed.wrapping_add(i as u64),
            ),
        );
        entries.push(entry);
    }
    (entries, provider)
}

/// Synthetic benchmark: for each task, `per_split` examples per split with
/// class-coded images, keyed into a shared provider.
pub fn toy_benchmark(
    per_split: usize,
    image_size: usize,
    seed: u64,
) -> (
    std::collections::BTreeMap<TaskId, std::collections::BTreeMap<Split, Vec<BenchmarkRecord>>>,
    MemoryImageProvider,
) {
    let mut provider = MemoryImageProvider::new();
    let mut tasks = std::collections::BTreeMap::new();
    for task in TaskId::ALL {
        let classes = task.class_names();
        let mut splits = std::collections::BTreeMap::new();
        for (si, split) in [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .enumerate()
        {
            let mut records = Vec::with_capacity(per_split);
            for i in 0..per_split {
                let class_index = i % classes.len();
                let key = format!("{}-{}-{i}", task.as_str(), split.as_str());
                provider.insert(
                    key.clone(),
                    class_image(
                        class_index,
                        classes.len(),
                        image_size,
                        seed.wrapping_add((si * per_split + i) as u64),
                    ),
                );
                records.push(BenchmarkRecord {
                    id: key.clone(),
                    image: key,
                    label: classes[class_index].to_string(),
                });
            }
            splits.insert(split, records);
        }
        tasks.insert(task, splits);
    }
    (tasks, provider)
}

/// Write a toy benchmark tree (`root/<task>/<split>.jsonl` plus PNG files)
/// readable through [`crate::images::DirImageProvider`].
pub fn write_benchmark_dir(
    root: &Path,
    per_split: usize,
    image_size: usize,
    seed: u64,
) -> Result<()> {
    for task in TaskId::ALL {
        let classes = task.class_names();
        let task_dir = root.join(task.as_str());
        std::fs::create_dir_all(&task_dir)?;
        for (si, split) in ["train", "validation", "test"].into_iter().enumerate() {
            let mut lines = String::new();
            for i in 0..per_split {
                let class_index = i % classes.len();
                let id = format!("{}-{split}-{i}", task.as_str());
                let rel = format!("images/{id}.png");
                let img = class_image(
                    class_index,
                    classes.len(),
                    image_size,
                    seed.wrapping_add((si * per_split + i) as u64),
                );
                write_png(&root.join(&rel), &img)?;
                let record = BenchmarkRecord {
                    id,
                    image: rel,
                    label: classes[class_index].to_string(),
                };
                lines.push_str(&serde_json::to_string(&record)?);
                lines.push('\n');
            }
            std::fs::write(task_dir.join(format!("{split}.jsonl")), lines)?;
        }
    }
    Ok(())
}

/// Encode a `[0, 1]`-valued `(3, s, s)` tensor as a PNG file.
pub fn write_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)
        .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// PNG bytes for a class-coded image (for crawl fixtures).
pub fn class_image_png_bytes(
    class_index: usize,
    num_classes: usize,
    size: usize,
    seed: u64,
) -> Vec<u8> {
    let img = class_image(class_index, num_classes, size, seed);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(rgb)
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .expect("png encode");
    bytes
}
