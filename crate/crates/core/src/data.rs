//! Datasets: IDX ingestion/export, the synthetic cluttered-glyph generator,
//! stratified subsampling, minibatching and crop/flip augmentation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional (N, C, H, W) unsigned-byte IDX, used for colour images.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic, expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, needed {needed} bytes but file has {found}")]
    Truncated { path: PathBuf, needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("requested {requested} samples but dataset has {available}")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("crop {crop} larger than image {height}x{width}")]
    CropTooLarge { crop: usize, height: usize, width: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (N, C, H, W), values in [0, 1]
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!("label {bad} outside [0, {class_count})")));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape (C, H, W).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let b = self.batch(idx);
        Dataset {
            images: b.images,
            labels: b.labels,
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image file (3-D `0x803` grayscale or 4-D `0x804` N×C×H×W)
/// and its label file. Bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    let dims: Vec<usize> = match magic {
        IDX_IMAGES_MAGIC => {
            let mut d = vec![be_u32(&img, 4, images_path)? as usize, 1];
            d.push(be_u32(&img, 8, images_path)? as usize);
            d.push(be_u32(&img, 12, images_path)? as usize);
            d
        }
        IDX_IMAGES4_MAGIC => (0..4)
            .map(|i| be_u32(&img, 4 + 4 * i, images_path).map(|v| v as usize))
            .collect::<Result<_, _>>()?,
        found => {
            return Err(DataError::BadMagic {
                path: images_path.to_path_buf(),
                expected: IDX_IMAGES_MAGIC,
                found,
            })
        }
    };
    let header = if magic == IDX_IMAGES_MAGIC { 16 } else { 20 };
    let count: usize = dims.iter().product();
    if img.len() < header + count {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            needed: header + count,
            found: img.len(),
        });
    }

    let lab = read_file(labels_path)?;
    let found = be_u32(&lab, 0, labels_path)?;
    if found != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found,
        });
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + n_labels {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8 + n_labels,
            found: lab.len(),
        });
    }
    if n_labels != dims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: n_labels,
        });
    }
    let labels: Vec<usize> = lab[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let pixels = img[header..header + count].iter().map(|&b| b as f64 / 255.0).collect();
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(dims, pixels).map_err(|e| DataError::Invalid(e.to_string()))?,
        labels,
        class_count,
    )
}

/// Writes `d` in the IDX layout read by [`load_idx`]. Pixels are rounded to
/// the nearest multiple of 1/255.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let shape = d.images.shape();
    let mut img = Vec::with_capacity(20 + d.images.len());
    if shape[1] == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for &s in [shape[0], shape[2], shape[3]].iter() {
            img.extend_from_slice(&(s as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&IDX_IMAGES4_MAGIC.to_be_bytes());
        for &s in shape {
            img.extend_from_slice(&(s as u32).to_be_bytes());
        }
    }
    img.extend(
        d.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );

    let mut lab = Vec::with_capacity(8 + d.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(d.len() as u32).to_be_bytes());
    for &l in &d.labels {
        let b = u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit a byte")))?;
        lab.push(b);
    }
    for (path, bytes) in [(images_path, &img), (labels_path, &lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    None,
    Color,
    Texture,
}

/// Side length of generated images.
pub const SYNTH_SIZE: usize = 16;
pub const SYNTH_CLASSES: usize = 10;

/// Seven-segment encoding of the ten glyph classes
/// (segments a b c d e f g, top then clockwise, middle last).
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Binary glyph mask (size × size) for `class` with the box's top-left at
/// (`top`, `left`), glyph width `w`, height `h` and stroke thickness `t`.
fn glyph_mask(class: usize, size: usize, top: usize, left: usize, w: usize, h: usize, t: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    let mid = top + (h - t) / 2;
    let mut fill = |r0: usize, r1: usize, c0: usize, c1: usize| {
        for r in r0..r1.min(size) {
            for c in c0..c1.min(size) {
                m[r * size + c] = true;
            }
        }
    };
    let seg = SEGMENTS[class];
    let (right, bottom) = (left + w - t, top + h - t);
    if seg[0] {
        fill(top, top + t, left, left + w);
    }
    if seg[1] {
        fill(top, mid + t, right, right + t);
    }
    if seg[2] {
        fill(mid, top + h, right, right + t);
    }
    if seg[3] {
        fill(bottom, bottom + t, left, left + w);
    }
    if seg[4] {
        fill(mid, top + h, left, left + t);
    }
    if seg[5] {
        fill(top, mid + t, left, left + t);
    }
    if seg[6] {
        fill(mid, mid + t, left, left + w);
    }
    m
}

/// Bilinearly upsampled random grid: smooth value noise in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let fy = r as f64 / (size - 1) as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for c in 0..size {
            let fx = c as f64 / (size - 1) as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let v00 = grid[y0 * g + x0];
            let v01 = grid[y0 * g + x0 + 1];
            let v10 = grid[(y0 + 1) * g + x0];
            let v11 = grid[(y0 + 1) * g + x0 + 1];
            out.push((v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty);
        }
    }
    out
}

fn shift_half(v: f64) -> f64 {
    if v < 0.5 {
        v + 0.5
    } else {
        v - 0.5
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ten seven-segment glyph classes on 3×16×16 images, with labels assigned
/// round-robin. The glyph's position and size vary per sample; strokes are
/// one pixel wide. The background is black (`None`), one random colour
/// (`Color`) or a random two-scale coloured value-noise field (`Texture`);
/// glyph pixels shift each background channel by half the intensity range,
/// wrapping around, so a glyph has the same contrast on any background.
/// Nuisance draws are independent of the label. Pixels are exact multiples of 1/255.
pub fn synth_cluttered(n: usize, seed: u64, nuisance: Nuisance) -> Result<Dataset, DataError> {
    if n < SYNTH_CLASSES {
        return Err(DataError::Invalid(format!(
            "need at least {SYNTH_CLASSES} samples, got {n}"
        )));
    }
    let size = SYNTH_SIZE;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTH_CLASSES;
        labels.push(class);
        let w = rng.gen_range(6..=8);
        let h = rng.gen_range(10..=12);
        let t = 1;
        let top = rng.gen_range(1..=size - h - 1);
        let left = rng.gen_range(1..=size - w - 1);
        let mask = glyph_mask(class, size, top, left, w, h, t);

        let background: Vec<Vec<f64>> = match nuisance {
            Nuisance::None => vec![vec![0.0; plane]; 3],
            Nuisance::Color => (0..3).map(|_| vec![rng.gen::<f64>(); plane]).collect(),
            Nuisance::Texture => {
                let coarse_cells = rng.gen_range(2..=4);
                (0..3)
                    .map(|_| {
                        let coarse = value_noise(&mut rng, size, coarse_cells);
                        let fine = value_noise(&mut rng, size, 8);
                        coarse.iter().zip(&fine).map(|(a, b)| 0.7 * a + 0.3 * b).collect()
                    })
                    .collect()
            }
        };
        for bg in &background {
            for (p, &on) in bg.iter().zip(&mask) {
                pixels.push(quantize(if on { shift_half(*p) } else { *p }));
            }
        }
    }
    let images = Tensor::new(vec![n, 3, size, size], pixels).expect("synthetic shape");
    Dataset::new(images, labels, SYNTH_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n_train: usize,
    pub seed: u64,
    pub stratified: bool,
}

/// Indices chosen by [`subsample`], sorted ascending. For a fixed seed the
/// selections are nested: a smaller `n_train` picks a subset of a larger one.
pub fn subsample_indices(labels: &[usize], class_count: usize, spec: &SamplingSpec) -> Result<Vec<usize>, DataError> {
    if spec.n_train > labels.len() {
        return Err(DataError::NotEnoughSamples {
            requested: spec.n_train,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = if spec.stratified {
        // Round-robin over a seeded class order, drawing from per-class
        // shuffled queues: every prefix is balanced within ±1.
        let mut queues: Vec<Vec<usize>> = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            queues[l].push(i);
        }
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        let mut order: Vec<usize> = (0..class_count).collect();
        order.shuffle(&mut rng);
        let mut cursor = vec![0usize; class_count];
        let mut picked = Vec::with_capacity(spec.n_train);
        while picked.len() < spec.n_train {
            for &c in &order {
                if picked.len() == spec.n_train {
                    break;
                }
                if let Some(&i) = queues[c].get(cursor[c]) {
                    picked.push(i);
                    cursor[c] += 1;
                }
            }
        }
        picked
    } else {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(spec.n_train);
        all
    };
    picked.sort_unstable();
    Ok(picked)
}

pub fn subsample(d: &Dataset, spec: &SamplingSpec) -> Result<Dataset, DataError> {
    Ok(d.select(&subsample_indices(&d.labels, d.class_count, spec)?))
}

/// Seeded shuffle of `0..n` cut into batches; the last batch may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_to: usize,
    pub hflip: bool,
}

fn crop(images: &Tensor, crop_to: usize, offsets: &[(usize, usize)]) -> Tensor {
    let s = images.shape();
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(k * c * crop_to * crop_to);
    for (i, &(dy, dx)) in offsets.iter().enumerate() {
        let img = images.row(i);
        for ch in 0..c {
            for r in 0..crop_to {
                let start = ch * h * w + (r + dy) * w + dx;
                out.extend_from_slice(&img[start..start + crop_to]);
            }
        }
    }
    Tensor::new(vec![k, c, crop_to, crop_to], out).expect("crop shape")
}

/// Mirrors each image whose `mask` entry is set.
pub fn hflip(images: &Tensor, mask: &[bool]) -> Tensor {
    let s = images.shape();
    let w = s[3];
    let mut out = images.clone();
    let row = images.row_len();
    for (i, &flip) in mask.iter().enumerate() {
        if !flip {
            continue;
        }
        for line in out.data_mut()[i * row..(i + 1) * row].chunks_mut(w) {
            line.reverse();
        }
    }
    out
}

fn check_crop(images: &Tensor, crop_to: usize) -> Result<(usize, usize), DataError> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    if crop_to > h || crop_to > w || crop_to == 0 {
        return Err(DataError::CropTooLarge {
            crop: crop_to,
            height: h,
            width: w,
        });
    }
    Ok((h, w))
}

/// Training augmentation: random crop and 0.5-probability horizontal flip.
pub fn augment(batch: &Batch, config: &AugmentConfig, seed: u64) -> Result<Batch, DataError> {
    let (h, w) = check_crop(&batch.images, config.crop_to)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = batch.len();
    let offsets: Vec<(usize, usize)> = (0..k)
        .map(|_| {
            (
                rng.gen_range(0..=h - config.crop_to),
                rng.gen_range(0..=w - config.crop_to),
            )
        })
        .collect();
    let mut images = crop(&batch.images, config.crop_to, &offsets);
    if config.hflip {
        let mask: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        images = hflip(&images, &mask);
    }
    Ok(Batch {
        images,
        labels: batch.labels.clone(),
    })
}

/// Evaluation counterpart of [`augment`]: deterministic centre crop.
pub fn center_crop(batch: &Batch, crop_to: usize) -> Result<Batch, DataError> {
    let (h, w) = check_crop(&batch.images, crop_to)?;
    let offsets = vec![((h - crop_to) / 2, (w - crop_to) / 2); batch.len()];
    Ok(Batch {
        images: crop(&batch.images, crop_to, &offsets),
        labels: batch.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(vec![10, 1, 2, 2], (0..40).map(|v| v as f64 / 255.0).collect()).unwrap();
        Dataset::new(images, (0..10).map(|i| i % 5).collect(), 5).unwrap()
    }

    #[test]
    fn minibatch_sizes_and_partition() {
        let b = minibatches(10, 3, 7);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b, minibatches(10, 3, 7));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_full_is_identity() {
        let d = tiny();
        let spec = SamplingSpec {
            n_train: 10,
            seed: 3,
            stratified: true,
        };
        assert_eq!(subsample(&d, &spec).unwrap(), d);
        let too_many = SamplingSpec { n_train: 11, ..spec };
        assert!(matches!(
            subsample(&d, &too_many),
            Err(DataError::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn stratified_counts_exact() {
        let d = synth_cluttered(200, 1, Nuisance::None).unwrap();
        let s = subsample(
            &d,
            &SamplingSpec {
                n_train: 20,
                seed: 9,
                stratified: true,
            },
        )
        .unwrap();
        assert_eq!(s.class_counts(), vec![2; 10]);
        let s = subsample(
            &d,
            &SamplingSpec {
                n_train: 27,
                seed: 9,
                stratified: true,
            },
        )
        .unwrap();
        let c = s.class_counts();
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }

    #[test]
    fn nested_subsamples() {
        let d = synth_cluttered(2000, 4, Nuisance::None).unwrap();
        for stratified in [true, false] {
            let sets: Vec<Vec<usize>> = [100, 250, 1000]
                .iter()
                .map(|&n| {
                    subsample_indices(
                        &d.labels,
                        10,
                        &SamplingSpec {
                            n_train: n,
                            seed: 5,
                            stratified,
                        },
                    )
                    .unwrap()
                })
                .collect();
            for w in sets.windows(2) {
                let big: std::collections::HashSet<_> = w[1].iter().collect();
                assert!(w[0].iter().all(|i| big.contains(i)));
            }
        }
    }

    #[test]
    fn synth_deterministic_and_balanced() {
        for nuisance in [Nuisance::None, Nuisance::Color, Nuisance::Texture] {
            let a = synth_cluttered(53, 11, nuisance).unwrap();
            let b = synth_cluttered(53, 11, nuisance).unwrap();
            assert_eq!(a, b);
            assert!(a
                .images
                .data()
                .iter()
                .zip(b.images.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            let c = a.class_counts();
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(synth_cluttered(9, 0, Nuisance::None).is_err());
    }

    #[test]
    fn glyphs_differ_between_classes() {
        let masks: Vec<Vec<bool>> = (0..10).map(|c| glyph_mask(c, 16, 2, 4, 7, 11, 1)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(masks[i], masks[j], "classes {i} and {j}");
            }
        }
    }

    #[test]
    fn crops_and_flips() {
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let batch = Batch {
            images: img.clone(),
            labels: vec![0],
        };
        let same = augment(
            &batch,
            &AugmentConfig {
                crop_to: 4,
                hflip: false,
            },
            1,
        )
        .unwrap();
        assert_eq!(same, batch);
        let c = center_crop(&batch, 2).unwrap();
        assert_eq!(c.images.data(), &[5.0 / 16.0, 6.0 / 16.0, 9.0 / 16.0, 10.0 / 16.0]);
        let twice = hflip(&hflip(&img, &[true]), &[true]);
        assert_eq!(twice, img);
        assert_eq!(hflip(&img, &[true]).data()[0], 3.0 / 16.0);
        assert!(matches!(center_crop(&batch, 5), Err(DataError::CropTooLarge { .. })));
    }
}
