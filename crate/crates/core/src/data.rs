//! PNG loading, train/test augmentation, dataset scanning and batching.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use image::{DynamicImage, ImageFormat, RgbImage};
use longscape_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::mix_seed;

/// Queue depth between the decoding thread and the trainer.
pub const PREFETCH: usize = 2;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decodes an 8-bit grey, grey+alpha, RGB or RGBA PNG into `3 x H x W`
/// values in `[-1, 1]`. Alpha is dropped and grey is replicated.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_png(&bytes).map_err(|msg| image_err(path, msg))
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        other => {
            return Err(format!(
                "unsupported bit depth: only 8-bit PNGs are accepted, got {:?}",
                other.color()
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = to_unit(px[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(|e| e.to_string())
}

/// Writes a `3 x H x W` tensor in `[-1, 1]` as an 8-bit RGB PNG.
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let rgb = to_rgb(img)?;
    rgb.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))
}

pub fn to_rgb(img: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = chw(img)?;
    if c != 3 {
        return Err(Error::Config(format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_byte(d[(ch * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    }))
}

fn chw(img: &Tensor<f32>) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(img.shape())
        .map_err(|_| Error::Config(format!("expected a C x H x W image, got {:?}", img.shape())))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = chw(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let at = |r: usize, k: usize| plane[r * w + k] as f64;
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, out_h, out_w], out)?)
}

fn crop(img: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [c, ih, iw] = chw(img)?;
    if top + h > ih || left + w > iw {
        return Err(Error::Config(format!("crop {h}x{w}+{top}+{left} exceeds {ih}x{iw}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in top..top + h {
            let start = (ch * ih + r) * iw + left;
            out.extend_from_slice(&d[start..start + w]);
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], out)?)
}

fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(longscape_tensor::kernels::flip(img, 2)?)
}

/// Random decisions of one training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainAug {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
}

/// Size an image is resized to before cropping an `n x 2n` training sample
/// (144 x 432 for `n = 128`).
pub fn train_resize_hw(n: usize) -> (usize, usize) {
    (n * 9 / 8, n * 27 / 8)
}

pub fn train_aug_params(seed: u64, n: usize) -> TrainAug {
    let (rh, rw) = train_resize_hw(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(0.5);
    let top = rng.random_range(0..=rh - n);
    let left = rng.random_range(0..=rw - 2 * n);
    TrainAug { flip, top, left }
}

/// Resize, optional horizontal flip, random `n x 2n` crop.
pub fn augment_train(img: &Tensor<f32>, seed: u64, n: usize) -> Result<Tensor<f32>> {
    if n == 0 || n % 8 != 0 {
        return Err(Error::Config(format!("sample height {n} must be a positive multiple of 8")));
    }
    let (rh, rw) = train_resize_hw(n);
    let aug = train_aug_params(seed, n);
    let mut resized = resize(img, rh, rw)?;
    if aug.flip {
        resized = hflip(&resized)?;
    }
    crop(&resized, aug.top, aug.left, n, 2 * n)
}

pub fn augment_test(img: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    resize(img, n, 2 * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Sorted list of the PNG files in `<root>/<split>/`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub files: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn scan(root: &Path, split: Split) -> Result<Self> {
        let dir = root.join(split.dir());
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry?.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png && path.is_file() {
                files.push(path);
            }
        }
        Self::from_files(root, split, files)
    }

    pub fn from_files(root: &Path, split: Split, mut files: Vec<PathBuf>) -> Result<Self> {
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG images under {}",
                root.join(split.dir()).display()
            )));
        }
        files.sort();
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            split,
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        self.files.len() / batch.max(1)
    }
}

/// A batch of `B x 3 x n x 2n` samples and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor<f32>,
    pub paths: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

impl ImageBatch {
    /// Stacks `3 x H x W` samples.
    pub fn stack(samples: &[Tensor<f32>], paths: Vec<PathBuf>, seeds: Vec<u64>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let [c, h, w] = chw(first)?;
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::Config(format!("batch samples {:?} and {:?} differ", first.shape(), s.shape())));
            }
            data.extend_from_slice(s.data());
        }
        Ok(ImageBatch {
            pixels: Tensor::from_vec(&[samples.len(), c, h, w], data)?,
            paths,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    /// Random resize-flip-crop to `n x 2n`.
    Train(usize),
    /// Plain resize to `n x 2n`.
    Test(usize),
}

/// Epoch permutation of `0..n`.
pub fn epoch_order(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
}

/// Augmentation seed of the sample at `position` in an epoch.
pub fn sample_seed(epoch_seed: u64, position: usize) -> u64 {
    mix_seed(epoch_seed, position as u64)
}

fn load_sample(path: &Path, aug: Augment, seed: u64) -> Result<Tensor<f32>> {
    let img = load_image(path)?;
    match aug {
        Augment::Train(n) => augment_train(&img, seed, n),
        Augment::Test(n) => augment_test(&img, n),
    }
}

/// Builds batch `k` of an epoch directly, without a background thread.
pub fn epoch_batch(index: &DatasetIndex, batch: usize, epoch_seed: u64, aug: Augment, k: usize) -> Result<ImageBatch> {
    let order = epoch_order(index.len(), epoch_seed);
    make_batch(&index.files, &order, batch, epoch_seed, aug, k)
}

fn make_batch(
    files: &[PathBuf],
    order: &[usize],
    batch: usize,
    epoch_seed: u64,
    aug: Augment,
    k: usize,
) -> Result<ImageBatch> {
    let positions = k * batch..(k + 1) * batch;
    let mut samples = Vec::with_capacity(batch);
    let mut paths = Vec::with_capacity(batch);
    let mut seeds = Vec::with_capacity(batch);
    for pos in positions {
        let path = &files[order[pos]];
        let seed = sample_seed(epoch_seed, pos);
        samples.push(load_sample(path, aug, seed)?);
        paths.push(path.clone());
        seeds.push(seed);
    }
    ImageBatch::stack(&samples, paths, seeds)
}

/// One epoch of shuffled full batches, decoded ahead on a background thread
/// through a bounded queue. The short final batch is dropped.
pub struct BatchStream {
    rx: Receiver<Result<ImageBatch>>,
    worker: Option<JoinHandle<()>>,
}

impl BatchStream {
    /// Starts at batch `start` of the epoch, so a resumed run skips the
    /// batches it already consumed without decoding them.
    pub fn new(index: &DatasetIndex, batch: usize, epoch_seed: u64, aug: Augment, start: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if index.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let files = index.files.clone();
        let order = epoch_order(files.len(), epoch_seed);
        let count = files.len() / batch;
        let (tx, rx) = sync_channel(PREFETCH);
        let worker = std::thread::spawn(move || {
            for k in start..count {
                let b = make_batch(&files, &order, batch, epoch_seed, aug, k);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        Ok(BatchStream {
            rx,
            worker: Some(worker),
        })
    }
}

impl Iterator for BatchStream {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Disconnecting the receiver wakes a producer blocked on a full queue.
        let (_, closed) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, closed));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Convenience wrapper over [`BatchStream::new`] starting at the first batch.
pub fn batch_stream(index: &DatasetIndex, batch: usize, epoch_seed: u64, aug: Augment) -> Result<BatchStream> {
    BatchStream::new(index, batch, epoch_seed, aug, 0)
}
