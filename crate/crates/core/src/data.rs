//! Image datasets: IDX (MNIST family), CIFAR-10 binary batches and
//! folder-per-class image trees, plus affine augmentation and epoch order.
//!
//! Pixels are stored row-major as `[H·W, C]` floats in `[0, 1]`, which is
//! exactly the target layout the SIREN fits.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated at byte {offset}, need {needed} bytes")]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of {record}")]
    BadLength { path: PathBuf, len: usize, record: usize },
    #[error("{path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{0}: no images found")]
    Empty(PathBuf),
    #[error("image {id} is {got:?}, dataset is {expected:?}")]
    InconsistentSize { id: String, expected: (usize, usize, usize), got: (usize, usize, usize) },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One image with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[H·W, C]`, row-major, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: usize,
    pub id: String,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>, label: usize, id: String) -> Self {
        let pixels = Tensor::new(vec![height * width, channels], data).expect("pixel count matches extents");
        Self { pixels, height, width, channels, label, id }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels.data()[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(H, W, C)` shared by every sample, if any.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(ImageSample::dims)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect(), class_names: self.class_names.clone() }
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset { samples: self.samples.iter().take(n).cloned().collect(), class_names: self.class_names.clone() }
    }

    fn check_uniform(&self) -> Result<(), DataError> {
        if let Some(expected) = self.dims() {
            for s in &self.samples {
                if s.dims() != expected {
                    return Err(DataError::InconsistentSize { id: s.id.clone(), expected, got: s.dims() });
                }
            }
        }
        Ok(())
    }
}

fn numbered_classes(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or(DataError::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed: offset + 4,
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// IDX image file: magic, count, rows, cols, then `u8` pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated { path: path.to_path_buf(), offset: bytes.len(), needed });
    }
    Ok((count, rows, cols, bytes[16..needed].to_vec()))
}

/// IDX label file: magic, count, then `u8` labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated { path: path.to_path_buf(), offset: bytes.len(), needed });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Grayscale IDX pair; pixel bytes are divided by 255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let ib = fs::read(images).map_err(io_err(images))?;
    let lb = fs::read(labels).map_err(io_err(labels))?;
    idx_dataset(&ib, images, &lb, labels)
}

pub fn idx_dataset(image_bytes: &[u8], images: &Path, label_bytes: &[u8], labels: &Path) -> Result<Dataset, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes, images)?;
    let labs = parse_idx_labels(label_bytes, labels)?;
    if labs.len() != count {
        return Err(DataError::CountMismatch { images: count, labels: labs.len() });
    }
    let per = rows * cols;
    let samples = labs
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let data = pixels[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0).collect();
            ImageSample::new(rows, cols, 1, data, l as usize, format!("idx:{i}"))
        })
        .collect();
    let n_classes = labs.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    Ok(Dataset { samples, class_names: numbered_classes(n_classes) })
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary records: label byte, then R, G and B planes of 32×32.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, id_prefix: &str) -> Result<Vec<ImageSample>, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::BadLength { path: path.to_path_buf(), len: bytes.len(), record: CIFAR_RECORD });
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let planes = &rec[1..];
            let mut data = Vec::with_capacity(3072);
            for p in 0..1024 {
                for c in 0..3 {
                    data.push(planes[c * 1024 + p] as f32 / 255.0);
                }
            }
            ImageSample::new(32, 32, 3, data, rec[0] as usize, format!("{id_prefix}:{i}"))
        })
        .collect())
}

pub struct CifarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// `data_batch_{1..5}.bin` and `test_batch.bin` under `dir`; class names
/// from `batches.meta.txt` when present.
pub fn load_cifar_bin(dir: &Path) -> Result<CifarSplits, DataError> {
    let read = |name: &str| -> Result<Vec<ImageSample>, DataError> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        parse_cifar_records(&bytes, &path, name.trim_end_matches(".bin"))
    };
    let mut train = Vec::new();
    for b in 1..=5 {
        train.extend(read(&format!("data_batch_{b}.bin"))?);
    }
    let test = read("test_batch.bin")?;
    let class_names = fs::read_to_string(dir.join("batches.meta.txt"))
        .map(|s| s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>())
        .ok()
        .filter(|v| v.len() == 10)
        .unwrap_or_else(|| numbered_classes(10));
    Ok(CifarSplits { train: Dataset { samples: train, class_names: class_names.clone() }, test: Dataset { samples: test, class_names } })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImageDirOptions {
    /// Center-crop to a square and resize to this side length.
    pub resize: Option<usize>,
    /// Fail on undecodable files instead of skipping them.
    pub strict: bool,
}

/// A loaded folder tree and the files that were skipped.
pub struct ImageDirLoad {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out =
        fs::read_dir(dir).map_err(io_err(dir))?.map(|e| e.map(|e| e.path())).collect::<Result<Vec<_>, _>>().map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

/// `root/<class>/<image>`; labels follow sorted class-folder order.
pub fn load_image_dir(root: &Path, opts: ImageDirOptions) -> Result<ImageDirLoad, DataError> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        for path in sorted_entries(class_dir)?.into_iter().filter(|p| is_image(p)) {
            let img = match image::open(&path) {
                Ok(img) => img,
                Err(e) => {
                    if opts.strict {
                        return Err(DataError::Decode { path, detail: e.to_string() });
                    }
                    let msg = format!("skipping {}: {e}", path.display());
                    log::warn!("{msg}");
                    warnings.push(msg);
                    continue;
                }
            };
            let mut rgb = img.to_rgb8();
            if let Some(side) = opts.resize {
                let (w, h) = rgb.dimensions();
                let m = w.min(h);
                let cropped = image::imageops::crop_imm(&rgb, (w - m) / 2, (h - m) / 2, m, m).to_image();
                rgb = image::imageops::resize(&cropped, side as u32, side as u32, FilterType::Triangle);
            }
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
            let id = path.strip_prefix(root).unwrap_or(&path).display().to_string();
            samples.push(ImageSample::new(h as usize, w as usize, 3, data, label, id));
        }
    }
    if samples.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    let class_names = classes.iter().map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    let dataset = Dataset { samples, class_names };
    dataset.check_uniform()?;
    Ok(ImageDirLoad { dataset, warnings })
}

/// Decodes one image file to `[H·W, 3]` in `[0, 1]`, optionally resized.
pub fn load_image_file(path: &Path, resize: Option<usize>) -> Result<ImageSample, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut rgb = img.to_rgb8();
    if let Some(side) = resize {
        rgb = image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle);
    }
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(ImageSample::new(h as usize, w as usize, 3, data, 0, path.display().to_string()))
}

/// Writes `[H·W, C]` pixels (C = 1 or 3) as an 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, pixels: &Tensor<f32>, height: usize, width: usize) -> Result<(), DataError> {
    let channels = pixels.shape().get(1).copied().unwrap_or(1);
    let bytes: Vec<u8> = pixels.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = if channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &bytes, width as u32, height as u32, color)
        .map_err(|e| DataError::Decode { path: path.to_path_buf(), detail: e.to_string() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Maximum shift as a fraction of the image extent.
    pub translate_fraction: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { enabled: false, max_rotation_deg: 15.0, scale_range: (0.8, 1.2), translate_fraction: 0.1, hflip_prob: 0.5 }
    }
}

/// One concrete affine draw. Rotation is clockwise on screen (y points down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub angle_deg: f64,
    pub scale: f64,
    /// Shift in pixels.
    pub shift: (f64, f64),
    pub hflip: bool,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { angle_deg: 0.0, scale: 1.0, shift: (0.0, 0.0), hflip: false };

    pub fn sample(spec: &AugmentSpec, height: usize, width: usize, rng: &mut impl Rng) -> Affine {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let (lo, hi) = spec.scale_range;
        Affine {
            angle_deg: sym(rng, spec.max_rotation_deg),
            scale: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
            shift: (sym(rng, spec.translate_fraction * width as f64), sym(rng, spec.translate_fraction * height as f64)),
            hflip: rng.gen_bool(spec.hflip_prob.clamp(0.0, 1.0)),
        }
    }
}

/// Index into `[0, n)` mirrored at both ends without repeating the edge.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Resamples `sample` under `t` with bilinear interpolation and reflect
/// padding. Each output pixel pulls from the inverse-mapped input location.
pub fn apply_affine(sample: &ImageSample, t: &Affine) -> ImageSample {
    let (h, w, c) = sample.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let (sin, cos) = (snap(sin), snap(cos));
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx - t.shift.0, y as f64 - cy - t.shift.1);
            // inverse rotation, then inverse scale
            let mut sx = (cos * dx + sin * dy) / t.scale;
            let sy = (-sin * dx + cos * dy) / t.scale;
            if t.hflip {
                sx = -sx;
            }
            let (px, py) = (snap(sx + cx), snap(sy + cy));
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = ((px - x0) as f32, (py - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (xa, xb) = (reflect(x0, w), reflect(x0 + 1, w));
            let (ya, yb) = (reflect(y0, h), reflect(y0 + 1, h));
            for ch in 0..c {
                let v = if fx == 0.0 && fy == 0.0 {
                    sample.at(ya, xa, ch)
                } else {
                    let top = sample.at(ya, xa, ch) * (1.0 - fx) + sample.at(ya, xb, ch) * fx;
                    let bot = sample.at(yb, xa, ch) * (1.0 - fx) + sample.at(yb, xb, ch) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageSample::new(h, w, c, data, sample.label, sample.id.clone())
}

/// Random affine augmentation; a disabled spec returns the sample unchanged.
pub fn augment(sample: &ImageSample, spec: &AugmentSpec, rng: &mut impl Rng) -> ImageSample {
    if !spec.enabled {
        return sample.clone();
    }
    apply_affine(sample, &Affine::sample(spec, sample.height, sample.width, rng))
}

/// Sample order for `epoch`, fixed by `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffles `0..n` with `seed` and holds out the last `val_fraction`.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
    let val = order.split_off(n - n_val);
    (order, val)
}
