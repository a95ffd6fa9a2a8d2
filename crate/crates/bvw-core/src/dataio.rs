//! Dataset loading, synthesis, batching, and image export.
//!
//! Supported on-disk formats:
//! - 3073-byte binary records (1 label byte + 3 channel planes of 32x32), the
//!   common CIFAR-10 layout, for both reading and writing;
//! - IDX (big-endian magic 0x803 for image stacks, 0x801 for label vectors);
//! - binary PGM (P5) and PPM (P6) for exporting analysis images;
//! - a raw mask sidecar (one H*W byte plane of {0,1} per sample) giving
//!   per-pixel foreground ground truth for localization scoring.
//!
//! The synthetic generator draws ten geometric classes with randomized
//! colors, position, scale, distractor rectangles, and pixel noise, in the
//! exact 3073-byte record format, so the rest of the pipeline cannot tell it
//! apart from real data.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::stream_at;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file size {size} is not a multiple of record size {record}")]
    BadRecordSize {
        path: String,
        size: u64,
        record: usize,
    },
    #[error("{path}: bad IDX magic {got:#010x}, expected {want:#010x}")]
    BadMagic { path: String, got: u32, want: u32 },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("{path}: label {label} out of range for {classes} classes")]
    BadLabel {
        path: String,
        label: u8,
        classes: usize,
    },
    #[error("image and label counts differ: {images} vs {labels}")]
    CountMismatch { images: usize, labels: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// In-memory dataset: u8 pixels in channel-plane order, one label per image.
#[derive(Clone)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.images[i * n..(i + 1) * n]
    }

    /// Subset by index list (copies).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let n = self.image_bytes();
        let mut images = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            ..*self
        }
    }

    /// Gather `idx` into a normalized float batch [B, C, H, W]:
    /// (pixel/255 - mean[c]) / std[c].
    pub fn batch<T: Scalar>(&self, idx: &[usize], mean: &[f64], std: &[f64]) -> (Tensor<T>, Vec<u8>) {
        assert_eq!(mean.len(), self.channels);
        assert_eq!(std.len(), self.channels);
        let plane = self.height * self.width;
        let n = self.image_bytes();
        let mut out = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let img = self.image(i);
            for c in 0..self.channels {
                let (m, s) = (mean[c], std[c]);
                for &px in &img[c * plane..(c + 1) * plane] {
                    out.push(T::from_f64((px as f64 / 255.0 - m) / s));
                }
            }
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(&[idx.len(), self.channels, self.height, self.width], out),
            labels,
        )
    }
}

/// Per-channel mean and standard deviation of pixel intensities in [0, 1].
pub fn mean_std(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let plane = ds.height * ds.width;
    let mut mean = vec![0.0; ds.channels];
    let mut var = vec![0.0; ds.channels];
    let count = (ds.len() * plane) as f64;
    for i in 0..ds.len() {
        let img = ds.image(i);
        for c in 0..ds.channels {
            for &px in &img[c * plane..(c + 1) * plane] {
                mean[c] += px as f64 / 255.0;
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..ds.len() {
        let img = ds.image(i);
        for c in 0..ds.channels {
            for &px in &img[c * plane..(c + 1) * plane] {
                let d = px as f64 / 255.0 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std = var.iter().map(|v| (v / count).sqrt()).collect();
    (mean, std)
}

// -- 3073-byte records (CIFAR-10 binary layout) ------------------------------

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Read one or more record files into a single dataset (32x32 RGB, 10 classes).
pub fn load_records(paths: &[&Path]) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(DataError::BadRecordSize {
                path: path.display().to_string(),
                size: bytes.len() as u64,
                record: RECORD_BYTES,
            });
        }
        for rec in bytes.chunks(RECORD_BYTES) {
            if rec[0] > 9 {
                return Err(DataError::BadLabel {
                    path: path.display().to_string(),
                    label: rec[0],
                    classes: 10,
                });
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
    })
}

/// Write a dataset (must be 32x32 RGB) as 3073-byte records.
pub fn write_records(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    assert_eq!((ds.channels, ds.height, ds.width), (3, 32, 32));
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        buf.push(ds.labels[i]);
        buf.extend_from_slice(ds.image(i));
    }
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

// -- IDX --------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| DataError::Truncated {
        path: path.display().to_string(),
    })?;
    Ok(u32::from_be_bytes(b))
}

/// Load an IDX image stack and label vector as a 1-channel dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset, DataError> {
    let mut f = std::fs::File::open(images_path).map_err(|e| io_err(images_path, e))?;
    let magic = read_u32_be(&mut f, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            want: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(&mut f, images_path)? as usize;
    let rows = read_u32_be(&mut f, images_path)? as usize;
    let cols = read_u32_be(&mut f, images_path)? as usize;
    let mut images = vec![0u8; count * rows * cols];
    f.read_exact(&mut images).map_err(|_| DataError::Truncated {
        path: images_path.display().to_string(),
    })?;

    let mut f = std::fs::File::open(labels_path).map_err(|e| io_err(labels_path, e))?;
    let magic = read_u32_be(&mut f, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            want: IDX_LABELS_MAGIC,
        });
    }
    let lcount = read_u32_be(&mut f, labels_path)? as usize;
    if lcount != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels).map_err(|_| DataError::Truncated {
        path: labels_path.display().to_string(),
    })?;
    for &l in &labels {
        if (l as usize) >= classes {
            return Err(DataError::BadLabel {
                path: labels_path.display().to_string(),
                label: l,
                classes,
            });
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 1,
        height: rows,
        width: cols,
        classes,
    })
}

/// Write a 1-channel dataset as an IDX image stack + label vector pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<(), DataError> {
    assert_eq!(ds.channels, 1, "IDX export is single-channel");
    let mut f = std::fs::File::create(images_path).map_err(|e| io_err(images_path, e))?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(ds.len() as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(ds.height as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(ds.width as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&ds.images))
        .map_err(|e| io_err(images_path, e))?;
    let mut f = std::fs::File::create(labels_path).map_err(|e| io_err(labels_path, e))?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(ds.len() as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&ds.labels))
        .map_err(|e| io_err(labels_path, e))
}

// -- foreground masks ---------------------------------------------------------

/// Write per-sample {0,1} masks as raw concatenated H*W byte planes.
pub fn write_masks(path: &Path, masks: &[u8], plane: usize) -> Result<(), DataError> {
    assert_eq!(masks.len() % plane, 0);
    std::fs::write(path, masks).map_err(|e| io_err(path, e))
}

/// Read a raw mask sidecar; the file length must divide evenly into planes.
pub fn load_masks(path: &Path, plane: usize) -> Result<Vec<u8>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % plane != 0 {
        return Err(DataError::BadRecordSize {
            path: path.display().to_string(),
            size: bytes.len() as u64,
            record: plane,
        });
    }
    Ok(bytes)
}

// -- synthetic shapes ----------------------------------------------------------

pub const SHAPE_CLASS_NAMES: [&str; 10] = [
    "circle", "ring", "square", "triangle", "cross", "diamond", "hstripes", "vstripes",
    "checker", "xmark",
];

fn shape_hit(class: u8, dx: i32, dy: i32, r: i32) -> bool {
    let t = (r / 3).max(1);
    let band = (r / 2).max(2);
    let inside_box = dx.abs() <= r && dy.abs() <= r;
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            let d2 = dx * dx + dy * dy;
            let inner = (r * 55 / 100).max(1);
            d2 <= r * r && d2 >= inner * inner
        }
        2 => inside_box,
        3 => {
            // Upright triangle, apex at the top of the bounding box.
            if dy < -r || dy > r {
                return false;
            }
            let half = ((dy + r) * r) / (2 * r).max(1);
            dx.abs() <= half
        }
        4 => (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r),
        5 => dx.abs() + dy.abs() <= r,
        6 => inside_box && ((dy + r) / band) % 2 == 0,
        7 => inside_box && ((dx + r) / band) % 2 == 0,
        8 => inside_box && (((dx + r) / band) + ((dy + r) / band)) % 2 == 0,
        9 => inside_box && ((dx - dy).abs() <= t || (dx + dy).abs() <= t),
        _ => unreachable!("10 shape classes"),
    }
}

/// Generate `n` 32x32 RGB samples of ten geometric classes plus per-pixel
/// foreground masks. Deterministic in `seed`; sample i is independent of n.
pub fn synth_shapes(n: usize, seed: u64) -> (Dataset, Vec<u8>) {
    const H: usize = 32;
    const W: usize = 32;
    let mut images = vec![0u8; n * 3 * H * W];
    let mut labels = vec![0u8; n];
    let mut masks = vec![0u8; n * H * W];
    for i in 0..n {
        let mut r = stream_at(seed, "shapes", i as u64);
        let class = (i % 10) as u8;
        let bg = [r.gen::<u8>(), r.gen::<u8>(), r.gen::<u8>()];
        let fg = loop {
            let c = [r.gen::<u8>(), r.gen::<u8>(), r.gen::<u8>()];
            let contrast: i32 = (0..3).map(|k| (c[k] as i32 - bg[k] as i32).abs()).sum();
            if contrast >= 180 {
                break c;
            }
        };
        let cx = 16 + r.gen_range(-4..=4);
        let cy = 16 + r.gen_range(-4..=4);
        let rad = r.gen_range(6..=11);

        let img = &mut images[i * 3 * H * W..(i + 1) * 3 * H * W];
        for c in 0..3 {
            img[c * H * W..(c + 1) * H * W].fill(bg[c]);
        }
        // Distractor rectangles painted under the shape.
        for _ in 0..2 {
            let dc = [r.gen::<u8>(), r.gen::<u8>(), r.gen::<u8>()];
            let x0 = r.gen_range(0..W as i32 - 4);
            let y0 = r.gen_range(0..H as i32 - 4);
            let dw = r.gen_range(2..=5);
            let dh = r.gen_range(2..=5);
            for y in y0..(y0 + dh).min(H as i32) {
                for x in x0..(x0 + dw).min(W as i32) {
                    for c in 0..3 {
                        img[c * H * W + y as usize * W + x as usize] = dc[c];
                    }
                }
            }
        }
        let mask = &mut masks[i * H * W..(i + 1) * H * W];
        for y in 0..H {
            for x in 0..W {
                if shape_hit(class, x as i32 - cx, y as i32 - cy, rad) {
                    for c in 0..3 {
                        img[c * H * W + y * W + x] = fg[c];
                    }
                    mask[y * W + x] = 1;
                }
            }
        }
        let sigma = r.gen_range(2.0..14.0);
        let noise = Normal::new(0.0f64, sigma).expect("sigma > 0");
        for px in img.iter_mut() {
            let v = *px as f64 + noise.sample(&mut r);
            *px = v.round().clamp(0.0, 255.0) as u8;
        }
        labels[i] = class;
    }
    (
        Dataset {
            images,
            labels,
            channels: 3,
            height: H,
            width: W,
            classes: 10,
        },
        masks,
    )
}

// -- augmentation ---------------------------------------------------------------

/// Horizontally mirror sample planes in a [B, C, H, W] batch where `flip[b]`.
pub fn hflip_batch<T: Scalar>(batch: &Tensor<T>, flip: &[bool]) -> Tensor<T> {
    let sh = batch.shape().to_vec();
    assert_eq!(sh.len(), 4);
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert_eq!(flip.len(), b);
    let mut out = batch.to_vec();
    for (bi, &f) in flip.iter().enumerate() {
        if !f {
            continue;
        }
        for plane in 0..c {
            let base = (bi * c + plane) * h * w;
            for y in 0..h {
                out[base + y * w..base + (y + 1) * w].reverse();
            }
        }
    }
    Tensor::new(&sh, out)
}

/// One-hot rows [B, K].
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Tensor<T> {
    let mut out = vec![T::ZERO; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l as usize] = T::ONE;
    }
    Tensor::new(&[labels.len(), classes], out)
}

/// Convex combination of the batch with a permuted copy of itself, one shared
/// mixing weight for the whole batch. Returns mixed images and targets.
pub fn mixup<T: Scalar>(
    images: &Tensor<T>,
    targets: &Tensor<T>,
    perm: &[usize],
    lambda: f64,
) -> (Tensor<T>, Tensor<T>) {
    let b = images.shape()[0];
    assert_eq!(targets.shape()[0], b);
    assert_eq!(perm.len(), b);
    let (lam, inv) = (T::from_f64(lambda), T::from_f64(1.0 - lambda));
    let mix = |t: &Tensor<T>| {
        let row = t.numel() / b;
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for i in 0..b {
            let a = &src[i * row..(i + 1) * row];
            let p = &src[perm[i] * row..(perm[i] + 1) * row];
            for (x, y) in a.iter().zip(p) {
                out.push(lam * *x + inv * *y);
            }
        }
        Tensor::new(t.shape(), out)
    };
    (mix(images), mix(targets))
}

/// Fisher-Yates shuffle of 0..n, deterministic in the rng stream.
pub fn permutation(n: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

// -- patch embedding layout -------------------------------------------------------

/// Rearrange [B, C, H, W] into patch tokens [B, N, C*p*p]; within a token the
/// layout is (channel, patch-row, patch-col) row-major, tokens scan the grid
/// row-major. Mirrors the differentiable tape op; kept here for plain tensors.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Tensor<T> {
    let sh = images.shape();
    assert_eq!(sh.len(), 4);
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(h % patch == 0 && w % patch == 0);
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = vec![T::ZERO; b * n * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let dst = (bi * n + gy * gw + gx) * pd;
                for ci in 0..c {
                    for py in 0..patch {
                        let srow = (bi * c + ci) * h * w + (gy * patch + py) * w + gx * patch;
                        let drow = dst + ci * patch * patch + py * patch;
                        out[drow..drow + patch].copy_from_slice(&src[srow..srow + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, n, pd], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch: usize, channels: usize, height: usize, width: usize) -> Tensor<T> {
    let sh = tokens.shape();
    assert_eq!(sh.len(), 3);
    let (b, n, pd) = (sh[0], sh[1], sh[2]);
    let (gh, gw) = (height / patch, width / patch);
    assert_eq!(n, gh * gw);
    assert_eq!(pd, channels * patch * patch);
    let src = tokens.data();
    let mut out = vec![T::ZERO; b * channels * height * width];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (bi * n + gy * gw + gx) * pd;
                for ci in 0..channels {
                    for py in 0..patch {
                        let drow =
                            (bi * channels + ci) * height * width + (gy * patch + py) * width + gx * patch;
                        let srow = tok + ci * patch * patch + py * patch;
                        out[drow..drow + patch].copy_from_slice(&src[srow..srow + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, channels, height, width], out)
}

// -- image export ------------------------------------------------------------------

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5) from a [H, W] tensor of values in [0, 1].
pub fn write_pgm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let sh = image.shape();
    assert_eq!(sh.len(), 2, "PGM wants [H, W]");
    let (h, w) = (sh[0], sh[1]);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| to_byte(v.to_f64())));
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Binary PPM (P6) from a [3, H, W] tensor of values in [0, 1].
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let sh = image.shape();
    assert_eq!(sh.len(), 3, "PPM wants [3, H, W]");
    assert_eq!(sh[0], 3, "PPM wants 3 channels");
    let (h, w) = (sh[1], sh[2]);
    let plane = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            buf.push(to_byte(d[c * plane + i].to_f64()));
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}
