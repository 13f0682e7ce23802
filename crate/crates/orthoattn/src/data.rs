//! Dataset ingestion (IDX), synthetic dataset generation, and desk-scale
//! augmentation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(N, C, H, W)` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Dataset> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "images must be (N,C,H,W), got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} images vs {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::DimMismatch(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(Dataset {
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

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Copy of image `i` as a `(C, H, W)` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let chw = self.channels() * self.height() * self.width();
        Tensor::from_vec(
            &[self.channels(), self.height(), self.width()],
            self.images.data()[i * chw..(i + 1) * chw].to_vec(),
        )
        .expect("image volume")
    }
}

fn read_be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    if bytes.len() < pos + 4 {
        return Err(Error::Truncated(format!("{what} header")));
    }
    Ok(u32::from_be_bytes([
        bytes[pos],
        bytes[pos + 1],
        bytes[pos + 2],
        bytes[pos + 3],
    ]))
}

/// Parse the big-endian IDX pair: u8 images (magic 0x00000803, dims
/// N,H,W) and u8 labels (magic 0x00000801). Pixels scale to `[0,1]` by
/// division with 255.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    if read_be_u32(&img_bytes, 0, "images")? != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&img_bytes, 4, "images")? as usize;
    let h = read_be_u32(&img_bytes, 8, "images")? as usize;
    let w = read_be_u32(&img_bytes, 12, "images")? as usize;
    let pixel_count = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Truncated("image dims overflow".into()))?;
    if img_bytes.len() < 16 + pixel_count {
        return Err(Error::Truncated(format!(
            "images payload wants {pixel_count} bytes, {} present",
            img_bytes.len() - 16
        )));
    }

    if read_be_u32(&lbl_bytes, 0, "labels")? != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4, "labels")? as usize;
    if n_labels != n {
        return Err(Error::DimMismatch(format!(
            "{n} images vs {n_labels} labels"
        )));
    }
    if lbl_bytes.len() < 8 + n_labels {
        return Err(Error::Truncated("labels payload".into()));
    }

    let data: Vec<f64> = img_bytes[16..16 + pixel_count]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::from_vec(&[n, 1, h, w], data)?,
        labels,
        class_count,
    )
}

/// Write a single-channel dataset as an IDX pair, quantizing pixels with
/// `round(v * 255)`.
pub fn save_idx(
    dataset: &Dataset,
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
) -> Result<()> {
    if dataset.channels() != 1 {
        return Err(Error::InvalidShape(
            "IDX stores single-channel images".into(),
        ));
    }
    let (n, h, w) = (dataset.len(), dataset.height(), dataset.width());
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in dataset.images.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &dataset.labels {
        lbl.push(l as u8);
    }
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

/// Synthetic crossed-bar classification task.
///
/// Class `k` images carry a pair of soft ridges crossing at angles
/// `+/-theta_k` with `theta_k = pi*(k+1)/(2*(classes+1))`, drawn through
/// a randomly shifted center with slight symmetric angle jitter. The
/// `{+theta, -theta}` pair is closed under horizontal flips, so flip
/// augmentation never turns one class's pattern into another's. Most
/// images also carry a fainter crossed pair from a different class, and
/// every pixel gets Gaussian noise (sigma 0.1); the distractors and the
/// center jitter keep a raw-pixel linear classifier well below a
/// convnet.
pub fn make_synthetic(
    seed: u64,
    classes: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    let mut rng = Rng::from_seed(seed);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    let max_shift = (h.min(w) as f64) / 5.0;
    let thickness = ((h.min(w) as f64) / 12.0).max(1.0);
    let class_angle = |k: usize| {
        std::f64::consts::PI * (k as f64 + 1.0) / (2.0 * (classes as f64 + 1.0))
    };
    let draw_cross = |rng: &mut Rng, class: usize| {
        let theta = class_angle(class) + rng.uniform(-0.08, 0.08);
        let cy = rng.uniform(-max_shift, max_shift);
        let cx = rng.uniform(-max_shift, max_shift);
        (theta, cy, cx)
    };
    for idx in 0..n {
        let class = idx / n_per_class;
        labels.push(class);
        let cross = draw_cross(&mut rng, class);
        let amp = rng.uniform(0.5, 0.75);
        let distractor = if rng.next_f64() < 0.75 {
            let other = (class + 1 + rng.below(classes - 1)) % classes;
            Some((draw_cross(&mut rng, other), rng.uniform(0.25, 0.45)))
        } else {
            None
        };
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.1 + cross_value(r, c, h, w, cross, thickness) * amp;
                if let Some((d_cross, d_amp)) = distractor {
                    v += cross_value(r, c, h, w, d_cross, thickness) * d_amp;
                }
                v += 0.1 * rng.standard_normal();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 1, h, w], data)?, labels, classes)
}

/// Crossed-ridge intensity: two Gaussian ridges through the shifted
/// center at angles `+theta` and `-theta`, combined by max so the
/// crossing point does not bloom.
fn cross_value(
    r: usize,
    c: usize,
    h: usize,
    w: usize,
    (theta, cy_shift, cx_shift): (f64, f64, f64),
    thickness: f64,
) -> f64 {
    let cy = (h as f64 - 1.0) / 2.0 + cy_shift;
    let cx = (w as f64 - 1.0) / 2.0 + cx_shift;
    let a = ridge_distance(r, c, cy, cx, theta) / thickness;
    let b = ridge_distance(r, c, cy, cx, -theta) / thickness;
    let va = (-a * a).exp();
    let vb = (-b * b).exp();
    va.max(vb)
}

fn ridge_distance(r: usize, c: usize, cy: f64, cx: f64, angle: f64) -> f64 {
    let (sin, cos) = angle.sin_cos();
    -sin * (c as f64 - cx) + cos * (r as f64 - cy)
}

/// Mirror an image along the width axis.
pub fn hflip(image: &Tensor) -> Tensor {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = image.clone();
    for ch in 0..c {
        for r in 0..h {
            let base = (ch * h + r) * w;
            for col in 0..w {
                out.data_mut()[base + col] = image.data()[base + (w - 1 - col)];
            }
        }
    }
    out
}

/// Zero-pad by `(pad_h, pad_w)` and crop the original size back at the
/// given offsets; `(pad_h, pad_w)` offsets reproduce the input exactly.
pub fn pad_crop(image: &Tensor, pad_h: usize, pad_w: usize, off_y: usize, off_x: usize) -> Tensor {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = (h + 2 * pad_h, w + 2 * pad_w);
    debug_assert!(off_y + h <= hp && off_x + w <= wp);
    let mut out = Tensor::zeros(&[c, h, w]).expect("crop shape");
    for ch in 0..c {
        for r in 0..h {
            let src_r = r + off_y;
            if src_r < pad_h || src_r >= h + pad_h {
                continue; // stays zero
            }
            for col in 0..w {
                let src_c = col + off_x;
                if src_c < pad_w || src_c >= w + pad_w {
                    continue;
                }
                out.data_mut()[(ch * h + r) * w + col] =
                    image.data()[(ch * h + (src_r - pad_h)) * w + (src_c - pad_w)];
            }
        }
    }
    out
}

/// Training augmentation: horizontal flip with probability 1/2, then a
/// random crop from a border of one pixel per eight. Aspect-ratio jitter
/// is deliberately omitted at this scale.
pub fn augment(rng: &mut Rng, image: &Tensor) -> Tensor {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let flipped = if rng.next_f64() < 0.5 {
        hflip(image)
    } else {
        image.clone()
    };
    let pad_h = (h / 8).max(1);
    let pad_w = (w / 8).max(1);
    let off_y = rng.below(2 * pad_h + 1);
    let off_x = rng.below(2 * pad_w + 1);
    pad_crop(&flipped, pad_h, pad_w, off_y, off_x)
}
