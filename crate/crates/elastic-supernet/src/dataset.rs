//! Dataset construction: a seeded synthetic token-sequence task
//! (Gaussian class clusters), an IDX image loader with patchification,
//! deterministic train/validation splitting, and two reference baselines
//! the pipeline reports so a run's accuracy numbers have context.

use std::fs;
use std::path::Path;

use elastic_core::data::TokenDataset;
use elastic_core::rng;
use elastic_core::scalar::Scalar;

use crate::error::{CliError, Result};

/// Class-balanced Gaussian-cluster sequences: class `c` owns a fixed
/// centroid per (token, feature) cell; a sample is its class centroid plus
/// `noise`-scaled Gaussian jitter. Deterministic in `seed`; sample order
/// is a seeded shuffle so splits stay class-balanced on average.
pub fn generate_blobs<T: Scalar>(
    classes: usize,
    samples: usize,
    tokens: usize,
    feat_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<TokenDataset<T>> {
    if classes < 2 {
        return Err(CliError::Config(format!(
            "blobs need at least 2 classes, got {classes}"
        )));
    }
    if samples == 0 || tokens == 0 || feat_dim == 0 {
        return Err(CliError::Config(format!(
            "degenerate blobs shape: {samples} samples of {tokens}x{feat_dim}"
        )));
    }
    let width = tokens * feat_dim;
    let mut cr = rng::derived(seed, "blobs.centroids");
    let centroids: Vec<f64> = (0..classes * width)
        .map(|_| rng::standard_normal(&mut cr))
        .collect();

    // Exact class balance: labels cycle through the classes, then the
    // whole sample list is shuffled.
    let mut order: Vec<usize> = (0..samples).collect();
    let mut sr = rng::derived(seed, "blobs.shuffle");
    for i in (1..samples).rev() {
        order.swap(i, rng::pick(&mut sr, 0, i));
    }
    let mut nr = rng::derived(seed, "blobs.noise");
    let mut features = vec![T::zero(); samples * width];
    let mut labels = vec![0usize; samples];
    for (row, &src) in order.iter().enumerate() {
        let class = src % classes;
        labels[row] = class;
        let c = &centroids[class * width..(class + 1) * width];
        for (dst, &base) in features[row * width..(row + 1) * width].iter_mut().zip(c) {
            *dst = T::lit(base + noise * rng::standard_normal(&mut nr));
        }
    }
    Ok(TokenDataset {
        features,
        labels,
        tokens,
        feat_dim,
    })
}

/// Split off the trailing fraction as validation. The generator already
/// shuffled, so a contiguous split is unbiased; both halves stay nonempty.
pub fn split<T: Scalar>(data: TokenDataset<T>, val_fraction: f64) -> Result<(TokenDataset<T>, TokenDataset<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CliError::Config(format!(
            "val_fraction {val_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = data.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(CliError::Config(format!(
            "cannot split {n} samples into train and validation"
        )));
    }
    let n_train = n - n_val;
    let w = data.tokens * data.feat_dim;
    let (f_train, f_val) = data.features.split_at(n_train * w);
    let (l_train, l_val) = data.labels.split_at(n_train);
    Ok((
        TokenDataset {
            features: f_train.to_vec(),
            labels: l_train.to_vec(),
            tokens: data.tokens,
            feat_dim: data.feat_dim,
        },
        TokenDataset {
            features: f_val.to_vec(),
            labels: l_val.to_vec(),
            tokens: data.tokens,
            feat_dim: data.feat_dim,
        },
    ))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            CliError::Data(format!(
                "{}: truncated at byte offset {at} while reading a 32-bit field",
                path.display()
            ))
        })
}

/// Minimal IDX reader: big-endian magic `0x00 0x00 <dtype> <ndims>`,
/// `ndims` big-endian u32 dimensions, then raw data. Only u8 payloads
/// (dtype 0x08) are supported, matching the common digit datasets.
fn read_idx_u8(path: &Path, want_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let magic = be_u32(&bytes, 0, path)?;
    if magic >> 16 != 0 {
        return Err(bad(format!(
            "bad IDX magic 0x{magic:08x} at offset 0 (leading bytes must be zero)"
        )));
    }
    let dtype = (magic >> 8) & 0xff;
    if dtype != 0x08 {
        return Err(bad(format!(
            "unsupported IDX element type 0x{dtype:02x} at offset 2 (only u8 is supported)"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    if ndims != want_dims {
        return Err(bad(format!(
            "IDX rank {ndims} at offset 3, expected {want_dims}"
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(&bytes, 4 + 4 * d, path)? as usize);
    }
    let data_at = 4 + 4 * ndims;
    let expect: usize = dims.iter().product();
    let got = bytes.len() - data_at.min(bytes.len());
    if got < expect {
        return Err(bad(format!(
            "truncated at byte offset {}: {got} payload bytes, header promises {expect}",
            bytes.len()
        )));
    }
    if got > expect {
        return Err(bad(format!(
            "{} trailing bytes after the promised payload",
            got - expect
        )));
    }
    Ok((dims, bytes[data_at..].to_vec()))
}

/// Load an IDX image/label file pair and patchify each `side × side` image
/// into `(side/patch)²` non-overlapping patches of `patch²` features,
/// scaled to [0,1]. The class token is *not* included here; the backbone
/// prepends it, so a spec consuming this dataset needs
/// `tokens = (side/patch)² + 1`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, patch: usize) -> Result<TokenDataset<T>> {
    if patch == 0 {
        return Err(CliError::Config("patch size must be positive".into()));
    }
    let (idims, ibytes) = read_idx_u8(images, 3)?;
    let (ldims, lbytes) = read_idx_u8(labels, 1)?;
    let (count, rows, cols) = (idims[0], idims[1], idims[2]);
    if rows != cols {
        return Err(CliError::Data(format!(
            "{}: only square images are supported, got {rows}x{cols}",
            images.display()
        )));
    }
    if rows % patch != 0 {
        return Err(CliError::Data(format!(
            "{}: image side {rows} is not divisible by patch {patch}",
            images.display()
        )));
    }
    if ldims[0] != count {
        return Err(CliError::Data(format!(
            "{}: {} labels for {count} images",
            labels.display(),
            ldims[0]
        )));
    }
    let grid = rows / patch;
    let tokens = grid * grid;
    let feat_dim = patch * patch;
    let mut features = vec![T::zero(); count * tokens * feat_dim];
    for img in 0..count {
        let src = &ibytes[img * rows * cols..(img + 1) * rows * cols];
        let dst = &mut features[img * tokens * feat_dim..(img + 1) * tokens * feat_dim];
        for py in 0..grid {
            for px in 0..grid {
                let token = py * grid + px;
                for y in 0..patch {
                    for x in 0..patch {
                        let pixel = src[(py * patch + y) * cols + px * patch + x];
                        dst[token * feat_dim + y * patch + x] = T::lit(pixel as f64 / 255.0);
                    }
                }
            }
        }
    }
    Ok(TokenDataset {
        features,
        labels: lbytes.iter().map(|&b| b as usize).collect(),
        tokens,
        feat_dim,
    })
}

fn mean_token<T: Scalar>(data: &TokenDataset<T>, idx: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.feat_dim];
    let s = data.sample(idx);
    for t in 0..data.tokens {
        for f in 0..data.feat_dim {
            out[f] += s[t * data.feat_dim + f].as_f64();
        }
    }
    for v in &mut out {
        *v /= data.tokens as f64;
    }
    out
}

/// Accuracy of classifying each test sample by the nearest training-set
/// class centroid (full flattened features, Euclidean distance). In the
/// zero-noise limit of the blobs task this is exact.
pub fn nearest_centroid_accuracy<T: Scalar>(
    train: &TokenDataset<T>,
    test: &TokenDataset<T>,
    classes: usize,
) -> f64 {
    let w = train.tokens * train.feat_dim;
    let mut centroid = vec![0.0f64; classes * w];
    let mut counts = vec![0usize; classes];
    for i in 0..train.len() {
        let c = train.labels[i];
        counts[c] += 1;
        for (dst, v) in centroid[c * w..(c + 1) * w].iter_mut().zip(train.sample(i)) {
            *dst += v.as_f64();
        }
    }
    for c in 0..classes {
        if counts[c] > 0 {
            for v in &mut centroid[c * w..(c + 1) * w] {
                *v /= counts[c] as f64;
            }
        }
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let s = test.sample(i);
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..classes {
            let d: f64 = centroid[c * w..(c + 1) * w]
                .iter()
                .zip(s)
                .map(|(m, v)| {
                    let d = m - v.as_f64();
                    d * d
                })
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == test.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

/// Multinomial logistic regression on mean-token features, trained by
/// plain gradient descent. A deliberately crude reference point: shows the
/// task is learnable but leaves headroom for the transformer.
pub fn logistic_baseline_accuracy<T: Scalar>(
    train: &TokenDataset<T>,
    test: &TokenDataset<T>,
    classes: usize,
    epochs: usize,
    lr: f64,
) -> f64 {
    let d = train.feat_dim;
    let mut w = vec![0.0f64; d * classes];
    let mut b = vec![0.0f64; classes];
    let feats: Vec<Vec<f64>> = (0..train.len()).map(|i| mean_token(train, i)).collect();
    for _ in 0..epochs {
        let mut gw = vec![0.0f64; d * classes];
        let mut gb = vec![0.0f64; classes];
        for (x, &label) in feats.iter().zip(&train.labels) {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + x.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (c, l) in logits.iter_mut().enumerate() {
                let p = (*l - m).exp() / z;
                let err = p - if c == label { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, xf) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += err * xf;
                }
            }
        }
        let scale = lr / train.len() as f64;
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= scale * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= scale * g;
        }
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let x = mean_token(test, i);
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0usize);
        for c in 0..classes {
            let l = b[c] + x.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
            if l > best {
                best = l;
                arg = c;
            }
        }
        if arg == test.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}
