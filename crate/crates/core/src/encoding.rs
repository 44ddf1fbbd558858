//! Patch tokens, sinusoidal space-time encodings, and label embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A batch of clips as consumed by the model.
///
/// `images` is `[B, L, H, W, C]`. Per sample, `timestamps` (years) must be
/// strictly increasing, and `input_labels[b][l]` is the observed label of
/// visit `l` while `target_labels[b][l]` is the label of visit `l + 1`.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub images: Tensor,
    pub timestamps: Vec<Vec<f64>>,
    pub input_labels: Vec<Vec<usize>>,
    pub target_labels: Vec<Vec<usize>>,
}

impl ClipBatch {
    pub fn new(
        images: Tensor,
        timestamps: Vec<Vec<f64>>,
        input_labels: Vec<Vec<usize>>,
        target_labels: Vec<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 5 {
            return Err(Error::contract(format!(
                "clip images must be [B, L, H, W, C], got {shape:?}"
            )));
        }
        let (b, l) = (shape[0], shape[1]);
        for (what, rows) in [("timestamps", timestamps.len()), ("input labels", input_labels.len()), ("target labels", target_labels.len())] {
            if rows != b {
                return Err(Error::data(format!("{what}: {rows} rows for batch of {b}")));
            }
        }
        for i in 0..b {
            if timestamps[i].len() != l || input_labels[i].len() != l || target_labels[i].len() != l {
                return Err(Error::data(format!("sample {i}: per-visit arrays must have length {l}")));
            }
            if timestamps[i].windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::data(format!("sample {i}: timestamps not strictly increasing")));
            }
            if let Some(bad) = input_labels[i].iter().chain(&target_labels[i]).find(|&&y| y >= num_classes) {
                return Err(Error::data(format!("sample {i}: label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(Self {
            images,
            timestamps,
            input_labels,
            target_labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[2], s[3], s[4])
    }

    /// Adds `offset` years to every timestamp.
    pub fn shifted(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.timestamps {
            row.iter_mut().for_each(|t| *t += offset);
        }
        out
    }
}

/// Patch tokens `[B, L, N, d_m]` laid out on a `grid_h x grid_w` grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Per image and channel of `[B, L, H, W, C]`, subtracts the mean and divides
/// by the standard deviation; flat channels are only centered.
pub fn standardize_images(images: &Tensor) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 5 {
        return Err(Error::contract(format!("images must be [B, L, H, W, C], got {shape:?}")));
    }
    let c = shape[4];
    let pixels = shape[2] * shape[3];
    let mut out = images.data().to_vec();
    for image in out.chunks_mut(pixels * c) {
        for ch in 0..c {
            let mean = image.iter().skip(ch).step_by(c).sum::<f64>() / pixels as f64;
            let var = image.iter().skip(ch).step_by(c).map(|v| (v - mean).powi(2)).sum::<f64>() / pixels as f64;
            let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            for v in image.iter_mut().skip(ch).step_by(c) {
                *v = (*v - mean) * scale;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Groups each non-overlapping `f x f` block of a `[B, L, h, w, c]` field into
/// one row of `f * f * c` values, giving `[B, L, (h/f) * (w/f), f * f * c]`.
///
/// Rows are ordered row-major over the coarse grid; values within a block are
/// ordered (row, column, channel).
pub(crate) fn group_blocks(g: &mut Graph, x: Var, dims: [usize; 5], f: usize) -> Result<Var> {
    let [b, l, h, w, c] = dims;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::config(format!(
            "grid {h}x{w} is not divisible by block size {f}"
        )));
    }
    let x = g.reshape(x, &[b * l, h / f, f, w / f, f * c])?;
    let x = g.transpose(x, 2, 3)?;
    g.reshape(x, &[b, l, (h / f) * (w / f), f * f * c])
}

/// Splits every image into `p x p` patches and maps each flattened patch to
/// `d_m` values with `weight: [p*p*C, d_m]` and `bias: [d_m]`.
pub fn patch_embed(
    g: &mut Graph,
    images: Var,
    patch: usize,
    weight: Var,
    bias: Var,
) -> Result<TokenGrid> {
    let shape = g.shape(images).to_vec();
    let [b, l, h, w, c]: [usize; 5] = shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::contract(format!("images must be rank 5, got {shape:?}")))?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let flat = group_blocks(g, images, [b, l, h, w, c], patch)?;
    let tokens = g.linear(flat, weight, Some(bias))?;
    Ok(TokenGrid {
        tokens,
        grid_h: h / patch,
        grid_w: w / patch,
    })
}

fn check_width(d_model: usize) -> Result<()> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::config(format!(
            "embedding width must be even and positive, got {d_model}"
        )));
    }
    Ok(())
}

fn frequency(i: usize, d_model: usize) -> f64 {
    10000f64.powf(2.0 * i as f64 / d_model as f64)
}

/// Space-time positional encoding `[L, N, d_m]`: sinusoids of the elapsed
/// time since the first visit plus sinusoids of the patch index.
pub fn stp_encode(timestamps: &[f64], num_tokens: usize, d_model: usize) -> Result<Tensor> {
    check_width(d_model)?;
    let l = timestamps.len();
    let time = time_encode(timestamps, d_model)?;
    let freqs: Vec<f64> = (0..d_model / 2).map(|i| frequency(i, d_model)).collect();
    let mut data = Vec::with_capacity(l * num_tokens * d_model);
    for visit in 0..l {
        let t_row = &time.data()[visit * d_model..(visit + 1) * d_model];
        for n in 0..num_tokens {
            for (i, &f) in freqs.iter().enumerate() {
                let arg = n as f64 / f;
                data.push(t_row[2 * i] + arg.sin());
                data.push(t_row[2 * i + 1] + arg.cos());
            }
        }
    }
    Tensor::new(vec![l, num_tokens, d_model], data)
}

/// Time-only sinusoidal encoding `[L, d_m]` of the elapsed time since the first visit.
pub fn time_encode(timestamps: &[f64], d_model: usize) -> Result<Tensor> {
    check_width(d_model)?;
    let first = *timestamps
        .first()
        .ok_or_else(|| Error::contract("time encoding of an empty sequence"))?;
    let mut data = Vec::with_capacity(timestamps.len() * d_model);
    for &t in timestamps {
        let dt = (t - first).abs();
        for i in 0..d_model / 2 {
            let arg = dt / frequency(i, d_model);
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::new(vec![timestamps.len(), d_model], data)
}

/// Batched [`stp_encode`], `[B, L, N, d_m]`.
pub fn stp_encode_batch(timestamps: &[Vec<f64>], num_tokens: usize, d_model: usize) -> Result<Tensor> {
    stack(timestamps.iter().map(|ts| stp_encode(ts, num_tokens, d_model)))
}

/// Batched [`time_encode`], `[B, L, d_m]`.
pub fn time_encode_batch(timestamps: &[Vec<f64>], d_model: usize) -> Result<Tensor> {
    stack(timestamps.iter().map(|ts| time_encode(ts, d_model)))
}

fn stack(parts: impl Iterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let parts = parts.collect::<Result<Vec<_>>>()?;
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?
        .shape()
        .to_vec();
    let mut shape = vec![parts.len()];
    shape.extend(&first);
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

/// Learned label lookup: `table: [k, d_m]`, `labels: [B][L]` → `[B, L, d_m]`.
pub fn label_embed(g: &mut Graph, table: Var, labels: &[Vec<usize>]) -> Result<Var> {
    let b = labels.len();
    let l = labels.first().map_or(0, Vec::len);
    if b == 0 || l == 0 || labels.iter().any(|row| row.len() != l) {
        return Err(Error::data("label batch must be a non-empty rectangle"));
    }
    let d = g.shape(table)[1];
    let flat: Vec<usize> = labels.iter().flatten().copied().collect();
    let rows = g.embedding(table, &flat)?;
    g.reshape(rows, &[b, l, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_channels() {
        let x = Tensor::from_fn(&[1, 2, 2, 2, 2], |i| if i % 2 == 0 { i as f64 } else { 3.0 });
        let s = standardize_images(&x).unwrap();
        for image in s.data().chunks(8) {
            let ch0: Vec<f64> = image.iter().step_by(2).copied().collect();
            let mean = ch0.iter().sum::<f64>() / 4.0;
            let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
            assert!(image.iter().skip(1).step_by(2).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn patch_counts() {
        for (side, p, n) in [(64, 8, 64), (224, 16, 196)] {
            let mut g = Graph::new();
            let img = g.constant(Tensor::zeros(&[1, 1, side, side, 3]));
            let w = g.param(Tensor::zeros(&[p * p * 3, 4]));
            let b = g.param(Tensor::zeros(&[4]));
            let grid = patch_embed(&mut g, img, p, w, b).unwrap();
            assert_eq!(grid.num_tokens(), n);
            assert_eq!(g.shape(grid.tokens), &[1, 1, n, 4]);
        }
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[2, 3, 16, 16, 3]));
        let w = g.param(Tensor::from_fn(&[8 * 8 * 3, 6], |i| (i as f64).sin()));
        let b = g.param(Tensor::zeros(&[6]));
        let grid = patch_embed(&mut g, img, 8, w, b).unwrap();
        assert!(g.value(grid.tokens).data().iter().all(|&v| v == 0.0));
        assert_eq!((grid.grid_h, grid.grid_w), (2, 2));
    }

    #[test]
    fn patch_embed_matches_manual_patch_sum() {
        // With a weight that sums channel 0 of each patch, token n holds the patch sum.
        let (h, w, c, p) = (4, 6, 2, 2);
        let img = Tensor::from_fn(&[1, 1, h, w, c], |i| i as f64);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let weight = g.param(Tensor::from_fn(&[p * p * c, 1], |i| if i % c == 0 { 1.0 } else { 0.0 }));
        let bias = g.param(Tensor::zeros(&[1]));
        let grid = patch_embed(&mut g, x, p, weight, bias).unwrap();
        let out = g.value(grid.tokens).data().to_vec();
        for gy in 0..h / p {
            for gx in 0..w / p {
                let mut expected = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, xx) = (gy * p + dy, gx * p + dx);
                        expected += img.data()[(y * w + xx) * c];
                    }
                }
                assert_eq!(out[gy * (w / p) + gx], expected);
            }
        }
    }

    #[test]
    fn indivisible_image_is_config_error() {
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 1, 10, 16, 1]));
        let w = g.param(Tensor::zeros(&[64, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(matches!(patch_embed(&mut g, img, 8, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn stp_spot_values() {
        let stp = stp_encode(&[3.0, 4.0], 2, 8).unwrap();
        // visit 0 (dt = 0), token 0: sin0+sin0 = 0 and cos0+cos0 = 2
        for i in 0..4 {
            assert_eq!(stp.data()[2 * i], 0.0);
            assert_eq!(stp.data()[2 * i + 1], 2.0);
        }
        // visit 1 (dt = 1), token 1, i = 0: 2 sin(1)
        let at = (2 + 1) * 8;
        assert!((stp.data()[at] - 1.682_941_969_615_793).abs() < 1e-12);
        assert!(matches!(stp_encode(&[0.0], 1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn time_encode_spot_values() {
        let te = time_encode(&[0.5, 1.5], 4).unwrap();
        assert_eq!(&te.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((te.data()[4] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((te.data()[5] - 0.540_302_305_868_139_8).abs() < 1e-12);
    }

    #[test]
    fn label_embedding_lookup() {
        let mut g = Graph::new();
        let table = g.param(Tensor::zeros(&[2, 4]));
        let e = label_embed(&mut g, table, &[vec![0, 1, 1]]).unwrap();
        assert_eq!(g.shape(e), &[1, 3, 4]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let table = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let e = label_embed(&mut g, table, &[vec![2, 0, 2]]).unwrap();
        let v = g.value(e).data();
        assert_eq!(&v[0..2], &v[4..6]);
        assert!(label_embed(&mut g, table, &[vec![3]]).is_err());
    }
}
