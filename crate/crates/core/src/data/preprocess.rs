use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 1] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected an (h, w, 1) image, got {s:?}"))),
    }
}

/// Mirrors an (H,W,1) image left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let w = image.shape()[1];
    let src = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (row, col) = (i / w, i % w);
        src[row * w + (w - 1 - col)]
    })
}

fn columns(image: &Tensor, from: usize, to: usize) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let width = to - from;
    let src = image.data();
    Tensor::from_fn(&[h, width, 1], |i| src[(i / width) * w + from + i % width])
}

/// Cuts a bilateral image down the middle. The right half is mirrored into
/// the left knee's orientation; an odd center column is dropped.
pub fn split_bilateral(image: &Tensor) -> Result<(Tensor, Tensor)> {
    split_bilateral_with(image, true)
}

pub fn split_bilateral_with(image: &Tensor, flip_right: bool) -> Result<(Tensor, Tensor)> {
    let (_, w) = dims(image, "split_bilateral")?;
    if w < 2 {
        return Err(Error::InvalidArgument(format!("cannot split an image of width {w}")));
    }
    let left = columns(image, 0, w / 2);
    let right = columns(image, w.div_ceil(2), w);
    Ok((left, if flip_right { hflip(&right) } else { right }))
}

/// Source coordinate and blend weight for output index `i` under half-pixel centers.
fn sample_axis(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resample to `target` (height, width) using half-pixel centers.
pub fn resize_keep_aspect(image: &Tensor, target: [usize; 2]) -> Result<Tensor> {
    let (h, w) = dims(image, "resize")?;
    if target.contains(&0) {
        return Err(Error::InvalidArgument(format!("resize target {target:?} has a zero extent")));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty image".into()));
    }
    let [th, tw] = target;
    let rows: Vec<_> = (0..th).map(|y| sample_axis(y, h, th)).collect();
    let cols: Vec<_> = (0..tw).map(|x| sample_axis(x, w, tw)).collect();
    let src = image.data();
    Ok(Tensor::from_fn(&[th, tw, 1], |i| {
        let (y0, y1, fy) = rows[i / tw];
        let (x0, x1, fx) = cols[i % tw];
        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
        let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Histogram equalization over 256 bins:
/// `h(v) = (cdf(v) - cdf_min) / (N - cdf_min)`. Constant images pass through.
pub fn hist_equalize(image: &Tensor) -> Tensor {
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
    let mut hist = [0usize; 256];
    for &v in image.data() {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = image.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        return image.clone();
    }
    let denom = (n - cdf_min) as f64;
    image.map(|v| (cdf[bin(v)] - cdf_min) as f64 / denom)
}

/// Variance of the normalized 256-bin histogram.
pub fn histogram_variance(image: &Tensor) -> f64 {
    let mut hist = [0f64; 256];
    for &v in image.data() {
        hist[((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)] += 1.0;
    }
    let n = image.len() as f64;
    let mean = 1.0 / 256.0;
    hist.iter().map(|h| (h / n - mean).powi(2)).sum::<f64>() / 256.0
}
