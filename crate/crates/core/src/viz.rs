//! Turning saliency tensors into images: heatmap, graymap, input scaling,
//! segment masking, blurred overlay and value projection, plus PNG output.
//!
//! Every renderer returns values in `[0, 1]`. A saliency whose maximum
//! magnitude is zero maps to the renderer's neutral colour.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::sample::segment::Segmentation;
use crate::tensor::Tensor;

pub const BLUR_SIGMA: f64 = 3.0;
pub const DEFAULT_MASK_TOP_K: usize = 50;

/// An `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RGBImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RGBImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return shape_err(format!("{} values for a {height}x{width} RGB image", data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    /// Maps a model input spanning `range` to `[0, 1]`; one channel is
    /// replicated to grey, three are used as RGB.
    pub fn from_input(x: &Tensor, range: (f32, f32)) -> Result<Self> {
        let (h, w, c) = dims(x)?;
        if c != 1 && c != 3 {
            return shape_err(format!("cannot show {c} channels as RGB"));
        }
        let span = range.1 - range.0;
        let unit = |v: f32| {
            if span > 0.0 {
                ((v - range.0) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        };
        let data = x
            .data()
            .chunks(c)
            .flat_map(|px| if c == 3 { [unit(px[0]), unit(px[1]), unit(px[2])] } else { [unit(px[0]); 3] })
            .collect();
        Ok(Self { height: h, width: w, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Lays images out row by row, `cols` per row, separated by `pad` white
    /// pixels. All tiles must share one size.
    pub fn tile(images: &[RGBImage], cols: usize, pad: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Config("nothing to tile".into()));
        };
        if cols == 0 {
            return Err(Error::Config("tiling needs at least one column".into()));
        }
        let (th, tw) = (first.height, first.width);
        if images.iter().any(|i| i.height != th || i.width != tw) {
            return shape_err("tiles differ in size");
        }
        let rows = images.len().div_ceil(cols);
        let cols = cols.min(images.len());
        let (h, w) = (rows * th + (rows - 1) * pad, cols * tw + (cols - 1) * pad);
        let mut out = Self::filled(h, w, [1.0; 3]);
        for (n, img) in images.iter().enumerate() {
            let (oy, ox) = ((n / cols) * (th + pad), (n % cols) * (tw + pad));
            for y in 0..th {
                let src = &img.data[y * tw * 3..(y + 1) * tw * 3];
                let start = ((oy + y) * w + ox) * 3;
                out.data[start..start + tw * 3].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

/// Piecewise-linear lookup through ordered control points.
#[derive(Debug, Clone, PartialEq)]
pub struct Colormap {
    name: &'static str,
    points: Vec<(f32, [f32; 3])>,
}

impl Colormap {
    pub fn new(name: &'static str, points: Vec<(f32, [f32; 3])>) -> Result<Self> {
        if points.len() < 2 || points.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(Error::Config(format!(
                "colormap `{name}` needs at least two strictly increasing positions"
            )));
        }
        Ok(Self { name, points })
    }

    /// Diverging blue-white-red map on `[-1, 1]`.
    pub fn seismic() -> Self {
        Self {
            name: "seismic",
            points: vec![
                (-1.0, [0.0, 0.0, 0.5]),
                (-0.5, [0.0, 0.0, 1.0]),
                (0.0, [1.0, 1.0, 1.0]),
                (0.5, [1.0, 0.0, 0.0]),
                (1.0, [0.5, 0.0, 0.0]),
            ],
        }
    }

    /// Rainbow map on `[0, 1]`.
    pub fn jet() -> Self {
        Self {
            name: "jet",
            points: vec![
                (0.0, [0.0, 0.0, 0.5]),
                (0.25, [0.0, 1.0, 1.0]),
                (0.5, [0.0, 1.0, 0.0]),
                (0.75, [1.0, 1.0, 0.0]),
                (1.0, [1.0, 0.0, 0.0]),
            ],
        }
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn domain(&self) -> (f32, f32) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    /// Looks up `t`, clamped to the map's domain. NaN maps to the low end.
    pub fn lookup(&self, t: f32) -> [f32; 3] {
        let (lo, hi) = self.domain();
        let t = if t.is_nan() { lo } else { t.clamp(lo, hi) };
        let i = self.points.partition_point(|p| p.0 <= t).clamp(1, self.points.len() - 1);
        let ((p0, c0), (p1, c1)) = (self.points[i - 1], self.points[i]);
        let f = (t - p0) / (p1 - p0);
        std::array::from_fn(|k| (c0[k] + f * (c1[k] - c0[k])).clamp(0.0, 1.0))
    }
}

/// `(H, W, C)` of a `(1, H, W, C)` or `(H, W, C)` tensor.
fn dims(e: &Tensor) -> Result<(usize, usize, usize)> {
    match *e.shape() {
        [1, h, w, c] | [h, w, c] if c > 0 => Ok((h, w, c)),
        _ => shape_err(format!("expected an image-shaped tensor, got {:?}", e.shape())),
    }
}

/// Per-pixel channel reduction.
fn channel_reduce(e: &Tensor, f: impl Fn(f32) -> f32) -> Result<(usize, usize, Vec<f32>)> {
    let (h, w, c) = dims(e)?;
    let v = e
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|&v| f(v) as f64).sum::<f64>() as f32)
        .collect();
    Ok((h, w, v))
}

/// Divides by the maximum magnitude; an all-zero map stays zero.
fn normalize_max_abs(v: &mut [f32]) {
    let m = v.iter().fold(0f32, |m, x| m.max(x.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

fn through(cmap: &Colormap, h: usize, w: usize, v: &[f32]) -> RGBImage {
    RGBImage {
        height: h,
        width: w,
        data: v.iter().flat_map(|&t| cmap.lookup(t)).collect(),
    }
}

fn check_raw(h: usize, w: usize, x_raw: &RGBImage) -> Result<()> {
    if (x_raw.height, x_raw.width) != (h, w) {
        return shape_err(format!(
            "saliency is {h}x{w} but the image is {}x{}",
            x_raw.height, x_raw.width
        ));
    }
    Ok(())
}

/// Signed channel sum, normalized by its maximum magnitude, through the
/// diverging map.
pub fn to_heatmap(e: &Tensor) -> Result<RGBImage> {
    let (h, w, mut v) = channel_reduce(e, |x| x)?;
    normalize_max_abs(&mut v);
    Ok(through(&Colormap::seismic(), h, w, &v))
}

/// Absolute channel sum, normalized, as a black-to-white ramp.
pub fn to_graymap(e: &Tensor) -> Result<RGBImage> {
    let (h, w, mut v) = channel_reduce(e, f32::abs)?;
    normalize_max_abs(&mut v);
    Ok(RGBImage {
        height: h,
        width: w,
        data: v.iter().flat_map(|&t| [t.clamp(0.0, 1.0); 3]).collect(),
    })
}

/// The input image scaled per pixel by its normalized absolute saliency.
pub fn scale_input(e: &Tensor, x_raw: &RGBImage) -> Result<RGBImage> {
    let (h, w, mut v) = channel_reduce(e, f32::abs)?;
    check_raw(h, w, x_raw)?;
    normalize_max_abs(&mut v);
    let data = x_raw
        .data
        .chunks(3)
        .zip(&v)
        .flat_map(|(px, &s)| [px[0] * s, px[1] * s, px[2] * s])
        .collect();
    Ok(RGBImage { height: h, width: w, data })
}

/// Keeps the `top_k` segments with the largest maximum `|e|` and blacks
/// out the rest. Ties keep the lower segment id.
pub fn mask_input(e: &Tensor, seg: &Segmentation, x_raw: &RGBImage, top_k: usize) -> Result<RGBImage> {
    let (h, w, c) = dims(e)?;
    check_raw(h, w, x_raw)?;
    if (seg.height(), seg.width()) != (h, w) {
        return shape_err("segmentation does not match the saliency size");
    }
    let mut score = vec![0f32; seg.nr_segments()];
    for (p, px) in e.data().chunks(c).enumerate() {
        let s = &mut score[seg.ids()[p]];
        *s = px.iter().fold(*s, |m, v| m.max(v.abs()));
    }
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut keep = vec![false; score.len()];
    order.iter().take(top_k).for_each(|&s| keep[s] = true);
    let data = x_raw
        .data
        .chunks(3)
        .zip(seg.ids())
        .flat_map(|(px, &id)| if keep[id] { [px[0], px[1], px[2]] } else { [0.0; 3] })
        .collect();
    Ok(RGBImage { height: h, width: w, data })
}

/// Normalized 1-D Gaussian taps over `-radius..=radius`, `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(v: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * v[y * w + clamp(x as i64 + j as i64 - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[clamp(y as i64 + j as i64 - r, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    out
}

/// Blurred absolute saliency, min-max normalized, through the rainbow map
/// and blended over the input with the normalized intensity as weight.
pub fn blend_overlay(e: &Tensor, x_raw: &RGBImage) -> Result<RGBImage> {
    let (h, w, v) = channel_reduce(e, f32::abs)?;
    check_raw(h, w, x_raw)?;
    let b = gaussian_blur(&v, h, w, BLUR_SIGMA);
    let (lo, hi) = b.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x)));
    let range = hi - lo;
    let jet = Colormap::jet();
    let data = x_raw
        .data
        .chunks(3)
        .zip(&b)
        .flat_map(|(px, &t)| {
            let n = if range > 0.0 { ((t - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
            let c = jet.lookup(n);
            std::array::from_fn::<f32, 3, _>(|k| ((1.0 - n) * px[k] + n * c[k]).clamp(0.0, 1.0))
        })
        .collect();
    Ok(RGBImage { height: h, width: w, data })
}

/// `e / max|e| + 0.5` clipped to `[0, 1]`, channels kept; one channel is
/// replicated to grey.
pub fn project(e: &Tensor) -> Result<RGBImage> {
    let (h, w, c) = dims(e)?;
    if c != 1 && c != 3 {
        return shape_err(format!("cannot project {c} channels to RGB"));
    }
    let mut v = e.data().to_vec();
    normalize_max_abs(&mut v);
    let f = |x: f32| (x + 0.5).clamp(0.0, 1.0);
    let data = v
        .chunks(c)
        .flat_map(|px| if c == 3 { [f(px[0]), f(px[1]), f(px[2])] } else { [f(px[0]); 3] })
        .collect();
    Ok(RGBImage { height: h, width: w, data })
}

/// Writes an 8-bit RGB PNG, encoding `v` as `round(255 v)`.
pub fn write_png(img: &RGBImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        })
}

/// Reads a PNG (or other supported format) as RGB in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<RGBImage> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RGBImage {
        height: h as usize,
        width: w as usize,
        data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    })
}
