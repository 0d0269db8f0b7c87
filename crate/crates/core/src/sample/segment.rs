//! Image partitions used as interpretable features: a regular grid, or
//! k-means over colour and position.

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

use super::image_dims;

/// Per-pixel segment ids, contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    height: usize,
    width: usize,
    ids: Vec<usize>,
    nr_segments: usize,
}

impl Segmentation {
    /// Validates that ids cover `0..n` with every id used.
    pub fn new(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "{} ids for a {height}x{width} image",
                ids.len()
            )));
        }
        let n = ids.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n];
        ids.iter().for_each(|&i| seen[i] = true);
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("segment ids must be contiguous from 0".into()));
        }
        Ok(Self {
            height,
            width,
            ids,
            nr_segments: n,
        })
    }

    /// Renumbers ids by first appearance in raster order.
    pub fn relabelled(height: usize, width: usize, raw: &[usize]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let ids = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        Self::new(height, width, ids)
    }

    /// `ceil(h/cell) x ceil(w/cell)` rectangles.
    pub fn grid(height: usize, width: usize, cell: usize) -> Result<Self> {
        if cell == 0 {
            return Err(Error::Config("grid cell size must be >= 1".into()));
        }
        let cols = width.div_ceil(cell);
        let ids = (0..height * width)
            .map(|p| (p / width / cell) * cols + (p % width) / cell)
            .collect();
        Self::new(height, width, ids)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn nr_segments(&self) -> usize {
        self.nr_segments
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, y: usize, x: usize) -> usize {
        self.ids[y * self.width + x]
    }

    /// Segment sizes in pixels.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.nr_segments];
        self.ids.iter().for_each(|&i| s[i] += 1);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentConfig {
    Grid {
        cell: usize,
    },
    /// k-means over (L, a, b, lambda*x, lambda*y) with
    /// `lambda = compactness / sqrt(H*W/k)`.
    Slic {
        k: usize,
        compactness: f64,
        iterations: usize,
        seed: u64,
    },
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig::Grid { cell: 4 }
    }
}

/// Partitions a `(1, H, W, C)` image whose values span `range`.
pub fn segment(image: &Tensor, range: (f32, f32), cfg: &SegmentConfig) -> Result<Segmentation> {
    let (h, w, c) = image_dims(image)?;
    match *cfg {
        SegmentConfig::Grid { cell } => Segmentation::grid(h, w, cell),
        SegmentConfig::Slic {
            k,
            compactness,
            iterations,
            seed,
        } => {
            if k == 0 {
                return Err(Error::Config("slic needs k >= 1".into()));
            }
            let colour = colour_features(image.data(), c, range);
            slic(h, w, &colour, k.min(h * w), compactness, iterations, seed)
        }
    }
}

/// CIELAB for three channels, otherwise the channels scaled to 0..100.
fn colour_features(data: &[f32], c: usize, range: (f32, f32)) -> Vec<[f64; 3]> {
    let span = (range.1 - range.0).max(f32::EPSILON) as f64;
    let unit = |v: f32| ((v - range.0) as f64 / span).clamp(0.0, 1.0);
    data.chunks(c)
        .map(|px| {
            if c == 3 {
                srgb_to_lab([unit(px[0]), unit(px[1]), unit(px[2])])
            } else {
                let mut f = [0.0; 3];
                for (o, &v) in f.iter_mut().zip(px) {
                    *o = 100.0 * unit(v);
                }
                f
            }
        })
        .collect()
}

fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| {
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn slic(
    h: usize,
    w: usize,
    colour: &[[f64; 3]],
    k: usize,
    compactness: f64,
    iterations: usize,
    seed: u64,
) -> Result<Segmentation> {
    let step = ((h * w) as f64 / k as f64).sqrt();
    let lambda = compactness / step;
    let feature = |p: usize| -> [f64; 5] {
        let c = colour[p];
        [c[0], c[1], c[2], lambda * (p / w) as f64, lambda * (p % w) as f64]
    };

    // grid cells with at least k entries, k of them chosen by a seeded shuffle
    let rows = (((k * h) as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let cols = k.div_ceil(rows).min(w);
    let rows = k.div_ceil(cols).min(h);
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    let mut rng = XorShift64Star::new(seed);
    for i in 0..k.min(cells.len()) {
        let j = i + rng.below(cells.len() - i);
        cells.swap(i, j);
    }
    cells.truncate(k);
    cells.sort_unstable();
    let mut centres: Vec<[f64; 5]> = cells
        .iter()
        .map(|&cell| {
            let (r, c) = (cell / cols, cell % cols);
            // colour from the nearest pixel, position at the exact cell centre
            let yf = (2 * r + 1) as f64 * h as f64 / (2 * rows) as f64 - 0.5;
            let xf = (2 * c + 1) as f64 * w as f64 / (2 * cols) as f64 - 0.5;
            let p = (yf.round() as usize).min(h - 1) * w + (xf.round() as usize).min(w - 1);
            let mut f = feature(p);
            f[3] = lambda * yf;
            f[4] = lambda * xf;
            f
        })
        .collect();

    let mut labels = vec![0usize; h * w];
    for it in 0..=iterations {
        for (p, l) in labels.iter_mut().enumerate() {
            let f = feature(p);
            let mut best = (f64::INFINITY, 0);
            for (ci, c) in centres.iter().enumerate() {
                let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, ci);
                }
            }
            *l = best.1;
        }
        if it == iterations {
            break;
        }
        let mut sums = vec![[0.0; 5]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for (p, &l) in labels.iter().enumerate() {
            let f = feature(p);
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
            counts[l] += 1;
        }
        for ((c, s), &n) in centres.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.map(|v| v / n as f64);
            }
        }
    }
    Segmentation::relabelled(h, w, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_segments() {
        let s = Segmentation::grid(4, 4, 2).unwrap();
        assert_eq!(s.nr_segments(), 4);
        assert_eq!(s.sizes(), vec![4; 4]);
        assert_eq!(s.id(3, 0), 2);
        let odd = Segmentation::grid(5, 3, 2).unwrap();
        assert_eq!(odd.nr_segments(), 6);
    }

    #[test]
    fn rejects_gaps() {
        assert!(Segmentation::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn uniform_slic_is_spatial() {
        let img = Tensor::full(&[1, 16, 16, 3], 0.3);
        let cfg = SegmentConfig::Slic {
            k: 4,
            compactness: 10.0,
            iterations: 10,
            seed: 0,
        };
        let s = segment(&img, (-1.0, 1.0), &cfg).unwrap();
        assert_eq!(s.nr_segments(), 4);
        // compact: each segment's bounding box is a quadrant
        for id in 0..4 {
            let pix: Vec<(usize, usize)> = (0..256).filter(|p| s.ids()[*p] == id).map(|p| (p / 16, p % 16)).collect();
            let (ys, xs): (Vec<_>, Vec<_>) = pix.iter().copied().unzip();
            assert!(ys.iter().max().unwrap() - ys.iter().min().unwrap() < 8);
            assert!(xs.iter().max().unwrap() - xs.iter().min().unwrap() < 8);
        }
    }

    #[test]
    fn slic_follows_colour() {
        // left half dark, right half bright, low compactness
        let data: Vec<f32> = (0..64).map(|p| if p % 8 < 4 { -1.0 } else { 1.0 }).collect();
        let img = Tensor::new(&[1, 8, 8, 1], data).unwrap();
        let cfg = SegmentConfig::Slic {
            k: 2,
            compactness: 0.1,
            iterations: 5,
            seed: 3,
        };
        let s = segment(&img, (-1.0, 1.0), &cfg).unwrap();
        assert_eq!(s.nr_segments(), 2);
        for y in 0..8 {
            assert_eq!(s.id(y, 0), s.id(0, 0));
            assert_eq!(s.id(y, 7), s.id(0, 7));
            assert_ne!(s.id(y, 0), s.id(y, 7));
        }
    }

    #[test]
    fn ids_contiguous_and_nonempty() {
        let img = crate::tensor::Tensor::new(
            &[1, 9, 7, 1],
            (0..63).map(|i| ((i * 37) % 11) as f32 / 11.0).collect(),
        )
        .unwrap();
        for k in 1..8 {
            let cfg = SegmentConfig::Slic {
                k,
                compactness: 5.0,
                iterations: 4,
                seed: k as u64,
            };
            let s = segment(&img, (0.0, 1.0), &cfg).unwrap();
            assert!(s.nr_segments() >= 1 && s.nr_segments() <= k);
            assert!(s.sizes().iter().all(|&n| n > 0));
        }
    }
}
