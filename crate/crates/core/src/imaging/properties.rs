use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::to_grayscale;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::raster::{GrayImage, Mask, RgbImage};
use crate::regions;
use crate::stats;

/// GLCM quantisation depth.
const GLCM_LEVELS: usize = 32;
/// Floor applied to the minimum intensity before dividing.
const INTENSITY_FLOOR: f64 = 1.0;
/// Percentile that defines the bright region when no mask is supplied.
const BRIGHT_REGION_QUANTILE: f64 = 0.9;

/// Names of the scalar properties in reporting order.
pub const SCALAR_PROPERTIES: [&str; 11] = [
    "contrast",
    "brightness",
    "redness",
    "energy",
    "entropy",
    "sharpness",
    "homogeneity",
    "fourier_energy",
    "compactness",
    "lbp",
    "intensity_ratio",
];

/// The twelve image properties of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyVector {
    pub contrast: f64,
    pub brightness: f64,
    pub redness: f64,
    pub energy: f64,
    pub entropy: f64,
    pub sharpness: f64,
    pub homogeneity: f64,
    pub fourier_energy: f64,
    pub compactness: f64,
    pub lbp: f64,
    pub intensity_ratio: f64,
    pub image_size: (usize, usize),
}

impl PropertyVector {
    pub fn scalars(&self) -> [f64; 11] {
        [
            self.contrast,
            self.brightness,
            self.redness,
            self.energy,
            self.entropy,
            self.sharpness,
            self.homogeneity,
            self.fourier_energy,
            self.compactness,
            self.lbp,
            self.intensity_ratio,
        ]
    }

    /// Pixel area, `width * height`.
    pub fn area(&self) -> f64 {
        (self.image_size.0 * self.image_size.1) as f64
    }

    /// Larger of width and height.
    pub fn max_dimension(&self) -> f64 {
        self.image_size.0.max(self.image_size.1) as f64
    }

    /// Looks a property up by name; `image_size` resolves to the area.
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "image_size" || name == "image_area" {
            return Some(self.area());
        }
        SCALAR_PROPERTIES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.scalars()[i])
    }

    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = SCALAR_PROPERTIES.to_vec();
        cols.extend(["image_width", "image_height"]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.scalars().iter().map(|v| format!("{v}")).collect();
        cols.push(self.image_size.0.to_string());
        cols.push(self.image_size.1.to_string());
        cols.join(",")
    }
}

/// Computes all properties of `image`. Compactness uses `region` when given,
/// otherwise the largest 8-connected component at or above the 90th-percentile
/// gray level.
pub fn compute_properties(image: &RgbImage, region: Option<&Mask>) -> Result<PropertyVector> {
    if let Some(m) = region {
        if m.width != image.width() || m.height != image.height() {
            return Err(Error::arg(format!(
                "mask is {}x{} but image is {}x{}",
                m.width,
                m.height,
                image.width(),
                image.height()
            )));
        }
        if m.count() == 0 {
            return Err(Error::arg("region mask is empty"));
        }
    }
    let gray = to_grayscale(image);
    let values = &gray.values;

    let lap = laplacian(&gray);
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let redness = stats::mean(&image.pixels().chunks_exact(3).map(|p| p[0] as f64).collect::<Vec<_>>());

    let compactness = match region {
        Some(m) => {
            let p = regions::perimeter_of(m.width, m.height, &m.bits) as f64;
            4.0 * std::f64::consts::PI * m.count() as f64 / (p * p)
        }
        None => bright_region_compactness(&gray),
    };

    Ok(PropertyVector {
        contrast: stats::std_dev(values),
        brightness: stats::mean(values),
        redness,
        energy: lap.iter().map(|v| v.abs()).sum::<f64>() / lap.len() as f64,
        entropy: shannon_entropy(&gray),
        sharpness: stats::variance(&lap),
        homogeneity: glcm_homogeneity(&gray),
        fourier_energy: fourier_energy(&gray),
        compactness,
        lbp: lbp_mean(&gray),
        intensity_ratio: max / min.max(INTENSITY_FLOOR),
        image_size: (image.width(), image.height()),
    })
}

/// Properties for a batch of unmasked images.
pub fn compute_batch(exec: Exec, images: &[RgbImage]) -> Vec<PropertyVector> {
    par::map(exec, images, |img| {
        compute_properties(img, None).expect("unmasked property computation is infallible")
    })
}

fn bright_region_compactness(gray: &GrayImage) -> f64 {
    let threshold = stats::quantile(&gray.values, BRIGHT_REGION_QUANTILE);
    let bright: Vec<bool> = gray.values.iter().map(|&v| v >= threshold).collect();
    let comps = regions::components(gray.width, gray.height, &bright);
    let largest = comps
        .iter()
        .max_by_key(|r| (r.area(), std::cmp::Reverse(r.pixels[0])))
        .expect("the maximum pixel always passes its own percentile");
    largest.compactness(gray.width, gray.height)
}

/// 3x3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate padding.
pub fn laplacian(gray: &GrayImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(gray.values.len());
    for y in 0..gray.height as isize {
        for x in 0..gray.width as isize {
            let c = gray.at_clamped(x, y);
            out.push(
                gray.at_clamped(x - 1, y) + gray.at_clamped(x + 1, y) + gray.at_clamped(x, y - 1)
                    + gray.at_clamped(x, y + 1)
                    - 4.0 * c,
            );
        }
    }
    out
}

/// Shannon entropy (bits) of the 256-bin histogram of rounded gray levels.
pub fn shannon_entropy(gray: &GrayImage) -> f64 {
    let mut hist = [0usize; 256];
    for &v in &gray.values {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let n = gray.values.len() as f64;
    0.0 - hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Homogeneity of the symmetric, normalised co-occurrence matrix for the
/// right-neighbour offset after quantising to 32 levels. An image narrower
/// than two pixels has no pairs and is treated as perfectly homogeneous.
pub fn glcm_homogeneity(gray: &GrayImage) -> f64 {
    let q = |v: f64| ((v / 256.0 * GLCM_LEVELS as f64).floor() as usize).min(GLCM_LEVELS - 1);
    let mut glcm = vec![0usize; GLCM_LEVELS * GLCM_LEVELS];
    let mut pairs = 0usize;
    for y in 0..gray.height {
        for x in 0..gray.width.saturating_sub(1) {
            let a = q(gray.at(x, y));
            let b = q(gray.at(x + 1, y));
            glcm[a * GLCM_LEVELS + b] += 1;
            glcm[b * GLCM_LEVELS + a] += 1;
            pairs += 2;
        }
    }
    if pairs == 0 {
        return 1.0;
    }
    let total = pairs as f64;
    let mut h = 0.0;
    for i in 0..GLCM_LEVELS {
        for j in 0..GLCM_LEVELS {
            let c = glcm[i * GLCM_LEVELS + j];
            if c > 0 {
                h += c as f64 / total / (1.0 + i.abs_diff(j) as f64);
            }
        }
    }
    h
}

/// Sum of DFT magnitudes. The centring shift permutes coefficients and leaves the sum unchanged.
pub fn fourier_energy(gray: &GrayImage) -> f64 {
    let (w, h) = (gray.width, gray.height);
    let mut planner = FftPlanner::<f64>::new();
    let mut data: Vec<Complex<f64>> = gray.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    data.iter().map(|c| c.norm()).sum()
}

const LBP_RING: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

/// Mean rotation-invariant uniform LBP code (radius 1, 8 neighbours) over
/// interior pixels: uniform patterns map to their count of set bits (0..=8),
/// all others to 9. Images without interior pixels yield 0.
pub fn lbp_mean(gray: &GrayImage) -> f64 {
    if gray.width < 3 || gray.height < 3 {
        return 0.0;
    }
    let mut sum = 0usize;
    let mut n = 0usize;
    for y in 1..gray.height - 1 {
        for x in 1..gray.width - 1 {
            let c = gray.at(x, y);
            let bits: [bool; 8] = std::array::from_fn(|k| {
                let (dx, dy) = LBP_RING[k];
                gray.at((x as isize + dx) as usize, (y as isize + dy) as usize) >= c
            });
            let transitions = (0..8).filter(|&k| bits[k] != bits[(k + 1) % 8]).count();
            sum += if transitions <= 2 {
                bits.iter().filter(|&&b| b).count()
            } else {
                9
            };
            n += 1;
        }
    }
    sum as f64 / n as f64
}
