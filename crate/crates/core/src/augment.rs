//! Training-time image augmentations and ordered mixtures of them.
//!
//! Every random choice comes from a ChaCha8 stream seeded by the caller, so
//! `apply(spec, image, seed)` is a pure function. Geometric operations sample
//! bilinearly and fill uncovered pixels with black.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{clamp_u8, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    ColorJitter {
        brightness: [f64; 2],
        contrast: [f64; 2],
        saturation: [f64; 2],
        hue: [f64; 2],
    },
    /// 3x3 Gaussian kernel.
    GaussianBlur { sigma: [f64; 2] },
    /// Per-channel histogram equalisation.
    Equalize,
    Contrast { factor: [f64; 2] },
    Sharpness { factor: [f64; 2] },
    Mirroring,
    /// Maximum shift per axis as a fraction of width / height.
    Translation { max_fraction: [f64; 2] },
    Perspective { distortion: f64 },
    Rotation { degrees: [f64; 2] },
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::ColorJitter { .. } => "color_jitter",
            AugmentKind::GaussianBlur { .. } => "gaussian_blur",
            AugmentKind::Equalize => "equalize",
            AugmentKind::Contrast { .. } => "contrast",
            AugmentKind::Sharpness { .. } => "sharpness",
            AugmentKind::Mirroring => "mirroring",
            AugmentKind::Translation { .. } => "translation",
            AugmentKind::Perspective { .. } => "perspective",
            AugmentKind::Rotation { .. } => "rotation",
        }
    }

    /// Default parameters for a named augmentation.
    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "color_jitter" => AugmentKind::ColorJitter {
                brightness: [0.75, 1.25],
                contrast: [0.75, 1.25],
                saturation: [0.75, 1.25],
                hue: [-0.05, 0.05],
            },
            "gaussian_blur" => AugmentKind::GaussianBlur { sigma: [0.1, 2.0] },
            "equalize" => AugmentKind::Equalize,
            "contrast" => AugmentKind::Contrast { factor: [0.5, 1.5] },
            "sharpness" => AugmentKind::Sharpness { factor: [0.5, 1.5] },
            "mirroring" => AugmentKind::Mirroring,
            "translation" => AugmentKind::Translation { max_fraction: [0.1, 0.1] },
            "perspective" => AugmentKind::Perspective { distortion: 0.2 },
            "rotation" => AugmentKind::Rotation { degrees: [-15.0, 15.0] },
            _ => return None,
        })
    }
}

/// One augmentation with the probability of applying it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub probability: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentKind, probability: f64) -> Self {
        Self { kind, probability }
    }

    /// Default parameters, applied with probability 0.5.
    pub fn default_for(name: &str) -> Option<Self> {
        AugmentKind::default_for(name).map(|kind| Self::new(kind, 0.5))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("{}: {what}", self.kind.name())));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability must lie in [0, 1]");
        }
        let range_ok = |r: &[f64; 2], lo: f64, hi: f64| r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi;
        match &self.kind {
            AugmentKind::ColorJitter { brightness, contrast, saturation, hue } => {
                if ![brightness, contrast, saturation].iter().all(|r| range_ok(r, 0.0, f64::MAX)) {
                    return bad("jitter factors must be ordered and non-negative");
                }
                if !range_ok(hue, -0.5, 0.5) {
                    return bad("hue shift must be ordered within [-0.5, 0.5]");
                }
            }
            AugmentKind::GaussianBlur { sigma } => {
                if !range_ok(sigma, f64::MIN_POSITIVE, f64::MAX) {
                    return bad("sigma range must be ordered and positive");
                }
            }
            AugmentKind::Contrast { factor } | AugmentKind::Sharpness { factor } => {
                if !range_ok(factor, 0.0, f64::MAX) {
                    return bad("factor range must be ordered and non-negative");
                }
            }
            AugmentKind::Translation { max_fraction } => {
                if !max_fraction.iter().all(|f| (0.0..=1.0).contains(f)) {
                    return bad("translation fractions must lie in [0, 1]");
                }
            }
            AugmentKind::Perspective { distortion } => {
                if !(0.0..=1.0).contains(distortion) {
                    return bad("distortion must lie in [0, 1]");
                }
            }
            AugmentKind::Rotation { degrees } => {
                if !range_ok(degrees, -180.0, 180.0) {
                    return bad("angle range must be ordered within [-180, 180]");
                }
            }
            AugmentKind::Equalize | AugmentKind::Mirroring => {}
        }
        Ok(())
    }
}

/// Ordered list of augmentations; empty means no augmentation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationMix {
    pub specs: Vec<AugmentationSpec>,
}

impl AugmentationMix {
    pub fn none() -> Self {
        Self::default()
    }

    /// Colour jitter, equalise, sharpness, translation, perspective and rotation.
    pub fn mix_best() -> Self {
        let names = ["color_jitter", "equalize", "sharpness", "translation", "perspective", "rotation"];
        Self {
            specs: names
                .iter()
                .map(|n| AugmentationSpec::default_for(n).expect("known augmentation"))
                .collect(),
        }
    }

    /// Single-augmentation mix with default parameters.
    pub fn single(name: &str) -> Option<Self> {
        AugmentationSpec::default_for(name).map(|s| Self { specs: vec![s] })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "mix-best" => Some(Self::mix_best()),
            other => Self::single(other),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.specs.iter().try_for_each(AugmentationSpec::validate)
    }
}

/// SplitMix64 finaliser; used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with a path of indices into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed for one training sample in one epoch; independent of worker count.
pub fn sample_seed(base: u64, epoch: u64, index: u64) -> u64 {
    derive_seed(base, &[epoch, index])
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.gen::<f64>()
}

/// Applies `spec` with its probability using randomness drawn from `seed`.
pub fn apply(spec: &AugmentationSpec, image: &RgbImage, seed: u64) -> Result<RgbImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen::<f64>() >= spec.probability {
        return Ok(image.clone());
    }
    Ok(match &spec.kind {
        AugmentKind::ColorJitter { brightness, contrast, saturation, hue } => {
            let b = uniform(&mut rng, *brightness);
            let c = uniform(&mut rng, *contrast);
            let s = uniform(&mut rng, *saturation);
            let h = uniform(&mut rng, *hue);
            adjust_hue(&adjust_saturation(&adjust_contrast(&adjust_brightness(image, b), c), s), h)
        }
        AugmentKind::GaussianBlur { sigma } => gaussian_blur3(image, uniform(&mut rng, *sigma)),
        AugmentKind::Equalize => equalize(image),
        AugmentKind::Contrast { factor } => adjust_contrast(image, uniform(&mut rng, *factor)),
        AugmentKind::Sharpness { factor } => adjust_sharpness(image, uniform(&mut rng, *factor)),
        AugmentKind::Mirroring => image.flip_horizontal(),
        AugmentKind::Translation { max_fraction } => {
            let mx = max_fraction[0] * image.width() as f64;
            let my = max_fraction[1] * image.height() as f64;
            let dx = uniform(&mut rng, [-mx, mx]).round() as isize;
            let dy = uniform(&mut rng, [-my, my]).round() as isize;
            translate(image, dx, dy)
        }
        AugmentKind::Perspective { distortion } => {
            let (start, end) = perspective_points(&mut rng, image.width(), image.height(), *distortion);
            perspective(image, start, end)
        }
        AugmentKind::Rotation { degrees } => rotate(image, uniform(&mut rng, *degrees)),
    })
}

/// Applies every spec in order; stage `i` draws from `derive_seed(seed, [i])`.
pub fn apply_mix(mix: &AugmentationMix, image: &RgbImage, seed: u64) -> Result<RgbImage> {
    mix.specs.iter().enumerate().try_fold(image.clone(), |img, (i, spec)| {
        apply(spec, &img, derive_seed(seed, &[i as u64]))
    })
}

fn map_pixels(image: &RgbImage, f: impl Fn([f64; 3]) -> [f64; 3]) -> RgbImage {
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| {
            let out = f([p[0] as f64, p[1] as f64, p[2] as f64]);
            [clamp_u8(out[0]), clamp_u8(out[1]), clamp_u8(out[2])]
        })
        .collect();
    RgbImage::new(image.width(), image.height(), pixels).expect("same dimensions")
}

fn gray_f(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn adjust_brightness(image: &RgbImage, factor: f64) -> RgbImage {
    map_pixels(image, |p| p.map(|v| v * factor))
}

/// Blends with the mean gray level of the image.
pub fn adjust_contrast(image: &RgbImage, factor: f64) -> RgbImage {
    let n = (image.width() * image.height()) as f64;
    let mean = image
        .pixels()
        .chunks_exact(3)
        .map(|p| gray_f([p[0] as f64, p[1] as f64, p[2] as f64]))
        .sum::<f64>()
        / n;
    map_pixels(image, |p| p.map(|v| factor * v + (1.0 - factor) * mean))
}

/// Blends each pixel with its own gray level.
pub fn adjust_saturation(image: &RgbImage, factor: f64) -> RgbImage {
    map_pixels(image, |p| {
        let g = gray_f(p);
        p.map(|v| factor * v + (1.0 - factor) * g)
    })
}

/// Rotates hue by `shift` turns (in [-0.5, 0.5]).
pub fn adjust_hue(image: &RgbImage, shift: f64) -> RgbImage {
    if shift == 0.0 {
        return image.clone();
    }
    map_pixels(image, |p| {
        let (h, s, v) = rgb_to_hsv(p.map(|c| c / 255.0));
        let h = (h + shift).rem_euclid(1.0);
        hsv_to_rgb(h, s, v).map(|c| c * 255.0)
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Separable 3x3 Gaussian blur with reflect padding.
pub fn gaussian_blur3(image: &RgbImage, sigma: f64) -> RgbImage {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let (w, h) = (image.width(), image.height());
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let src: Vec<f64> = image.pixels().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = (0..3)
                    .map(|j| k[j] * src[(y * w + reflect(x as isize + j as isize - 1, w)) * 3 + c])
                    .sum();
            }
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = (0..3)
                    .map(|j| k[j] * tmp[(reflect(y as isize + j as isize - 1, h) * w + x) * 3 + c])
                    .sum();
                out.push(clamp_u8(v));
            }
        }
    }
    RgbImage::new(w, h, out).expect("same dimensions")
}

/// Per-channel histogram equalisation:
/// `v -> round((cdf(v) - cdf_min) / (N - cdf_min) * 255)`. Single-level channels are unchanged.
pub fn equalize(image: &RgbImage) -> RgbImage {
    let n = image.width() * image.height();
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for p in image.pixels().chunks_exact(3) {
            hist[p[c] as usize] += 1;
        }
        let cdf_min = *hist.iter().find(|&&h| h > 0).expect("nonempty image");
        let mut cum = 0usize;
        for v in 0..256 {
            cum += hist[v];
            lut[v] = if n == cdf_min {
                v as u8
            } else {
                clamp_u8((cum.saturating_sub(cdf_min)) as f64 / (n - cdf_min) as f64 * 255.0)
            };
        }
    }
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .flat_map(|p| [luts[0][p[0] as usize], luts[1][p[1] as usize], luts[2][p[2] as usize]])
        .collect();
    RgbImage::new(image.width(), image.height(), pixels).expect("same dimensions")
}

/// Blends with a smoothed copy (kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13`, border
/// pixels left as-is). Factor 1 is the identity, 0 the smoothed image.
pub fn adjust_sharpness(image: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut smooth = image.clone();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = [0.0; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let p = image.get(x + dx - 1, y + dy - 1);
                        let wgt = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        for c in 0..3 {
                            acc[c] += wgt * p[c] as f64;
                        }
                    }
                }
                smooth.put(x, y, acc.map(|v| clamp_u8(v / 13.0)));
            }
        }
    }
    let pixels = image
        .pixels()
        .iter()
        .zip(smooth.pixels())
        .map(|(&o, &s)| clamp_u8(factor * o as f64 + (1.0 - factor) * s as f64))
        .collect();
    RgbImage::new(w, h, pixels).expect("same dimensions")
}

/// Integer shift; pixel `(x, y)` moves to `(x + dx, y + dy)` and vacated pixels are black.
pub fn translate(image: &RgbImage, dx: isize, dy: isize) -> RgbImage {
    let (w, h) = (image.width() as isize, image.height() as isize);
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let (sx, sy) = (x as isize - dx, y as isize - dy);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            [0, 0, 0]
        } else {
            image.get(sx as usize, sy as usize)
        }
    })
}

fn sample_bilinear(image: &RgbImage, sx: f64, sy: f64) -> [u8; 3] {
    const EPS: f64 = 1e-9;
    let (w, h) = (image.width() as f64, image.height() as f64);
    if !(sx >= -EPS && sy >= -EPS && sx <= w - 1.0 + EPS && sy <= h - 1.0 + EPS) {
        return [0, 0, 0];
    }
    let sx = sx.clamp(0.0, w - 1.0);
    let sy = sy.clamp(0.0, h - 1.0);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let (a, b, c, d) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
    std::array::from_fn(|ch| {
        let top = a[ch] as f64 + (b[ch] as f64 - a[ch] as f64) * fx;
        let bot = c[ch] as f64 + (d[ch] as f64 - c[ch] as f64) * fx;
        clamp_u8(top + (bot - top) * fy)
    })
}

/// Rotation about the image centre by `degrees` (counter-clockwise on screen).
pub fn rotate(image: &RgbImage, degrees: f64) -> RgbImage {
    let (cx, cy) = ((image.width() as f64 - 1.0) / 2.0, (image.height() as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        sample_bilinear(image, c * dx - s * dy + cx, s * dx + c * dy + cy)
    })
}

type Quad = [(f64, f64); 4];

fn perspective_points(rng: &mut ChaCha8Rng, w: usize, h: usize, d: f64) -> (Quad, Quad) {
    let (hw, hh) = ((w / 2) as f64, (h / 2) as f64);
    let dx = (d * hw) as i64;
    let dy = (d * hh) as i64;
    let (wi, hi) = (w as i64, h as i64);
    let mut r = |lo: i64, hi: i64| rng.gen_range(lo..hi) as f64;
    let tl = (r(0, dx + 1), r(0, dy + 1));
    let tr = (r(wi - dx - 1, wi), r(0, dy + 1));
    let br = (r(wi - dx - 1, wi), r(hi - dy - 1, hi));
    let bl = (r(0, dx + 1), r(hi - dy - 1, hi));
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    ([(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)], [tl, tr, br, bl])
}

/// Projective warp that moves the `start` corners to the `end` corners.
pub fn perspective(image: &RgbImage, start: Quad, end: Quad) -> RgbImage {
    // Homography from output (end) coordinates back to input (start) coordinates.
    let Some(hm) = homography(&end, &start) else {
        return image.clone();
    };
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let den = hm[6] * xf + hm[7] * yf + 1.0;
        let sx = (hm[0] * xf + hm[1] * yf + hm[2]) / den;
        let sy = (hm[3] * xf + hm[4] * yf + hm[5]) / den;
        sample_bilinear(image, sx, sy)
    })
}

/// Coefficients `[a, b, c, d, e, f, g, h]` of the homography taking `from[i]` to `to[i]`.
fn homography(from: &Quad, to: &Quad) -> Option<[f64; 8]> {
    let mut m = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..9 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some(std::array::from_fn(|i| m[i][8] / m[i][i]))
}
