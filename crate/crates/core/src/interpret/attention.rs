//! Occlusion-sensitivity attention maps and their radial analysis.

use serde::{Deserialize, Serialize};

use crate::classifier::{decide, model_input, Model, Providers, INPUT_SIZE};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::{ks_two_sample, KsResult};
use crate::par::{self, Exec};
use crate::raster::{GrayImage, RgbImage};
use crate::regions;
use crate::stats;

/// Value every pixel takes when a map carries no signal at all.
pub const DEGENERATE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    Occlusion,
    External,
}

/// Non-negative heatmap over the model input, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source: MapSource,
}

impl AttentionMap {
    /// Validates shape, finiteness and non-negativity. All-zero maps are
    /// accepted here; [`radial_focus`] rejects them.
    pub fn new(width: usize, height: usize, values: Vec<f64>, source: MapSource) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::arg("attention map buffer does not match its dimensions"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("attention values must be finite and non-negative"));
        }
        Ok(Self {
            width,
            height,
            values,
            source,
        })
    }

    /// Accepts an externally computed map (for example a Grad-CAM export).
    pub fn external(map: &GrayImage) -> Result<Self> {
        Self::new(map.width, map.height, map.values.clone(), MapSource::External)
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// First maximum in row-major order, i.e. smallest `(y, x)` among ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Grayscale rendering scaled so the maximum is white.
    pub fn to_image(&self) -> RgbImage {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let v = (self.at(x, y) * scale).round().clamp(0.0, 255.0) as u8;
            [v, v, v]
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    /// Gray level written into the occluded patch.
    pub fill: u8,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            stride: 8,
            fill: 128,
        }
    }
}

/// Number of patch positions along a side: `ceil((size - patch) / stride) + 1`.
/// The last position is shifted back so the patch stays inside the image.
pub fn occlusion_cells(size: usize, patch: usize, stride: usize) -> usize {
    (size - patch).div_ceil(stride) + 1
}

fn cell_start(k: usize, size: usize, patch: usize, stride: usize) -> usize {
    (k * stride).min(size - patch)
}

/// Probability drop of the originally winning class when each patch of the
/// model input is replaced by mid-gray, bilinearly upsampled from the patch
/// centres to the full input. A map with no sensitivity anywhere becomes the
/// uniform [`DEGENERATE_EPSILON`] map.
pub fn occlusion_map(
    model: &Model,
    providers: &Providers,
    crop: &RgbImage,
    cfg: &OcclusionConfig,
    exec: Exec,
) -> Result<AttentionMap> {
    if cfg.patch == 0 || cfg.stride == 0 || cfg.patch > INPUT_SIZE {
        return Err(Error::arg(format!("invalid occlusion geometry {cfg:?}")));
    }
    let input = model_input(crop);
    let base = model.predict(providers, &input)?;
    let winner = decide(base).class_index().expect("decide yields a class");
    let n = occlusion_cells(INPUT_SIZE, cfg.patch, cfg.stride);
    let cells: Vec<(usize, usize)> = (0..n * n).map(|i| (i % n, i / n)).collect();
    let drops = par::try_map(exec, &cells, |&(u, v)| {
        let x0 = cell_start(u, INPUT_SIZE, cfg.patch, cfg.stride);
        let y0 = cell_start(v, INPUT_SIZE, cfg.patch, cfg.stride);
        let mut occluded = input.clone();
        for y in y0..y0 + cfg.patch {
            for x in x0..x0 + cfg.patch {
                occluded.put(x, y, [cfg.fill; 3]);
            }
        }
        let p = model.predict(providers, &occluded)?;
        Ok::<_, Error>((base[winner] - p[winner]).max(0.0))
    })?;
    let centers: Vec<f64> = (0..n)
        .map(|k| cell_start(k, INPUT_SIZE, cfg.patch, cfg.stride) as f64 + (cfg.patch as f64 - 1.0) / 2.0)
        .collect();
    let mut values = upsample(&drops, n, &centers, INPUT_SIZE);
    if values.iter().all(|&v| v == 0.0) {
        values.iter_mut().for_each(|v| *v = DEGENERATE_EPSILON);
    }
    AttentionMap::new(INPUT_SIZE, INPUT_SIZE, values, MapSource::Occlusion)
}

/// Bilinear interpolation of an `n x n` grid sampled at `centers` (same along
/// both axes) onto `size x size` pixels, clamped beyond the outer centres.
fn upsample(grid: &[f64], n: usize, centers: &[f64], size: usize) -> Vec<f64> {
    let locate = |p: f64| -> (usize, usize, f64) {
        if n == 1 || p <= centers[0] {
            return (0, 0, 0.0);
        }
        if p >= centers[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let hi = centers.partition_point(|&c| c <= p).min(n - 1);
        let lo = hi - 1;
        let t = (p - centers[lo]) / (centers[hi] - centers[lo]);
        (lo, hi, t)
    };
    let axis: Vec<(usize, usize, f64)> = (0..size).map(|p| locate(p as f64)).collect();
    let mut out = vec![0.0; size * size];
    for (y, &(y0, y1, ty)) in axis.iter().enumerate() {
        for (x, &(x0, x1, tx)) in axis.iter().enumerate() {
            let top = grid[y0 * n + x0] * (1.0 - tx) + grid[y0 * n + x1] * tx;
            let bottom = grid[y1 * n + x0] * (1.0 - tx) + grid[y1 * n + x1] * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusMode {
    /// The single most attended pixel.
    #[default]
    Argmax,
    /// Centroid of the connected region at or above half the maximum that
    /// contains the argmax.
    RegionCentroid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialFocus {
    pub peak: (f64, f64),
    /// Distance of the peak from the image centre over the half-diagonal.
    pub r_norm: f64,
}

/// Normalised radial distance of the most attended location from the centre
/// `(w/2, h/2)`; 0 at the centre and 1 at the corner `(0, 0)`.
pub fn radial_focus(map: &AttentionMap, mode: FocusMode) -> Result<RadialFocus> {
    if map.values.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateMap("every attention value is zero".into()));
    }
    let (ax, ay) = map.argmax();
    let peak = match mode {
        FocusMode::Argmax => (ax as f64, ay as f64),
        FocusMode::RegionCentroid => {
            let half = map.at(ax, ay) / 2.0;
            let allowed: Vec<bool> = map.values.iter().map(|&v| v >= half).collect();
            let seed = ay * map.width + ax;
            regions::components(map.width, map.height, &allowed)
                .into_iter()
                .find(|r| r.pixels.binary_search(&seed).is_ok())
                .expect("argmax lies in an above-half region")
                .centroid(map.width)
        }
    };
    let (cx, cy) = (map.width as f64 / 2.0, map.height as f64 / 2.0);
    let r = ((peak.0 - cx).powi(2) + (peak.1 - cy).powi(2)).sqrt() / (cx * cx + cy * cy).sqrt();
    Ok(RadialFocus {
        peak,
        r_norm: r.clamp(0.0, 1.0),
    })
}

pub const RADIAL_BINS: usize = 20;

/// One (true label, correctness) group of radial distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialGroup {
    pub label: Label,
    pub correct: bool,
    pub n: usize,
    pub median: f64,
    /// Counts over [`RADIAL_BINS`] equal bins of [0, 1].
    pub histogram: Vec<usize>,
    pub values: Vec<f64>,
}

impl RadialGroup {
    pub fn name(&self) -> String {
        format!("{}_{}", self.label, if self.correct { "correct" } else { "incorrect" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub a: String,
    pub b: String,
    pub ks: KsResult,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RadialReport {
    pub groups: Vec<RadialGroup>,
    pub comparisons: Vec<GroupComparison>,
    pub warnings: Vec<String>,
}

impl RadialReport {
    pub fn group(&self, label: Label, correct: bool) -> Option<&RadialGroup> {
        self.groups.iter().find(|g| g.label == label && g.correct == correct)
    }
}

/// Histograms the radial distances per (true label, correct) group and runs a
/// KS test between every pair of nonempty groups. Empty groups are left out
/// with a warning.
pub fn radial_report(items: &[(f64, Label, bool)]) -> Result<RadialReport> {
    if items.iter().any(|(r, _, _)| !(0.0..=1.0).contains(r)) {
        return Err(Error::arg("radial distances must lie in [0, 1]"));
    }
    let mut report = RadialReport::default();
    for label in [Label::Normal, Label::Abnormal] {
        for correct in [true, false] {
            let values: Vec<f64> = items
                .iter()
                .filter(|(_, l, c)| *l == label && *c == correct)
                .map(|(r, _, _)| *r)
                .collect();
            let mut group = RadialGroup {
                label,
                correct,
                n: values.len(),
                median: f64::NAN,
                histogram: vec![0; RADIAL_BINS],
                values,
            };
            if group.n == 0 {
                let msg = format!("group {} is empty and was omitted", group.name());
                log::warn!("{msg}");
                report.warnings.push(msg);
                continue;
            }
            for &r in &group.values {
                group.histogram[((r * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1)] += 1;
            }
            group.median = stats::median(&group.values);
            report.groups.push(group);
        }
    }
    if report.groups.is_empty() {
        return Err(Error::arg("no labelled radial distances to report"));
    }
    for i in 0..report.groups.len() {
        for j in i + 1..report.groups.len() {
            let (a, b) = (&report.groups[i], &report.groups[j]);
            report.comparisons.push(GroupComparison {
                a: a.name(),
                b: b.name(),
                ks: ks_two_sample(&a.values, &b.values)?,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{Activation, EmbeddingProvider, HeadModel};
    use std::sync::Arc;

    fn peak_at(x: usize, y: usize) -> AttentionMap {
        let mut v = vec![0.0; 224 * 224];
        v[y * 224 + x] = 1.0;
        AttentionMap::new(224, 224, v, MapSource::External).unwrap()
    }

    #[test]
    fn analytic_radii() {
        assert_eq!(radial_focus(&peak_at(112, 112), FocusMode::Argmax).unwrap().r_norm, 0.0);
        assert_eq!(radial_focus(&peak_at(0, 0), FocusMode::Argmax).unwrap().r_norm, 1.0);
        assert!((radial_focus(&peak_at(56, 56), FocusMode::Argmax).unwrap().r_norm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ties_pick_first_row_major_and_scaling_is_irrelevant() {
        let mut m = peak_at(200, 10);
        m.values[10 * 224 + 30] = 1.0;
        m.values[50 * 224 + 5] = 1.0;
        assert_eq!(m.argmax(), (30, 10));
        let r = radial_focus(&m, FocusMode::Argmax).unwrap().r_norm;
        m.values.iter_mut().for_each(|v| *v *= 7.5);
        assert_eq!(radial_focus(&m, FocusMode::Argmax).unwrap().r_norm, r);
    }

    #[test]
    fn zero_map_is_degenerate() {
        let m = AttentionMap::new(4, 4, vec![0.0; 16], MapSource::External).unwrap();
        assert!(matches!(radial_focus(&m, FocusMode::Argmax), Err(Error::DegenerateMap(_))));
        assert!(AttentionMap::new(2, 2, vec![0.0, -1.0, 0.0, 0.0], MapSource::External).is_err());
    }

    #[test]
    fn region_centroid_mode() {
        let mut v = vec![0.0; 224 * 224];
        for y in 100..=104 {
            for x in 20..=24 {
                v[y * 224 + x] = 1.0;
            }
        }
        v[102 * 224 + 22] = 2.0;
        let m = AttentionMap::new(224, 224, v, MapSource::External).unwrap();
        assert_eq!(radial_focus(&m, FocusMode::RegionCentroid).unwrap().peak, (22.0, 102.0));
    }

    #[test]
    fn tiling_cell_counts() {
        assert_eq!(occlusion_cells(224, 16, 16), 14);
        assert_eq!(occlusion_cells(224, 16, 8), 27);
        assert_eq!(occlusion_cells(20, 16, 8), 2);
        assert_eq!(cell_start(1, 20, 16, 8), 4);
    }

    #[test]
    fn upsample_reproduces_planes() {
        let n = 4;
        let centers = [7.5, 71.5, 135.5, 199.5];
        let grid: Vec<f64> = (0..n * n).map(|i| 2.0 * centers[i % n] + centers[i / n]).collect();
        let out = upsample(&grid, n, &centers, 224);
        assert!((out[100 * 224 + 50] - (2.0 * 50.0 + 100.0)).abs() < 1e-9);
        assert_eq!(out[0], grid[0]);
    }

    /// Mean squared whiteness, so a bright blob drives the abnormal logit.
    struct Whiteness;

    impl EmbeddingProvider for Whiteness {
        fn name(&self) -> &str {
            "whiteness"
        }

        fn dim(&self) -> usize {
            1
        }

        fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
            let mut s = 0.0;
            for y in 0..image.height() {
                for x in 0..image.width() {
                    let m = *image.get(x, y).iter().min().unwrap() as f64 / 255.0;
                    s += m * m;
                }
            }
            Ok(vec![s / (image.width() * image.height()) as f64])
        }
    }

    fn whiteness_model() -> (Model, Providers) {
        let mut head = HeadModel::zeros("whiteness", 1, 1);
        head.activation = Activation::Relu;
        head.w1 = vec![1000.0];
        head.w2 = vec![-1.0, 1.0];
        head.b2 = vec![0.0, -1.0];
        let mut providers = Providers::builtin();
        providers.insert(Arc::new(Whiteness));
        (Model::Single(head), providers)
    }

    #[test]
    fn peak_lands_on_off_centre_blob() {
        let (model, providers) = whiteness_model();
        let (bx, by) = (160.0, 70.0);
        let img = RgbImage::from_fn(224, 224, |x, y| {
            if (x as f64 - bx).powi(2) + (y as f64 - by).powi(2) <= 100.0 {
                [250, 250, 250]
            } else {
                [150, 30, 30]
            }
        });
        let map = occlusion_map(&model, &providers, &img, &OcclusionConfig::default(), Exec::Sequential).unwrap();
        let (px, py) = map.argmax();
        assert!(((px as f64 - bx).powi(2) + (py as f64 - by).powi(2)).sqrt() <= 16.0, "{px},{py}");
    }

    #[test]
    fn insensitive_model_gives_uniform_epsilon() {
        let head = HeadModel::zeros(crate::classifier::PixelPca::NAME, 256, 8);
        let img = RgbImage::from_fn(224, 224, |x, y| [(x ^ y) as u8, 0, 0]);
        let cfg = OcclusionConfig { stride: 16, ..Default::default() };
        let map = occlusion_map(&Model::Single(head), &Providers::builtin(), &img, &cfg, Exec::Parallel).unwrap();
        assert!(map.values.iter().all(|&v| v == DEGENERATE_EPSILON));
    }

    #[test]
    fn logit_shift_leaves_map_unchanged() {
        let (model, providers) = whiteness_model();
        let Model::Single(mut shifted) = model.clone() else { unreachable!() };
        shifted.b2.iter_mut().for_each(|b| *b += 3.25);
        let img = RgbImage::from_fn(100, 100, |x, _| if x > 70 { [255; 3] } else { [120, 20, 20] });
        let cfg = OcclusionConfig { stride: 16, ..Default::default() };
        let a = occlusion_map(&model, &providers, &img, &cfg, Exec::Sequential).unwrap();
        let b = occlusion_map(&Model::Single(shifted), &providers, &img, &cfg, Exec::Sequential).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn report_groups_and_identical_maps() {
        let items: Vec<(f64, Label, bool)> = (0..12)
            .map(|i| (0.3, if i % 2 == 0 { Label::Normal } else { Label::Abnormal }, i % 3 != 0))
            .collect();
        let r = radial_report(&items).unwrap();
        assert_eq!(r.groups.len(), 4);
        assert_eq!(r.comparisons.len(), 6);
        assert!(r.comparisons.iter().all(|c| c.ks.statistic == 0.0));
        assert_eq!(r.group(Label::Normal, true).unwrap().histogram[6], 4);

        let single = radial_report(&[(0.99, Label::Normal, true), (1.0, Label::Normal, true)]).unwrap();
        assert_eq!(single.groups.len(), 1);
        assert_eq!(single.groups[0].histogram[19], 2);
        assert_eq!(single.warnings.len(), 3);
        assert!(single.comparisons.is_empty());
    }
}
