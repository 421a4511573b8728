//! Flash-reflex detection inside the pupil and the usability gate.

use serde::{Deserialize, Serialize};

use super::crop::PupilCrop;
use crate::raster::Mask;
use crate::regions::{self, Region};

/// Seeds are pixels within this distance of the maximum whiteness.
const SEED_TOLERANCE: f64 = 1e-9;

/// Per-pixel whiteness `min(R, G, B)` over the pupil disk. Scores outside the
/// mask are stored as zero and never read.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenessMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub mask: Mask,
}

impl WhitenessMap {
    /// Builds a map directly from scores and a mask (mainly for tests and external maps).
    pub fn from_scores(width: usize, height: usize, scores: Vec<f64>, mask: Mask) -> Self {
        assert_eq!(scores.len(), width * height);
        assert_eq!((mask.width, mask.height), (width, height));
        Self { width, height, scores, mask }
    }

    pub fn masked_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().zip(&self.mask.bits).filter(|(_, &m)| m).map(|(&s, _)| s)
    }
}

pub fn whiteness_map(crop: &PupilCrop) -> WhitenessMap {
    let mask = crop.pupil_mask();
    let scores = crop
        .image
        .pixels()
        .chunks_exact(3)
        .zip(&mask.bits)
        .map(|(p, &inside)| if inside { p[0].min(p[1]).min(p[2]) as f64 } else { 0.0 })
        .collect();
    WhitenessMap {
        width: crop.image.width(),
        height: crop.image.height(),
        scores,
        mask,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Usable,
    TooBig,
    TooSmall,
    TooElongated,
    NoReflex,
}

impl Verdict {
    pub fn is_usable(self) -> bool {
        self == Verdict::Usable
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Usable => "usable",
            Verdict::TooBig => "too_big",
            Verdict::TooSmall => "too_small",
            Verdict::TooElongated => "too_elongated",
            Verdict::NoReflex => "no_reflex",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflexComponent {
    pub region: Region,
    pub area: usize,
    pub centroid: (f64, f64),
    pub elongation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflexReport {
    /// Components, largest first.
    pub components: Vec<ReflexComponent>,
    /// Index of the accepted reflex; set only when the verdict is usable.
    pub selected: Option<usize>,
    /// Component nearest the pupil centre, whether or not it passed the gate.
    pub nearest: Option<usize>,
    /// `None` until [`select_and_gate`] has run.
    pub verdict: Option<Verdict>,
}

impl ReflexReport {
    pub fn selected_component(&self) -> Option<&ReflexComponent> {
        self.selected.map(|i| &self.components[i])
    }

    /// Pixel mask of the selected reflex.
    pub fn selected_mask(&self, width: usize, height: usize) -> Option<Mask> {
        let c = self.selected_component()?;
        let mut bits = vec![false; width * height];
        for &p in &c.region.pixels {
            bits[p] = true;
        }
        Some(Mask { width, height, bits })
    }
}

/// Usability thresholds for the selected reflex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Minimum reflex area as a fraction of the pupil area.
    pub min_area_frac: f64,
    /// Maximum reflex area as a fraction of the pupil area.
    pub max_area_frac: f64,
    /// Maximum major/minor axis ratio.
    pub max_elongation: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            min_area_frac: 0.002,
            max_area_frac: 0.25,
            max_elongation: 3.0,
        }
    }
}

/// Hysteresis segmentation of the brightest reflexes: seeds at the maximum
/// score, grown through 8-connected pixels scoring at least `max - sigma`,
/// where sigma is the population standard deviation over the pupil.
pub fn detect_reflexes(map: &WhitenessMap) -> ReflexReport {
    let inside: Vec<f64> = map.masked_scores().collect();
    if inside.is_empty() {
        return ReflexReport {
            components: Vec::new(),
            selected: None,
            nearest: None,
            verdict: Some(Verdict::NoReflex),
        };
    }
    let max = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma = crate::stats::std_dev(&inside);
    let allowed: Vec<bool> = map
        .scores
        .iter()
        .zip(&map.mask.bits)
        .map(|(&s, &m)| m && s >= max - sigma)
        .collect();
    let seeds: Vec<bool> = map
        .scores
        .iter()
        .zip(&map.mask.bits)
        .map(|(&s, &m)| m && s >= max - SEED_TOLERANCE)
        .collect();

    let mut components: Vec<ReflexComponent> = regions::grow_from_seeds(map.width, map.height, &allowed, &seeds)
        .into_iter()
        .map(|region| ReflexComponent {
            area: region.area(),
            centroid: region.centroid(map.width),
            elongation: region.elongation(map.width),
            region,
        })
        .collect();
    // Stable sort: equal areas keep raster order.
    components.sort_by_key(|c| std::cmp::Reverse(c.area));
    ReflexReport {
        components,
        selected: None,
        nearest: None,
        verdict: None,
    }
}

/// Picks the reflex nearest the pupil centre (ties: larger area, then smaller
/// `(y, x)` centroid) and applies the size and shape gates.
pub fn select_and_gate(report: &ReflexReport, pupil: &PupilCrop, gate: &GateConfig) -> ReflexReport {
    select_and_gate_at(report, pupil.pupil_center, pupil.pupil_area(), gate)
}

pub fn select_and_gate_at(
    report: &ReflexReport,
    pupil_center: (f64, f64),
    pupil_area: f64,
    gate: &GateConfig,
) -> ReflexReport {
    let dist = |c: &ReflexComponent| {
        let (dx, dy) = (c.centroid.0 - pupil_center.0, c.centroid.1 - pupil_center.1);
        (dx * dx + dy * dy).sqrt()
    };
    let nearest = report
        .components
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            dist(a)
                .total_cmp(&dist(b))
                .then(b.area.cmp(&a.area))
                .then(a.centroid.1.total_cmp(&b.centroid.1))
                .then(a.centroid.0.total_cmp(&b.centroid.0))
        })
        .map(|(i, _)| i);

    let verdict = match nearest.map(|i| &report.components[i]) {
        None => Verdict::NoReflex,
        Some(c) if (c.area as f64) < gate.min_area_frac * pupil_area => Verdict::TooSmall,
        Some(c) if (c.area as f64) > gate.max_area_frac * pupil_area => Verdict::TooBig,
        Some(c) if c.elongation > gate.max_elongation => Verdict::TooElongated,
        Some(_) => Verdict::Usable,
    };
    ReflexReport {
        components: report.components.clone(),
        selected: if verdict.is_usable() { nearest } else { None },
        nearest,
        verdict: Some(verdict),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask(w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |_, _| true)
    }

    fn component(pixels: Vec<usize>, width: usize) -> ReflexComponent {
        let region = Region { pixels };
        ReflexComponent {
            area: region.area(),
            centroid: region.centroid(width),
            elongation: region.elongation(width),
            region,
        }
    }

    #[test]
    fn uniform_map_is_one_component() {
        let mask = Mask::disk(9, 9, 4.0, 4.0, 3.5);
        let n = mask.count();
        let map = WhitenessMap::from_scores(9, 9, vec![50.0; 81], mask);
        let r = detect_reflexes(&map);
        assert_eq!(r.components.len(), 1);
        assert_eq!(r.components[0].area, n);
    }

    #[test]
    fn single_bright_pixel() {
        let mut scores = vec![100.0; 25];
        scores[12] = 200.0;
        let r = detect_reflexes(&WhitenessMap::from_scores(5, 5, scores, full_mask(5, 5)));
        assert_eq!(r.components.len(), 1);
        assert_eq!(r.components[0].region.pixels, vec![12]);
    }

    #[test]
    fn two_blobs_at_max() {
        let mut scores = vec![10.0; 100];
        for p in [11, 12, 21, 22, 77, 78, 87, 88, 89] {
            scores[p] = 250.0;
        }
        let r = detect_reflexes(&WhitenessMap::from_scores(10, 10, scores, full_mask(10, 10)));
        assert_eq!(r.components.len(), 2);
        assert_eq!(r.components[0].area, 5);
        assert_eq!(r.components[1].area, 4);
    }

    #[test]
    fn pixels_outside_mask_ignored() {
        let mut scores = vec![10.0; 25];
        scores[0] = 255.0;
        scores[12] = 100.0;
        let mask = Mask::from_fn(5, 5, |x, y| x > 0 || y > 0);
        let r = detect_reflexes(&WhitenessMap::from_scores(5, 5, scores, mask));
        assert_eq!(r.components[0].region.pixels, vec![12]);
    }

    #[test]
    fn nearest_centroid_selected() {
        let w = 20;
        let report = ReflexReport {
            components: vec![
                component(vec![2 * w + 2], w),
                component(vec![10 * w + 10], w),
            ],
            selected: None,
            nearest: None,
            verdict: None,
        };
        let gate = GateConfig {
            min_area_frac: 0.0,
            ..Default::default()
        };
        let r = select_and_gate_at(&report, (8.0, 8.0), 100.0, &gate);
        assert_eq!(r.selected, Some(1));
        assert_eq!(r.verdict, Some(Verdict::Usable));
    }

    #[test]
    fn ties_prefer_larger_then_upper_left() {
        let w = 20;
        let report = ReflexReport {
            components: vec![
                component(vec![5 * w + 9], w),
                component(vec![5 * w + 11, 5 * w + 12, 6 * w + 11, 6 * w + 12], w),
                component(vec![5 * w + 5], w),
            ],
            selected: None,
            nearest: None,
            verdict: None,
        };
        // centroids: (9,5), (11.5,5.5), (5,5); centre chosen equidistant from first and third
        let r = select_and_gate_at(&report, (7.0, 5.0), 1000.0, &GateConfig::default());
        assert_eq!(r.nearest, Some(2));
    }

    #[test]
    fn gates() {
        let w = 40;
        let whole: Vec<usize> = (0..w * w).collect();
        let report = ReflexReport {
            components: vec![component(whole, w)],
            selected: None,
            nearest: None,
            verdict: None,
        };
        let r = select_and_gate_at(&report, (20.0, 20.0), 1600.0, &GateConfig::default());
        assert_eq!(r.verdict, Some(Verdict::TooBig));
        assert_eq!(r.selected, None);

        let line: Vec<usize> = (0..10).map(|x| 20 * w + 15 + x).collect();
        let report = ReflexReport { components: vec![component(line, w)], ..report };
        let r = select_and_gate_at(&report, (20.0, 20.0), 1600.0, &GateConfig::default());
        assert_eq!(r.verdict, Some(Verdict::TooElongated));

        let empty = ReflexReport { components: vec![], ..report };
        let r = select_and_gate_at(&empty, (20.0, 20.0), 1600.0, &GateConfig::default());
        assert_eq!(r.verdict, Some(Verdict::NoReflex));
    }

    #[test]
    fn round_reflex_of_three_percent_is_usable() {
        // pupil radius 30 -> area ~2827; 3% ~ 85 px disk of radius ~5.2
        let w = 64;
        let disk = Mask::disk(w, w, 32.0, 32.0, 5.2);
        let pixels: Vec<usize> = (0..w * w).filter(|&p| disk.bits[p]).collect();
        let area = std::f64::consts::PI * 30.0 * 30.0;
        assert!((pixels.len() as f64 / area - 0.03).abs() < 0.003);
        let c = component(pixels, w);
        assert!(c.elongation < 1.2);
        let report = ReflexReport { components: vec![c], selected: None, nearest: None, verdict: None };
        let r = select_and_gate_at(&report, (32.0, 32.0), area, &GateConfig::default());
        assert_eq!(r.verdict, Some(Verdict::Usable));
        assert_eq!(r.selected, Some(0));
    }
}
