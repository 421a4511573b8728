//! Synthetic red-reflex eye images with known ground truth.
//!
//! Each subject contributes a right and a left eye sharing field colour, pupil
//! geometry and pupil colour; only the reflex differs. The periocular field is
//! kept brighter (in luma) than the pupil and its blue channel below the
//! pupil's, so the pupil is the darkest region and field pixels bleeding into
//! the pupil mask never look whiter than the pupil itself.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::dataset::{DatasetManifest, EyeRecord, Label, ManifestEntry, Side, Split};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::pipeline::{PupilAnalysis, Verdict};
use crate::raster::{clamp_u8, RgbImage};

/// Colour the reflex blends toward; kept just under saturation.
const REFLEX_WHITE: f64 = 250.0;
/// Half-maximum radius of a Gaussian in units of its sigma, sqrt(2 ln 2).
const HALF_MAX: f64 = 1.177_410_022_515_474_6;
/// Per-pixel fundus texture inside the pupil; present even at zero noise.
const TEXTURE_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalityKind {
    DiffuseWhite,
    OffCenterCrescent,
    AsymmetricDim,
    AbsentReflex,
}

impl AbnormalityKind {
    pub const ALL: [AbnormalityKind; 4] = [
        AbnormalityKind::DiffuseWhite,
        AbnormalityKind::OffCenterCrescent,
        AbnormalityKind::AsymmetricDim,
        AbnormalityKind::AbsentReflex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AbnormalityKind::DiffuseWhite => "diffuse_white",
            AbnormalityKind::OffCenterCrescent => "off_center_crescent",
            AbnormalityKind::AsymmetricDim => "asymmetric_dim",
            AbnormalityKind::AbsentReflex => "absent_reflex",
        }
    }

    /// Gate verdicts the pipeline is expected to reach for this kind
    /// (`None` stands for a normal eye).
    pub fn expected_verdicts(kind: Option<Self>) -> &'static [Verdict] {
        match kind {
            None | Some(AbnormalityKind::OffCenterCrescent) | Some(AbnormalityKind::AsymmetricDim) => {
                &[Verdict::Usable]
            }
            Some(AbnormalityKind::DiffuseWhite) => &[Verdict::TooBig],
            Some(AbnormalityKind::AbsentReflex) => &[Verdict::NoReflex, Verdict::TooSmall],
        }
    }
}

impl fmt::Display for AbnormalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AbnormalityKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown abnormality kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub abnormal_fraction: f64,
    /// Side of the square eye images.
    pub image_size: usize,
    pub seed: u64,
    /// Kinds assigned round-robin to abnormal eyes.
    pub kinds: Vec<AbnormalityKind>,
    /// Standard deviation of additive per-channel Gaussian noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            abnormal_fraction: 0.28,
            image_size: 160,
            seed: 0,
            kinds: AbnormalityKind::ALL.to_vec(),
            noise: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::config("abnormal_fraction must lie in [0, 1]"));
        }
        if self.image_size < 64 {
            return Err(Error::config("image_size must be at least 64"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        if self.abnormal_fraction > 0.0 && self.kinds.is_empty() {
            return Err(Error::config("abnormal eyes requested but no abnormality kinds enabled"));
        }
        Ok(())
    }
}

/// What the renderer put into one eye image, in that image's pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    /// Centre of the reflex spot, crescent or haze; absent for absent reflexes.
    pub reflex_center: Option<(f64, f64)>,
    /// Half-maximum radius of the spot (geometric mean for crescents) or haze radius.
    pub reflex_radius: Option<f64>,
    /// Peak blend weight toward white.
    pub reflex_amplitude: f64,
    pub kind: Option<AbnormalityKind>,
}

impl GroundTruth {
    fn mirrored(&self, width: usize) -> Self {
        let flip = |(x, y): (f64, f64)| (width as f64 - 1.0 - x, y);
        Self {
            pupil_center: flip(self.pupil_center),
            reflex_center: self.reflex_center.map(flip),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub record: EyeRecord,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    /// Manifest describing the records, with image paths `images/<id>.png` under `root`.
    pub fn manifest(&self, root: impl Into<PathBuf>) -> DatasetManifest {
        let entries = self
            .records
            .iter()
            .map(|r| ManifestEntry {
                id: r.record.id.clone(),
                subject_id: r.record.subject_id.clone(),
                path: image_path(&r.record.id),
                side: r.record.side,
                label: r.record.label,
                split: r.record.split,
            })
            .collect();
        DatasetManifest::new(entries, root).expect("generated ids are unique")
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.record.label == label).count()
    }
}

fn image_path(id: &str) -> PathBuf {
    Path::new("images").join(format!("{id}.png"))
}

#[derive(Clone, Copy)]
enum Reflex {
    None,
    Spot {
        center: (f64, f64),
        sigma: (f64, f64),
        /// Orientation of the first sigma axis, radians.
        angle: f64,
        amplitude: f64,
    },
    Haze {
        center: (f64, f64),
        radius: f64,
        amplitude: f64,
    },
}

impl Reflex {
    fn weight(&self, x: f64, y: f64) -> f64 {
        match *self {
            Reflex::None => 0.0,
            Reflex::Spot { center, sigma, angle, amplitude } => {
                let (dx, dy) = (x - center.0, y - center.1);
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                amplitude * (-0.5 * ((u / sigma.0).powi(2) + (v / sigma.1).powi(2))).exp()
            }
            Reflex::Haze { center, radius, amplitude } => {
                let d = (x - center.0).hypot(y - center.1);
                amplitude * smooth_edge(radius - d, 2.0)
            }
        }
    }
}

/// 0 outside, 1 inside, linear over a band of `width` pixels centred on the edge.
fn smooth_edge(signed_inside: f64, width: f64) -> f64 {
    (signed_inside / width + 0.5).clamp(0.0, 1.0)
}

struct SubjectScene {
    field: [f64; 3],
    pupil: [f64; 3],
    center: (f64, f64),
    radius: f64,
    reference_amplitude: f64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn subject_scene(rng: &mut ChaCha8Rng, size: usize) -> SubjectScene {
    let s = size as f64;
    let field = [uniform(rng, 175.0, 195.0), uniform(rng, 130.0, 150.0), uniform(rng, 8.0, 20.0)];
    let pupil = [uniform(rng, 138.0, 162.0), uniform(rng, 27.0, 34.0), uniform(rng, 27.0, 34.0)];
    let c = (s - 1.0) / 2.0;
    let center = (c + uniform(rng, -0.06, 0.06) * s, c + uniform(rng, -0.06, 0.06) * s);
    let radius = uniform(rng, 0.16, 0.22) * s;
    SubjectScene {
        field,
        pupil,
        center,
        radius,
        reference_amplitude: uniform(rng, 0.85, 1.0),
    }
}

fn random_direction(rng: &mut ChaCha8Rng) -> f64 {
    uniform(rng, 0.0, std::f64::consts::TAU)
}

fn eye_reflex(rng: &mut ChaCha8Rng, scene: &SubjectScene, kind: Option<AbnormalityKind>) -> (Reflex, GroundTruth) {
    let r = scene.radius;
    let (cx, cy) = scene.center;
    let truth = |center: Option<(f64, f64)>, radius: Option<f64>, amplitude: f64| GroundTruth {
        pupil_center: scene.center,
        pupil_radius: r,
        reflex_center: center,
        reflex_radius: radius,
        reflex_amplitude: amplitude,
        kind,
    };
    let centred_spot = |rng: &mut ChaCha8Rng, amplitude: f64| {
        let off = uniform(rng, 0.0, 0.04) * r;
        let dir = random_direction(rng);
        let center = (cx + off * dir.cos(), cy + off * dir.sin());
        let sigma = uniform(rng, 0.15, 0.24) * r;
        (
            Reflex::Spot { center, sigma: (sigma, sigma), angle: 0.0, amplitude },
            truth(Some(center), Some(HALF_MAX * sigma), amplitude),
        )
    };
    match kind {
        None => {
            let a = (scene.reference_amplitude + uniform(rng, -0.03, 0.03)).clamp(0.8, 1.0);
            centred_spot(rng, a)
        }
        Some(AbnormalityKind::AsymmetricDim) => {
            let a = scene.reference_amplitude / uniform(rng, 2.0, 3.0);
            centred_spot(rng, a)
        }
        Some(AbnormalityKind::OffCenterCrescent) => {
            let dir = random_direction(rng);
            let off = uniform(rng, 0.35, 0.55) * r;
            let center = (cx + off * dir.cos(), cy + off * dir.sin());
            let radial = uniform(rng, 0.13, 0.18) * r;
            let tangential = radial * uniform(rng, 1.5, 2.2);
            let a = scene.reference_amplitude;
            (
                Reflex::Spot {
                    center,
                    // first axis along the tangent, so the blob hugs the pupil edge
                    sigma: (tangential, radial),
                    angle: dir + std::f64::consts::FRAC_PI_2,
                    amplitude: a,
                },
                truth(Some(center), Some(HALF_MAX * (radial * tangential).sqrt()), a),
            )
        }
        Some(AbnormalityKind::DiffuseWhite) => {
            let frac = uniform(rng, 0.4, 0.7);
            let radius = frac.sqrt() * r;
            let room = (r - radius - 1.0).max(0.0);
            let off = uniform(rng, 0.0, 0.3) * room;
            let dir = random_direction(rng);
            let center = (cx + off * dir.cos(), cy + off * dir.sin());
            let a = uniform(rng, 0.15, 0.25);
            (
                Reflex::Haze { center, radius, amplitude: a },
                truth(Some(center), Some(radius), a),
            )
        }
        Some(AbnormalityKind::AbsentReflex) => (Reflex::None, truth(None, None, 0.0)),
    }
}

fn render_eye(rng: &mut ChaCha8Rng, scene: &SubjectScene, reflex: &Reflex, size: usize, noise: f64) -> RgbImage {
    let texture = Normal::new(0.0, TEXTURE_SIGMA).expect("valid sigma");
    let pixel_noise = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let d = (xf - scene.center.0).hypot(yf - scene.center.1);
            let cover = smooth_edge(scene.radius - d, 1.0);
            let grain = if cover > 0.0 { texture.sample(rng) } else { 0.0 };
            let w = if cover > 0.0 { reflex.weight(xf, yf) } else { 0.0 };
            for c in 0..3 {
                let inside = scene.pupil[c] + grain;
                let inside = inside + w * (REFLEX_WHITE - inside);
                let mut v = cover * inside + (1.0 - cover) * scene.field[c];
                if noise > 0.0 {
                    v += pixel_noise.sample(rng);
                }
                pixels.push(clamp_u8(v));
            }
        }
    }
    RgbImage::new(size, size, pixels).expect("square buffer")
}

/// Renders the dataset described by `config`. Output is a pure function of the
/// configuration; `exec` only affects speed.
pub fn generate(config: &SynthConfig, exec: Exec) -> Result<SynthDataset> {
    config.validate()?;
    let n_eyes = 2 * config.n_subjects;
    let n_abnormal = (config.abnormal_fraction * n_eyes as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_eyes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u64::MAX])));
    let mut kinds: Vec<Option<AbnormalityKind>> = vec![None; n_eyes];
    for (j, &eye) in order.iter().take(n_abnormal).enumerate() {
        kinds[eye] = Some(config.kinds[j % config.kinds.len()]);
    }

    let subjects = par::map_range(exec, config.n_subjects, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[s as u64]));
        let scene = subject_scene(&mut rng, config.image_size);
        let subject_id = format!("s{s:05}");
        [Side::Right, Side::Left]
            .into_iter()
            .enumerate()
            .map(|(e, side)| {
                let kind = kinds[2 * s + e];
                let mut eye_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[s as u64, e as u64 + 1]));
                let (reflex, truth) = eye_reflex(&mut eye_rng, &scene, kind);
                let image = render_eye(&mut eye_rng, &scene, &reflex, config.image_size, config.noise);
                let tag = if side == Side::Right { "R" } else { "L" };
                SynthRecord {
                    record: EyeRecord {
                        id: format!("{subject_id}-{tag}"),
                        subject_id: subject_id.clone(),
                        side,
                        image,
                        label: if kind.is_some() { Label::Abnormal } else { Label::Normal },
                        split: Split::Unassigned,
                        mirrored: false,
                    },
                    truth,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(SynthDataset {
        config: config.clone(),
        records: subjects.into_iter().flatten().collect(),
    })
}

/// Mirrors left-eye images together with their ground truth.
pub fn mirror_left_eyes(records: Vec<SynthRecord>) -> Vec<SynthRecord> {
    records
        .into_iter()
        .map(|mut r| {
            if r.record.side == Side::Left {
                r.truth = r.truth.mirrored(r.record.image.width());
                r.record.image = r.record.image.flip_horizontal();
                r.record.mirrored = true;
            }
            r
        })
        .collect()
}

#[derive(Serialize)]
struct TruthLine<'a> {
    id: &'a str,
    subject_id: &'a str,
    side: Side,
    label: Label,
    #[serde(flatten)]
    truth: &'a GroundTruth,
}

/// Writes `images/<id>.png`, `manifest.jsonl` and `ground_truth.jsonl` under `dir`.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path, exec: Exec) -> Result<DatasetManifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    par::try_map(exec, &dataset.records, |r| r.record.image.save_png(&dir.join(image_path(&r.record.id))))?;
    let manifest = dataset.manifest(dir);
    manifest.save(&dir.join("manifest.jsonl"))?;
    let truth_path = dir.join("ground_truth.jsonl");
    let mut f = std::fs::File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
    for r in &dataset.records {
        let line = TruthLine {
            id: &r.record.id,
            subject_id: &r.record.subject_id,
            side: r.record.side,
            label: r.record.label,
            truth: &r.truth,
        };
        writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&truth_path, e))?;
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub pass: bool,
    pub expected: Vec<Verdict>,
    /// `None` when no pupil was found.
    pub verdict: Option<Verdict>,
    /// Distance from the selected reflex centroid to the true reflex centre, in
    /// pupil radii. Only measured when a component was selected.
    pub centroid_error: Option<f64>,
}

/// Fraction of the pupil radius the selected centroid may be off by.
pub const CENTROID_TOLERANCE: f64 = 0.10;

/// Compares a pipeline run against the record's ground truth. `record` must be
/// in the same orientation as the image the pipeline saw.
pub fn oracle_check(record: &SynthRecord, analysis: Option<&PupilAnalysis>) -> OracleOutcome {
    let expected = AbnormalityKind::expected_verdicts(record.truth.kind).to_vec();
    let verdict = analysis.map(PupilAnalysis::verdict);
    let centroid_error = analysis
        .and_then(PupilAnalysis::reflex_centroid_in_eye)
        .zip(record.truth.reflex_center)
        .map(|(got, want)| (got.0 - want.0).hypot(got.1 - want.1) / record.truth.pupil_radius);
    let verdict_ok = verdict.is_some_and(|v| expected.contains(&v));
    let centroid_ok = match verdict {
        Some(Verdict::Usable) => centroid_error.is_some_and(|e| e <= CENTROID_TOLERANCE),
        _ => true,
    };
    OracleOutcome {
        pass: verdict_ok && centroid_ok,
        expected,
        verdict,
        centroid_error,
    }
}
