//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every oracle here is coded independently of the library.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

use redreflex::augment::{apply, apply_mix, rotate, AugmentKind, AugmentationMix, AugmentationSpec};
use redreflex::bundle::ModelBundle;
use redreflex::classifier::{
    adamw_step, combine, eval_report, roc_auc, train_head, AdamState, Activation, Ensemble, HeadModel, Model,
    Normalization, Prediction, Providers, TrainConfig,
};
use redreflex::config::AppConfig;
use redreflex::dataset::{Label, Split};
use redreflex::imaging::{compute_properties, ks_statistic, property_class_report, PropertyVector, SIGNIFICANCE_LEVEL};
use redreflex::interpret::{
    conditional_affinities, fit_feedback_rules, generate_feedback, occlusion_map, radial_focus, radial_report,
    tsne_embed, AttentionMap, Direction, FeedbackConfig, FocusMode, MapSource, OcclusionConfig, TsneConfig,
};
use redreflex::par::Exec;
use redreflex::pipeline::{analyze_eye, detect_reflexes, FallbackDetector, GateConfig, WhitenessMap};
use redreflex::synth::{generate, write_dataset, AbnormalityKind, SynthConfig};
use redreflex::{Mask, RgbImage};
use redreflex_service::http::{router, AppState};
use redreflex_service::screen::Screener;
use redreflex_service::workflow;

type Outcome = Result<String, String>;

struct Gate {
    failures: usize,
    lines: Vec<String>,
}

impl Gate {
    fn check(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64())),
            other => other,
        };
        let line = match outcome {
            Ok(detail) => format!("PASS {name} ({:.1}s): {detail}", took.as_secs_f64()),
            Err(detail) => {
                self.failures += 1;
                format!("FAIL {name} ({:.1}s): {detail}", took.as_secs_f64())
            }
        };
        println!("{line}");
        self.lines.push(line);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------- properties

fn gray_reference(img: &RgbImage) -> Vec<f64> {
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let [r, g, b] = img.get(x, y);
            if r == g && g == b {
                r as f64
            } else {
                0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
            }
        })
        .collect()
}

fn px(g: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, w as isize - 1) as usize;
    let yc = y.clamp(0, h as isize - 1) as usize;
    g[yc * w + xc]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn interp_quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Union-find labelling with 8-connectivity.
fn label_components(w: usize, h: usize, on: &[bool]) -> Vec<Vec<usize>> {
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !on[i] {
                continue;
            }
            for (dx, dy) in [(1isize, 0isize), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if on[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..w * h {
        if on[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

fn reference_properties(img: &RgbImage) -> [f64; 11] {
    let (w, h) = (img.width(), img.height());
    let g = gray_reference(img);
    let n = g.len() as f64;
    let brightness = mean(&g);
    let contrast = pop_var(&g).sqrt();
    let redness = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| img.get(x, y)[0] as f64).sum::<f64>() / n;

    let mut lap = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = px(&g, w, h, x, y);
            lap.push(
                px(&g, w, h, x + 1, y) + px(&g, w, h, x - 1, y) + px(&g, w, h, x, y + 1) + px(&g, w, h, x, y - 1)
                    - 4.0 * c,
            );
        }
    }
    let energy = lap.iter().map(|v| v.abs()).sum::<f64>() / n;
    let sharpness = pop_var(&lap);

    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for v in &g {
        *hist.entry(v.round() as i64).or_default() += 1;
    }
    let entropy = -hist.values().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>();

    // Each horizontal pair contributes (a,b) and (b,a) with equal weight, so
    // the homogeneity is the pair average of 1/(1+|qa-qb|).
    let q = |v: f64| ((v * 32.0 / 256.0).floor() as i64).min(31);
    let mut hom = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w - 1 {
            hom += 1.0 / (1.0 + (q(g[y * w + x]) - q(g[y * w + x + 1])).abs() as f64);
            pairs += 1;
        }
    }
    let homogeneity = hom / pairs as f64;

    let mut fourier = 0.0;
    for v in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    re += g[y * w + x] * a.cos();
                    im += g[y * w + x] * a.sin();
                }
            }
            fourier += (re * re + im * im).sqrt();
        }
    }

    let t = interp_quantile(&g, 0.9);
    let bright: Vec<bool> = g.iter().map(|&v| v >= t).collect();
    let comps = label_components(w, h, &bright);
    let mut best = &comps[0];
    for c in &comps {
        if c.len() > best.len() || (c.len() == best.len() && c[0] < best[0]) {
            best = c;
        }
    }
    let inside: BTreeSet<(isize, isize)> = best.iter().map(|&i| ((i % w) as isize, (i / w) as isize)).collect();
    let perimeter = inside
        .iter()
        .map(|&(x, y)| [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().filter(|(dx, dy)| !inside.contains(&(x + dx, y + dy))).count())
        .sum::<usize>() as f64;
    let compactness = 4.0 * std::f64::consts::PI * inside.len() as f64 / (perimeter * perimeter);

    let ring = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];
    let mut lbp = 0.0;
    let mut cells = 0usize;
    for y in 1..h as isize - 1 {
        for x in 1..w as isize - 1 {
            let c = px(&g, w, h, x, y);
            let code: u8 = ring
                .iter()
                .enumerate()
                .filter(|(_, (dx, dy))| px(&g, w, h, x + dx, y + dy) >= c)
                .fold(0u8, |acc, (k, _)| acc | (1 << k));
            let transitions = (code ^ code.rotate_left(1)).count_ones();
            lbp += if transitions <= 2 { code.count_ones() as f64 } else { 9.0 };
            cells += 1;
        }
    }
    let lbp = lbp / cells as f64;

    let max = g.iter().cloned().fold(f64::MIN, f64::max);
    let min = g.iter().cloned().fold(f64::MAX, f64::min);
    let intensity_ratio = max / min.max(1.0);

    [
        contrast,
        brightness,
        redness,
        energy,
        entropy,
        sharpness,
        homogeneity,
        fourier,
        compactness,
        lbp,
        intensity_ratio,
    ]
}

fn property_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        // Half the images are gray so the equal-channel path is covered too.
        let img = RgbImage::from_fn(16, 16, |_, _| {
            if k % 2 == 0 {
                let v = rng.gen();
                [v, v, v]
            } else {
                [rng.gen(), rng.gen(), rng.gen()]
            }
        });
        let got = compute_properties(&img, None).map_err(|e| e.to_string())?.scalars();
        let want = reference_properties(&img);
        for (i, (a, b)) in got.iter().zip(&want).enumerate() {
            let rel = if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
            worst = worst.max(rel);
            ensure(rel <= 1e-6, || format!("image {k} property {} got {a} want {b}", redreflex::imaging::SCALAR_PROPERTIES[i]))?;
        }
    }
    for rgb in [[200, 200, 200], [150, 30, 30], [7, 7, 7], [255, 0, 0]] {
        let p = compute_properties(&RgbImage::filled(16, 16, rgb), None).map_err(|e| e.to_string())?;
        ensure(
            p.contrast == 0.0 && p.entropy == 0.0 && p.sharpness == 0.0 && p.homogeneity == 1.0 && p.intensity_ratio == 1.0,
            || format!("constant image {rgb:?} gave {p:?}"),
        )?;
    }
    Ok(format!("20 random 16x16 images, worst relative error {worst:.2e}; constant images exact"))
}

// ------------------------------------------------------------------------ KS

fn brute_force_d(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    a.iter().chain(b).map(|&t| (ecdf(a, t) - ecdf(b, t)).abs()).fold(0.0, f64::max)
}

fn ks_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..100 {
        let (m, n) = (rng.gen_range(1..=50), rng.gen_range(1..=50));
        // Coarse values force ties within and across samples.
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(0..20) as f64 / 4.0).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..24) as f64 / 4.0).collect();
        let (got, want) = (ks_statistic(&a, &b), brute_force_d(&a, &b));
        ensure(got == want, || format!("pair {k} (m={m}, n={n}): D={got}, brute force {want}"))?;
    }

    let mut flagged = 0usize;
    let mut tests = 0usize;
    for draw in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let mut row = |label| {
            let mut v = || rng.gen::<f64>();
            (
                PropertyVector {
                    contrast: v(),
                    brightness: v(),
                    redness: v(),
                    energy: v(),
                    entropy: v(),
                    sharpness: v(),
                    homogeneity: v(),
                    fourier_energy: v(),
                    compactness: v(),
                    lbp: v(),
                    intensity_ratio: v(),
                    image_size: (16, 16),
                },
                label,
            )
        };
        let rows: Vec<_> = (0..400).map(|i| row(if i < 200 { Label::Normal } else { Label::Abnormal })).collect();
        let report = property_class_report(&rows).map_err(|e| e.to_string())?;
        flagged += report.significant().count();
        tests += 11;
    }
    let rate = flagged as f64 / tests as f64;
    ensure(rate <= 0.05, || format!("null draws flagged {flagged}/{tests} properties"))?;
    Ok(format!(
        "D exact on 100 pairs; null calibration flagged {flagged}/{tests} ({:.3}%) at p<{SIGNIFICANCE_LEVEL}",
        100.0 * rate
    ))
}

// -------------------------------------------------------------------- reflex

/// Hysteresis oracle: label-propagation over the pixels within one standard
/// deviation of the maximum, keeping the components that reach the maximum.
fn hysteresis_oracle(w: usize, h: usize, scores: &[f64], mask: &[bool]) -> BTreeSet<Vec<usize>> {
    let inside: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    let max = inside.iter().cloned().fold(f64::MIN, f64::max);
    let sd = pop_var(&inside).sqrt();
    let allowed: Vec<bool> = (0..w * h).map(|i| mask[i] && scores[i] >= max - sd).collect();
    let mut label: Vec<usize> = (0..w * h).collect();
    loop {
        let mut changed = false;
        for i in 0..w * h {
            if !allowed[i] {
                continue;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if allowed[j] && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..w * h {
        if allowed[i] {
            groups.entry(label[i]).or_default().push(i);
        }
    }
    groups.into_values().filter(|g| g.iter().any(|&i| scores[i] == max)).collect()
}

fn reflex_detection() -> Outcome {
    let cfg = SynthConfig {
        n_subjects: 250,
        noise: 2.0,
        seed: 31,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg, Exec::Parallel).map_err(|e| e.to_string())?;
    let gate = GateConfig::default();
    let (mut normal, mut normal_ok, mut absent, mut absent_rejected) = (0, 0, 0, 0);
    for r in &ds.records {
        let analysis = analyze_eye(&r.record.id, &r.record.image, &FallbackDetector, &gate).map_err(|e| e.to_string())?;
        match r.truth.kind {
            None => {
                normal += 1;
                let hit = analysis.as_ref().filter(|a| a.verdict().is_usable()).and_then(|a| a.reflex_centroid_in_eye());
                if let (Some((x, y)), Some((tx, ty))) = (hit, r.truth.reflex_center) {
                    if ((x - tx).powi(2) + (y - ty).powi(2)).sqrt() <= 0.10 * r.truth.pupil_radius {
                        normal_ok += 1;
                    }
                }
            }
            Some(AbnormalityKind::AbsentReflex) => {
                absent += 1;
                if !analysis.is_some_and(|a| a.verdict().is_usable()) {
                    absent_rejected += 1;
                }
            }
            _ => {}
        }
    }
    let frac = normal_ok as f64 / normal as f64;
    ensure(ds.records.len() == 500, || format!("{} records generated", ds.records.len()))?;
    ensure(frac >= 0.95, || format!("only {normal_ok}/{normal} normal images usable and on target"))?;
    ensure(absent > 0 && absent_rejected == absent, || format!("{absent_rejected}/{absent} absent-reflex images rejected"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for k in 0..50 {
        let (w, h) = (16, 16);
        let scores: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0..64) as f64).collect();
        let mask = if k % 2 == 0 {
            Mask::from_fn(w, h, |_, _| true)
        } else {
            Mask::disk(w, h, 7.5, 7.5, 7.0)
        };
        let want = hysteresis_oracle(w, h, &scores, &mask.bits);
        let report = detect_reflexes(&WhitenessMap::from_scores(w, h, scores.clone(), mask));
        let got: BTreeSet<Vec<usize>> = report.components.iter().map(|c| c.region.pixels.clone()).collect();
        ensure(got == want, || format!("map {k}: hysteresis components differ from the flood-fill oracle"))?;
    }
    Ok(format!(
        "{normal_ok}/{normal} normal usable within 10% of pupil radius ({:.1}%), {absent_rejected}/{absent} absent rejected, 50 hysteresis maps match",
        100.0 * frac
    ))
}

// ------------------------------------------------------------------ training

fn gradient_check() -> Outcome {
    let (d, hidden, n) = (24, 32, 12);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for init in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + init);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let head = HeadModel::init("synthetic", Normalization::identity(d), hidden, Activation::Relu, 500 + init);
        let (_, grads) = head.loss_and_gradients(&xs, &ys).map_err(|e| e.to_string())?;
        let analytic = grads.blocks();
        let sizes: Vec<usize> = head.blocks().iter().map(|(_, b)| b.len()).collect();
        let total: usize = sizes.iter().sum();
        for _ in 0..200 {
            let mut flat = rng.gen_range(0..total);
            let mut block = 0;
            while flat >= sizes[block] {
                flat -= sizes[block];
                block += 1;
            }
            let h = 1e-4;
            let loss_at = |delta: f64| {
                let mut m = head.clone();
                m.blocks_mut()[block].1[flat] += delta;
                m.loss(&xs, &ys).unwrap()
            };
            let (lp, l0, lm) = (loss_at(h), loss_at(0.0), loss_at(-h));
            // A ReLU kink inside [-h, h] shows up as a jump between the one-sided slopes.
            if ((lp - l0) - (l0 - lm)).abs() > 1e-6 * h.max((lp - l0).abs()) && ((lp - l0) - (l0 - lm)).abs() > 1e-9 {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[block].1[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    ensure(skipped < 30, || format!("{skipped} of 600 samples straddled a ReLU kink"))?;
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("3 initialisations x 200 weights, max relative error {worst:.2e}, {skipped} kink samples skipped"))
}

fn adamw_oracle() -> Outcome {
    let cfg = TrainConfig::default();
    let mut p = vec![1.0];
    adamw_step(&mut p, &[1.0], &mut AdamState::new(1), &cfg, 1, "w").map_err(|e| e.to_string())?;
    ensure((p[0] - 0.998990).abs() < 1e-6, || format!("theta=1, g=1 gave {}", p[0]))?;
    let mut z = vec![0.7, -2.5];
    adamw_step(&mut z, &[0.0, 0.0], &mut AdamState::new(2), &cfg, 1, "w").map_err(|e| e.to_string())?;
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    ensure((z[0] - 0.7 * decay).abs() < 1e-12 && (z[1] + 2.5 * decay).abs() < 1e-12, || format!("zero gradient gave {z:?}"))?;
    Ok(format!("one step from theta=1 with g=1 gives {:.6}; zero gradient decays exactly", p[0]))
}

struct EndToEnd {
    _dir: tempfile::TempDir,
    prepared: workflow::Prepared,
    bundle: ModelBundle,
    version: String,
}

fn end_to_end(slot: &mut Option<EndToEnd>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        n_subjects: 1000,
        abnormal_fraction: 0.28,
        noise: 2.0,
        seed: 2024,
        ..SynthConfig::default()
    };
    let ds = generate(&synth, Exec::Parallel).map_err(|e| e.to_string())?;
    let manifest = write_dataset(&ds, dir.path(), Exec::Parallel).map_err(|e| e.to_string())?;
    let cfg = AppConfig::default();
    ensure(
        (cfg.split.train, cfg.split.validation, cfg.split.test) == (0.5, 0.25, 0.25),
        || "default split is not 50/25/25".into(),
    )?;
    let prepared = workflow::prepare(&manifest, &cfg, 7, &FallbackDetector, Exec::Parallel).map_err(|e| e.to_string())?;
    let train_subjects: BTreeSet<&str> =
        prepared.manifest.entries.iter().filter(|e| e.split == Split::Train).map(|e| e.subject_id.as_str()).collect();
    ensure(
        prepared.manifest.entries.iter().all(|e| e.split == Split::Train || !train_subjects.contains(e.subject_id.as_str())),
        || "split is not subject-exclusive".into(),
    )?;
    let providers = Providers::builtin();
    let outcome = workflow::train(&prepared, &cfg, &[0], &providers, "pixel-pca", Exec::Parallel).map_err(|e| e.to_string())?;
    let r = &outcome.test_report;
    let auc = r.roc_auc.unwrap_or(0.0);
    let bytes = outcome.bundle.to_bytes().map_err(|e| e.to_string())?;
    let (bundle, version) = ModelBundle::from_bytes(&bytes).map_err(|e| e.to_string())?;
    *slot = Some(EndToEnd {
        _dir: dir,
        prepared,
        bundle,
        version,
    });
    ensure(r.accuracy >= 0.90 && auc >= 0.95, || format!("test accuracy {:.4}, ROC-AUC {auc:.4}", r.accuracy))?;
    Ok(format!("{} records, {} usable test crops: accuracy {:.4}, ROC-AUC {auc:.4}", manifest.len(), r.n, r.accuracy))
}

fn metrics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for k in 0..200 {
        let n = rng.gen_range(2..=200);
        let preds: Vec<Prediction> = (0..n)
            .map(|i| {
                let p = (rng.gen_range(0..=20) as f64) / 20.0;
                Prediction {
                    id: i.to_string(),
                    truth: if rng.gen_bool(0.4) { Label::Abnormal } else { Label::Normal },
                    probabilities: [1.0 - p, p],
                }
            })
            .collect();
        let pos = preds.iter().filter(|p| p.truth == Label::Abnormal).count();
        if pos == 0 || pos == n || pos * (n - pos) > 10_000 {
            continue;
        }
        let r = eval_report(&preds).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for p in &preds {
            // Ties go to the abnormal class.
            let said_abnormal = p.probabilities[1] >= p.probabilities[0];
            match (p.truth == Label::Abnormal, said_abnormal) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        ensure(
            r.accuracy == div(tp + tn, n)
                && r.precision == div(tp, tp + fp)
                && r.recall == div(tp, tp + fn_)
                && r.specificity == div(tn, tn + fp)
                && r.f1 == div(2 * tp, 2 * tp + fp + fn_),
            || format!("set {k}: report {r:?} differs from counts tp={tp} fp={fp} fn={fn_} tn={tn}"),
        )?;
        let mut wins = 0.0;
        for a in preds.iter().filter(|p| p.truth == Label::Abnormal) {
            for b in preds.iter().filter(|p| p.truth == Label::Normal) {
                wins += match a.probabilities[1].partial_cmp(&b.probabilities[1]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        let brute = wins / (pos * (n - pos)) as f64;
        let scores: Vec<f64> = preds.iter().map(|p| p.probabilities[1]).collect();
        let truth: Vec<Label> = preds.iter().map(|p| p.truth).collect();
        ensure(roc_auc(&scores, &truth) == Some(brute) && r.roc_auc == Some(brute), || {
            format!("set {k}: AUC {:?} vs brute force {brute}", r.roc_auc)
        })?;
    }
    Ok("confusion formulas and pairwise AUC match exactly on random tied score sets".into())
}

fn ensemble_checks() -> Outcome {
    let c = combine(&[[0.8, 0.2], [0.6, 0.4]]);
    ensure((c[0] - 0.7).abs() < 1e-12 && (c[1] - 0.3).abs() < 1e-12, || format!("combine gave {c:?}"))?;
    let providers = Providers::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for k in 0..20 {
        let members: Vec<HeadModel> = (0..rng.gen_range(2..=5))
            .map(|_| HeadModel::init("pixel-pca", Normalization::identity(256), 16, Activation::Relu, rng.gen()))
            .collect();
        let image = RgbImage::from_fn(40, 40, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let a = Model::Ensemble(Ensemble::new(members).map_err(|e| e.to_string())?)
            .predict(&providers, &image)
            .map_err(|e| e.to_string())?;
        let b = Model::Ensemble(Ensemble::new(shuffled).map_err(|e| e.to_string())?)
            .predict(&providers, &image)
            .map_err(|e| e.to_string())?;
        ensure(a == b, || format!("ensemble {k}: {a:?} vs permuted {b:?}"))?;
    }
    Ok("(0.8,0.2)+(0.6,0.4) -> (0.7,0.3); 20 random ensembles permutation invariant".into())
}

fn augmentation_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let img = RgbImage::from_fn(37, 29, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    ensure(rotate(&img, 0.0) == img, || "zero rotation changed pixels".into())?;
    let mirror = AugmentationSpec::new(AugmentKind::Mirroring, 1.0);
    let twice = apply(&mirror, &apply(&mirror, &img, 1).map_err(|e| e.to_string())?, 2).map_err(|e| e.to_string())?;
    ensure(twice == img, || "double mirror is not the identity".into())?;
    ensure(apply_mix(&AugmentationMix::none(), &img, 3).map_err(|e| e.to_string())? == img, || "empty mix changed pixels".into())?;
    let mix = AugmentationMix::mix_best();
    for seed in 0..20 {
        let a = apply_mix(&mix, &img, seed).map_err(|e| e.to_string())?;
        let b = apply_mix(&mix, &img, seed).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("mix-best not deterministic at seed {seed}"))?;
    }
    let names: BTreeSet<&str> = mix.specs.iter().map(|s| s.kind.name()).collect();
    let want: BTreeSet<&str> = ["color_jitter", "equalize", "sharpness", "translation", "perspective", "rotation"].into();
    ensure(names == want && mix.specs.len() == 6, || format!("mix-best contains {names:?}"))?;
    Ok("identities bit-exact, 20 seeds deterministic, mix-best = {color jitter, equalize, sharpness, translation, perspective, rotation}".into())
}

// ---------------------------------------------------------- interpretability

fn peak_map(x: usize, y: usize) -> AttentionMap {
    let mut v = vec![0.1; 224 * 224];
    v[y * 224 + x] = 1.0;
    AttentionMap::new(224, 224, v, MapSource::External).unwrap()
}

fn interpretability() -> Outcome {
    let r = |x, y| radial_focus(&peak_map(x, y), FocusMode::Argmax).unwrap().r_norm;
    let (c, corner, mid) = (r(112, 112), r(0, 0), r(56, 56));
    ensure(c == 0.0 && corner == 1.0 && mid == 0.5, || format!("analytic cases gave {c}, {corner}, {mid}"))?;

    // Normal reflexes centred, abnormal ones displaced crescents.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        n_subjects: 300,
        abnormal_fraction: 0.4,
        noise: 2.0,
        seed: 99,
        kinds: vec![AbnormalityKind::OffCenterCrescent],
        ..SynthConfig::default()
    };
    let ds = generate(&synth, Exec::Parallel).map_err(|e| e.to_string())?;
    let manifest = write_dataset(&ds, dir.path(), Exec::Parallel).map_err(|e| e.to_string())?;
    let cfg = AppConfig::default();
    let prepared = workflow::prepare(&manifest, &cfg, 7, &FallbackDetector, Exec::Parallel).map_err(|e| e.to_string())?;
    let train: Vec<_> = prepared.crops(Split::Train).into_iter().map(|x| (x.image, x.label)).collect();
    let val: Vec<_> = prepared.crops(Split::Validation).into_iter().map(|x| (x.image, x.label)).collect();
    let providers = Providers::builtin();
    let pca = providers.get("pixel-pca").map_err(|e| e.to_string())?;
    let (head, _) = train_head(pca, &train, &val, &cfg.train, &AugmentationMix::none(), Exec::Parallel).map_err(|e| e.to_string())?;
    let model = Model::Single(head);
    let mut items = Vec::new();
    for x in prepared.crops(Split::Test).iter().take(120) {
        let map = occlusion_map(&model, &providers, &x.image, &OcclusionConfig::default(), Exec::Parallel).map_err(|e| e.to_string())?;
        let p = model.predict(&providers, &x.image).map_err(|e| e.to_string())?;
        let predicted = if p[1] >= p[0] { Label::Abnormal } else { Label::Normal };
        items.push((radial_focus(&map, FocusMode::Argmax).map_err(|e| e.to_string())?.r_norm, x.label, predicted == x.label));
    }
    let report = radial_report(&items).map_err(|e| e.to_string())?;
    let median = |label: Label| {
        let mut v: Vec<f64> = items.iter().filter(|i| i.1 == label && i.2).map(|i| i.0).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (v.len(), if v.is_empty() { f64::NAN } else { interp_quantile(&v, 0.5) })
    };
    let ((nn, mn), (na, ma)) = (median(Label::Normal), median(Label::Abnormal));
    let ks = report
        .comparisons
        .iter()
        .find(|c| (c.a == "normal_correct" && c.b == "abnormal_correct") || (c.b == "normal_correct" && c.a == "abnormal_correct"))
        .ok_or("no normal_correct vs abnormal_correct comparison")?;
    ensure(mn < ma, || format!("median r_norm normal {mn:.3} (n={nn}) not below abnormal {ma:.3} (n={na})"))?;
    ensure(ks.ks.p_value < 0.001, || format!("KS p = {:.3e}", ks.ks.p_value))?;

    // Two separated Gaussian clusters in 16 dimensions.
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for cluster in 0..2 {
        for _ in 0..50 {
            features.push((0..16).map(|_| rng.sample(normal) + if cluster == 1 { 10.0 } else { 0.0 }).collect::<Vec<f64>>());
            labels.push(cluster);
        }
    }
    let tcfg = TsneConfig::default();
    let (p, _) = conditional_affinities(&features, tcfg.perplexity);
    let n = features.len();
    let mut worst_bits: f64 = 0.0;
    for i in 0..n {
        let h: f64 = (0..n).filter(|&j| j != i && p[i * n + j] > 0.0).map(|j| -p[i * n + j] * p[i * n + j].log2()).sum();
        worst_bits = worst_bits.max((h - tcfg.perplexity.log2()).abs());
    }
    let emb = tsne_embed(&features, &tcfg).map_err(|e| e.to_string())?;
    let mut agree = 0;
    for i in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| (emb.coords[i][0] - emb.coords[j][0]).powi(2) + (emb.coords[i][1] - emb.coords[j][1]).powi(2);
                d(a).partial_cmp(&d(b)).unwrap()
            })
            .unwrap();
        agree += (labels[nearest] == labels[i]) as usize;
    }
    let nn_frac = agree as f64 / n as f64;
    ensure(worst_bits <= 1e-5, || format!("row entropy off by {worst_bits:.2e} bits"))?;
    ensure(nn_frac >= 0.95, || format!("1-NN agreement {nn_frac:.3}"))?;
    Ok(format!(
        "radial 0/1/0.5 exact; median r_norm normal {mn:.3} (n={nn}) < abnormal {ma:.3} (n={na}), KS p={:.1e}; t-SNE entropy error {worst_bits:.1e} bits, 1-NN {nn_frac:.2}",
        ks.ks.p_value
    ))
}

// ------------------------------------------------------------------ feedback

fn feedback_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 200;
    let confidences: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.0)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[a].partial_cmp(&confidences[b]).unwrap().then(a.cmp(&b)));
    let confident: BTreeSet<usize> = order[n / 2..].iter().copied().collect();
    // Every property shifts with confidence, brightness in the "wrong" direction;
    // only the four feedback properties may yield rules, with fixed directions.
    let props: Vec<PropertyVector> = (0..n)
        .map(|i| {
            let s = if confident.contains(&i) { 1.0 } else { 0.0 };
            let mut v = |base: f64| base + 10.0 * s + rng.gen_range(0.0..1.0);
            PropertyVector {
                contrast: v(20.0),
                brightness: v(100.0),
                redness: v(120.0) - 20.0 * s,
                energy: v(5.0),
                entropy: v(3.0),
                sharpness: v(50.0),
                homogeneity: v(0.5),
                fourier_energy: v(1e4),
                compactness: v(0.3),
                lbp: v(5.0),
                intensity_ratio: v(2.0),
                image_size: (64, 64),
            }
        })
        .collect();
    let cfg = FeedbackConfig::default();
    let rules = fit_feedback_rules(&confidences, &props, &cfg).map_err(|e| e.to_string())?;
    let fixed: BTreeMap<&str, Direction> = [
        ("contrast", Direction::HigherIsConfident),
        ("brightness", Direction::LowerIsConfident),
        ("redness", Direction::LowerIsConfident),
        ("intensity_ratio", Direction::HigherIsConfident),
    ]
    .into();
    let names: BTreeSet<&str> = rules.iter().map(|r| r.property.as_str()).collect();
    ensure(names == fixed.keys().copied().collect(), || format!("rules emitted for {names:?}"))?;
    for r in &rules {
        ensure(r.direction == fixed[r.property.as_str()], || format!("{} has direction {:?}", r.property, r.direction))?;
        let values: Vec<f64> = confident.iter().map(|&i| props[i].get(&r.property).unwrap()).collect();
        let q = if r.direction == Direction::HigherIsConfident { 0.25 } else { 0.75 };
        let want = interp_quantile(&values, q);
        ensure((r.threshold - want).abs() < 1e-9, || format!("{} threshold {} want {want}", r.property, r.threshold))?;
    }

    let null: Vec<PropertyVector> = (0..n).map(|_| props[rng.gen_range(0..n)].clone()).collect();
    let shuffled_conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.0)).collect();
    let null_rules = fit_feedback_rules(&shuffled_conf, &null, &cfg).map_err(|e| e.to_string())?;
    ensure(null_rules.is_empty(), || format!("null split emitted {null_rules:?}"))?;

    for p in props.iter().take(40) {
        let mut prev = usize::MAX;
        for step in 0..=50 {
            let c = 0.5 + step as f64 / 100.0;
            let k = generate_feedback(&rules, p, c, &cfg).len();
            ensure(k <= prev, || format!("feedback grew from {prev} to {k} at confidence {c}"))?;
            prev = k;
        }
    }
    Ok(format!(
        "rules only for contrast/brightness/redness/intensity_ratio with fixed directions and q25/q75 thresholds; no rules on a null split; feedback monotone in confidence"
    ))
}

// ------------------------------------------------------------------- service

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn post(body: Vec<u8>) -> Request<Body> {
    Request::post("/screen").body(Body::from(body)).unwrap()
}

fn service_checks(e2e: Option<&EndToEnd>) -> Outcome {
    let e2e = e2e.ok_or("end-to-end bundle unavailable")?;
    let test: Vec<_> = e2e
        .prepared
        .manifest
        .entries
        .iter()
        .zip(&e2e.prepared.records)
        .filter(|(m, _)| m.split == Split::Test)
        .collect();
    let normal = test
        .iter()
        .find(|(m, r)| m.label == Label::Normal && !r.mirrored)
        .ok_or("no normal test record")?;
    let normal_png = normal.1.image.encode_png();
    let absent = generate(
        &SynthConfig {
            n_subjects: 4,
            abnormal_fraction: 1.0,
            kinds: vec![AbnormalityKind::AbsentReflex],
            seed: 5,
            ..SynthConfig::default()
        },
        Exec::Sequential,
    )
    .map_err(|e| e.to_string())?;
    let absent_png = absent.records[0].record.image.encode_png();

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let state = AppState::new(None);
        let app = router(state.clone(), redreflex::config::MAX_UPLOAD_BYTES);
        let (s, _) = call(&app, post(normal_png.clone())).await;
        ensure(s == StatusCode::SERVICE_UNAVAILABLE, || format!("before load /screen gave {s}"))?;

        let screener = Screener::new(e2e.bundle.clone(), e2e.version.clone(), Providers::builtin(), Arc::new(FallbackDetector))
            .map_err(|e| e.to_string())?;
        state.install(screener);

        let (s, body) = call(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
        let health: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        ensure(s == StatusCode::OK && health["status"] == "ok" && health["model_version"] == e2e.version.as_str(), || {
            format!("/health gave {s} {health}")
        })?;

        let (s, body) = call(&app, post(normal_png.clone())).await;
        let r: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let probs: Vec<f64> = r["probabilities"].as_array().ok_or("no probabilities")?.iter().filter_map(Value::as_f64).collect();
        let conf = r["confidence"].as_f64().unwrap_or(0.0);
        ensure(
            s == StatusCode::OK
                && r["usable"] == true
                && r["verdict"] == "usable"
                && r["label"] == "normal"
                && probs.len() == 2
                && (probs[0] + probs[1] - 1.0).abs() < 1e-9
                && (0.5..=1.0).contains(&conf)
                && r["model_version"] == e2e.version.as_str(),
            || format!("normal fixture gave {s} {r}"),
        )?;
        let t = &r["timings"];
        let stages: f64 = ["decode_ms", "detect_ms", "reflex_ms", "properties_ms", "classify_ms", "feedback_ms"]
            .iter()
            .map(|k| t[*k].as_f64().unwrap_or(f64::NAN))
            .sum();
        let total = t["total_ms"].as_f64().unwrap_or(f64::NAN);
        ensure((stages - total).abs() <= 0.05 * total, || format!("stage timings sum to {stages} of {total} ms"))?;

        let (_, again) = call(&app, post(normal_png.clone())).await;
        let r2: Value = serde_json::from_slice(&again).map_err(|e| e.to_string())?;
        ensure(
            serde_json::to_string(&r["probabilities"]).unwrap() == serde_json::to_string(&r2["probabilities"]).unwrap(),
            || "repeated request changed the probabilities".into(),
        )?;
        let (a, b) = tokio::join!(call(&app, post(normal_png.clone())), call(&app, post(normal_png.clone())));
        let pa: Value = serde_json::from_slice(&a.1).unwrap();
        let pb: Value = serde_json::from_slice(&b.1).unwrap();
        ensure(pa["probabilities"] == pb["probabilities"] && pa["probabilities"] == r["probabilities"], || {
            "concurrent requests disagree".into()
        })?;

        let (s, body) = call(&app, post(absent_png)).await;
        let r: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let verdict = r["verdict"].as_str().unwrap_or("");
        ensure(
            s == StatusCode::OK
                && r["usable"] == false
                && matches!(verdict, "no_reflex" | "too_small")
                && r["label"].is_null()
                && r["probabilities"].is_null()
                && r["feedback"].as_array().is_some_and(|f| !f.is_empty()),
            || format!("absent-reflex fixture gave {s} {r}"),
        )?;

        let (s, _) = call(&app, post(Vec::new())).await;
        ensure(s == StatusCode::BAD_REQUEST, || format!("empty body gave {s}"))?;
        let (s, _) = call(&app, post(b"not an image".to_vec())).await;
        ensure(s == StatusCode::BAD_REQUEST, || format!("garbage body gave {s}"))?;
        Ok(format!("health, normal (usable, normal), absent reflex ({verdict}, feedback), identical repeats, 503 before load, 400 on undecodable"))
    })
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut gate = Gate {
        failures: 0,
        lines: Vec::new(),
    };
    gate.check("property oracle", secs(5), property_oracle);
    gate.check("KS correctness and null calibration", secs(30), ks_correctness);
    gate.check("reflex detection", secs(60), reflex_detection);
    gate.check("gradient check", secs(10), gradient_check);
    gate.check("AdamW single step", secs(1), adamw_oracle);
    let mut e2e = None;
    gate.check("end-to-end learning", secs(600), || end_to_end(&mut e2e));
    gate.check("metrics identities", secs(10), metrics_identities);
    gate.check("ensemble", secs(10), ensemble_checks);
    gate.check("augmentations", secs(10), augmentation_checks);
    gate.check("interpretability", secs(180), interpretability);
    gate.check("feedback", secs(10), feedback_checks);
    gate.check("service", secs(60), || service_checks(e2e.as_ref()));

    let passed = gate.lines.len() - gate.failures;
    println!("acceptance: {passed}/{} criteria passed", gate.lines.len());
    if gate.failures > 0 {
        std::process::exit(1);
    }
}
