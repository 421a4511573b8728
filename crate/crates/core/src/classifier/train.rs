//! AdamW training of the head with best-validation-loss checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{Activation, Gradients, HeadModel, Normalization, HIDDEN_UNITS};
use super::provider::{embed_batch, EmbeddingProvider};
use crate::augment::{apply_mix, derive_seed, sample_seed, AugmentationMix};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::raster::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            max_epochs: 50,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            hidden: HIDDEN_UNITS,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.max_epochs >= 1
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.hidden >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter block.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update with decoupled weight decay; `t` counts from 1.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    t: u64,
    block: &str,
) -> Result<()> {
    let fail = |message: String| Error::Training {
        block: block.to_string(),
        message,
    };
    if t == 0 {
        return Err(fail("step index starts at 1".into()));
    }
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(fail("parameter, gradient and state shapes differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(fail(format!("non-finite gradient at index {i}")));
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * *p;
    }
    Ok(())
}

/// Features with their labels; every label must be normal or abnormal.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl FeatureSet {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::arg("features and labels differ in length"));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn classes(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.class_index().ok_or_else(|| Error::Data("unlabeled record in a labelled set".into())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn check_sets(train: &FeatureSet, val: &FeatureSet) -> Result<(Vec<usize>, Vec<usize>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let ty = train.classes()?;
    let vy = val.classes()?;
    if !(ty.contains(&0) && ty.contains(&1)) {
        return Err(Error::Data("training set must contain both classes".into()));
    }
    Ok((ty, vy))
}

fn evaluate_loss(head: &HeadModel, val: &[Vec<f64>], vy: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &y) in val.iter().zip(vy) {
        let f = head.forward_normalized(x);
        loss += super::head::cross_entropy(f.logits, y);
        correct += (f.predicted().class_index() == Some(y)) as usize;
    }
    (loss / val.len() as f64, correct as f64 / val.len() as f64)
}

/// Core loop. `epoch_features(e)` supplies the (raw) training features for
/// epoch `e`, allowing per-epoch augmentation.
fn fit(
    provider: &str,
    norm: Normalization,
    ty: &[usize],
    val: &FeatureSet,
    vy: &[usize],
    cfg: &TrainConfig,
    mut epoch_features: impl FnMut(usize) -> Result<Vec<Vec<f64>>>,
) -> Result<(HeadModel, TrainingLog)> {
    cfg.validate()?;
    let mut head = HeadModel::init(provider, norm, cfg.hidden, cfg.activation, cfg.seed);
    let val_n: Vec<Vec<f64>> = val.features.iter().map(|x| head.norm.apply(x)).collect();
    let mut states: Vec<AdamState> = head.blocks().iter().map(|(_, b)| AdamState::new(b.len())).collect();
    let mut best: Option<(HeadModel, f64)> = None;
    let mut log = TrainingLog::default();
    let mut t = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let raw = epoch_features(epoch)?;
        if raw.iter().any(|x| x.len() != head.d) {
            return Err(Error::arg("training feature length does not match the head"));
        }
        let xs: Vec<Vec<f64>> = raw.iter().map(|x| head.norm.apply(x)).collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| ty[i]).collect();
            let (loss, grads) = head.backprop(&bx, &by);
            epoch_loss += loss * batch.len() as f64;
            t += 1;
            let Gradients { w1, b1, w2, b2 } = grads;
            for (((name, params), g), state) in head.blocks_mut().into_iter().zip([w1, b1, w2, b2]).zip(&mut states) {
                adamw_step(params, &g, state, cfg, t, name)?;
            }
        }
        let (val_loss, val_accuracy) = evaluate_loss(&head, &val_n, vy);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / xs.len() as f64,
            val_loss,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_accuracy:.3}", epoch_loss / xs.len() as f64);
        if best.as_ref().is_none_or(|(_, b)| val_loss < *b) {
            best = Some((head.clone(), val_loss));
            log.best_epoch = epoch;
            log.best_val_loss = val_loss;
        }
    }
    let (model, _) = best.expect("at least one epoch ran");
    Ok((model, log))
}

/// Trains a head on precomputed features. Normalisation is fitted on `train`.
pub fn train_on_features(
    provider: &str,
    train: &FeatureSet,
    val: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<(HeadModel, TrainingLog)> {
    let (ty, vy) = check_sets(train, val)?;
    let norm = Normalization::fit(&train.features)?;
    fit(provider, norm, &ty, val, &vy, cfg, |_| Ok(train.features.clone()))
}

/// Trains a head on images: each is resized to the model input and embedded.
/// With a nonempty `mix`, training images are re-augmented every epoch using
/// per-sample seeds; validation images never are. Normalisation statistics
/// come from the unaugmented training embeddings.
pub fn train_head(
    provider: &dyn EmbeddingProvider,
    train: &[(RgbImage, Label)],
    val: &[(RgbImage, Label)],
    cfg: &TrainConfig,
    mix: &AugmentationMix,
    exec: Exec,
) -> Result<(HeadModel, TrainingLog)> {
    cfg.validate()?;
    mix.validate()?;
    let embed = |set: &[(RgbImage, Label)]| -> Result<FeatureSet> {
        let images: Vec<RgbImage> = set.iter().map(|(i, _)| i.clone()).collect();
        FeatureSet::new(embed_batch(exec, provider, &images)?, set.iter().map(|(_, l)| *l).collect())
    };
    let base = embed(train)?;
    let val_set = embed(val)?;
    let (ty, vy) = check_sets(&base, &val_set)?;
    let norm = Normalization::fit(&base.features)?;
    fit(provider.name(), norm, &ty, &val_set, &vy, cfg, |epoch| {
        if mix.is_empty() {
            return Ok(base.features.clone());
        }
        let indexed: Vec<usize> = (0..train.len()).collect();
        par::try_map(exec, &indexed, |&i| {
            let img = apply_mix(mix, &train[i].0, sample_seed(cfg.seed, epoch as u64, i as u64))?;
            super::provider::embed_image(provider, &img)
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
    /// Weights skipped because the finite-difference step crossed a ReLU kink.
    pub skipped: usize,
}

/// Denominator floor for the relative error, so that gradients at the level of
/// floating-point noise do not dominate.
const REL_FLOOR: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-4;

/// Compares analytic gradients with central differences on up to `n_weights`
/// randomly chosen parameters.
pub fn gradient_check(head: &HeadModel, xs: &[Vec<f64>], ys: &[usize], n_weights: usize, seed: u64) -> Result<GradientCheck> {
    if xs.is_empty() {
        return Err(Error::arg("gradient check needs a nonempty batch"));
    }
    let (_, analytic) = head.loss_and_gradients(xs, ys)?;
    let normalized: Vec<Vec<f64>> = xs.iter().map(|x| head.norm.apply(x)).collect();
    let h = head.hidden;
    // pre-activations per sample, to detect kink crossings
    let pre: Vec<Vec<f64>> = normalized
        .iter()
        .map(|xn| {
            let mut z = head.b1.clone();
            for (i, &x) in xn.iter().enumerate() {
                for j in 0..h {
                    z[j] += x * head.w1[i * h + j];
                }
            }
            z
        })
        .collect();
    let sizes: Vec<usize> = head.blocks().iter().map(|(_, b)| b.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = (0..total).collect();
    picks.shuffle(&mut rng);

    let mut out = GradientCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = head.clone();
    for flat in picks {
        if out.checked >= n_weights {
            break;
        }
        let (block, idx) = locate(&sizes, flat);
        let crosses = head.activation == Activation::Relu
            && match block {
                0 => {
                    let (i, j) = (idx / h, idx % h);
                    normalized
                        .iter()
                        .zip(&pre)
                        .any(|(xn, z)| xn[i] != 0.0 && z[j].abs() <= FD_STEP * xn[i].abs())
                }
                1 => pre.iter().any(|z| z[idx].abs() <= FD_STEP),
                _ => false,
            };
        if crosses {
            out.skipped += 1;
            continue;
        }
        let original = head.blocks()[block].1[idx];
        let mut eval_at = |v: f64| -> Result<f64> {
            probe.blocks_mut()[block].1[idx] = v;
            probe.loss(xs, ys)
        };
        let plus = eval_at(original + FD_STEP)?;
        let minus = eval_at(original - FD_STEP)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.blocks()[block].1[idx];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.max_absolute_error = out.max_absolute_error.max(abs);
        out.max_relative_error = out.max_relative_error.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (b, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (b, flat);
        }
        flat -= n;
    }
    unreachable!("index within total parameter count")
}
