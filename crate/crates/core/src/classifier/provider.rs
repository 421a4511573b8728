//! Frozen feature extractors that turn a model-input image into a vector.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::imaging::luma;
use crate::par::{self, Exec};
use crate::raster::RgbImage;

/// Side length every image is resized to before embedding.
pub const INPUT_SIZE: usize = 224;

/// A frozen embedding backbone. Implementations must be deterministic and
/// safe to call from several threads at once.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Embeds an `INPUT_SIZE` x `INPUT_SIZE` image.
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Resizes to the model input size (bilinear); no-op when already that size.
pub fn model_input(image: &RgbImage) -> RgbImage {
    if image.width() == INPUT_SIZE && image.height() == INPUT_SIZE {
        image.clone()
    } else {
        image.resize(INPUT_SIZE, INPUT_SIZE)
    }
}

/// Resizes `image` and embeds it, checking the provider's output contract.
pub fn embed_image(provider: &dyn EmbeddingProvider, image: &RgbImage) -> Result<Vec<f64>> {
    embed_model_input(provider, &model_input(image))
}

/// Like [`embed_image`] for an image already at the model input size.
pub fn embed_model_input(provider: &dyn EmbeddingProvider, input: &RgbImage) -> Result<Vec<f64>> {
    let wrap = |message: String| Error::Provider {
        provider: provider.name().to_string(),
        message,
    };
    let v = provider.embed(input).map_err(|e| match e {
        e @ Error::Provider { .. } => e,
        other => wrap(other.to_string()),
    })?;
    if v.len() != provider.dim() {
        return Err(wrap(format!("returned {} values, expected {}", v.len(), provider.dim())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(wrap("returned non-finite values".into()));
    }
    Ok(v)
}

/// Embeds every image; output order matches input order.
pub fn embed_batch(exec: Exec, provider: &dyn EmbeddingProvider, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
    par::try_map(exec, images, |img| embed_image(provider, img))
}

/// Downsample-and-project provider: luminance averaged over a 16x16 grid of
/// blocks, then projected onto the orthonormal 2-D DCT-II basis and listed in
/// zigzag order (low frequencies first). Needs no weights or fitting.
#[derive(Debug, Default, Clone, Copy)]
pub struct PixelPca;

impl PixelPca {
    pub const NAME: &'static str = "pixel-pca";
    pub const GRID: usize = 16;
}

fn dct_basis() -> &'static [f64] {
    static BASIS: OnceLock<Vec<f64>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = PixelPca::GRID;
        let mut c = vec![0.0; n * n];
        for k in 0..n {
            let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                c[k * n + i] = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        c
    })
}

/// Zigzag traversal of an n x n grid as (row, col) pairs.
fn zigzag(n: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(n * n);
    for s in 0..(2 * n - 1) {
        let cells = (0..n).filter_map(|r| s.checked_sub(r).filter(|&c| c < n).map(|c| (r, c)));
        if s % 2 == 0 {
            let mut v: Vec<_> = cells.collect();
            v.reverse();
            order.extend(v);
        } else {
            order.extend(cells);
        }
    }
    order
}

impl EmbeddingProvider for PixelPca {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        Self::GRID * Self::GRID
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let n = Self::GRID;
        let (w, h) = (image.width(), image.height());
        if w < n || h < n {
            return Err(Error::arg(format!("image {w}x{h} smaller than the {n}x{n} grid")));
        }
        let mut blocks = vec![0.0; n * n];
        for by in 0..n {
            let (y0, y1) = (by * h / n, (by + 1) * h / n);
            for bx in 0..n {
                let (x0, x1) = (bx * w / n, (bx + 1) * w / n);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let [r, g, b] = image.get(x, y);
                        sum += luma(r, g, b);
                    }
                }
                blocks[by * n + bx] = sum / ((x1 - x0) * (y1 - y0)) as f64 / 255.0;
            }
        }
        let c = dct_basis();
        // tmp = C * X, coeffs = tmp * C^T
        let mut tmp = vec![0.0; n * n];
        for k in 0..n {
            for j in 0..n {
                tmp[k * n + j] = (0..n).map(|i| c[k * n + i] * blocks[i * n + j]).sum();
            }
        }
        let mut coeffs = vec![0.0; n * n];
        for k in 0..n {
            for l in 0..n {
                coeffs[k * n + l] = (0..n).map(|j| tmp[k * n + j] * c[l * n + j]).sum();
            }
        }
        Ok(zigzag(n).into_iter().map(|(r, col)| coeffs[r * n + col]).collect())
    }
}

/// Runs an exported backbone in the ONNX interchange format. The model must
/// take a `1x3x224x224` float tensor (ImageNet-normalised RGB) and return the
/// penultimate-layer features as its first output.
#[cfg(feature = "onnx")]
pub struct OnnxFileProvider {
    name: String,
    dim: usize,
    model: tract_onnx::prelude::TypedRunnableModel<tract_onnx::prelude::TypedModel>,
}

#[cfg(feature = "onnx")]
impl OnnxFileProvider {
    pub const NAME: &'static str = "onnx-file";

    pub fn load(path: &std::path::Path) -> Result<Self> {
        use tract_onnx::prelude::*;
        let fail = |e: TractError| Error::Provider {
            provider: Self::NAME.into(),
            message: format!("{}: {e}", path.display()),
        };
        let model = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, INPUT_SIZE, INPUT_SIZE]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(fail)?;
        let mut provider = Self {
            name: Self::NAME.into(),
            dim: 0,
            model,
        };
        provider.dim = provider.run(&RgbImage::filled(INPUT_SIZE, INPUT_SIZE, [0, 0, 0]))?.len();
        Ok(provider)
    }

    fn run(&self, image: &RgbImage) -> Result<Vec<f64>> {
        use tract_onnx::prelude::*;
        const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
        const STD: [f32; 3] = [0.229, 0.224, 0.225];
        let input: Tensor = tract_ndarray::Array4::from_shape_fn((1, 3, INPUT_SIZE, INPUT_SIZE), |(_, c, y, x)| {
            (image.get(x, y)[c] as f32 / 255.0 - MEAN[c]) / STD[c]
        })
        .into();
        let out = self.model.run(tvec!(input.into())).map_err(|e| Error::Provider {
            provider: self.name.clone(),
            message: e.to_string(),
        })?;
        let view = out[0].to_array_view::<f32>().map_err(|e| Error::Provider {
            provider: self.name.clone(),
            message: e.to_string(),
        })?;
        Ok(view.iter().map(|&v| v as f64).collect())
    }
}

#[cfg(feature = "onnx")]
impl EmbeddingProvider for OnnxFileProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.run(image)
    }
}

/// Named providers available to models and ensembles.
#[derive(Clone, Default)]
pub struct Providers {
    map: BTreeMap<String, Arc<dyn EmbeddingProvider>>,
}

impl Providers {
    /// The providers that need no external files (`pixel-pca`).
    pub fn builtin() -> Self {
        let mut p = Self::default();
        p.insert(Arc::new(PixelPca));
        p
    }

    pub fn insert(&mut self, provider: Arc<dyn EmbeddingProvider>) {
        self.map.insert(provider.name().to_string(), provider);
    }

    pub fn get(&self, name: &str) -> Result<&dyn EmbeddingProvider> {
        self.map
            .get(name)
            .map(|p| p.as_ref())
            .ok_or_else(|| Error::config(format!("embedding provider `{name}` is not available")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.map.keys()).finish()
    }
}
