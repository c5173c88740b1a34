//! Main branch and head: the convolutional detector producing the PAD
//! feature `f_p`, fusion with the adapter output `f_t`, and the two-way
//! classifier trained with cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, EdgeMatrix, FeatureStack};
use crate::engine::{glorot_uniform, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Attack = 0,
    Bonafide = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Self::Attack),
            1 => Some(Self::Bonafide),
            _ => None,
        }
    }

    pub fn is_bonafide(self) -> bool {
        self == Self::Bonafide
    }
}

/// One labeled presentation: the raw face crop for the main branch and the
/// frozen face-task features for the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub raw_input: Tensor<T>,
    pub feature_stack: FeatureStack<T>,
    pub label: Label,
    pub dataset_id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            raw_input: self.raw_input.cast(),
            feature_stack: self.feature_stack.cast(),
            label: self.label,
            dataset_id: self.dataset_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Raw input as `[c, h, w]`.
    pub input: [usize; 3],
    /// Output channels of the conv -> relu -> 2x2 average pool blocks.
    pub channels: Vec<usize>,
    /// Width of `f_p`.
    pub d_p: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { input: [3, 32, 32], channels: vec![8, 16, 32], d_p: 64 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, mut h, mut w] = self.input;
        if c == 0 || self.d_p == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("detector: input channels, block channels and d_p must be positive".into()));
        }
        for (i, _) in self.channels.iter().enumerate() {
            if h < 3 || w < 3 {
                return Err(Error::Config(format!(
                    "detector.input: block {i} would see a {h}x{w} map; raise the input size or drop a block"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

/// Complete model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub adapter: AdapterConfig,
    /// When false the classifier sees `f_p` alone (baseline).
    pub use_adapter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { detector: DetectorConfig::default(), adapter: AdapterConfig::default(), use_adapter: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.use_adapter {
            self.adapter.validate()?;
        }
        Ok(())
    }

    /// Width of the fused feature `f_h`.
    pub fn fused_dim(&self) -> usize {
        self.detector.d_p + if self.use_adapter { self.adapter.d_out } else { 0 }
    }

    pub fn conv_names(block: usize) -> (String, String) {
        (format!("detector.conv{block}.w"), format!("detector.conv{block}.b"))
    }

    /// Seeded initialization: Glorot-uniform weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = self.detector.input[0];
        for (i, &cout) in self.detector.channels.iter().enumerate() {
            let (w, b) = Self::conv_names(i);
            params.insert(w, glorot_uniform(vec![cout, cin, 3, 3], cin * 9, cout * 9, &mut rng), true)?;
            params.insert(b, Tensor::zeros(vec![cout]), true)?;
            cin = cout;
        }
        let d_p = self.detector.d_p;
        params.insert("detector.fc.w", glorot_uniform(vec![cin, d_p], cin, d_p, &mut rng), true)?;
        params.insert("detector.fc.b", Tensor::zeros(vec![d_p]), true)?;
        if self.use_adapter {
            self.adapter.init_params(&mut params, &mut rng)?;
        }
        let fused = self.fused_dim();
        params.insert("classifier.w", glorot_uniform(vec![fused, 2], fused, 2, &mut rng), true)?;
        params.insert("classifier.b", Tensor::zeros(vec![2]), true)?;
        Ok(params)
    }

    pub fn check_sample<T: Scalar>(&self, sample: &Sample<T>) -> Result<()> {
        if sample.raw_input.shape() != self.detector.input {
            return Err(Error::shape(
                "detect_features",
                format!("raw input {:?}, model expects {:?}", sample.raw_input.shape(), self.detector.input),
            ));
        }
        if !sample.raw_input.all_finite() || !sample.feature_stack.levels().iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("sample from `{}`", sample.dataset_id)));
        }
        Ok(())
    }
}

/// Main-branch feature `f_p` of length `d_p`.
pub fn detect_features<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    raw_input: &Tensor<T>,
    cfg: &DetectorConfig,
) -> Result<Var> {
    if raw_input.shape() != cfg.input {
        return Err(Error::shape("detect_features", format!("raw input {:?}, expected {:?}", raw_input.shape(), cfg.input)));
    }
    let mut x = g.constant(raw_input.clone());
    for i in 0..cfg.channels.len() {
        let (w, b) = ModelConfig::conv_names(i);
        let (w, b) = (g.param(params, &w)?, g.param(params, &b)?);
        x = g.conv2d(x, w, b, 1)?;
        x = g.relu(x);
        x = g.avg_pool2(x)?;
    }
    let x = g.adaptive_avg_pool(x, (1, 1))?;
    let x = g.flatten(x);
    let (w, b) = (g.param(params, "detector.fc.w")?, g.param(params, "detector.fc.b")?);
    let y = g.linear(x, w, b)?;
    Ok(g.flatten(y))
}

/// `f_h = f_p ⊕ f_t`.
pub fn fuse<T: Scalar>(g: &mut Graph<'_, T>, f_p: Var, f_t: Var) -> Result<Var> {
    g.concat(&[f_p, f_t])
}

/// Two logits `[1×2]` (attack, bona fide).
pub fn classify<'a, T: Scalar>(g: &mut Graph<'a, T>, params: &'a ParamSet<T>, f_h: Var) -> Result<Var> {
    let w = g.param(params, "classifier.w")?;
    let b = g.param(params, "classifier.b")?;
    let k = g.value(f_h).len();
    if g.shape(w)[0] != k {
        return Err(Error::shape("classify", format!("fused feature of length {k}, classifier expects {}", g.shape(w)[0])));
    }
    g.linear(f_h, w, b)
}

/// Bona-fide probability from a pair of logits.
pub fn bonafide_score<T: Scalar>(logits: &[T]) -> f64 {
    let (a, b) = (logits[0].to_f64_lossy(), logits[1].to_f64_lossy());
    // softmax over two entries is the logistic of the difference
    1.0 / (1.0 + (a - b).exp())
}

/// Mean binary cross-entropy of explicit bona-fide probabilities.
pub fn binary_cross_entropy(predicted_bonafide: &[f64], labels: &[Label]) -> f64 {
    let n = predicted_bonafide.len() as f64;
    -predicted_bonafide
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y.is_bonafide() { p.ln() } else { (1.0 - p).ln() })
        .sum::<f64>()
        / n
}

/// Forward pass for one sample up to the logits.
pub fn forward_logits<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    sample: &Sample<T>,
    cfg: &ModelConfig,
    edges: Option<&EdgeMatrix>,
) -> Result<Var> {
    let f_p = detect_features(g, params, &sample.raw_input, &cfg.detector)?;
    let f_h = if cfg.use_adapter {
        let f_t = match edges {
            Some(e) => adapter::adapt_with_edges(g, params, &sample.feature_stack, &cfg.adapter, e)?,
            None => adapter::adapt(g, params, &sample.feature_stack, &cfg.adapter)?,
        };
        fuse(g, f_p, f_t)?
    } else {
        f_p
    };
    classify(g, params, f_h)
}

/// Mean cross-entropy over a batch.
pub fn loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    batch: &[&Sample<T>],
    cfg: &ModelConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let edges = if cfg.use_adapter { Some(adapter::build_edges(cfg.adapter.graph_spec())?) } else { None };
    let mut rows = Vec::with_capacity(batch.len());
    for s in batch {
        rows.push(forward_logits(g, params, s, cfg, edges.as_ref())?);
    }
    let logits = g.stack_rows(&rows)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
    g.cross_entropy(logits, &labels)
}

/// Bona-fide probability for each sample, in order.
pub fn predict<T: Scalar>(params: &ParamSet<T>, samples: &[Sample<T>], cfg: &ModelConfig) -> Result<Vec<f64>> {
    let edges = if cfg.use_adapter { Some(adapter::build_edges(cfg.adapter.graph_spec())?) } else { None };
    samples
        .iter()
        .map(|s| {
            cfg.check_sample(s)?;
            let mut g = Graph::new();
            let logits = forward_logits(&mut g, params, s, cfg, edges.as_ref())?;
            Ok(bonafide_score(g.value(logits).data()))
        })
        .collect()
}
