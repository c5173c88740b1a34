//! Training loop: seeded epoch shuffling, one tape per batch, Adam on the
//! detector, adapter and classifier. Feature stacks are only ever read.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, ModelConfig, Sample};
use crate::engine::{Adam, AdamConfig, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::metrics::{self, Report, ScoreSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds both initialization and shuffling.
    pub seed: u64,
    /// Execution is single-threaded and always reproducible; the flag is
    /// kept so configs can state the requirement explicitly.
    pub deterministic: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0, betas in [0,1), eps > 0".into()));
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<Report>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// Per-epoch losses, the reproducible part of the log.
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for e in &self.epochs {
            let line = serde_json::to_string(e).map_err(|e| Error::Json { path: path.display().to_string(), detail: e.to_string() })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// One optimizer step on `batch`; returns the batch loss before the update.
/// A non-finite loss or gradient is an error and leaves `params` untouched.
pub fn train_step<T: Scalar>(
    params: &mut ParamSet<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample<T>],
    model: &ModelConfig,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let loss = detector::loss(&mut g, params, batch, model)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        (value, g.backward(loss)?.into_params())
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    adam.step(params, &grads)?;
    Ok(loss)
}

/// Mean batch loss without updating anything.
pub fn batch_loss<T: Scalar>(params: &ParamSet<T>, batch: &[&Sample<T>], model: &ModelConfig) -> Result<f64> {
    let mut g = Graph::new();
    let loss = detector::loss(&mut g, params, batch, model)?;
    Ok(g.value(loss).data()[0].to_f64_lossy())
}

pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &[Sample<T>],
    val_set: Option<&[Sample<T>]>,
) -> Result<(ParamSet<T>, TrainLog)> {
    cfg.validate()?;
    let params = cfg.model.init_params::<T>(cfg.seed)?;
    train_from(cfg, params, train_set, val_set)
}

/// [`train`] from given initial parameters.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    mut params: ParamSet<T>,
    train_set: &[Sample<T>],
    val_set: Option<&[Sample<T>]>,
) -> Result<(ParamSet<T>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in train_set.iter().chain(val_set.unwrap_or_default()) {
        cfg.model.check_sample(s)?;
    }
    let start = Instant::now();
    let mut adam = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = match train_step(&mut params, &mut adam, &batch, &cfg.model) {
                Err(Error::NonFinite(what)) => {
                    log::error!("epoch {epoch}, step {step}: non-finite {what}");
                    return Err(Error::Diverged { epoch, step, loss: batch_loss(&params, &batch, &cfg.model)? });
                }
                other => other?,
            };
            total += loss * batch.len() as f64;
        }
        let val = match val_set {
            Some(v) if !v.is_empty() => Some(metrics::report(&predict_scores(&params, v, &cfg.model)?)?),
            _ => None,
        };
        let entry = EpochLog { epoch, mean_loss: total / train_set.len() as f64, val, seconds: t0.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: loss {:.5}", entry.mean_loss);
        log.epochs.push(entry);
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, log))
}

/// Bona-fide scores paired with labels, in dataset order.
pub fn predict_scores<T: Scalar>(params: &ParamSet<T>, samples: &[Sample<T>], model: &ModelConfig) -> Result<ScoreSet> {
    let scores = detector::predict(params, samples, model)?;
    ScoreSet::new(scores, samples.iter().map(|s| s.label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, LevelDims, Topology};
    use crate::detector::DetectorConfig;
    use crate::providers::{self, SignalTarget, SynthSpec};

    fn small_model() -> ModelConfig {
        ModelConfig {
            detector: DetectorConfig { input: [3, 8, 8], channels: vec![4, 4], d_p: 8 },
            adapter: AdapterConfig {
                levels: vec![LevelDims::new(2, 4, 4), LevelDims::new(4, 4, 4), LevelDims::new(4, 3, 3)],
                proj_channels: 4,
                proj_pool: 2,
                d: 8,
                d_hidden: 4,
                d_out: 8,
                heads: 2,
                topology: Topology::StepByStep,
                ..AdapterConfig::default()
            },
            use_adapter: true,
        }
    }

    fn small_data(seed: u64, per_class: usize) -> Vec<Sample<f32>> {
        let m = small_model();
        let spec = SynthSpec {
            per_class,
            levels: m.adapter.levels.clone(),
            raw_input: m.detector.input,
            signal_target: SignalTarget::Both,
            seed,
            ..SynthSpec::default()
        };
        providers::generate_synthetic(&spec).unwrap().samples
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, model: small_model(), ..TrainConfig::default() }
    }

    #[test]
    fn one_step_decreases_the_batch_loss() {
        for seed in 0..20 {
            let data = small_data(seed, 8);
            let batch: Vec<&Sample<f32>> = data.iter().collect();
            let model = small_model();
            let mut params = model.init_params::<f32>(seed).unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            let before = train_step(&mut params, &mut adam, &batch, &model).unwrap();
            let after = batch_loss(&params, &batch, &model).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let c = cfg(0);
        let (params, log) = train(&c, &small_data(1, 4), None).unwrap();
        assert_eq!(params, c.model.init_params::<f32>(c.seed).unwrap());
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let data = small_data(2, 10);
        let (p1, l1) = train(&cfg(2), &data, Some(&data)).unwrap();
        let (p2, l2) = train(&cfg(2), &data, Some(&data)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1.losses(), l2.losses());
        assert_eq!(l1.epochs.iter().map(|e| e.val).collect::<Vec<_>>(), l2.epochs.iter().map(|e| e.val).collect::<Vec<_>>());
    }

    #[test]
    fn every_trainable_tensor_moves() {
        let c = cfg(1);
        let data = small_data(3, 12);
        let init = c.model.init_params::<f32>(c.seed).unwrap();
        let (trained, _) = train(&c, &data, None).unwrap();
        for (name, p) in init.iter() {
            assert_ne!(p.tensor, trained.tensor(name).unwrap().clone(), "{name} did not move");
        }
    }

    #[test]
    fn features_are_untouched() {
        let data = small_data(4, 6);
        let before = providers::feature_digest(&data);
        let _ = train(&cfg(1), &data, None).unwrap();
        assert_eq!(before, providers::feature_digest(&data));
    }

    #[test]
    fn empty_dataset_and_bad_config_are_errors() {
        assert!(matches!(train::<f32>(&cfg(1), &[], None), Err(Error::Empty(_))));
        let bad = TrainConfig { batch_size: 0, ..cfg(1) };
        assert!(matches!(train(&bad, &small_data(0, 1), None), Err(Error::Config(_))));
        let bad = TrainConfig { lr: 0.0, ..cfg(1) };
        assert!(train(&bad, &small_data(0, 1), None).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = small_data(5, 2);
        data[0].raw_input.data_mut()[0] = f32::NAN;
        assert!(matches!(train(&cfg(1), &data, None), Err(Error::NonFinite(_))));
        let mut data = small_data(5, 2);
        data[0].raw_input.data_mut().iter_mut().for_each(|v| *v = 3e38);
        let r = train(&cfg(1), &data, None);
        assert!(matches!(r, Err(Error::Diverged { epoch: 0, .. })), "{r:?}");
    }

    #[test]
    fn predict_scores_contract() {
        let data = small_data(6, 5);
        let model = small_model();
        let params = model.init_params::<f32>(0).unwrap();
        let s = predict_scores(&params, &data, &model).unwrap();
        assert_eq!(s.len(), data.len());

        let zeroed = params.map_values(|_| 0.0);
        let s = predict_scores(&zeroed, &data, &model).unwrap();
        assert!(s.scores().iter().all(|&x| x == 0.5));

        let base = predict_scores(&params, &data, &model).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        let mut r = predict_scores(&params, &rev, &model).unwrap().scores().to_vec();
        r.reverse();
        assert_eq!(r, base.scores());
    }

    #[test]
    fn train_log_jsonl_has_one_line_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (_, log) = train(&cfg(2), &small_data(7, 4), None).unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].epoch, 1);
    }
}
