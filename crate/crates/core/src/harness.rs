//! Cross-dataset protocol runner.
//!
//! A registry maps dataset ids to containers or generator specs. Protocol-I
//! trains on every registered dataset but one and tests on the held-out one;
//! Protocol-II trains on a named set and tests on the pooled complement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Topology;
use crate::detector::{Label, Sample};
use crate::engine::ParamSet;
use crate::error::{Error, Result};
use crate::metrics::{self, ScoreSet};
use crate::providers::{self, SynthSpec};
use crate::trainer::{self, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Container { container: PathBuf },
    Synth { synth: SynthSpec },
}

impl DatasetSource {
    fn resolve(&mut self, base: &Path) {
        if let Self::Container { container } = self {
            if container.is_relative() {
                *container = base.join(&*container);
            }
        }
    }

    /// Loads or generates the dataset; generated samples carry `id`.
    pub fn load(&self, id: &str) -> Result<Vec<Sample<f32>>> {
        match self {
            Self::Container { container } => Ok(providers::load_dataset(container)?.samples),
            Self::Synth { synth } => {
                let spec = SynthSpec { dataset_id: id.to_string(), ..synth.clone() };
                Ok(providers::generate_synthetic(&spec)?.samples)
            }
        }
    }
}

pub type Registry = BTreeMap<String, DatasetSource>;

/// Inline registry or a path to a `registry.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegistryRef {
    Path(PathBuf),
    Inline(Registry),
}

impl RegistryRef {
    /// Resolves to an inline registry with absolute container paths.
    pub fn resolve(&self, base: &Path) -> Result<Registry> {
        let (mut reg, dir) = match self {
            Self::Inline(r) => (r.clone(), base.to_path_buf()),
            Self::Path(p) => {
                let p = if p.is_relative() { base.join(p) } else { p.clone() };
                let reg: Registry = providers::read_json(&p)?;
                (reg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
        };
        for src in reg.values_mut() {
            src.resolve(&dir);
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    /// Leave-one-out; `heldout` lists the rows to run (all ids when absent).
    ProtocolI {
        #[serde(default)]
        heldout: Option<Vec<String>>,
    },
    /// Train on `train_ids`; test on `test_ids`, or on every other id.
    ProtocolIi {
        train_ids: Vec<String>,
        #[serde(default)]
        test_ids: Option<Vec<String>>,
        /// Also run the swapped direction.
        #[serde(default = "yes")]
        bidirectional: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub use_adapter: bool,
    #[serde(default = "default_topology")]
    pub topology: Topology,
}

fn default_topology() -> Topology {
    Topology::StepByStep
}

impl MethodSpec {
    pub fn baseline() -> Self {
        Self { name: "Baseline".into(), use_adapter: false, topology: Topology::StepByStep }
    }

    pub fn frt_pad(topology: Topology) -> Self {
        let graph = match topology {
            Topology::StepByStep => "Step-by-Step",
            Topology::Dense => "Dense",
        };
        Self { name: format!("FRT-PAD w/ {graph} Graph"), use_adapter: true, topology }
    }

    /// `train` with this method's model switches applied.
    pub fn apply(&self, train: &TrainConfig) -> TrainConfig {
        let mut t = train.clone();
        t.model.use_adapter = self.use_adapter;
        t.model.adapter.topology = self.topology;
        t
    }
}

fn default_methods() -> Vec<MethodSpec> {
    vec![MethodSpec::baseline(), MethodSpec::frt_pad(Topology::StepByStep)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub registry: RegistryRef,
    pub mode: Mode,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    /// Run seeds; defaults to `train.seed`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl ProtocolSpec {
    /// Reads a spec; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let spec: Self = providers::read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base))
    }
}

/// `(train ids, test ids)` per row, in run order.
pub fn splits(mode: &Mode, ids: &BTreeSet<String>) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let known = |v: &[String]| -> Result<()> {
        match v.iter().find(|id| !ids.contains(*id)) {
            Some(id) => Err(Error::Protocol(format!("unknown dataset_id `{id}`"))),
            None => Ok(()),
        }
    };
    let out = match mode {
        Mode::ProtocolI { heldout } => {
            if ids.len() < 2 {
                return Err(Error::Protocol("Protocol-I needs at least 2 registered datasets".into()));
            }
            let held: Vec<String> = heldout.clone().unwrap_or_else(|| ids.iter().cloned().collect());
            known(&held)?;
            held.into_iter().map(|h| (ids.iter().filter(|i| **i != h).cloned().collect(), vec![h])).collect()
        }
        Mode::ProtocolIi { train_ids, test_ids, bidirectional } => {
            known(train_ids)?;
            let test: Vec<String> = match test_ids {
                Some(t) => {
                    known(t)?;
                    t.clone()
                }
                None => ids.iter().filter(|i| !train_ids.contains(i)).cloned().collect(),
            };
            let mut v = vec![(train_ids.clone(), test.clone())];
            if *bidirectional {
                v.push((test, train_ids.clone()));
            }
            v
        }
    };
    for (train, test) in &out {
        check_disjoint(train, test)?;
    }
    Ok(out)
}

pub fn check_disjoint(train: &[String], test: &[String]) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Protocol("train and test sets must both be non-empty".into()));
    }
    if let Some(id) = train.iter().find(|t| test.contains(t)) {
        return Err(Error::Protocol(format!("dataset `{id}` is in both train and test sets")));
    }
    Ok(())
}

/// Everything needed to reproduce one results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    pub method: MethodSpec,
    pub train: TrainConfig,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub sources: Registry,
}

impl RowConfig {
    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("row configs always serialize");
        hex::encode(Sha256::digest(json))
    }
}

/// One table cell group. Rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub hter_pct: f64,
    pub auc_pct: f64,
    pub bpcer_at_apcer_1pct_pct: f64,
    pub eer_threshold: f64,
    pub n_test: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Scores of one row, with sample ids for export.
#[derive(Debug, Clone, PartialEq)]
pub struct RowScores {
    pub sample_ids: Vec<String>,
    pub dataset_ids: Vec<String>,
    pub scores: ScoreSet,
}

#[derive(Debug, Clone)]
pub struct RowOutcome {
    pub row: ResultsRow,
    pub scores: RowScores,
    pub log: TrainLog,
    pub config: RowConfig,
    pub params: ParamSet<f32>,
}

fn pool(sources: &Registry, ids: &[String], cache: &mut BTreeMap<String, Vec<Sample<f32>>>) -> Result<(Vec<Sample<f32>>, Vec<String>)> {
    let mut samples = Vec::new();
    let mut sample_ids = Vec::new();
    for id in ids {
        if !cache.contains_key(id) {
            let src = sources.get(id).ok_or_else(|| Error::Protocol(format!("unknown dataset_id `{id}`")))?;
            cache.insert(id.clone(), src.load(id)?);
        }
        let data = &cache[id];
        sample_ids.extend((0..data.len()).map(|i| format!("{id}:{i}")));
        samples.extend(data.iter().cloned());
    }
    Ok((samples, sample_ids))
}

/// Trains and evaluates one row.
pub fn run_row(config: &RowConfig) -> Result<RowOutcome> {
    run_row_cached(config, &mut BTreeMap::new())
}

fn run_row_cached(config: &RowConfig, cache: &mut BTreeMap<String, Vec<Sample<f32>>>) -> Result<RowOutcome> {
    check_disjoint(&config.train_ids, &config.test_ids)?;
    let (train_set, _) = pool(&config.sources, &config.train_ids, cache)?;
    let (test_set, sample_ids) = pool(&config.sources, &config.test_ids, cache)?;
    if test_set.is_empty() {
        return Err(Error::Empty("test pool"));
    }
    let (params, log) = trainer::train(&config.train, &train_set, None)?;
    let scores = trainer::predict_scores(&params, &test_set, &config.train.model)?;
    let report = metrics::report(&scores)?;
    let row = ResultsRow {
        method: config.method.name.clone(),
        train_ids: config.train_ids.clone(),
        test_ids: config.test_ids.clone(),
        hter_pct: 100.0 * report.hter,
        auc_pct: 100.0 * report.auc,
        bpcer_at_apcer_1pct_pct: 100.0 * report.bpcer_at_apcer_1pct,
        eer_threshold: report.eer_threshold,
        n_test: scores.len(),
        seed: config.train.seed,
        config_hash: config.hash(),
    };
    let dataset_ids = test_set.iter().map(|s| s.dataset_id.clone()).collect();
    Ok(RowOutcome { row, scores: RowScores { sample_ids, dataset_ids, scores }, log, config: config.clone(), params })
}

/// Row configs in run order: split, then method, then seed.
pub fn plan(spec: &ProtocolSpec, base: &Path) -> Result<Vec<RowConfig>> {
    let registry = spec.registry.resolve(base)?;
    let ids: BTreeSet<String> = registry.keys().cloned().collect();
    if spec.methods.is_empty() {
        return Err(Error::Protocol("no methods to run".into()));
    }
    let seeds = spec.seeds.clone().unwrap_or_else(|| vec![spec.train.seed]);
    let mut rows = Vec::new();
    for (train_ids, test_ids) in splits(&spec.mode, &ids)? {
        let sources: Registry =
            registry.iter().filter(|(k, _)| train_ids.contains(k) || test_ids.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        for method in &spec.methods {
            for &seed in &seeds {
                let mut train = method.apply(&spec.train);
                train.seed = seed;
                train.validate()?;
                rows.push(RowConfig {
                    method: method.clone(),
                    train,
                    train_ids: train_ids.clone(),
                    test_ids: test_ids.clone(),
                    sources: sources.clone(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_protocol(spec: &ProtocolSpec, base: &Path) -> Result<Vec<RowOutcome>> {
    let mut cache = BTreeMap::new();
    plan(spec, base)?
        .iter()
        .map(|cfg| {
            log::info!("{}: [{}] -> [{}], seed {}", cfg.method.name, cfg.train_ids.join(","), cfg.test_ids.join(","), cfg.train.seed);
            run_row_cached(cfg, &mut cache)
        })
        .collect()
}

/// Column headers of the results CSV, with the direction of improvement.
pub const RESULT_COLUMNS: [&str; 8] =
    ["Method", "Train", "Test", "HTER(%)↓", "AUC(%)↑", "BPCER@APCER=1%(%)↓", "Seed", "ConfigHash"];

pub fn write_results_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("[{}]", r.train_ids.join(", ")),
            format!("[{}]", r.test_ids.join(", ")),
            format!("{:.2}", r.hter_pct),
            format!("{:.2}", r.auc_pct),
            format!("{:.2}", r.bpcer_at_apcer_1pct_pct),
            r.seed.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

pub fn write_results_json(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let table = ResultsTable { columns: RESULT_COLUMNS.iter().map(|c| c.to_string()).collect(), rows: rows.to_vec() };
    providers::write_json(path, &table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: u8,
    pub dataset_id: String,
}

pub fn write_scores_csv(path: &Path, s: &RowScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..s.scores.len() {
        w.serialize(ScoreRecord {
            sample_id: s.sample_ids[i].clone(),
            score: s.scores.scores()[i],
            label: s.scores.labels()[i] as u8,
            dataset_id: s.dataset_ids[i].clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreSet> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for rec in r.deserialize() {
        let rec: ScoreRecord = rec?;
        scores.push(rec.score);
        labels.push(Label::from_index(rec.label).ok_or_else(|| Error::Metrics(format!("{}: label {} is not 0 or 1", rec.sample_id, rec.label)))?);
    }
    ScoreSet::new(scores, labels)
}

/// ROC points as `threshold,apcer,one_minus_bpcer`.
pub fn write_roc_csv(path: &Path, s: &ScoreSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "apcer", "one_minus_bpcer"])?;
    for p in metrics::roc(s)? {
        w.write_record([p.threshold.to_string(), p.apcer.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect::<String>().split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Writes the results table plus per-row scores, ROC points, train logs and
/// replayable row configs under `out`.
pub fn write_outputs(out: &Path, outcomes: &[RowOutcome]) -> Result<()> {
    for sub in ["scores", "roc", "logs", "configs"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rows: Vec<ResultsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_results_json(&out.join("results.json"), &rows)?;
    write_results_csv(&out.join("results.csv"), &rows)?;
    for (i, o) in outcomes.iter().enumerate() {
        let key = format!("{i:02}_{}_{}", slug(&o.row.method), &o.row.config_hash[..8]);
        write_scores_csv(&out.join("scores").join(format!("{key}.csv")), &o.scores)?;
        write_roc_csv(&out.join("roc").join(format!("{key}.csv")), &o.scores.scores)?;
        o.log.write_jsonl(&out.join("logs").join(format!("{key}.jsonl")))?;
        providers::write_json(&out.join("configs").join(format!("{key}.json")), &o.config)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn protocol_ii_tests_on_the_complement() {
        let mode = Mode::ProtocolIi { train_ids: s(&["A", "B"]), test_ids: None, bidirectional: true };
        let sp = splits(&mode, &ids(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(sp, vec![(s(&["A", "B"]), s(&["C", "D"])), (s(&["C", "D"]), s(&["A", "B"]))]);
    }

    #[test]
    fn protocol_i_has_one_row_per_heldout_set() {
        let sp = splits(&Mode::ProtocolI { heldout: None }, &ids(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(sp.len(), 4);
        for (train, test) in &sp {
            assert_eq!(train.len(), 3);
            assert!(!train.contains(&test[0]));
        }
        let sp = splits(&Mode::ProtocolI { heldout: Some(s(&["C"])) }, &ids(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(sp, vec![(s(&["A", "B", "D"]), s(&["C"]))]);
    }

    #[test]
    fn overlap_and_unknown_ids_are_rejected() {
        let all = ids(&["A", "B", "C"]);
        let mode = Mode::ProtocolIi { train_ids: s(&["A", "B"]), test_ids: Some(s(&["B", "C"])), bidirectional: false };
        assert!(matches!(splits(&mode, &all), Err(Error::Protocol(_))));
        let mode = Mode::ProtocolIi { train_ids: s(&["A", "Z"]), test_ids: None, bidirectional: false };
        assert!(matches!(splits(&mode, &all), Err(Error::Protocol(_))));
        assert!(splits(&Mode::ProtocolI { heldout: None }, &ids(&["A"])).is_err());
    }

    #[test]
    fn mode_json_shape() {
        let m: Mode = serde_json::from_str(r#"{"protocol_ii": {"train_ids": ["A", "B"]}}"#).unwrap();
        assert_eq!(m, Mode::ProtocolIi { train_ids: s(&["A", "B"]), test_ids: None, bidirectional: true });
        let m: Mode = serde_json::from_str(r#"{"protocol_i": {}}"#).unwrap();
        assert_eq!(m, Mode::ProtocolI { heldout: None });
    }

    #[test]
    fn config_hash_tracks_content() {
        let reg: Registry = [("A".to_string(), DatasetSource::Synth { synth: SynthSpec::default() })].into();
        let row = RowConfig {
            method: MethodSpec::baseline(),
            train: TrainConfig::default(),
            train_ids: s(&["A"]),
            test_ids: s(&["B"]),
            sources: reg,
        };
        assert_eq!(row.hash(), row.clone().hash());
        let mut other = row.clone();
        other.train.seed = 1;
        assert_ne!(row.hash(), other.hash());
        let back: RowConfig = serde_json::from_str(&serde_json::to_string(&row).unwrap()).unwrap();
        assert_eq!(back.hash(), row.hash());
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("FRT-PAD w/ Step-by-Step Graph"), "frt-pad-w-step-by-step-graph");
    }
}
