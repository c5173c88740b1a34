//! Sources of samples: the `FSTK` binary container for precomputed frozen
//! features and a seeded synthetic generator.
//!
//! Container layout, all integers and floats little-endian:
//!
//! ```text
//! "FSTK" | version u16 = 1 | sample count u32 | level count u8
//! per level: c u16, h u16, w u16
//! per sample:
//!   label u8 | dataset_id: len u16 + UTF-8 | raw dims c,h,w u16
//!   raw values f32 | per level values f32
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{FeatureStack, LevelDims};
use crate::detector::{Label, Sample};
use crate::engine::Tensor;
use crate::error::{ContainerErrorKind, Error, Result};

pub const MAGIC: [u8; 4] = *b"FSTK";
pub const VERSION: u16 = 1;
pub const DEFAULT_SOURCE_TAG: &str = "unknown";

/// Samples sharing one level layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub levels: Vec<LevelDims>,
    pub samples: Vec<Sample<f32>>,
}

impl Dataset {
    /// `(attacks, bona fide)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let bona = self.samples.iter().filter(|s| s.label.is_bonafide()).count();
        (self.samples.len() - bona, bona)
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.dataset_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v)
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Config(format!("{what} dimension {v} does not fit the container (1..=65535)")))
}

pub fn write_container(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(dataset.samples.len()).map_err(|_| Error::Config("too many samples".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let nlev = u8::try_from(dataset.levels.len()).map_err(|_| Error::Config("more than 255 levels".into()))?;
    out.push(nlev);
    for l in &dataset.levels {
        for d in [l.c, l.h, l.w] {
            out.extend_from_slice(&dim_u16(d, "level")?.to_le_bytes());
        }
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.feature_stack.dims() != dataset.levels {
            return Err(Error::Config(format!("sample {i}: feature levels do not match the dataset header")));
        }
        out.push(s.label as u8);
        let id = s.dataset_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Config(format!("sample {i}: dataset_id too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        let raw = s.raw_input.shape();
        if raw.len() != 3 {
            return Err(Error::shape("write_container", format!("sample {i}: raw input {raw:?} is not [c,h,w]")));
        }
        for &d in raw {
            out.extend_from_slice(&dim_u16(d, "raw input")?.to_le_bytes());
        }
        for &v in s.raw_input.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for level in s.feature_stack.levels() {
            for &v in level.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn fail(&self, kind: ContainerErrorKind) -> Error {
        Error::Container { offset: self.pos, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.fail(ContainerErrorKind::Truncated { needed: n, available }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dims(&mut self) -> Result<[usize; 3]> {
        let at = self.pos;
        let d = [self.u16()? as usize, self.u16()? as usize, self.u16()? as usize];
        if d.contains(&0) {
            return Err(Error::Container { offset: at, kind: ContainerErrorKind::ZeroDimension });
        }
        Ok(d)
    }

    fn f32s(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("4 bytes"),
        None => return Err(r.fail(ContainerErrorKind::Truncated { needed: 4, available: bytes.len() })),
    };
    if magic != MAGIC {
        return Err(r.fail(ContainerErrorKind::BadMagic(magic)));
    }
    r.pos = 4;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Container { offset: 4, kind: ContainerErrorKind::UnsupportedVersion(version) });
    }
    let count = r.u32()? as usize;
    let nlev = r.u8()? as usize;
    let levels = (0..nlev).map(|_| r.dims().map(|[c, h, w]| LevelDims::new(c, h, w))).collect::<Result<Vec<_>>>()?;
    if count > 0 && nlev < 2 {
        return Err(r.fail(ContainerErrorKind::DimensionMismatch(format!("{nlev} levels; samples need at least 2"))));
    }
    // Each sample occupies at least label + id length + raw dims + one raw value.
    let min_sample = 1 + 2 + 6 + 4 + levels.iter().map(|l| l.numel() * 4).sum::<usize>();
    let remaining = bytes.len() - r.pos;
    if count.saturating_mul(min_sample) > remaining {
        return Err(r.fail(ContainerErrorKind::Truncated { needed: count.saturating_mul(min_sample), available: remaining }));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let raw_label = r.u8()?;
        let label = Label::from_index(raw_label)
            .ok_or(Error::Container { offset: at, kind: ContainerErrorKind::InvalidLabel(raw_label) })?;
        let len = r.u16()? as usize;
        let at = r.pos;
        let dataset_id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Container { offset: at, kind: ContainerErrorKind::InvalidUtf8 })?
            .to_string();
        let raw_dims = r.dims()?;
        let raw_input = r.f32s(&raw_dims)?;
        let tensors = levels.iter().map(|l| r.f32s(&l.as_shape())).collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            raw_input,
            feature_stack: FeatureStack::new(tensors, DEFAULT_SOURCE_TAG)?,
            label,
            dataset_id,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(ContainerErrorKind::TrailingBytes(bytes.len() - r.pos)));
    }
    Ok(Dataset { levels, samples })
}

/// Human-readable description written next to each container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub file: String,
    pub dataset_id: String,
    pub format_version: u16,
    pub source_tag: String,
    pub samples: usize,
    pub attack: usize,
    pub bonafide: usize,
    pub levels: Vec<LevelDims>,
    pub raw_input: Option<[usize; 3]>,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    container.with_extension("json")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: path.display().to_string(),
        detail: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.display().to_string(), detail: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<id>.fstk` and its sidecar; returns the container path.
pub fn save_dataset(dir: &Path, dataset_id: &str, dataset: &Dataset, source_tag: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{dataset_id}.fstk"));
    std::fs::write(&path, write_container(dataset)?).map_err(|e| Error::io(&path, e))?;
    let (attack, bonafide) = dataset.class_counts();
    let manifest = Manifest {
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        dataset_id: dataset_id.to_string(),
        format_version: VERSION,
        source_tag: source_tag.to_string(),
        samples: dataset.samples.len(),
        attack,
        bonafide,
        levels: dataset.levels.clone(),
        raw_input: dataset.samples.first().map(|s| {
            let d = s.raw_input.shape();
            [d[0], d[1], d[2]]
        }),
    };
    write_json(&sidecar_path(&path), &manifest)?;
    Ok(path)
}

/// Reads a container; the sidecar, when present, supplies the source tag.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = read_container(&bytes)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let manifest: Manifest = read_json(&sidecar)?;
        for s in &mut dataset.samples {
            s.feature_stack.source_tag = manifest.source_tag.clone();
        }
    }
    Ok(dataset)
}

/// Where the class-dependent pattern is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalTarget {
    RawOnly,
    FeaturesOnly,
    Both,
}

/// Constant offsets added to every sample of one dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// One offset per raw-input channel, or empty.
    pub raw: Vec<f64>,
    /// One offset per feature level, or empty.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub dataset_id: String,
    pub per_class: usize,
    pub levels: Vec<LevelDims>,
    pub raw_input: [usize; 3],
    pub signal_target: SignalTarget,
    pub domain_shift: DomainShift,
    pub noise_std: f64,
    /// Pattern amplitude in feature levels.
    pub feature_amplitude: f64,
    /// Pattern amplitude in the raw input.
    pub raw_amplitude: f64,
    /// Seeds the feature-level class pattern. Datasets sharing it share the
    /// discriminative direction.
    pub pattern_seed: u64,
    /// Seeds the raw-input class pattern; defaults to `pattern_seed`.
    pub raw_pattern_seed: Option<u64>,
    pub seed: u64,
    pub source_tag: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".into(),
            per_class: 100,
            levels: crate::adapter::AdapterConfig::default().levels,
            raw_input: [3, 32, 32],
            signal_target: SignalTarget::Both,
            domain_shift: DomainShift::default(),
            noise_std: 1.0,
            feature_amplitude: 0.5,
            raw_amplitude: 0.5,
            pattern_seed: 7,
            raw_pattern_seed: None,
            seed: 0,
            source_tag: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec `{}`: {m}", self.dataset_id)));
        if self.per_class == 0 {
            return bad("per_class must be positive".into());
        }
        if self.levels.len() < 2 || self.levels.iter().any(|l| l.numel() == 0) {
            return bad("need at least 2 levels with positive dimensions".into());
        }
        if self.raw_input.contains(&0) {
            return bad("raw_input dimensions must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !self.feature_amplitude.is_finite() || !self.raw_amplitude.is_finite() {
            return bad("amplitudes must be finite".into());
        }
        if !self.domain_shift.raw.is_empty() && self.domain_shift.raw.len() != self.raw_input[0] {
            return bad(format!("domain_shift.raw needs {} entries", self.raw_input[0]));
        }
        if !self.domain_shift.features.is_empty() && self.domain_shift.features.len() != self.levels.len() {
            return bad(format!("domain_shift.features needs {} entries", self.levels.len()));
        }
        if self.dataset_id.is_empty() || self.dataset_id.len() > u16::MAX as usize {
            return bad("dataset_id must be non-empty".into());
        }
        Ok(())
    }
}

/// Rank-one pattern `u_c v_hw` scaled to unit RMS.
fn pattern(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let u: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut p: Vec<f64> = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
    let rms = (p.iter().map(|x| x * x).sum::<f64>() / p.len() as f64).sqrt();
    if rms > 0.0 {
        p.iter_mut().for_each(|x| *x /= rms);
    }
    p
}

fn draw(shape: [usize; 3], signal: Option<(&[f64], f64)>, shift: impl Fn(usize) -> f64, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let plane = shape[1] * shape[2];
    let n = shape[0] * plane;
    let data = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            let s = signal.map_or(0.0, |(p, a)| a * p[i]);
            (s + noise * z + shift(i / plane)) as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Deterministic labeled dataset; labels alternate bona fide / attack.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut prng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let level_patterns: Vec<Vec<f64>> = spec.levels.iter().map(|l| pattern([l.c, l.h, l.w], &mut prng)).collect();
    let mut rrng = ChaCha8Rng::seed_from_u64(spec.raw_pattern_seed.unwrap_or(spec.pattern_seed) ^ 0x5241_5750);
    let raw_pattern = pattern(spec.raw_input, &mut rrng);

    let in_raw = spec.signal_target != SignalTarget::FeaturesOnly;
    let in_features = spec.signal_target != SignalTarget::RawOnly;
    let raw_shift = |c: usize| spec.domain_shift.raw.get(c).copied().unwrap_or(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(2 * spec.per_class);
    for i in 0..2 * spec.per_class {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Attack };
        let sign = if label.is_bonafide() { 1.0 } else { -1.0 };
        let raw_signal = in_raw.then_some((raw_pattern.as_slice(), sign * spec.raw_amplitude));
        let raw_input = draw(spec.raw_input, raw_signal, raw_shift, spec.noise_std, &mut rng)?;
        let levels = spec
            .levels
            .iter()
            .zip(&level_patterns)
            .enumerate()
            .map(|(k, (l, p))| {
                let shift = spec.domain_shift.features.get(k).copied().unwrap_or(0.0);
                let signal = in_features.then_some((p.as_slice(), sign * spec.feature_amplitude));
                draw([l.c, l.h, l.w], signal, |_| shift, spec.noise_std, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            raw_input,
            feature_stack: FeatureStack::new(levels, spec.source_tag.clone())?,
            label,
            dataset_id: spec.dataset_id.clone(),
        });
    }
    Ok(Dataset { levels: spec.levels.clone(), samples })
}

/// SHA-256 over every feature-stack value, in order.
pub fn feature_digest(samples: &[Sample<f32>]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for level in s.feature_stack.levels() {
            for &v in level.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Dataset id to generator spec, as written by `gen-synth`.
pub type SynthRegistry = BTreeMap<String, SynthSpec>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            per_class: 3,
            levels: vec![LevelDims::new(2, 3, 3), LevelDims::new(3, 2, 2)],
            raw_input: [1, 4, 4],
            ..SynthSpec::default()
        }
    }

    fn bits(d: &Dataset) -> Vec<u32> {
        d.samples
            .iter()
            .flat_map(|s| {
                s.raw_input.data().iter().chain(s.feature_stack.levels().iter().flat_map(|l| l.data())).map(|v| v.to_bits())
            })
            .collect()
    }

    #[test]
    fn empty_dataset_round_trips_as_header_only() {
        let d = Dataset { levels: vec![LevelDims::new(1, 2, 3), LevelDims::new(4, 5, 6)], samples: vec![] };
        let bytes = write_container(&d).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 1 + 2 * 6);
        assert_eq!(read_container(&bytes).unwrap(), d);
    }

    #[test]
    fn single_sample_round_trip_is_bitwise() {
        let mut d = generate_synthetic(&tiny_spec()).unwrap();
        d.samples.truncate(1);
        let back = read_container(&write_container(&d).unwrap()).unwrap();
        assert_eq!(bits(&back), bits(&d));
        assert_eq!(back.samples[0].label, d.samples[0].label);
        assert_eq!(back.samples[0].dataset_id, d.samples[0].dataset_id);
    }

    #[test]
    fn header_is_little_endian() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let b = write_container(&d).unwrap();
        assert_eq!(&b[..4], b"FSTK");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[6, 0, 0, 0]);
        assert_eq!(b[10], 2);
        assert_eq!(&b[11..17], &[2, 0, 3, 0, 3, 0]);
    }

    #[test]
    fn corrupted_files_give_structured_errors() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let good = write_container(&d).unwrap();

        let mut bad = good.clone();
        bad[6] = 200;
        assert!(matches!(read_container(&bad), Err(Error::Container { kind: ContainerErrorKind::Truncated { .. }, .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(Error::Container { kind: ContainerErrorKind::BadMagic(_), .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            read_container(&bad),
            Err(Error::Container { kind: ContainerErrorKind::UnsupportedVersion(2), .. })
        ));

        assert!(matches!(
            read_container(&good[..good.len() - 1]),
            Err(Error::Container { kind: ContainerErrorKind::Truncated { .. }, .. })
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(read_container(&bad), Err(Error::Container { kind: ContainerErrorKind::TrailingBytes(1), .. })));

        let mut bad = good.clone();
        bad[23] = 7;
        assert!(matches!(read_container(&bad), Err(Error::Container { kind: ContainerErrorKind::InvalidLabel(7), offset: 23 })));

        assert!(read_container(&[]).is_err());
        assert!(read_container(b"FST").is_err());
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic(&tiny_spec()).unwrap();
        let b = generate_synthetic(&tiny_spec()).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_synthetic(&SynthSpec { seed: 1, ..tiny_spec() }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn class_counts_are_exact() {
        let d = generate_synthetic(&SynthSpec { per_class: 17, ..tiny_spec() }).unwrap();
        assert_eq!(d.class_counts(), (17, 17));
    }

    #[test]
    fn features_only_leaves_raw_input_class_independent() {
        // The raw draw consumes the same noise stream regardless of label,
        // so swapping the labels of a dataset reproduces its raw inputs.
        let spec = SynthSpec { signal_target: SignalTarget::FeaturesOnly, ..tiny_spec() };
        let d = generate_synthetic(&spec).unwrap();
        let zero_amp = generate_synthetic(&SynthSpec { raw_amplitude: 0.0, feature_amplitude: 0.0, ..spec }).unwrap();
        for (s, z) in d.samples.iter().zip(&zero_amp.samples) {
            assert_eq!(s.raw_input, z.raw_input);
        }
    }

    #[test]
    fn domain_shift_moves_the_mean() {
        let spec = SynthSpec {
            per_class: 50,
            noise_std: 0.0,
            feature_amplitude: 0.0,
            raw_amplitude: 0.0,
            domain_shift: DomainShift { raw: vec![2.5], features: vec![-1.0, 3.0] },
            ..tiny_spec()
        };
        let d = generate_synthetic(&spec).unwrap();
        assert!(d.samples.iter().all(|s| s.raw_input.data().iter().all(|&v| v == 2.5)));
        assert!(d.samples.iter().all(|s| s.feature_stack.levels()[1].data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_synthetic(&SynthSpec { per_class: 0, ..tiny_spec() }).is_err());
        assert!(generate_synthetic(&SynthSpec { noise_std: -1.0, ..tiny_spec() }).is_err());
        assert!(generate_synthetic(&SynthSpec { levels: vec![LevelDims::new(1, 1, 1)], ..tiny_spec() }).is_err());
        let shift = DomainShift { raw: vec![1.0, 2.0], features: vec![] };
        assert!(generate_synthetic(&SynthSpec { domain_shift: shift, ..tiny_spec() }).is_err());
    }

    #[test]
    fn save_and_load_apply_the_sidecar_tag() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let path = save_dataset(dir.path(), "A", &d, "F.R.").unwrap();
        let m: Manifest = read_json(&sidecar_path(&path)).unwrap();
        assert_eq!((m.samples, m.attack, m.bonafide), (6, 3, 3));
        assert_eq!(m.raw_input, Some([1, 4, 4]));
        let back = load_dataset(&path).unwrap();
        assert_eq!(bits(&back), bits(&d));
        assert!(back.samples.iter().all(|s| s.feature_stack.source_tag == "F.R."));
        assert!(matches!(load_dataset(&dir.path().join("missing.fstk")), Err(Error::Io { .. })));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let dims = (1usize..4, 1usize..4, 1usize..4).prop_map(|(c, h, w)| LevelDims::new(c, h, w));
        (proptest::collection::vec(dims, 2..4), 0usize..5, any::<u64>()).prop_map(|(levels, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vals = |k: usize| (0..k).map(|_| f32::from_bits(rand::RngCore::next_u32(&mut rng) & 0xBFFF_FFFF)).collect::<Vec<_>>();
            let samples = (0..n)
                .map(|i| {
                    let stack = levels.iter().map(|l| Tensor::new(l.as_shape(), vals(l.numel())).unwrap()).collect();
                    Sample {
                        raw_input: Tensor::new(vec![1, 2, 1 + i], vals(2 + 2 * i)).unwrap(),
                        feature_stack: FeatureStack::new(stack, DEFAULT_SOURCE_TAG).unwrap(),
                        label: if i % 3 == 0 { Label::Attack } else { Label::Bonafide },
                        dataset_id: format!("d-{i}-é"),
                    }
                })
                .collect();
            Dataset { levels, samples }
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(d in arb_dataset()) {
            let bytes = write_container(&d).unwrap();
            let back = read_container(&bytes).unwrap();
            prop_assert_eq!(bits(&back), bits(&d));
            prop_assert_eq!(write_container(&back).unwrap(), bytes);
        }

        #[test]
        fn truncation_never_panics(d in arb_dataset(), cut in 0usize..400) {
            let bytes = write_container(&d).unwrap();
            let cut = cut.min(bytes.len().saturating_sub(1));
            prop_assert!(read_container(&bytes[..cut]).is_err());
        }
    }
}
