//! Cross-modal adapter: maps the multi-level features of a frozen face-task
//! network onto graph vertices, runs a two-layer multi-head graph attention
//! network over them and folds the vertex outputs into one feature vector.
//!
//! Pipeline for a stack of `n` levels:
//!
//! 1. each level `t_i` goes through its own projection block
//!    (conv3x3 -> relu -> adaptive average pool -> flatten -> linear) and
//!    becomes vertex `v_i` of dimension `d`;
//! 2. the edge matrix connects the vertices as a chain (step-by-step) or a
//!    complete graph (dense), with self loops by default;
//! 3. per head, `H = V W`, raw scores `A_ij = q1·h_i + q2·h_j` on connected
//!    pairs, a row-wise softmax restricted to neighbours, and `V' = A_s H`;
//! 4. heads are concatenated after the first layer and averaged after the
//!    second, with a leaky relu in between;
//! 5. the final rows `f_1..f_n` are combined as
//!    `f_t = mean(f_1..f_{n-1}) ⊙ f_n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{glorot_uniform, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel/height/width of one tapped feature level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelDims {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn as_shape(&self) -> Vec<usize> {
        vec![self.c, self.h, self.w]
    }
}

/// Ordered features tapped from a frozen face-task network, shallow to deep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    levels: Vec<Tensor<T>>,
    pub source_tag: String,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(levels: Vec<Tensor<T>>, source_tag: impl Into<String>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Config(format!("a feature stack needs at least 2 levels, got {}", levels.len())));
        }
        if let Some(l) = levels.iter().find(|l| l.rank() != 3) {
            return Err(Error::shape("feature_stack", format!("level of shape {:?} is not [c,h,w]", l.shape())));
        }
        Ok(Self { levels, source_tag: source_tag.into() })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn dims(&self) -> Vec<LevelDims> {
        self.levels.iter().map(|l| LevelDims::new(l.shape()[0], l.shape()[1], l.shape()[2])).collect()
    }

    pub fn cast<U: Scalar>(&self) -> FeatureStack<U> {
        FeatureStack { levels: self.levels.iter().map(Tensor::cast).collect(), source_tag: self.source_tag.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Consecutive levels joined by single edges.
    StepByStep,
    /// Every pair of levels joined.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphSpec {
    pub topology: Topology,
    pub n: usize,
    pub self_loops: bool,
}

impl GraphSpec {
    pub fn new(topology: Topology, n: usize) -> Self {
        Self { topology, n, self_loops: true }
    }
}

/// Symmetric binary adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMatrix {
    n: usize,
    e: Vec<bool>,
}

impl EdgeMatrix {
    /// Builds from an explicit matrix; rejects asymmetric input.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("edge_matrix", "must be a non-empty square matrix"));
        }
        let e: Vec<bool> = rows.concat();
        for i in 0..n {
            for j in 0..n {
                if e[i * n + j] != e[j * n + i] {
                    return Err(Error::Config(format!("edge matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, e })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.e[i * self.n + j]
    }

    /// Row-major flags, the layout [`Graph::softmax_masked`] expects.
    pub fn mask(&self) -> &[bool] {
        &self.e
    }

    /// Undirected edges excluding self loops.
    pub fn edge_count(&self) -> usize {
        (0..self.n).flat_map(|i| (i + 1..self.n).map(move |j| (i, j))).filter(|&(i, j)| self.connected(i, j)).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.e.chunks(self.n).map(|r| r.iter().map(|&b| u8::from(b)).collect()).collect()
    }

    /// `P E Pᵀ` for the permutation sending vertex `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut e = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                e[perm[i] * n + perm[j]] = self.connected(i, j);
            }
        }
        Self { n, e }
    }
}

pub fn build_edges(spec: GraphSpec) -> Result<EdgeMatrix> {
    let n = spec.n;
    if n == 0 {
        return Err(Error::Config("graph needs at least one vertex".into()));
    }
    let mut e = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            e[i * n + j] = match (i == j, spec.topology) {
                (true, _) => spec.self_loops,
                (false, Topology::StepByStep) => i.abs_diff(j) == 1,
                (false, Topology::Dense) => true,
            };
        }
    }
    Ok(EdgeMatrix { n, e })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    Concat,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub levels: Vec<LevelDims>,
    /// Output channels of each projection block's convolution.
    pub proj_channels: usize,
    /// Side of the adaptive average pool in the projection block.
    pub proj_pool: usize,
    /// Vertex dimension.
    pub d: usize,
    /// Per-head width of the first attention layer (heads are concatenated).
    pub d_hidden: usize,
    /// Per-head width of the second attention layer (heads are averaged).
    pub d_out: usize,
    pub heads: usize,
    pub topology: Topology,
    pub self_loops: bool,
    /// Apply leaky relu to raw attention scores, as conventional GAT does.
    pub leaky_scores: bool,
    pub leaky_alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            levels: vec![LevelDims::new(8, 8, 8), LevelDims::new(16, 8, 8), LevelDims::new(32, 4, 4), LevelDims::new(64, 4, 4)],
            proj_channels: 16,
            proj_pool: 4,
            d: 64,
            d_hidden: 32,
            d_out: 64,
            heads: 2,
            topology: Topology::StepByStep,
            self_loops: true,
            leaky_scores: false,
            leaky_alpha: 0.2,
        }
    }
}

/// Names of the tensors of one attention head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadNames {
    pub w: String,
    pub q1: String,
    pub q2: String,
}

/// Bound tensors of one attention head.
#[derive(Debug, Clone, Copy)]
pub struct GatHead {
    pub w: Var,
    pub q1: Var,
    pub q2: Var,
}

/// Raw attention scores plus the connectivity mask they must be read with.
#[derive(Debug, Clone)]
pub struct AttentionScores {
    pub scores: Var,
    /// `V W`, reused by the aggregation step.
    pub hidden: Var,
    pub mask: Vec<bool>,
}

impl AdapterConfig {
    pub fn n(&self) -> usize {
        self.levels.len()
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec { topology: self.topology, n: self.n(), self_loops: self.self_loops }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::Config(format!("adapter.levels: need at least 2 levels, got {}", self.n())));
        }
        if let Some(l) = self.levels.iter().find(|l| l.c == 0 || l.h < 3 || l.w < 3) {
            return Err(Error::Config(format!("adapter.levels: level {l:?} must have c >= 1 and h, w >= 3")));
        }
        if self.heads == 0 || self.d == 0 || self.d_hidden == 0 || self.d_out == 0 || self.proj_channels == 0 || self.proj_pool == 0 {
            return Err(Error::Config("adapter: all widths and the head count must be positive".into()));
        }
        if !(self.leaky_alpha.is_finite() && self.leaky_alpha >= 0.0) {
            return Err(Error::Config("adapter.leaky_alpha must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// (input width, per-head width, combine) of attention layer `layer`.
    pub fn layer_dims(&self, layer: usize) -> (usize, usize, HeadCombine) {
        match layer {
            0 => (self.d, self.d_hidden, HeadCombine::Concat),
            _ => (self.heads * self.d_hidden, self.d_out, HeadCombine::Average),
        }
    }

    pub fn proj_names(i: usize) -> [String; 4] {
        [
            format!("adapter.proj.{i}.conv.w"),
            format!("adapter.proj.{i}.conv.b"),
            format!("adapter.proj.{i}.fc.w"),
            format!("adapter.proj.{i}.fc.b"),
        ]
    }

    pub fn head_names(layer: usize, head: usize) -> HeadNames {
        HeadNames {
            w: format!("adapter.gat.{layer}.{head}.w"),
            q1: format!("adapter.gat.{layer}.{head}.q1"),
            q2: format!("adapter.gat.{layer}.{head}.q2"),
        }
    }

    /// Adds freshly initialized adapter tensors to `params`: Glorot-uniform
    /// weights and attention vectors, zero biases.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) -> Result<()> {
        self.validate()?;
        let (pc, pp) = (self.proj_channels, self.proj_pool);
        for (i, l) in self.levels.iter().enumerate() {
            let [cw, cb, fw, fb] = Self::proj_names(i);
            params.insert(cw, glorot_uniform(vec![pc, l.c, 3, 3], l.c * 9, pc * 9, rng), true)?;
            params.insert(cb, Tensor::zeros(vec![pc]), true)?;
            params.insert(fw, glorot_uniform(vec![pc * pp * pp, self.d], pc * pp * pp, self.d, rng), true)?;
            params.insert(fb, Tensor::zeros(vec![self.d]), true)?;
        }
        for layer in 0..2 {
            let (din, dh, _) = self.layer_dims(layer);
            for head in 0..self.heads {
                let names = Self::head_names(layer, head);
                params.insert(names.w, glorot_uniform(vec![din, dh], din, dh, rng), true)?;
                params.insert(names.q1, glorot_uniform(vec![dh], dh, 1, rng), true)?;
                params.insert(names.q2, glorot_uniform(vec![dh], dh, 1, rng), true)?;
            }
        }
        Ok(())
    }

    /// Every adapter parameter name, in insertion order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n()).flat_map(Self::proj_names).collect();
        for layer in 0..2 {
            for head in 0..self.heads {
                let h = Self::head_names(layer, head);
                names.extend([h.w, h.q1, h.q2]);
            }
        }
        names
    }
}

/// One `d`-dimensional vertex per level, stacked as `[n×d]`.
pub fn project_features<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    stack: &FeatureStack<T>,
    cfg: &AdapterConfig,
) -> Result<Var> {
    if stack.len() != cfg.n() {
        return Err(Error::shape("project_features", format!("{} levels for an adapter of {}", stack.len(), cfg.n())));
    }
    let mut rows = Vec::with_capacity(cfg.n());
    for (i, level) in stack.levels().iter().enumerate() {
        let expected = cfg.levels[i];
        if level.shape()[0] != expected.c {
            return Err(Error::shape(
                "project_features",
                format!("level {i} has {} channels, adapter expects {}", level.shape()[0], expected.c),
            ));
        }
        let [cw, cb, fw, fb] = AdapterConfig::proj_names(i);
        let x = g.constant(level.clone());
        let (cw, cb, fw, fb) = (g.param(params, &cw)?, g.param(params, &cb)?, g.param(params, &fw)?, g.param(params, &fb)?);
        let y = g.conv2d(x, cw, cb, 1)?;
        let y = g.relu(y);
        let y = g.adaptive_avg_pool(y, (cfg.proj_pool, cfg.proj_pool))?;
        let y = g.flatten(y);
        rows.push(g.linear(y, fw, fb)?);
    }
    g.stack_rows(&rows)
}

/// Raw scores `A_ij = (V W q1)_i + (V W q2)_j` over all pairs, plus the
/// edge mask. Disconnected pairs are masked rather than zeroed so the
/// normalization ignores them entirely.
pub fn attention_scores<T: Scalar>(
    g: &mut Graph<'_, T>,
    v: Var,
    head: GatHead,
    edges: &EdgeMatrix,
    leaky_scores: Option<T>,
) -> Result<AttentionScores> {
    let n = g.shape(v)[0];
    if n != edges.n() {
        return Err(Error::shape("attention_scores", format!("{n} vertices, edge matrix of {}", edges.n())));
    }
    let hidden = g.matmul(v, head.w)?;
    let dh = g.shape(hidden)[1];
    if g.value(head.q1).len() != dh || g.value(head.q2).len() != dh {
        return Err(Error::shape("attention_scores", format!("attention vectors must have length {dh}")));
    }
    let q1 = g.reshape(head.q1, vec![dh, 1])?;
    let q2 = g.reshape(head.q2, vec![dh, 1])?;
    let s = g.matmul(hidden, q1)?;
    let r = g.matmul(hidden, q2)?;
    let mut scores = g.outer_sum(s, r)?;
    if let Some(alpha) = leaky_scores {
        scores = g.leaky_relu(scores, alpha);
    }
    Ok(AttentionScores { scores, hidden, mask: edges.mask().to_vec() })
}

/// Row-wise softmax over neighbours only; non-neighbours get exactly 0.
pub fn normalize_attention<T: Scalar>(g: &mut Graph<'_, T>, scores: Var, edges: &EdgeMatrix) -> Result<Var> {
    let n = edges.n();
    if let Some(i) = (0..n).find(|&i| (0..n).all(|j| !edges.connected(i, j))) {
        return Err(Error::Domain { op: "normalize_attention", detail: format!("vertex {i} has no neighbours") });
    }
    g.softmax_masked(scores, edges.mask())
}

/// One multi-head attention layer: per head `A_s (V W)`, heads combined.
pub fn gat_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    v: Var,
    edges: &EdgeMatrix,
    heads: &[GatHead],
    combine: HeadCombine,
    leaky_scores: Option<T>,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Config("gat_layer needs at least one head".into()));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for &head in heads {
        let att = attention_scores(g, v, head, edges, leaky_scores)?;
        let a_s = normalize_attention(g, att.scores, edges)?;
        outs.push(g.matmul(a_s, att.hidden)?);
    }
    match combine {
        HeadCombine::Concat => g.concat_cols(&outs),
        HeadCombine::Average => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            Ok(g.scale(acc, T::one() / T::lit(outs.len() as f64)))
        }
    }
}

/// `f_t = mean(f_1..f_{n-1}) ⊙ f_n` over the rows of `f[n×d]`.
pub fn combine_latent<T: Scalar>(g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
    let (n, d) = match *g.shape(f) {
        [n, d] => (n, d),
        ref s => return Err(Error::shape("combine_latent", format!("expected [n×d], got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::Config(format!("combine_latent needs at least 2 vertex outputs, got {n}")));
    }
    let prefix = g.slice_rows(f, 0, n - 1)?;
    let weights = g.mean_rows(prefix)?;
    let last = g.slice_rows(f, n - 1, n)?;
    let last = g.reshape(last, vec![d])?;
    g.mul(weights, last)
}

pub fn bind_heads<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &AdapterConfig,
    layer: usize,
) -> Result<Vec<GatHead>> {
    (0..cfg.heads)
        .map(|h| {
            let names = AdapterConfig::head_names(layer, h);
            Ok(GatHead { w: g.param(params, &names.w)?, q1: g.param(params, &names.q1)?, q2: g.param(params, &names.q2)? })
        })
        .collect()
}

/// Full adapter: projection, two attention layers, latent combination.
/// Returns `f_t` of length `d_out`.
pub fn adapt<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    stack: &FeatureStack<T>,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let edges = build_edges(cfg.graph_spec())?;
    adapt_with_edges(g, params, stack, cfg, &edges)
}

/// [`adapt`] with a precomputed edge matrix.
pub fn adapt_with_edges<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamSet<T>,
    stack: &FeatureStack<T>,
    cfg: &AdapterConfig,
    edges: &EdgeMatrix,
) -> Result<Var> {
    let alpha = T::lit(cfg.leaky_alpha);
    let leaky_scores = cfg.leaky_scores.then_some(alpha);
    let v = project_features(g, params, stack, cfg)?;
    let heads = bind_heads(g, params, cfg, 0)?;
    let h1 = gat_layer(g, v, edges, &heads, HeadCombine::Concat, leaky_scores)?;
    let h1 = g.leaky_relu(h1, alpha);
    let heads = bind_heads(g, params, cfg, 1)?;
    let f = gat_layer(g, h1, edges, &heads, HeadCombine::Average, leaky_scores)?;
    combine_latent(g, f)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn topology() -> impl Strategy<Value = Topology> {
        prop_oneof![Just(Topology::StepByStep), Just(Topology::Dense)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scores_match_naive_sum(n in 1usize..10, d in 1usize..6, dh in 1usize..6, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (vt, wt) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, d, dh));
            let (q1, q2) = (random_matrix(&mut rng, 1, dh), random_matrix(&mut rng, 1, dh));
            let mut g = Graph::<f64>::new();
            let v = g.constant(vt.clone());
            let head = GatHead {
                w: g.constant(wt.clone()),
                q1: g.constant(q1.reshape(vec![dh]).unwrap()),
                q2: g.constant(q2.reshape(vec![dh]).unwrap()),
            };
            let e = build_edges(GraphSpec::new(Topology::Dense, n)).unwrap();
            let att = attention_scores(&mut g, v, head, &e, None).unwrap();
            let vw = |i: usize, k: usize| (0..d).map(|m| vt.at(&[i, m]) * wt.at(&[m, k])).sum::<f64>();
            for i in 0..n {
                for j in 0..n {
                    let naive: f64 = (0..dh).map(|k| vw(i, k) * q1.data()[k] + vw(j, k) * q2.data()[k]).sum();
                    prop_assert!((g.value(att.scores).at(&[i, j]) - naive).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn attention_rows_are_distributions(topo in topology(), n in 1usize..17, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = build_edges(GraphSpec::new(topo, n)).unwrap();
            let mut g = Graph::<f64>::new();
            let a = g.constant(random_matrix(&mut rng, n, n).map(|x| 20.0 * x));
            let s = normalize_attention(&mut g, a, &e).unwrap();
            let s = g.value(s);
            for i in 0..n {
                let row: f64 = (0..n).map(|j| s.at(&[i, j])).sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
                for j in 0..n {
                    if !e.connected(i, j) {
                        prop_assert_eq!(s.at(&[i, j]), 0.0);
                    }
                }
            }
        }

        #[test]
        fn gat_layer_is_permutation_equivariant(
            topo in topology(),
            perm in (1usize..17).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()),
            seed: u64,
        ) {
            let n = perm.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (vt, wt) = (random_matrix(&mut rng, n, 4), random_matrix(&mut rng, 4, 3));
            let (q1, q2) = (random_matrix(&mut rng, 1, 3).reshape(vec![3]).unwrap(), random_matrix(&mut rng, 1, 3).reshape(vec![3]).unwrap());
            let e = build_edges(GraphSpec::new(topo, n)).unwrap();
            let run = |v: Tensor<f64>, e: &EdgeMatrix| {
                let mut g = Graph::<f64>::new();
                let v = g.constant(v);
                let head = GatHead { w: g.constant(wt.clone()), q1: g.constant(q1.clone()), q2: g.constant(q2.clone()) };
                let out = gat_layer(&mut g, v, e, &[head], HeadCombine::Concat, Some(0.2)).unwrap();
                g.value(out).clone()
            };
            let base = run(vt.clone(), &e);
            let mut pv = vec![0.0; n * 4];
            for i in 0..n {
                pv[perm[i] * 4..perm[i] * 4 + 4].copy_from_slice(&vt.data()[i * 4..i * 4 + 4]);
            }
            let permuted = run(Tensor::new(vec![n, 4], pv).unwrap(), &e.permuted(&perm));
            for i in 0..n {
                for k in 0..3 {
                    prop_assert!((permuted.at(&[perm[i], k]) - base.at(&[i, k])).abs() < 1e-12);
                }
            }
        }
    }
}
