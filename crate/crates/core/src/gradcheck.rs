//! Finite-difference verification of every differentiable primitive and of
//! the composed model, all in `f64`.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it checks. Each scalar objective is a fixed random
//! projection `Σ out ⊙ R` of the op output, which keeps every output
//! coordinate in play.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{self, AdapterConfig, GatHead, HeadCombine, LevelDims, Topology};
use crate::detector::{self, DetectorConfig, Label, ModelConfig, Sample};
use crate::engine::{Graph, ParamSet, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradient norms below this are compared absolutely (slack `TOLERANCE * NORM_FLOOR`).
pub const NORM_FLOOR: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Worst relative error over all `inputs` of the scalar objective `f`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        let mut probe = inputs.to_vec();
        for e in 0..inputs[k].len() {
            let x = inputs[k].data()[e];
            probe[k].data_mut()[e] = x + FD_STEP;
            let fp = eval(&probe)?;
            probe[k].data_mut()[e] = x - FD_STEP;
            let fm = eval(&probe)?;
            probe[k].data_mut()[e] = x;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error over every trainable tensor of `params`.
pub fn check_params<F>(params: &ParamSet<f64>, f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamSet<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, params)?;
        g.backward(out)?.into_params()
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        let base = params.tensor(&name)?.clone();
        let mut numeric = Vec::with_capacity(base.len());
        for e in 0..base.len() {
            let x = base.data()[e];
            probe.tensor_mut(&name)?.data_mut()[e] = x + FD_STEP;
            let fp = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[e] = x - FD_STEP;
            let fm = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[e] = x;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        let a = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// `Σ out ⊙ R` with `R` drawn from `rng`.
fn project(g: &mut Graph<'_, f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = uniform(g.shape(out), -1.0, 1.0, rng);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

type InputCase = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Draws a random instance from `setup` and checks the projected objective.
fn op_case<S>(rng: &mut ChaCha8Rng, setup: S) -> Result<f64>
where
    S: FnOnce(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>),
{
    let (inputs, op) = setup(rng);
    let proj_seed: u64 = rng.gen();
    check_inputs(&inputs, |g, v| {
        let out = op(g, v)?;
        let mut r = ChaCha8Rng::seed_from_u64(proj_seed);
        project(g, out, &mut r)
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
        (vec![uniform(&[m, k], -1., 1., rng), uniform(&[k, n], -1., 1., rng)], Box::new(|g, v| g.matmul(v[0], v[1])))
    })
}

fn conv_case(rng: &mut ChaCha8Rng, stride: usize) -> Result<f64> {
    op_case(rng, move |rng| {
        let (c, h, w, o) = (dim(rng, 1, 3), dim(rng, 3, 6), dim(rng, 3, 6), dim(rng, 1, 3));
        (
            vec![uniform(&[c, h, w], -1., 1., rng), uniform(&[o, c, 3, 3], -1., 1., rng), uniform(&[o], -1., 1., rng)],
            Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride)),
        )
    })
}

fn case_conv_s1(rng: &mut ChaCha8Rng) -> Result<f64> {
    conv_case(rng, 1)
}

fn case_conv_s2(rng: &mut ChaCha8Rng) -> Result<f64> {
    conv_case(rng, 2)
}

fn case_add_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
        (
            vec![uniform(&s, -1., 1., rng), uniform(&s, -1., 1., rng), uniform(&s, -1., 1., rng)],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let a = g.mul(a, v[2])?;
                let a = g.mul(a, v[0])?;
                Ok(g.scale(a, 0.7))
            }),
        )
    })
}

fn case_activations(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let n = dim(rng, 2, 10);
        (
            vec![uniform(&[n], -2., 2., rng), uniform(&[n], 0.5, 2.0, rng)],
            Box::new(|g, v| {
                let r = g.relu(v[0]);
                let l = g.leaky_relu(v[0], 0.2);
                let e = g.exp(v[0]);
                let lg = g.log(v[1])?;
                g.concat(&[r, l, e, lg])
            }),
        )
    })
}

fn case_pooling(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 7), dim(rng, 2, 7));
        let (th, tw) = (dim(rng, 1, 5), dim(rng, 1, 5));
        (
            vec![uniform(&[c, h, w], -1., 1., rng), uniform(&[dim(rng, 1, 4), 3], -1., 1., rng)],
            Box::new(move |g, v| {
                let p = g.avg_pool2(v[0])?;
                let a = g.adaptive_avg_pool(v[0], (th, tw))?;
                let m = g.mean_rows(v[1])?;
                g.concat(&[p, a, m])
            }),
        )
    })
}

fn case_structural(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let (m, a, b) = (dim(rng, 2, 4), dim(rng, 1, 3), dim(rng, 1, 3));
        (
            vec![uniform(&[m, a], -1., 1., rng), uniform(&[m, b], -1., 1., rng), uniform(&[a + b], -1., 1., rng)],
            Box::new(move |g, v| {
                let cc = g.concat_cols(&[v[0], v[1]])?;
                let biased = g.add_row_bias(cc, v[2])?;
                let t = g.transpose(biased)?;
                let t = g.transpose(t)?;
                let top = g.slice_rows(t, 0, 1)?;
                let rest = g.slice_rows(t, 1, m)?;
                let top = g.flatten(top);
                let rows = g.stack_rows(&[top, v[2]])?;
                let rows = g.reshape(rows, vec![2 * (a + b)])?;
                let rest = g.flatten(rest);
                let s = g.mean(rest);
                let all = g.concat(&[rows, rest, s])?;
                Ok(all)
            }),
        )
    })
}

fn case_outer_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let n = dim(rng, 1, 6);
        (vec![uniform(&[n, 1], -1., 1., rng), uniform(&[n], -1., 1., rng)], Box::new(|g, v| g.outer_sum(v[0], v[1])))
    })
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..rows * n).map(|_| rng.gen_bool(0.6)).collect();
    for r in 0..rows {
        let keep = rng.gen_range(0..n);
        mask[r * n + keep] = true;
    }
    mask
}

fn case_softmax_masked(rng: &mut ChaCha8Rng) -> Result<f64> {
    op_case(rng, |rng| {
        let rows = dim(rng, 1, 3);
        let mask = random_mask(rng, rows, 8);
        let shape = if rows == 1 { vec![8] } else { vec![rows, 8] };
        (vec![uniform(&shape, -3., 3., rng)], Box::new(move |g, v| g.softmax_masked(v[0], &mask)))
    })
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = dim(rng, 1, 6);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    let logits = uniform(&[b, 2], -3., 3., rng);
    check_inputs(&[logits], |g, v| g.cross_entropy(v[0], &labels))
}

fn case_gat_layer(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = dim(rng, 1, 5);
    let (d, dh) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let topology = if rng.gen_bool(0.5) { Topology::Dense } else { Topology::StepByStep };
    let edges = adapter::build_edges(adapter::GraphSpec::new(topology, n))?;
    let leaky = rng.gen_bool(0.5).then_some(0.2);
    let combine = if rng.gen_bool(0.5) { HeadCombine::Concat } else { HeadCombine::Average };
    let mut inputs = vec![uniform(&[n, d], -1., 1., rng)];
    for _ in 0..2 {
        inputs.extend([uniform(&[d, dh], -1., 1., rng), uniform(&[dh], -1., 1., rng), uniform(&[dh], -1., 1., rng)]);
    }
    let proj_seed: u64 = rng.gen();
    check_inputs(&inputs, |g, v| {
        let heads = [GatHead { w: v[1], q1: v[2], q2: v[3] }, GatHead { w: v[4], q1: v[5], q2: v[6] }];
        let out = adapter::gat_layer(g, v[0], &edges, &heads, combine, leaky)?;
        project(g, out, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn tiny_adapter(rng: &mut ChaCha8Rng) -> AdapterConfig {
    let n = dim(rng, 2, 4);
    AdapterConfig {
        levels: (0..n).map(|_| LevelDims::new(dim(rng, 1, 3), dim(rng, 3, 5), dim(rng, 3, 5))).collect(),
        proj_channels: 2,
        proj_pool: 2,
        d: 4,
        d_hidden: 3,
        d_out: 3,
        heads: 2,
        topology: if rng.gen_bool(0.5) { Topology::Dense } else { Topology::StepByStep },
        self_loops: true,
        leaky_scores: rng.gen_bool(0.5),
        leaky_alpha: 0.2,
    }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        detector: DetectorConfig { input: [2, 8, 8], channels: vec![3, 4], d_p: 4 },
        adapter: tiny_adapter(rng),
        use_adapter: true,
    }
}

fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Sample<f64>> {
    let levels = cfg.adapter.levels.iter().map(|l| uniform(&l.as_shape(), -1., 1., rng)).collect();
    Ok(Sample {
        raw_input: uniform(&cfg.detector.input, -1., 1., rng),
        feature_stack: adapter::FeatureStack::new(levels, "synthetic")?,
        label: if rng.gen_bool(0.5) { Label::Bonafide } else { Label::Attack },
        dataset_id: "gradcheck".into(),
    })
}

fn case_adapt(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(rng);
    let params = cfg.init_params::<f64>(rng.gen())?;
    let sample = random_sample(&cfg, rng)?;
    let proj_seed: u64 = rng.gen();
    check_params(&params, |g, p| {
        let ft = adapter::adapt(g, p, &sample.feature_stack, &cfg.adapter)?;
        project(g, ft, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn case_detect(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(rng);
    let params = cfg.init_params::<f64>(rng.gen())?;
    let sample = random_sample(&cfg, rng)?;
    let proj_seed: u64 = rng.gen();
    check_params(&params, |g, p| {
        let fp = detector::detect_features(g, p, &sample.raw_input, &cfg.detector)?;
        project(g, fp, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn case_classify(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model(rng);
    let params = cfg.init_params::<f64>(rng.gen())?;
    let fh = uniform(&[cfg.fused_dim()], -1., 1., rng);
    let proj_seed: u64 = rng.gen();
    check_params(&params, |g, p| {
        let x = g.constant(fh.clone());
        let logits = detector::classify(g, p, x)?;
        project(g, logits, &mut ChaCha8Rng::seed_from_u64(proj_seed))
    })
}

fn case_full_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = tiny_model(rng);
    cfg.use_adapter = rng.gen_bool(0.8);
    let params = cfg.init_params::<f64>(rng.gen())?;
    let samples = (0..3).map(|_| random_sample(&cfg, rng)).collect::<Result<Vec<_>>>()?;
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    check_params(&params, |g, p| detector::loss(g, p, &batch, &cfg))
}

/// Every case of the suite, by name.
pub fn cases() -> Vec<(&'static str, InputCase)> {
    vec![
        ("matmul", case_matmul as InputCase),
        ("conv2d_stride1", case_conv_s1),
        ("conv2d_stride2", case_conv_s2),
        ("add_mul_scale", case_add_mul),
        ("relu_leaky_exp_log", case_activations),
        ("avg_pool_adaptive_pool_mean_rows", case_pooling),
        ("concat_stack_slice_transpose_bias", case_structural),
        ("outer_sum", case_outer_sum),
        ("softmax_masked", case_softmax_masked),
        ("cross_entropy", case_cross_entropy),
        ("gat_layer", case_gat_layer),
        ("adapt", case_adapt),
        ("detect_features", case_detect),
        ("classify", case_classify),
        ("loss_end_to_end", case_full_loss),
    ]
}

/// Runs one named case over `seeds` seeds.
pub fn run_case(name: &str, case: InputCase, seeds: usize) -> Result<CheckOutcome> {
    let mut worst = (0.0f64, 0u64);
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let err = case(&mut rng)?;
        if err > worst.0 || !err.is_finite() {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, seed);
        }
    }
    Ok(CheckOutcome { name: name.to_string(), seeds, max_rel_err: worst.0, worst_seed: worst.1 })
}

pub fn run_suite(seeds: usize) -> Result<Vec<CheckOutcome>> {
    cases().into_iter().map(|(name, case)| run_case(name, case, seeds)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x^2) checked against an objective whose analytic side is
        // forced wrong by routing through a constant copy.
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let err = check_inputs(&[x], |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let sq = g.mul(v[0], c)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err > 0.1, "checker must flag the missing half of the gradient: {err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[0.0], &[1e-12]) < 1e-7);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn full_suite_within_tolerance() {
        for outcome in run_suite(DEFAULT_SEEDS).unwrap() {
            println!("{:<40} max rel err {:.3e} (seed {})", outcome.name, outcome.max_rel_err, outcome.worst_seed);
            assert!(outcome.passed(), "{outcome:?}");
        }
    }
}
