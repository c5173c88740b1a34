use frtpad::detector::Label;
use frtpad::providers::{generate_synthetic, SignalTarget, SynthSpec};

fn flat(s: &frtpad::detector::Sample<f32>) -> Vec<f64> {
    s.feature_stack.levels().iter().flat_map(|l| l.data().iter().map(|&v| v as f64)).collect()
}

/// Logistic-regression probe on the flattened feature stack, trained by
/// full-batch gradient descent on 300 samples and scored on the other 100.
#[test]
fn features_only_stack_is_linearly_separable() {
    let spec = SynthSpec { per_class: 200, signal_target: SignalTarget::FeaturesOnly, seed: 3, ..SynthSpec::default() };
    let d = generate_synthetic(&spec).unwrap();
    assert_eq!(d.samples.len(), 400);
    let x: Vec<Vec<f64>> = d.samples.iter().map(flat).collect();
    let y: Vec<f64> = d.samples.iter().map(|s| if s.label == Label::Bonafide { 1.0 } else { 0.0 }).collect();
    let (train, test) = (0..300, 300..400);
    let dim = x[0].len();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let lr = 0.01;
    for _ in 0..100 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for i in train.clone() {
            let z: f64 = x[i].iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y[i];
            gw.iter_mut().zip(&x[i]).for_each(|(g, a)| *g += err * a);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(c, g)| *c -= lr * g / 300.0);
        b -= lr * gb / 300.0;
    }
    let correct = test
        .clone()
        .filter(|&i| {
            let z: f64 = x[i].iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (z >= 0.0) == (y[i] == 1.0)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn features_only_raw_moments_match_across_classes() {
    let spec = SynthSpec { per_class: 300, signal_target: SignalTarget::FeaturesOnly, ..SynthSpec::default() };
    let d = generate_synthetic(&spec).unwrap();
    let mean = |label: Label| {
        let xs: Vec<f64> = d
            .samples
            .iter()
            .filter(|s| s.label == label)
            .flat_map(|s| s.raw_input.data().iter().map(|&v| v as f64))
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    // 300 * 3072 draws per class: the standard error of the mean is ~1e-3.
    assert!((mean(Label::Bonafide) - mean(Label::Attack)).abs() < 0.01);
}
