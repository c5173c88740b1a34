//! Biometric PAD error rates. Higher scores mean bona fide; a sample is
//! accepted as bona fide when `score >= threshold`.
//!
//! All rates are computed from exact integer counts so the sweep and any
//! brute-force recount agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::detector::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metrics(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        Ok(Self { scores, labels })
    }

    /// Convenience constructor from per-class score lists.
    pub fn from_classes(bonafide: &[f64], attack: &[f64]) -> Result<Self> {
        let scores = bonafide.iter().chain(attack).copied().collect();
        let labels = std::iter::repeat(Label::Bonafide)
            .take(bonafide.len())
            .chain(std::iter::repeat(Label::Attack).take(attack.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(attacks, bona fide)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let bona = self.labels.iter().filter(|l| l.is_bonafide()).count();
        (self.labels.len() - bona, bona)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        match self.class_counts() {
            (0, _) => Err(Error::Metrics("no attack samples".into())),
            (_, 0) => Err(Error::Metrics("no bona fide samples".into())),
            counts => Ok(counts),
        }
    }

    fn pairs(&self) -> impl Iterator<Item = (f64, Label)> + '_ {
        self.scores.iter().copied().zip(self.labels.iter().copied())
    }
}

/// Error counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub attacks_accepted: usize,
    pub bonafide_rejected: usize,
    pub n_attack: usize,
    pub n_bonafide: usize,
}

impl OperatingPoint {
    pub fn apcer(&self) -> f64 {
        self.attacks_accepted as f64 / self.n_attack as f64
    }

    pub fn bpcer(&self) -> f64 {
        self.bonafide_rejected as f64 / self.n_bonafide as f64
    }

    pub fn hter(&self) -> f64 {
        (self.apcer() + self.bpcer()) / 2.0
    }

    /// `|APCER - BPCER|` scaled by `n_attack * n_bonafide`, exact.
    fn scaled_gap(&self) -> usize {
        (self.attacks_accepted * self.n_bonafide).abs_diff(self.bonafide_rejected * self.n_attack)
    }
}

/// Counts errors at an arbitrary threshold by direct scan.
pub fn operating_point(s: &ScoreSet, threshold: f64) -> Result<OperatingPoint> {
    let (n_attack, n_bonafide) = s.require_both_classes()?;
    let mut attacks_accepted = 0;
    let mut bonafide_rejected = 0;
    for (score, label) in s.pairs() {
        match (label, score >= threshold) {
            (Label::Attack, true) => attacks_accepted += 1,
            (Label::Bonafide, false) => bonafide_rejected += 1,
            _ => {}
        }
    }
    Ok(OperatingPoint { threshold, attacks_accepted, bonafide_rejected, n_attack, n_bonafide })
}

pub fn apcer_bpcer(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let p = operating_point(s, threshold)?;
    Ok((p.apcer(), p.bpcer()))
}

pub fn hter(s: &ScoreSet, threshold: f64) -> Result<f64> {
    Ok(operating_point(s, threshold)?.hter())
}

/// Distinct scores in ascending order.
fn distinct_sorted(s: &ScoreSet) -> Vec<f64> {
    let mut v = s.scores.clone();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// A threshold strictly above `lo` and at most `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

/// Candidate thresholds in ascending order: `-inf`, the midpoints between
/// adjacent distinct scores, `+inf`.
pub fn candidate_thresholds(s: &ScoreSet) -> Vec<f64> {
    let u = distinct_sorted(s);
    let mut out = Vec::with_capacity(u.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(u.windows(2).map(|w| midpoint(w[0], w[1])));
    out.push(f64::INFINITY);
    out
}

/// Operating points at every candidate threshold, ascending.
pub fn sweep(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (n_attack, n_bonafide) = s.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = s.pairs().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let thresholds = candidate_thresholds(s);
    let mut points = Vec::with_capacity(thresholds.len());
    // Walk thresholds upward; everything below the threshold is rejected.
    let mut idx = 0;
    let (mut attacks_rejected, mut bona_rejected) = (0usize, 0usize);
    for thr in thresholds {
        while idx < sorted.len() && sorted[idx].0 < thr {
            match sorted[idx].1 {
                Label::Attack => attacks_rejected += 1,
                Label::Bonafide => bona_rejected += 1,
            }
            idx += 1;
        }
        points.push(OperatingPoint {
            threshold: thr,
            attacks_accepted: n_attack - attacks_rejected,
            bonafide_rejected: bona_rejected,
            n_attack,
            n_bonafide,
        });
    }
    Ok(points)
}

/// The equal-error operating point: minimal `|APCER - BPCER|`, ties broken
/// toward smaller APCER, then smaller threshold.
pub fn eer_point(s: &ScoreSet) -> Result<OperatingPoint> {
    let points = sweep(s)?;
    let best = points
        .iter()
        .min_by(|a, b| {
            a.scaled_gap()
                .cmp(&b.scaled_gap())
                .then(a.attacks_accepted.cmp(&b.attacks_accepted))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .copied();
    Ok(best.expect("sweep always yields the two infinite thresholds"))
}

pub fn eer_threshold(s: &ScoreSet) -> Result<f64> {
    Ok(eer_point(s)?.threshold)
}

/// HTER at the set's own EER threshold.
pub fn hter_at_eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_point(s)?.hter())
}

/// Minimum BPCER over candidate thresholds with `APCER <= target`. `+inf`
/// always qualifies, so the result is at most 1.
pub fn bpcer_at_apcer(s: &ScoreSet, target: f64) -> Result<f64> {
    let points = sweep(s)?;
    Ok(points.iter().filter(|p| p.apcer() <= target).map(OperatingPoint::bpcer).fold(f64::INFINITY, f64::min))
}

/// Pair statistic `P(bona > attack) + P(bona == attack) / 2`, from exact
/// counts over sorted scores.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (n_attack, n_bonafide) = s.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = s.pairs().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the credited pair count, to keep ties integral.
    let mut twice_credit: u128 = 0;
    let mut attacks_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut a, mut b) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            match sorted[j].1 {
                Label::Attack => a += 1,
                Label::Bonafide => b += 1,
            }
            j += 1;
        }
        twice_credit += b * (2 * attacks_below + a);
        attacks_below += a;
        i = j;
    }
    Ok(twice_credit as f64 / (2.0 * n_attack as f64 * n_bonafide as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Lowest accepted score; `+inf` for the origin.
    pub threshold: f64,
    pub apcer: f64,
    /// `1 - BPCER`.
    pub tpr: f64,
}

/// Operating points from `(0,0)` through one point per distinct score in
/// descending order; the last point accepts everything and is `(1,1)`.
pub fn roc(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (n_attack, n_bonafide) = s.require_both_classes()?;
    let mut sorted: Vec<(f64, Label)> = s.pairs().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![RocPoint { threshold: f64::INFINITY, apcer: 0.0, tpr: 0.0 }];
    let (mut fa, mut ta) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let thr = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == thr {
            match sorted[i].1 {
                Label::Attack => fa += 1,
                Label::Bonafide => ta += 1,
            }
            i += 1;
        }
        out.push(RocPoint { threshold: thr, apcer: fa as f64 / n_attack as f64, tpr: ta as f64 / n_bonafide as f64 });
    }
    Ok(out)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].apcer - w[0].apcer) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// The three table metrics, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub hter: f64,
    pub auc: f64,
    pub bpcer_at_apcer_1pct: f64,
    pub eer_threshold: f64,
}

pub const APCER_TARGET: f64 = 0.01;

pub fn report(s: &ScoreSet) -> Result<Report> {
    let eer = eer_point(s)?;
    Ok(Report {
        hter: eer.hter(),
        auc: auc(s)?,
        bpcer_at_apcer_1pct: bpcer_at_apcer(s, APCER_TARGET)?,
        eer_threshold: eer.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(bona: &[f64], attack: &[f64]) -> ScoreSet {
        ScoreSet::from_classes(bona, attack).unwrap()
    }

    #[test]
    fn roc_examples() {
        let r = roc(&set(&[0.9], &[0.1])).unwrap();
        assert!(r.iter().any(|p| p.apcer == 0.0 && p.tpr == 1.0));
        let r = roc(&set(&[0.5, 0.5], &[0.5])).unwrap();
        let pts: Vec<(f64, f64)> = r.iter().map(|p| (p.apcer, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.3, 0.3], &[0.3])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
    }

    #[test]
    fn apcer_bpcer_examples() {
        let s = set(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.6]);
        assert_eq!(apcer_bpcer(&s, 0.65).unwrap(), (0.0, 0.0));
        assert_eq!(apcer_bpcer(&s, 0.75).unwrap(), (0.0, 1.0 / 3.0));
        assert_eq!(apcer_bpcer(&s, f64::NEG_INFINITY).unwrap(), (1.0, 0.0));
        assert_eq!(apcer_bpcer(&s, f64::INFINITY).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn hter_examples() {
        let s = set(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.6]);
        assert_eq!(hter(&s, 0.65).unwrap(), 0.0);
        assert_eq!(hter(&s, f64::NEG_INFINITY).unwrap(), 0.5);
        assert!((hter(&s, 0.75).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn eer_examples() {
        let s = set(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.6]);
        let t = eer_threshold(&s).unwrap();
        assert!(t > 0.6 && t < 0.7);
        assert_eq!(hter(&s, t).unwrap(), 0.0);

        let s = set(&[0.6, 0.8], &[0.4, 0.7]);
        let p = eer_point(&s).unwrap();
        assert!(p.threshold > 0.6 && p.threshold <= 0.7, "{}", p.threshold);
        assert_eq!((p.apcer(), p.bpcer()), (0.5, 0.5));
    }

    #[test]
    fn bpcer_at_apcer_examples() {
        let bona = [0.5, 0.6, 0.95, 0.96];
        let mut attack = vec![0.2; 99];
        attack.push(0.9);
        assert_eq!(bpcer_at_apcer(&set(&bona, &attack), 0.01).unwrap(), 0.0);
        let mut attack = vec![0.2; 98];
        attack.extend([0.9, 0.9]);
        assert_eq!(bpcer_at_apcer(&set(&bona, &attack), 0.01).unwrap(), 0.5);
        assert_eq!(bpcer_at_apcer(&set(&[0.9, 0.8], &[0.1]), 0.01).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = set(&[0.1, 0.2], &[]);
        assert!(auc(&s).is_err());
        assert!(roc(&s).is_err());
        assert!(hter(&s, 0.5).is_err());
        assert!(eer_threshold(&s).is_err());
        assert!(bpcer_at_apcer(&s, 0.01).is_err());
        assert!(apcer_bpcer(&set(&[], &[0.3]), 0.5).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ScoreSet::new(vec![0.1], vec![]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![Label::Attack]).is_err());
    }

    #[test]
    fn midpoint_never_collapses_onto_lower_score() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let m = midpoint(lo, hi);
        assert!(m > lo && m <= hi);
    }

    fn score_set() -> impl Strategy<Value = ScoreSet> {
        // A small score alphabet forces ties.
        (1usize..40, 1usize..40, 2u32..12).prop_flat_map(|(na, nb, k)| {
            (
                proptest::collection::vec(0..k, nb),
                proptest::collection::vec(0..k, na),
            )
                .prop_map(move |(b, a)| {
                    let f = |v: Vec<u32>| v.into_iter().map(|x| x as f64 / k as f64).collect::<Vec<_>>();
                    ScoreSet::from_classes(&f(b), &f(a)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn auc_matches_trapezoid(s in score_set()) {
            let a = auc(&s).unwrap();
            let t = trapezoid_area(&roc(&s).unwrap());
            prop_assert!((a - t).abs() < 1e-9);
        }

        #[test]
        fn auc_negation_symmetries(s in score_set()) {
            let a = auc(&s).unwrap();
            let neg: Vec<f64> = s.scores().iter().map(|x| -x).collect();
            let swapped: Vec<Label> = s.labels().iter().map(|l| if l.is_bonafide() { Label::Attack } else { Label::Bonafide }).collect();
            let both = ScoreSet::new(neg.clone(), swapped.clone()).unwrap();
            prop_assert!((auc(&both).unwrap() - a).abs() < 1e-12);
            let flipped = ScoreSet::new(neg.clone(), s.labels().to_vec()).unwrap();
            prop_assert!((auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);

            let e = eer_point(&s).unwrap();
            let eb = eer_point(&both).unwrap();
            let gap = |p: &OperatingPoint| (p.apcer() - p.bpcer()).abs();
            prop_assert!((gap(&e) - gap(&eb)).abs() < 1e-12);
        }

        #[test]
        fn roc_is_monotone_and_rates_bounded(s in score_set()) {
            let r = roc(&s).unwrap();
            prop_assert_eq!((r[0].apcer, r[0].tpr), (0.0, 0.0));
            let last = r.last().unwrap();
            prop_assert_eq!((last.apcer, last.tpr), (1.0, 1.0));
            for w in r.windows(2) {
                prop_assert!(w[1].apcer >= w[0].apcer && w[1].tpr >= w[0].tpr);
            }
            for p in sweep(&s).unwrap() {
                prop_assert!((0.0..=1.0).contains(&p.apcer()) && (0.0..=1.0).contains(&p.bpcer()));
            }
        }

        #[test]
        fn sweep_matches_direct_counts(s in score_set()) {
            for p in sweep(&s).unwrap() {
                prop_assert_eq!(p, operating_point(&s, p.threshold).unwrap());
            }
        }

        #[test]
        fn eer_gap_is_minimal_over_the_sweep(s in score_set()) {
            let e = eer_point(&s).unwrap();
            prop_assert_eq!(hter(&s, e.threshold).unwrap(), (e.apcer() + e.bpcer()) / 2.0);
            for p in sweep(&s).unwrap() {
                prop_assert!((e.apcer() - e.bpcer()).abs() <= (p.apcer() - p.bpcer()).abs() + 1e-15);
            }
        }
    }
}
