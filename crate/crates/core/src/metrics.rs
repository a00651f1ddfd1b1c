//! Pixel-level confusion accounting, sensitivity, specificity and the
//! `shybrid_l = l·sensitivity + specificity` selection score.
//!
//! Pixels whose true label is 2 (water / invalid) are excluded everywhere.

use core::iter::Sum;
use core::ops::{Add, AddAssign};

use alloc::vec::Vec;

use crate::dataset::WATER;
use crate::error::{Error, Result};

/// Pixel counts of a binary fire / no-fire prediction.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub false_pos: u64,
}

impl ConfusionCounts {
    pub fn actual_fire(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn actual_no_fire(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn total(&self) -> u64 {
        self.actual_fire() + self.actual_no_fire()
    }

    /// `tp / (tp + fn)`, or `None` when there is no actual fire.
    pub fn sensitivity(&self) -> Option<f64> {
        sensitivity(self)
    }

    /// `tn / (tn + fp)`, or `None` when there is no actual no-fire pixel.
    pub fn specificity(&self) -> Option<f64> {
        specificity(self)
    }

    pub fn scores(&self) -> Option<Scores> {
        Some(Scores::new(self.sensitivity()?, self.specificity()?))
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            true_pos: self.true_pos + o.true_pos,
            false_neg: self.false_neg + o.false_neg,
            true_neg: self.true_neg + o.true_neg,
            false_pos: self.false_pos + o.false_pos,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies `pred` (labels 0/1) against `truth` (labels 0/1/2).
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "confusion",
            axis: "pixels",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if t > WATER {
            return Err(Error::InvalidLabel { index, label: t });
        }
        if t == WATER {
            continue;
        }
        if p > 1 {
            return Err(Error::InvalidLabel { index, label: p });
        }
        match (t, p) {
            (1, 1) => c.true_pos += 1,
            (1, _) => c.false_neg += 1,
            (_, 0) => c.true_neg += 1,
            _ => c.false_pos += 1,
        }
    }
    Ok(c)
}

pub fn sensitivity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.true_pos, c.actual_fire())
}

pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.true_neg, c.actual_no_fire())
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `l·sens + spec`.
pub fn shybrid(l: f64, sens: f64, spec: f64) -> f64 {
    l * sens + spec
}

/// Which `shybrid_l` drives early stopping and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EsMetric {
    Sh1,
    #[default]
    Sh2,
}

impl EsMetric {
    pub fn weight(self) -> f64 {
        match self {
            Self::Sh1 => 1.0,
            Self::Sh2 => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sh1 => "sh1",
            Self::Sh2 => "sh2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sh1" => Some(Self::Sh1),
            "sh2" => Some(Self::Sh2),
            _ => None,
        }
    }

    pub fn of(self, s: &Scores) -> f64 {
        match self {
            Self::Sh1 => s.sh1,
            Self::Sh2 => s.sh2,
        }
    }
}

/// Sensitivity, specificity and both selection scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub sens: f64,
    pub spec: f64,
    pub sh1: f64,
    pub sh2: f64,
}

impl Scores {
    pub fn new(sens: f64, spec: f64) -> Self {
        Self {
            sens,
            spec,
            sh1: shybrid(1.0, sens, spec),
            sh2: shybrid(2.0, sens, spec),
        }
    }

    /// Component-wise arithmetic mean; `None` for an empty slice.
    pub fn mean(all: &[Scores]) -> Option<Scores> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(Scores {
            sens: avg(|s| s.sens),
            spec: avg(|s| s.spec),
            sh1: avg(|s| s.sh1),
            sh2: avg(|s| s.sh2),
        })
    }
}

/// How per-tile counts are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Pool all pixels, then take ratios.
    #[default]
    Micro,
    /// Mean of per-tile ratios over tiles where each ratio is defined.
    Macro,
}

/// Sensitivity and specificity over a set of tiles, either of which may be
/// undefined.
pub fn aggregate(tiles: &[ConfusionCounts], averaging: Averaging) -> (Option<f64>, Option<f64>) {
    match averaging {
        Averaging::Micro => {
            let total: ConfusionCounts = tiles.iter().copied().sum();
            (total.sensitivity(), total.specificity())
        }
        Averaging::Macro => {
            let mean = |f: fn(&ConfusionCounts) -> Option<f64>| {
                let v: Vec<f64> = tiles.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            (mean(sensitivity), mean(specificity))
        }
    }
}

/// Index of the first maximum; `None` for an empty slice or any NaN.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    if scores.iter().any(|s| s.is_nan()) {
        return None;
    }
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn counts(tp: u64, fn_: u64, tn: u64, fp: u64) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: tp,
            false_neg: fn_,
            true_neg: tn,
            false_pos: fp,
        }
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let truth = [0, 1, 2, 1, 0, 0, 2, 1];
        let pred = truth.map(|t| u8::from(t == 1));
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.false_neg, c.false_pos), (0, 0));
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn three_of_four_fires() {
        let truth = [1, 1, 1, 1, 0, 0];
        let pred = [1, 1, 0, 1, 0, 1];
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.true_pos, c.false_neg), (3, 1));
        assert_eq!(c.sensitivity(), Some(0.75));
        assert_eq!(c.specificity(), Some(0.5));
    }

    #[test]
    fn undefined_ratios() {
        let c = counts(0, 0, 5, 1);
        assert_eq!(c.sensitivity(), None);
        assert!(c.specificity().is_some());
        assert_eq!(counts(2, 1, 0, 0).specificity(), None);
        assert!(c.scores().is_none());
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(matches!(confusion(&[0], &[3]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(confusion(&[2], &[0]), Err(Error::InvalidLabel { .. })));
        assert!(matches!(confusion(&[0, 1], &[0]), Err(Error::Dimension { .. })));
        // prediction under an ignored pixel is never inspected
        assert_eq!(confusion(&[7], &[2]).unwrap().total(), 0);
    }

    #[test]
    fn shybrid_values() {
        let s = Scores::new(0.8379, 0.7007);
        assert!((s.sh1 - 1.5386).abs() <= 2e-4);
        assert!((s.sh2 - 2.3765).abs() <= 2e-4);
        let s = Scores::new(0.9033, 0.7866);
        assert!((s.sh1 - 1.6899).abs() <= 2e-4);
        let s = Scores::new(1.0, 1.0);
        assert_eq!((s.sh1, s.sh2), (2.0, 3.0));
    }

    #[test]
    fn averaging_modes() {
        let tiles = [counts(1, 1, 8, 0), counts(0, 0, 10, 0), counts(3, 0, 0, 2)];
        let (se, sp) = aggregate(&tiles, Averaging::Micro);
        assert_eq!(se, Some(4.0 / 5.0));
        assert_eq!(sp, Some(18.0 / 20.0));
        let (se, sp) = aggregate(&tiles, Averaging::Macro);
        assert_eq!(se, Some((0.5 + 1.0) / 2.0));
        assert_eq!(sp, Some((1.0 + 1.0 + 0.0) / 3.0));
        assert_eq!(aggregate(&[], Averaging::Macro), (None, None));
    }

    #[test]
    fn selection_prefers_earliest_maximum() {
        assert_eq!(select_best(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[1.0, f64::NAN]), None);
    }

    #[test]
    fn mean_scores() {
        let m = Scores::mean(&[Scores::new(0.5, 1.0), Scores::new(1.0, 0.5)]).unwrap();
        assert_eq!((m.sens, m.spec, m.sh1, m.sh2), (0.75, 0.75, 1.5, 2.25));
        assert!(Scores::mean(&[]).is_none());
    }

    fn naive(pred: &[u8], truth: &[u8]) -> [u64; 4] {
        let mut c = [0u64; 4];
        for i in 0..pred.len() {
            let slot = match (truth[i], pred[i]) {
                (2, _) => continue,
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 0) => 2,
                _ => 3,
            };
            c[slot] += 1;
        }
        c
    }

    fn pair(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (vec(0u8..2, len), vec(0u8..3, len))
    }

    fn vec<S: Strategy>(s: S, len: usize) -> impl Strategy<Value = Vec<S::Value>> {
        proptest::collection::vec(s, len)
    }

    proptest! {
        #[test]
        fn matches_naive_loop((pred, truth) in pair(1024)) {
            let c = confusion(&pred, &truth).unwrap();
            prop_assert_eq!([c.true_pos, c.false_neg, c.true_neg, c.false_pos], naive(&pred, &truth));
            prop_assert_eq!(c.actual_fire(), truth.iter().filter(|&&t| t == 1).count() as u64);
            for r in [c.sensitivity(), c.specificity()].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn counts_are_additive((pred, truth) in pair(600), cut in 0usize..600) {
            let whole = confusion(&pred, &truth).unwrap();
            let parts = confusion(&pred[..cut], &truth[..cut]).unwrap()
                + confusion(&pred[cut..], &truth[cut..]).unwrap();
            prop_assert_eq!(whole, parts);
            prop_assert_eq!(whole.sensitivity(), parts.sensitivity());
        }

        #[test]
        fn shybrid_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, d in 1e-6f64..0.5, l in 1.0f64..3.0) {
            prop_assert!(shybrid(l, a + d, b) > shybrid(l, a, b));
            prop_assert!(shybrid(l, a, b + d) > shybrid(l, a, b));
        }

        #[test]
        fn selection_is_order_invariant(
            cands in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12),
            rot in 0usize..12,
        ) {
            // distinct scores so "the best" names one candidate
            let l = 2.0;
            let scores: Vec<f64> = cands.iter().enumerate()
                .map(|(i, (se, sp))| shybrid(l, *se, *sp) + i as f64 * 1e-9).collect();
            let best = select_best(&scores).unwrap();
            let r = rot % scores.len();
            let mut rotated = scores.clone();
            rotated.rotate_left(r);
            let moved = select_best(&rotated).unwrap();
            prop_assert_eq!((moved + r) % scores.len(), best);
        }
    }

    #[test]
    fn empty_inputs() {
        let c = confusion(&[], &[]).unwrap();
        assert_eq!(c, ConfusionCounts::default());
        let v: Vec<ConfusionCounts> = vec![];
        assert_eq!(v.into_iter().sum::<ConfusionCounts>(), ConfusionCounts::default());
    }
}
