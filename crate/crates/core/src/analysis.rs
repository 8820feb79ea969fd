//! Independence testing and feature-selection diagnostics: Fisher's z,
//! cross- and intra-modal independence ratios, feature/label correlation,
//! cross-domain overlap of selected features, evidence matrices and
//! recovery scores against a known support.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEVEL: f64 = 0.05;

/// Two-sided standard-normal critical value at `level`.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("test level must be in (0, 1), got {level}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - level / 2.0))
}

/// Pearson correlation. Errors on fewer than two points, unequal lengths
/// or a constant vector.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a constant vector has no correlation".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    // Exactly collinear inputs can land a few ulps short of 1.
    Ok(if 1.0 - r.abs() < 1e-12 { r.signum() } else { r })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherZ {
    pub r: f64,
    pub z: f64,
    pub dependent: bool,
}

/// Fisher's z-test of zero correlation: `z = atanh(r) * sqrt(n - 3)`,
/// dependent iff `|z|` exceeds the two-sided critical value.
pub fn fisher_z(x: &[f64], y: &[f64], level: f64) -> Result<FisherZ> {
    if x.len() < 4 || y.len() < 4 {
        return Err(Error::SampleSize {
            needed: 4,
            got: x.len().min(y.len()),
        });
    }
    let crit = critical_value(level)?;
    let r = pearson(x, y)?;
    Ok(fisher_from_r(r, x.len(), crit))
}

fn fisher_from_r(r: f64, n: usize, crit: f64) -> FisherZ {
    let z = r.atanh() * ((n - 3) as f64).sqrt();
    FisherZ {
        r,
        z,
        dependent: z.abs() > crit,
    }
}

/// Per-feature outcome of a batch of pairwise tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRatio {
    pub feature: usize,
    pub independent: usize,
    pub dependent: usize,
    pub independent_ratio: f64,
    pub dependent_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub method: String,
    pub level: f64,
    pub n: usize,
    pub features: Vec<FeatureRatio>,
    /// Pairs skipped because one side was constant.
    pub skipped: usize,
}

impl IndependenceReport {
    pub fn mean_independent_ratio(&self) -> Option<f64> {
        mean(self.features.iter().map(|f| f.independent_ratio))
    }

    pub fn mean_dependent_ratio(&self) -> Option<f64> {
        mean(self.features.iter().map(|f| f.dependent_ratio))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,independent,dependent,independent_ratio,dependent_ratio\n");
        for f in &self.features {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                f.feature, f.independent, f.dependent, f.independent_ratio, f.dependent_ratio
            );
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Column `j` of a `[n, d]` feature matrix.
pub fn column(feats: &Tensor, j: usize) -> Vec<f64> {
    let d = feats.last_dim();
    feats.data().iter().skip(j).step_by(d).copied().collect()
}

fn check_matrix(feats: &Tensor, support: &[usize], what: &str) -> Result<()> {
    if feats.shape().len() != 2 {
        return Err(Error::shape(
            "independence",
            format!("{what} features must be [n, d], got {:?}", feats.shape()),
        ));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= feats.shape()[1]) {
        return Err(Error::Input(format!(
            "{what} feature {j} outside 0..{}",
            feats.shape()[1]
        )));
    }
    Ok(())
}

/// Tests every `left` feature against every `right` feature (skipping a
/// feature against itself when `skip_self`).
fn pairwise(
    method: &str,
    left: &Tensor,
    left_support: &[usize],
    right: &Tensor,
    right_support: &[usize],
    skip_self: bool,
    level: f64,
) -> Result<IndependenceReport> {
    let n = left.shape()[0];
    if right.shape()[0] != n {
        return Err(Error::Input(format!("{n} vs {} samples", right.shape()[0])));
    }
    let crit = critical_value(level)?;
    let right_cols: Vec<(usize, Vec<f64>)> = right_support.iter().map(|&k| (k, column(right, k))).collect();
    let mut features = Vec::new();
    let mut skipped = 0;
    for &j in left_support {
        let x = column(left, j);
        let (mut ind, mut dep) = (0, 0);
        for (k, y) in &right_cols {
            if skip_self && *k == j {
                continue;
            }
            if n < 4 {
                return Err(Error::SampleSize { needed: 4, got: n });
            }
            match pearson(&x, y) {
                Ok(r) => {
                    if fisher_from_r(r, n, crit).dependent {
                        dep += 1;
                    } else {
                        ind += 1;
                    }
                }
                Err(Error::UndefinedCorrelation(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let total = ind + dep;
        if total == 0 {
            continue;
        }
        features.push(FeatureRatio {
            feature: j,
            independent: ind,
            dependent: dep,
            independent_ratio: ind as f64 / total as f64,
            dependent_ratio: dep as f64 / total as f64,
        });
    }
    Ok(IndependenceReport {
        method: method.into(),
        level,
        n,
        features,
        skipped,
    })
}

/// Each selected text feature against every selected video feature.
pub fn cross_modal_independence(
    text: &Tensor,
    video: &Tensor,
    text_support: &[usize],
    video_support: &[usize],
    level: f64,
) -> Result<IndependenceReport> {
    check_matrix(text, text_support, "text")?;
    check_matrix(video, video_support, "video")?;
    pairwise(
        "fisher_z_cross_modal",
        text,
        text_support,
        video,
        video_support,
        false,
        level,
    )
}

/// Every pair of distinct selected features within one modality.
pub fn intra_modal_independence(feats: &Tensor, support: &[usize], level: f64) -> Result<IndependenceReport> {
    check_matrix(feats, support, "modality")?;
    pairwise("fisher_z_intra_modal", feats, support, feats, support, true, level)
}

/// How class labels are turned into a numeric vector for correlation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    /// Evenly spaced codes from -1 to 1.
    #[default]
    Ordinal,
    /// 1 for the given class, 0 otherwise.
    OneVsRest(usize),
}

pub fn encode_labels(labels: &[usize], num_classes: usize, encoding: LabelEncoding) -> Vec<f64> {
    labels
        .iter()
        .map(|&y| match encoding {
            LabelEncoding::Ordinal => 2.0 * y as f64 / (num_classes - 1).max(1) as f64 - 1.0,
            LabelEncoding::OneVsRest(c) => f64::from(u8::from(y == c)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTest {
    pub feature: usize,
    pub selected: bool,
    /// `None` when the feature is constant.
    pub z: Option<f64>,
    pub dependent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCorrelationReport {
    pub level: f64,
    pub encoding: LabelEncoding,
    pub n: usize,
    pub tests: Vec<LabelTest>,
    pub selected_dependent_ratio: Option<f64>,
    pub removed_dependent_ratio: Option<f64>,
}

/// Tests every feature against the encoded label and summarizes the
/// dependent ratio among selected and among removed features. Constant
/// features count as independent.
pub fn label_correlation(
    feats: &Tensor,
    labels: &[usize],
    num_classes: usize,
    support: &[usize],
    encoding: LabelEncoding,
    level: f64,
) -> Result<LabelCorrelationReport> {
    check_matrix(feats, support, "label-test")?;
    let (n, d) = (feats.shape()[0], feats.shape()[1]);
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} samples", labels.len())));
    }
    if n < 4 {
        return Err(Error::SampleSize { needed: 4, got: n });
    }
    let y = encode_labels(labels, num_classes, encoding);
    let crit = critical_value(level)?;
    let selected: BTreeSet<usize> = support.iter().copied().collect();
    let mut tests = Vec::with_capacity(d);
    for j in 0..d {
        let (z, dependent) = match pearson(&column(feats, j), &y) {
            Ok(r) => {
                let f = fisher_from_r(r, n, crit);
                (Some(f.z), f.dependent)
            }
            Err(Error::UndefinedCorrelation(_)) => (None, false),
            Err(e) => return Err(e),
        };
        tests.push(LabelTest {
            feature: j,
            selected: selected.contains(&j),
            z,
            dependent,
        });
    }
    let ratio = |sel: bool| {
        mean(
            tests
                .iter()
                .filter(|t| t.selected == sel)
                .map(|t| f64::from(u8::from(t.dependent))),
        )
    };
    Ok(LabelCorrelationReport {
        level,
        encoding,
        n,
        selected_dependent_ratio: ratio(true),
        removed_dependent_ratio: ratio(false),
        tests,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub domains: Vec<String>,
    /// `jaccard[a][b]` between the supports of domains `a` and `b`.
    pub jaccard: Vec<Vec<f64>>,
    /// Features selected in every domain.
    pub consistent: Vec<usize>,
}

impl OverlapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain");
        for d in &self.domains {
            let _ = write!(out, ",{d}");
        }
        out.push('\n');
        for (d, row) in self.domains.iter().zip(&self.jaccard) {
            out.push_str(d);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Pairwise Jaccard overlaps and the intersection of per-domain supports.
pub fn invariant_overlap(supports: &[(String, Vec<usize>)]) -> OverlapReport {
    let jaccard_rows = supports
        .iter()
        .map(|(_, a)| supports.iter().map(|(_, b)| jaccard(a, b)).collect())
        .collect();
    let consistent = match supports.split_first() {
        None => Vec::new(),
        Some(((_, first), rest)) => first
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|j| rest.iter().all(|(_, s)| s.contains(j)))
            .collect(),
    };
    OverlapReport {
        domains: supports.iter().map(|(d, _)| d.clone()).collect(),
        jaccard: jaccard_rows,
        consistent,
    }
}

/// Per-feature, per-class evidence `R[j][k] = W[j][k] * x[j] (* m[j])`.
/// Column sums equal the logits without the bias.
pub fn evidence_matrix(weight: &Tensor, x: &[f64], mask: Option<&[f64]>) -> Result<Tensor> {
    let s = weight.shape();
    if s.len() != 2 || s[0] != x.len() {
        return Err(Error::shape(
            "evidence_matrix",
            format!("weight {s:?} does not match {} features", x.len()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape(
                "evidence_matrix",
                format!("mask has {} entries, expected {}", m.len(), x.len()),
            ));
        }
    }
    let k = s[1];
    let mut out = vec![0.0; x.len() * k];
    for j in 0..x.len() {
        let scale = x[j] * mask.map_or(1.0, |m| m[j]);
        for c in 0..k {
            out[j * k + c] = weight.data()[j * k + c] * scale;
        }
    }
    Tensor::new(vec![x.len(), k], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Share of selected features that are truly invariant (0 if none selected).
    pub precision: f64,
    /// Share of invariant features that were selected.
    pub recall: f64,
    pub invariant_retention: f64,
    pub spurious_retention: f64,
}

pub fn recovery_score(selected: &[usize], invariant: &[usize], spurious: &[usize]) -> RecoveryScore {
    let sel: BTreeSet<_> = selected.iter().collect();
    let hits = invariant.iter().filter(|j| sel.contains(j)).count();
    let frac = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let recall = frac(hits, invariant.len());
    RecoveryScore {
        precision: frac(hits, sel.len()),
        recall,
        invariant_retention: recall,
        spurious_retention: frac(spurious.iter().filter(|j| sel.contains(j)).count(), spurious.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_correlation_is_dependent() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let f = fisher_z(&x, &x, DEFAULT_LEVEL).unwrap();
        assert!(f.z.is_infinite() && f.dependent);
    }

    #[test]
    fn zero_correlation_is_independent() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = [1.0, 1.0, -1.0, -1.0];
        let f = fisher_z(&x, &y, DEFAULT_LEVEL).unwrap();
        assert_eq!(f.z, 0.0);
        assert!(!f.dependent);
    }

    #[test]
    fn z_at_half_correlation() {
        // atanh(0.5) = ln(3) / 2
        let f = fisher_from_r(0.5, 103, critical_value(0.05).unwrap());
        assert!((f.z - 5.493_061_443_340_549).abs() < 1e-12);
        assert!(f.dependent);
        assert!((critical_value(0.05).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn errors_for_small_or_constant_inputs() {
        assert!(matches!(
            fisher_z(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], 0.05),
            Err(Error::SampleSize { .. })
        ));
        assert!(matches!(
            fisher_z(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], 0.05),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn copied_features_are_fully_dependent() {
        let t = Tensor::new(
            vec![6, 2],
            vec![1.0, 0.0, 2.0, 1.0, 3.0, 0.0, 4.0, 1.0, 5.0, 0.5, 6.0, 0.2],
        )
        .unwrap();
        let report = cross_modal_independence(&t, &t, &[0, 1], &[0], 0.05).unwrap();
        assert_eq!(report.features[0].dependent_ratio, 1.0);
        let empty = cross_modal_independence(&t, &t, &[0, 1], &[], 0.05).unwrap();
        assert!(empty.features.is_empty());
        let intra = intra_modal_independence(&t, &[0], 0.05).unwrap();
        assert!(intra.features.is_empty());
    }

    #[test]
    fn overlap_hand_case() {
        let r = invariant_overlap(&[("a".into(), vec![1, 2, 3]), ("b".into(), vec![2, 3, 4])]);
        assert_eq!(r.jaccard[0][1], 0.5);
        assert_eq!(r.consistent, vec![2, 3]);
        let r = invariant_overlap(&[("a".into(), vec![1]), ("b".into(), vec![2])]);
        assert_eq!(r.jaccard[0][1], 0.0);
        assert!(r.consistent.is_empty());
        let r = invariant_overlap(&[("a".into(), vec![5, 6]), ("b".into(), vec![6, 5])]);
        assert_eq!(r.jaccard[1][0], 1.0);
    }

    #[test]
    fn evidence_hand_case() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = evidence_matrix(&w, &[2.0, -1.0], None).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, -3.0, -4.0]);
        let rm = evidence_matrix(&w, &[2.0, -1.0], Some(&[0.5, 0.0])).unwrap();
        assert_eq!(rm.data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn recovery_cases() {
        let s = recovery_score(&[0, 1], &[0, 1], &[2, 3]);
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        let s = recovery_score(&[2, 3], &[0, 1], &[2, 3]);
        assert_eq!((s.invariant_retention, s.spurious_retention), (0.0, 1.0));
        let s = recovery_score(&[0, 2, 5, 7], &[0, 1], &[2, 3]);
        assert_eq!(s.precision, 0.25);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.spurious_retention, 0.5);
        assert_eq!(recovery_score(&[], &[0], &[]).precision, 0.0);
    }

    #[test]
    fn label_feature_is_dependent() {
        let labels = [0, 1, 2, 0, 1, 2, 2, 0];
        let y = encode_labels(&labels, 3, LabelEncoding::Ordinal);
        let feats = Tensor::new(vec![8, 1], y).unwrap();
        let rep = label_correlation(&feats, &labels, 3, &[0], LabelEncoding::Ordinal, 0.05).unwrap();
        assert!(rep.tests[0].dependent);
        assert_eq!(rep.selected_dependent_ratio, Some(1.0));
        assert_eq!(rep.removed_dependent_ratio, None);
    }

    proptest! {
        #[test]
        fn fisher_is_symmetric_and_affine_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 8),
            y in prop::collection::vec(-10.0f64..10.0, 8),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            if let (Ok(f), Ok(g)) = (fisher_z(&x, &y, 0.05), fisher_z(&y, &x, 0.05)) {
                prop_assert_eq!(f.z.to_bits(), g.z.to_bits());
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let h = fisher_z(&ax, &y, 0.05).unwrap();
                prop_assert!((h.z - f.z).abs() < 1e-10 * (1.0 + f.z.abs()));
            }
        }
    }
}
