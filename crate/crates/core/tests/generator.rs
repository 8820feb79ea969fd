//! Monte-Carlo and closed-form checks of the synthetic causal generator.

use seqmask::analysis::{encode_labels, fisher_z, pearson, LabelEncoding, DEFAULT_LEVEL};
use seqmask::synth::{
    default_task, generate_causal, generate_dataset, intervene, CausalSample, CausalSpec, DomainSpec,
};
use seqmask::Modality;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn domain(id: &str, n: usize, sign: f64, strength: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        id: id.into(),
        n,
        spurious_sign: sign,
        spurious_strength: strength,
        seed,
    }
}

fn label_histogram(samples: &[CausalSample], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for s in samples {
        h[s.label] += 1.0;
    }
    h.iter().map(|c| c / samples.len() as f64).collect()
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn spurious_features_are_label_independent_without_a_link() {
    let (mut causal, _) = default_task(7, 2000);
    // The confounder and the invariant partner are the other two routes
    // from a spurious feature to the label; both are switched off here.
    causal.spurious_edge = 0.0;
    causal.confounder_scale = 0.0;
    let d = domain("null", 2000, 1.0, 0.0, 17);
    let samples = generate_causal(&causal, &d).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let y = encode_labels(&labels, 3, LabelEncoding::Ordinal);
    let mut accepted = 0;
    let mut total = 0;
    for m in [Modality::Text, Modality::Video] {
        for &j in &causal.modality(m).spurious {
            let x: Vec<f64> = samples
                .iter()
                .map(|s| if m == Modality::Text { s.text[j] } else { s.video[j] })
                .collect();
            accepted += usize::from(!fisher_z(&x, &y, DEFAULT_LEVEL).unwrap().dependent);
            total += 1;
        }
    }
    assert!(accepted as f64 >= 0.9 * total as f64, "{accepted}/{total}");
}

/// Accuracy of the Bayes rule that sees the invariant score part `a` exactly:
/// integrates `max_k P(label = k | a)` over `a ~ N(0, v)`.
fn invariant_bayes_accuracy(causal: &CausalSpec) -> f64 {
    let sigma = causal.label_noise;
    let v = causal.score_variance() - sigma * sigma;
    let th = causal.thresholds();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let sd = v.sqrt();
    let (lo, hi, steps) = (-8.0 * sd, 8.0 * sd, 20_000);
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let a = lo + i as f64 * h;
        let mut bounds = vec![f64::NEG_INFINITY];
        bounds.extend(&th);
        bounds.push(f64::INFINITY);
        let best = bounds
            .windows(2)
            .map(|w| unit.cdf((w[1] - a) / sigma) - unit.cdf((w[0] - a) / sigma))
            .fold(0.0, f64::max);
        let weight = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc += weight * best * unit.pdf(a / sd) / sd;
    }
    acc * h
}

#[test]
fn invariant_rule_beats_spurious_rule_on_flipped_target() {
    let (causal, domains) = default_task(7, 10_000);
    let tgt = domains.iter().find(|d| d.id == "tgt").unwrap().clone();
    let src = domains.iter().find(|d| d.id == "src_a").unwrap().clone();
    let samples = generate_causal(&causal, &tgt).unwrap();
    let th = causal.thresholds();

    let bayes = invariant_bayes_accuracy(&causal);
    // Empirical accuracy of that rule on the target domain.
    let unit = Normal::new(0.0, 1.0).unwrap();
    let sigma = causal.label_noise;
    let invariant_hits = samples
        .iter()
        .filter(|s| {
            let a = s.score - sigma * s.label_exogenous;
            let mut bounds = vec![f64::NEG_INFINITY];
            bounds.extend(&th);
            bounds.push(f64::INFINITY);
            let probs: Vec<f64> = bounds
                .windows(2)
                .map(|w| unit.cdf((w[1] - a) / sigma) - unit.cdf((w[0] - a) / sigma))
                .collect();
            let pred = (0..probs.len()).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
            pred == s.label
        })
        .count() as f64
        / samples.len() as f64;
    assert!(
        (invariant_hits - bayes).abs() < 0.02,
        "mc {invariant_hits} vs closed form {bayes}"
    );

    // Spurious rule oriented by a source domain: decode the label code from
    // the mean spurious value and round to the nearest class.
    let spurious_hits = samples
        .iter()
        .filter(|s| {
            let idx = &causal.text.spurious;
            let mean = idx.iter().map(|&j| s.text[j]).sum::<f64>() / idx.len() as f64;
            let code = mean / (src.spurious_sign * src.spurious_strength);
            let pred = ((code + 1.0).round().clamp(0.0, 2.0)) as usize;
            pred == s.label
        })
        .count() as f64
        / samples.len() as f64;
    assert!(
        bayes > spurious_hits + 0.1,
        "invariant {bayes} vs spurious {spurious_hits}"
    );
}

#[test]
fn interventions_move_labels_only_through_parents() {
    let (causal, domains) = default_task(7, 10_000);
    let d = &domains[0];
    let samples = generate_causal(&causal, d).unwrap();
    let base = label_histogram(&samples, 3);
    let noise = causal.text.noise()[0];
    let spur = causal.video.spurious[0];
    let inv = causal.text.invariant[0];
    let run = |m: Modality, j: usize, v: f64| -> Vec<f64> {
        let out: Vec<CausalSample> = samples
            .iter()
            .map(|s| intervene(&causal, d, s, m, j, v).unwrap())
            .collect();
        label_histogram(&out, 3)
    };
    assert!(total_variation(&base, &run(Modality::Text, noise, 3.0)) < 0.02);
    assert!(total_variation(&base, &run(Modality::Video, spur, -3.0)) < 0.02);
    let hi = run(Modality::Text, inv, 1.5);
    let lo = run(Modality::Text, inv, -1.5);
    assert!(total_variation(&hi, &lo) > 0.1, "{hi:?} vs {lo:?}");
}

#[test]
fn invariant_conditionals_match_across_domains_and_spurious_signs_follow_the_domain() {
    let (causal, _) = default_task(7, 6000);
    let a = generate_causal(&causal, &domain("a", 6000, 1.0, 1.0, 1)).unwrap();
    let b = generate_causal(&causal, &domain("b", 6000, -1.0, 2.0, 2)).unwrap();
    for class in 0..3 {
        for &j in &causal.text.invariant {
            let pick = |xs: &[CausalSample]| -> Vec<f64> {
                xs.iter().filter(|s| s.label == class).map(|s| s.text[j]).collect()
            };
            let (pa, pb) = (pick(&a), pick(&b));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| {
                let m = mean(v);
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            };
            let se = (var(&pa) / pa.len() as f64 + var(&pb) / pb.len() as f64).sqrt();
            assert!((mean(&pa) - mean(&pb)).abs() < 4.5 * se, "class {class} feature {j}");
        }
    }
    for (samples, sign) in [(&a, 1.0), (&b, -1.0)] {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let y = encode_labels(&labels, 3, LabelEncoding::Ordinal);
        for &j in &causal.text.spurious {
            let x: Vec<f64> = samples.iter().map(|s| s.text[j]).collect();
            assert_eq!(pearson(&x, &y).unwrap().signum(), sign);
        }
    }
}

#[test]
fn classes_are_roughly_balanced_and_tokens_jitter_around_features() {
    let (causal, domains) = default_task(7, 3000);
    let ds = generate_dataset(&causal, &domains[..1]).unwrap();
    let mut counts = [0usize; 3];
    for s in &ds.samples {
        counts[s.label] += 1;
    }
    for c in counts {
        assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
    }
    let s = &ds.samples[0];
    assert_eq!(s.text.len(), causal.text_tokens);
    assert_eq!(s.video.len(), causal.video_frames);
    let spread = (s.text[0][0] - s.text[1][0]).abs();
    assert!(spread < 10.0 * causal.jitter);
}
