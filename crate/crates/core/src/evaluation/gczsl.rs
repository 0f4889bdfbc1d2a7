use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{pair_index, CompositionLabel, World};

use super::{EvalError, ScoreMatrix};

pub const DEFAULT_BIAS_POINTS: usize = 1000;

/// One operating point of the bias sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(serialize_with = "ser_bias", deserialize_with = "de_bias")]
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

fn ser_bias<S: Serializer>(bias: &f64, s: S) -> Result<S::Ok, S::Error> {
    if bias.is_infinite() {
        s.serialize_str(if *bias > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*bias)
    }
}

fn de_bias<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Bias {
        Number(f64),
        Text(String),
    }
    match Bias::deserialize(d)? {
        Bias::Number(v) => Ok(v),
        Bias::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Bias::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Bias::Text(t) => Err(serde::de::Error::custom(format!("invalid bias {t:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub world: World,
    pub curve: Vec<CurvePoint>,
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub state_acc: f64,
    pub object_acc: f64,
    /// Bias of the harmonic-mean maximising operating point.
    #[serde(serialize_with = "ser_bias", deserialize_with = "de_bias")]
    pub best_bias: f64,
    pub tau_used: Option<f64>,
    pub n_images: usize,
    pub n_columns: usize,
}

impl EvalReport {
    /// `bias,seen_acc,unseen_acc` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.bias, p.seen_acc, p.unseen_acc));
        }
        out
    }
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Trapezoidal area under `(seen, unseen)` points ordered by increasing seen
/// accuracy (decreasing unseen accuracy among equal seen values).
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    sorted
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Maximum harmonic mean and the index of its first occurrence.
pub fn best_harmonic_mean(points: &[(f64, f64)]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &(s, u)) in points.iter().enumerate() {
        let hm = harmonic_mean(s, u);
        if hm > best.0 {
            best = (hm, i);
        }
    }
    if points.is_empty() {
        (0.0, 0)
    } else {
        best
    }
}

/// Maximum over a score-matrix row restricted to one column group; `None`
/// when the group is empty or fully masked. Ties go to the lowest column.
fn group_max(row: &[f64], seen_mask: &[bool], want_seen: bool) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (c, (&v, &is_seen)) in row.iter().zip(seen_mask).enumerate() {
        if is_seen != want_seen || v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, c));
        }
    }
    best
}

/// Per-image best columns in each group.
struct ImageSummary {
    seen: Option<(f64, usize)>,
    unseen: Option<(f64, usize)>,
    label_col: usize,
    label_seen: bool,
}

impl ImageSummary {
    /// Column predicted when `bias` is added to every unseen column.
    fn predict(&self, bias: f64) -> Option<usize> {
        match (self.seen, self.unseen) {
            (None, None) => None,
            (Some((_, c)), None) => Some(c),
            (None, Some((_, c))) => Some(c),
            (Some((s, sc)), Some((u, uc))) => {
                if bias == f64::INFINITY {
                    return Some(uc);
                }
                if bias == f64::NEG_INFINITY {
                    return Some(sc);
                }
                let shifted = u + bias;
                if shifted > s || (shifted == s && uc < sc) {
                    Some(uc)
                } else {
                    Some(sc)
                }
            }
        }
    }
}

fn summarise(scores: &ScoreMatrix, labels: &[CompositionLabel]) -> Result<Vec<ImageSummary>, EvalError> {
    if labels.len() != scores.n_images() {
        return Err(EvalError::Invalid(format!(
            "{} labels for {} score rows",
            labels.len(),
            scores.n_images()
        )));
    }
    let lookup = pair_index(&scores.pairs);
    labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let &label_col = lookup.get(label).ok_or(EvalError::MissingLabel {
                state: label.state,
                object: label.object,
            })?;
            let row = scores.scores.row(i);
            Ok(ImageSummary {
                seen: group_max(row, &scores.seen_mask, true),
                unseen: group_max(row, &scores.seen_mask, false),
                label_col,
                label_seen: scores.seen_mask[label_col],
            })
        })
        .collect()
}

/// Bias values at which some unseen-labelled image switches to an unseen
/// prediction, sorted, deduplicated and evenly subsampled to at most
/// `n_points`.
///
/// Each gap `s − u` is nudged up by a relative `1e-9` so the candidate lies
/// just past the switch rather than on the tie.
pub fn bias_candidates(scores: &ScoreMatrix, labels: &[CompositionLabel], n_points: usize) -> Result<Vec<f64>, EvalError> {
    let summaries = summarise(scores, labels)?;
    Ok(candidates_from(&summaries, n_points))
}

fn candidates_from(summaries: &[ImageSummary], n_points: usize) -> Vec<f64> {
    let mut gaps: Vec<f64> = summaries
        .iter()
        .filter(|s| !s.label_seen)
        .filter_map(|s| match (s.seen, s.unseen) {
            (Some((sv, _)), Some((uv, _))) => {
                let gap = sv - uv;
                gap.is_finite().then(|| gap + 1e-9 * gap.abs().max(1.0))
            }
            _ => None,
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps.dedup();
    if gaps.len() <= n_points {
        return gaps;
    }
    if n_points == 0 {
        return Vec::new();
    }
    if n_points == 1 {
        return vec![gaps[gaps.len() / 2]];
    }
    let last = gaps.len() - 1;
    let mut picked: Vec<f64> = (0..n_points).map(|i| gaps[i * last / (n_points - 1)]).collect();
    picked.dedup();
    picked
}

/// Generalised seen/unseen evaluation by sweeping a bias on unseen columns.
///
/// The curve runs from bias `−∞` (seen columns only) through the candidate
/// biases to `+∞` (unseen columns only). Argmax ties go to the lowest column.
pub fn evaluate_gczsl(
    scores: &ScoreMatrix,
    labels: &[CompositionLabel],
    n_bias_points: usize,
    world: World,
) -> Result<EvalReport, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty("evaluation set"));
    }
    let summaries = summarise(scores, labels)?;
    let mut biases = vec![f64::NEG_INFINITY];
    biases.extend(candidates_from(&summaries, n_bias_points));
    biases.push(f64::INFINITY);

    let n_seen = summaries.iter().filter(|s| s.label_seen).count();
    let n_unseen = summaries.len() - n_seen;
    let rate = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let curve: Vec<CurvePoint> = biases
        .iter()
        .map(|&bias| {
            let (mut seen_hits, mut unseen_hits) = (0, 0);
            for s in &summaries {
                if s.predict(bias) == Some(s.label_col) {
                    if s.label_seen {
                        seen_hits += 1;
                    } else {
                        unseen_hits += 1;
                    }
                }
            }
            CurvePoint {
                bias,
                seen_acc: rate(seen_hits, n_seen),
                unseen_acc: rate(unseen_hits, n_unseen),
            }
        })
        .collect();

    let points: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    let (best_hm, best_idx) = best_harmonic_mean(&points);
    let best_bias = curve[best_idx].bias;
    let (mut state_hits, mut object_hits) = (0, 0);
    for (s, label) in summaries.iter().zip(labels) {
        if let Some(col) = s.predict(best_bias) {
            let predicted = scores.pairs[col];
            state_hits += usize::from(predicted.state == label.state);
            object_hits += usize::from(predicted.object == label.object);
        }
    }
    let n = labels.len() as f64;
    Ok(EvalReport {
        world,
        auc: auc(&points),
        best_hm,
        best_seen: curve[0].seen_acc,
        best_unseen: curve[curve.len() - 1].unseen_acc,
        state_acc: state_hits as f64 / n,
        object_acc: object_hits as f64 / n,
        best_bias,
        tau_used: None,
        n_images: labels.len(),
        n_columns: scores.n_columns(),
        curve,
    })
}

/// Column predicted for every image at `bias`; `None` for an image whose
/// columns are all masked.
pub fn predictions_at(scores: &ScoreMatrix, bias: f64) -> Vec<Option<usize>> {
    (0..scores.n_images())
        .map(|i| {
            let row = scores.scores.row(i);
            ImageSummary {
                seen: group_max(row, &scores.seen_mask, true),
                unseen: group_max(row, &scores.seen_mask, false),
                label_col: 0,
                label_seen: true,
            }
            .predict(bias)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn label(s: usize, o: usize) -> CompositionLabel {
        CompositionLabel::new(s, o)
    }

    /// Four pairs over 2×2; the first two are seen.
    fn columns() -> (Vec<CompositionLabel>, HashSet<CompositionLabel>) {
        let pairs = vec![label(0, 0), label(1, 1), label(0, 1), label(1, 0)];
        let seen = pairs[..2].iter().copied().collect();
        (pairs, seen)
    }

    #[test]
    fn oracle_scores_are_perfect() {
        let (pairs, seen) = columns();
        let labels = vec![label(0, 0), label(1, 1), label(0, 1), label(1, 0), label(0, 1)];
        let mut scores = Tensor::zeros(labels.len(), 4);
        for (i, l) in labels.iter().enumerate() {
            scores.set(i, pairs.iter().position(|p| p == l).unwrap(), 1.0);
        }
        let m = ScoreMatrix::new(scores, pairs, &seen).unwrap();
        let r = evaluate_gczsl(&m, &labels, 100, World::ClosedWorld).unwrap();
        assert_eq!((r.best_seen, r.best_unseen, r.best_hm, r.auc), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((r.state_acc, r.object_acc), (1.0, 1.0));
    }

    #[test]
    fn equal_scores_pick_column_zero() {
        let (pairs, seen) = columns();
        let labels = vec![label(0, 0), label(0, 0), label(1, 1), label(0, 1)];
        let m = ScoreMatrix::new(Tensor::filled(4, 4, 0.3), pairs, &seen).unwrap();
        let r = evaluate_gczsl(&m, &labels, 100, World::ClosedWorld).unwrap();
        // without a bias every row predicts column 0, so accuracy is the
        // share of images labelled with column 0's pair
        assert!(predictions_at(&m, 0.0).iter().all(|&c| c == Some(0)));
        assert_eq!(r.best_seen, 2.0 / 3.0);
        // the only candidate bias sits just past the tie: every image then
        // predicts the first unseen column, as at +∞
        assert_eq!(r.curve.len(), 3);
        assert_eq!((r.curve[1].seen_acc, r.curve[1].unseen_acc), (0.0, 1.0));
        assert_eq!(r.best_unseen, 1.0);
    }

    #[test]
    fn hand_built_curve() {
        let points = [(0.2, 0.8), (0.5, 0.5), (0.8, 0.2)];
        // brute force: integrate the piecewise-linear curve on a fine grid
        let interpolate = |x: f64| {
            let seg = if x <= 0.5 { (0.2, 0.8, 0.5, 0.5) } else { (0.5, 0.5, 0.8, 0.2) };
            seg.1 + (x - seg.0) * (seg.3 - seg.1) / (seg.2 - seg.0)
        };
        let steps = 600_000;
        let h = 0.6 / steps as f64;
        let brute: f64 = (0..steps).map(|i| interpolate(0.2 + (i as f64 + 0.5) * h) * h).sum();
        assert!((auc(&points) - brute).abs() < 1e-9);
        assert!((auc(&points) - 0.3).abs() < 1e-12);
        assert_eq!(best_harmonic_mean(&points), (0.5, 1));
    }

    #[test]
    fn missing_label_is_an_error() {
        let (pairs, seen) = columns();
        let m = ScoreMatrix::new(Tensor::zeros(1, 4), pairs, &seen).unwrap();
        assert!(matches!(
            evaluate_gczsl(&m, &[label(5, 5)], 10, World::ClosedWorld),
            Err(EvalError::MissingLabel { .. })
        ));
    }

    #[test]
    fn infinite_biases_serialise_as_strings() {
        let p = CurvePoint {
            bias: f64::NEG_INFINITY,
            seen_acc: 0.5,
            unseen_acc: 0.0,
        };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<CurvePoint>(&json).unwrap(), p);
    }

    /// Naive oracle: for each bias, add it to every unseen column and take a
    /// full argmax of each row.
    pub(crate) fn brute_force(scores: &ScoreMatrix, labels: &[CompositionLabel], biases: &[f64]) -> (f64, f64) {
        let mut points = Vec::new();
        for &b in biases.iter().rev() {
            let (mut sh, mut sn, mut uh, mut un) = (0usize, 0usize, 0usize, 0usize);
            for (i, l) in labels.iter().enumerate() {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for c in 0..scores.n_columns() {
                    let raw = scores.scores.get(i, c);
                    let v = if scores.seen_mask[c] {
                        if b == f64::INFINITY { f64::NEG_INFINITY } else { raw }
                    } else if b == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else if b == f64::INFINITY {
                        raw
                    } else {
                        raw + b
                    };
                    if best.1 == usize::MAX || v > best.0 {
                        best = (v, c);
                    }
                }
                let truth = scores.pairs.iter().position(|p| p == l).unwrap();
                if scores.seen_mask[truth] {
                    sn += 1;
                    sh += usize::from(best.1 == truth);
                } else {
                    un += 1;
                    uh += usize::from(best.1 == truth);
                }
            }
            let rate = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
            points.push((rate(sh, sn), rate(uh, un)));
        }
        // points are in decreasing-bias order: seen accuracy ascending
        let area: f64 = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
        let hm = points
            .iter()
            .map(|&(s, u)| if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) })
            .fold(0.0, f64::max);
        (area, hm)
    }

    pub(crate) fn random_instance(seed: u64) -> (ScoreMatrix, Vec<CompositionLabel>) {
        let mut rng = stream_rng(seed, Stream::Bench);
        let n_images = rng.random_range(1..=50);
        let n_cols = rng.random_range(2..=30);
        let pairs: Vec<_> = (0..n_cols).map(|c| label(c / 6, c % 6)).collect();
        let n_seen = rng.random_range(1..n_cols);
        let seen: HashSet<_> = pairs[..n_seen].iter().copied().collect();
        let scores = Tensor::random_normal(n_images, n_cols, 1.0, &mut rng);
        let labels = (0..n_images).map(|_| pairs[rng.random_range(0..n_cols)]).collect();
        (ScoreMatrix::new(scores, pairs, &seen).unwrap(), labels)
    }

    #[test]
    fn matches_brute_force_rescan() {
        for seed in 0..50 {
            let (m, labels) = random_instance(seed);
            let r = evaluate_gczsl(&m, &labels, DEFAULT_BIAS_POINTS, World::ClosedWorld).unwrap();
            let biases: Vec<f64> = r.curve.iter().map(|p| p.bias).collect();
            let (area, hm) = brute_force(&m, &labels, &biases);
            assert_eq!(r.auc, area, "seed {seed}");
            assert_eq!(r.best_hm, hm, "seed {seed}");
        }
    }

    #[test]
    fn endpoints_give_best_seen_and_unseen() {
        for seed in 0..20 {
            let (m, labels) = random_instance(seed);
            let r = evaluate_gczsl(&m, &labels, DEFAULT_BIAS_POINTS, World::ClosedWorld).unwrap();
            assert!(r.curve.iter().all(|p| p.seen_acc <= r.best_seen && p.unseen_acc <= r.best_unseen));
            assert!((0.0..=1.0).contains(&r.auc));
        }
    }

    #[test]
    fn subsampling_keeps_extremes() {
        let (m, labels) = random_instance(3);
        let all = bias_candidates(&m, &labels, usize::MAX).unwrap();
        if all.len() > 3 {
            let few = bias_candidates(&m, &labels, 3).unwrap();
            assert_eq!(few.first(), all.first());
            assert_eq!(few.last(), all.last());
            assert_eq!(few.len(), 3);
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_predictions(seed in 0u64..200, factor in 0.01f64..100.0) {
            let (m, _) = random_instance(seed);
            let mut scaled = m.clone();
            scaled.scores = m.scores.scale(factor);
            prop_assert_eq!(predictions_at(&m, 0.0), predictions_at(&scaled, 0.0));
        }

        #[test]
        fn unseen_predictions_grow_with_bias(seed in 0u64..200, a in -3.0f64..3.0, delta in 0.0f64..3.0) {
            let (m, _) = random_instance(seed);
            let unseen_at = |b: f64| -> HashSet<usize> {
                predictions_at(&m, b)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, c)| c.is_some_and(|c| !m.seen_mask[c]))
                    .map(|(i, _)| i)
                    .collect()
            };
            prop_assert!(unseen_at(a).is_subset(&unseen_at(a + delta)));
        }
    }
}
