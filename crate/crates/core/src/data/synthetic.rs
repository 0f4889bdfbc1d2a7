use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};

use super::{CompositionLabel, ConceptVocabulary, DataError, Dataset, DatasetSplits, FeatureStore, Sample, World};

/// Parameters of the planted-latent synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_states: usize,
    pub n_objects: usize,
    pub seen_fraction: f64,
    pub unseen_fraction: f64,
    /// Image feature dimension.
    pub d: usize,
    /// Node feature (and planted latent) dimension.
    pub m: usize,
    pub samples_per_pair: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `(n_seen, n_unseen)` pair counts, rounded to nearest.
    pub fn pair_counts(&self) -> Result<(usize, usize), DataError> {
        let infeasible = |msg: String| Err(DataError::Infeasible(msg));
        for (name, f) in [("seen_fraction", self.seen_fraction), ("unseen_fraction", self.unseen_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return infeasible(format!("{name} = {f} is outside (0, 1]"));
            }
        }
        if self.seen_fraction + self.unseen_fraction > 1.0 + 1e-12 {
            return infeasible(format!(
                "seen_fraction + unseen_fraction = {} exceeds 1",
                self.seen_fraction + self.unseen_fraction
            ));
        }
        for (name, n) in [
            ("n_states", self.n_states),
            ("n_objects", self.n_objects),
            ("d", self.d),
            ("m", self.m),
            ("samples_per_pair", self.samples_per_pair),
        ] {
            if n == 0 {
                return infeasible(format!("{name} must be at least 1"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return infeasible(format!("noise_sigma = {} must be finite and non-negative", self.noise_sigma));
        }
        let total = self.n_states * self.n_objects;
        let n_seen = (self.seen_fraction * total as f64).round() as usize;
        let n_unseen = (self.unseen_fraction * total as f64).round() as usize;
        if n_seen == 0 || n_unseen == 0 || n_seen + n_unseen > total {
            return infeasible(format!(
                "{n_seen} seen and {n_unseen} unseen pairs do not fit in {total} compositions"
            ));
        }
        Ok((n_seen, n_unseen))
    }
}

/// Generates a dataset whose image features are a noisy linear function of
/// planted per-concept latents, so unseen compositions are predictable from
/// their primitives.
///
/// Train holds `samples_per_pair` images per seen pair; val and test each hold
/// `ceil(samples_per_pair / 2)` images per seen and per unseen pair.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    let (n_seen, n_unseen) = spec.pair_counts()?;
    let (n_s, n_o, m, d) = (spec.n_states, spec.n_objects, spec.m, spec.d);
    let mut rng = stream_rng(spec.seed, Stream::Synthetic);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");

    let latents = Tensor::random_normal(n_s + n_o, m, 1.0, &mut rng);
    let projection = Tensor::random_normal(d, 2 * m, (1.0 / (2 * m) as f64).sqrt(), &mut rng);

    // Cover every primitive with at least one seen pair where possible, so
    // each concept has a neighbour in the training graph.
    let mut perm_s: Vec<usize> = (0..n_s).collect();
    let mut perm_o: Vec<usize> = (0..n_o).collect();
    perm_s.shuffle(&mut rng);
    perm_o.shuffle(&mut rng);
    let mut is_seen = vec![false; n_s * n_o];
    let mut seen = Vec::with_capacity(n_seen);
    for i in 0..n_s.max(n_o).min(n_seen) {
        let pair = CompositionLabel::new(perm_s[i % n_s], perm_o[i % n_o]);
        let idx = pair.state * n_o + pair.object;
        if !is_seen[idx] {
            is_seen[idx] = true;
            seen.push(pair);
        }
    }
    let mut rest: Vec<CompositionLabel> = (0..n_s * n_o)
        .filter(|&i| !is_seen[i])
        .map(|i| CompositionLabel::new(i / n_o, i % n_o))
        .collect();
    rest.shuffle(&mut rng);
    let fill = n_seen - seen.len();
    seen.extend(rest.drain(..fill));
    let mut unseen: Vec<_> = rest.into_iter().take(n_unseen).collect();
    seen.sort_unstable();
    unseen.sort_unstable();

    let held_out_per_pair = spec.samples_per_pair.div_ceil(2);
    let mut labels = Vec::new();
    let mut push = |pairs: &[CompositionLabel], per_pair: usize, split: &mut Vec<Sample>| {
        for &pair in pairs {
            for _ in 0..per_pair {
                split.push(Sample {
                    image_id: labels.len(),
                    label: pair,
                });
                labels.push(pair);
            }
        }
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    push(&seen, spec.samples_per_pair, &mut train);
    push(&seen, held_out_per_pair, &mut val);
    push(&unseen, held_out_per_pair, &mut val);
    push(&seen, held_out_per_pair, &mut test);
    push(&unseen, held_out_per_pair, &mut test);

    let mut features = Tensor::zeros(labels.len(), d);
    let mut concat = vec![0.0; 2 * m];
    for (row, pair) in labels.iter().enumerate() {
        concat[..m].copy_from_slice(latents.row(pair.state));
        concat[m..].copy_from_slice(latents.row(n_s + pair.object));
        let out = features.row_mut(row);
        for (i, v) in out.iter_mut().enumerate() {
            let w = projection.row(i);
            *v = w.iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng);
        }
    }

    let mut node_features = latents;
    for v in node_features.data_mut() {
        *v += noise.sample(&mut rng);
    }

    // Round through f32 so in-memory values equal what the files hold.
    let narrow = |t: Tensor| t.map(|v| v as f32 as f64);
    let dataset = Dataset {
        vocab: ConceptVocabulary::numbered(n_s, n_o)?,
        splits: DatasetSplits {
            seen_pairs: seen,
            unseen_pairs: unseen,
            train,
            val,
            test,
            world: World::ClosedWorld,
        },
        features: FeatureStore::new(narrow(features))?,
        node_features: Some(narrow(node_features)),
    };
    dataset.validate()?;
    Ok(dataset)
}
