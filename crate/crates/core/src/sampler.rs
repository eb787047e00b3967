//! Drawing and predicting rotations from a trained binned scorer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binning::QuaternionSentence;
use crate::density::MixtureProportions;
use crate::error::{invalid, Error, Result};
use crate::scorer::{ConditioningCache, HeadKind, ScorerParameters};
use crate::so3::UnitQuaternion;

pub const REJECTION_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sentence: QuaternionSentence,
    /// Provisional uniform draws inside each chosen bin, fed to later steps.
    pub q_c_hats: [f64; 3],
    pub cell_edges: [(f64, f64); 3],
    /// Accepted `(q_x, q_y, q_z)`.
    pub point: [f64; 3],
    pub rejections: usize,
}

fn require_binned(params: &ScorerParameters) -> Result<()> {
    match params.config().head {
        HeadKind::Binned => Ok(()),
        HeadKind::Mog { .. } => Err(invalid("sampling and prediction need a binned head")),
    }
}

/// Inverse-CDF draw from a categorical given in log space.
pub fn sample_categorical<R: Rng + ?Sized>(dist: &MixtureProportions, rng: &mut R) -> usize {
    let probs: Vec<f64> = dist.log_probs().iter().map(|l| l.exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
            if u < *p {
                return i;
            }
            u -= p;
        }
    }
    last
}

/// Highest-probability bin; ties go to the lowest index.
pub fn argmax_bin(dist: &MixtureProportions) -> usize {
    let mut best = 0;
    for (i, l) in dist.log_probs().iter().enumerate() {
        if *l > dist.log_probs()[best] {
            best = i;
        }
    }
    best
}

pub fn sample_quaternion<R: Rng + ?Sized>(
    params: &ScorerParameters,
    viewpoint: usize,
    rng: &mut R,
) -> Result<(UnitQuaternion, SampleTrace)> {
    let cache = params.conditioning_cache(viewpoint)?;
    sample_quaternion_cached(params, &cache, rng)
}

pub fn sample_quaternion_cached<R: Rng + ?Sized>(
    params: &ScorerParameters,
    cache: &ConditioningCache,
    rng: &mut R,
) -> Result<(UnitQuaternion, SampleTrace)> {
    require_binned(params)?;
    let partition = params.partition();
    let mut labels = [0; 3];
    let mut hats = [0.0; 3];
    let mut edges = [(0.0, 0.0); 3];
    for step in 0..3 {
        let dist = params.step_distribution(cache, step, &hats[..step])?;
        let k = sample_categorical(&dist, rng);
        let (a, b) = partition.bounds(k);
        let mut hat = a + (b - a) * rng.random::<f64>();
        if partition.bin_of(hat)? != k {
            hat = a;
        }
        labels[step] = k;
        hats[step] = hat;
        edges[step] = (a, b);
    }

    let mut rejections = 0;
    let point = loop {
        let p = edges.map(|(a, b)| a + (b - a) * rng.random::<f64>());
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break p;
        }
        rejections += 1;
        if rejections >= REJECTION_CAP {
            return Err(Error::RejectionCap {
                attempts: rejections,
                cell: edges,
            });
        }
    };
    let q = UnitQuaternion::from_xyz(point[0], point[1], point[2])?;
    Ok((
        q,
        SampleTrace {
            sentence: QuaternionSentence(labels),
            q_c_hats: hats,
            cell_edges: edges,
            point,
            rejections,
        },
    ))
}

fn decode_greedy(
    params: &ScorerParameters,
    mut step_distribution: impl FnMut(usize, &[f64]) -> Result<MixtureProportions>,
) -> Result<UnitQuaternion> {
    require_binned(params)?;
    let partition = params.partition();
    let mut mids = [0.0; 3];
    for step in 0..3 {
        let dist = step_distribution(step, &mids[..step])?;
        mids[step] = partition.midpoint(argmax_bin(&dist));
    }
    let norm_sq: f64 = mids.iter().map(|v| v * v).sum();
    let raw = if norm_sq > 1.0 {
        let n = norm_sq.sqrt();
        [mids[0] / n, mids[1] / n, mids[2] / n, 0.0]
    } else {
        [mids[0], mids[1], mids[2], (1.0 - norm_sq).sqrt()]
    };
    UnitQuaternion::canonicalize(raw)
}

/// Greedy bin-midpoint decode.
pub fn predict_quaternion(params: &ScorerParameters, viewpoint: usize) -> Result<UnitQuaternion> {
    let cache = params.conditioning_cache(viewpoint)?;
    predict_quaternion_cached(params, &cache)
}

pub fn predict_quaternion_cached(params: &ScorerParameters, cache: &ConditioningCache) -> Result<UnitQuaternion> {
    decode_greedy(params, |step, prev| params.step_distribution(cache, step, prev))
}

/// The same decode, recomputing the context projection at every step.
pub fn predict_quaternion_uncached(params: &ScorerParameters, viewpoint: usize) -> Result<UnitQuaternion> {
    decode_greedy(params, |step, prev| {
        let logits = params.score_step(viewpoint, step, prev)?;
        crate::scorer::masked_log_probs(&logits, &params.step_mask(prev)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ScorerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(bins: usize, seed: u64) -> ScorerParameters {
        ScorerParameters::new(
            ScorerConfig {
                bins,
                frequencies: 3,
                context_dim: 8,
                hidden: [16, 16],
                head: HeadKind::Binned,
                viewpoints: 3,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn samples_stay_in_their_cells() {
        let p = model(20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ok = 0;
        for _ in 0..2000 {
            let (q, t) = match sample_quaternion(&p, 1, &mut rng) {
                Ok(r) => r,
                // a cell touching the sphere only at a corner has zero volume
                Err(Error::RejectionCap { cell, .. }) => {
                    let closest: f64 = cell.iter().map(|(a, b)| a.abs().min(b.abs()).powi(2)).sum();
                    assert!(closest >= 1.0 - 1e-12, "{cell:?}");
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            ok += 1;
            let n: f64 = q.components().iter().map(|c| c * c).sum();
            assert!((n - 1.0).abs() <= 1e-9);
            assert_eq!(p.partition().sentence_of(&q), t.sentence);
            for c in 0..3 {
                let (a, b) = t.cell_edges[c];
                assert!(a <= t.point[c] && t.point[c] <= b);
                assert!(a <= t.q_c_hats[c] && t.q_c_hats[c] < b);
            }
            assert!(t.sentence.is_legal(p.partition()));
        }
        assert!(ok > 1900);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = model(32, 2);
        let a = sample_quaternion(&p, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_quaternion(&p, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_step_frequencies_match_softmax() {
        let p = model(32, 3);
        let cache = p.conditioning_cache(2).unwrap();
        let dist = p.step_distribution(&cache, 0, &[]).unwrap();
        let draws = 100_000;
        let mut counts = vec![0usize; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..draws {
            let (_, t) = sample_quaternion_cached(&p, &cache, &mut rng).unwrap();
            counts[t.sentence.0[0]] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let e = dist.prob(i) * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // Wilson-Hilferty upper 0.001 quantile, 31 degrees of freedom
        let k: f64 = 31.0;
        let z = 3.090_232;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "χ² = {chi2}, critical {crit}");
    }

    #[test]
    fn cached_and_uncached_predictions_agree() {
        let p = model(64, 4);
        for v in 0..3 {
            let a = predict_quaternion(&p, v).unwrap();
            assert_eq!(a, predict_quaternion_uncached(&p, v).unwrap());
            assert_eq!(a, predict_quaternion(&p, v).unwrap());
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = MixtureProportions::from_probs(&[0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(argmax_bin(&d), 1);
    }

    #[test]
    fn mog_head_is_rejected() {
        let p = ScorerParameters::new(
            ScorerConfig {
                bins: 8,
                frequencies: 2,
                context_dim: 4,
                hidden: [8, 8],
                head: HeadKind::Mog { components: 2 },
                viewpoints: 1,
            },
            0,
        )
        .unwrap();
        assert!(predict_quaternion(&p, 0).is_err());
        assert!(sample_quaternion(&p, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
