//! Closed-form densities.
//!
//! The imaginary part `(q_x, q_y, q_z)` of a canonical quaternion is modeled
//! autoregressively. Each factor is a mixture of uniform distributions over the
//! bins of a [`BinPartition`], with the uniform for the bin that meets the
//! unit-norm boundary shortened to its legal part of width `ω`:
//!
//! ```text
//! p(q_x, q_y, q_z) = π_x π_y π_z · N / (2 ω_y ω_z)
//! ```
//!
//! Moving from the ball to the hemisphere `q_w > 0` of the 3-sphere dilutes
//! the density by `q_w`, giving the density of a rotation:
//!
//! ```text
//! p(q) = π_x π_y π_z · N q_w / (2 ω_y ω_z)
//! ```
//!
//! Everything here is computed in log space. A vanishing proportion, width or
//! `q_w` yields `-∞` rather than an error.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::binning::{BinPartition, LegalityMask, QuaternionSentence};
use crate::error::{invalid, Result};
use crate::so3::UnitQuaternion;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Mixture proportions for one autoregressive step, stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureProportions {
    log_probs: Vec<f64>,
}

impl MixtureProportions {
    /// Validates normalization to within `1e-7`.
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        let total: f64 = log_probs.iter().map(|l| l.exp()).sum();
        if !((total - 1.0).abs() <= 1e-7) || log_probs.iter().any(|l| l.is_nan() || *l > 0.0) {
            return Err(invalid(format!("mixture proportions sum to {total}")));
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid("negative mixture proportion"));
        }
        Self::from_log_probs(probs.iter().map(|p| p.ln()).collect())
    }

    /// Equal mass on every legal bin.
    pub fn uniform(mask: &LegalityMask) -> Result<Self> {
        let legal = mask.legal_count();
        if legal == 0 {
            return Err(invalid("no legal bins"));
        }
        let l = -(legal as f64).ln();
        Ok(Self {
            log_probs: mask
                .flags()
                .iter()
                .map(|&ill| if ill { f64::NEG_INFINITY } else { l })
                .collect(),
        })
    }

    pub(crate) fn from_log_probs_unchecked(log_probs: Vec<f64>) -> Self {
        Self { log_probs }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_prob(&self, bin: usize) -> f64 {
        self.log_probs[bin]
    }

    pub fn prob(&self, bin: usize) -> f64 {
        self.log_probs[bin].exp()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn into_log_probs(self) -> Vec<f64> {
        self.log_probs
    }
}

/// `π_k / ω_k` for the bin `k` holding `q_c`.
pub fn component_density(
    q_c: f64,
    proportions: &MixtureProportions,
    remaining_sq: f64,
    partition: &BinPartition,
) -> Result<f64> {
    Ok(component_log_density(q_c, proportions, remaining_sq, partition)?.exp())
}

pub fn component_log_density(
    q_c: f64,
    proportions: &MixtureProportions,
    remaining_sq: f64,
    partition: &BinPartition,
) -> Result<f64> {
    if !(q_c.abs() <= remaining_sq.max(0.0).sqrt()) {
        return Err(invalid(format!(
            "|{q_c}| exceeds the remaining norm sqrt({remaining_sq})"
        )));
    }
    let k = partition.bin_of(q_c)?;
    let width = partition.constrained_width(k, remaining_sq);
    Ok(proportions.log_prob(k) - width.ln())
}

/// `ln(N q_w / (2 ω_y ω_z))`: the part of the log density that does not
/// depend on the mixture proportions.
pub fn log_dilution_term(q: &UnitQuaternion, partition: &BinPartition) -> f64 {
    if q.w() <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let [x, y, _] = q.xyz();
    let [_, ky, kz] = partition.sentence_of(q).0;
    let wy = partition.constrained_width(ky, 1.0 - x * x);
    let wz = partition.constrained_width(kz, 1.0 - x * x - y * y);
    (partition.len() as f64 * q.w() / (2.0 * wy * wz)).ln()
}

/// `ln π_x[l_x] + ln π_y[l_y] + ln π_z[l_z]`.
pub fn sentence_log_prob(sentence: &QuaternionSentence, proportions: [&MixtureProportions; 3]) -> f64 {
    sentence
        .0
        .iter()
        .zip(proportions)
        .map(|(&l, p)| p.log_prob(l))
        .sum()
}

/// Log density of a rotation under three per-step mixtures.
pub fn full_log_density(
    q: &UnitQuaternion,
    proportions: [&MixtureProportions; 3],
    partition: &BinPartition,
) -> f64 {
    let sentence = partition.sentence_of(q);
    let lp = sentence_log_prob(&sentence, proportions);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_dilution_term(q, partition)
}

/// Density of the imaginary part on the unit ball, before dilution by `q_w`.
pub fn ball_log_density(
    q: &UnitQuaternion,
    proportions: [&MixtureProportions; 3],
    partition: &BinPartition,
) -> f64 {
    let sentence = partition.sentence_of(q);
    let lp = sentence_log_prob(&sentence, proportions);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let [x, y, _] = q.xyz();
    let [_, ky, kz] = sentence.0;
    let wy = partition.constrained_width(ky, 1.0 - x * x);
    let wz = partition.constrained_width(kz, 1.0 - x * x - y * y);
    lp + (partition.len() as f64 / (2.0 * wy * wz)).ln()
}

/// One sample's proportions and its sentence.
pub struct LabeledProportions<'a> {
    pub proportions: [&'a MixtureProportions; 3],
    pub sentence: QuaternionSentence,
}

/// Mean three-token cross-entropy, in nats per sample.
pub fn language_model_nll(batch: &[LabeledProportions<'_>]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .map(|s| -sentence_log_prob(&s.sentence, s.proportions))
        .sum();
    total / batch.len() as f64
}

/// Mean of `-ln(N q_w / (2 ω_y ω_z))` over a set of rotations.
pub fn mean_dilution_correction(qs: &[UnitQuaternion], partition: &BinPartition) -> f64 {
    if qs.is_empty() {
        return 0.0;
    }
    -qs.iter().map(|q| log_dilution_term(q, partition)).sum::<f64>() / qs.len() as f64
}

/// Exact mean negative log-likelihood of rotations.
pub fn exact_nll(
    qs: &[UnitQuaternion],
    proportions: &[[&MixtureProportions; 3]],
    partition: &BinPartition,
) -> f64 {
    assert_eq!(qs.len(), proportions.len());
    if qs.is_empty() {
        return 0.0;
    }
    -qs.iter()
        .zip(proportions)
        .map(|(q, p)| full_log_density(q, *p, partition))
        .sum::<f64>()
        / qs.len() as f64
}

/// `N³ q_w / 8`, a floor on `N q_w / (2 ω_y ω_z)` since every `ω ≤ 2/N`.
pub fn precision_lower_bound(n: usize, q_w: f64) -> f64 {
    let n = n as f64;
    n * n * n * q_w / 8.0
}

/// Pushes a density on the open unit disk up to the hemisphere `z > 0`:
/// `p(x, y, z) = p(x, y) · z`.
pub fn disk_to_hemisphere_density(p_xy: f64, x: f64, y: f64) -> Result<f64> {
    let r2 = x * x + y * y;
    if !(r2 < 1.0) {
        return Err(invalid(format!("({x}, {y}) is not inside the unit disk")));
    }
    Ok(p_xy * (1.0 - r2).sqrt())
}

/// A mixture of uniforms on the disk's bounding square: a regular `k × k`
/// histogram over `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct SquareHistogram {
    cells: usize,
    counts: Vec<u64>,
    total: u64,
}

impl SquareHistogram {
    pub fn fit(cells: usize, points: &[[f64; 2]]) -> Result<Self> {
        if cells == 0 || points.is_empty() {
            return Err(invalid("histogram needs cells and points"));
        }
        let mut counts = vec![0u64; cells * cells];
        for &[x, y] in points {
            let (i, j) = Self::cell_of(cells, x, y)?;
            counts[i * cells + j] += 1;
        }
        Ok(Self {
            cells,
            counts,
            total: points.len() as u64,
        })
    }

    fn cell_of(cells: usize, x: f64, y: f64) -> Result<(usize, usize)> {
        if !(x.abs() <= 1.0 && y.abs() <= 1.0) {
            return Err(invalid(format!("({x}, {y}) is outside [-1, 1]²")));
        }
        let idx = |v: f64| (((v + 1.0) / 2.0 * cells as f64) as usize).min(cells - 1);
        Ok((idx(x), idx(y)))
    }

    pub fn density(&self, x: f64, y: f64) -> Result<f64> {
        let (i, j) = Self::cell_of(self.cells, x, y)?;
        let area = (2.0 / self.cells as f64).powi(2);
        Ok(self.counts[i * self.cells + j] as f64 / (self.total as f64 * area))
    }
}

/// `s = ln(q + u) - ln(u - q)`, the logit of `q`'s position in `(-u, u)`.
pub fn mog_s_of_q(q_c: f64, u: f64) -> Result<f64> {
    if !(q_c.abs() < u) {
        return Err(invalid(format!("|{q_c}| is not inside (-{u}, {u})")));
    }
    Ok((q_c + u).ln() - (u - q_c).ln())
}

/// Inverse of [`mog_s_of_q`]: `q = -u + 2u · sigmoid(s)`.
pub fn mog_q_of_s(s: f64, u: f64) -> f64 {
    // u · tanh(s/2) is the same map with better cancellation near 0
    u * (0.5 * s).tanh()
}

/// `ds/dq = 2u / (u² - q²)`.
pub fn mog_dsdq(q_c: f64, u: f64) -> Result<f64> {
    if !(q_c.abs() < u) {
        return Err(invalid(format!("|{q_c}| is not inside (-{u}, {u})")));
    }
    Ok(2.0 * u / ((u - q_c) * (u + q_c)))
}

/// Parameters of a univariate mixture of Gaussians over the unconstrained
/// variable `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogHeadOutput {
    pub log_weights: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MogHeadOutput {
    /// Builds from raw head outputs: weight logits pass through a softmax.
    pub fn from_raw(weight_logits: &[f64], means: &[f64], log_scales: &[f64]) -> Result<Self> {
        let k = weight_logits.len();
        if k == 0 || means.len() != k || log_scales.len() != k {
            return Err(invalid("MoG head needs K weights, means and scales"));
        }
        Ok(Self {
            log_weights: log_softmax(weight_logits),
            means: means.to_vec(),
            log_scales: log_scales.to_vec(),
        })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn log_density(&self, s: f64) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let z = (s - self.means[k]) * (-self.log_scales[k]).exp();
                self.log_weights[k] - self.log_scales[k] - LN_SQRT_2PI - 0.5 * z * z
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Per-component bounds `u_x = 1`, `u_y = sqrt(1 - x²)`, `u_z = sqrt(1 - x² - y²)`.
pub fn mog_bounds(xyz: [f64; 3]) -> [f64; 3] {
    let [x, y, _] = xyz;
    [
        1.0,
        (1.0 - x * x).max(0.0).sqrt(),
        (1.0 - x * x - y * y).max(0.0).sqrt(),
    ]
}

/// `Σ_c [ln p_MoG(s_c) + ln |ds/dq|_c] + ln q_w`; `-∞` on the boundary.
pub fn mog_full_log_density(q: &UnitQuaternion, heads: [&MogHeadOutput; 3]) -> f64 {
    if q.w() <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let xyz = q.xyz();
    let bounds = mog_bounds(xyz);
    let mut total = q.w().ln();
    for c in 0..3 {
        let (Ok(s), Ok(jac)) = (mog_s_of_q(xyz[c], bounds[c]), mog_dsdq(xyz[c], bounds[c])) else {
            return f64::NEG_INFINITY;
        };
        total += heads[c].log_density(s) + jac.ln();
    }
    total
}

/// Draws from the MoG in `s` space and maps back to a quaternion. Debug aid
/// for looking at what a MoG head has learned; not a supported sampler.
pub fn mog_sample_debug<R: rand::Rng + ?Sized>(
    heads: impl Fn(usize, &[f64]) -> MogHeadOutput,
    rng: &mut R,
) -> Result<UnitQuaternion> {
    use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};
    let mut xyz = [0.0; 3];
    for c in 0..3 {
        let head = heads(c, &xyz[..c]);
        let dist = WeightedIndex::new(head.weights()).map_err(|e| invalid(e.to_string()))?;
        let k = dist.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let s = head.means[k] + head.log_scales[k].exp() * z;
        xyz[c] = mog_q_of_s(s, mog_bounds(xyz)[c]);
    }
    UnitQuaternion::from_xyz(xyz[0], xyz[1], xyz[2])
}

/// Numerically stable `ln Σ exp(v)`; `-∞` for an all `-∞` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

/// Density of the uniform distribution on SO(3): `1 / π²`.
pub fn uniform_log_density() -> f64 {
    -(PI * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::sample_uniform_rotation;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn part(n: usize) -> BinPartition {
        BinPartition::new(n).unwrap()
    }

    fn one_hot(n: usize, k: usize) -> MixtureProportions {
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        MixtureProportions::from_probs(&p).unwrap()
    }

    fn uniform_triple(q: &UnitQuaternion, pt: &BinPartition) -> [MixtureProportions; 3] {
        let s = pt.sentence_of(q).0;
        std::array::from_fn(|step| {
            MixtureProportions::uniform(&pt.strictly_illegal_mask(&s[..step]).unwrap()).unwrap()
        })
    }

    #[test]
    fn proportions_validate() {
        assert!(MixtureProportions::from_probs(&[0.5, 0.4]).is_err());
        assert!(MixtureProportions::from_probs(&[0.5, 0.5]).is_ok());
        assert!(MixtureProportions::from_probs(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn component_density_examples() {
        let pt = part(500);
        let d = component_density(0.3, &one_hot(500, pt.bin_of(0.3).unwrap()), 1.0, &pt).unwrap();
        assert_abs_diff_eq!(d, 250.0, epsilon = 1e-9);

        let pt = part(20);
        let rem = 1.0 - 0.7f64 * 0.7;
        let d = component_density(0.71, &one_hot(20, 17), rem, &pt).unwrap();
        assert_abs_diff_eq!(d, 1.0 / (rem.sqrt() - 0.7), epsilon = 1e-9);
        assert_abs_diff_eq!(d, 70.7, epsilon = 0.05);

        let uni = MixtureProportions::uniform(&LegalityMask::all_legal(20)).unwrap();
        for x in [-0.95, -0.2, 0.0, 0.5, 1.0] {
            assert_abs_diff_eq!(component_density(x, &uni, 1.0, &pt).unwrap(), 0.5, epsilon = 1e-12);
        }
        assert!(component_density(0.9, &uni, 0.5, &pt).is_err());
    }

    #[test]
    fn full_density_identity_example() {
        let pt = part(500);
        let p = one_hot(500, 250);
        let ld = full_log_density(&UnitQuaternion::IDENTITY, [&p, &p, &p], &pt);
        assert_abs_diff_eq!(ld, (15_625_000f64).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(ld, 16.564, epsilon = 1e-3);
    }

    #[test]
    fn zero_real_part_has_no_density() {
        let pt = part(20);
        let q = UnitQuaternion::try_from_canonical([0.0, 0.6, 0.8, 0.0]).unwrap();
        let tri = uniform_triple(&q, &pt);
        assert_eq!(full_log_density(&q, [&tri[0], &tri[1], &tri[2]], &pt), f64::NEG_INFINITY);
    }

    #[test]
    fn density_splits_into_language_model_and_dilution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pt = part(64);
        for _ in 0..500 {
            let q = sample_uniform_rotation(&mut rng);
            let tri = uniform_triple(&q, &pt);
            let refs = [&tri[0], &tri[1], &tri[2]];
            let full = full_log_density(&q, refs, &pt);
            let lm = sentence_log_prob(&pt.sentence_of(&q), refs);
            assert_eq!(full, lm + log_dilution_term(&q, &pt));
            // ball density times q_w
            let ball = ball_log_density(&q, refs, &pt);
            assert!((ball.exp() * q.w() - full.exp()).abs() <= 1e-12 * full.exp());
        }
    }

    #[test]
    fn nll_examples() {
        let pt = part(16);
        let q = UnitQuaternion::IDENTITY;
        let s = pt.sentence_of(&q);
        let ps: Vec<_> = s.0.iter().map(|&k| one_hot(16, k)).collect();
        let batch = [LabeledProportions {
            proportions: [&ps[0], &ps[1], &ps[2]],
            sentence: s,
        }];
        assert_eq!(language_model_nll(&batch), 0.0);

        let uni = MixtureProportions::uniform(&LegalityMask::all_legal(16)).unwrap();
        let batch = [LabeledProportions {
            proportions: [&uni, &uni, &uni],
            sentence: s,
        }];
        assert_abs_diff_eq!(language_model_nll(&batch), 3.0 * 16f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn exact_nll_is_lm_nll_minus_dilution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pt = part(40);
        let qs: Vec<_> = (0..64).map(|_| sample_uniform_rotation(&mut rng)).collect();
        let props: Vec<[MixtureProportions; 3]> = qs
            .iter()
            .map(|q| {
                let s = pt.sentence_of(q).0;
                std::array::from_fn(|step| {
                    let mask = pt.strictly_illegal_mask(&s[..step]).unwrap();
                    let raw: Vec<f64> = (0..40)
                        .map(|i| if mask.is_illegal(i) { 0.0 } else { rng.random::<f64>() + 0.01 })
                        .collect();
                    let tot: f64 = raw.iter().sum();
                    MixtureProportions::from_probs(&raw.iter().map(|r| r / tot).collect::<Vec<_>>()).unwrap()
                })
            })
            .collect();
        let refs: Vec<[&MixtureProportions; 3]> = props.iter().map(|p| [&p[0], &p[1], &p[2]]).collect();
        let batch: Vec<_> = qs
            .iter()
            .zip(&refs)
            .map(|(q, r)| LabeledProportions {
                proportions: *r,
                sentence: pt.sentence_of(q),
            })
            .collect();
        let lhs = exact_nll(&qs, &refs, &pt);
        let rhs = language_model_nll(&batch) + mean_dilution_correction(&qs, &pt);
        assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn precision_bound_examples() {
        assert_eq!(precision_lower_bound(2, 0.3), 0.3);
        let n = 50_257f64;
        // 1.269e14, quoted to three figures
        assert_eq!((n.powi(3) / 1e12).floor() / 100.0, 1.26);
        assert_abs_diff_eq!(precision_lower_bound(50_257, 1.0) / 1.587e13, 1.0, epsilon = 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2, 20, 500, 4096] {
            let pt = part(n);
            for _ in 0..2000 {
                let q = sample_uniform_rotation(&mut rng);
                let term = log_dilution_term(&q, &pt);
                if term.is_finite() {
                    assert!(term >= precision_lower_bound(n, q.w()).ln() - 1e-12);
                }
            }
        }
    }

    #[test]
    fn disk_transform_examples() {
        assert_eq!(disk_to_hemisphere_density(0.3, 0.0, 0.0).unwrap(), 0.3);
        let d = disk_to_hemisphere_density(1.0 / PI, 0.6, 0.0).unwrap();
        assert_abs_diff_eq!(d, 0.8 / PI, epsilon = 1e-15);
        assert!(disk_to_hemisphere_density(1.0, 1.0, 0.0).is_err());
        assert!(disk_to_hemisphere_density(1.0, 0.8, 0.7).is_err());
    }

    #[test]
    fn mog_change_of_variables() {
        assert_eq!(mog_s_of_q(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(mog_dsdq(0.0, 1.0).unwrap(), 2.0);
        assert!(mog_s_of_q(1.0, 1.0).is_err());
        assert!(mog_dsdq(-0.5, 0.5).is_err());
        assert!(mog_s_of_q(1.0 - 1e-12, 1.0).unwrap() > 25.0);
        let a = mog_dsdq(0.999, 1.0).unwrap();
        let b = mog_dsdq(0.999_999, 1.0).unwrap();
        assert!(b > 100.0 * a);
    }

    #[test]
    fn mog_single_component_arithmetic() {
        let q = UnitQuaternion::from_xyz(0.2, -0.3, 0.4).unwrap();
        let xyz = q.xyz();
        let u = mog_bounds(xyz);
        let sigma = 1e-3f64;
        let heads: Vec<MogHeadOutput> = (0..3)
            .map(|c| {
                MogHeadOutput::from_raw(&[0.0], &[mog_s_of_q(xyz[c], u[c]).unwrap()], &[sigma.ln()]).unwrap()
            })
            .collect();
        let ld = mog_full_log_density(&q, [&heads[0], &heads[1], &heads[2]]);
        let expected: f64 = (0..3)
            .map(|c| -(sigma * (2.0 * PI).sqrt()).ln() + mog_dsdq(xyz[c], u[c]).unwrap().ln())
            .sum::<f64>()
            + q.w().ln();
        assert_abs_diff_eq!(ld, expected, epsilon = 1e-10);

        let edge = UnitQuaternion::try_from_canonical([0.0, 0.6, 0.8, 0.0]).unwrap();
        assert_eq!(mog_full_log_density(&edge, [&heads[0], &heads[1], &heads[2]]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]), 2f64.ln());
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
    }
}
