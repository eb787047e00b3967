//! The trainable conditional scorer.
//!
//! For viewpoint `v` and decode step `c ∈ {0, 1, 2}` the scorer sees the
//! positionally encoded components `q_x` (steps 1, 2) and `q_y` (step 2) plus
//! a one-hot step index, and emits either `N` bin logits or the parameters of
//! a `K`-component mixture of Gaussians over the logit-transformed component.
//! One network is shared by all three steps.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::{BinPartition, LegalityMask};
use crate::density::{
    full_log_density, log_sum_exp, mog_bounds, mog_full_log_density, mog_s_of_q, MixtureProportions,
    MogHeadOutput,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{positional_encode_into, AdamState, ConditionedMlp, NetShape};
use crate::so3::UnitQuaternion;
use crate::toy::ToySample;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    /// `N` logits, one per bin.
    Binned,
    /// `K` weight logits, `K` means and `K` log-scales.
    Mog { components: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub bins: usize,
    /// Positional-encoding frequencies `L`.
    pub frequencies: usize,
    pub context_dim: usize,
    pub hidden: [usize; 2],
    pub head: HeadKind,
    pub viewpoints: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            bins: 4096,
            frequencies: 6,
            context_dim: 64,
            hidden: [256, 128],
            head: HeadKind::Binned,
            viewpoints: crate::toy::VIEWPOINTS,
        }
    }
}

impl ScorerConfig {
    pub fn encoding_width(&self) -> usize {
        1 + 2 * self.frequencies
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.encoding_width() + 3
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Binned => self.bins,
            HeadKind::Mog { components } => 3 * components,
        }
    }

    pub fn partition(&self) -> Result<BinPartition> {
        BinPartition::new(self.bins)
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            viewpoints: self.viewpoints,
            context_dim: self.context_dim,
            feature_dim: self.feature_dim(),
            hidden: self.hidden,
            output_dim: self.output_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition()?;
        if let HeadKind::Mog { components: 0 } = self.head {
            return Err(invalid("MoG head needs at least one component"));
        }
        self.net_shape().validate()
    }
}

/// Trained (or freshly initialized) scorer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParameters {
    config: ScorerConfig,
    partition: BinPartition,
    net: ConditionedMlp,
}

/// Per-viewpoint state reused across the three decode steps: the context
/// projection and the step-0 outputs, which depend on nothing else.
#[derive(Clone, Debug)]
pub struct ConditioningCache {
    viewpoint: usize,
    version: u64,
    context: Array1<f64>,
    first_step: Vec<f64>,
}

impl ConditioningCache {
    pub fn viewpoint(&self) -> usize {
        self.viewpoint
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// What a training row is scored against.
#[derive(Clone, Copy, Debug)]
enum Target {
    Bin(usize),
    Logit(f64),
}

/// Identical network inputs collected from a batch, with every target seen.
struct Row {
    viewpoint: usize,
    step: usize,
    prev: [f64; 2],
    targets: Vec<(Target, f64)>,
}

/// Stable softmax restricted to legal bins; illegal bins get `-∞`.
pub fn masked_log_probs(logits: &[f64], mask: &LegalityMask) -> Result<MixtureProportions> {
    if logits.len() != mask.len() {
        return Err(invalid(format!(
            "{} logits for a mask of {} bins",
            logits.len(),
            mask.len()
        )));
    }
    if mask.legal_count() == 0 {
        return Err(invalid("every bin is masked"));
    }
    Ok(MixtureProportions::from_log_probs_unchecked(masked_log_softmax(
        logits,
        mask.flags(),
    )))
}

fn masked_log_softmax(logits: &[f64], illegal: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(illegal)
        .filter(|(_, ill)| !**ill)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(illegal)
        .filter(|(_, ill)| !**ill)
        .map(|(l, _)| (l - m).exp())
        .sum();
    let lse = m + sum.ln();
    logits
        .iter()
        .zip(illegal)
        .map(|(l, ill)| if *ill { f64::NEG_INFINITY } else { l - lse })
        .collect()
}

impl ScorerParameters {
    pub fn new(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ConditionedMlp::new(config.net_shape(), &mut rng)?;
        Ok(Self {
            partition: config.partition()?,
            config,
            net,
        })
    }

    pub fn from_network(config: ScorerConfig, net: ConditionedMlp) -> Result<Self> {
        config.validate()?;
        if *net.shape() != config.net_shape() {
            return Err(invalid("network shape does not match scorer config"));
        }
        Ok(Self {
            partition: config.partition()?,
            config,
            net,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn partition(&self) -> &BinPartition {
        &self.partition
    }

    pub fn network(&self) -> &ConditionedMlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut ConditionedMlp {
        &mut self.net
    }

    pub fn version(&self) -> u64 {
        self.net.version()
    }

    fn write_features(&self, step: usize, prev: &[f64], out: &mut [f64]) {
        let w = self.config.encoding_width();
        out.fill(0.0);
        for (slot, &x) in prev.iter().enumerate() {
            positional_encode_into(x, &mut out[slot * w..(slot + 1) * w]);
        }
        out[2 * w + step] = 1.0;
    }

    fn check_step(&self, step: usize, prev: &[f64]) -> Result<()> {
        if step > 2 || prev.len() != step {
            return Err(invalid(format!(
                "step {step} needs {step} previous components, got {}",
                prev.len()
            )));
        }
        if prev.iter().any(|x| !(x.abs() <= 1.0)) {
            return Err(invalid(format!("previous components {prev:?} outside [-1, 1]")));
        }
        Ok(())
    }

    fn outputs_with_context(&self, context: &Array1<f64>, step: usize, prev: &[f64]) -> Vec<f64> {
        let mut features = Array2::zeros((1, self.config.feature_dim()));
        self.write_features(step, prev, features.row_mut(0).as_slice_mut().expect("contiguous"));
        let ctx = context.view().insert_axis(Axis(0));
        self.net.forward(ctx, features.view()).out.row(0).to_vec()
    }

    pub fn conditioning_cache(&self, viewpoint: usize) -> Result<ConditioningCache> {
        self.net.check_viewpoint(viewpoint)?;
        let context = self.net.context_projection(viewpoint);
        let first_step = self.outputs_with_context(&context, 0, &[]);
        Ok(ConditioningCache {
            viewpoint,
            version: self.version(),
            context,
            first_step,
        })
    }

    fn check_cache(&self, cache: &ConditioningCache) -> Result<()> {
        if cache.version != self.version() {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version(),
            });
        }
        Ok(())
    }

    /// Raw head outputs for one step, recomputing the context projection.
    pub fn score_step(&self, viewpoint: usize, step: usize, prev: &[f64]) -> Result<Vec<f64>> {
        self.net.check_viewpoint(viewpoint)?;
        self.check_step(step, prev)?;
        let context = self.net.context_projection(viewpoint);
        Ok(self.outputs_with_context(&context, step, prev))
    }

    /// Raw head outputs for one step using a cache.
    pub fn score_step_cached(&self, cache: &ConditioningCache, step: usize, prev: &[f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        self.check_step(step, prev)?;
        if step == 0 {
            return Ok(cache.first_step.clone());
        }
        Ok(self.outputs_with_context(&cache.context, step, prev))
    }

    /// Legality mask for the next step, from the bins of the previous components.
    pub fn step_mask(&self, prev: &[f64]) -> Result<LegalityMask> {
        let bins = prev
            .iter()
            .map(|&x| self.partition.bin_of(x))
            .collect::<Result<Vec<_>>>()?;
        self.partition.strictly_illegal_mask(&bins)
    }

    fn require_binned(&self) -> Result<()> {
        match self.config.head {
            HeadKind::Binned => Ok(()),
            HeadKind::Mog { .. } => Err(invalid("operation needs a binned head")),
        }
    }

    fn require_mog(&self) -> Result<usize> {
        match self.config.head {
            HeadKind::Mog { components } => Ok(components),
            HeadKind::Binned => Err(invalid("operation needs a MoG head")),
        }
    }

    /// Masked bin distribution for one step.
    pub fn step_distribution(
        &self,
        cache: &ConditioningCache,
        step: usize,
        prev: &[f64],
    ) -> Result<MixtureProportions> {
        self.require_binned()?;
        let logits = self.score_step_cached(cache, step, prev)?;
        masked_log_probs(&logits, &self.step_mask(prev)?)
    }

    /// MoG head for one step, recomputing the context projection.
    pub fn score_step_mog(&self, viewpoint: usize, step: usize, prev: &[f64]) -> Result<MogHeadOutput> {
        let k = self.require_mog()?;
        let out = self.score_step(viewpoint, step, prev)?;
        MogHeadOutput::from_raw(&out[..k], &out[k..2 * k], &out[2 * k..])
    }

    pub fn mog_step(&self, cache: &ConditioningCache, step: usize, prev: &[f64]) -> Result<MogHeadOutput> {
        let k = self.require_mog()?;
        let out = self.score_step_cached(cache, step, prev)?;
        MogHeadOutput::from_raw(&out[..k], &out[k..2 * k], &out[2 * k..])
    }

    /// Exact log density of a rotation (nats), `-∞` where it has no mass.
    pub fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        let cache = self.conditioning_cache(viewpoint)?;
        self.log_density_cached(&cache, q)
    }

    pub fn log_density_cached(&self, cache: &ConditioningCache, q: &UnitQuaternion) -> Result<f64> {
        let [x, y, _] = q.xyz();
        match self.config.head {
            HeadKind::Binned => {
                let px = self.step_distribution(cache, 0, &[])?;
                let py = self.step_distribution(cache, 1, &[x])?;
                let pz = self.step_distribution(cache, 2, &[x, y])?;
                Ok(full_log_density(q, [&px, &py, &pz], &self.partition))
            }
            HeadKind::Mog { .. } => {
                let hx = self.mog_step(cache, 0, &[])?;
                let hy = self.mog_step(cache, 1, &[x])?;
                let hz = self.mog_step(cache, 2, &[x, y])?;
                Ok(mog_full_log_density(q, [&hx, &hy, &hz]))
            }
        }
    }

    /// `ln π_x + ln π_y + ln π_z` of the rotation's sentence.
    pub fn sentence_log_prob(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        let cache = self.conditioning_cache(viewpoint)?;
        let [x, y, _] = q.xyz();
        let labels = self.partition.sentence_of(q).0;
        let px = self.step_distribution(&cache, 0, &[])?;
        let py = self.step_distribution(&cache, 1, &[x])?;
        let pz = self.step_distribution(&cache, 2, &[x, y])?;
        Ok(px.log_prob(labels[0]) + py.log_prob(labels[1]) + pz.log_prob(labels[2]))
    }

    fn collect_rows(&self, samples: &[(ToySample, f64)]) -> Result<Vec<Row>> {
        let mut index: HashMap<(usize, usize, [u64; 2]), usize> = HashMap::new();
        let mut rows: Vec<Row> = Vec::new();
        for (s, weight) in samples {
            self.net.check_viewpoint(s.viewpoint)?;
            let xyz = s.q.xyz();
            let labels = self.partition.sentence_of(&s.q).0;
            let bounds = mog_bounds(xyz);
            for step in 0..3 {
                let mut prev = [0.0; 2];
                prev[..step].copy_from_slice(&xyz[..step]);
                let target = match self.config.head {
                    HeadKind::Binned => Target::Bin(labels[step]),
                    HeadKind::Mog { .. } => Target::Logit(mog_s_of_q(xyz[step], bounds[step])?),
                };
                let key = (s.viewpoint, step, prev.map(f64::to_bits));
                let i = *index.entry(key).or_insert_with(|| {
                    rows.push(Row {
                        viewpoint: s.viewpoint,
                        step,
                        prev,
                        targets: Vec::new(),
                    });
                    rows.len() - 1
                });
                rows[i].targets.push((target, *weight));
            }
        }
        Ok(rows)
    }

    fn row_inputs(&self, rows: &[Row]) -> (Array2<f64>, Array2<f64>) {
        let contexts = self.net.context_projections();
        let mut ctx = Array2::zeros((rows.len(), self.config.hidden[0]));
        let mut features = Array2::zeros((rows.len(), self.config.feature_dim()));
        for (i, r) in rows.iter().enumerate() {
            ctx.row_mut(i).assign(&contexts.row(r.viewpoint));
            self.write_features(
                r.step,
                &r.prev[..r.step],
                features.row_mut(i).as_slice_mut().expect("contiguous"),
            );
        }
        (ctx, features)
    }

    /// Weighted negative log-likelihood of the rows' targets and its
    /// gradient with respect to the head outputs.
    fn head_loss(&self, rows: &[Row], out: ArrayView2<'_, f64>, want_grad: bool) -> Result<(f64, Array2<f64>)> {
        let mut loss = 0.0;
        let mut d_out = if want_grad {
            Array2::zeros(out.raw_dim())
        } else {
            Array2::zeros((0, 0))
        };
        for (i, r) in rows.iter().enumerate() {
            let o = out.row(i);
            let o = o.as_slice().expect("contiguous");
            match self.config.head {
                HeadKind::Binned => {
                    let mask = self.step_mask(&r.prev[..r.step])?;
                    let lp = masked_log_softmax(o, mask.flags());
                    let total: f64 = r.targets.iter().map(|t| t.1).sum();
                    for (t, w) in &r.targets {
                        let Target::Bin(b) = t else { unreachable!() };
                        loss -= w * lp[*b];
                    }
                    if want_grad {
                        let mut d = d_out.row_mut(i);
                        for (j, l) in lp.iter().enumerate() {
                            d[j] = total * l.exp();
                        }
                        for (t, w) in &r.targets {
                            let Target::Bin(b) = t else { unreachable!() };
                            d[*b] -= w;
                        }
                    }
                }
                HeadKind::Mog { components: k } => {
                    let head = MogHeadOutput::from_raw(&o[..k], &o[k..2 * k], &o[2 * k..])?;
                    let weights = head.weights();
                    for (t, w) in &r.targets {
                        let Target::Logit(s) = t else { unreachable!() };
                        let (ll, grads) = mog_log_density_grad(&head, &weights, *s, want_grad);
                        loss -= w * ll;
                        if want_grad {
                            d_out.row_mut(i).scaled_add(-w, &grads);
                        }
                    }
                }
            }
        }
        Ok((loss, d_out))
    }

    /// Weighted mean loss (three-token cross-entropy for a binned head, the
    /// logit-space MoG negative log-likelihood otherwise) and its gradient.
    pub fn weighted_loss_and_grad(&self, samples: &[(ToySample, f64)]) -> Result<(f64, Vec<f64>)> {
        let rows = self.collect_rows(samples)?;
        let (ctx, features) = self.row_inputs(&rows);
        let acts = self.net.forward(ctx.view(), features.view());
        let (loss, d_out) = self.head_loss(&rows, acts.out.view(), true)?;
        let mut grad = self.net.zero_grad();
        let viewpoints: Vec<usize> = rows.iter().map(|r| r.viewpoint).collect();
        self.net
            .backward(&acts, d_out.view(), &viewpoints, features.view(), &mut grad);
        Ok((loss, grad))
    }

    pub fn weighted_loss(&self, samples: &[(ToySample, f64)]) -> Result<f64> {
        let rows = self.collect_rows(samples)?;
        let (ctx, features) = self.row_inputs(&rows);
        let acts = self.net.forward(ctx.view(), features.view());
        Ok(self.head_loss(&rows, acts.out.view(), false)?.0)
    }

    /// Mean per-sample loss over a minibatch and its gradient.
    pub fn loss_and_grad(&self, batch: &[ToySample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(invalid("empty minibatch"));
        }
        let w = 1.0 / batch.len() as f64;
        let weighted: Vec<_> = batch.iter().map(|s| (*s, w)).collect();
        self.weighted_loss_and_grad(&weighted)
    }
}

/// `ln p(s)` under a MoG head and its gradient with respect to the raw
/// outputs `[weight logits, means, log-scales]`.
fn mog_log_density_grad(head: &MogHeadOutput, weights: &[f64], s: f64, want_grad: bool) -> (f64, Array1<f64>) {
    let k = head.components();
    let mut z = vec![0.0; k];
    let mut lc = vec![0.0; k];
    for j in 0..k {
        let inv = (-head.log_scales[j]).exp();
        z[j] = (s - head.means[j]) * inv;
        lc[j] = head.log_weights[j] - head.log_scales[j] - LN_SQRT_2PI - 0.5 * z[j] * z[j];
    }
    let ll = log_sum_exp(&lc);
    if !want_grad {
        return (ll, Array1::zeros(0));
    }
    let mut g = Array1::zeros(3 * k);
    for j in 0..k {
        let r = (lc[j] - ll).exp();
        g[j] = r - weights[j];
        g[k + j] = r * z[j] * (-head.log_scales[j]).exp();
        g[2 * k + j] = r * (z[j] * z[j] - 1.0);
    }
    (ll, g)
}

/// One Adam step on a minibatch; returns the minibatch loss.
pub fn training_step(params: &mut ScorerParameters, adam: &mut AdamState, batch: &[ToySample]) -> Result<f64> {
    let (loss, grad) = params.loss_and_grad(batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            loss,
            epoch: 0,
            batch: adam.step as usize,
        });
    }
    adam.update(params.network_mut().params_mut(), &grad);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::generate_mode_set;
    use approx::assert_abs_diff_eq;

    fn small(head: HeadKind) -> ScorerConfig {
        ScorerConfig {
            bins: 32,
            frequencies: 3,
            context_dim: 8,
            hidden: [16, 12],
            head,
            viewpoints: 6,
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let mask = LegalityMask::all_legal(2);
        let p = masked_log_probs(&[0.3, 0.3], &mask).unwrap();
        assert_abs_diff_eq!(p.log_prob(0), 0.5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.log_prob(1), 0.5f64.ln(), epsilon = 1e-15);

        let mask = LegalityMask::from_flags(vec![false, false, true]);
        let p = masked_log_probs(&[0.0, 0.0, 1e6], &mask).unwrap();
        assert_abs_diff_eq!(p.log_prob(0), 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(p.log_prob(2), f64::NEG_INFINITY);

        assert!(masked_log_probs(&[1.0, 2.0], &LegalityMask::from_flags(vec![true, true])).is_err());
        assert!(masked_log_probs(&[1.0], &LegalityMask::all_legal(2)).is_err());
    }

    #[test]
    fn score_step_validates_inputs() {
        let p = ScorerParameters::new(small(HeadKind::Binned), 0).unwrap();
        assert!(matches!(p.score_step(6, 0, &[]), Err(Error::UnknownViewpoint { .. })));
        assert!(p.score_step(0, 1, &[]).is_err());
        assert!(p.score_step(0, 1, &[1.5]).is_err());
        assert!(p.score_step(0, 3, &[0.1, 0.1, 0.1]).is_err());
        let a = p.score_step(2, 2, &[0.3, -0.1]).unwrap();
        let b = p.score_step(2, 2, &[0.3, -0.1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn cached_and_uncached_scores_agree() {
        let p = ScorerParameters::new(small(HeadKind::Binned), 1).unwrap();
        let cache = p.conditioning_cache(3).unwrap();
        for (step, prev) in [(0, vec![]), (1, vec![0.25]), (2, vec![0.25, -0.5])] {
            assert_eq!(
                p.score_step(3, step, &prev).unwrap(),
                p.score_step_cached(&cache, step, &prev).unwrap()
            );
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = ScorerParameters::new(small(HeadKind::Binned), 1).unwrap();
        let cache = p.conditioning_cache(0).unwrap();
        p.network_mut().params_mut()[0] += 0.5;
        assert!(matches!(p.score_step_cached(&cache, 0, &[]), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let cfg = ScorerConfig {
            bins: 256,
            ..small(HeadKind::Binned)
        };
        let p = ScorerParameters::new(cfg, 2).unwrap();
        let cache = p.conditioning_cache(1).unwrap();
        for (step, prev) in [(0, vec![]), (1, vec![0.8]), (2, vec![0.6, 0.7])] {
            let d = p.step_distribution(&cache, step, &prev).unwrap();
            let legal = p.step_mask(&prev).unwrap().legal_count() as f64;
            let entropy: f64 = d
                .log_probs()
                .iter()
                .filter(|l| l.is_finite())
                .map(|l| -l.exp() * l)
                .sum();
            assert!((entropy - legal.ln()).abs() <= 0.1 * legal.ln(), "{entropy} vs {}", legal.ln());
            let total: f64 = d.log_probs().iter().map(|l| l.exp()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn mog_head_weights_are_normalized() {
        let p = ScorerParameters::new(small(HeadKind::Mog { components: 5 }), 3).unwrap();
        let h = p.score_step_mog(4, 1, &[0.2]).unwrap();
        assert_abs_diff_eq!(h.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-7);
        assert_eq!(h, p.score_step_mog(4, 1, &[0.2]).unwrap());
        let binned = ScorerParameters::new(small(HeadKind::Binned), 3).unwrap();
        assert!(binned.score_step_mog(0, 0, &[]).is_err());
    }

    #[test]
    fn loss_equals_mean_sentence_nll() {
        let p = ScorerParameters::new(small(HeadKind::Binned), 4).unwrap();
        let modes = generate_mode_set(0).unwrap();
        let batch: Vec<_> = modes.sample_stream(ChaCha8Rng::seed_from_u64(0)).take(40).collect();
        let (loss, _) = p.loss_and_grad(&batch).unwrap();
        let direct: f64 = batch
            .iter()
            .map(|s| -p.sentence_log_prob(s.viewpoint, &s.q).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((loss - direct).abs() < 1e-10, "{loss} vs {direct}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = ScorerParameters::new(small(HeadKind::Binned), 4).unwrap();
        assert!(p.loss_and_grad(&[]).is_err());
    }

    fn gradient_check(head: HeadKind, seed: u64) {
        let mut p = ScorerParameters::new(small(head), seed).unwrap();
        let modes = generate_mode_set(seed).unwrap();
        let batch: Vec<_> = modes.sample_stream(ChaCha8Rng::seed_from_u64(seed)).take(24).collect();
        let (_, grad) = p.loss_and_grad(&batch).unwrap();
        let count = grad.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let i = rand::Rng::random_range(&mut rng, 0..count);
            let orig = p.network().params()[i];
            let h = 1e-4 * orig.abs().max(1e-2);
            p.network_mut().params_mut()[i] = orig + h;
            let up = p.loss_and_grad(&batch).unwrap().0;
            p.network_mut().params_mut()[i] = orig - h;
            let down = p.loss_and_grad(&batch).unwrap().0;
            p.network_mut().params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn binned_gradient_matches_finite_difference() {
        gradient_check(HeadKind::Binned, 7);
    }

    #[test]
    fn mog_gradient_matches_finite_difference() {
        gradient_check(HeadKind::Mog { components: 4 }, 8);
    }

    #[test]
    fn training_step_reduces_loss_on_fixed_batch() {
        let mut p = ScorerParameters::new(small(HeadKind::Binned), 9).unwrap();
        let modes = generate_mode_set(1).unwrap();
        let batch: Vec<_> = modes.sample_stream(ChaCha8Rng::seed_from_u64(3)).take(32).collect();
        let mut adam = AdamState::new(p.network().params().len(), 1e-3, 0.9, 0.999, 1e-9);
        let first = training_step(&mut p, &mut adam, &batch).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = training_step(&mut p, &mut adam, &batch).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }
}
