//! Metrics over the toy process: average log-likelihood, sampling fidelity,
//! prediction error, throughput, and visualization export.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binning::{BinPartition, QuaternionSentence};
use crate::density::log_dilution_term;
use crate::error::{invalid, Result};
use crate::grid::{GridDensity, GridModel, RotationGrid};
use crate::sampler::{predict_quaternion_cached, predict_quaternion_uncached, sample_quaternion_cached};
use crate::scorer::{ConditioningCache, ScorerParameters};
use crate::so3::{sample_uniform_rotation, UnitQuaternion, SO3_VOLUME};
use crate::toy::{evaluation_set, optimal_sentence_prob, EvalEntry, ToyModeSet};

pub trait RotationDensity {
    /// Log density in nats; `-∞` where the model has no mass.
    fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64>;
}

pub trait RotationSampler {
    fn sample(&self, viewpoint: usize, rng: &mut ChaCha8Rng) -> Result<UnitQuaternion>;
}

pub trait RotationPredictor {
    fn predict(&self, viewpoint: usize) -> Result<UnitQuaternion>;
}

impl RotationDensity for ScorerParameters {
    fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        ScorerParameters::log_density(self, viewpoint, q)
    }
}

/// A scorer with one conditioning cache per viewpoint.
pub struct CachedScorer<'a> {
    params: &'a ScorerParameters,
    caches: Vec<ConditioningCache>,
}

impl<'a> CachedScorer<'a> {
    pub fn new(params: &'a ScorerParameters) -> Result<Self> {
        let caches = (0..params.config().viewpoints)
            .map(|v| params.conditioning_cache(v))
            .collect::<Result<_>>()?;
        Ok(Self { params, caches })
    }

    fn cache(&self, viewpoint: usize) -> Result<&ConditioningCache> {
        self.caches
            .get(viewpoint)
            .ok_or(crate::Error::UnknownViewpoint {
                viewpoint,
                count: self.caches.len(),
            })
    }
}

impl RotationDensity for CachedScorer<'_> {
    fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        self.params.log_density_cached(self.cache(viewpoint)?, q)
    }
}

impl RotationSampler for CachedScorer<'_> {
    fn sample(&self, viewpoint: usize, rng: &mut ChaCha8Rng) -> Result<UnitQuaternion> {
        Ok(sample_quaternion_cached(self.params, self.cache(viewpoint)?, rng)?.0)
    }
}

impl RotationPredictor for CachedScorer<'_> {
    fn predict(&self, viewpoint: usize) -> Result<UnitQuaternion> {
        predict_quaternion_cached(self.params, self.cache(viewpoint)?)
    }
}

/// A grid model bound to one grid, with per-viewpoint normalizers.
pub struct GridEvaluator<'a> {
    model: &'a GridModel,
    grid: &'a RotationGrid,
    caches: Vec<GridDensity>,
}

impl<'a> GridEvaluator<'a> {
    pub fn new(model: &'a GridModel, grid: &'a RotationGrid) -> Result<Self> {
        let caches = (0..model.config().viewpoints)
            .map(|v| model.density_cache(v, grid))
            .collect::<Result<_>>()?;
        Ok(Self { model, grid, caches })
    }

    fn cache(&self, viewpoint: usize) -> Result<&GridDensity> {
        self.caches
            .get(viewpoint)
            .ok_or(crate::Error::UnknownViewpoint {
                viewpoint,
                count: self.caches.len(),
            })
    }

    pub fn grid(&self) -> &RotationGrid {
        self.grid
    }
}

impl RotationDensity for GridEvaluator<'_> {
    fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        self.model.log_density_cached(self.cache(viewpoint)?, q)
    }
}

impl RotationSampler for GridEvaluator<'_> {
    fn sample(&self, viewpoint: usize, rng: &mut ChaCha8Rng) -> Result<UnitQuaternion> {
        self.model.sample_cached(self.cache(viewpoint)?, self.grid, rng)
    }
}

impl RotationPredictor for GridEvaluator<'_> {
    fn predict(&self, viewpoint: usize) -> Result<UnitQuaternion> {
        self.model.predict_cached(self.cache(viewpoint)?, self.grid)
    }
}

/// Haar measure: density `1/π²` everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformModel;

impl RotationDensity for UniformModel {
    fn log_density(&self, _viewpoint: usize, _q: &UnitQuaternion) -> Result<f64> {
        Ok(-SO3_VOLUME.ln())
    }
}

impl RotationSampler for UniformModel {
    fn sample(&self, _viewpoint: usize, rng: &mut ChaCha8Rng) -> Result<UnitQuaternion> {
        Ok(sample_uniform_rotation(rng))
    }
}

/// The best binned model for a mode set: each mode's optimal sentence
/// probability spread uniformly over its cell.
pub struct OracleModel<'a> {
    pub mode_set: &'a ToyModeSet,
    pub partition: BinPartition,
}

impl RotationDensity for OracleModel<'_> {
    fn log_density(&self, viewpoint: usize, q: &UnitQuaternion) -> Result<f64> {
        let modes = self.mode_set.modes(viewpoint);
        let sentence = self.partition.sentence_of(q);
        let Some(i) = modes
            .iter()
            .position(|m| m == q)
            .or_else(|| modes.iter().position(|m| self.partition.sentence_of(m) == sentence))
        else {
            return Ok(f64::NEG_INFINITY);
        };
        Ok(optimal_sentence_prob(modes, i, &self.partition).ln() + log_dilution_term(q, &self.partition))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlReport {
    pub average_ll: f64,
    pub per_viewpoint: Vec<f64>,
    /// Entries with zero density, as `(viewpoint, mode)`.
    pub non_finite: Vec<(usize, usize)>,
}

/// Multiplicity-weighted mean log density over an evaluation set.
pub fn average_ll<M: RotationDensity + ?Sized>(model: &M, entries: &[EvalEntry]) -> Result<LlReport> {
    if entries.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let views = entries.iter().map(|e| e.viewpoint).max().unwrap_or(0) + 1;
    let mut sums = vec![0.0; views];
    let mut weights = vec![0.0; views];
    let mut non_finite = Vec::new();
    for e in entries {
        let ld = model.log_density(e.viewpoint, &e.q)?;
        if ld == f64::NEG_INFINITY {
            non_finite.push((e.viewpoint, e.mode));
        }
        sums[e.viewpoint] += e.multiplicity as f64 * ld;
        weights[e.viewpoint] += e.multiplicity as f64;
    }
    let total: f64 = weights.iter().sum();
    let average_ll = if non_finite.is_empty() {
        sums.iter().sum::<f64>() / total
    } else {
        f64::NEG_INFINITY
    };
    let per_viewpoint = sums
        .iter()
        .zip(&weights)
        .map(|(s, w)| if *w > 0.0 { s / w } else { f64::NAN })
        .collect();
    Ok(LlReport {
        average_ll,
        per_viewpoint,
        non_finite,
    })
}

/// Multiplicity-weighted mean three-token cross-entropy of a binned scorer.
pub fn classification_nll(params: &ScorerParameters, entries: &[EvalEntry]) -> Result<f64> {
    let total: f64 = entries.iter().map(|e| e.multiplicity as f64).sum();
    let mut nll = 0.0;
    for e in entries {
        nll -= e.multiplicity as f64 * params.sentence_log_prob(e.viewpoint, &e.q)?;
    }
    Ok(nll / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub samples: usize,
    pub per_viewpoint_samples: Vec<usize>,
    /// Share of each viewpoint's samples assigned to each mode, valid samples only.
    pub proportions: Vec<Vec<f64>>,
    /// Total variation distance to uniform over modes, invalid samples
    /// counting as an extra outcome.
    pub tvd: Vec<f64>,
    pub mean_distance_deg: f64,
    pub max_distance_deg: f64,
    pub invalid_count: usize,
    pub invalid_rate: f64,
}

/// Draws viewpoints uniformly, samples a rotation for each, and assigns it
/// to the geodesically nearest mode. A sample is invalid when its sentence
/// matches none of its viewpoint's mode sentences.
pub fn sampling_report<S: RotationSampler + ?Sized>(
    sampler: &S,
    mode_set: &ToyModeSet,
    partition: &BinPartition,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SamplingReport> {
    if n_samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let views = mode_set.viewpoints();
    let sentences: Vec<HashSet<QuaternionSentence>> = (0..views)
        .map(|v| mode_set.modes(v).iter().map(|q| partition.sentence_of(q)).collect())
        .collect();
    let mut counts: Vec<Vec<usize>> = (0..views).map(|v| vec![0; mode_set.modes(v).len()]).collect();
    let mut per_view = vec![0usize; views];
    let mut invalid_per_view = vec![0usize; views];
    let mut dist_sum = 0.0;
    let mut dist_max: f64 = 0.0;
    for _ in 0..n_samples {
        let v = rng.random_range(0..views);
        let q = sampler.sample(v, rng)?;
        let (mode, d) = mode_set.nearest_mode(v, &q);
        per_view[v] += 1;
        dist_sum += d;
        dist_max = dist_max.max(d);
        if sentences[v].contains(&partition.sentence_of(&q)) {
            counts[v][mode] += 1;
        } else {
            invalid_per_view[v] += 1;
        }
    }
    let mut proportions = Vec::with_capacity(views);
    let mut tvd = Vec::with_capacity(views);
    for v in 0..views {
        let n = per_view[v].max(1) as f64;
        let p: Vec<f64> = counts[v].iter().map(|&c| c as f64 / n).collect();
        let u = 1.0 / p.len() as f64;
        let t = 0.5 * (p.iter().map(|x| (x - u).abs()).sum::<f64>() + invalid_per_view[v] as f64 / n);
        proportions.push(p);
        tvd.push(t);
    }
    let invalid_count = invalid_per_view.iter().sum();
    Ok(SamplingReport {
        samples: n_samples,
        per_viewpoint_samples: per_view,
        proportions,
        tvd,
        mean_distance_deg: (dist_sum / n_samples as f64).to_degrees(),
        max_distance_deg: dist_max.to_degrees(),
        invalid_count,
        invalid_rate: invalid_count as f64 / n_samples as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub predictions: Vec<UnitQuaternion>,
    pub per_viewpoint_deg: Vec<f64>,
    pub mean_deg: f64,
}

/// Geodesic distance from each viewpoint's prediction to its nearest mode.
pub fn prediction_error<P: RotationPredictor + ?Sized>(predictor: &P, mode_set: &ToyModeSet) -> Result<PredictionReport> {
    let mut predictions = Vec::new();
    let mut per_viewpoint_deg = Vec::new();
    for v in 0..mode_set.viewpoints() {
        let q = predictor.predict(v)?;
        per_viewpoint_deg.push(mode_set.nearest_mode(v, &q).1.to_degrees());
        predictions.push(q);
    }
    let mean_deg = per_viewpoint_deg.iter().sum::<f64>() / per_viewpoint_deg.len() as f64;
    Ok(PredictionReport {
        predictions,
        per_viewpoint_deg,
        mean_deg,
    })
}

/// Smallest wall-clock time of `trials` runs of `f`, in seconds.
pub fn min_time<F: FnMut() -> Result<()>>(trials: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..trials.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    /// Query rotations per density timing.
    pub queries: usize,
    pub samples: usize,
    pub predictions: usize,
    /// Baseline grid sizes; each is timed at `M` and `2M`.
    pub grid_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            queries: 64,
            samples: 2000,
            predictions: 200,
            grid_sizes: vec![8192],
            trials: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub eval_per_sec: f64,
    pub sample_per_sec: f64,
    pub predict_per_sec: f64,
    pub predict_uncached_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTiming {
    pub grid_size: usize,
    /// Seconds per full-scan baseline density query.
    pub baseline_eval_seconds: f64,
    /// Seconds per scorer density query, measured in the same round.
    pub scorer_eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model_kind: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub average_ll: Option<f64>,
    pub mean_prediction_error_deg: Option<f64>,
    pub throughput: Throughput,
    pub grid_timings: Vec<GridTiming>,
    /// Scorer density throughput over baseline density throughput at the
    /// largest grid.
    pub throughput_ratio: Option<f64>,
    pub wall_clock_seconds: f64,
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Times density evaluation, sampling and prediction for a binned scorer,
/// and full-scan density evaluation for a baseline at `M` and `2M`.
pub fn throughput_bench(
    scorer: &ScorerParameters,
    baseline: Option<&GridModel>,
    mode_set: Option<&ToyModeSet>,
    workload: &Workload,
) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(workload.seed);
    let views = scorer.config().viewpoints;
    let queries: Vec<(usize, UnitQuaternion)> = (0..workload.queries.max(1))
        .map(|i| (i % views, sample_uniform_rotation(&mut rng)))
        .collect();
    let scorer_eval = |qs: &[(usize, UnitQuaternion)]| -> Result<f64> {
        let t = min_time(workload.trials, || {
            for (v, q) in qs {
                std::hint::black_box(scorer.log_density(*v, q)?);
            }
            Ok(())
        })?;
        Ok(t / qs.len() as f64)
    };
    let eval_seconds = scorer_eval(&queries)?;

    let cached = CachedScorer::new(scorer)?;
    let n_samples = workload.samples.max(1);
    let sample_seconds = min_time(workload.trials, || {
        let mut r = ChaCha8Rng::seed_from_u64(workload.seed);
        for i in 0..n_samples {
            std::hint::black_box(cached.sample(i % views, &mut r)?);
        }
        Ok(())
    })?;
    let n_pred = workload.predictions.max(1);
    let predict_seconds = min_time(workload.trials, || {
        for i in 0..n_pred {
            let cache = scorer.conditioning_cache(i % views)?;
            std::hint::black_box(predict_quaternion_cached(scorer, &cache)?);
        }
        Ok(())
    })?;
    let predict_uncached_seconds = min_time(workload.trials, || {
        for i in 0..n_pred {
            std::hint::black_box(predict_quaternion_uncached(scorer, i % views)?);
        }
        Ok(())
    })?;

    let mut grid_timings = Vec::new();
    let mut seeds = BTreeMap::from([("workload".to_string(), workload.seed)]);
    if let Some(model) = baseline {
        let grid_queries = &queries[..queries.len().min(8)];
        let time_grid = |grid: &RotationGrid| -> Result<f64> {
            let t = Instant::now();
            for (v, q) in grid_queries {
                std::hint::black_box(model.log_density(*v % model.config().viewpoints, q, grid)?);
            }
            Ok(t.elapsed().as_secs_f64() / grid_queries.len() as f64)
        };
        for (k, &m) in workload.grid_sizes.iter().enumerate() {
            let seed = workload.seed.wrapping_add(1 + k as u64);
            let sizes = [m, 2 * m];
            let grids = sizes
                .iter()
                .map(|&size| {
                    seeds.insert(format!("grid_{size}"), seed);
                    RotationGrid::new(size, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            // M and 2M alternate within each trial so drift affects both alike
            let mut baseline_best = [f64::INFINITY; 2];
            let mut scorer_best = [f64::INFINITY; 2];
            for _ in 0..workload.trials.max(1) {
                for i in 0..2 {
                    baseline_best[i] = baseline_best[i].min(time_grid(&grids[i])?);
                    scorer_best[i] = scorer_best[i].min(scorer_eval(&queries)?);
                }
            }
            for i in 0..2 {
                grid_timings.push(GridTiming {
                    grid_size: sizes[i],
                    baseline_eval_seconds: baseline_best[i],
                    scorer_eval_seconds: scorer_best[i],
                });
            }
        }
    }
    let throughput_ratio = grid_timings
        .iter()
        .max_by_key(|g| g.grid_size)
        .map(|g| g.baseline_eval_seconds / g.scorer_eval_seconds);

    let (average_ll, mean_prediction_error_deg) = match mode_set {
        Some(m) => {
            let entries = evaluation_set(m);
            (
                Some(average_ll(&cached, &entries)?.average_ll),
                Some(prediction_error(&cached, m)?.mean_deg),
            )
        }
        None => (None, None),
    };
    if let Some(m) = mode_set {
        seeds.insert("mode_set".into(), m.seed());
    }
    Ok(ExperimentRecord {
        model_kind: crate::checkpoint::Model::Scorer(scorer.clone()).kind().as_str().into(),
        config_digest: config_digest(scorer.config())?,
        seeds,
        average_ll,
        mean_prediction_error_deg,
        throughput: Throughput {
            eval_per_sec: 1.0 / eval_seconds,
            sample_per_sec: n_samples as f64 / sample_seconds,
            predict_per_sec: n_pred as f64 / predict_seconds,
            predict_uncached_per_sec: n_pred as f64 / predict_uncached_seconds,
        },
        grid_timings,
        throughput_ratio,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// One row of a visualization export.
#[derive(Clone, Debug, PartialEq)]
pub struct VizPoint {
    pub q: UnitQuaternion,
    pub log_density: f64,
    pub tag: String,
}

/// CSV with header `x,y,z,log_density,tag`; `(x, y, z)` is the rotation vector.
pub fn write_viz_csv<W: Write>(out: W, points: &[VizPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "z", "log_density", "tag"]).map_err(csv_error)?;
    for p in points {
        let [x, y, z] = p.q.to_rotation_vector().0;
        w.serialize((x, y, z, p.log_density, &p.tag)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}

/// The viewpoint's modes, `total/2 - modes` model samples and `total/2`
/// uniform rotations, each with its model log density.
pub fn viz_points<M>(
    model: &M,
    mode_set: &ToyModeSet,
    viewpoint: usize,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<VizPoint>>
where
    M: RotationDensity + RotationSampler + ?Sized,
{
    if viewpoint >= mode_set.viewpoints() {
        return Err(crate::Error::UnknownViewpoint {
            viewpoint,
            count: mode_set.viewpoints(),
        });
    }
    let modes = mode_set.modes(viewpoint);
    let half = total / 2;
    if half < modes.len() {
        return Err(invalid(format!(
            "{total} points cannot hold {} modes plus samples",
            modes.len()
        )));
    }
    let mut out = Vec::with_capacity(total);
    let mut push = |q: UnitQuaternion, tag: &str| -> Result<()> {
        out.push(VizPoint {
            q,
            log_density: model.log_density(viewpoint, &q)?,
            tag: tag.into(),
        });
        Ok(())
    };
    for q in modes {
        push(*q, "mode")?;
    }
    for _ in modes.len()..half {
        let q = model.sample(viewpoint, rng)?;
        push(q, "sample")?;
    }
    for _ in 0..total - half {
        let q = sample_uniform_rotation(rng);
        push(q, "uniform")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{HeadKind, ScorerConfig};
    use crate::toy::{generate_mode_set, theoretical_optimal_ll};
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_model_scores_minus_log_volume() {
        let m = generate_mode_set(0).unwrap();
        let r = average_ll(&UniformModel, &evaluation_set(&m)).unwrap();
        assert_abs_diff_eq!(r.average_ll, -SO3_VOLUME.ln(), epsilon = 1e-12);
        assert!(r.non_finite.is_empty());
    }

    #[test]
    fn oracle_model_scores_the_oracle() {
        let m = generate_mode_set(3).unwrap();
        let partition = BinPartition::new(512).unwrap();
        let oracle = OracleModel {
            mode_set: &m,
            partition,
        };
        let r = average_ll(&oracle, &evaluation_set(&m)).unwrap();
        assert_abs_diff_eq!(r.average_ll, theoretical_optimal_ll(&m, &partition), epsilon = 1e-12);
    }

    struct Holes;
    impl RotationDensity for Holes {
        fn log_density(&self, viewpoint: usize, _q: &UnitQuaternion) -> Result<f64> {
            Ok(if viewpoint == 2 { f64::NEG_INFINITY } else { 0.0 })
        }
    }

    #[test]
    fn zero_density_entries_are_listed() {
        let m = generate_mode_set(0).unwrap();
        let r = average_ll(&Holes, &evaluation_set(&m)).unwrap();
        assert_eq!(r.average_ll, f64::NEG_INFINITY);
        assert_eq!(r.non_finite, vec![(2, 0), (2, 1), (2, 2), (2, 3)]);
    }

    struct ExactModes<'a>(&'a ToyModeSet);
    impl RotationSampler for ExactModes<'_> {
        fn sample(&self, viewpoint: usize, rng: &mut ChaCha8Rng) -> Result<UnitQuaternion> {
            let modes = self.0.modes(viewpoint);
            Ok(modes[rng.random_range(0..modes.len())])
        }
    }
    impl RotationPredictor for ExactModes<'_> {
        fn predict(&self, viewpoint: usize) -> Result<UnitQuaternion> {
            Ok(self.0.modes(viewpoint)[0])
        }
    }

    #[test]
    fn perfect_sampler_report() {
        let m = generate_mode_set(1).unwrap();
        let p = BinPartition::new(4096).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = sampling_report(&ExactModes(&m), &m, &p, 40_000, &mut rng).unwrap();
        assert_eq!(r.invalid_count, 0);
        assert!(r.mean_distance_deg < 1e-6);
        assert!(r.tvd.iter().all(|t| *t <= 0.05), "{:?}", r.tvd);
        for (v, props) in r.proportions.iter().enumerate() {
            assert_eq!(props.len(), 1 << v);
            assert_abs_diff_eq!(props.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let again = sampling_report(&ExactModes(&m), &m, &p, 40_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r, again);
        let pe = prediction_error(&ExactModes(&m), &m).unwrap();
        assert!(pe.mean_deg < 1e-6);
    }

    #[test]
    fn uniform_sampler_is_mostly_invalid() {
        let m = generate_mode_set(1).unwrap();
        let p = BinPartition::new(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = sampling_report(&UniformModel, &m, &p, 2000, &mut rng).unwrap();
        assert!(r.invalid_rate > 0.9);
        assert!(r.tvd.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(r.mean_distance_deg > 10.0);
    }

    #[test]
    fn viz_export_layout() {
        let m = generate_mode_set(0).unwrap();
        let params = ScorerParameters::new(
            ScorerConfig {
                bins: 32,
                frequencies: 2,
                context_dim: 4,
                hidden: [8, 8],
                head: HeadKind::Binned,
                viewpoints: 6,
            },
            0,
        )
        .unwrap();
        let cached = CachedScorer::new(&params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = viz_points(&cached, &m, 5, 1000, &mut rng).unwrap();
        assert_eq!(pts.len(), 1000);
        assert_eq!(pts.iter().filter(|p| p.tag == "mode").count(), 32);
        assert_eq!(pts.iter().filter(|p| p.tag == "sample").count(), 468);
        assert_eq!(pts.iter().filter(|p| p.tag == "uniform").count(), 500);
        let mut buf = Vec::new();
        write_viz_csv(
            &mut buf,
            &[VizPoint {
                q: UnitQuaternion::IDENTITY,
                log_density: 1.5,
                tag: "mode".into(),
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,z,log_density,tag\n0.0,0.0,0.0,1.5,mode\n");
        for p in &pts {
            let r = p.q.to_rotation_vector().0;
            assert!((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn digest_is_stable() {
        let a = config_digest(&ScorerConfig::default()).unwrap();
        assert_eq!(a, config_digest(&ScorerConfig::default()).unwrap());
        assert_eq!(a.len(), 64);
        assert_ne!(
            a,
            config_digest(&ScorerConfig {
                bins: 8,
                ..ScorerConfig::default()
            })
            .unwrap()
        );
    }
}
