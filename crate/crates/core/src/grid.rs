//! Grid-normalized implicit baseline: a scalar scorer over (viewpoint,
//! rotation) pairs, trained contrastively against uniform negatives and
//! normalized over a finite set of rotations.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::log_sum_exp;
use crate::error::{invalid, Error, Result};
use crate::nn::{positional_encode_into, ConditionedMlp, NetShape};
use crate::so3::{sample_uniform_rotation, UnitQuaternion, SO3_VOLUME};
use crate::toy::{ToyModeSet, ToySample};
use crate::train::{train_objective, validation_set, Objective, TrainConfig, TrainHooks, TrainingLog};

const CHUNK: usize = 1024;

/// `ln(M / π²)`: the log density of a softmax that puts all its mass on one
/// of `M` cells of volume `π² / M`.
pub fn theoretical_max_ll(m: f64) -> f64 {
    (m / SO3_VOLUME).ln()
}

/// Haar-uniform random rotations standing in for an equal-volume partition.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationGrid {
    seed: u64,
    rotations: Vec<UnitQuaternion>,
}

impl RotationGrid {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("grid needs at least 2 rotations, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotations = (0..size).map(|_| sample_uniform_rotation(&mut rng)).collect();
        Ok(Self { seed, rotations })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotations(&self) -> &[UnitQuaternion] {
        &self.rotations
    }

    /// Nominal cell volume `π² / M`.
    pub fn cell_volume(&self) -> f64 {
        SO3_VOLUME / self.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Positional-encoding frequencies applied to each matrix entry.
    pub frequencies: usize,
    pub context_dim: usize,
    pub hidden: [usize; 2],
    pub viewpoints: usize,
    /// Rotations scored per training example: the true one plus negatives.
    pub train_candidates: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            frequencies: 3,
            context_dim: 64,
            hidden: [256, 128],
            viewpoints: crate::toy::VIEWPOINTS,
            train_candidates: 4096,
        }
    }
}

impl GridConfig {
    pub fn feature_dim(&self) -> usize {
        9 * (1 + 2 * self.frequencies)
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            viewpoints: self.viewpoints,
            context_dim: self.context_dim,
            feature_dim: self.feature_dim(),
            hidden: self.hidden,
            output_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_candidates < 2 {
            return Err(invalid("training needs at least one negative"));
        }
        self.net_shape().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    config: GridConfig,
    net: ConditionedMlp,
}

/// Per-viewpoint softmax over a fixed grid.
#[derive(Clone, Debug)]
pub struct GridDensity {
    viewpoint: usize,
    version: u64,
    grid_size: usize,
    log_normalizer: f64,
    cumulative: Vec<f64>,
    best: usize,
}

impl GridDensity {
    pub fn viewpoint(&self) -> usize {
        self.viewpoint
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }
}

impl GridModel {
    pub fn new(config: GridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: ConditionedMlp::new(config.net_shape(), &mut rng)?,
            config,
        })
    }

    pub fn from_network(config: GridConfig, net: ConditionedMlp) -> Result<Self> {
        config.validate()?;
        if *net.shape() != config.net_shape() {
            return Err(invalid("network shape does not match grid config"));
        }
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn network(&self) -> &ConditionedMlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut ConditionedMlp {
        &mut self.net
    }

    fn write_features(&self, q: &UnitQuaternion, out: &mut [f64]) {
        let w = 1 + 2 * self.config.frequencies;
        for (i, &m) in q.to_matrix().as_array().iter().enumerate() {
            positional_encode_into(m, &mut out[i * w..(i + 1) * w]);
        }
    }

    /// Positionally encoded flattened rotation matrices, one per row.
    pub fn features(&self, rotations: &[UnitQuaternion]) -> Array2<f64> {
        let mut f = Array2::zeros((rotations.len(), self.config.feature_dim()));
        for (q, mut row) in rotations.iter().zip(f.rows_mut()) {
            self.write_features(q, row.as_slice_mut().expect("contiguous"));
        }
        f
    }

    /// Scores `s = f(v, R)` for each rotation.
    pub fn scores(&self, viewpoint: usize, rotations: &[UnitQuaternion]) -> Result<Vec<f64>> {
        self.net.check_viewpoint(viewpoint)?;
        let ctx = self.net.context_projection(viewpoint);
        let mut out = Vec::with_capacity(rotations.len());
        for chunk in rotations.chunks(CHUNK) {
            let mut a1 = self.net.feature_preactivation(self.features(chunk).view());
            a1 += &ctx;
            out.extend(self.net.forward_from_preactivation(a1).out.column(0).iter());
        }
        Ok(out)
    }

    /// `ln softmax(s)[q] - ln(π² / (M + 1))` over `{q} ∪ grid`, scanning the
    /// whole grid.
    pub fn log_density(&self, viewpoint: usize, q: &UnitQuaternion, grid: &RotationGrid) -> Result<f64> {
        let mut scores = self.scores(viewpoint, grid.rotations())?;
        let sq = self.scores(viewpoint, std::slice::from_ref(q))?[0];
        scores.push(sq);
        let m1 = scores.len() as f64;
        Ok(sq - log_sum_exp(&scores) + (m1 / SO3_VOLUME).ln())
    }

    pub fn density_cache(&self, viewpoint: usize, grid: &RotationGrid) -> Result<GridDensity> {
        let scores = self.scores(viewpoint, grid.rotations())?;
        let log_normalizer = log_sum_exp(&scores);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        let mut acc = 0.0;
        let cumulative = scores
            .iter()
            .map(|s| {
                acc += (s - log_normalizer).exp();
                acc
            })
            .collect();
        Ok(GridDensity {
            viewpoint,
            version: self.net.version(),
            grid_size: grid.len(),
            log_normalizer,
            cumulative,
            best,
        })
    }

    fn check_cache(&self, cache: &GridDensity) -> Result<()> {
        if cache.version != self.net.version() {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.net.version(),
            });
        }
        Ok(())
    }

    /// Same value as [`GridModel::log_density`] with the grid normalizer reused.
    pub fn log_density_cached(&self, cache: &GridDensity, q: &UnitQuaternion) -> Result<f64> {
        self.check_cache(cache)?;
        let sq = self.scores(cache.viewpoint, std::slice::from_ref(q))?[0];
        let lse = log_sum_exp(&[cache.log_normalizer, sq]);
        Ok(sq - lse + ((cache.grid_size + 1) as f64 / SO3_VOLUME).ln())
    }

    /// Highest-scoring grid rotation.
    pub fn predict_cached(&self, cache: &GridDensity, grid: &RotationGrid) -> Result<UnitQuaternion> {
        self.check_cache(cache)?;
        if cache.grid_size != grid.len() {
            return Err(invalid("density cache belongs to a different grid"));
        }
        Ok(grid.rotations()[cache.best])
    }

    /// Categorical draw over the grid softmax.
    pub fn sample_cached<R: Rng + ?Sized>(
        &self,
        cache: &GridDensity,
        grid: &RotationGrid,
        rng: &mut R,
    ) -> Result<UnitQuaternion> {
        self.check_cache(cache)?;
        if cache.grid_size != grid.len() {
            return Err(invalid("density cache belongs to a different grid"));
        }
        let total = *cache.cumulative.last().expect("non-empty grid");
        let u = rng.random::<f64>() * total;
        let i = cache.cumulative.partition_point(|&c| c <= u).min(grid.len() - 1);
        Ok(grid.rotations()[i])
    }

    /// Contrastive cross-entropy of each `(viewpoint, q)` against shared
    /// negatives; returns the weighted loss and optionally its gradient.
    fn contrastive(
        &self,
        samples: &[(ToySample, f64)],
        negative_features: &Array2<f64>,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let mut index: HashMap<(usize, [u64; 4]), usize> = HashMap::new();
        let mut positives: Vec<(usize, UnitQuaternion, f64)> = Vec::new();
        for (s, w) in samples {
            self.net.check_viewpoint(s.viewpoint)?;
            let key = (s.viewpoint, s.q.components().map(f64::to_bits));
            let i = *index.entry(key).or_insert_with(|| {
                positives.push((s.viewpoint, s.q, 0.0));
                positives.len() - 1
            });
            positives[i].2 += w;
        }
        let mut views: Vec<usize> = positives.iter().map(|p| p.0).collect();
        views.sort_unstable();
        views.dedup();

        let p = positives.len();
        let k = negative_features.nrows();
        let h1 = self.config.hidden[0];
        let contexts = self.net.context_projections();
        let pos_q: Vec<_> = positives.iter().map(|p| p.1).collect();
        let pos_features = self.features(&pos_q);
        let neg_pre = self.net.feature_preactivation(negative_features.view());
        let mut a1 = Array2::zeros((p + views.len() * k, h1));
        a1.slice_mut(s![..p, ..]).assign(&self.net.feature_preactivation(pos_features.view()));
        for (i, pos) in positives.iter().enumerate() {
            a1.row_mut(i).scaled_add(1.0, &contexts.row(pos.0));
        }
        for (j, &v) in views.iter().enumerate() {
            let mut block = a1.slice_mut(s![p + j * k..p + (j + 1) * k, ..]);
            block.assign(&neg_pre);
            block += &contexts.row(v);
        }
        let acts = self.net.forward_from_preactivation(a1);
        let out = acts.out.column(0);

        let mut loss = 0.0;
        let mut d_out = Array2::zeros((out.len(), 1));
        for (i, (v, _, w)) in positives.iter().enumerate() {
            let j = views.binary_search(v).expect("viewpoint listed");
            let block = out.slice(s![p + j * k..p + (j + 1) * k]);
            let mut all = Vec::with_capacity(k + 1);
            all.push(out[i]);
            all.extend(block.iter());
            let lse = log_sum_exp(&all);
            loss += w * (lse - out[i]);
            if want_grad {
                d_out[[i, 0]] += w * ((out[i] - lse).exp() - 1.0);
                for (n, s) in block.iter().enumerate() {
                    d_out[[p + j * k + n, 0]] += w * (s - lse).exp();
                }
            }
        }
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grad = self.net.zero_grad();
        let d_a1 = self.net.backward_to_preactivation(&acts, d_out.view(), &mut grad);
        let mut d_ctx = Array2::zeros((self.config.viewpoints, h1));
        for (i, pos) in positives.iter().enumerate() {
            d_ctx.row_mut(pos.0).scaled_add(1.0, &d_a1.row(i));
        }
        let mut d_neg = Array2::zeros((k, h1));
        for (j, &v) in views.iter().enumerate() {
            let block = d_a1.slice(s![p + j * k..p + (j + 1) * k, ..]);
            d_neg += &block;
            d_ctx.row_mut(v).scaled_add(1.0, &block.sum_axis(Axis(0)));
        }
        let mut compact = Array2::zeros((p + k, h1));
        compact.slice_mut(s![..p, ..]).assign(&d_a1.slice(s![..p, ..]));
        compact.slice_mut(s![p.., ..]).assign(&d_neg);
        let mut features = Array2::zeros((p + k, self.config.feature_dim()));
        features.slice_mut(s![..p, ..]).assign(&pos_features);
        features.slice_mut(s![p.., ..]).assign(negative_features);
        self.net
            .backward_first_layer(compact.view(), features.view(), d_ctx.view(), &mut grad);
        Ok((loss, Some(grad)))
    }

    /// Mean contrastive loss over a minibatch against the given negatives.
    pub fn contrastive_loss_and_grad(
        &self,
        batch: &[ToySample],
        negatives: &[UnitQuaternion],
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() || negatives.is_empty() {
            return Err(invalid("contrastive loss needs samples and negatives"));
        }
        let w = 1.0 / batch.len() as f64;
        let weighted: Vec<_> = batch.iter().map(|s| (*s, w)).collect();
        let (loss, grad) = self.contrastive(&weighted, &self.features(negatives), true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    pub fn contrastive_loss(&self, batch: &[ToySample], negatives: &[UnitQuaternion]) -> Result<f64> {
        if batch.is_empty() || negatives.is_empty() {
            return Err(invalid("contrastive loss needs samples and negatives"));
        }
        let w = 1.0 / batch.len() as f64;
        let weighted: Vec<_> = batch.iter().map(|s| (*s, w)).collect();
        Ok(self.contrastive(&weighted, &self.features(negatives), false)?.0)
    }
}

/// Training wrapper that draws fresh negatives per minibatch and validates
/// against one fixed negative set.
struct GridObjective {
    model: GridModel,
    validation_negatives: Vec<UnitQuaternion>,
}

impl Objective for GridObjective {
    fn network(&self) -> &ConditionedMlp {
        &self.model.net
    }

    fn network_mut(&mut self) -> &mut ConditionedMlp {
        &mut self.model.net
    }

    fn batch_loss_and_grad(&self, batch: &[ToySample], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let negatives: Vec<_> = (1..self.model.config.train_candidates)
            .map(|_| sample_uniform_rotation(rng))
            .collect();
        self.model.contrastive_loss_and_grad(batch, &negatives)
    }

    fn validation_loss(&self, samples: &[ToySample]) -> Result<f64> {
        self.model.contrastive_loss(samples, &self.validation_negatives)
    }
}

/// The fixed negatives used for validation during training.
pub fn validation_negatives(config: &GridConfig, train: &TrainConfig) -> Vec<UnitQuaternion> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.validation_seed);
    rng.set_stream(3);
    (1..config.train_candidates)
        .map(|_| sample_uniform_rotation(&mut rng))
        .collect()
}

/// The validation loss training reports for `model`.
pub fn grid_validation_loss(model: &GridModel, mode_set: &ToyModeSet, train: &TrainConfig) -> Result<f64> {
    model.contrastive_loss(&validation_set(mode_set, train), &validation_negatives(&model.config, train))
}

/// Trains a grid baseline on the toy process.
pub fn train_grid_model(
    config: GridConfig,
    mode_set: &ToyModeSet,
    train: &TrainConfig,
    hooks: TrainHooks,
) -> Result<(GridModel, TrainingLog)> {
    let mut objective = GridObjective {
        model: GridModel::new(config, train.seed)?,
        validation_negatives: validation_negatives(&config, train),
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(train.seed);
    data_rng.set_stream(1);
    let mut stream = mode_set.sample_stream(data_rng);
    let validation = validation_set(mode_set, train);
    let log = train_objective(&mut objective, &mut stream, &validation, train, hooks)?;
    Ok((objective.model, log))
}
