#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use so3mix::checkpoint::{Checkpoint, Model};
use so3mix::density::{mog_bounds, mog_q_of_s, mog_s_of_q};
use so3mix::nn::Tensor;
use so3mix::sampler::sample_categorical;
use so3mix::so3::sample_uniform_rotation;
use so3mix::toy::generate_mode_set;
use so3mix::{BinPartition, HeadKind, ScorerConfig, ScorerParameters};

pub fn small_config(bins: usize, head: HeadKind) -> ScorerConfig {
    ScorerConfig {
        bins,
        frequencies: 3,
        context_dim: 8,
        hidden: [16, 12],
        head,
        viewpoints: 6,
    }
}

/// A random scorer whose output biases favour bins near zero by `-beta · m²`
/// (`m` the bin midpoint), so almost no mass reaches bins next to the
/// boundary of the ball.
pub fn centered_scorer(bins: usize, beta: f64, seed: u64) -> ScorerParameters {
    let mut p = ScorerParameters::new(small_config(bins, HeadKind::Binned), seed).unwrap();
    let partition = p.partition().clone();
    let range = p.network().shape().range(Tensor::OutBias);
    let params = p.network_mut().params_mut();
    for (i, b) in params[range].iter_mut().enumerate() {
        *b = -beta * partition.midpoint(i).powi(2);
    }
    p
}

/// Probability that ancestral sampling picks a bin with no room left inside
/// the unit ball. Such bins pass the min-magnitude mask but carry no
/// density, so `π² · E[p] = 1 - lost_mass`.
pub fn lost_mass(params: &ScorerParameters, viewpoint: usize, draws: usize, seed: u64) -> f64 {
    let cache = params.conditioning_cache(viewpoint).unwrap();
    let partition = params.partition();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lost = 0usize;
    'draw: for _ in 0..draws {
        let mut prev: Vec<f64> = Vec::with_capacity(2);
        let mut remaining = 1.0;
        for step in 0..3 {
            let dist = params.step_distribution(&cache, step, &prev).unwrap();
            let bin = sample_categorical(&dist, &mut rng);
            if partition.constrained_width(bin, remaining) <= 0.0 {
                lost += 1;
                continue 'draw;
            }
            let r = f64::sqrt(remaining);
            let (a, b) = partition.bounds(bin);
            let v = rng.random_range(a.max(-r)..b.min(r));
            remaining -= v * v;
            prev.push(v);
        }
    }
    lost as f64 / draws as f64
}

/// `π² · E[p(q)]` over Haar-uniform draws, which is 1 for a normalized density.
pub fn normalization_estimate(params: &ScorerParameters, viewpoint: usize, draws: usize, seed: u64) -> f64 {
    let cache = params.conditioning_cache(viewpoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..draws {
        let q = sample_uniform_rotation(&mut rng);
        sum += params.log_density_cached(&cache, &q).unwrap().exp();
    }
    PI * PI * sum / draws as f64
}

/// Worst relative error between analytic and central-difference gradients
/// over `samples` randomly chosen parameters.
pub fn worst_gradient_error(head: HeadKind, seed: u64, samples: usize) -> f64 {
    let mut p = ScorerParameters::new(small_config(32, head), seed).unwrap();
    let modes = generate_mode_set(seed).unwrap();
    let batch: Vec<_> = modes.sample_stream(ChaCha8Rng::seed_from_u64(seed)).take(24).collect();
    let (_, grad) = p.loss_and_grad(&batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..grad.len());
        let orig = p.network().params()[i];
        let h = 1e-4 * orig.abs().max(1e-2);
        p.network_mut().params_mut()[i] = orig + h;
        let up = p.loss_and_grad(&batch).unwrap().0;
        p.network_mut().params_mut()[i] = orig - h;
        let down = p.loss_and_grad(&batch).unwrap().0;
        p.network_mut().params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-6));
    }
    worst
}

/// Counts uniform rotations whose own sentence hits a masked bin.
pub fn mask_violations(partition: &BinPartition, draws: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..draws {
        let q = sample_uniform_rotation(&mut rng);
        let [lx, ly, lz] = partition.sentence_of(&q).labels();
        let hit = partition.strictly_illegal_mask(&[]).unwrap().is_illegal(lx)
            || partition.strictly_illegal_mask(&[lx]).unwrap().is_illegal(ly)
            || partition.strictly_illegal_mask(&[lx, ly]).unwrap().is_illegal(lz);
        bad += usize::from(hit);
    }
    bad
}

/// Largest `|q - q(s(q))|` over the components of uniform rotations.
pub fn mog_round_trip_error(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let q = sample_uniform_rotation(&mut rng);
        let xyz = q.xyz();
        let u = mog_bounds(xyz);
        for c in 0..3 {
            if xyz[c].abs() < u[c] {
                let s = mog_s_of_q(xyz[c], u[c]).unwrap();
                worst = worst.max((mog_q_of_s(s, u[c]) - xyz[c]).abs());
            }
        }
    }
    worst
}

/// Writes and rereads a checkpoint; true when bytes and parameters survive exactly.
pub fn checkpoint_round_trip(model: Model) -> bool {
    let c = Checkpoint {
        model,
        run_config: "[model]\nbins = 32\n".into(),
    };
    let mut bytes = Vec::new();
    c.write(&mut bytes).unwrap();
    let back = Checkpoint::read(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    let same_params = c
        .model
        .network()
        .params()
        .iter()
        .zip(back.model.network().params())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    same_params && back.run_config == c.run_config && again == bytes
}
