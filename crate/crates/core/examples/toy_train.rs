//! Trains a binned scorer on the toy process and reports its metrics
//! against the oracle.
//!
//! `cargo run --release --example toy_train -- [lr] [max_epochs] [bins]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use so3mix::eval::{average_ll, classification_nll, prediction_error, sampling_report, CachedScorer};
use so3mix::scorer::{HeadKind, ScorerConfig};
use so3mix::toy::{evaluation_set, generate_mode_set, theoretical_optimal};
use so3mix::train::{train, TrainConfig, TrainHooks};

fn main() -> so3mix::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map_or(1e-4, |s| s.parse().unwrap());
    let max_epochs: usize = args.get(2).map_or(200, |s| s.parse().unwrap());
    let bins: usize = args.get(3).map_or(4096, |s| s.parse().unwrap());
    let scorer = ScorerConfig {
        bins,
        head: HeadKind::Binned,
        ..ScorerConfig::default()
    };
    let partition = scorer.partition()?;
    let modes = generate_mode_set(0)?;
    let oracle = theoretical_optimal(&modes, &partition);
    let cfg = TrainConfig {
        learning_rate: lr,
        max_epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (params, log) = train(scorer, &modes, &cfg, TrainHooks::default())?;
    println!(
        "best val {:.5} at epoch {}, {:.1}s",
        log.best_validation_loss,
        log.best_epoch,
        start.elapsed().as_secs_f64()
    );
    let entries = evaluation_set(&modes);
    let nll = classification_nll(&params, &entries)?;
    let cached = CachedScorer::new(&params)?;
    let ll = average_ll(&cached, &entries)?;
    println!(
        "classification {nll:.5} (oracle {:.5}), LL {:.4} (oracle {:.4})",
        oracle.classification_nll, ll.average_ll, oracle.log_likelihood
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Instant::now();
    let report = sampling_report(&cached, &modes, &partition, 40_000, &mut rng)?;
    println!(
        "invalid {:.4}, tvd {:?}, mean dist {:.4} deg, {:.1}s",
        report.invalid_rate,
        report.tvd,
        report.mean_distance_deg,
        t.elapsed().as_secs_f64()
    );
    let probs: Vec<String> = modes
        .modes(5)
        .iter()
        .map(|q| Ok(format!("{:.4}", params.sentence_log_prob(5, q)?.exp())))
        .collect::<so3mix::Result<_>>()?;
    println!("viewpoint 5 sentence probabilities {}", probs.join(" "));
    let pe = prediction_error(&cached, &modes)?;
    println!("prediction error {:?}", pe.per_viewpoint_deg);
    Ok(())
}
