//! End-to-end training checks that exercise the full objective on generated
//! data. These are slower than unit tests; each one trains real models.

use netconfound::datagen::gen_synthetic;
use netconfound::effect_estimator::{train, TrainConfig};
use netconfound::evalmetrics::mcc_blocks;

/// One-off probe for sizing the training budget; run explicitly with
/// `cargo test -p netconfound --test training probe -- --ignored --nocapture`.
/// Environment overrides (all optional): `PROBE_SEED`, `PROBE_EPOCHS`,
/// `PROBE_BATCH` (0 means full batch), `PROBE_N`.
#[test]
#[ignore]
fn probe_default_training_speed_and_recovery() {
    let env_num = |key: &str, default: u64| -> u64 {
        std::env::var(key)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let seed = env_num("PROBE_SEED", 0);
    let n = env_num("PROBE_N", 1000) as usize;
    let ds = gen_synthetic(n, 5.0, seed).unwrap();
    let mut cfg = TrainConfig::new(ds.d_x());
    cfg.seed = seed;
    cfg.epochs = env_num("PROBE_EPOCHS", cfg.epochs as u64) as usize;
    cfg.batch_size = match env_num("PROBE_BATCH", 0) {
        0 => None,
        b => Some(b as usize),
    };
    println!(
        "probe: n {} seed {} epochs {} batch {:?}",
        n, seed, cfg.epochs, cfg.batch_size
    );
    let start = std::time::Instant::now();
    let trained = train(&ds, cfg).unwrap();
    let elapsed = start.elapsed();
    let truth = ds.latents.as_ref().unwrap();
    let recovered = trained.recovered_latents(&ds).unwrap();
    let mcc = mcc_blocks(truth, &recovered).unwrap();
    println!(
        "epochs run: {} (best {}), wall: {:.1?}",
        trained.logs.len(),
        trained.best_epoch,
        elapsed
    );
    println!("mcc:\n{mcc:.3}");
    for log in trained.logs.iter().take(3) {
        println!(
            "epoch {}: total {:.4} (elbo {:.4} sm {:.4} y {:.4} ipm {:.4}) val {:?}",
            log.epoch,
            log.loss.total,
            log.loss.neg_elbo,
            log.loss.score_matching,
            log.loss.outcome,
            log.loss.ipm,
            log.val_mse
        );
    }
    if let Some(last) = trained.logs.last() {
        println!(
            "last epoch {}: total {:.4} (elbo {:.4} sm {:.4} y {:.4} ipm {:.4}) val {:?}",
            last.epoch,
            last.loss.total,
            last.loss.neg_elbo,
            last.loss.score_matching,
            last.loss.outcome,
            last.loss.ipm,
            last.val_mse
        );
    }
}
