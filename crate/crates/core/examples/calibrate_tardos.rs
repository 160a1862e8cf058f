//! Calibrates the tracing threshold scale for length scale `A = 10` against
//! block-splice collusions and prints the record stored in
//! `calibration/tardos.json`.
//!
//! cargo run --release -p markbench --example calibrate_tardos > crates/core/calibration/tardos.json

use markbench::analysis::{calibrate_tardos, k_star};
use markbench::fpcode::FpParams;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

const SEED: u64 = 20_240_601;
const TRIALS: usize = 10_000;

fn main() -> anyhow::Result<()> {
    let lambda: u32 = std::env::var("CAL_LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let (n, c, delta) = (16, 2, 0.2);
    let params = FpParams::with_scale(lambda, n, c, delta, 10.0);
    let len = params.code_length();
    let kept = k_star(len, delta, lambda)?;
    let per_colluder = (kept as f64 / (c as f64 * (1.0 - delta))).ceil() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(SEED);
    let cal = calibrate_tardos(&params, per_colluder, kept, TRIALS, &mut rng)?;
    let z = params.z_scale;
    let report = json!({
        "seed": SEED,
        "trials": TRIALS,
        "params": params,
        "code_length": len,
        "kept_blocks": kept,
        "blocks_per_colluder": per_colluder,
        "max_innocent": cal.max_innocent,
        "colluder_best_q01": cal.colluder_quantile(0.01),
        "colluder_best_q05": cal.colluder_quantile(0.05),
        "colluder_best_median": cal.colluder_quantile(0.5),
        "z_scale": z,
        "colluder_hit_rate_at_z_scale": cal.colluder_hit_rate(z),
        "innocent_margin": z / cal.max_innocent,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
