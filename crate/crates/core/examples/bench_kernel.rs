//! Throughput of the ensemble integrator: `cargo run --release --example bench_kernel -- 4096`.

use std::time::Instant;

use sinebeta::model::ModelParams;
use sinebeta::sde::{derive_stream, integrate_ensemble, StepPolicy};

fn main() {
    let x: u32 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1024);
    let params = ModelParams::full_grid(2.0, x).unwrap();
    let policy = StepPolicy::for_params(&params).with_out_stride(0);
    let start = Instant::now();
    let e = integrate_ensemble(&params, &policy, &derive_stream(1, 0)).unwrap();
    let el = start.elapsed().as_secs_f64();
    let phase_steps = e.total_steps as f64 * e.signed.len() as f64;
    println!(
        "x={x} steps={} drift_steps={} t_final={:.2} {:.3}s {:.2} ns/phase-step",
        e.total_steps,
        e.drift_steps,
        e.final_time(),
        el,
        el / phase_steps * 1e9
    );
}
