//! Run the built-in synthetic benchmark for one seed and print the
//! retrieval table. Usage: `cargo run --release --example benchmark -- 3`

use avcascade::experiments::{default_benchmark, run_benchmark};
use std::time::Instant;

fn main() {
    env_logger::init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let result = run_benchmark(&default_benchmark(seed), dir.path()).expect("benchmark");
    println!("seed {seed} ({:.1} s)", start.elapsed().as_secs_f64());
    println!("{:<20} {:>8} {:>8} {:>8} {:>8}", "model", "R@1", "R@5", "R@10", "medR");
    for (tag, (fwd, bwd)) in &result.reports {
        let mean = |k: usize| (fwd.r_at[&k] + bwd.r_at[&k]) / 2.0;
        println!(
            "{:<20} {:>8.3} {:>8.3} {:>8.3} {:>8.1}",
            tag,
            mean(1),
            mean(5),
            mean(10),
            (fwd.median_rank + bwd.median_rank) / 2.0
        );
    }
}
