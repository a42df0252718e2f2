//! Two passes over twelve files, 2 KiB to 6 MiB: the first pass misses
//! and fills the cache, the second is served from it.
//!
//!     cargo run --example desk_experiment [-- <out-dir>]

use contentnet::harness::{emit_report, run_scenario, Scenario, ServedBy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = Scenario::default_scenario();
    let report = run_scenario(&scenario)?;

    println!(
        "{:<12} {:>9} {:>7} {:>12} {:>12}",
        "file", "bytes", "served", "sim ms", "proc ms"
    );
    for r in &report.records {
        let by = match r.served_by {
            ServedBy::Origin => "origin",
            ServedBy::Cache => "cache",
        };
        println!(
            "{:<12} {:>9} {:>7} {:>12.3} {:>12.3}",
            r.file, r.bytes, by, r.simulated_latency_ms, r.processing_ms
        );
    }
    let a = &report.aggregates;
    println!(
        "\nhits {} misses {} ratio {:.2}; mean miss {:.3} ms, mean hit {:.3} ms",
        a.hits,
        a.misses,
        a.hit_ratio,
        a.mean_miss_latency_ms.unwrap_or(f64::NAN),
        a.mean_hit_latency_ms.unwrap_or(f64::NAN),
    );
    println!("trace digest {}", report.trace_digest);

    if let Some(dir) = std::env::args().nth(1) {
        for path in emit_report(&report, dir.as_ref(), true)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
