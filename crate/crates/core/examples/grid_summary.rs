//! Runs a grid with `key=value` overrides from the command line and prints
//! per-b means and the pretraining gap.
//!
//! cargo run --release -p subpre-core --example grid_summary -- protocol.epochs_pre=60 ...

use std::time::Instant;

use subpre::config::{ConfigMap, ExperimentConfig};
use subpre::protocol::run_full_grid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut map = ConfigMap::default();
    for pair in std::env::args().skip(1) {
        map.set_pair(&pair)?;
    }
    let cfg = ExperimentConfig::from_map(&map)?;
    let start = Instant::now();
    let grid = run_full_grid(&cfg)?;
    println!(
        "K={} M={} P={} elapsed={:.1}s",
        grid.k,
        grid.m,
        grid.p,
        start.elapsed().as_secs_f64()
    );
    println!("b  runs  E_b      E_BT     E_BV     E_T      E_V      gap      acc_V   subset_q");
    for c in &grid.curves {
        let m = &c.mean;
        println!(
            "{:<3}{:<6}{:<9.4}{:<9.4}{:<9.4}{:<9.4}{:<9.4}{:<9.4}{:<8.4}{:.2}",
            c.b,
            c.runs,
            m[0].loss,
            m[1].loss,
            m[2].loss,
            m[3].loss,
            m[4].loss,
            m[1].loss - m[0].loss,
            m[4].accuracy,
            c.subset_q
        );
    }
    Ok(())
}
