//! Static baseline vs fusion neck on the synthetic benchmark.
//!
//! `cargo run --release --example desk_bench [config.json]`

use mstf_core::experiment::{run_benchmark, Arm, BenchConfig, BenchData};
use mstf_core::mstf::SplitRatio;

fn main() -> mstf_core::Result<()> {
    let cfg: BenchConfig = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => BenchConfig::default(),
    };
    let data = BenchData::generate(&cfg)?;
    println!("{} training clips, {} test videos", data.train.len(), data.test.frames.len());
    let n = cfg.detector.fusion_start_epoch;
    let arms = [
        Arm::new("static 1:0", SplitRatio::new(1, 0), n),
        Arm::new(&format!("mstf n={n}"), cfg.detector.mstf.lookup.split_ratio, n),
        Arm::new("mstf n=0", cfg.detector.mstf.lookup.split_ratio, 0),
    ];
    let summaries = run_benchmark(&cfg, &data, &arms, |r| {
        println!(
            "{:<12} seed {} AP {:6.2} AP_es {:6.2} {:5.1}s losses {:.3?}",
            r.arm, r.seed, r.ap, r.ap_es, r.seconds, r.losses
        )
    })?;
    for s in &summaries {
        println!(
            "{:<12} median AP {:6.2} median AP_es {:6.2} std AP {:.3}",
            s.arm, s.median_ap, s.median_ap_es, s.std_ap
        );
    }
    Ok(())
}
