//! Runs the fusion study for the seeds given on the command line. An
//! optional `STUDY_CONFIG` JSON file overrides the defaults.

use vemfuse_core::study::{run_study, StudyConfig};

fn main() {
    env_logger::init();
    let cfg: StudyConfig = match std::env::var("STUDY_CONFIG") {
        Ok(p) => serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap(),
        Err(_) => StudyConfig::default(),
    };
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    for seed in if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    } {
        let r = run_study(&cfg, seed).unwrap();
        println!(
            "seed {seed} pre {:.3}/{:.3} cont {:.3}/{:.3} comb {:.3} (p {:.3} q {:.3}) vem {:.3} ml {:.3} gain {:+.3} {:.0}s",
            r.pretrained.structure, r.pretrained.text, r.continued.structure, r.continued.text,
            r.combined, r.fused.structure, r.fused.text, r.vem_only, r.ml_only, r.gain(), r.wall_clock_s
        );
    }
}
