use std::time::Instant;
use ttsr_core::data::{write_synthetic_dataset, PairedDataset};
use ttsr_core::network::GeneratorConfig;
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(63);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut rng = seeded(7, Stream::Data);
    let extent: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(64);
    write_synthetic_dataset(&data, 8, extent, &mut rng).unwrap();
    let ds = PairedDataset::open(&data).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.seed = 7;
    cfg.adam.lr = lr;
    cfg.warmup_epochs = epochs;
    cfg.total_epochs = epochs;
    cfg.batch_size = 1;
    cfg.lr_patch = 8;
    cfg.augment = false;
    cfg.generator = GeneratorConfig {
        base_channels: args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8),
        blocks: [1, 1, 1, 1],
        csfi: args.get(4).map(|s| s == "csfi").unwrap_or(false),
        ..GeneratorConfig::default()
    };
    cfg.disc_base_channels = 4;
    cfg.lr_decay = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let t0 = Instant::now();
    let report = train(&ds, &cfg, &dir.path().join("out"), None).unwrap();
    println!(
        "lr {lr} epochs {epochs}: steps {} final_rec {:.5} in {:?}",
        report.steps, report.final_rec, t0.elapsed()
    );
    let log = std::fs::read_to_string(&report.log_path).unwrap();
    for line in log.lines().skip(1).step_by(50) {
        println!("{line}");
    }
    println!("{}", log.lines().last().unwrap());
}
