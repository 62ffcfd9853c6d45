use std::time::Instant;
use ttsr_core::data::{write_synthetic_dataset, PairedDataset};
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::train::{train, TrainConfig};
use ttsr_core::network::GeneratorConfig;

fn main() {
    // time a 1-epoch run with 1 pair (1 step) to separate step vs save cost
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut rng = seeded(1, Stream::Data);
    write_synthetic_dataset(&data, 8, 64, &mut rng).unwrap();
    let ds = PairedDataset::open(&data).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.warmup_epochs = 1;
    cfg.total_epochs = 1;
    cfg.batch_size = 2;
    cfg.lr_patch = 8;
    cfg.generator = GeneratorConfig { base_channels: 8, blocks: [1,1,1,1], ..GeneratorConfig::default() };
    let t0 = Instant::now();
    let r = train(&ds, &cfg, &dir.path().join("out"), None).unwrap();
    println!("1 step + 1 save: {:?} ({} steps)", t0.elapsed(), r.steps);
}
