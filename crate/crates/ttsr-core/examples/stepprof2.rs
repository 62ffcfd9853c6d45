use ttsr_core::data::{write_synthetic_dataset, ImageU8, PairedDataset};
use ttsr_core::network::GeneratorConfig;
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::tensor::ops;
use ttsr_core::tensor::resize::bicubic_resize;
use ttsr_core::train::{load_generator, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(25);
    let extent: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut rng = seeded(7, Stream::Data);
    write_synthetic_dataset(&data, 8, extent, &mut rng).unwrap();
    let ds = PairedDataset::open(&data).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.seed = 7;
    cfg.adam.lr = lr;
    cfg.warmup_epochs = epochs;
    cfg.total_epochs = epochs;
    cfg.batch_size = 1;
    cfg.lr_patch = extent / 4;
    cfg.augment = false;
    cfg.generator = GeneratorConfig {
        base_channels: 8,
        blocks: [1, 1, 1, 1],
        csfi: false,
        ..GeneratorConfig::default()
    };
    cfg.disc_base_channels = 4;
    let out = dir.path().join("out");
    let report = train(&ds, &cfg, &out, None).unwrap();
    println!("steps {} final_rec {:.5}", report.steps, report.final_rec);
    let (gen, _) = load_generator::<f32>(report.checkpoints.last().unwrap()).unwrap();
    for i in 0..ds.len() {
        let pair = ds.load_pair::<f32>(i).unwrap();
        let hr = pair.hr;
        let n = hr.numel() as f64;
        let lr_img = bicubic_resize(&hr, 0.25).unwrap();
        let sr = gen.forward(&lr_img, &pair.reference).unwrap().sr;
        let sv = sr.to_vec();
        let hv = hr.to_vec();
        let l1: f64 = sv
            .iter()
            .zip(&hv)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n;
        let s_mean = sv.iter().map(|v| *v as f64).sum::<f64>() / n;
        let h_mean = hv.iter().map(|v| *v as f64).sum::<f64>() / n;
        let s_std = (sv.iter().map(|v| (*v as f64 - s_mean).powi(2)).sum::<f64>() / n).sqrt();
        let h_std = (hv.iter().map(|v| (*v as f64 - h_mean).powi(2)).sum::<f64>() / n).sqrt();
        println!(
            "sample {i}: l1 {l1:.4}  out mean {s_mean:+.3} std {s_std:.3}  tgt mean {h_mean:+.3} std {h_std:.3}"
        );
        if i < 2 {
            let d = ops::mul_scalar(&ops::add_scalar(&sr, 1.0), 0.5);
            ImageU8::from_tensor01(&d)
                .save(&std::path::PathBuf::from(format!("/tmp/diag_out_{i}.png")))
                .unwrap();
            let d = ops::mul_scalar(&ops::add_scalar(&hr, 1.0), 0.5);
            ImageU8::from_tensor01(&d)
                .save(&std::path::PathBuf::from(format!("/tmp/diag_tgt_{i}.png")))
                .unwrap();
        }
    }
}
