use ttsr_core::data::{write_synthetic_dataset, PairedDataset};
use ttsr_core::network::{Generator, GeneratorConfig};
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::tensor::resize::bicubic_resize;
use ttsr_core::tensor::ops;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut rng = seeded(7, Stream::Data);
    write_synthetic_dataset(&data, 8, 64, &mut rng).unwrap();
    let ds = PairedDataset::open(&data).unwrap();

    let mut zero_l1 = 0.0;
    let mut bicubic_l1 = 0.0;
    let mut init_l1 = 0.0;
    let mut irng = seeded(7, Stream::Init);
    let gen: Generator<f32> = Generator::new(
        GeneratorConfig {
            base_channels: 8,
            blocks: [1, 1, 1, 1],
            ..GeneratorConfig::default()
        },
        &mut irng,
    );
    for i in 0..ds.len() {
        let pair = ds.load_pair::<f32>(i).unwrap();
        let hr = pair.hr;
        let n = hr.numel() as f64;
        zero_l1 += hr.to_vec().iter().map(|v| v.abs() as f64).sum::<f64>() / n;
        let lr = bicubic_resize(&hr, 0.25).unwrap();
        let up = bicubic_resize(&lr, 4.0).unwrap();
        bicubic_l1 += ops::sub(&up, &hr)
            .unwrap()
            .to_vec()
            .iter()
            .map(|v| v.abs() as f64)
            .sum::<f64>()
            / n;
        let out = gen.forward(&lr, &pair.reference).unwrap().sr;
        let ov = out.to_vec();
        let o_mean = ov.iter().map(|v| v.abs() as f64).sum::<f64>() / n;
        init_l1 += ops::sub(&out, &hr)
            .unwrap()
            .to_vec()
            .iter()
            .map(|v| v.abs() as f64)
            .sum::<f64>()
            / n;
        if i == 0 {
            println!("init |out| mean {o_mean:.4}");
        }
    }
    let k = ds.len() as f64;
    println!(
        "zero-output L1 {:.4}  bicubic-up L1 {:.4}  init-model L1 {:.4}",
        zero_l1 / k,
        bicubic_l1 / k,
        init_l1 / k
    );
}
