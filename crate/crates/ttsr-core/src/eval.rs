//! Evaluation harnesses: inference, per-relevance-level scoring, and the
//! transferred-original-image diagnostic.

use crate::data::{ImageU8, Result as DataResult};
use crate::metrics::{psnr, ssim};
use crate::network::Generator;
use crate::tensor::patch::{fold, gather_columns, unfold};
use crate::tensor::resize::bicubic_resize;
use crate::tensor::{Element, Result, Tensor};
use crate::transformer::{attention_maps, relevance_embedding, Scale};
use crate::tensor::conv::PatchGeometry;

/// Super-resolve one image pair. Inputs are 8-bit images; the output is the
/// quantized 4x result.
pub fn infer<E: Element>(gen: &Generator<E>, lr: &ImageU8, reference: &ImageU8) -> Result<ImageU8> {
    let lr_t = lr.to_tensor::<E>();
    let ref_t = reference.to_tensor::<E>();
    let out = gen.forward(&lr_t, &ref_t)?;
    Ok(ImageU8::from_tensor(&clamp_network_range(&out.sr)))
}

fn clamp_network_range<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let data = t
        .to_vec()
        .iter()
        .map(|v| E::from_f64(v.into_f64().clamp(-1.0, 1.0)))
        .collect();
    Tensor::new(t.shape(), data)
}

/// One test item: ground truth plus named reference variants ordered from
/// most to least relevant (the last is conventionally the LR itself).
pub struct EvalItem {
    pub id: String,
    pub hr: ImageU8,
    pub refs: Vec<(String, ImageU8)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelScore {
    pub level: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Score the model once per relevance level across all items. Every item
/// must provide the same ordered level names.
pub fn relevance_level_eval<E: Element>(
    gen: &Generator<E>,
    items: &[EvalItem],
) -> std::result::Result<Vec<LevelScore>, String> {
    if items.is_empty() {
        return Err("no evaluation items".to_string());
    }
    let levels: Vec<String> = items[0].refs.iter().map(|(n, _)| n.clone()).collect();
    for item in items {
        let got: Vec<&String> = item.refs.iter().map(|(n, _)| n).collect();
        if got.len() != levels.len() || got.iter().zip(&levels).any(|(a, b)| *a != b) {
            return Err(format!("item {} is missing ref variants {levels:?}", item.id));
        }
    }
    let mut scores = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let (mut psum, mut ssum) = (0.0, 0.0);
        for item in items {
            let lr = crate::data::make_lr(&item.hr).map_err(|e| e.to_string())?;
            let sr = infer(gen, &lr, &item.refs[li].1).map_err(|e| e.to_string())?;
            psum += psnr(&sr, &item.hr)?;
            ssum += ssim(&sr, &item.hr)?;
        }
        scores.push(LevelScore {
            level: level.clone(),
            mean_psnr: psum / items.len() as f64,
            mean_ssim: ssum / items.len() as f64,
        });
    }
    Ok(scores)
}

/// Render level scores as CSV (one row per level).
pub fn level_scores_csv(scores: &[LevelScore]) -> String {
    let mut out = String::from("level,psnr,ssim\n");
    for s in scores {
        out.push_str(&format!("{},{:.4},{:.6}\n", s.level, s.mean_psnr, s.mean_ssim));
    }
    out
}

/// The hard-attention diagnostic: compute the level-3 hard map between LR
/// and Ref as usual, then transfer patches of the *original* reference image
/// (not its features) with overlap averaging. Output extents equal LR-up
/// extents.
pub fn transferred_image_viz<E: Element>(
    gen: &Generator<E>,
    lr: &ImageU8,
    reference: &ImageU8,
) -> Result<ImageU8> {
    let lr_t = lr.to_tensor01::<E>();
    let ref_t = reference.to_tensor01::<E>();
    let lr_up = bicubic_resize(&lr_t, 4.0)?;
    let ref_down_up = bicubic_resize(&bicubic_resize(&ref_t, 0.25)?, 4.0)?;

    let q = gen.transformer.lte.forward(&lr_up)?;
    let k = gen.transformer.lte.forward(&ref_down_up)?;
    let rel = relevance_embedding(&q.level3, &k.level3, PatchGeometry::new(3, 1, 1))?;
    let maps = attention_maps(&rel)?;

    // transfer raw reference pixels at the full-resolution geometry
    let geo = Scale::X4.transfer_geometry();
    let patches = unfold(&ref_t, geo)?;
    let selected = gather_columns(&patches, &maps.hard)?;
    let out = fold(
        &selected,
        (rel.q_grid.0 * 4, rel.q_grid.1 * 4),
        geo,
        true,
    )?;
    Ok(ImageU8::from_tensor01(&clamp01(&out)))
}

/// Float-precision variant of [`transferred_image_viz`] for tests that need
/// sub-quantization tolerances. Returns the `[1,3,H,W]` tensor in `[0,1]`.
pub fn transferred_image_tensor<E: Element>(
    gen: &Generator<E>,
    lr: &ImageU8,
    reference: &ImageU8,
) -> Result<Tensor<E>> {
    let lr_t = lr.to_tensor01::<E>();
    let ref_t = reference.to_tensor01::<E>();
    let lr_up = bicubic_resize(&lr_t, 4.0)?;
    let ref_down_up = bicubic_resize(&bicubic_resize(&ref_t, 0.25)?, 4.0)?;
    let q = gen.transformer.lte.forward(&lr_up)?;
    let k = gen.transformer.lte.forward(&ref_down_up)?;
    let rel = relevance_embedding(&q.level3, &k.level3, PatchGeometry::new(3, 1, 1))?;
    let maps = attention_maps(&rel)?;
    let geo = Scale::X4.transfer_geometry();
    let patches = unfold(&ref_t, geo)?;
    let selected = gather_columns(&patches, &maps.hard)?;
    fold(&selected, (rel.q_grid.0 * 4, rel.q_grid.1 * 4), geo, true)
}

fn clamp01<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    let data = t
        .to_vec()
        .iter()
        .map(|v| E::from_f64(v.into_f64().clamp(0.0, 1.0)))
        .collect();
    Tensor::new(t.shape(), data)
}

/// Build the synthetic eval items used by toy-scale relevance-level checks:
/// the ground-truth HR as the most relevant reference and an unrelated
/// texture as the least relevant one.
pub fn synthetic_eval_items(n: usize, extent: usize, seed: u64) -> DataResult<Vec<EvalItem>> {
    let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Eval);
    let mut items = Vec::new();
    for i in 0..n {
        let hr = crate::data::synthetic_texture(extent, &mut rng);
        let unrelated = crate::data::synthetic_texture(extent, &mut rng);
        items.push(EvalItem {
            id: format!("{i:03}"),
            refs: vec![("GT".to_string(), hr.clone()), ("unrelated".to_string(), unrelated)],
            hr,
        });
    }
    Ok(items)
}
