//! Image I/O and the paired dataset protocol.
//!
//! Images live on disk as 8-bit RGB PNG. In memory they move through
//! `[N, 3, H, W]` float tensors: `[0,1]` storage range, mapped to the
//! network range `[-1,1]` via `2x - 1` at ingestion.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::resize::bicubic_resize;
use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("decoding {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path}: extents {w}x{h} not divisible by 4")]
    Indivisible { path: PathBuf, w: usize, h: usize },
    #[error("dataset at {root}: input/{id}.png has no matching ref/{id}.png")]
    UnpairedInput { root: PathBuf, id: String },
    #[error("dataset at {root} is empty (no input/NNN.png files)")]
    Empty { root: PathBuf },
    #[error("tensor geometry: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, RGB interleaved
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3);
        ImageU8 {
            width,
            height,
            pixels,
        }
    }

    pub fn load(path: &Path) -> Result<ImageU8> {
        let img = image::open(path)
            .map_err(|e| DataError::Decode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        Ok(ImageU8 {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .expect("pixel buffer length");
        img.save(path).map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// `[1, 3, H, W]` tensor in `[0,1]`.
    pub fn to_tensor01<E: Element>(&self) -> Tensor<E> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![E::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] =
                        E::from_f64(self.pixels[(y * w + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        Tensor::new(&[1, 3, h, w], data)
    }

    /// `[1, 3, H, W]` tensor in the network range `[-1,1]`.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let t01 = self.to_tensor01::<E>();
        crate::tensor::ops::add_scalar(
            &crate::tensor::ops::mul_scalar(&t01, E::from_f64(2.0)),
            E::from_f64(-1.0),
        )
    }

    /// Quantize a `[1, 3, H, W]` tensor in `[0,1]` back to 8-bit with
    /// round-half-away-from-zero and clamping.
    pub fn from_tensor01<E: Element>(t: &Tensor<E>) -> ImageU8 {
        let s = t.shape();
        assert_eq!(s[0], 1);
        assert_eq!(s[1], 3);
        let (h, w) = (s[2], s[3]);
        let v = t.to_vec();
        let mut pixels = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    pixels[(y * w + x) * 3 + c] = quantize(v[(c * h + y) * w + x].into_f64());
                }
            }
        }
        ImageU8::new(w, h, pixels)
    }

    /// Quantize a network-range `[-1,1]` tensor.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> ImageU8 {
        let t01 = crate::tensor::ops::mul_scalar(
            &crate::tensor::ops::add_scalar(t, E::from_f64(1.0)),
            E::from_f64(0.5),
        );
        ImageU8::from_tensor01(&t01)
    }
}

/// Round-half-away-from-zero quantization of `[0,1]` to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    let scaled = v * 255.0;
    let r = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        (scaled - 0.5).ceil()
    };
    r.clamp(0.0, 255.0) as u8
}

/// Bicubic 4x downscale of an HR image, in `[0,1]` float space.
pub fn make_lr(hr: &ImageU8) -> Result<ImageU8> {
    if hr.width % 4 != 0 || hr.height % 4 != 0 {
        return Err(DataError::Indivisible {
            path: PathBuf::from("<memory>"),
            w: hr.width,
            h: hr.height,
        });
    }
    let t = hr.to_tensor01::<f32>();
    Ok(ImageU8::from_tensor01(&bicubic_resize(&t, 0.25)?))
}

/// One training pair, already in tensor form.
pub struct Pair<E: Element> {
    pub id: String,
    /// HR ground truth `[1,3,H,W]`, network range
    pub hr: Tensor<E>,
    /// reference `[1,3,H,W]`, network range
    pub reference: Tensor<E>,
}

/// Directory-backed dataset: `input/NNN.png` (HR ground truth) paired with
/// `ref/NNN.png`. The LR input is generated on the fly by bicubic 4x
/// downscale of the HR image.
pub struct PairedDataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
}

impl PairedDataset {
    pub fn open(root: &Path) -> Result<PairedDataset> {
        let input_dir = root.join("input");
        let mut ids = Vec::new();
        let entries = fs::read_dir(&input_dir).map_err(|e| DataError::Io {
            path: input_dir.clone(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| DataError::Io {
                path: input_dir.clone(),
                source: e,
            })?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".png") {
                if !root.join("ref").join(&name).exists() {
                    return Err(DataError::UnpairedInput {
                        root: root.to_path_buf(),
                        id: id.to_string(),
                    });
                }
                ids.push(id.to_string());
            }
        }
        if ids.is_empty() {
            return Err(DataError::Empty {
                root: root.to_path_buf(),
            });
        }
        ids.sort();
        Ok(PairedDataset {
            root: root.to_path_buf(),
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load_pair<E: Element>(&self, index: usize) -> Result<Pair<E>> {
        let id = &self.ids[index];
        let hr_img = self.load_checked(&self.root.join("input").join(format!("{id}.png")))?;
        let ref_img = self.load_checked(&self.root.join("ref").join(format!("{id}.png")))?;
        Ok(Pair {
            id: id.clone(),
            hr: hr_img.to_tensor(),
            reference: ref_img.to_tensor(),
        })
    }

    fn load_checked(&self, path: &Path) -> Result<ImageU8> {
        let img = ImageU8::load(path)?;
        if img.width % 4 != 0 || img.height % 4 != 0 {
            return Err(DataError::Indivisible {
                path: path.to_path_buf(),
                w: img.width,
                h: img.height,
            });
        }
        Ok(img)
    }
}

/// Deterministic synthetic texture image: a few seeded sinusoidal gratings
/// plus blocky tiles, structured enough that texture transfer has something
/// to find. Used by tests and the toy-overfit harness.
pub fn synthetic_texture(extent: usize, rng: &mut Rng) -> ImageU8 {
    let mut pixels = vec![0u8; extent * extent * 3];
    // random low-frequency gratings per channel
    let mut waves = Vec::new();
    for _ in 0..3 {
        waves.push((
            rng.random_range(0.5..3.0) * std::f64::consts::TAU / extent as f64,
            rng.random_range(0.5..3.0) * std::f64::consts::TAU / extent as f64,
            rng.random_range(0.0..std::f64::consts::TAU),
        ));
    }
    // tile grid parameters
    let tile = (extent / 4).max(2);
    let mut tile_shade = vec![0.0f64; 64];
    for s in tile_shade.iter_mut() {
        *s = rng.random_range(-0.3..0.3);
    }
    for y in 0..extent {
        for x in 0..extent {
            let t_idx = ((y / tile) * 8 + (x / tile)) % 64;
            for c in 0..3 {
                let (fx, fy, ph) = waves[c];
                let v = 0.5
                    + 0.35 * (fx * x as f64 + fy * y as f64 + ph).sin()
                    + tile_shade[t_idx];
                pixels[(y * extent + x) * 3 + c] = quantize(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageU8::new(extent, extent, pixels)
}

/// Write a toy dataset of `n` synthetic pairs under `root`. The reference of
/// each pair is a shifted crop of the same texture field, so it genuinely
/// contains the input's texture statistics.
pub fn write_synthetic_dataset(root: &Path, n: usize, extent: usize, rng: &mut Rng) -> Result<()> {
    let mk = |sub: &str| -> Result<PathBuf> {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| DataError::Io {
            path: d.clone(),
            source: e,
        })?;
        Ok(d)
    };
    let input = mk("input")?;
    let reference = mk("ref")?;
    for i in 0..n {
        let big = synthetic_texture(extent * 2, rng);
        let crop = |ox: usize, oy: usize| {
            let mut px = vec![0u8; extent * extent * 3];
            for y in 0..extent {
                let src = ((y + oy) * big.width + ox) * 3;
                px[y * extent * 3..(y + 1) * extent * 3]
                    .copy_from_slice(&big.pixels[src..src + extent * 3]);
            }
            ImageU8::new(extent, extent, px)
        };
        crop(0, 0).save(&input.join(format!("{i:03}.png")))?;
        crop(extent / 2, extent / 2).save(&reference.join(format!("{i:03}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Stream};

    #[test]
    fn quantization_round_trip_is_exact() {
        // every byte value survives u8 -> [0,1] -> u8
        let px: Vec<u8> = (0..=255u8).cycle().take(4 * 4 * 3).collect();
        let img = ImageU8::new(4, 4, px);
        let t = img.to_tensor01::<f32>();
        assert_eq!(ImageU8::from_tensor01(&t), img);
        // and through the network range too
        let tn = img.to_tensor::<f32>();
        assert_eq!(ImageU8::from_tensor(&tn), img);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.49 / 255.0), 1);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded(0, Stream::Data);
        let img = synthetic_texture(16, &mut rng);
        let path = dir.path().join("t.png");
        img.save(&path).unwrap();
        assert_eq!(ImageU8::load(&path).unwrap(), img);
    }

    #[test]
    fn make_lr_constant_and_extents() {
        let img = ImageU8::new(40, 40, vec![123; 40 * 40 * 3]);
        let lr = make_lr(&img).unwrap();
        assert_eq!((lr.width, lr.height), (10, 10));
        assert!(lr.pixels.iter().all(|p| *p == 123));
        // down-then-up of a constant stays constant
        let up = bicubic_resize(&lr.to_tensor01::<f32>(), 4.0).unwrap();
        let back = ImageU8::from_tensor01(&up);
        assert!(back.pixels.iter().all(|p| *p == 123));

        let odd = ImageU8::new(6, 6, vec![0; 6 * 6 * 3]);
        assert!(make_lr(&odd).is_err());
    }

    #[test]
    fn dataset_discovery_and_pairing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded(1, Stream::Data);
        write_synthetic_dataset(dir.path(), 3, 16, &mut rng).unwrap();
        let ds = PairedDataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.ids, vec!["000", "001", "002"]);
        let pair = ds.load_pair::<f32>(1).unwrap();
        assert_eq!(pair.hr.shape(), &[1, 3, 16, 16]);
        assert_eq!(pair.reference.shape(), &[1, 3, 16, 16]);
        // network range
        let v = pair.hr.to_vec();
        assert!(v.iter().all(|x| *x >= -1.0 && *x <= 1.0));

        // remove one ref -> unpaired error
        fs::remove_file(dir.path().join("ref/001.png")).unwrap();
        assert!(matches!(
            PairedDataset::open(dir.path()),
            Err(DataError::UnpairedInput { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("input")).unwrap();
        fs::create_dir_all(dir.path().join("ref")).unwrap();
        assert!(matches!(
            PairedDataset::open(dir.path()),
            Err(DataError::Empty { .. })
        ));
    }
}
