//! Paired datasets: synthesis to disk, loading, and training-patch sampling.
//!
//! A dataset root holds `degraded/NNNN.png`, `clean/NNNN.png` and a
//! `manifest.jsonl` with one [`ManifestEntry`] per pair.

pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;
pub use synth::{DegradationKind, DegradationSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// A degraded image and its clean target, both `[1, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: Tensor,
    pub clean: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub spec: DegradationSpec,
    pub degraded: PathBuf,
    pub clean: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }
}

/// Reads an 8-bit PNG as an RGB `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        f64::from(raw[(y * w + x) * 3 + c]) / 255.0
    }))
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let [n, c, h, w] = img.shape();
    ensure!(n == 1 && c == 3, Dimension, "PNG output needs one RGB image, got {:?}", img.shape());
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf[(y * w + x) * 3 + ch] = (img.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from the image");
    out.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    Procedural { height: usize, width: usize },
    /// PNG files of a directory, in name order, cycled if fewer than needed.
    Directory(PathBuf),
}

fn clean_images(source: &CleanSource) -> Result<Vec<PathBuf>> {
    let CleanSource::Directory(dir) = source else {
        return Ok(Vec::new());
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), Input, "no PNG files in {}", dir.display());
    Ok(files)
}

/// Writes `count` degraded/clean pairs under `out_dir`. Per-image seeds are
/// drawn from `seed`; each entry records its concrete degradation.
pub fn make_dataset(
    source: &CleanSource,
    kind: DegradationKind,
    out_dir: &Path,
    count: usize,
    seed: u64,
) -> Result<Manifest> {
    let files = clean_images(source)?;
    for sub in ["degraded", "clean"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::default();
    for index in 0..count {
        let image_seed = rng.next_u64();
        let mut image_rng = ChaCha8Rng::seed_from_u64(image_seed);
        let clean = match source {
            CleanSource::Procedural { height, width } => {
                synth::procedural_image(*height, *width, image_rng.random())
            }
            CleanSource::Directory(_) => read_png(&files[index % files.len()])?,
        };
        let clean = quantize(&clean);
        let spec = DegradationSpec::sample(kind, &mut image_rng);
        let degraded = spec.apply(&clean, image_rng.random())?;
        let name = format!("{index:04}.png");
        let entry = ManifestEntry {
            index,
            seed: image_seed,
            spec,
            degraded: Path::new("degraded").join(&name),
            clean: Path::new("clean").join(&name),
        };
        write_png(&out_dir.join(&entry.degraded), &degraded)?;
        write_png(&out_dir.join(&entry.clean), &clean)?;
        manifest.entries.push(entry);
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        let pairs = manifest
            .entries
            .iter()
            .map(|e| {
                let pair = Pair {
                    degraded: read_png(&root.join(&e.degraded))?,
                    clean: read_png(&root.join(&e.clean))?,
                };
                pair.degraded.expect_same_shape(&pair.clean, "image pair")?;
                Ok(pair)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { pairs })
    }

    /// Synthesizes pairs in memory, exactly as [`make_dataset`] would store
    /// them (8-bit quantized).
    pub fn synthesize(kind: DegradationKind, height: usize, width: usize, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..count)
            .map(|_| {
                let mut image_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
                let clean = quantize(&synth::procedural_image(height, width, image_rng.random()));
                let spec = DegradationSpec::sample(kind, &mut image_rng);
                let degraded = quantize(&spec.apply(&clean, image_rng.random())?);
                Ok(Pair { degraded, clean })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Crops the same `patch × patch` window from both images and flips both
/// horizontally with probability `hflip_prob`.
pub fn extract_patches<R: Rng + ?Sized>(pair: &Pair, patch: usize, hflip_prob: f64, rng: &mut R) -> Result<Pair> {
    pair.degraded.expect_same_shape(&pair.clean, "image pair")?;
    let [_, c, h, w] = pair.clean.shape();
    ensure!(
        patch >= 1 && patch <= h && patch <= w,
        Input,
        "patch {patch} does not fit a {h}×{w} image"
    );
    ensure!((0.0..=1.0).contains(&hflip_prob), Config, "flip probability must be in [0, 1]");
    let top = rng.random_range(0..=h - patch);
    let left = rng.random_range(0..=w - patch);
    let flip = rng.random_bool(hflip_prob);
    let crop = |img: &Tensor| {
        let out = Tensor::from_fn([1, c, patch, patch], |[_, ch, y, x]| img.at(0, ch, top + y, left + x));
        if flip {
            out.hflip()
        } else {
            out
        }
    };
    Ok(Pair {
        degraded: crop(&pair.degraded),
        clean: crop(&pair.clean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize, seed: u64) -> Pair {
        let clean = synth::procedural_image(h, w, seed);
        Pair {
            degraded: clean.map(|v| 1.0 - v),
            clean,
        }
    }

    #[test]
    fn no_flip_means_plain_crop() {
        let p = pair(12, 10, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = extract_patches(&p, 5, 0.0, &mut rng).unwrap();
            let found = (0..=7).any(|top| {
                (0..=5).any(|left| {
                    (0..5).all(|y| (0..5).all(|x| out.clean.at(0, 0, y, x) == p.clean.at(0, 0, top + y, left + x)))
                })
            });
            assert!(found);
        }
    }

    #[test]
    fn pair_alignment_survives_crop_and_flip() {
        let p = pair(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let out = extract_patches(&p, 7, 0.5, &mut rng).unwrap();
            assert_eq!(out.degraded, out.clean.map(|v| 1.0 - v));
        }
    }

    #[test]
    fn full_size_patch_with_certain_flip_is_a_mirror() {
        let p = pair(8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = extract_patches(&p, 8, 1.0, &mut rng).unwrap();
        assert_eq!(out.clean, p.clean.hflip());
        assert_eq!(out.clean.hflip(), p.clean);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let p = pair(8, 8, 6);
        assert!(extract_patches(&p, 9, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = quantize(&synth::procedural_image(9, 13, 7));
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = read_png(Path::new("/nonexistent/a.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.png"));
    }

    #[test]
    fn in_memory_synthesis_matches_disk() {
        let dir = tempfile::tempdir().unwrap();
        let source = CleanSource::Procedural { height: 12, width: 16 };
        let m = make_dataset(&source, DegradationKind::Haze, dir.path(), 3, 9).unwrap();
        assert_eq!(m.len(), 3);
        let disk = Dataset::load(dir.path()).unwrap();
        let memory = Dataset::synthesize(DegradationKind::Haze, 12, 16, 3, 9).unwrap();
        assert_eq!(disk, memory);
    }
}
