//! On-disk clip datasets: PNG frames and masks plus a JSON manifest.
//!
//! Layout:
//! ```text
//! <root>/manifest.json
//! <root>/<clip_id>/frame_<t>.png   8-bit RGB
//! <root>/<clip_id>/mask_<t>.png    8-bit grayscale, value = object label
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{ObjectMeta, SceneConfig, VideoClip};

pub const MANIFEST_FORMAT: &str = "steve-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClip {
    pub id: String,
    pub num_frames: usize,
    pub num_objects: usize,
    pub seed: u64,
    pub objects: Vec<ObjectMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub image_size: usize,
    pub seed: u64,
    pub scene: Option<SceneConfig>,
    pub clips: Vec<ManifestClip>,
}

/// Writes clips under `dir` (created if needed) and returns the manifest.
pub fn write_dataset(
    clips: &[VideoClip],
    dir: &Path,
    split: &str,
    scene: Option<&SceneConfig>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_size = clips.first().map(|c| c.image_size).unwrap_or(0);
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.image_size != image_size {
            return Err(Error::Dataset {
                context: clip.id.clone(),
                message: "clips in one dataset must share an image size".into(),
            });
        }
        let clip_dir = dir.join(&clip.id);
        fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
        let n = clip.image_size as u32;
        for t in 0..clip.num_frames {
            let rgb: Vec<u8> = clip.frame(t).iter().map(|&v| quantize(v)).collect();
            let path = clip_dir.join(format!("frame_{t}.png"));
            RgbImage::from_raw(n, n, rgb)
                .expect("buffer size matches")
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            let path = clip_dir.join(format!("mask_{t}.png"));
            GrayImage::from_raw(n, n, clip.label_frame(t).to_vec())
                .expect("buffer size matches")
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
        }
        entries.push(ManifestClip {
            id: clip.id.clone(),
            num_frames: clip.num_frames,
            num_objects: clip.num_objects(),
            seed: clip.seed,
            objects: clip.objects.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        split: split.into(),
        image_size,
        seed: scene.map(|s| s.seed).unwrap_or(0),
        scene: scene.cloned(),
        clips: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset {
        context: path.display().to_string(),
        message: format!("cannot read manifest: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        context: path.display().to_string(),
        message: format!("corrupt manifest: {e}"),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Dataset {
            context: path.display().to_string(),
            message: format!("unexpected format tag {:?}", manifest.format),
        });
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    let manifest = read_manifest(dir)?;
    manifest
        .clips
        .iter()
        .map(|entry| read_clip(dir, &manifest, entry))
        .collect()
}

fn read_clip(dir: &Path, manifest: &Manifest, entry: &ManifestClip) -> Result<VideoClip> {
    let err = |message: String| Error::Dataset {
        context: format!("clip {}", entry.id),
        message,
    };
    let n = manifest.image_size;
    let clip_dir: PathBuf = dir.join(&entry.id);
    let mut frames = Vec::with_capacity(entry.num_frames * n * n * 3);
    let mut labels = Vec::with_capacity(entry.num_frames * n * n);
    for t in 0..entry.num_frames {
        let path = clip_dir.join(format!("frame_{t}.png"));
        let img = image::open(&path)
            .map_err(|e| err(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if img.width() as usize != n || img.height() as usize != n {
            return Err(err(format!("{} is not {n}x{n}", path.display())));
        }
        frames.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
        let path = clip_dir.join(format!("mask_{t}.png"));
        let mask = image::open(&path)
            .map_err(|e| err(format!("{}: {e}", path.display())))?
            .to_luma8();
        if mask.width() as usize != n || mask.height() as usize != n {
            return Err(err(format!("{} is not {n}x{n}", path.display())));
        }
        labels.extend_from_slice(mask.as_raw());
    }
    Ok(VideoClip {
        id: entry.id.clone(),
        seed: entry.seed,
        image_size: n,
        num_frames: entry.num_frames,
        frames,
        labels,
        objects: entry.objects.clone(),
    })
}
