//! Segmentation of clips with a trained model and the evaluation protocols:
//! per-dataset FG-ARI reports, the past-frame sweep, the video-length sweep
//! and evaluation with extra slots on out-of-distribution clips.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, Upsample};
use crate::error::{Error, Result};
use crate::metrics;
use crate::mixture::{mask_segmentation, MixtureDecoder};
use crate::model::{clip_tensor, Steve};
use crate::ops;
use crate::slot_encoder::EncodedVideo;
use crate::synthgen::VideoClip;

/// Where predicted segments come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Final-iteration slot attention of the encoder, upsampled.
    Attention,
    /// Argmax of the masks of a mixture decoder applied to `s̃_t`.
    Decoding(&'a MixtureDecoder),
}

impl<'a> MaskSource<'a> {
    /// Attention for transformer models, the model's own decoding masks for mixture models.
    pub fn default_for(model: &'a Steve) -> Self {
        match (model.kind(), &model.mixture) {
            (DecoderKind::Mixture, Some(m)) => MaskSource::Decoding(m),
            _ => MaskSource::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub num_slots: usize,
    pub seed: u64,
    pub upsample: Upsample,
}

impl EvalSettings {
    pub fn for_model(model: &Steve) -> Self {
        Self {
            num_slots: model.cfg.encoder.num_slots,
            seed: model.cfg.eval.seed,
            upsample: model.cfg.eval.upsample,
        }
    }
}

/// Per-frame pixel labels for an encoded clip.
pub fn segment_encoded(model: &Steve, enc: &EncodedVideo, source: MaskSource, upsample: Upsample) -> Result<Vec<Vec<u32>>> {
    let size = model.cfg.data.image_size;
    let side = model.encoder.feature_side();
    let mut out = Vec::with_capacity(enc.attn.len());
    for t in 0..enc.attn.len() {
        match source {
            MaskSource::Attention => {
                let a = enc.attn[t].squeeze(0)?;
                let n = a.dim(0)?;
                let a = ops::to_vec_f32(&a)?;
                out.push(metrics::attention_to_segmentation(&a, n, side, size, upsample)?);
            }
            MaskSource::Decoding(dec) => {
                let slots = &enc.pre[t];
                let n = slots.dim(1)?;
                let masks = dec.forward(slots)?.masks.squeeze(0)?;
                out.push(mask_segmentation(&ops::to_vec_f32(&masks)?, n, size * size));
            }
        }
    }
    Ok(out)
}

fn truth_frames(clip: &VideoClip, start: usize, len: usize) -> Vec<Vec<u32>> {
    (start..start + len)
        .map(|t| clip.label_frame(t).iter().map(|&l| l as u32).collect())
        .collect()
}

/// Segments frames `[start, start+len)` of a clip, starting from fresh slots.
pub fn segment_window(
    model: &Steve,
    clip: &VideoClip,
    start: usize,
    len: usize,
    source: MaskSource,
    settings: EvalSettings,
) -> Result<Vec<Vec<u32>>> {
    let frames = clip_tensor(&[clip], start, len, model.dtype())?;
    let enc = model.encode_frames(&frames, settings.num_slots, settings.seed)?;
    segment_encoded(model, &enc, source, settings.upsample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    /// `null` for frames without foreground.
    pub image_fgari: Vec<Option<f64>>,
    pub video_fgari: Option<f64>,
}

pub type DatasetReport = BTreeMap<String, ClipReport>;

pub fn evaluate_clip(model: &Steve, clip: &VideoClip, source: MaskSource, settings: EvalSettings) -> Result<ClipReport> {
    let pred = segment_window(model, clip, 0, clip.num_frames, source, settings)?;
    let truth = truth_frames(clip, 0, clip.num_frames);
    Ok(ClipReport {
        image_fgari: metrics::fg_ari_frames(&pred, &truth)?,
        video_fgari: metrics::fg_ari_video(&pred, &truth)?,
    })
}

pub fn evaluate_dataset(model: &Steve, clips: &[VideoClip], source: MaskSource, settings: EvalSettings) -> Result<DatasetReport> {
    let reports: Vec<(String, ClipReport)> = clips
        .par_iter()
        .map(|c| evaluate_clip(model, c, source, settings).map(|r| (c.id.clone(), r)))
        .collect::<Result<_>>()?;
    Ok(reports.into_iter().collect())
}

/// Random-slot baseline scored like [`evaluate_dataset`].
pub fn random_baseline(clips: &[VideoClip], num_slots: usize, seed: u64) -> Result<DatasetReport> {
    use rand::SeedableRng;
    let mut out = DatasetReport::new();
    for (i, clip) in clips.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let hw = clip.image_size * clip.image_size;
        let pred: Vec<Vec<u32>> = (0..clip.num_frames)
            .map(|_| metrics::random_segmentation(hw, num_slots, &mut rng))
            .collect();
        let truth = truth_frames(clip, 0, clip.num_frames);
        out.insert(
            clip.id.clone(),
            ClipReport {
                image_fgari: metrics::fg_ari_frames(&pred, &truth)?,
                video_fgari: metrics::fg_ari_video(&pred, &truth)?,
            },
        );
    }
    Ok(out)
}

/// Dataset means over clips (each clip's image score is its frame mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    pub image_fgari: Option<f64>,
    pub video_fgari: Option<f64>,
}

pub fn aggregate(report: &DatasetReport) -> Aggregate {
    let image: Vec<Option<f64>> = report.values().map(|r| metrics::mean_defined(&r.image_fgari)).collect();
    let video: Vec<Option<f64>> = report.values().map(|r| r.video_fgari).collect();
    Aggregate {
        clips: report.len(),
        image_fgari: metrics::mean_defined(&image),
        video_fgari: metrics::mean_defined(&video),
    }
}

/// Image FG-ARI of frame `x_T` after the encoder has seen `k` earlier frames,
/// for each `k`. `T = max(k)`, so every `k` scores the same target frame.
pub fn past_frame_sweep(
    model: &Steve,
    clip: &VideoClip,
    ks: &[usize],
    source: MaskSource,
    settings: EvalSettings,
) -> Result<Vec<Option<f64>>> {
    let target = ks.iter().copied().max().unwrap_or(0);
    if target >= clip.num_frames {
        return Err(Error::shape(format!(
            "clip {} has {} frames, past-frame sweep needs {}",
            clip.id,
            clip.num_frames,
            target + 1
        )));
    }
    let truth = truth_frames(clip, target, 1).pop().expect("one frame");
    ks.iter()
        .map(|&k| {
            let pred = segment_window(model, clip, target - k, k + 1, source, settings)?;
            metrics::fg_ari(pred.last().expect("k + 1 frames"), &truth)
        })
        .collect()
}

/// Video FG-ARI over the first `L` frames for each requested length.
///
/// The encoder is causal, so one pass over `max(L)` frames serves every
/// prefix.
pub fn video_length_sweep(
    model: &Steve,
    clip: &VideoClip,
    lengths: &[usize],
    source: MaskSource,
    settings: EvalSettings,
) -> Result<Vec<Option<f64>>> {
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if longest > clip.num_frames || lengths.contains(&0) {
        return Err(Error::shape(format!(
            "clip {} has {} frames, video lengths {lengths:?} requested",
            clip.id, clip.num_frames
        )));
    }
    let pred = segment_window(model, clip, 0, longest, source, settings)?;
    let truth = truth_frames(clip, 0, longest);
    lengths
        .iter()
        .map(|&l| metrics::fg_ari_video(&pred[..l], &truth[..l]))
        .collect()
}

/// Standard evaluation with `extra` additional slots from the same prior.
pub fn ood_eval(model: &Steve, clips: &[VideoClip], extra: usize, source: MaskSource, settings: EvalSettings) -> Result<DatasetReport> {
    let settings = EvalSettings {
        num_slots: settings.num_slots + extra,
        ..settings
    };
    evaluate_dataset(model, clips, source, settings)
}

/// Extra slots for OOD evaluation: the configured value, or the gap between
/// the largest object count in `clips` and the training maximum.
pub fn ood_extra_slots(model: &Steve, clips: &[VideoClip]) -> usize {
    model.cfg.eval.ood_extra_slots.unwrap_or_else(|| {
        let most = clips.iter().map(|c| c.num_objects()).max().unwrap_or(0);
        most.saturating_sub(model.cfg.data.num_objects_max)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: usize,
    pub mean: Option<f64>,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub past_frames: Vec<SweepPoint>,
    pub video_lengths: Vec<SweepPoint>,
}

fn sweep_points(xs: &[usize], per_clip: &[Vec<Option<f64>>]) -> Vec<SweepPoint> {
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let col: Vec<Option<f64>> = per_clip.iter().map(|r| r[i]).collect();
            SweepPoint {
                x,
                mean: metrics::mean_defined(&col),
                clips: col.iter().flatten().count(),
            }
        })
        .collect()
}

/// Both sweeps over a dataset using the model's configured `k` and lengths.
pub fn sweeps(model: &Steve, clips: &[VideoClip], source: MaskSource, settings: EvalSettings) -> Result<SweepReport> {
    let ks = &model.cfg.eval.past_frames;
    let lengths = &model.cfg.eval.video_lengths;
    let past: Vec<Vec<Option<f64>>> = clips
        .par_iter()
        .map(|c| past_frame_sweep(model, c, ks, source, settings))
        .collect::<Result<_>>()?;
    let video: Vec<Vec<Option<f64>>> = clips
        .par_iter()
        .map(|c| video_length_sweep(model, c, lengths, source, settings))
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        past_frames: sweep_points(ks, &past),
        video_lengths: sweep_points(lengths, &video),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json` (clip id → scores) and the aggregate CSV next to it.
pub fn write_report(path: &Path, report: &DatasetReport) -> Result<()> {
    write_json(path, report)?;
    let agg = aggregate(report);
    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Dataset {
        context: csv_path.display().to_string(),
        message: e.to_string(),
    })?;
    w.write_record(["metric", "mean", "clips"])?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    w.write_record(["image_fgari", &fmt(agg.image_fgari), &agg.clips.to_string()])?;
    w.write_record(["video_fgari", &fmt(agg.video_fgari), &agg.clips.to_string()])?;
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn write_sweeps(path: &Path, sweeps: &SweepReport) -> Result<()> {
    write_json(path, sweeps)
}

/// Slots of every frame for visualisation: `(T, N, D)` pre-interaction.
pub fn clip_slots(model: &Steve, clip: &VideoClip, settings: EvalSettings) -> Result<(EncodedVideo, Tensor)> {
    let enc = model.encode_clip(clip, settings.num_slots, settings.seed)?;
    let slots = enc.pre_stacked()?;
    Ok((enc, slots))
}
