//! Segmentation strips (PNG) and sweep plots (SVG).
//!
//! Each strip has one column per frame and rows, top to bottom: input frames,
//! true masks, attention segmentation, decoding-mask segmentation,
//! reconstruction, then one attention map per slot. A JSON sidecar names the
//! rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;
use image::{Rgb, RgbImage};
use serde_json::json;

use steve::config::Upsample;
use steve::eval::{self, EvalSettings, MaskSource, SweepPoint};
use steve::metrics;
use steve::model::{clip_tensor, Steve};
use steve::ops;
use steve::synthgen::VideoClip;
use steve::train::load_model;
use steve::{dataset, Error};

use crate::commands::{load_diagnostic, CliError};

pub struct Options {
    pub clips: usize,
    pub frames: usize,
    pub plot_clips: usize,
    pub scale: u32,
}

const GAP: u32 = 2;

const PALETTE: [[u8; 3]; 12] = [
    [20, 20, 20],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

fn colour(label: u32) -> [u8; 3] {
    PALETTE[label as usize % PALETTE.len()]
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One tile: `size × size` RGB pixels, row-major.
type Tile = Vec<[u8; 3]>;

fn rgb_tile(chw: &[f32], size: usize) -> Tile {
    let hw = size * size;
    (0..hw)
        .map(|p| std::array::from_fn(|c| (chw[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

fn grey_tile(values: &[f32]) -> Tile {
    values
        .iter()
        .map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect()
}

fn label_tile(labels: &[u32]) -> Tile {
    labels.iter().map(|&l| colour(l)).collect()
}

pub struct Strip {
    pub names: Vec<String>,
    pub rows: Vec<Vec<Tile>>,
}

/// Builds the rows of a strip for the first `frames` frames of `clip`.
pub fn strip(model: &Steve, decoding: Option<MaskSource>, clip: &VideoClip, frames: usize) -> Result<Strip, CliError> {
    let t_len = frames.min(clip.num_frames);
    let size = clip.image_size;
    let settings = EvalSettings::for_model(model);
    let x = clip_tensor(&[clip], 0, t_len, model.dtype())?;
    let enc = model.encode_frames(&x, settings.num_slots, settings.seed)?;
    let mut names = Vec::new();
    let mut rows = Vec::new();

    let x_host = ops::to_vec_f32(&x)?;
    let per = 3 * size * size;
    names.push("frames".to_string());
    rows.push((0..t_len).map(|t| rgb_tile(&x_host[t * per..(t + 1) * per], size)).collect());

    names.push("true_masks".to_string());
    rows.push(
        (0..t_len)
            .map(|t| label_tile(&clip.label_frame(t).iter().map(|&l| l as u32).collect::<Vec<_>>()))
            .collect(),
    );

    names.push("attention_segmentation".to_string());
    let att = eval::segment_encoded(model, &enc, MaskSource::Attention, settings.upsample)?;
    rows.push(att.iter().map(|s| label_tile(s)).collect());

    names.push("decoding_segmentation".to_string());
    match decoding {
        Some(src) => {
            let dec = eval::segment_encoded(model, &enc, src, settings.upsample)?;
            rows.push(dec.iter().map(|s| label_tile(s)).collect());
        }
        // no decoder to read masks from: a neutral placeholder keeps the layout fixed
        None => rows.push(vec![vec![[128, 128, 128]; size * size]; t_len]),
    }

    names.push("reconstruction".to_string());
    let mut recon = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let r = model.reconstruct(&enc.pre[t])?;
        recon.push(rgb_tile(&ops::to_vec_f32(&r)?, size));
    }
    rows.push(recon);

    let side = model.encoder.feature_side();
    let n = settings.num_slots;
    let maps: Vec<Vec<f32>> = enc
        .attn
        .iter()
        .map(|a| ops::to_vec_f32(a))
        .collect::<steve::Result<_>>()?;
    for slot in 0..n {
        names.push(format!("slot_{slot}"));
        rows.push(
            maps.iter()
                .map(|a| {
                    let m = &a[slot * side * side..(slot + 1) * side * side];
                    grey_tile(&metrics::resize(m, side, side, size, size, Upsample::Bilinear))
                })
                .collect(),
        );
    }
    Ok(Strip { names, rows })
}

pub fn render(strip: &Strip, size: usize, scale: u32) -> RgbImage {
    let tile = size as u32 * scale;
    let cols = strip.rows.first().map_or(0, |r| r.len()) as u32;
    let nrows = strip.rows.len() as u32;
    let width = cols * tile + (cols + 1) * GAP;
    let height = nrows * tile + (nrows + 1) * GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in strip.rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let x0 = GAP + c as u32 * (tile + GAP);
            let y0 = GAP + r as u32 * (tile + GAP);
            for y in 0..tile {
                for x in 0..tile {
                    let p = t[(y / scale) as usize * size + (x / scale) as usize];
                    img.put_pixel(x0 + x, y0 + y, Rgb(p));
                }
            }
        }
    }
    img
}

/// Minimal line plot with axes, ticks at the data points and a y range of [0, 1].
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, points: &[SweepPoint]) -> String {
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 60.0, 20.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs: Vec<f64> = points.iter().map(|p| p.x as f64).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| left + (x - xmin) / span * pw;
    let py = |y: f64| top + (1.0 - y.clamp(-0.1, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{tick}" y1="{yp}" x2="{left}" y2="{yp}" stroke="black"/><text x="{lab}" y="{ty}" text-anchor="end">{y:.2}</text><line x1="{left}" y1="{yp}" x2="{right_edge}" y2="{yp}" stroke="#ddd"/>"##,
            tick = left - 4.0,
            lab = left - 6.0,
            yp = py(y),
            ty = py(y) + 4.0,
            right_edge = left + pw
        );
    }
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            top + ph + 16.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{ylabel}</text>"#,
        top + ph / 2.0
    );
    let defined: Vec<(f64, f64)> = points.iter().filter_map(|p| p.mean.map(|m| (px(p.x as f64), py(m)))).collect();
    if !defined.is_empty() {
        let path: Vec<String> = defined.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#0072b2" stroke-width="2"/>"##, path.join(" "));
        for (x, y) in &defined {
            let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="#0072b2"/>"##);
        }
    }
    s.push_str("</svg>\n");
    s
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

/// Sweep curves restricted to settings the clips are long enough for.
fn plots(model: &Steve, source: MaskSource, clips: &[VideoClip], out: &Path) -> Result<(), CliError> {
    let settings = EvalSettings::for_model(model);
    let shortest = clips.iter().map(|c| c.num_frames).min().unwrap_or(0);
    let ks: Vec<usize> = model.cfg.eval.past_frames.iter().copied().filter(|&k| k < shortest).collect();
    let lengths: Vec<usize> = model
        .cfg
        .eval
        .video_lengths
        .iter()
        .copied()
        .filter(|&l| l <= shortest)
        .collect();
    let past = clips
        .iter()
        .map(|c| eval::past_frame_sweep(model, c, &ks, source, settings))
        .collect::<steve::Result<Vec<_>>>()?;
    let video = clips
        .iter()
        .map(|c| eval::video_length_sweep(model, c, &lengths, source, settings))
        .collect::<steve::Result<Vec<_>>>()?;
    let past = sweep_points(&ks, &past);
    let video = sweep_points(&lengths, &video);
    let svg = line_plot_svg("Image FG-ARI vs past frames", "past frames seen", "Image FG-ARI", &past);
    let p = out.join("past_frames.svg");
    fs::write(&p, svg).map_err(io(&p))?;
    let svg = line_plot_svg("Video FG-ARI vs video length", "video length", "Video FG-ARI", &video);
    let p = out.join("video_length.svg");
    fs::write(&p, svg).map_err(io(&p))?;
    let p = out.join("sweeps.json");
    let text = serde_json::to_string_pretty(&json!({"past_frames": past, "video_lengths": video})).map_err(Error::from)?;
    fs::write(&p, text).map_err(io(&p))?;
    Ok(())
}

pub fn run(checkpoint: &Path, diagnostic: Option<&Path>, data: &Path, out: &Path, opts: &Options) -> Result<(), CliError> {
    if opts.scale == 0 || opts.frames == 0 {
        return Err(CliError::Config("--scale and --frames must be positive".into()));
    }
    let model = load_model(checkpoint, DType::F32)?;
    let clips = dataset::read_dataset(data)?;
    if let Some(c) = clips.iter().find(|c| c.image_size != model.cfg.data.image_size) {
        return Err(CliError::Config(format!(
            "{}: clip {} is {}px, model expects {}px",
            data.display(),
            c.id,
            c.image_size,
            model.cfg.data.image_size
        )));
    }
    let diag = diagnostic.map(load_diagnostic).transpose()?;
    let decoding = match &diag {
        Some(d) => Some(MaskSource::Decoding(&d.decoder)),
        None => model.mixture.as_ref().map(MaskSource::Decoding),
    };
    for clip in clips.iter().take(opts.clips) {
        let s = strip(&model, decoding, clip, opts.frames)?;
        let img = render(&s, clip.image_size, opts.scale);
        let p = out.join(format!("strip_{}.png", clip.id));
        img.save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        let meta = json!({
            "clip": clip.id,
            "frames": s.rows[0].len(),
            "tile": clip.image_size as u32 * opts.scale,
            "gap": GAP,
            "rows": s.names,
            "decoding_masks": decoding.is_some(),
        });
        let p = out.join(format!("strip_{}.json", clip.id));
        fs::write(&p, serde_json::to_string_pretty(&meta).map_err(Error::from)?).map_err(io(&p))?;
    }
    if opts.plot_clips > 0 {
        let plot_clips = &clips[..opts.plot_clips.min(clips.len())];
        plots(&model, MaskSource::default_for(&model), plot_clips, out)?;
    }
    Ok(())
}
