//! Foreground ARI for single frames and whole videos, and conversion of slot
//! attention maps into pixel segmentations.
//!
//! Scores are computed only over pixels whose ground-truth label is nonzero.
//! A frame (or video) without foreground has no score: the functions return
//! `None` and callers skip it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Upsample;
use crate::error::{Error, Result};

/// Adjusted Rand index between two labelings of the same items.
///
/// Uses integer contingency counts, so a single-cluster prediction scores
/// exactly 0. When the denominator vanishes (both partitions trivial) the
/// score is 1 if the partitions coincide and 0 otherwise.
pub fn ari(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "ari: {} predicted vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as i128;
    if n == 0 {
        return Err(Error::shape("ari of an empty labeling"));
    }
    let (pi, p_count) = compact(pred);
    let (ti, t_count) = compact(truth);
    let mut table = vec![0i128; p_count * t_count];
    for (&p, &t) in pi.iter().zip(&ti) {
        table[p * t_count + t] += 1;
    }
    let pairs = |x: i128| x * (x - 1) / 2;
    let index: i128 = table.iter().map(|&c| pairs(c)).sum();
    let a: i128 = (0..p_count)
        .map(|i| pairs(table[i * t_count..(i + 1) * t_count].iter().sum()))
        .sum();
    let b: i128 = (0..t_count)
        .map(|j| pairs((0..p_count).map(|i| table[i * t_count + j]).sum()))
        .sum();
    let total = pairs(n);
    // (index - a·b/total) / ((a + b)/2 - a·b/total), scaled by 2·total
    let num = 2 * index * total - 2 * a * b;
    let den = (a + b) * total - 2 * a * b;
    if den == 0 {
        return Ok(if same_partition(&pi, &ti) { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

/// Relabels to dense ids `0..k` in order of first appearance.
fn compact(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    // both are first-appearance compacted, so equal partitions are equal vectors
    a == b
}

/// ARI restricted to pixels with `truth != 0`; `None` when there are none.
pub fn fg_ari(pred: &[u32], truth: &[u32]) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "fg_ari: {} predicted vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let (p, t): (Vec<u32>, Vec<u32>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != 0)
        .map(|(&p, &t)| (p, t))
        .unzip();
    if t.is_empty() {
        return Ok(None);
    }
    ari(&p, &t).map(Some)
}

/// Video FG-ARI: all frames pooled so each label is one cluster through time.
pub fn fg_ari_video(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<Option<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "fg_ari_video: {} predicted vs {} true frames",
            pred.len(),
            truth.len()
        )));
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::shape("fg_ari_video: frame sizes differ"));
        }
    }
    let p: Vec<u32> = pred.iter().flatten().copied().collect();
    let t: Vec<u32> = truth.iter().flatten().copied().collect();
    fg_ari(&p, &t)
}

/// Per-frame image FG-ARI; frames without foreground are `None`.
pub fn fg_ari_frames(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("fg_ari_frames: frame counts differ"));
    }
    pred.iter().zip(truth).map(|(p, t)| fg_ari(p, t)).collect()
}

/// Mean of the defined entries, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Resizes one channel `(in_h, in_w)` to `(out_h, out_w)`.
///
/// Bilinear uses half-pixel centres with edge clamping; nearest picks
/// `floor(dst · in / out)`.
pub fn resize(src: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize, mode: Upsample) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    match mode {
        Upsample::Nearest => {
            for y in 0..out_h {
                let sy = y * in_h / out_h;
                for x in 0..out_w {
                    out[y * out_w + x] = src[sy * in_w + x * in_w / out_w];
                }
            }
        }
        Upsample::Bilinear => {
            let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
                let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            };
            let xs: Vec<_> = (0..out_w).map(|x| axis(x, in_w, out_w)).collect();
            for y in 0..out_h {
                let (y0, y1, ly) = axis(y, in_h, out_h);
                for (x, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let at = |yy: usize, xx: usize| src[yy * in_w + xx] as f64;
                    let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                    let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                    out[y * out_w + x] = (top * (1.0 - ly) + bottom * ly) as f32;
                }
            }
        }
    }
    out
}

/// Pixel labels from one frame's attention `(N, h·w)`: each slot map is
/// upsampled to `out × out` and every pixel takes the argmax slot (lowest
/// index wins ties).
pub fn attention_to_segmentation(attn: &[f32], num_slots: usize, side: usize, out: usize, mode: Upsample) -> Result<Vec<u32>> {
    if attn.len() != num_slots * side * side {
        return Err(Error::shape(format!(
            "attention of length {} is not {num_slots} x {side}²",
            attn.len()
        )));
    }
    let hw = side * side;
    let maps: Vec<Vec<f32>> = (0..num_slots)
        .map(|n| resize(&attn[n * hw..(n + 1) * hw], side, side, out, out, mode))
        .collect();
    Ok((0..out * out)
        .map(|p| {
            let mut best = 0;
            for n in 1..num_slots {
                if maps[n][p] > maps[best][p] {
                    best = n;
                }
            }
            best as u32
        })
        .collect())
}

/// Random-slot baseline: every pixel independently uniform over `num_slots`.
pub fn random_segmentation(pixels: usize, num_slots: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..pixels).map(|_| rng.gen_range(0..num_slots as u32)).collect()
}
