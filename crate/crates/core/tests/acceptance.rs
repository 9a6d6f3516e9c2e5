//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 9 trains nine models and dominates the runtime. Set
//! `STEVE_ACCEPTANCE_SKIP_TRAINING=1` to report it as skipped (which counts as
//! a failure) while iterating on the others.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steve::config::{Conditioning, DecoderConfig, DecoderKind, DvaeConfig, RunConfig, Split, TrainConfig};
use steve::decoder::{cross_entropy_loss, SlotTransformerDecoder};
use steve::diagnostic::train_diagnostic;
use steve::dvae::{self, gumbel_noise, gumbel_softmax, gumbel_softmax_grid, token_count, Dvae};
use steve::eval::{self, EvalSettings, MaskSource};
use steve::experiment::{self, ExperimentConfig, Variant};
use steve::metrics::fg_ari;
use steve::model::{LossOptions, Steve};
use steve::nn::ForwardCtx;
use steve::ops;
use steve::params::ParamStore;
use steve::schedule::{LrSchedule, TemperatureSchedule};
use steve::synthgen::generate_clips;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// A small f64 model on 32×32 frames.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let d = &mut cfg.data;
    d.image_size = 32;
    d.object_size_min = 4;
    d.object_size_max = 8;
    d.texture_period_min = 2;
    d.texture_period_max = 4;
    d.ood_texture_period_min = 5;
    d.ood_texture_period_max = 7;
    cfg.dvae.vocab_size = 16;
    cfg.dvae.hidden = 8;
    let e = &mut cfg.encoder;
    e.num_slots = 4;
    e.slot_dim = 16;
    e.mlp_hidden = 16;
    e.cnn_channels = 8;
    e.cnn_first_stride = 2;
    cfg.decoder.hidden = 16;
    cfg.decoder.blocks = 1;
    cfg.decoder.heads = 2;
    cfg.decoder.mixture.grid = Some(8);
    cfg.decoder.mixture.channels = 8;
    cfg.decoder.mixture.kernel = 3;
    cfg.train.batch_size = 2;
    cfg
}

fn random_frames(b: usize, t: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * t * 3 * size * size).map(|_| rng.gen()).collect();
    Tensor::from_vec(v, (b, t, 3, size, size), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    let a = ops::to_vec_f64(a).map_err(e2s)?;
    let b = ops::to_vec_f64(b).map_err(e2s)?;
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

// ---------------------------------------------------------------- 1

/// Pair-counting ARI over foreground pixels.
fn oracle_fg_ari(pred: &[u32], truth: &[u32]) -> Option<f64> {
    let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != 0).collect();
    if idx.is_empty() {
        return None;
    }
    let (mut n11, mut n10, mut n01, mut n00) = (0f64, 0f64, 0f64, 0f64);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0.0 {
        // only reachable when both partitions are all-one-cluster or all-singletons
        return Some(if n10 == 0.0 && n01 == 0.0 { 1.0 } else { 0.0 });
    }
    Some(2.0 * (n00 * n11 - n01 * n10) / den)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=64);
        let kt = rng.gen_range(1..=4u32);
        let kp = rng.gen_range(1..=4u32);
        let truth: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=kt)).collect();
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..kp)).collect();
        let got = fg_ari(&pred, &truth).map_err(e2s)?;
        let want = oracle_fg_ari(&pred, &truth);
        match (got, want) {
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (None, None) => {}
            other => return Err(format!("defined-ness differs: {other:?}")),
        }
    }
    ensure(worst <= 1e-9, format!("max deviation from oracle {worst:e}"))?;
    let truth = [1u32, 1, 2, 2, 3, 3, 0, 0];
    let same = fg_ari(&[5, 5, 7, 7, 1, 1, 9, 4], &truth).map_err(e2s)?;
    ensure(same == Some(1.0), format!("identical partitions scored {same:?}"))?;
    let single = fg_ari(&[0; 8], &truth).map_err(e2s)?;
    ensure(single == Some(0.0), format!("single cluster scored {single:?}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("100 instances, max |diff| {worst:.1e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let cfg = tiny_config();
    let model = Steve::new(&cfg, DType::F64).map_err(e2s)?;
    let frames = random_frames(2, 3, 32, 2);
    let enc = model.encode_frames(&frames, 4, 7).map_err(e2s)?;
    let mut worst_attn = 0.0f64;
    let mut checked = 0;
    for iters in &enc.attn_iters {
        for a in iters {
            let sums = ops::to_vec_f64(&a.sum(1).map_err(e2s)?).map_err(e2s)?;
            for s in sums {
                worst_attn = worst_attn.max((s - 1.0).abs());
                checked += 1;
            }
        }
    }
    ensure(worst_attn <= 1e-5, format!("attention column sum off by {worst_attn:e}"))?;

    let mut mcfg = cfg.clone();
    mcfg.decoder.kind = DecoderKind::Mixture;
    let mix = Steve::new(&mcfg, DType::F64).map_err(e2s)?;
    let slots = mix.encode_frames(&frames, 4, 7).map_err(e2s)?.pre_stacked().map_err(e2s)?;
    let out = mix.mixture.as_ref().unwrap().forward(&slots).map_err(e2s)?;
    let mask_worst = ops::to_vec_f64(&out.masks.sum(1).map_err(e2s)?)
        .map_err(e2s)?
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(mask_worst <= 1e-5, format!("mixture mask sum off by {mask_worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, v, h, w) = (3, 16, 4, 4);
    let logits = ops::from_f64(gumbel_noise(b * v * h * w, &mut rng), &[b, v, h, w], DType::F64).map_err(e2s)?;
    let noise = ops::from_f64(gumbel_noise(b * v * h * w, &mut rng), &[b, v, h, w], DType::F64).map_err(e2s)?;
    let mut gumbel_worst = 0.0f64;
    for tau in [0.1, 0.5, 1.0] {
        let soft = gumbel_softmax_grid(&logits, Some(&noise), tau, false).map_err(e2s)?;
        for s in ops::to_vec_f64(&soft.sum(1).map_err(e2s)?).map_err(e2s)? {
            gumbel_worst = gumbel_worst.max((s - 1.0).abs());
        }
        let hard = gumbel_softmax_grid(&logits, Some(&noise), tau, true).map_err(e2s)?;
        let cells = ops::to_vec_f64(&hard.permute((0, 2, 3, 1)).map_err(e2s)?).map_err(e2s)?;
        for cell in cells.chunks(v) {
            let ones = cell.iter().filter(|&&x| x == 1.0).count();
            let zeros = cell.iter().filter(|&&x| x == 0.0).count();
            ensure(ones == 1 && zeros == v - 1, "hard Gumbel-Softmax is not an exact one-hot")?;
        }
        for _ in 0..20 {
            let l: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let g = gumbel_noise(v, &mut rng);
            let s = gumbel_softmax(&l, tau, false, Some(&g)).map_err(e2s)?;
            gumbel_worst = gumbel_worst.max((s.output.iter().sum::<f64>() - 1.0).abs());
            let hs = gumbel_softmax(&l, tau, true, Some(&g)).map_err(e2s)?;
            ensure(
                hs.output.iter().filter(|&&x| x == 1.0).count() == 1 && hs.output.iter().filter(|&&x| x == 0.0).count() == v - 1,
                "scalar hard Gumbel-Softmax is not an exact one-hot",
            )?;
        }
    }
    ensure(gumbel_worst <= 1e-6, format!("Gumbel row sum off by {gumbel_worst:e}"))?;
    Ok(format!(
        "{checked} attention columns (max err {worst_attn:.1e}), mixture masks {mask_worst:.1e}, Gumbel rows {gumbel_worst:.1e}, hard one-hot exact"
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let cfg = tiny_config();
    let model = Steve::new(&cfg, DType::F64).map_err(e2s)?;
    let frames = random_frames(1, 3, 32, 4);
    let perm_idx = [2u32, 0, 3, 1];
    let perm = Tensor::new(&perm_idx, &Device::Cpu).map_err(e2s)?;
    let inputs = model.eval_inputs(1, 4, 11).map_err(e2s)?;
    let noise = inputs.init_noise.clone();
    let a = model.loss(&frames, inputs, LossOptions::default()).map_err(e2s)?;
    let mut inputs = model.eval_inputs(1, 4, 11).map_err(e2s)?;
    inputs.init_noise = noise.index_select(&perm, 1).map_err(e2s)?;
    let b = model.loss(&frames, inputs, LossOptions::default()).map_err(e2s)?;
    let mut worst = 0.0f64;
    for t in 0..3 {
        for (x, y) in [(&a.encoded.pre[t], &b.encoded.pre[t]), (&a.encoded.post[t], &b.encoded.post[t]), (&a.encoded.attn[t], &b.encoded.attn[t])] {
            worst = worst.max(max_abs_diff(&x.index_select(&perm, 1).map_err(e2s)?, y)?);
        }
    }
    ensure(worst <= 1e-5, format!("slot/attention permutation error {worst:e}"))?;
    let (ta, tb) = (a.total_value().map_err(e2s)?, b.total_value().map_err(e2s)?);
    let loss_diff = (a.ce - b.ce).abs().max((a.dvae - b.dvae).abs()).max((ta - tb).abs());
    ensure(loss_diff <= 1e-5, format!("loss changed by {loss_diff:e}"))?;

    let mut mcfg = cfg;
    mcfg.decoder.kind = DecoderKind::Mixture;
    let mix = Steve::new(&mcfg, DType::F64).map_err(e2s)?;
    let slots = mix.encode_frames(&frames, 4, 5).map_err(e2s)?.pre_stacked().map_err(e2s)?;
    let dec = mix.mixture.as_ref().unwrap();
    let c1 = dec.forward(&slots).map_err(e2s)?.composite;
    let c2 = dec.forward(&slots.index_select(&perm, 1).map_err(e2s)?).map_err(e2s)?.composite;
    let comp = max_abs_diff(&c1, &c2)?;
    ensure(comp <= 1e-5, format!("mixture composite changed by {comp:e}"))?;
    Ok(format!("slots/attention {worst:.1e}, losses {loss_diff:.1e}, composite {comp:.1e}"))
}

// ---------------------------------------------------------------- 4

fn tiny_decoder(seed: u64, vocab: usize, seq_len: usize, cond: Conditioning) -> (ParamStore, SlotTransformerDecoder) {
    let mut ps = ParamStore::new(seed, DType::F64);
    let cfg = DecoderConfig {
        kind: DecoderKind::Transformer,
        conditioning: cond,
        blocks: 2,
        heads: 2,
        hidden: 16,
        dropout: 0.1,
        ..DecoderConfig::default()
    };
    let d = SlotTransformerDecoder::new(&mut ps, &cfg, 8, vocab, seq_len).unwrap();
    (ps, d)
}

fn random_slots(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (b, n, d), &Device::Cpu).unwrap()
}

fn criterion_4() -> Outcome {
    let l = 16;
    let v = 12;
    let mut checks = 0;
    for cond in [Conditioning::CrossAttention, Conditioning::Prefix] {
        let (_, dec) = tiny_decoder(9, v, l, cond);
        let slots = random_slots(1, 3, 8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base: Vec<u32> = (0..l).map(|_| rng.gen_range(0..v as u32)).collect();
        let logits = |toks: &Vec<u32>| -> Result<Vec<f64>, String> {
            let o = dec.decode_logits(&slots, &[toks.clone()], &mut ForwardCtx::eval()).map_err(e2s)?;
            ops::to_vec_f64(&o).map_err(e2s)
        };
        let o0 = logits(&base)?;
        for l0 in 0..l {
            let mut z = base.clone();
            z[l0] = (z[l0] + 1 + rng.gen_range(0..v as u32 - 1)) % v as u32;
            let o1 = logits(&z)?;
            if o0[..(l0 + 1) * v] != o1[..(l0 + 1) * v] {
                return Err(format!("{cond:?}: perturbing token {l0} changed a logit at a position <= {l0}"));
            }
            checks += 1;
        }
    }
    Ok(format!("L=16, {checks} perturbations, both conditioning modes, bitwise equal"))
}

// ---------------------------------------------------------------- 5

/// Central-difference check of `loss` w.r.t. chosen scalar entries of `vars`.
/// Returns the worst relative error.
fn gradcheck(loss: &dyn Fn() -> Tensor, vars: &[(&str, &Var)], picks: &[(usize, usize)]) -> Result<f64, String> {
    let l = loss();
    let grads = l.backward().map_err(e2s)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &(vi, ei) in picks {
        let (name, var) = vars[vi];
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => ops::to_vec_f64(g).map_err(e2s)?[ei],
            None => 0.0,
        };
        let orig = ops::to_vec_f64(var.as_tensor()).map_err(e2s)?;
        let shape = var.dims().to_vec();
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut v = orig.clone();
            v[ei] += delta;
            var.set(&ops::from_f64(v, &shape, DType::F64).map_err(e2s)?).map_err(e2s)?;
            ops::scalar_f64(&loss()).map_err(e2s)
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        var.set(&ops::from_f64(orig, &shape, DType::F64).map_err(e2s)?).map_err(e2s)?;
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { 0.0 } else { (analytic - numeric).abs() / scale };
        if rel > worst {
            worst = rel;
        }
        if rel >= 1e-3 {
            return Err(format!("{name}[{ei}]: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    Ok(worst)
}

/// Zero-initialised biases put ReLU inputs exactly on the kink wherever a
/// whole receptive field is dead; finite differences are meaningless there.
/// Offsetting every bias moves the check to a generic point.
fn jitter_biases(ps: &ParamStore, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for (name, var) in ps.iter() {
        if name.ends_with(".bias") {
            let v: Vec<f64> = (0..var.elem_count()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            var.set(&ops::from_f64(v, var.dims(), DType::F64).map_err(e2s)?).map_err(e2s)?;
        }
    }
    Ok(())
}

/// `count` random (parameter, element) picks weighted by parameter size.
fn sample_picks(vars: &[(&str, &Var)], count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    (0..count)
        .map(|_| {
            let mut r = rng.gen_range(0..total);
            let mut vi = 0;
            while r >= sizes[vi] {
                r -= sizes[vi];
                vi += 1;
            }
            (vi, r)
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // (a) L_CE w.r.t. slots and decoder parameters, L = 8, |V| = 16, hidden 16
    let (ps, dec) = tiny_decoder(21, 16, 8, Conditioning::CrossAttention);
    jitter_biases(&ps, &mut rng)?;
    let slots = Var::from_tensor(&random_slots(2, 3, 8, 22)).map_err(e2s)?;
    let targets: Vec<Vec<u32>> = (0..2).map(|_| (0..8).map(|_| rng.gen_range(0..16)).collect()).collect();
    let ce = || {
        let logits = dec.decode_logits(slots.as_tensor(), &targets, &mut ForwardCtx::eval()).unwrap();
        cross_entropy_loss(&logits, &targets, 2).unwrap()
    };
    let slot_vars = [("slots", &slots)];
    let slot_picks: Vec<(usize, usize)> = (0..slots.elem_count()).map(|i| (0, i)).collect();
    let a_slots = gradcheck(&ce, &slot_vars, &slot_picks)?;
    let dec_vars: Vec<(&str, &Var)> = ps.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let picks = sample_picks(&dec_vars, 20, &mut rng);
    let a_params = gradcheck(&ce, &dec_vars, &picks)?;

    // (b) L_dVAE w.r.t. dVAE parameters through the soft Gumbel path
    let mut dps = ParamStore::new(23, DType::F64);
    let dcfg = DvaeConfig {
        patch_size: 4,
        vocab_size: 16,
        hidden: 8,
        ..DvaeConfig::default()
    };
    let dv = Dvae::new(&mut dps, &dcfg).map_err(e2s)?;
    jitter_biases(&dps, &mut rng)?;
    let x = random_frames(1, 2, 8, 24).reshape((2, 3, 8, 8)).map_err(e2s)?;
    let noise = ops::from_f64(gumbel_noise(2 * 16 * 4, &mut rng), &[2, 16, 2, 2], DType::F64).map_err(e2s)?;
    let l_dvae = || {
        let z = gumbel_softmax_grid(&dv.encode(&x).unwrap(), Some(&noise), 0.7, false).unwrap();
        dvae::reconstruction_loss(&dv.decode(&z).unwrap(), &x, 1).unwrap()
    };
    let dv_vars: Vec<(&str, &Var)> = dps.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let picks = sample_picks(&dv_vars, 20, &mut rng);
    let b_params = gradcheck(&l_dvae, &dv_vars, &picks)?;

    // (c) full loss w.r.t. the slot prior's mean and log standard deviation
    let cfg = tiny_config();
    let model = Steve::new(&cfg, DType::F64).map_err(e2s)?;
    jitter_biases(&model.ps, &mut rng)?;
    let frames = random_frames(1, 2, 32, 25);
    let loss = || {
        let inputs = model.eval_inputs(1, 4, 26).unwrap();
        model.loss(&frames, inputs, LossOptions::default()).unwrap().total
    };
    let mu = model.ps.get("encoder.slot_mu").ok_or("no slot mean parameter")?;
    let sigma = model.ps.get("encoder.slot_log_sigma").ok_or("no slot sigma parameter")?;
    let prior_vars = [("encoder.slot_mu", mu), ("encoder.slot_log_sigma", sigma)];
    let d = cfg.encoder.slot_dim;
    let picks: Vec<(usize, usize)> = (0..d).step_by(3).flat_map(|i| [(0, i), (1, i)]).collect();
    let c_prior = gradcheck(&loss, &prior_vars, &picks)?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "max rel err: CE/slots {a_slots:.1e}, CE/decoder {a_params:.1e}, dVAE {b_params:.1e}, prior {c_prior:.1e}; {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- 6

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn criterion_6() -> Outcome {
    let tau = TemperatureSchedule::from_config(&DvaeConfig::default());
    ensure(tau.at(0) == 1.0, format!("tau(0) = {}", tau.at(0)))?;
    ensure(rel(tau.at(30000), 0.1) <= 1e-12, format!("tau(30000) = {}", tau.at(30000)))?;
    let mut prev = f64::INFINITY;
    for s in (0..=60000).step_by(250) {
        let v = tau.at(s);
        ensure(v <= prev, format!("tau increases at step {s}"))?;
        prev = v;
    }
    let lr = LrSchedule::from_config(&TrainConfig::default());
    let peak = 3e-4;
    ensure(lr.at(0, peak) == 0.0, format!("lr(0) = {}", lr.at(0, peak)))?;
    ensure(rel(lr.at(30000, peak), peak) <= 1e-12, format!("lr(30000) = {}", lr.at(30000, peak)))?;
    ensure(rel(lr.at(280000, peak), peak / 2.0) <= 1e-12, format!("lr(280000) = {}", lr.at(280000, peak)))?;
    Ok(format!(
        "tau(0)={} tau(30000)={} lr(0)=0 lr(30000)=peak lr(280000)=peak/2",
        tau.at(0),
        tau.at(30000)
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut seen = Vec::new();
    for h in [64usize, 128] {
        for p in [4usize, 16, 32] {
            let l = token_count(h, h, p).map_err(e2s)?;
            ensure(l == (h / p) * (h / p), format!("token_count({h}, {p}) = {l}"))?;
            let mut cfg = RunConfig::default();
            cfg.data.image_size = h;
            cfg.dvae.patch_size = p;
            ensure(cfg.num_tokens() == l, "config token count disagrees")?;
            let mut ps = ParamStore::new(0, DType::F32);
            let dv = Dvae::new(
                &mut ps,
                &DvaeConfig {
                    patch_size: p,
                    vocab_size: 8,
                    hidden: 4,
                    ..DvaeConfig::default()
                },
            )
            .map_err(e2s)?;
            let x = Tensor::zeros((1, 3, h, h), DType::F32, &Device::Cpu).map_err(e2s)?;
            let logits = dv.encode(&x).map_err(e2s)?;
            let (_, _, gh, gw) = logits.dims4().map_err(e2s)?;
            ensure(gh * gw == l, format!("dVAE grid {gh}x{gw} for {h}px, P={p}"))?;
            seen.push(format!("{h}/{p}:{l}"));
        }
    }
    ensure(token_count(128, 128, 4).map_err(e2s)? == 1024, "128x128 with P=4 is not 1024 tokens")?;
    Ok(seen.join(" "))
}

// ---------------------------------------------------------------- 8

fn bits(snap: &BTreeMap<String, Vec<f64>>) -> Vec<u64> {
    snap.values().flatten().map(|v| v.to_bits()).collect()
}

fn criterion_8() -> Outcome {
    let cfg = tiny_config();
    let model = Steve::new(&cfg, DType::F64).map_err(e2s)?;
    let frames = random_frames(2, 3, 32, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let inputs = model.sample_step_inputs(2, 3, 0.8, &mut rng).map_err(e2s)?;
    let out = model
        .loss(
            &frames,
            inputs,
            LossOptions {
                skip_dvae: true,
                ..LossOptions::default()
            },
        )
        .map_err(e2s)?;
    let grads = out.total.backward().map_err(e2s)?;
    let mut dvae_params = 0;
    let mut encoder_reached = false;
    for (name, var) in model.ps.iter() {
        let g = grads.get(var.as_tensor());
        if name.starts_with("dvae.") {
            dvae_params += 1;
            if let Some(g) = g {
                let m = ops::to_vec_f64(g).map_err(e2s)?.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                ensure(m == 0.0, format!("{name} receives gradient {m:e} from L_CE"))?;
            }
        }
        if name.starts_with("encoder.") && g.is_some() {
            encoder_reached = true;
        }
    }
    ensure(dvae_params > 0, "model has no dVAE parameters")?;
    ensure(encoder_reached, "L_CE does not reach the encoder")?;

    let mut tcfg = cfg;
    tcfg.data.num_frames = 6;
    tcfg.train.episode_length = 3;
    let model = Steve::new(&tcfg, DType::F32).map_err(e2s)?;
    let clips = generate_clips(&tcfg.data.scene(Split::Train), 3).map_err(e2s)?;
    let before = model.ps.snapshot(None).map_err(e2s)?;
    let run = train_diagnostic(&model, &clips, 5, |_, _| {}).map_err(e2s)?;
    let after = model.ps.snapshot(None).map_err(e2s)?;
    ensure(bits(&before) == bits(&after), "model parameters changed during diagnostic training")?;
    let enc_before: BTreeMap<_, _> = before.into_iter().filter(|(k, _)| k.starts_with("encoder.")).collect();
    ensure(!enc_before.is_empty(), "no encoder parameters")?;
    ensure(run.losses.iter().all(|l| l.is_finite()), "diagnostic loss not finite")?;
    Ok(format!(
        "{dvae_params} dVAE tensors with no L_CE gradient; {} encoder tensors byte-identical over 5 diagnostic steps",
        enc_before.len()
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Vec<(String, Outcome)> {
    let names = [
        "9a STEVE video FG-ARI beats random slots by >= 0.2 (IID)",
        "9b STEVE video FG-ARI >= mixture baseline, >= 2 of 3 seeds",
        "9c P=4 video FG-ARI >= P=32, >= 2 of 3 seeds",
    ];
    if std::env::var("STEVE_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1") {
        return names.iter().map(|n| (n.to_string(), Err("skipped by STEVE_ACCEPTANCE_SKIP_TRAINING".into()))).collect();
    }
    let cfg = ExperimentConfig::desk();
    let start = Instant::now();
    let report = match experiment::run(&cfg, |line| {
        if line.contains("fg-ari") {
            eprintln!("  {line}");
        }
    }) {
        Ok(r) => r,
        Err(e) => return names.iter().map(|n| (n.to_string(), Err(format!("experiment failed: {e}")))).collect(),
    };
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let per_seed = |v: Variant| -> String { cfg.seeds.iter().map(|&s| fmt(report.video(v, s))).collect::<Vec<_>>().join("/") };
    eprintln!(
        "  {} steps/run, {} train clips, {}px, {mins:.0} min total",
        cfg.base.train.steps, cfg.train_clips, cfg.base.data.image_size
    );
    let mut out = Vec::new();

    let steve = report.mean_video(Variant::SteveSmallPatch);
    let random = report.random.video_fgari;
    let a = match (steve, random) {
        (Some(s), Some(r)) => {
            let detail = format!("mean over seeds {s:.3} (per seed {}), random {r:.3}, margin {:.3}", per_seed(Variant::SteveSmallPatch), s - r);
            if s - r >= 0.2 {
                Ok(detail)
            } else {
                Err(detail)
            }
        }
        _ => Err("undefined scores".into()),
    };
    out.push((names[0].to_string(), a));

    let wins = report.wins(Variant::SteveSmallPatch, Variant::Mixture);
    let detail = format!(
        "STEVE {} vs mixture {}: {wins}/3 seeds",
        per_seed(Variant::SteveSmallPatch),
        per_seed(Variant::Mixture)
    );
    out.push((names[1].to_string(), if wins >= 2 { Ok(detail) } else { Err(detail) }));

    let wins = report.wins(Variant::SteveSmallPatch, Variant::SteveLargePatch);
    let detail = format!(
        "P=4 {} vs P=32 {}: {wins}/3 seeds",
        per_seed(Variant::SteveSmallPatch),
        per_seed(Variant::SteveLargePatch)
    );
    out.push((names[2].to_string(), if wins >= 2 { Ok(detail) } else { Err(detail) }));
    out
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let limit = Duration::from_secs(600);
    let cfg = ExperimentConfig::desk().base;
    let model = Steve::new(&cfg, DType::F32).map_err(e2s)?;
    let iid = generate_clips(&cfg.data.scene(Split::Iid), 50).map_err(e2s)?;
    let ood = generate_clips(&cfg.data.scene(Split::OodCount), 50).map_err(e2s)?;
    let settings = EvalSettings::for_model(&model);
    let source = MaskSource::default_for(&model);
    let dir = tempfile::tempdir().map_err(e2s)?;

    let t = Instant::now();
    let sweeps = eval::sweeps(&model, &iid, source, settings).map_err(e2s)?;
    let sweep_time = t.elapsed();
    let path = dir.path().join("sweeps.json");
    eval::write_sweeps(&path, &sweeps).map_err(e2s)?;
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).map_err(e2s)?).map_err(e2s)?;
    let xs = |key: &str| -> Vec<u64> { v[key].as_array().map(|a| a.iter().filter_map(|p| p["x"].as_u64()).collect()).unwrap_or_default() };
    ensure(xs("past_frames") == (0..=6).collect::<Vec<u64>>(), format!("past-frame xs {:?}", xs("past_frames")))?;
    ensure(xs("video_lengths") == vec![3, 6, 12, 24], format!("video-length xs {:?}", xs("video_lengths")))?;
    for key in ["past_frames", "video_lengths"] {
        for p in v[key].as_array().unwrap() {
            let ok = p["mean"].is_null() || p["mean"].as_f64().is_some_and(|m| (-1.0..=1.0).contains(&m));
            ensure(ok && p["clips"].as_u64().is_some(), format!("malformed sweep point {p}"))?;
        }
    }
    ensure(sweep_time < limit, format!("sweeps took {:.0}s", sweep_time.as_secs_f64()))?;

    let t = Instant::now();
    let extra = eval::ood_extra_slots(&model, &ood);
    let report = eval::ood_eval(&model, &ood, extra, source, settings).map_err(e2s)?;
    let ood_time = t.elapsed();
    let path = dir.path().join("ood.json");
    eval::write_report(&path, &report).map_err(e2s)?;
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).map_err(e2s)?).map_err(e2s)?;
    let entries = v.as_object().ok_or("OOD report is not an object")?;
    ensure(entries.len() == 50, format!("{} OOD entries", entries.len()))?;
    for (id, e) in entries {
        let frames = e["image_fgari"].as_array().ok_or(format!("{id}: no image scores"))?;
        ensure(frames.len() == cfg.data.num_frames, format!("{id}: {} frame scores", frames.len()))?;
        ensure(e["video_fgari"].is_number() || e["video_fgari"].is_null(), format!("{id}: bad video score"))?;
    }
    ensure(extra >= 1, "OOD clips did not call for extra slots")?;
    ensure(ood_time < limit, format!("OOD eval took {:.0}s", ood_time.as_secs_f64()))?;
    Ok(format!(
        "sweeps {:.0}s, OOD eval with {} slots {:.0}s, 50 clips each",
        sweep_time.as_secs_f64(),
        settings.num_slots + extra,
        ood_time.as_secs_f64()
    ))
}

fn main() {
    let mut results: Vec<(String, Outcome)> = vec![
        ("1 ARI oracle equivalence".into(), criterion_1()),
        ("2 normalization suite".into(), criterion_2()),
        ("3 permutation suite".into(), criterion_3()),
        ("4 causality".into(), criterion_4()),
        ("5 gradient checks".into(), criterion_5()),
        ("6 schedule anchors".into(), criterion_6()),
        ("7 token geometry".into(), criterion_7()),
        ("8 stop-gradient contracts".into(), criterion_8()),
        ("10 protocol sweeps and OOD eval".into(), criterion_10()),
    ];
    for (name, outcome) in &results {
        print_line(name, outcome);
    }
    let nine = criterion_9();
    for (name, outcome) in &nine {
        print_line(name, outcome);
    }
    results.extend(nine);
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(name: &str, outcome: &Outcome) {
    match outcome {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(d) => println!("FAIL  {name}: {d}"),
    }
}
