//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use dmsl_core::dataset::{
    build_folds, expand_images, filter_usable, load_vis_th_layout, mirror_record, mirror_sample,
    synth_faces, MemorySource, NamePattern, PairedSample, RecordingSource, Role, SynthConfig,
    NUM_FOLDS,
};
use dmsl_core::evaluation::{image_nme, nme, NmeMode, TABLE2};
use dmsl_core::masks::{boundary_from_landmarks, boundary_mask, glow_accumulate, landmark_mask};
use dmsl_core::model::{load_checkpoint, read_meta, save_checkpoint, DType, HeadKind, StackedModel, UNetConfig};
use dmsl_core::raster::Raster;
use dmsl_core::training::{
    blackout, boundary_loss_tensor, checkpoint_meta, coord_set, landmark_loss_tensor, load_examples,
    loss_boundary, loss_landmark, loss_unet, loss_unet_batch, mask_set, train_dmsl, train_stage1,
    train_stage2, unet_loss_tensor, Example, Hyperparams, TensorSet,
};
use dmsl_core::{
    flip_permutation, BoundaryBox, FaceImage, LandmarkSet, Mask, Point, SampleRecord, Spectrum,
    Variation, FLAT_LEN, INPUT_SIZE, NUM_POINTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_landmarks(r: &mut ChaCha8Rng) -> LandmarkSet {
    LandmarkSet::from_fn(|_| Point::new(r.random_range(0.0..=1.0), r.random_range(0.0..=1.0)))
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------------------
// Literal oracles

fn oracle_boundary(truth: &[f64; 4], pred: &[f64; 4]) -> f64 {
    let v = 4.0;
    let mut sum = 0.0;
    for i in 0..4 {
        sum += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    }
    sum / v
}

fn oracle_landmark(truth: &[f64], pred: &[f64]) -> f64 {
    let p = NUM_POINTS;
    let mut sum = 0.0;
    for i in 0..p {
        let dx = truth[2 * i] - pred[2 * i];
        let dy = truth[2 * i + 1] - pred[2 * i + 1];
        sum += dx * dx + dy * dy;
    }
    sum / p as f64
}

fn oracle_unet(m: &[f64], m_hat: &[f64]) -> f64 {
    let eps = 1e-7;
    let n = m.len();
    let mut sum = 0.0;
    for i in 0..n {
        let q = if m_hat[i] < eps {
            eps
        } else if m_hat[i] > 1.0 - eps {
            1.0 - eps
        } else {
            m_hat[i]
        };
        sum += m[i] * q.ln() + (1.0 - m[i]) * (1.0 - q).ln();
    }
    -sum / n as f64
}

/// The mask loop as written: `mask[j][k]` indexed x-major, every pixel
/// visited for every landmark, additions only while a pixel is below 255.
fn oracle_glow(coords: &[f64], dim_x: usize, dim_y: usize) -> Vec<Vec<f64>> {
    let mut mask = vec![vec![0.0f64; dim_y]; dim_x];
    let mut i = 0;
    while i < coords.len() {
        let x = coords[i] * dim_x as f64;
        let y = coords[i + 1] * dim_y as f64;
        for j in 0..dim_x {
            for k in 0..dim_y {
                if mask[j][k] < 255.0 {
                    let d = f64::max((x - j as f64).abs(), (y - k as f64).abs());
                    mask[j][k] += 0.5f64.powf(d) * 255.0;
                }
            }
        }
        i += 2;
    }
    mask
}

// ---------------------------------------------------------------------------
// Criteria

fn loss_oracles() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let t: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let p: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..1.0));
        let expected = oracle_boundary(&t, &p);
        let got = loss_boundary(&BoundaryBox::from_slice(&t).map_err(e)?, &BoundaryBox::from_slice(&p).map_err(e)?);
        let tensor = boundary_loss_tensor(&tensor2(&p, 4)?, &tensor2(&t, 4)?).map_err(e)?;
        let tensor = tensor.to_scalar::<f64>().map_err(e)?;
        worst[0] = worst[0].max(rel_err(got, expected)).max(rel_err(tensor, expected));

        let tl = random_landmarks(&mut r);
        let pl = random_landmarks(&mut r);
        let expected = oracle_landmark(&tl.flatten(), &pl.flatten());
        let got = loss_landmark(&tl, &pl);
        let tensor = landmark_loss_tensor(&tensor2(&pl.flatten(), FLAT_LEN)?, &tensor2(&tl.flatten(), FLAT_LEN)?)
            .map_err(e)?
            .to_scalar::<f64>()
            .map_err(e)?;
        worst[1] = worst[1].max(rel_err(got, expected)).max(rel_err(tensor, expected));

        let s = INPUT_SIZE * INPUT_SIZE;
        let binary = r.random_bool(0.5);
        let m: Vec<f32> = (0..s)
            .map(|_| if binary { r.random_range(0..2) as f32 } else { r.random_range(0.0..=1.0) })
            .collect();
        // Include exact 0 and 1 predictions so clipping is exercised.
        let q: Vec<f32> = (0..s)
            .map(|i| match i % 97 {
                0 => 0.0,
                1 => 1.0,
                _ => r.random_range(0.0..=1.0),
            })
            .collect();
        let m64: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        let q64: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let expected = oracle_unet(&m64, &q64);
        let mask = |data: Vec<f32>| Mask {
            width: INPUT_SIZE,
            height: INPUT_SIZE,
            data,
        };
        let got = loss_unet(&mask(m), &mask(q)).map_err(e)?;
        let tensor = unet_loss_tensor(&tensor2(&q64, s)?, &tensor2(&m64, s)?)
            .map_err(e)?
            .to_scalar::<f64>()
            .map_err(e)?;
        worst[2] = worst[2].max(rel_err(got, expected)).max(rel_err(tensor, expected));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    ensure!(max <= 1e-9, "relative error {worst:?} exceeds 1e-9");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "max rel err boundary {:.1e} landmark {:.1e} unet {:.1e}; {:.2}s",
        worst[0],
        worst[1],
        worst[2],
        elapsed.as_secs_f64()
    ))
}

fn tensor2(values: &[f64], cols: usize) -> Result<Tensor, String> {
    Tensor::from_slice(values, (values.len() / cols, cols), &Device::Cpu).map_err(e)
}

fn glow_fidelity() -> Check {
    let start = Instant::now();
    let s = INPUT_SIZE;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l = random_landmarks(&mut r);
        let fast = landmark_mask(&l, s, s).map_err(e)?;
        let reference = oracle_glow(&l.flatten(), s, s);
        for (j, col) in reference.iter().enumerate() {
            for (k, &raw) in col.iter().enumerate() {
                let expected = raw.clamp(0.0, 255.0) / 255.0;
                worst = worst.max((fast.get(j, k) as f64 - expected).abs());
            }
        }
    }
    ensure!(worst <= 0.5 / 255.0, "max per-pixel difference {worst:.3e} exceeds 0.5/255");

    // One landmark on a pixel centre; the others parked in the far corner.
    let (px, py) = (64usize, 40usize);
    let mut l = LandmarkSet::from_fn(|_| Point::new(0.0, 0.0));
    l.set(30, Point::new(px as f64 / s as f64, py as f64 / s as f64));
    let raw = glow_accumulate(&l, s, s, Some(dmsl_core::masks::DEFAULT_GLOW_RADIUS)).map_err(e)?;
    let at0 = raw[py * s + px];
    let at3 = raw[(py + 3) * s + px - 1];
    ensure!(at0 == 255.0, "distance 0 gives {at0}, expected 255");
    ensure!(at3 == 31.875, "distance 3 gives {at3}, expected 31.875");
    let reference = oracle_glow(&l.flatten(), s, s);
    ensure!((reference[px][py] - 255.0).abs() < 1e-6, "reference at distance 0: {}", reference[px][py]);
    ensure!(
        (reference[px - 1][py + 3] - 31.875).abs() < 1e-6,
        "reference at distance 3: {}",
        reference[px - 1][py + 3]
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "200 sets, max diff {:.2e} (limit {:.2e}); spots 255 and 31.875; {:.1}s",
        worst,
        0.5 / 255.0,
        elapsed.as_secs_f64()
    ))
}

/// A face with points 37 and 46 exactly `d` apart.
fn face_with_interocular(r: &mut ChaCha8Rng, d: f64) -> LandmarkSet {
    let mut l = LandmarkSet::from_fn(|_| Point::new(r.random_range(0.2..0.8), r.random_range(0.2..0.8)));
    let (x, y) = (r.random_range(0.1..0.3), r.random_range(0.3..0.5));
    l.set(36, Point::new(x, y));
    l.set(45, Point::new(x + d, y));
    l
}

fn nme_closed_forms(bin: &Path, work: &Path) -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = r.random_range(0.2..0.5);
        let delta = r.random_range(-0.05..0.05);
        let truths: Vec<LandmarkSet> = (0..5).map(|_| face_with_interocular(&mut r, d)).collect();
        let shifted: Vec<LandmarkSet> = truths.iter().map(|t| t.map(|p| Point::new(p.x + delta, p.y))).collect();
        let zero = nme(&truths, &truths).map_err(e)?;
        ensure!(zero == 0.0, "perfect predictions give {zero}");
        worst = worst.max((nme(&truths, &shifted).map_err(e)? - delta.abs() / d).abs());
        for (t, p) in truths.iter().zip(&shifted) {
            let v = image_nme(t, p, NmeMode::VectorNorm).map_err(e)?;
            worst = worst.max((v - delta.abs() / ((NUM_POINTS as f64).sqrt() * d)).abs());
        }
    }
    ensure!(worst <= 1e-12, "uniform shift off by {worst:e}");

    // The CLI scores stored predictions and renders the reference rows.
    let data = work.join("nme-data");
    run(bin, &["--out", s(&data), "--seed", "3", "synth", "--subjects", "10", "--variations", "NN,EH"])?;
    let records = dmsl_core::manifest::read_manifest(&data.join("manifest.jsonl")).map_err(e)?;
    let delta = 0.01;
    let mut lines = String::new();
    let mut expected = Vec::new();
    for rec in &records {
        let (l, _) = rec.annotation().map_err(e)?;
        let shifted = l.map(|p| Point::new(p.x + delta, p.y));
        let d = l.point(37).distance(&l.point(46));
        for spectrum in Spectrum::ALL {
            let line = serde_json::json!({
                "record_id": rec.record_id,
                "spectrum": spectrum,
                "landmarks": shifted.flatten(),
            });
            lines.push_str(&line.to_string());
            lines.push('\n');
            expected.push(delta / d);
        }
    }
    let preds = work.join("shifted.jsonl");
    std::fs::write(&preds, lines).map_err(e)?;
    let out = work.join("nme-eval");
    let stdout = run(
        bin,
        &["--out", s(&out), "eval", "--manifest", s(&data.join("manifest.jsonl")), "--predictions", s(&preds)],
    )?;
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).map_err(e)?;
    let got = summary["nme"].as_f64().ok_or("eval printed no nme")?;
    let want = expected.iter().sum::<f64>() / expected.len() as f64;
    ensure!((got - want).abs() <= 1e-12, "eval nme {got} vs closed form {want}");

    let report = std::fs::read_to_string(out.join("report.csv")).map_err(e)?;
    for (name, th, vis) in TABLE2 {
        for (spectrum, value) in [("TH", th), ("VIS", vis)] {
            let row = format!("reference:{name},{spectrum},ALL,,{value}");
            ensure!(report.lines().any(|l| l == row), "report.csv lacks `{row}`");
        }
    }
    Ok(format!(
        "zero on perfect; shift error {worst:.1e}; eval {got:.6} = mean(delta/D); {} reference rows",
        TABLE2.len() * 2
    ))
}

fn geometry() -> Check {
    let mut r = rng(4);
    let perm = flip_permutation();
    let mut seen = [false; NUM_POINTS];
    for i in 0..NUM_POINTS {
        ensure!(perm[perm[i]] == i, "flip permutation is not an involution at {}", i + 1);
        seen[perm[i]] = true;
    }
    ensure!(seen.iter().all(|&b| b), "flip permutation is not a bijection");
    ensure!(perm[36] == 45 && perm[8] == 8, "37 -> {}, 9 -> {}", perm[36] + 1, perm[8] + 1);

    let mut worst_mirror = 0.0f64;
    for _ in 0..1000 {
        let l = random_landmarks(&mut r);
        let b = boundary_from_landmarks(&l).map_err(e)?;
        let pts = l.points();
        let eps = 1e-9;
        ensure!(
            pts.iter().all(|p| p.x >= b.x && p.x <= b.x + b.w + 1e-12 && p.y >= b.y && p.y <= b.y + b.h + 1e-12),
            "box {b:?} misses a point"
        );
        ensure!(pts.iter().any(|p| p.x < b.x + eps), "left edge is not tight");
        ensure!(pts.iter().any(|p| p.y < b.y + eps), "top edge is not tight");
        ensure!(pts.iter().any(|p| p.x > b.x + b.w - eps), "right edge is not tight");
        ensure!(pts.iter().any(|p| p.y > b.y + b.h - eps), "bottom edge is not tight");

        let mut rec = SampleRecord::new(1, Variation::Nn, "v.png".into(), "t.png".into());
        rec.landmarks = Some(l.clone());
        rec.boundary = Some(b);
        let once = mirror_record(&rec).map_err(e)?;
        let (ml, mb) = once.annotation().map_err(e)?;
        let recomputed = boundary_from_landmarks(ml).map_err(e)?;
        ensure!(mb == recomputed, "mirrored box is not the tight box of the mirrored points");
        for (i, p) in l.points().iter().enumerate() {
            let q = ml.get(perm[i]);
            worst_mirror = worst_mirror.max((q.x - (1.0 - p.x)).abs()).max((q.y - p.y).abs());
        }
        let twice = mirror_record(&once).map_err(e)?;
        ensure!(twice.record_id == rec.record_id && !twice.mirrored, "mirror twice changes identity");
        let back = twice.landmarks.as_ref().expect("annotated");
        for (p, q) in l.points().iter().zip(back.points()) {
            worst_mirror = worst_mirror.max((p.x - q.x).abs()).max((p.y - q.y).abs());
        }
    }
    ensure!(worst_mirror <= 1e-6, "mirror round-off {worst_mirror:e}");

    let samples = synth_faces(&SynthConfig {
        variations: vec![Variation::Nn],
        ..SynthConfig::new(3, 4)
    });
    for s in &samples {
        let twice = mirror_sample(&mirror_sample(s).map_err(e)?).map_err(e)?;
        ensure!(twice.vis == s.vis && twice.th == s.th, "image mirror is not an involution");
    }

    for _ in 0..200 {
        let (w, h) = (INPUT_SIZE, INPUT_SIZE);
        let data: Vec<f32> = (0..w * h).map(|_| r.random_range(0.01..1.0)).collect();
        let img = FaceImage::new(Raster::from_vec(w, h, 1, data).map_err(e)?, Spectrum::Th, 1, Variation::Nn);
        let (x, y) = (r.random_range(-0.1..0.9), r.random_range(-0.1..0.9));
        let b = BoundaryBox::new(x, y, r.random_range(0.0..0.8), r.random_range(0.0..0.8));
        let once = blackout(&img, &b);
        ensure!(blackout(&once, &b) == once, "blackout is not idempotent for {b:?}");
        // Predicted boxes are clamped field by field before cutting.
        let (cx, cy) = (b.x.clamp(0.0, 1.0), b.y.clamp(0.0, 1.0));
        let (cw, ch) = (b.w.clamp(0.0, 1.0 - cx), b.h.clamp(0.0, 1.0 - cy));
        let edge = |v: f64, dim: usize| ((v * dim as f64).round().max(0.0) as usize).min(dim);
        let (x0, x1) = (edge(cx, w), edge(cx + cw, w));
        let (y0, y1) = (edge(cy, h), edge(cy + ch, h));
        let (mut inside_in, mut inside_out) = (0.0f64, 0.0f64);
        for yy in 0..h {
            for xx in 0..w {
                let (a, o) = (img.raster.get(xx, yy, 0), once.raster.get(xx, yy, 0));
                if (x0..x1).contains(&xx) && (y0..y1).contains(&yy) {
                    ensure!(a == o, "interior pixel ({xx},{yy}) changed for {b:?}");
                    inside_in += a as f64;
                } else {
                    ensure!(o == 0.0, "exterior pixel ({xx},{yy}) kept for {b:?}");
                }
                inside_out += o as f64;
            }
        }
        ensure!(inside_in == inside_out, "pixel sum {inside_out} differs from interior sum {inside_in}");
    }
    Ok(format!(
        "flip involution; 1000 tight boxes; mirror round-off {worst_mirror:.1e}; 200 blackouts idempotent"
    ))
}

fn perturb(var: &Var, index: usize, delta: f64) -> Result<(), String> {
    let t = var.as_tensor();
    let mut v = t.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
    v[index] += delta;
    var.set(&Tensor::from_vec(v, t.shape(), &Device::Cpu).map_err(e)?).map_err(e)
}

fn sorted_vars(map: &candle_nn::VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().expect("var map");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// Moves the U-Net to a point where every ReLU input is strictly positive
/// (non-negative weights, positive biases), so that a step of 1e-4 never
/// crosses a kink and central differences estimate the derivative. The
/// sigmoid output layer keeps its signed values.
fn all_relus_active(unet: &dmsl_core::model::UNet) -> Result<(), String> {
    for (name, var) in sorted_vars(unet.vars()) {
        if name.starts_with("out.") {
            continue;
        }
        let t = var.as_tensor().abs().map_err(e)?;
        let t = if name.ends_with("bias") { t.affine(0.1, 0.05) } else { t.affine(0.3, 0.0) };
        var.set(&t.map_err(e)?).map_err(e)?;
    }
    Ok(())
}

/// Central-difference check of `sample` parameters drawn from each group.
fn grad_check(
    loss: &dyn Fn() -> Result<Tensor, String>,
    oracle: &dyn Fn() -> Result<f64, String>,
    groups: &[(&[(String, Var)], usize)],
    r: &mut ChaCha8Rng,
) -> Result<(usize, f64), String> {
    let h = 1e-4;
    let value = loss()?;
    let grads = value.backward().map_err(e)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (vars, count) in groups {
        for _ in 0..*count {
            let (name, var) = &vars[r.random_range(0..vars.len())];
            let index = r.random_range(0..var.elem_count());
            let g = grads.get(var.as_tensor()).ok_or(format!("no gradient for {name}"))?;
            let analytic = g.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?[index];
            perturb(var, index, h)?;
            let plus = oracle()?;
            perturb(var, index, -2.0 * h)?;
            let minus = oracle()?;
            perturb(var, index, h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > 1e-3 {
                return Err(format!("{name}[{index}]: analytic {analytic:e} numeric {numeric:e}"));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut r = rng(5);
    let cfg = UNetConfig {
        input_size: INPUT_SIZE,
        levels: 1,
        base_channels: 2,
    };
    let n = 2;
    let s = INPUT_SIZE;
    let pixels: Vec<f64> = (0..n * s * s).map(|_| r.random_range(0.0..1.0)).collect();
    let x = Tensor::from_vec(pixels, (n, 1, s, s), &Device::Cpu).map_err(e)?;
    let mut summary = Vec::new();

    for kind in [HeadKind::Boundary, HeadKind::Landmarks] {
        let model = StackedModel::new(kind, cfg, 8, 50, DType::F64).map_err(e)?;
        all_relus_active(&model.unet)?;
        let k = kind.outputs();
        let truth: Vec<f64> = (0..n * k).map(|_| r.random_range(0.1..0.9)).collect();
        let t = tensor2(&truth, k)?;
        let loss = || -> Result<Tensor, String> {
            let p = model.forward(&x).map_err(e)?;
            match kind {
                HeadKind::Boundary => boundary_loss_tensor(&p, &t),
                HeadKind::Landmarks => landmark_loss_tensor(&p, &t),
            }
            .map_err(e)
        };
        let oracle = || -> Result<f64, String> {
            let p = model.forward(&x).map_err(e)?.to_vec2::<f64>().map_err(e)?;
            let per: Vec<f64> = p
                .iter()
                .zip(truth.chunks(k))
                .map(|(p, t)| match kind {
                    HeadKind::Boundary => oracle_boundary(&t.try_into().unwrap(), &p[..].try_into().unwrap()),
                    HeadKind::Landmarks => oracle_landmark(t, p),
                })
                .collect();
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        };
        let head = sorted_vars(model.head.vars());
        let unet = sorted_vars(model.unet.vars());
        let (count, worst) = grad_check(&loss, &oracle, &[(&head, 50), (&unet, 50)], &mut r)?;
        summary.push(format!("{} {count} params {worst:.1e}", kind.as_str()));
    }

    let model = StackedModel::new(HeadKind::Landmarks, cfg, 8, 51, DType::F64).map_err(e)?;
    all_relus_active(&model.unet)?;
    let truth: Vec<f64> = (0..n * s * s).map(|i| if (i / s) % 3 == 0 { 1.0 } else { r.random_range(0.0..1.0) }).collect();
    let t = Tensor::from_vec(truth.clone(), (n, 1, s, s), &Device::Cpu).map_err(e)?;
    let loss = || unet_loss_tensor(&model.unet.forward(&x).map_err(e)?, &t).map_err(e);
    let oracle = || -> Result<f64, String> {
        let p = model.unet.forward(&x).map_err(e)?.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
        Ok(oracle_unet(&truth, &p))
    };
    let unet = sorted_vars(model.unet.vars());
    let (count, worst) = grad_check(&loss, &oracle, &[(&unet, 100)], &mut r)?;
    summary.push(format!("unet {count} params {worst:.1e}"));

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{}; {:.1}s", summary.join(", "), elapsed.as_secs_f64()))
}

/// Ten network-frame examples: five subjects, both spectra.
fn ten_examples() -> Result<Vec<Example>, String> {
    let samples = synth_faces(&SynthConfig {
        variations: vec![Variation::Nn],
        ..SynthConfig::new(5, 11)
    });
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let source = MemorySource::from_samples(&samples);
    let ex = load_examples(&records, &expand_images(&records), &source).map_err(e)?;
    if ex.len() != 10 {
        return Err(format!("expected 10 examples, got {}", ex.len()));
    }
    Ok(ex)
}

struct Overfit {
    boundary_unet_loss: f64,
    landmark_unet_loss: f64,
    landmark_entropy: f64,
    landmark_loss: f64,
    stage1_digest: String,
    meta_digest: String,
    checkpoint_digest: String,
    stage2_digest: String,
    head_changed: bool,
}

fn predicted_masks(model: &StackedModel, set: &TensorSet) -> Result<Vec<Mask>, String> {
    let out = model.unet.forward(&set.inputs).map_err(e)?;
    let n = out.dim(0).map_err(e)?;
    let flat = out.flatten_from(1).map_err(e)?.to_vec2::<f32>().map_err(e)?;
    Ok((0..n)
        .map(|i| Mask {
            width: INPUT_SIZE,
            height: INPUT_SIZE,
            data: flat[i].clone(),
        })
        .collect())
}

fn overfit_run(work: &Path) -> Result<Overfit, String> {
    let examples = ten_examples()?;
    let hp = Hyperparams {
        lr_stage1: 0.005,
        lr_stage2: 0.003,
        batch: 5,
        epochs: 200,
        epochs_stage2: Some(300),
        patience: 300,
        seed: 0,
        unet: UNetConfig {
            input_size: INPUT_SIZE,
            levels: 2,
            base_channels: 4,
        },
        hidden: 128,
        ..Hyperparams::default()
    };
    let mut log = |_: &dmsl_core::training::EpochLog| {};
    let images: Vec<FaceImage> = examples.iter().map(|x| x.image.clone()).collect();

    // Boundary U-Net: binary box masks.
    let mb = StackedModel::new(HeadKind::Boundary, hp.unet, hp.hidden, 1, DType::F32).map_err(e)?;
    let set = mask_set(HeadKind::Boundary, &images, &examples, DType::F32).map_err(e)?;
    train_stage1(&mb.unet, &set, None, &hp, "boundary/1", None, &mut log).map_err(e)?;
    let truths: Vec<Mask> = examples.iter().map(|x| boundary_mask(&x.boundary, INPUT_SIZE, INPUT_SIZE)).collect::<Result<_, _>>().map_err(e)?;
    let preds = predicted_masks(&mb, &set)?;
    let pairs: Vec<(&Mask, &Mask)> = truths.iter().zip(&preds).collect();
    let boundary_unet_loss = loss_unet_batch(&pairs).map_err(e)?;

    // Landmark model on blacked-out inputs.
    let cut: Vec<FaceImage> = examples.iter().map(|x| blackout(&x.image, &x.boundary)).collect();
    let ml = StackedModel::new(HeadKind::Landmarks, hp.unet, hp.hidden, 2, DType::F32).map_err(e)?;
    let set = mask_set(HeadKind::Landmarks, &cut, &examples, DType::F32).map_err(e)?;
    let s1 = train_stage1(&ml.unet, &set, None, &hp, "landmark/1", None, &mut log).map_err(e)?;
    let truths: Vec<Mask> = examples.iter().map(|x| landmark_mask(&x.landmarks, INPUT_SIZE, INPUT_SIZE)).collect::<Result<_, _>>().map_err(e)?;
    let preds = predicted_masks(&ml, &set)?;
    let pairs: Vec<(&Mask, &Mask)> = truths.iter().zip(&preds).collect();
    let landmark_unet_loss = loss_unet_batch(&pairs).map_err(e)?;
    let self_pairs: Vec<(&Mask, &Mask)> = truths.iter().map(|m| (m, m)).collect();
    let landmark_entropy = loss_unet_batch(&self_pairs).map_err(e)?;

    let dir = work.join("overfit-stage1");
    let meta = checkpoint_meta(&ml, 1, None, s1.best_epoch, hp.seed, None).map_err(e)?;
    save_checkpoint(&dir, &ml, &meta).map_err(e)?;
    let stage1_digest = ml.unet.digest().map_err(e)?;
    let head_before = dmsl_core::model::digest(ml.head.vars()).map_err(e)?;

    let set = coord_set(HeadKind::Landmarks, &cut, &examples, DType::F32).map_err(e)?;
    train_stage2(&ml, &set, None, &hp, "landmark/2", None, &mut log).map_err(e)?;
    let preds = ml.predict_raw(&cut.iter().collect::<Vec<_>>()).map_err(e)?;
    let mut total = 0.0;
    for (x, p) in examples.iter().zip(&preds) {
        total += loss_landmark(&x.landmarks, &LandmarkSet::unflatten(p).map_err(e)?);
    }
    let (reloaded, _) = load_checkpoint(&dir).map_err(e)?;
    Ok(Overfit {
        boundary_unet_loss,
        landmark_unet_loss,
        landmark_entropy,
        landmark_loss: total / examples.len() as f64,
        stage1_digest,
        meta_digest: read_meta(&dir).map_err(e)?.unet_digest,
        checkpoint_digest: reloaded.unet.digest().map_err(e)?,
        stage2_digest: ml.unet.digest().map_err(e)?,
        head_changed: dmsl_core::model::digest(ml.head.vars()).map_err(e)? != head_before,
    })
}

fn freeze_contract(o: &Result<Overfit, String>) -> Check {
    let o = o.as_ref().map_err(|err| format!("training failed: {err}"))?;
    ensure!(o.head_changed, "stage 2 did not update the head");
    ensure!(
        o.stage2_digest == o.stage1_digest
            && o.meta_digest == o.stage1_digest
            && o.checkpoint_digest == o.stage1_digest,
        "U-Net digest {} after stage 2, {} recorded and {} reloaded from the stage-1 checkpoint",
        o.stage2_digest,
        o.meta_digest,
        o.checkpoint_digest
    );
    Ok(format!("U-Net sha256 {}… unchanged; head updated", &o.stage1_digest[..12]))
}

fn fold_contract() -> Check {
    let samples: Vec<PairedSample> = synth_faces(&SynthConfig {
        variations: vec![Variation::Nn, Variation::Eh],
        ..SynthConfig::new(10, 6)
    });
    let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let ids: Vec<u32> = (1..=10).collect();
    let plan = build_folds(&ids).map_err(e)?;
    let all: BTreeSet<u32> = ids.iter().copied().collect();
    let mut grouped = BTreeSet::new();
    for g in &plan.groups {
        for id in g {
            ensure!(grouped.insert(*id), "subject {id} is in two groups");
        }
    }
    ensure!(grouped == all, "groups do not cover every subject");
    let mut tested = BTreeSet::new();
    for k in 0..NUM_FOLDS {
        let test: BTreeSet<u32> = plan.subjects(k, Role::Test).into_iter().collect();
        let val: BTreeSet<u32> = plan.subjects(k, Role::Validation).into_iter().collect();
        let train: BTreeSet<u32> = plan.subjects(k, Role::Train).into_iter().collect();
        ensure!(test.is_disjoint(&val) && test.is_disjoint(&train) && val.is_disjoint(&train), "fold {k} overlaps");
        let union: BTreeSet<u32> = test.union(&val).chain(&train).copied().collect();
        ensure!(union == all, "fold {k} does not cover every subject");
        ensure!((test.len(), val.len(), train.len()) == (1, 2, 7), "fold {k} has the wrong shape");
        for id in &test {
            ensure!(tested.insert(*id), "subject {id} tested twice");
        }
    }
    ensure!(tested == all, "some subject is never tested");

    let hp = Hyperparams {
        epochs: 1,
        epochs_stage2: Some(1),
        batch: 8,
        unet: UNetConfig {
            input_size: INPUT_SIZE,
            levels: 1,
            base_channels: 2,
        },
        hidden: 8,
        ..Hyperparams::default()
    };
    let memory = MemorySource::from_samples(&samples);
    let mut reads = 0;
    for k in 0..NUM_FOLDS {
        let source = RecordingSource::new(&memory);
        train_dmsl(&records, &plan, k, &source, &hp, &mut |_| {}).map_err(e)?;
        let read = source.subjects_read();
        let test: BTreeSet<u32> = plan.subjects(k, Role::Test).into_iter().collect();
        let allowed: BTreeSet<u32> = all.difference(&test).copied().collect();
        ensure!(read.is_disjoint(&test), "fold {k} read test subjects {:?}", read.intersection(&test).collect::<Vec<_>>());
        ensure!(read == allowed, "fold {k} read {read:?}, expected every training and validation subject");
        reads += source.reads().len();
    }
    Ok(format!("10 groups partition 10 subjects; 10 folds trained, {reads} image reads, none from test subjects"))
}

fn end_to_end(bin: &Path, work: &Path, overfit: &Result<Overfit, String>) -> Check {
    let data = work.join("e2e-data");
    run(
        bin,
        &["--out", s(&data), "--seed", "20", "synth", "--subjects", "20", "--variations", E2E_VARIATIONS],
    )?;
    let hp = work.join("e2e-hp.json");
    std::fs::write(&hp, E2E_HP).map_err(e)?;
    let out = work.join("e2e-cv");
    let start = Instant::now();
    run(
        bin,
        &["--out", s(&out), "--seed", "20", "cv", "--manifest", s(&data.join("manifest.jsonl")), "--hp", s(&hp)],
    )?;
    let elapsed = start.elapsed();
    let text = std::fs::read_to_string(out.join("cv_summary.json")).map_err(e)?;
    let summary: serde_json::Value = serde_json::from_str(&text).map_err(e)?;
    let folds = summary["folds_completed"].as_array().map_or(0, Vec::len);
    let nme = summary["nme"].as_f64().ok_or("no aggregate nme")?;
    let base = summary["baseline_nme"].as_f64().ok_or("no baseline nme")?;
    let spectra: BTreeSet<String> = summary_spectra(&out)?;
    let o = overfit.as_ref().map_err(|err| format!("overfit run failed: {err}"))?;
    let detail = format!(
        "{folds} folds in {:.0}s, NME {nme:.4} (baseline {base:.4}); overfit loss_landmark {:.2e}, \
         loss_unet {:.4} (boundary masks; landmark masks {:.4} against entropy floor {:.4})",
        elapsed.as_secs_f64(),
        o.landmark_loss,
        o.boundary_unet_loss,
        o.landmark_unet_loss,
        o.landmark_entropy
    );
    ensure!(folds == NUM_FOLDS, "{detail}: expected 10 folds");
    ensure!(spectra.len() == 2, "{detail}: test images cover spectra {spectra:?}");
    ensure!(elapsed < Duration::from_secs(3 * 3600), "{detail}: over the 3 h CPU budget");
    ensure!(nme < 0.15, "{detail}: aggregate NME not below 0.15");
    ensure!(nme < base, "{detail}: not better than the untrained baseline");
    ensure!(o.landmark_loss < 1e-3, "{detail}: loss_landmark not below 1e-3");
    ensure!(o.boundary_unet_loss < 0.1, "{detail}: loss_unet not below 0.1");
    Ok(detail)
}

fn summary_spectra(out: &Path) -> Result<BTreeSet<String>, String> {
    let mut reader = csv_lines(&out.join("results.csv"))?;
    let header = reader.next().ok_or("empty results.csv")?;
    let col = header.split(',').position(|h| h == "spectrum").ok_or("no spectrum column")?;
    Ok(reader.filter_map(|l| l.split(',').nth(col).map(str::to_string)).collect())
}

fn csv_lines(path: &Path) -> Result<impl Iterator<Item = String>, String> {
    let text = std::fs::read_to_string(path).map_err(|err| format!("{}: {err}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect::<Vec<_>>().into_iter())
}

fn dataset_arithmetic(work: &Path) -> Check {
    let root = work.join("vis-th");
    std::fs::create_dir_all(&root).map_err(e)?;
    for subject in 1..=50u32 {
        for (i, v) in Variation::ALL.iter().enumerate() {
            for spectrum in ["VIS", "TH"] {
                let name = format!("{spectrum}_{subject:03}_1_{:02}_{}.png", i + 1, v.acronym());
                std::fs::write(root.join(name), b"").map_err(e)?;
            }
        }
    }
    let scan = load_vis_th_layout(&root, &NamePattern::default()).map_err(e)?;
    ensure!(scan.warnings.is_empty(), "layout warnings: {:?}", scan.warnings);
    let template = LandmarkSet::from_fn(|i| Point::new(0.3 + (i % 10) as f64 * 0.04, 0.2 + (i / 10) as f64 * 0.09));
    let mut records = scan.records;
    for r in &mut records {
        r.boundary = Some(boundary_from_landmarks(&template).map_err(e)?);
        r.landmarks = Some(template.clone());
        r.calibrated = true;
    }
    let originals = expand_images(&records).len();
    let mirrored: Vec<SampleRecord> = records.iter().map(mirror_record).collect::<Result<_, _>>().map_err(e)?;
    let mut all = records.clone();
    all.extend(mirrored);
    let with_mirrors = expand_images(&all).len();
    let usable = filter_usable(&all).len();
    ensure!(
        (originals, with_mirrors, usable) == (2100, 4200, 4100),
        "counts {originals} -> {with_mirrors} -> {usable}"
    );
    Ok(format!("{} pairs: {originals} -> {with_mirrors} -> {usable}", records.len()))
}

// ---------------------------------------------------------------------------

// Ten-fold run sized for a single CPU core.
const E2E_VARIATIONS: &str = "NN,EH,ESp,PL,PR,OSG";
const E2E_HP: &str = r#"{
  "lr_stage1": 0.003,
  "lr_stage2": 0.0003,
  "batch": 16,
  "epochs": 6,
  "epochs_stage2": 120,
  "patience": 120,
  "unet": {"input_size": 128, "levels": 2, "base_channels": 4},
  "hidden": 64
}"#;

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn run(bin: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin).args(args).output().map_err(e)?;
    if !out.status.success() {
        return Err(format!(
            "dmsl {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn main() {
    let bin = Path::new(env!("CARGO_BIN_EXE_dmsl"));
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut failed = 0;
    let mut report = |name: &str, result: Check| {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };
    report("loss oracles", loss_oracles());
    report("glow mask fidelity", glow_fidelity());
    report("nme closed forms", nme_closed_forms(bin, work));
    report("geometry properties", geometry());
    report("gradient checks", gradient_checks());
    let overfit = overfit_run(work);
    report("freeze contract", freeze_contract(&overfit));
    report("fold contract", fold_contract());
    report("end-to-end smoke", end_to_end(bin, work, &overfit));
    report("dataset arithmetic", dataset_arithmetic(work));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
