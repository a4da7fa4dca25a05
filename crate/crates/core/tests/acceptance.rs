//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p relight-core --test acceptance` runs all nine; pass
//! criterion numbers (e.g. `-- 1 4`) to run a subset.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use relight_core::align::{align_take_with, FlowParams, TakeLayout};
use relight_core::imagecore::{decode_hdr, decode_pfm, encode_hdr, encode_pfm};
use relight_core::lightrig::{env_to_weights, texel_direction, texel_solid_angle, Vec3};
use relight_core::oracle::{
    default_camera, default_scene, generate_drifting_take, generate_rig, render_env_sphere,
    render_env_sphere_f64, render_olat_sphere, render_olat_sphere_f64, textured_take, SmoothEnv,
};
use relight_core::quality::{idmrf_grad, idmrf_loss_raster, psnr, rmse, ssim, MrfConfig, Raster};
use relight_core::reflectfield::{
    backward, forward_batch, render_olat, train, FieldDims, FieldRay, RaySampleConfig,
    TrainConfig, TrainView, TriplaneField,
};
use relight_core::relight::{combine, weighted_sum};
use relight_core::{CameraModel, EnvMap, HdrImage, LightRig, OlatStack, WeightVector};

/// Lowest L=331 discretization PSNR over the smooth presets, fixed by the
/// first oracle run.
const DISCRETIZATION_BASELINE_DB: f64 = 62.63;

/// Batch and crop for the training run, sized for a single core.
const TRAIN_BATCH: usize = 512;
const TRAIN_CROP: usize = 24;
/// Iterations on the reconstruction term alone before the patch loss joins.
const TRAIN_WARMUP: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Wall-clock budget stated for 8 cores, scaled to the cores present.
fn scaled_budget(on_eight: Duration) -> Duration {
    on_eight.mul_f64(8.0 / cores().min(8) as f64)
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, hi: f32) -> HdrImage {
    HdrImage::from_fn(w, h, |_, _| [0, 1, 2].map(|_| rng.gen_range(0.0..hi)))
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..2.0)))
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

// ---------------------------------------------------------------------------
// 1

fn linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rig = generate_rig(8).unwrap();
    let camera = default_camera(32, 32);
    let mut worst = 0.0f64;
    let mut elapsed = Duration::ZERO;
    for _ in 0..100 {
        let images = (0..8).map(|_| random_image(&mut rng, 32, 32, 4.0)).collect();
        let stack = OlatStack::from_images(rig.clone(), camera.clone(), images).unwrap();
        let (w1, w2) = (random_weights(&mut rng, 8), random_weights(&mut rng, 8));
        let (alpha, beta) = (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0));
        let mixed: Vec<[f64; 3]> = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| [0, 1, 2].map(|c| alpha * a[c] + beta * b[c]))
            .collect();
        let t = Instant::now();
        let lhs = combine(&stack, &WeightVector::new(&rig, mixed).unwrap()).unwrap();
        let r1 = combine(&stack, &WeightVector::new(&rig, w1).unwrap()).unwrap();
        let r2 = combine(&stack, &WeightVector::new(&rig, w2).unwrap()).unwrap();
        elapsed += t.elapsed();
        for ((l, a), b) in lhs.data.iter().zip(&r1.data).zip(&r2.data) {
            let rhs = alpha * *a as f64 + beta * *b as f64;
            let dev = (*l as f64 - rhs).abs();
            if dev > 0.0 {
                worst = worst.max(dev / rhs.abs());
            }
        }
    }
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("max relative deviation {worst:.3e}, combine time {:.3}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 2

/// Per-light sums grouped exactly as the binning pass: per row in column
/// order, then across rows in row order.
fn reference_weights(env: &EnvMap, dirs: &[Vec3]) -> Vec<[f64; 3]> {
    let (h, w) = (env.height(), env.width());
    let mut total = vec![[0.0f64; 3]; dirs.len()];
    for row in 0..h {
        let d_omega = texel_solid_angle(row, h, w).unwrap();
        let mut part = vec![[0.0f64; 3]; dirs.len()];
        for col in 0..w {
            let rad = env.image.get(col, row);
            if rad.iter().all(|&v| v == 0.0) {
                continue;
            }
            let d = texel_direction(row, col, h, w).unwrap();
            let mut best = 0;
            for (l, ld) in dirs.iter().enumerate() {
                if ld.dot(&d) > dirs[best].dot(&d) {
                    best = l;
                }
            }
            for c in 0..3 {
                part[best][c] += rad[c] as f64 * d_omega;
            }
        }
        for (t, p) in total.iter_mut().zip(&part) {
            for c in 0..3 {
                t[c] += p[c];
            }
        }
    }
    total
}

fn energy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bitwise = true;
    let mut worst_uniform = 0.0f64;
    for _ in 0..20 {
        let w = 2 * rng.gen_range(4..40);
        let h = w / 2;
        let env = EnvMap::new(HdrImage::from_fn(w, h, |_, _| {
            if rng.gen_bool(0.2) {
                [0.0; 3]
            } else {
                [0, 1, 2].map(|_| rng.gen_range(0.0..10.0))
            }
        }))
        .unwrap();
        let n = rng.gen_range(2..60);
        let dirs: Vec<Vec3> = (0..n).map(|_| random_direction(&mut rng)).collect();
        let rig = LightRig::with_default_labels(dirs.clone()).unwrap();
        let got = env_to_weights(&env, &rig, 0.0).weights;
        let want = reference_weights(&env, &dirs);
        let sum = |v: &[[f64; 3]], c: usize| v.iter().map(|x| x[c]).sum::<f64>();
        for c in 0..3 {
            bitwise &= sum(&got, c).to_bits() == sum(&want, c).to_bits();
        }
        bitwise &= got == want;

        let uniform = EnvMap::new(HdrImage::from_fn(w, h, |_, _| [1.0; 3])).unwrap();
        let u = env_to_weights(&uniform, &rig, rng.gen_range(0.0..7.0)).weights;
        for c in 0..3 {
            worst_uniform = worst_uniform.max((sum(&u, c) - 4.0 * PI).abs());
        }
    }
    outcome(
        bitwise && worst_uniform <= 1e-9,
        format!("bitwise totals {bitwise}, uniform env error {worst_uniform:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn discretization() -> Outcome {
    let scene = default_scene();

    // texel-aligned rig against direct integration
    let (eh, ew) = (8, 16);
    let env = SmoothEnv::TwoLobes.render(eh, ew);
    let cam = default_camera(24, 24);
    let dirs: Vec<Vec3> = (0..eh)
        .flat_map(|r| (0..ew).map(move |c| texel_direction(r, c, eh, ew).unwrap()))
        .collect();
    let rig = LightRig::with_default_labels(dirs.clone()).unwrap();
    let w = env_to_weights(&env, &rig, 0.0);
    let rasters: Vec<Vec<f64>> = dirs
        .iter()
        .map(|d| render_olat_sphere_f64(&scene, d, [1.0; 3], &cam))
        .collect();
    let sources: Vec<&[f64]> = rasters.iter().map(|r| r.as_slice()).collect();
    let relit = weighted_sum(&sources, &w.weights);
    let direct = render_env_sphere_f64(&scene, &env, &cam);
    let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let keystone = relit
        .iter()
        .zip(&direct)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;

    // convergence with rig density
    let cam = default_camera(64, 64);
    let sizes = [26, 98, 331];
    let stacks: Vec<OlatStack> = sizes
        .iter()
        .map(|&l| {
            let rig = generate_rig(l).unwrap();
            let images = rig
                .directions()
                .iter()
                .map(|d| render_olat_sphere(&scene, d, [1.0; 3], &cam))
                .collect();
            OlatStack::from_images(rig, cam.clone(), images).unwrap()
        })
        .collect();
    let mut monotone = true;
    let mut baseline = f64::INFINITY;
    let mut rows = Vec::new();
    for preset in SmoothEnv::ALL {
        let env = preset.render(64, 128);
        let direct = render_env_sphere(&scene, &env, &cam);
        let peak = direct.max_value() as f64;
        let psnrs: Vec<f64> = stacks
            .iter()
            .map(|s| {
                let w = env_to_weights(&env, &s.rig, 0.0);
                psnr(&combine(s, &w).unwrap(), &direct, peak).unwrap()
            })
            .collect();
        monotone &= psnrs.windows(2).all(|p| p[1] >= p[0]);
        baseline = baseline.min(psnrs[2]);
        rows.push(format!("{preset:?} {:.2}/{:.2}/{:.2}", psnrs[0], psnrs[1], psnrs[2]));
    }
    outcome(
        keystone <= 1e-9 && monotone && baseline >= DISCRETIZATION_BASELINE_DB - 0.01,
        format!(
            "keystone {keystone:.2e}, psnr L=26/98/331 [{}], L=331 min {baseline:.2} dB (baseline {DISCRETIZATION_BASELINE_DB:.2})",
            rows.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 4

fn alignment() -> Outcome {
    let (size, frames, block) = (256, 64, 21);
    let layout = TakeLayout::regular(frames, block).unwrap();
    let base = textured_take(size, size, frames, &layout.tracking_frames, 4);
    let per_frame = 3.0 / block as f64;
    let drift = (per_frame * 0.8, per_frame * 0.6);
    let (moved, truth) = generate_drifting_take(&base, drift, block).unwrap();

    let t = Instant::now();
    let aligned = align_take_with(&moved, &layout, 0, &FlowParams::default()).unwrap();
    let elapsed = t.elapsed();

    let (mut before, mut after) = (0.0, 0.0);
    for i in 0..frames {
        before += rmse(&moved[i], &truth[i]).unwrap();
        after += rmse(&aligned.frames[i], &truth[i]).unwrap();
    }
    let reduction = 1.0 - after / before;

    // interior only: the border has no source content to recover
    let margin = 16;
    let (mut residual, mut count) = (0.0, 0usize);
    for (i, flow) in aligned.flows.iter().enumerate() {
        let want = (drift.0 * i as f64, drift.1 * i as f64);
        for y in margin..size - margin {
            for x in margin..size - margin {
                let (dx, dy) = flow.get(x, y);
                residual += (dx as f64 - want.0).hypot(dy as f64 - want.1);
                count += 1;
            }
        }
    }
    residual /= count as f64;
    outcome(
        reduction >= 0.7 && residual <= 0.5 && elapsed < Duration::from_secs(60),
        format!(
            "rmse reduction {:.1}%, mean residual {residual:.3} px, {:.2}s",
            100.0 * reduction,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<FieldRay> {
    (0..n)
        .map(|i| {
            let target = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let origin = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 3.0);
            FieldRay {
                origin,
                direction: (target - origin).normalize(),
                light: random_direction(rng),
                stream: i as u64,
            }
        })
        .collect()
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_fraction = 1.0f64;
    let mut total_ok = 0;
    for config in 0..20u64 {
        let dims = FieldDims {
            channels: rng.gen_range(2..6),
            resolution: rng.gen_range(4..12),
            hidden: rng.gen_range(4..12),
        };
        let cfg = RaySampleConfig {
            samples: rng.gen_range(3..8),
            seed: config,
            ..RaySampleConfig::default()
        };
        let mut f = TriplaneField::init(dims, 100 + config).unwrap();
        let lay = f.layout();
        f.params[lay.b2] = rng.gen_range(0.0..2.0);
        let rays = random_rays(&mut rng, 12);
        let a: Vec<[f64; 3]> = (0..rays.len())
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let loss = |f: &TriplaneField| -> f64 {
            forward_batch(f, &rays, &cfg)
                .iter()
                .zip(&a)
                .map(|(t, a)| (0..3).map(|c| t.rgb[c] * a[c]).sum::<f64>())
                .sum()
        };
        let g = backward(&f, &forward_batch(&f, &rays, &cfg), &a).unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let texels: Vec<usize> = (0..lay.w1).filter(|&i| g[i] != 0.0).collect();
        let mut picks: Vec<usize> = (0..100)
            .map(|_| texels[rng.gen_range(0..texels.len())])
            .collect();
        for (lo, hi) in [(lay.w1, lay.b1), (lay.b1, lay.w2), (lay.w2, lay.b2), (lay.b2, lay.total)] {
            picks.extend((0..25).map(|_| rng.gen_range(lo..hi)));
        }
        let mut ok = 0;
        for &i in &picks {
            let step = 1e-4 * f.params[i].abs().max(1e-2);
            let mut fp = f.clone();
            fp.params[i] += step;
            let mut fm = f.clone();
            fm.params[i] -= step;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * step);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7 * scale);
            if err <= 1e-3 {
                ok += 1;
            }
        }
        total_ok += ok;
        worst_fraction = worst_fraction.min(ok as f64 / picks.len() as f64);
    }
    outcome(
        worst_fraction >= 0.99,
        format!(
            "{total_ok}/4000 within 1e-3, worst configuration {:.1}%",
            100.0 * worst_fraction
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn sphere_views(rig: &LightRig, cam: &CameraModel) -> Vec<TrainView> {
    let scene = default_scene();
    rig.directions()
        .iter()
        .map(|l| TrainView {
            camera: cam.clone(),
            light: *l,
            target: render_olat_sphere(&scene, l, [1.0; 3], cam),
        })
        .collect()
}

fn training() -> Outcome {
    let cam = default_camera(64, 64);
    let data = sphere_views(&generate_rig(50).unwrap(), &cam);
    let cfg = TrainConfig {
        iterations: 20_000,
        batch_rays: TRAIN_BATCH,
        mrf_crop: TRAIN_CROP,
        mrf_warmup: TRAIN_WARMUP,
        ..TrainConfig::default()
    };
    let init = TriplaneField::init(FieldDims::default(), 0).unwrap();

    let t = Instant::now();
    let trained = train(init.clone(), &data, &cfg).unwrap();
    let elapsed = t.elapsed();

    let prefix = TrainConfig {
        iterations: 50,
        mrf_warmup: 25,
        ..cfg.clone()
    };
    let r1 = train(init.clone(), &data, &prefix).unwrap();
    let r2 = train(init, &data, &prefix).unwrap();
    let identical = r1.field.to_bytes() == r2.field.to_bytes()
        && r1.losses == r2.losses
        && r1.losses[..25] == trained.losses[..25];

    let peak = data.iter().map(|v| v.target.max_value()).fold(0.0f32, f32::max) as f64;
    let eval = cfg.sampling.deterministic();
    let scene = default_scene();
    let held = generate_rig(8).unwrap();
    let mut sq = 0.0;
    let mut n = 0usize;
    for l in held.directions() {
        let got = render_olat(&trained.field, &cam, l, &eval);
        let want = render_olat_sphere(&scene, l, [1.0; 3], &cam);
        sq += rmse(&got, &want).unwrap().powi(2) * got.data.len() as f64;
        n += got.data.len();
    }
    let olat_psnr = 20.0 * (peak / (sq / n as f64).sqrt()).log10();

    let rig = generate_rig(98).unwrap();
    let field_imgs = rig
        .directions()
        .iter()
        .map(|l| render_olat(&trained.field, &cam, l, &eval))
        .collect();
    let field_stack = OlatStack::from_images(rig.clone(), cam.clone(), field_imgs).unwrap();
    let oracle_imgs = rig
        .directions()
        .iter()
        .map(|l| render_olat_sphere(&scene, l, [1.0; 3], &cam))
        .collect();
    let oracle_stack = OlatStack::from_images(rig.clone(), cam.clone(), oracle_imgs).unwrap();
    let mut env_psnr = f64::INFINITY;
    for preset in SmoothEnv::ALL {
        let w = env_to_weights(&preset.render(32, 64), &rig, 0.0);
        let want = combine(&oracle_stack, &w).unwrap();
        let got = combine(&field_stack, &w).unwrap();
        env_psnr = env_psnr.min(psnr(&got, &want, want.max_value() as f64).unwrap());
    }
    let budget = scaled_budget(Duration::from_secs(30 * 60));
    outcome(
        olat_psnr >= 28.0 && env_psnr >= 30.0 && identical && elapsed <= budget,
        format!(
            "held-out OLAT {olat_psnr:.2} dB, env relit {env_psnr:.2} dB, final loss {:.4}, reruns identical {identical}, {:.0}s (budget {:.0}s on {} cores)",
            trained.losses.last().copied().unwrap_or(f64::NAN),
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            cores()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

fn throughput() -> Outcome {
    let (size, lights) = (512, 331);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rig = generate_rig(lights).unwrap();
    let images = (0..lights)
        .map(|_| {
            let mut img = HdrImage::new(size, size);
            rng.fill(&mut img.data[..]);
            img
        })
        .collect();
    let stack = OlatStack::from_images(rig.clone(), default_camera(size, size), images).unwrap();
    let w = WeightVector::new(&rig, random_weights(&mut rng, lights)).unwrap();

    let reference = combine(&stack, &w).unwrap();
    let mut times = Vec::new();
    for _ in 0..3 {
        let t = Instant::now();
        let out = combine(&stack, &w).unwrap();
        times.push(t.elapsed());
        assert_eq!(out.data, reference.data);
    }
    times.sort();
    let median = times[1];

    let mut deterministic = true;
    for threads in [1, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| combine(&stack, &w).unwrap());
        deterministic &= out.data == reference.data;
    }
    outcome(
        median <= Duration::from_millis(500) && deterministic,
        format!(
            "median {:.3}s on {} cores, identical across 1/2/8 threads {deterministic}",
            median.as_secs_f64(),
            cores()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn reference_ssim(a: &HdrImage, b: &HdrImage, peak: f64) -> f64 {
    let (w, h) = (a.width, a.height);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = 64.0;
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y0 in 0..=h - 8 {
            for x0 in 0..=w - 8 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        let p = a.get(x, y)[c] as f64;
                        let q = b.get(x, y)[c] as f64;
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

fn codecs_and_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut hdr_worst = 0.0f64;
    let mut zeros_exact = true;
    let mut pfm_exact = true;
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let img = HdrImage::from_fn(w, h, |_, _| {
            if rng.gen_bool(0.15) {
                [0.0; 3]
            } else {
                let e = rng.gen_range(-20..20);
                [0, 1, 2].map(|_| rng.gen_range(0.0..1.0f32) * 2f32.powi(e))
            }
        });
        let back = decode_hdr(&encode_hdr(&img).unwrap()).unwrap();
        for (p, q) in img.data.chunks(3).zip(back.data.chunks(3)) {
            let m = p.iter().fold(0.0f32, |m, v| m.max(*v)) as f64;
            for c in 0..3 {
                if p[c] == 0.0 {
                    zeros_exact &= q[c] == 0.0;
                }
                if m > 0.0 {
                    hdr_worst = hdr_worst.max((p[c] as f64 - q[c] as f64).abs() / m);
                }
            }
        }
        let wide = HdrImage::from_fn(w, h, |_, _| {
            [0, 1, 2].map(|_| rng.gen_range(0.0..1.0f32) * 2f32.powi(rng.gen_range(-60..60)))
        });
        let back = decode_pfm(&encode_pfm(&wide)).unwrap();
        pfm_exact &= back.width == w
            && back.height == h
            && back.data.iter().zip(&wide.data).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut self_ssim = 0.0f64;
    let mut metric_worst = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(8..24), rng.gen_range(8..24));
        let a = random_image(&mut rng, w, h, 1.0);
        let b = random_image(&mut rng, w, h, 1.0);
        self_ssim = self_ssim.max((ssim(&a, &a, 1.0).unwrap() - 1.0).abs());

        let sq: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum();
        let ref_rmse = (sq / a.data.len() as f64).sqrt();
        let ref_psnr = 10.0 * (1.0 / (sq / a.data.len() as f64)).log10();
        let errs = [
            (rmse(&a, &b).unwrap() - ref_rmse).abs(),
            (psnr(&a, &b, 1.0).unwrap() - ref_psnr).abs(),
            (ssim(&a, &b, 1.0).unwrap() - reference_ssim(&a, &b, 1.0)).abs(),
        ];
        metric_worst = errs.iter().fold(metric_worst, |m, e| m.max(*e));
    }
    outcome(
        hdr_worst <= 2f64.powi(-8) && zeros_exact && pfm_exact && self_ssim <= 1e-9 && metric_worst <= 1e-9,
        format!(
            "hdr error {hdr_worst:.3e}, zeros exact {zeros_exact}, pfm exact {pfm_exact}, |ssim(x,x)-1| {self_ssim:.1e}, metric deviation {metric_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn random_raster(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Raster {
    Raster::new(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn idmrf() -> Outcome {
    let cfg = MrfConfig::default();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut wins = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let x = random_raster(&mut rng, 32, 32);
        let noisy = Raster {
            data: x.data.iter().map(|v| v + noise.sample(&mut rng)).collect(),
            ..x.clone()
        };
        if idmrf_loss_raster(&x, &x, &cfg).unwrap() <= idmrf_loss_raster(&noisy, &x, &cfg).unwrap() {
            wins += 1;
        }
    }

    let small = MrfConfig {
        patch_sizes: [3, 2],
        stride: 1,
        ..MrfConfig::default()
    };
    let mut worst = 0.0f64;
    let mut agree = 0;
    let mut coords = 0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(950 + seed);
        let x = random_raster(&mut rng, 8, 8);
        let y = random_raster(&mut rng, 8, 8);
        let (_, g) = idmrf_grad(&x, &y, &small).unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..x.data.len() {
            let step = 1e-4 * x.data[k].abs().max(1.0);
            let mut xp = x.clone();
            xp.data[k] += step;
            let mut xm = x.clone();
            xm.data[k] -= step;
            let fd = (idmrf_loss_raster(&xp, &y, &small).unwrap()
                - idmrf_loss_raster(&xm, &y, &small).unwrap())
                / (2.0 * step);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6 * scale);
            worst = worst.max(err);
            coords += 1;
            if err <= 1e-3 {
                agree += 1;
            }
        }
    }
    outcome(
        wins >= 19 && agree == coords,
        format!("ordering {wins}/20, gradient {agree}/{coords} within 1e-3 (worst {worst:.2e})"),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("relighting linearity and homogeneity", linearity),
        ("energy conservation of weights", energy),
        ("discretization identity", discretization),
        ("alignment", alignment),
        ("gradient correctness", gradients),
        ("toy field training", training),
        ("relight throughput", throughput),
        ("codec and metric conformance", codecs_and_metrics),
        ("id-mrf ordering and gradient", idmrf),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=9).contains(n))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
