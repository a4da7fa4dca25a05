use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::{
    axpy, direction_encoding, sigmoid, softplus, unit_or_normalized, Taps, TriplaneField,
};
use crate::error::{Error, Result};
use crate::imagecore::HdrImage;
use crate::lightrig::{CameraModel, Vec3};

/// Rays per gradient buffer; fixed so the reduction order never depends on
/// the thread count.
const GRAD_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySampleConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub seed: u64,
    /// Marching stops once transmittance falls below this; 0 marches every sample.
    #[serde(default)]
    pub min_transmittance: f64,
}

impl Default for RaySampleConfig {
    fn default() -> Self {
        RaySampleConfig {
            samples: 32,
            near: 2.0,
            far: 4.0,
            stratified: true,
            seed: 0,
            min_transmittance: 0.0,
        }
    }
}

impl RaySampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Validation("at least 2 samples per ray".into()));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return Err(Error::Validation(format!(
                "need near < far, got {} and {}",
                self.near, self.far
            )));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::Validation(
                "termination threshold must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }

    pub fn deterministic(self) -> Self {
        RaySampleConfig {
            stratified: false,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    /// Transmittance left after the last sample.
    pub transmittance: f64,
    /// `T_i * alpha_i` per sample.
    pub weights: Vec<f64>,
}

/// Alpha compositing over a black background.
pub fn composite(sigmas: &[f64], deltas: &[f64], colors: &[[f64; 3]]) -> Composite {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    for ((s, d), c) in sigmas.iter().zip(deltas).zip(colors) {
        let decay = (-s * d).exp();
        let w = t * (1.0 - decay);
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        weights.push(w);
        t *= decay;
    }
    Composite {
        rgb,
        transmittance: t,
        weights,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub light: Vec3,
    /// Jitter stream; distinct rays should use distinct streams.
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAux {
    pub t: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput {
    pub rgb: [f64; 3],
    pub transmittance: f64,
    pub samples: Vec<SampleAux>,
}

/// Forward record of one ray, enough to run [`backward`].
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub rgb: [f64; 3],
    pub transmittance: f64,
    pub renormalized: bool,
    delta: f64,
    pe: Vec<f64>,
    ts: Vec<f64>,
    taps: Vec<Taps>,
    features: Vec<f64>,
    hidden: Vec<f64>,
    sigma: Vec<f64>,
    /// `d sigma / d raw`, the logistic of the raw density output.
    sigma_slope: Vec<f64>,
    colors: Vec<[f64; 3]>,
    weights: Vec<f64>,
    t_after: Vec<f64>,
}

impl RayTrace {
    pub fn samples(&self) -> Vec<SampleAux> {
        (0..self.ts.len())
            .map(|i| SampleAux {
                t: self.ts[i],
                sigma: self.sigma[i],
                rgb: self.colors[i],
                weight: self.weights[i],
            })
            .collect()
    }
}

fn sample_positions(cfg: &RaySampleConfig, stream: u64) -> Vec<f64> {
    let delta = cfg.delta();
    if cfg.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        (0..cfg.samples)
            .map(|i| cfg.near + (i as f64 + rng.gen::<f64>()) * delta)
            .collect()
    } else {
        (0..cfg.samples)
            .map(|i| cfg.near + (i as f64 + 0.5) * delta)
            .collect()
    }
}

pub(crate) fn trace_ray(
    field: &TriplaneField,
    wt: &[f64],
    ray: &FieldRay,
    cfg: &RaySampleConfig,
) -> RayTrace {
    let (c, h) = (field.dims.channels, field.dims.hidden);
    let (dir, rd) = unit_or_normalized(&ray.direction);
    let (light, rl) = unit_or_normalized(&ray.light);
    let pe = direction_encoding(&light, &(-dir));
    let dir_pre = field.direction_preactivation(&pe);
    let ts = sample_positions(cfg, ray.stream);
    let delta = cfg.delta();
    let s = ts.len();
    let mut tr = RayTrace {
        rgb: [0.0; 3],
        transmittance: 1.0,
        renormalized: rd || rl,
        delta,
        pe,
        taps: Vec::with_capacity(s),
        features: vec![0.0; s * c],
        hidden: vec![0.0; s * h],
        sigma: Vec::with_capacity(s),
        sigma_slope: Vec::with_capacity(s),
        colors: Vec::with_capacity(s),
        weights: Vec::with_capacity(s),
        t_after: Vec::with_capacity(s),
        ts,
    };
    let mut t_acc = 1.0;
    for i in 0..s {
        let p = ray.origin + dir * tr.ts[i];
        let taps = field.taps(&p);
        let feat = &mut tr.features[i * c..(i + 1) * c];
        field.gather(&taps, feat);
        let out = field.mlp(wt, feat, &dir_pre, &mut tr.hidden[i * h..(i + 1) * h]);
        let sigma = softplus(out[0]);
        let col = [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])];
        let decay = (-sigma * delta).exp();
        let w = t_acc * (1.0 - decay);
        for k in 0..3 {
            tr.rgb[k] += w * col[k];
        }
        t_acc *= decay;
        tr.taps.push(taps);
        tr.sigma.push(sigma);
        tr.sigma_slope.push(sigmoid(out[0]));
        tr.colors.push(col);
        tr.weights.push(w);
        tr.t_after.push(t_acc);
        if t_acc < cfg.min_transmittance {
            tr.ts.truncate(i + 1);
            break;
        }
    }
    tr.transmittance = t_acc;
    tr
}

pub fn forward_batch(
    field: &TriplaneField,
    rays: &[FieldRay],
    cfg: &RaySampleConfig,
) -> Vec<RayTrace> {
    let wt = field.feature_weights_t();
    rays.par_iter()
        .map(|r| trace_ray(field, &wt, r, cfg))
        .collect()
}

pub fn render_ray(
    field: &TriplaneField,
    origin: &Vec3,
    direction: &Vec3,
    light: &Vec3,
    cfg: &RaySampleConfig,
) -> RayOutput {
    let tr = trace_ray(
        field,
        &field.feature_weights_t(),
        &FieldRay {
            origin: *origin,
            direction: *direction,
            light: *light,
            stream: 0,
        },
        cfg,
    );
    RayOutput {
        rgb: tr.rgb,
        transmittance: tr.transmittance,
        samples: tr.samples(),
    }
}

/// Renders every pixel of `camera`; pixel `i` uses jitter stream `i`.
pub fn render_olat(
    field: &TriplaneField,
    camera: &CameraModel,
    light: &Vec3,
    cfg: &RaySampleConfig,
) -> HdrImage {
    let (w, h) = (camera.width, camera.height);
    let mut img = HdrImage::new(w, h);
    let wt = field.feature_weights_t();
    img.data.par_chunks_mut(3).enumerate().for_each(|(i, px)| {
        let (origin, direction) = camera.ray(i % w, i / w);
        let tr = trace_ray(
            field,
            &wt,
            &FieldRay {
                origin,
                direction,
                light: *light,
                stream: i as u64,
            },
            cfg,
        );
        for k in 0..3 {
            px[k] = tr.rgb[k] as f32;
        }
    });
    img
}

struct Scratch {
    dpre: Vec<f64>,
    dir_acc: Vec<f64>,
    dfeat: Vec<f64>,
}

fn backward_ray(
    field: &TriplaneField,
    tr: &RayTrace,
    g: &[f64; 3],
    grad: &mut [f64],
    scratch: &mut Scratch,
) {
    let Scratch {
        dpre,
        dir_acc,
        dfeat,
    } = scratch;
    let lay = field.layout();
    let (c, h, d) = (
        field.dims.channels,
        field.dims.hidden,
        field.dims.input_dim(),
    );
    let p = &field.params;
    dir_acc.iter_mut().for_each(|v| *v = 0.0);
    // sum over later samples of w_k (g . c_k)
    let mut later = 0.0;
    for i in (0..tr.ts.len()).rev() {
        let col = tr.colors[i];
        let gc = g[0] * col[0] + g[1] * col[1] + g[2] * col[2];
        let d_sigma = tr.delta * (tr.t_after[i] * gc - later);
        later += tr.weights[i] * gc;
        let w = tr.weights[i];
        let dout = [
            d_sigma * tr.sigma_slope[i],
            w * g[0] * col[0] * (1.0 - col[0]),
            w * g[1] * col[1] * (1.0 - col[1]),
            w * g[2] * col[2] * (1.0 - col[2]),
        ];
        if dout.iter().all(|v| *v == 0.0) {
            continue;
        }
        let hid = &tr.hidden[i * h..(i + 1) * h];
        dpre.iter_mut().for_each(|v| *v = 0.0);
        for (m, dm) in dout.iter().enumerate() {
            grad[lay.b2 + m] += dm;
            axpy(*dm, hid, &mut grad[lay.w2 + m * h..lay.w2 + (m + 1) * h]);
            axpy(*dm, &p[lay.w2 + m * h..lay.w2 + (m + 1) * h], dpre);
        }
        for (dk, hk) in dpre.iter_mut().zip(hid) {
            if *hk <= 0.0 {
                *dk = 0.0;
            }
        }
        let feat = &tr.features[i * c..(i + 1) * c];
        dfeat.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            let dk = dpre[k];
            if dk == 0.0 {
                continue;
            }
            grad[lay.b1 + k] += dk;
            dir_acc[k] += dk;
            let base = lay.w1 + k * d;
            axpy(dk, feat, &mut grad[base..base + c]);
            axpy(dk, &p[base..base + c], dfeat);
        }
        let taps = &tr.taps[i];
        for (off, tw) in taps.offset.iter().zip(&taps.weight) {
            if *tw != 0.0 {
                axpy(*tw, dfeat, &mut grad[*off..*off + c]);
            }
        }
    }
    for k in 0..h {
        let dk = dir_acc[k];
        if dk != 0.0 {
            let base = lay.w1 + k * d + c;
            axpy(dk, &tr.pe, &mut grad[base..base + tr.pe.len()]);
        }
    }
}

/// Gradient of a scalar loss with respect to every field parameter, given
/// `d loss / d rgb` for each traced ray.
pub fn backward(
    field: &TriplaneField,
    traces: &[RayTrace],
    loss_grads: &[[f64; 3]],
) -> Result<Vec<f64>> {
    if traces.len() != loss_grads.len() {
        return Err(Error::Contract(format!(
            "{} traces but {} loss gradients",
            traces.len(),
            loss_grads.len()
        )));
    }
    let total = field.layout().total;
    let h = field.dims.hidden;
    let partials: Vec<Vec<f64>> = traces
        .par_chunks(GRAD_CHUNK)
        .zip(loss_grads.par_chunks(GRAD_CHUNK))
        .map(|(trs, gs)| {
            let mut grad = vec![0.0; total];
            let mut scratch = Scratch {
                dpre: vec![0.0; h],
                dir_acc: vec![0.0; h],
                dfeat: vec![0.0; field.dims.channels],
            };
            for (tr, g) in trs.iter().zip(gs) {
                if g.iter().any(|v| *v != 0.0) {
                    backward_ray(field, tr, g, &mut grad, &mut scratch);
                }
            }
            grad
        })
        .collect();
    let mut it = partials.into_iter();
    let mut grad = it.next().unwrap_or_else(|| vec![0.0; total]);
    for part in it {
        grad.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflectfield::field::FieldDims;
    use std::f64::consts::LN_2;

    fn tiny_dims() -> FieldDims {
        FieldDims {
            channels: 4,
            resolution: 8,
            hidden: 8,
        }
    }

    #[test]
    fn empty_space() {
        let c = composite(&[0.0; 5], &[0.3; 5], &[[0.9, 0.1, 0.4]; 5]);
        assert_eq!(c.rgb, [0.0; 3]);
        assert_eq!(c.transmittance, 1.0);
    }

    #[test]
    fn opaque_single_sample() {
        let c = composite(&[f64::INFINITY], &[0.1], &[[0.2, 0.4, 0.6]]);
        assert_eq!(c.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(c.transmittance, 0.0);
    }

    #[test]
    fn two_sample_hand_evaluation() {
        let c = composite(
            &[LN_2, f64::INFINITY],
            &[1.0, 1.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        for (a, b) in c.rgb.iter().zip([0.5, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn random_rays(n: usize, seed: u64) -> Vec<FieldRay> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let target = Vec3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                );
                let origin = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 3.0);
                let light =
                    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize();
                FieldRay {
                    origin,
                    direction: (target - origin).normalize(),
                    light,
                    stream: i as u64,
                }
            })
            .collect()
    }

    #[test]
    fn weights_and_transmittance_partition_unity() {
        let f = TriplaneField::init(tiny_dims(), 1).unwrap();
        let mut cfg = RaySampleConfig::default();
        cfg.samples = 16;
        for tr in forward_batch(&f, &random_rays(50, 2), &cfg) {
            let s: f64 = tr.weights.iter().sum::<f64>() + tr.transmittance;
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(tr.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn zero_density_renders_black() {
        let mut f = TriplaneField::zeros(tiny_dims()).unwrap();
        let lay = f.layout();
        f.params[lay.b2] = -800.0;
        let cam = crate::oracle::default_camera(8, 8);
        let img = render_olat(&f, &cam, &Vec3::y(), &RaySampleConfig::default());
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_is_reproducible() {
        let f = TriplaneField::init(tiny_dims(), 5).unwrap();
        let cam = crate::oracle::default_camera(16, 16);
        let cfg = RaySampleConfig {
            seed: 9,
            ..RaySampleConfig::default()
        };
        let a = render_olat(&f, &cam, &Vec3::x(), &cfg);
        assert_eq!(a, render_olat(&f, &cam, &Vec3::x(), &cfg));
        assert_ne!(
            a,
            render_olat(&f, &cam, &Vec3::x(), &RaySampleConfig { seed: 10, ..cfg })
        );
    }

    #[test]
    fn render_ray_matches_composite() {
        let f = TriplaneField::init(tiny_dims(), 6).unwrap();
        let cfg = RaySampleConfig::default().deterministic();
        let out = render_ray(&f, &Vec3::new(0.0, 0.0, 3.0), &-Vec3::z(), &Vec3::y(), &cfg);
        let sig: Vec<f64> = out.samples.iter().map(|s| s.sigma).collect();
        let col: Vec<[f64; 3]> = out.samples.iter().map(|s| s.rgb).collect();
        let c = composite(&sig, &vec![cfg.delta(); sig.len()], &col);
        assert_eq!(c.rgb, out.rgb);
        assert_eq!(c.transmittance, out.transmittance);
        assert!((out.samples[0].t - 2.0 - 0.5 * cfg.delta()).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let f = TriplaneField::init(tiny_dims(), 3).unwrap();
        let traces = forward_batch(&f, &random_rays(10, 3), &RaySampleConfig::default());
        let g = backward(&f, &traces, &vec![[0.0; 3]; 10]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(backward(&f, &traces, &[[0.0; 3]]).is_err());
    }

    fn linear_loss(
        f: &TriplaneField,
        rays: &[FieldRay],
        cfg: &RaySampleConfig,
        a: &[[f64; 3]],
    ) -> f64 {
        forward_batch(f, rays, cfg)
            .iter()
            .zip(a)
            .map(|(t, a)| t.rgb.iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = FieldDims {
            channels: 4,
            resolution: 8,
            hidden: 8,
        };
        let cfg = RaySampleConfig {
            samples: 4,
            ..RaySampleConfig::default()
        };
        let mut f = TriplaneField::init(dims, 21).unwrap();
        // a denser field so every layer sees signal
        let lay = f.layout();
        f.params[lay.b2] = 1.0;
        let rays = random_rays(16, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a: Vec<[f64; 3]> = (0..16)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let g = backward(&f, &forward_batch(&f, &rays, &cfg), &a).unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let touched: Vec<usize> = (0..lay.w1).filter(|&i| g[i] != 0.0).collect();
        assert!(!touched.is_empty());
        let mut picks: Vec<usize> = (0..100)
            .map(|_| touched[rng.gen_range(0..touched.len())])
            .collect();
        picks.extend((0..100).map(|_| rng.gen_range(lay.w1..lay.total)));
        let mut ok = 0;
        for &i in &picks {
            let step = 1e-4 * f.params[i].abs().max(1e-2);
            let mut fp = f.clone();
            fp.params[i] += step;
            let mut fm = f.clone();
            fm.params[i] -= step;
            let fd = (linear_loss(&fp, &rays, &cfg, &a) - linear_loss(&fm, &rays, &cfg, &a))
                / (2.0 * step);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7 * scale);
            if err <= 1e-3 {
                ok += 1;
            }
        }
        assert!(ok >= 198, "{ok}/200");
        assert!(g[lay.b2] != 0.0);
    }

    #[test]
    fn backward_is_thread_count_invariant() {
        let f = TriplaneField::init(tiny_dims(), 8).unwrap();
        let rays = random_rays(300, 9);
        let cfg = RaySampleConfig::default();
        let gs = vec![[0.3, -0.2, 0.1]; 300];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| backward(&f, &forward_batch(&f, &rays, &cfg), &gs).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
