//! Analytic ground truth: ray-traced spheres under directional lights and
//! environment maps, synthetic rigs, and drifting capture fixtures.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{self, HdrImage};
use crate::lightrig::{
    texel_direction, texel_solid_angle, CameraJson, CameraModel, EnvMap, LightRig, Manifest,
    ManifestLight, Vec3, MANIFEST_VERSION,
};

/// Blinn-Phong plus Lambertian sphere on a black background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereScene {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
    pub specular: f64,
    pub shininess: f64,
}

impl SphereScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Validation("sphere radius must be > 0".into()));
        }
        if self.albedo.iter().any(|&a| !(a >= 0.0))
            || !(self.specular >= 0.0)
            || !(self.shininess >= 0.0)
        {
            return Err(Error::Validation(
                "albedo, specular and shininess must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Nearest intersection along a unit-direction ray: `(point, normal)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(Vec3, Vec3)> {
        let c = Vec3::from(self.center);
        let oc = origin - c;
        let b = oc.dot(dir);
        let disc = b * b - (oc.norm_squared() - self.radius * self.radius);
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
        if t <= 0.0 {
            return None;
        }
        let p = origin + dir * t;
        Some((p, (p - c) / self.radius))
    }

    /// Reflected radiance per unit light intensity, per channel:
    /// `(rho/pi) max(0, n.w) + ks max(0, n.h)^alpha`, zero when `n.w <= 0`.
    #[inline]
    pub fn shade(&self, n: &Vec3, to_eye: &Vec3, light: &Vec3) -> [f64; 3] {
        let ndl = n.dot(light);
        if ndl <= 0.0 {
            return [0.0; 3];
        }
        let h = (light + to_eye).normalize();
        let ndh = n.dot(&h).max(0.0);
        let spec = if self.specular > 0.0 {
            self.specular * ndh.powf(self.shininess)
        } else {
            0.0
        };
        self.albedo.map(|a| a / PI * ndl + spec)
    }
}

/// Per-pixel surface samples for a camera: `(normal, to_eye)` or `None` on miss.
fn surface_samples(scene: &SphereScene, camera: &CameraModel) -> Vec<Option<(Vec3, Vec3)>> {
    (0..camera.width * camera.height)
        .into_par_iter()
        .map(|i| {
            let (o, d) = camera.ray(i % camera.width, i / camera.width);
            scene.intersect(&o, &d).map(|(_, n)| (n, -d))
        })
        .collect()
}

/// OLAT frame in full precision, interleaved RGB.
pub fn render_olat_sphere_f64(
    scene: &SphereScene,
    light: &Vec3,
    intensity: [f64; 3],
    camera: &CameraModel,
) -> Vec<f64> {
    let samples = surface_samples(scene, camera);
    let mut out = vec![0.0; samples.len() * 3];
    for (px, s) in out.chunks_exact_mut(3).zip(&samples) {
        if let Some((n, v)) = s {
            let f = scene.shade(n, v, light);
            for c in 0..3 {
                px[c] = intensity[c] * f[c];
            }
        }
    }
    out
}

pub fn render_olat_sphere(
    scene: &SphereScene,
    light: &Vec3,
    intensity: [f64; 3],
    camera: &CameraModel,
) -> HdrImage {
    to_image(
        camera,
        render_olat_sphere_f64(scene, light, intensity, camera),
    )
}

/// Direct integration of the environment over every texel, full precision.
pub fn render_env_sphere_f64(scene: &SphereScene, env: &EnvMap, camera: &CameraModel) -> Vec<f64> {
    let (h, w) = (env.height(), env.width());
    let mut texels = Vec::new();
    for row in 0..h {
        let d_omega = texel_solid_angle(row, h, w).expect("env map is non-empty");
        for col in 0..w {
            let rad = env.image.get(col, row);
            if rad.iter().all(|&v| v == 0.0) {
                continue;
            }
            let dir = texel_direction(row, col, h, w).expect("in range");
            texels.push((dir, rad.map(|v| v as f64 * d_omega)));
        }
    }
    let samples = surface_samples(scene, camera);
    samples
        .par_iter()
        .flat_map_iter(|s| {
            let mut acc = [0.0f64; 3];
            if let Some((n, v)) = s {
                for (dir, intensity) in &texels {
                    let f = scene.shade(n, v, dir);
                    for c in 0..3 {
                        acc[c] += intensity[c] * f[c];
                    }
                }
            }
            acc
        })
        .collect()
}

pub fn render_env_sphere(scene: &SphereScene, env: &EnvMap, camera: &CameraModel) -> HdrImage {
    to_image(camera, render_env_sphere_f64(scene, env, camera))
}

fn to_image(camera: &CameraModel, data: Vec<f64>) -> HdrImage {
    HdrImage {
        width: camera.width,
        height: camera.height,
        data: data.into_iter().map(|v| v as f32).collect(),
    }
}

/// Fibonacci-sphere directions; a single light points along `+Y`.
pub fn generate_rig(count: usize) -> Result<LightRig> {
    if count == 0 {
        return Err(Error::Validation("rig size must be >= 1".into()));
    }
    if count == 1 {
        return LightRig::with_default_labels(vec![Vec3::new(0.0, 1.0, 0.0)]);
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    let dirs = (0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin()).normalize()
        })
        .collect();
    LightRig::with_default_labels(dirs)
}

/// The canonical toy camera: looking at the origin from `+Z`.
pub fn default_camera(width: usize, height: usize) -> CameraModel {
    CameraModel::look_at(
        Vec3::new(0.0, 0.0, 3.0),
        Vec3::zeros(),
        Vec3::y(),
        0.6,
        width,
        height,
    )
}

pub fn default_scene() -> SphereScene {
    SphereScene {
        center: [0.0; 3],
        radius: 0.7,
        albedo: [1.9, 1.5, 1.1],
        specular: 0.25,
        shininess: 12.0,
    }
}

/// Renders an OLAT stack for `rig` into `dir` as `.hdr` files plus `manifest.json`.
pub fn write_oracle_stack(
    scene: &SphereScene,
    rig: &LightRig,
    camera: &CameraModel,
    dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lights = Vec::with_capacity(rig.len());
    for (d, label) in rig.directions().iter().zip(rig.labels()) {
        let img = render_olat_sphere(scene, d, [1.0; 3], camera);
        let name = format!("{label}.hdr");
        imagecore::write_image(&dir.join(&name), &img)?;
        lights.push(ManifestLight {
            label: label.clone(),
            direction: [d.x, d.y, d.z],
            image: name,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        subject: "oracle-sphere".into(),
        session: format!("fibonacci-{}", rig.len()),
        lights,
        camera: camera.to_json(),
        tracking_frames: Vec::new(),
        block_size: None,
    };
    crate::lightrig::write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Scene file accepted by the command line: a sphere plus its camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(flatten)]
    pub scene: SphereScene,
    pub camera: CameraJson,
}

// ---------------------------------------------------------------------------
// environment presets

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothEnv {
    /// Bright zenith fading to a warm horizon, dark ground.
    Sky,
    /// Two broad colored lobes.
    TwoLobes,
    /// Low-order angular variation everywhere.
    Harmonic,
}

impl SmoothEnv {
    pub const ALL: [SmoothEnv; 3] = [SmoothEnv::Sky, SmoothEnv::TwoLobes, SmoothEnv::Harmonic];

    pub fn radiance(self, d: &Vec3) -> [f64; 3] {
        let lobe = |axis: Vec3, k: f64| (k * (d.dot(&axis.normalize()) - 1.0)).exp();
        match self {
            SmoothEnv::Sky => {
                let up = d.y.max(0.0);
                let sun = lobe(Vec3::new(0.4, 0.8, 0.6), 6.0);
                [
                    0.25 + 0.35 * up + 0.8 * sun,
                    0.25 + 0.45 * up + 0.7 * sun,
                    0.3 + 0.7 * up + 0.5 * sun,
                ]
                .map(|v| if d.y < -0.2 { v * 0.3 } else { v })
                .map(|v| v * 0.35)
            }
            SmoothEnv::TwoLobes => {
                let a = lobe(Vec3::new(0.7, 0.3, 0.8), 3.0);
                let b = lobe(Vec3::new(-0.8, 0.2, 0.5), 4.0);
                [
                    0.05 + 0.9 * a + 0.2 * b,
                    0.05 + 0.4 * a + 0.4 * b,
                    0.05 + 0.1 * a + 0.9 * b,
                ]
                .map(|v| v * 0.5)
            }
            SmoothEnv::Harmonic => {
                let base = 1.0 + 0.5 * d.y + 0.3 * d.x * d.z + 0.2 * d.z;
                [
                    0.3 * base,
                    0.25 * base + 0.05 * d.x.abs(),
                    0.2 * base + 0.1 * (1.0 - d.y * d.y),
                ]
            }
        }
    }

    pub fn render(self, height: usize, width: usize) -> EnvMap {
        let img = HdrImage::from_fn(width, height, |col, row| {
            let d = texel_direction(row, col, height, width).expect("in range");
            self.radiance(&d).map(|v| v.max(0.0) as f32)
        });
        EnvMap::new(img).expect("presets are finite and non-negative")
    }
}

// ---------------------------------------------------------------------------
// capture fixtures

/// Two-octave value noise in `[lo, hi]` with features about `cell` pixels wide.
pub fn smooth_noise(
    width: usize,
    height: usize,
    cell: f64,
    seed: u64,
    lo: f32,
    hi: f32,
) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octaves = [(cell, 0.7), (cell / 2.0, 0.3)];
    let mut out = vec![0.0f64; width * height];
    for &(size, amp) in &octaves {
        let size = size.max(1.0);
        let gw = (width as f64 / size).ceil() as usize + 2;
        let gh = (height as f64 / size).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        for y in 0..height {
            for x in 0..width {
                let gx = x as f64 / size;
                let gy = y as f64 / size;
                let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
                let s = |t: f64| t * t * (3.0 - 2.0 * t);
                let (fx, fy) = (s(gx - ix as f64), s(gy - iy as f64));
                let v = |i: usize, j: usize| lattice[j * gw + i];
                let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
                let bot = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
                out[y * width + x] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out.into_iter().map(|v| lo + (hi - lo) * v as f32).collect()
}

/// Frames of a static take: tracking frames are the fully lit texture, the
/// others are the same texture under a smoothly varying per-frame shading.
pub fn textured_take(
    width: usize,
    height: usize,
    frames: usize,
    tracking: &[usize],
    seed: u64,
) -> Vec<HdrImage> {
    let tex = smooth_noise(width, height, 14.0, seed, 0.15, 1.0);
    let tint = smooth_noise(width, height, 20.0, seed ^ 0x5eed, 0.6, 1.0);
    (0..frames)
        .map(|i| {
            let lit = tracking.contains(&i);
            let a = i as f64 * 0.61;
            let (s, c) = a.sin_cos();
            HdrImage::from_fn(width, height, |x, y| {
                let t = tex[y * width + x];
                let shade = if lit {
                    1.0
                } else {
                    let u = x as f64 / width as f64 - 0.5;
                    let v = y as f64 / height as f64 - 0.5;
                    (0.55 + 0.8 * (c * u + s * v)).clamp(0.15, 1.2) as f32
                };
                let k = tint[y * width + x];
                [t * shade, t * shade * k, t * shade * (1.6 - k)]
            })
        })
        .collect()
}

/// Bilinear sample with clamp-to-edge.
fn sample_clamped(img: &HdrImage, x: f64, y: f64) -> [f32; 3] {
    let xm = (img.width - 1) as f64;
    let ym = (img.height - 1) as f64;
    let x = x.clamp(0.0, xm);
    let y = y.clamp(0.0, ym);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (
        img.get(x0, y0),
        img.get(x1, y0),
        img.get(x0, y1),
        img.get(x1, y1),
    );
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = (top * (1.0 - fy) + bot * fy) as f32;
    }
    out
}

/// Content moved by `(dx, dy)`: `out(p) = img(p - shift)`.
pub fn translate(img: &HdrImage, dx: f64, dy: f64) -> HdrImage {
    HdrImage::from_fn(img.width, img.height, |x, y| {
        sample_clamped(img, x as f64 - dx, y as f64 - dy)
    })
}

/// Applies cumulative drift `i * drift` to frame `i`. Returns the misaligned
/// take and the untouched ground truth.
pub fn generate_drifting_take(
    base: &[HdrImage],
    drift: (f64, f64),
    block_size: usize,
) -> Result<(Vec<HdrImage>, Vec<HdrImage>)> {
    let per_block = drift.0.hypot(drift.1) * block_size as f64;
    if per_block > 5.0 + 1e-12 {
        return Err(Error::Validation(format!(
            "drift of {per_block:.3} px per block exceeds 5 px"
        )));
    }
    let moved = base
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            if drift == (0.0, 0.0) {
                f.clone()
            } else {
                translate(f, drift.0 * i as f64, drift.1 * i as f64)
            }
        })
        .collect();
    Ok((moved, base.to_vec()))
}
