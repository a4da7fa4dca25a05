//! Light rigs, OLAT stacks and environment-map weights.
//!
//! Environment maps are equirectangular with `+Y` up: row `r` of `H` spans
//! polar angles `[pi*r/H, pi*(r+1)/H]` measured from `+Y`, column `c` of `W`
//! spans azimuths `[2pi*c/W, 2pi*(c+1)/W]` measured from `+X` towards `+Z`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{self, HdrImage};

pub type Vec3 = Vector3<f64>;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LightRig {
    directions: Vec<Vec3>,
    labels: Vec<String>,
}

impl LightRig {
    pub fn new(directions: Vec<Vec3>, labels: Vec<String>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Validation(
                "light rig needs at least one light".into(),
            ));
        }
        if directions.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} directions but {} labels",
                directions.len(),
                labels.len()
            )));
        }
        for (d, label) in directions.iter().zip(&labels) {
            let n = d.norm();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "light {label}: direction {:?} has norm {n}, expected 1",
                    d.as_slice()
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, d) in directions.iter().enumerate() {
            let key = (d.x.to_bits(), d.y.to_bits(), d.z.to_bits());
            if let Some(j) = seen.insert(key, i) {
                return Err(Error::Validation(format!(
                    "lights {} and {} share a direction",
                    labels[j], labels[i]
                )));
            }
        }
        let mut seen_labels = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if seen_labels.insert(l.as_str(), i).is_some() {
                return Err(Error::Validation(format!("duplicate light label {l}")));
            }
        }
        Ok(LightRig { directions, labels })
    }

    /// Labels `light_000`, `light_001`, ...
    pub fn with_default_labels(directions: Vec<Vec3>) -> Result<Self> {
        let labels = (0..directions.len())
            .map(|i| format!("light_{i:03}"))
            .collect();
        LightRig::new(directions, labels)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Identity of the rig (directions bitwise plus labels), used to check
    /// that weights were computed for the stack they are applied to.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (d, l) in self.directions.iter().zip(&self.labels) {
            d.x.to_bits().hash(&mut h);
            d.y.to_bits().hash(&mut h);
            d.z.to_bits().hash(&mut h);
            l.hash(&mut h);
        }
        h.finish()
    }

    /// Reorders lights; `order[i]` is the old index placed at position `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<LightRig> {
        LightRig::new(
            order.iter().map(|&i| self.directions[i]).collect(),
            order.iter().map(|&i| self.labels[i].clone()).collect(),
        )
    }

    /// Index of the light with the largest dot product; ties go to the lowest index.
    #[inline]
    pub fn nearest(&self, d: &Vec3) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, l) in self.directions.iter().enumerate() {
            let dot = l.x * d.x + l.y * d.y + l.z * d.z;
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }
}

/// Pinhole camera, world-to-camera extrinsics, OpenCV axes (x right, y down,
/// z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(
                "camera image size must be nonzero".into(),
            ));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if !(err <= 1e-9) {
            return Err(Error::Validation(format!(
                "camera rotation is not orthonormal (error {err:e})"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "camera translation must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, vertical field of view in radians.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        CameraModel {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space ray through the center of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize) -> (Vec3, Vec3) {
        let d_cam = Vec3::new(
            (px as f64 + 0.5 - self.cx) / self.fx,
            (py as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let d = (self.rotation.transpose() * d_cam).normalize();
        (self.center(), d)
    }

    pub fn to_json(&self) -> CameraJson {
        let r = &self.rotation;
        CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_json(j: &CameraJson) -> Result<Self> {
        let cam = CameraModel {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            rotation: Matrix3::from_row_slice(&j.rotation),
            translation: Vec3::from_row_slice(&j.translation),
            width: j.width,
            height: j.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Equirectangular HDR environment map.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    pub image: HdrImage,
}

impl EnvMap {
    pub fn new(image: HdrImage) -> Result<Self> {
        if image.width < 1 || image.height < 1 {
            return Err(Error::Validation(
                "environment map must be at least 1x1".into(),
            ));
        }
        image.validate()?;
        Ok(EnvMap { image })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Per-light RGB weights in radiance x steradian.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<[f64; 3]>,
    rig_fingerprint: u64,
}

impl WeightVector {
    pub fn new(rig: &LightRig, weights: Vec<[f64; 3]>) -> Result<Self> {
        if weights.len() != rig.len() {
            return Err(Error::Validation(format!(
                "{} weights for a rig of {} lights",
                weights.len(),
                rig.len()
            )));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| w.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::Validation(format!(
                "weight for light {} is invalid: {w:?}",
                rig.labels()[i]
            )));
        }
        Ok(WeightVector {
            weights,
            rig_fingerprint: rig.fingerprint(),
        })
    }

    pub fn zeros(rig: &LightRig) -> Self {
        WeightVector {
            weights: vec![[0.0; 3]; rig.len()],
            rig_fingerprint: rig.fingerprint(),
        }
    }

    /// `(1,1,1)` at light `k`, zero elsewhere.
    pub fn one_hot(rig: &LightRig, k: usize) -> Self {
        let mut w = WeightVector::zeros(rig);
        w.weights[k] = [1.0; 3];
        w
    }

    /// Builds weights from `{label: [r,g,b]}`; every rig label must be present.
    pub fn from_labeled(rig: &LightRig, map: &HashMap<String, [f64; 3]>) -> Result<Self> {
        if let Some(extra) = map.keys().find(|k| rig.index_of(k).is_none()) {
            return Err(Error::Validation(format!(
                "weight for unknown light {extra}"
            )));
        }
        let weights = rig
            .labels()
            .iter()
            .map(|l| {
                map.get(l)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("no weight for light {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        WeightVector::new(rig, weights)
    }

    pub fn matches(&self, rig: &LightRig) -> bool {
        self.weights.len() == rig.len() && self.rig_fingerprint == rig.fingerprint()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Per-channel sum over lights, in light-index order.
    pub fn total(&self) -> [f64; 3] {
        let mut t = [0.0; 3];
        for w in &self.weights {
            for c in 0..3 {
                t[c] += w[c];
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> WeightVector {
        WeightVector {
            weights: self.weights.iter().map(|w| w.map(|v| v * s)).collect(),
            rig_fingerprint: self.rig_fingerprint,
        }
    }

    /// Keeps the `k` lights with the largest luminance weight (ties to the
    /// lower index) and rescales each channel so its total is unchanged.
    pub fn truncate_top_k(&self, k: usize) -> WeightVector {
        if k >= self.weights.len() {
            return self.clone();
        }
        let lum = |w: &[f64; 3]| 0.2126 * w[0] + 0.7152 * w[1] + 0.0722 * w[2];
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            lum(&self.weights[b])
                .partial_cmp(&lum(&self.weights[a]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = vec![[0.0; 3]; self.weights.len()];
        for &i in &order[..k] {
            out[i] = self.weights[i];
        }
        let before = self.total();
        let mut after = [0.0; 3];
        for w in &out {
            for c in 0..3 {
                after[c] += w[c];
            }
        }
        for w in &mut out {
            for c in 0..3 {
                if after[c] > 0.0 {
                    w[c] *= before[c] / after[c];
                }
            }
        }
        WeightVector {
            weights: out,
            rig_fingerprint: self.rig_fingerprint,
        }
    }

    /// Zeroes lights whose largest channel is at or below `threshold`.
    pub fn cull(&self, threshold: f64) -> WeightVector {
        WeightVector {
            weights: self
                .weights
                .iter()
                .map(|w| {
                    if w[0].max(w[1]).max(w[2]) <= threshold {
                        [0.0; 3]
                    } else {
                        *w
                    }
                })
                .collect(),
            rig_fingerprint: self.rig_fingerprint,
        }
    }

    pub fn to_labeled(&self, rig: &LightRig) -> Vec<(String, [f64; 3])> {
        rig.labels()
            .iter()
            .cloned()
            .zip(self.weights.iter().copied())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// environment integration

/// Solid angle of any texel in row `row` of an `height x width` lat-long map.
pub fn texel_solid_angle(row: usize, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(Error::Domain(
            "environment map dimensions must be nonzero".into(),
        ));
    }
    if row >= height {
        return Err(Error::Domain(format!(
            "row {row} out of range for height {height}"
        )));
    }
    Ok(row_solid_angle(row, height, width))
}

#[inline]
fn row_solid_angle(row: usize, height: usize, width: usize) -> f64 {
    let h = height as f64;
    (TAU / width as f64) * ((PI * row as f64 / h).cos() - (PI * (row + 1) as f64 / h).cos())
}

#[inline]
fn direction_from_angles(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, ct, st * sp)
}

/// Unit direction through the center of texel `(row, col)`.
pub fn texel_direction(row: usize, col: usize, height: usize, width: usize) -> Result<Vec3> {
    if row >= height || col >= width {
        return Err(Error::Domain(format!(
            "texel ({row}, {col}) out of range for {height}x{width}"
        )));
    }
    Ok(texel_dir(row, col, height, width, 0.0))
}

#[inline]
fn texel_dir(row: usize, col: usize, height: usize, width: usize, azimuth: f64) -> Vec3 {
    let theta = PI * (row as f64 + 0.5) / height as f64;
    let phi = TAU * (col as f64 + 0.5) / width as f64 + azimuth;
    direction_from_angles(theta, phi)
}

/// Per-light RGB weights by nearest-light binning of every texel.
///
/// Each texel direction is rotated about `+Y` by `rotation` radians (taken
/// modulo 2pi) and its radiance times solid angle is added to the light with
/// the largest dot product.
pub fn env_to_weights(env: &EnvMap, rig: &LightRig, rotation: f64) -> WeightVector {
    let azimuth = rotation.rem_euclid(TAU);
    let (h, w) = (env.height(), env.width());
    bin_texels(env, rig, |row, col| texel_dir(row, col, h, w, azimuth))
}

/// As [`env_to_weights`] with an arbitrary rotation applied to texel directions.
pub fn env_to_weights_rotated(
    env: &EnvMap,
    rig: &LightRig,
    rotation: &Matrix3<f64>,
) -> WeightVector {
    let (h, w) = (env.height(), env.width());
    bin_texels(env, rig, |row, col| {
        rotation * texel_dir(row, col, h, w, 0.0)
    })
}

fn bin_texels(
    env: &EnvMap,
    rig: &LightRig,
    dir: impl Fn(usize, usize) -> Vec3 + Sync,
) -> WeightVector {
    let (h, w) = (env.height(), env.width());
    let n = rig.len();
    // per-row partials, combined in row order below
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let d_omega = row_solid_angle(row, h, w);
            let mut acc = vec![[0.0f64; 3]; n];
            let mut touched = false;
            for (col, px) in env.image.row(row).chunks_exact(3).enumerate() {
                if px[0] == 0.0 && px[1] == 0.0 && px[2] == 0.0 {
                    continue;
                }
                touched = true;
                let l = rig.nearest(&dir(row, col));
                for c in 0..3 {
                    acc[l][c] += px[c] as f64 * d_omega;
                }
            }
            if touched {
                acc
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut weights = vec![[0.0f64; 3]; n];
    for partial in rows.iter().filter(|p| !p.is_empty()) {
        for (wl, pl) in weights.iter_mut().zip(partial) {
            for c in 0..3 {
                wl[c] += pl[c];
            }
        }
    }
    WeightVector {
        weights,
        rig_fingerprint: rig.fingerprint(),
    }
}

/// Integrated radiance `sum(radiance * solid angle)` per channel, summed per
/// row then across rows in order.
pub fn env_integral(env: &EnvMap) -> [f64; 3] {
    let (h, w) = (env.height(), env.width());
    let mut total = [0.0; 3];
    for row in 0..h {
        let d_omega = row_solid_angle(row, h, w);
        let mut acc = [0.0; 3];
        for px in env.image.row(row).chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64 * d_omega;
            }
        }
        for c in 0..3 {
            total[c] += acc[c];
        }
    }
    total
}

// ---------------------------------------------------------------------------
// OLAT stacks

#[derive(Debug, Clone)]
pub enum OlatSource {
    Memory(Arc<HdrImage>),
    File(PathBuf),
}

/// LRU cache of decoded OLAT frames bounded by a byte budget.
#[derive(Debug)]
pub struct ImageCache {
    budget: usize,
    inner: Mutex<CacheState>,
}

#[derive(Debug, Default)]
struct CacheState {
    entries: HashMap<usize, (Arc<HdrImage>, u64)>,
    bytes: usize,
    tick: u64,
}

impl ImageCache {
    pub fn new(budget: usize) -> Self {
        ImageCache {
            budget,
            inner: Mutex::new(CacheState::default()),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn bytes(&self) -> usize {
        self.inner.lock().unwrap().bytes
    }

    fn get(&self, key: usize) -> Option<Arc<HdrImage>> {
        let mut st = self.inner.lock().unwrap();
        st.tick += 1;
        let tick = st.tick;
        st.entries.get_mut(&key).map(|(img, t)| {
            *t = tick;
            img.clone()
        })
    }

    fn insert(&self, key: usize, img: Arc<HdrImage>) {
        let size = img.byte_size();
        if size > self.budget {
            return;
        }
        let mut st = self.inner.lock().unwrap();
        if st.entries.contains_key(&key) {
            return;
        }
        while st.bytes + size > self.budget {
            let victim = st
                .entries
                .iter()
                .min_by_key(|(k, (_, t))| (*t, **k))
                .map(|(k, _)| *k);
            match victim {
                Some(k) => {
                    let (old, _) = st.entries.remove(&k).unwrap();
                    st.bytes -= old.byte_size();
                }
                None => break,
            }
        }
        st.tick += 1;
        let tick = st.tick;
        st.bytes += size;
        st.entries.insert(key, (img, tick));
    }
}

pub const DEFAULT_CACHE_BUDGET: usize = 2 << 30;

/// A light rig bound to its OLAT frames plus camera metadata.
#[derive(Debug)]
pub struct OlatStack {
    pub rig: LightRig,
    pub camera: CameraModel,
    pub subject: String,
    pub session: String,
    pub tracking_frames: Vec<usize>,
    pub block_size: Option<usize>,
    sources: Vec<OlatSource>,
    cache: ImageCache,
    decodes: AtomicUsize,
}

impl OlatStack {
    pub fn from_images(rig: LightRig, camera: CameraModel, images: Vec<HdrImage>) -> Result<Self> {
        if images.len() != rig.len() {
            return Err(Error::Validation(format!(
                "{} images for a rig of {} lights",
                images.len(),
                rig.len()
            )));
        }
        for (img, label) in images.iter().zip(rig.labels()) {
            if img.width != camera.width || img.height != camera.height {
                return Err(Error::for_light(
                    label,
                    Error::Validation(format!(
                        "image is {}x{}, camera is {}x{}",
                        img.width, img.height, camera.width, camera.height
                    )),
                ));
            }
        }
        let sources = images
            .into_iter()
            .map(|i| OlatSource::Memory(Arc::new(i)))
            .collect();
        Ok(Self::with_sources(rig, camera, sources))
    }

    pub fn from_files(rig: LightRig, camera: CameraModel, paths: Vec<PathBuf>) -> Result<Self> {
        if paths.len() != rig.len() {
            return Err(Error::Validation(format!(
                "{} image paths for a rig of {} lights",
                paths.len(),
                rig.len()
            )));
        }
        let sources = paths.into_iter().map(OlatSource::File).collect();
        Ok(Self::with_sources(rig, camera, sources))
    }

    fn with_sources(rig: LightRig, camera: CameraModel, sources: Vec<OlatSource>) -> Self {
        OlatStack {
            rig,
            camera,
            subject: String::new(),
            session: String::new(),
            tracking_frames: Vec::new(),
            block_size: None,
            sources,
            cache: ImageCache::new(DEFAULT_CACHE_BUDGET),
            decodes: AtomicUsize::new(0),
        }
    }

    pub fn with_cache_budget(mut self, bytes: usize) -> Self {
        self.cache = ImageCache::new(bytes);
        self
    }

    pub fn len(&self) -> usize {
        self.rig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rig.is_empty()
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn source(&self, index: usize) -> &OlatSource {
        &self.sources[index]
    }

    pub fn cache(&self) -> &ImageCache {
        &self.cache
    }

    /// Number of file decodes performed so far.
    pub fn decode_count(&self) -> usize {
        self.decodes.load(Ordering::Relaxed)
    }

    /// The OLAT frame of light `index`, decoding (and caching) file sources on demand.
    pub fn image(&self, index: usize) -> Result<Arc<HdrImage>> {
        let label = &self.rig.labels()[index];
        match &self.sources[index] {
            OlatSource::Memory(img) => Ok(img.clone()),
            OlatSource::File(path) => {
                if let Some(img) = self.cache.get(index) {
                    return Ok(img);
                }
                let img = self
                    .decode(index, path)
                    .map_err(|e| Error::for_light(label, e))?;
                let img = Arc::new(img);
                self.cache.insert(index, img.clone());
                Ok(img)
            }
        }
    }

    /// Decodes a frame without touching the cache.
    pub fn load_uncached(&self, index: usize) -> Result<HdrImage> {
        let label = &self.rig.labels()[index];
        match &self.sources[index] {
            OlatSource::Memory(img) => Ok((**img).clone()),
            OlatSource::File(path) => self
                .decode(index, path)
                .map_err(|e| Error::for_light(label, e)),
        }
    }

    fn decode(&self, _index: usize, path: &Path) -> Result<HdrImage> {
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let img = imagecore::read_image(path)?;
        self.check_dims(&img)?;
        Ok(img)
    }

    pub(crate) fn note_decode(&self) {
        self.decodes.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn check_dims(&self, img: &HdrImage) -> Result<()> {
        if img.width != self.width() || img.height != self.height() {
            return Err(Error::Validation(format!(
                "image is {}x{}, stack is {}x{}",
                img.width,
                img.height,
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestLight {
    pub label: String,
    pub direction: [f64; 3],
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub subject: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub session: String,
    pub lights: Vec<ManifestLight>,
    pub camera: CameraJson,
    #[serde(default)]
    pub tracking_frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Reads and validates a manifest; image paths resolve relative to its directory.
pub fn load_manifest(path: &Path) -> Result<OlatStack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    stack_from_manifest(&manifest, base)
}

pub fn stack_from_manifest(manifest: &Manifest, base: &Path) -> Result<OlatStack> {
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let directions = manifest
        .lights
        .iter()
        .map(|l| Vec3::from(l.direction))
        .collect();
    let labels = manifest.lights.iter().map(|l| l.label.clone()).collect();
    let rig = LightRig::new(directions, labels)?;
    let camera = CameraModel::from_json(&manifest.camera)?;
    let mut paths = Vec::with_capacity(manifest.lights.len());
    for light in &manifest.lights {
        let p = base.join(&light.image);
        if !p.is_file() {
            return Err(Error::for_light(
                &light.label,
                Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
                ),
            ));
        }
        paths.push(p);
    }
    let mut stack = OlatStack::from_files(rig, camera, paths)?;
    stack.subject = manifest.subject.clone();
    stack.session = manifest.session.clone();
    stack.tracking_frames = manifest.tracking_frames.clone();
    stack.block_size = manifest.block_size;
    Ok(stack)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
