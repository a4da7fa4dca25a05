//! Capture alignment for OLAT takes.
//!
//! Fully lit tracking frames are interleaved with the OLAT frames. Dense flow
//! between consecutive tracking frames is chained toward a reference frame,
//! interpolated linearly in time for the OLAT frames in between, and every
//! frame is backward-warped onto the reference.
//!
//! Flow convention: `to[p] ~ from[p + flow(p)]`, so `warp(from, flow) ~ to`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{self, HdrImage};

/// Per-pixel displacement `(dx, dy)` in pixels, destination to source.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let mut f = FlowField::zeros(width, height);
        for v in f.data.chunks_exact_mut(2) {
            v[0] = dx;
            v[1] = dy;
        }
        f
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::Validation("flow buffer size mismatch".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("flow values must be finite".into()));
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    /// Mean of `(dx, dy)` over the pixels at least `margin` from the border.
    pub fn mean_interior(&self, margin: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let (dx, dy) = self.get(x, y);
                sx += dx as f64;
                sy += dy as f64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (sx / n, sy / n)
    }

    pub fn encode(&self) -> Vec<u8> {
        imagecore::encode_pf2(self.width, self.height, &self.data)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = imagecore::decode_pf2(bytes)?;
        FlowField::from_vec(w, h, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FlowField::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Which frames of a take are fully lit tracking frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TakeLayout {
    pub frame_count: usize,
    pub tracking_frames: Vec<usize>,
    pub block_size: usize,
}

impl TakeLayout {
    /// Tracking frames at every multiple of `block_size`.
    pub fn regular(frame_count: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Validation("block size must be >= 1".into()));
        }
        let layout = TakeLayout {
            frame_count,
            tracking_frames: (0..frame_count).step_by(block_size).collect(),
            block_size,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracking_frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "tracking frame indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.tracking_frames.last() {
            if last >= self.frame_count {
                return Err(Error::Validation(format!(
                    "tracking frame {last} beyond take of {} frames",
                    self.frame_count
                )));
            }
        }
        Ok(())
    }

    pub fn is_tracking(&self, frame: usize) -> bool {
        self.tracking_frames.binary_search(&frame).is_ok()
    }

    /// Bracketing tracking slots `(k0, k1, t)`; frames outside the tracked
    /// range clamp to the nearest tracking frame.
    pub fn bracket(&self, frame: usize) -> (usize, usize, f64) {
        let tf = &self.tracking_frames;
        match tf.binary_search(&frame) {
            Ok(k) => (k, k, 0.0),
            Err(0) => (0, 0, 0.0),
            Err(k) if k == tf.len() => (k - 1, k - 1, 0.0),
            Err(k) => {
                let (a, b) = (tf[k - 1], tf[k]);
                (k - 1, k, (frame - a) as f64 / (b - a) as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub levels: usize,
    /// Odd side length of the integration window.
    pub window: usize,
    pub iterations: usize,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            levels: 4,
            window: 7,
            iterations: 3,
            regularization: 1e-4,
        }
    }
}

/// Single-channel working image.
#[derive(Debug, Clone)]
struct Gray {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Gray {
    fn from_hdr(img: &HdrImage) -> Gray {
        Gray {
            w: img.width,
            h: img.height,
            data: img.luminance(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.w, self.h, 1, x, y, 0)
    }

    fn downsample(&self) -> Gray {
        let (w, h) = ((self.w / 2).max(1), (self.h / 2).max(1));
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (x0, y0) = ((2 * x).min(self.w - 1), (2 * y).min(self.h - 1));
                let (x1, y1) = ((2 * x + 1).min(self.w - 1), (2 * y + 1).min(self.h - 1));
                data[y * w + x] =
                    0.25 * (self.at(x0, y0) + self.at(x1, y0) + self.at(x0, y1) + self.at(x1, y1));
            }
        }
        Gray { w, h, data }
    }
}

/// Bilinear sample of channel `c` of a `channels`-wide raster, clamp-to-edge.
#[inline]
fn bilinear(data: &[f32], w: usize, h: usize, channels: usize, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| data[(yy * w + xx) * channels + c] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Separable box sum with clamped borders.
fn box_sum(src: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                s += src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn central_gradient(img: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let sx = (xr - xl).max(1) as f64;
            let sy = (yd - yu).max(1) as f64;
            gx[y * w + x] = (img[y * w + xr] - img[y * w + xl]) / sx;
            gy[y * w + x] = (img[yd * w + x] - img[yu * w + x]) / sy;
        }
    }
    (gx, gy)
}

/// One coarse-to-fine level of dense Lucas-Kanade refinement.
fn refine_level(from: &Gray, to: &Gray, flow: &mut [f64], params: &FlowParams) {
    let (w, h) = (from.w, from.h);
    let radius = params.window / 2;
    let to64: Vec<f64> = to.data.iter().map(|&v| v as f64).collect();
    let (tgx, tgy) = central_gradient(&to64, w, h);
    for _ in 0..params.iterations {
        let warped: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                from.sample(x + flow[2 * i], y + flow[2 * i + 1])
            })
            .collect();
        let (wgx, wgy) = central_gradient(&warped, w, h);
        let n = w * h;
        let mut ixx = vec![0.0; n];
        let mut ixy = vec![0.0; n];
        let mut iyy = vec![0.0; n];
        let mut ixt = vec![0.0; n];
        let mut iyt = vec![0.0; n];
        for i in 0..n {
            let gx = 0.5 * (wgx[i] + tgx[i]);
            let gy = 0.5 * (wgy[i] + tgy[i]);
            let it = warped[i] - to64[i];
            ixx[i] = gx * gx;
            ixy[i] = gx * gy;
            iyy[i] = gy * gy;
            ixt[i] = gx * it;
            iyt[i] = gy * it;
        }
        let [sxx, sxy, syy, sxt, syt] =
            [ixx, ixy, iyy, ixt, iyt].map(|b| box_sum(&b, w, h, radius));
        let lambda = params.regularization;
        flow.par_chunks_mut(2).enumerate().for_each(|(i, f)| {
            let (a, b, d) = (sxx[i] + lambda, sxy[i], syy[i] + lambda);
            let det = a * d - b * b;
            if det.abs() < 1e-18 {
                return;
            }
            let du = -(d * sxt[i] - b * syt[i]) / det;
            let dv = -(-b * sxt[i] + a * syt[i]) / det;
            // one pixel per step at most; larger motion belongs to coarser levels
            f[0] += du.clamp(-1.0, 1.0);
            f[1] += dv.clamp(-1.0, 1.0);
        });
    }
}

/// Dense flow with `levels` pyramid levels and the default window/iterations.
pub fn compute_flow(from: &HdrImage, to: &HdrImage, levels: usize) -> Result<FlowField> {
    compute_flow_with(
        from,
        to,
        &FlowParams {
            levels,
            ..FlowParams::default()
        },
    )
}

pub fn compute_flow_with(from: &HdrImage, to: &HdrImage, params: &FlowParams) -> Result<FlowField> {
    if !from.same_dims(to) {
        return Err(Error::Contract(format!(
            "flow inputs differ in size: {}x{} vs {}x{}",
            from.width, from.height, to.width, to.height
        )));
    }
    if params.levels == 0 {
        return Err(Error::Validation("pyramid needs at least one level".into()));
    }
    if params.window == 0 || params.window % 2 == 0 {
        return Err(Error::Validation("flow window must be odd".into()));
    }
    if from.width == 0 || from.height == 0 {
        return Ok(FlowField::zeros(from.width, from.height));
    }
    let mut pyr_from = vec![Gray::from_hdr(from)];
    let mut pyr_to = vec![Gray::from_hdr(to)];
    while pyr_from.len() < params.levels {
        let last = pyr_from.last().unwrap();
        if last.w < 16 || last.h < 16 {
            break;
        }
        let next_from = last.downsample();
        let next_to = pyr_to.last().unwrap().downsample();
        pyr_from.push(next_from);
        pyr_to.push(next_to);
    }
    let mut flow: Vec<f64> = Vec::new();
    let mut prev_dims = (0, 0);
    for level in (0..pyr_from.len()).rev() {
        let (f, t) = (&pyr_from[level], &pyr_to[level]);
        flow = if flow.is_empty() {
            vec![0.0; f.w * f.h * 2]
        } else {
            upsample_flow(&flow, prev_dims, (f.w, f.h))
        };
        refine_level(f, t, &mut flow, params);
        prev_dims = (f.w, f.h);
    }
    FlowField::from_vec(
        from.width,
        from.height,
        flow.into_iter().map(|v| v as f32).collect(),
    )
}

fn upsample_flow(flow: &[f64], (sw, sh): (usize, usize), (dw, dh): (usize, usize)) -> Vec<f64> {
    let sx = dw as f64 / sw as f64;
    let sy = dh as f64 / sh as f64;
    let src: Vec<f32> = flow.iter().map(|&v| v as f32).collect();
    let mut out = vec![0.0; dw * dh * 2];
    for y in 0..dh {
        for x in 0..dw {
            let fx = (x as f64 + 0.5) / sx - 0.5;
            let fy = (y as f64 + 0.5) / sy - 0.5;
            let i = (y * dw + x) * 2;
            out[i] = bilinear(&src, sw, sh, 2, fx, fy, 0) * sx;
            out[i + 1] = bilinear(&src, sw, sh, 2, fx, fy, 1) * sy;
        }
    }
    out
}

/// `(1 - t) * f0 + t * f1` per pixel.
pub fn interpolate_flow(f0: &FlowField, f1: &FlowField, t: f64) -> Result<FlowField> {
    if f0.width != f1.width || f0.height != f1.height {
        return Err(Error::Contract("flow fields differ in size".into()));
    }
    let t = t as f32;
    let data = f0
        .data
        .iter()
        .zip(&f1.data)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(FlowField {
        width: f0.width,
        height: f0.height,
        data,
    })
}

/// Backward warp: `out[p] = img(p + flow(p))`, bilinear, clamp-to-edge.
pub fn warp(img: &HdrImage, flow: &FlowField) -> Result<HdrImage> {
    if img.width != flow.width || img.height != flow.height {
        return Err(Error::Contract(format!(
            "image is {}x{} but flow is {}x{}",
            img.width, img.height, flow.width, flow.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut out = HdrImage::new(w, h);
    out.data.par_chunks_mut(3).enumerate().for_each(|(i, px)| {
        let (dx, dy) = (flow.data[2 * i] as f64, flow.data[2 * i + 1] as f64);
        let (x, y) = ((i % w) as f64 + dx, (i / w) as f64 + dy);
        for c in 0..3 {
            px[c] = bilinear(&img.data, w, h, 3, x, y, c) as f32;
        }
    });
    Ok(out)
}

/// `base(p) + step(p + base(p))`: follow `base`, then `step` from where it lands.
fn compose(base: &FlowField, step: &FlowField) -> FlowField {
    let (w, h) = (base.width, base.height);
    let mut data = vec![0.0f32; w * h * 2];
    data.par_chunks_mut(2).enumerate().for_each(|(i, out)| {
        let (bx, by) = (base.data[2 * i] as f64, base.data[2 * i + 1] as f64);
        let (x, y) = ((i % w) as f64 + bx, (i / w) as f64 + by);
        out[0] = (bx + bilinear(&step.data, w, h, 2, x, y, 0)) as f32;
        out[1] = (by + bilinear(&step.data, w, h, 2, x, y, 1)) as f32;
    });
    FlowField {
        width: w,
        height: h,
        data,
    }
}

/// Aligned take plus the per-frame flow used to warp each frame.
pub struct AlignedTake {
    pub frames: Vec<HdrImage>,
    pub flows: Vec<FlowField>,
}

/// Aligns every frame onto tracking frame `reference` (an index into
/// `layout.tracking_frames`).
pub fn align_take(
    frames: &[HdrImage],
    layout: &TakeLayout,
    reference: usize,
) -> Result<Vec<HdrImage>> {
    Ok(align_take_with(frames, layout, reference, &FlowParams::default())?.frames)
}

pub fn align_take_with(
    frames: &[HdrImage],
    layout: &TakeLayout,
    reference: usize,
    params: &FlowParams,
) -> Result<AlignedTake> {
    layout.validate()?;
    if frames.len() != layout.frame_count {
        return Err(Error::Validation(format!(
            "layout describes {} frames, take has {}",
            layout.frame_count,
            frames.len()
        )));
    }
    let tf = &layout.tracking_frames;
    if tf.len() < 2 {
        return Err(Error::InsufficientTracking(tf.len()));
    }
    if reference >= tf.len() {
        return Err(Error::Validation(format!(
            "reference {reference} out of range for {} tracking frames",
            tf.len()
        )));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::Validation("take frames differ in size".into()));
    }

    // pairwise flows, each toward the neighbour closer to the reference
    let steps: Vec<Option<FlowField>> = (0..tf.len())
        .into_par_iter()
        .map(|k| {
            let toward = match k.cmp(&reference) {
                std::cmp::Ordering::Equal => return Ok(None),
                std::cmp::Ordering::Greater => k - 1,
                std::cmp::Ordering::Less => k + 1,
            };
            compute_flow_with(&frames[tf[k]], &frames[tf[toward]], params).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut to_ref: Vec<FlowField> = vec![FlowField::zeros(w, h); tf.len()];
    for k in reference + 1..tf.len() {
        to_ref[k] = compose(&to_ref[k - 1], steps[k].as_ref().unwrap());
    }
    for k in (0..reference).rev() {
        to_ref[k] = compose(&to_ref[k + 1], steps[k].as_ref().unwrap());
    }

    let flows: Vec<FlowField> = (0..frames.len())
        .map(|i| {
            let (k0, k1, t) = layout.bracket(i);
            if k0 == k1 {
                Ok(to_ref[k0].clone())
            } else {
                interpolate_flow(&to_ref[k0], &to_ref[k1], t)
            }
        })
        .collect::<Result<_>>()?;
    let aligned = frames
        .par_iter()
        .zip(&flows)
        .map(|(f, flow)| warp(f, flow))
        .collect::<Result<_>>()?;
    Ok(AlignedTake {
        frames: aligned,
        flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{smooth_noise, translate};

    fn noise_image(w: usize, h: usize, seed: u64) -> HdrImage {
        let n = smooth_noise(w, h, 10.0, seed, 0.1, 1.0);
        HdrImage::from_fn(w, h, |x, y| {
            let v = n[y * w + x];
            [v, v * 0.8, v * 0.6]
        })
    }

    /// `to(p) = from(p + shift)`
    fn shifted(from: &HdrImage, dx: f64, dy: f64) -> HdrImage {
        translate(from, -dx, -dy)
    }

    fn flip_h(img: &HdrImage) -> HdrImage {
        HdrImage::from_fn(img.width, img.height, |x, y| img.get(img.width - 1 - x, y))
    }

    #[test]
    fn identical_images_give_zero_flow() {
        let a = noise_image(64, 64, 1);
        let f = compute_flow(&a, &a, 3).unwrap();
        let mean_mag: f64 = f
            .data
            .chunks(2)
            .map(|v| (v[0] as f64).hypot(v[1] as f64))
            .sum::<f64>()
            / (64.0 * 64.0);
        assert!(mean_mag <= 0.05, "{mean_mag}");
    }

    #[test]
    fn recovers_integer_shift() {
        let from = noise_image(96, 96, 2);
        let to = shifted(&from, 2.0, 0.0);
        let f = compute_flow(&from, &to, 4).unwrap();
        let (mx, my) = f.mean_interior(12);
        assert!((mx - 2.0).abs() <= 0.25 && my.abs() <= 0.25, "({mx}, {my})");
    }

    #[test]
    fn recovers_subpixel_shift() {
        let from = noise_image(96, 96, 3);
        let to = shifted(&from, 0.5, 0.5);
        let f = compute_flow(&from, &to, 4).unwrap();
        let (mx, my) = f.mean_interior(12);
        assert!(
            (mx - 0.5).abs() <= 0.25 && (my - 0.5).abs() <= 0.25,
            "({mx}, {my})"
        );
    }

    #[test]
    fn horizontal_flip_negates_dx() {
        let from = noise_image(96, 96, 4);
        let to = shifted(&from, 1.5, -1.0);
        let a = compute_flow(&from, &to, 4).unwrap().mean_interior(12);
        let b = compute_flow(&flip_h(&from), &flip_h(&to), 4)
            .unwrap()
            .mean_interior(12);
        assert!((a.0 + b.0).abs() <= 0.25, "{a:?} {b:?}");
        assert!((a.1 - b.1).abs() <= 0.25, "{a:?} {b:?}");
    }

    #[test]
    fn flow_dimension_mismatch() {
        let a = noise_image(16, 16, 5);
        let b = noise_image(17, 16, 5);
        assert!(matches!(compute_flow(&a, &b, 2), Err(Error::Contract(_))));
        assert!(warp(&a, &FlowField::zeros(3, 3)).is_err());
        assert!(interpolate_flow(&FlowField::zeros(2, 2), &FlowField::zeros(3, 2), 0.5).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let f0 = FlowField::from_vec(2, 1, vec![0.1, -3.7, 2.2, 1e-7]).unwrap();
        let f1 = FlowField::from_vec(2, 1, vec![5.5, 0.3, -1.0, 9.0]).unwrap();
        assert_eq!(interpolate_flow(&f0, &f1, 0.0).unwrap(), f0);
        assert_eq!(interpolate_flow(&f0, &f1, 1.0).unwrap(), f1);
        let a = FlowField::zeros(3, 3);
        let b = FlowField::constant(3, 3, 4.0, 2.0);
        assert_eq!(
            interpolate_flow(&a, &b, 0.25).unwrap(),
            FlowField::constant(3, 3, 1.0, 0.5)
        );
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let img = noise_image(20, 13, 6);
        assert_eq!(warp(&img, &FlowField::zeros(20, 13)).unwrap(), img);
    }

    #[test]
    fn ramp_warp() {
        let w = 10;
        let img = HdrImage::from_fn(w, 4, |x, _| [x as f32; 3]);
        let out = warp(&img, &FlowField::constant(w, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..w {
                assert_eq!(out.get(x, y)[0], (x + 1).min(w - 1) as f32);
            }
        }
    }

    #[test]
    fn warp_inverse_roundtrip() {
        let n = smooth_noise(64, 64, 32.0, 7, 0.1, 1.0);
        let img = HdrImage::from_fn(64, 64, |x, y| [n[y * 64 + x]; 3]);
        let there = warp(&img, &FlowField::constant(64, 64, 1.3, -0.6)).unwrap();
        let back = warp(&there, &FlowField::constant(64, 64, -1.3, 0.6)).unwrap();
        let (mut se, mut n) = (0.0f64, 0);
        for y in 8..56 {
            for x in 8..56 {
                let (a, b) = (img.get(x, y), back.get(x, y));
                for c in 0..3 {
                    se += ((a[c] - b[c]) as f64).powi(2);
                    n += 1;
                }
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(rmse <= 1e-3 * img.max_value() as f64, "{rmse}");
    }

    #[test]
    fn layout_brackets() {
        let layout = TakeLayout::regular(64, 21).unwrap();
        assert_eq!(layout.tracking_frames, vec![0, 21, 42, 63]);
        for i in 0..64 {
            let (k0, k1, t) = layout.bracket(i);
            if layout.is_tracking(i) {
                assert_eq!((k0, k1), (k0, k0));
            } else {
                assert_eq!(k1, k0 + 1);
                assert!(layout.tracking_frames[k0] < i && i < layout.tracking_frames[k1]);
                assert!(t > 0.0 && t < 1.0);
            }
        }
        let bad = TakeLayout {
            frame_count: 10,
            tracking_frames: vec![3, 3],
            block_size: 3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn insufficient_tracking() {
        let frames = vec![noise_image(8, 8, 1); 3];
        let layout = TakeLayout {
            frame_count: 3,
            tracking_frames: vec![0],
            block_size: 3,
        };
        assert!(matches!(
            align_take(&frames, &layout, 0),
            Err(Error::InsufficientTracking(1))
        ));
    }

    #[test]
    fn static_take_is_unchanged() {
        let img = noise_image(48, 48, 8);
        let frames = vec![img.clone(); 9];
        let layout = TakeLayout::regular(9, 4).unwrap();
        let out = align_take(&frames, &layout, 1).unwrap();
        for f in &out {
            let (mut se, mut n) = (0.0f64, 0);
            for (a, b) in f.data.iter().zip(&img.data) {
                se += ((a - b) as f64).powi(2);
                n += 1;
            }
            assert!((se / n as f64).sqrt() <= 1e-3 * img.max_value() as f64);
        }
    }

    #[test]
    fn flow_file_roundtrip() {
        let f = FlowField::from_vec(
            3,
            2,
            vec![
                0.5, -1.0, 2.0, 3.0, 0.0, 0.25, -7.0, 1.5, 4.0, 4.0, 0.1, 0.2,
            ],
        )
        .unwrap();
        assert_eq!(FlowField::decode(&f.encode()).unwrap(), f);
    }
}
