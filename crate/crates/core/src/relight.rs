//! Weighted OLAT combination.
//!
//! Every pixel is accumulated in `f64` in a fixed light order (sorted by
//! label), so the result does not depend on tiling, batching, thread count
//! or the order lights are listed in.

use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{self, HdrImage, HdrReader};
use crate::lightrig::{OlatSource, OlatStack, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Faster, not bit-compatible with [`combine`].
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlan {
    pub tile_width: usize,
    pub tile_height: usize,
    pub precision: Precision,
}

impl Default for TilePlan {
    fn default() -> Self {
        TilePlan {
            tile_width: 256,
            tile_height: 256,
            precision: Precision::F64,
        }
    }
}

impl TilePlan {
    pub fn new(tile_width: usize, tile_height: usize) -> Result<Self> {
        if tile_width == 0 || tile_height == 0 {
            return Err(Error::Validation("tile dimensions must be >= 1".into()));
        }
        Ok(TilePlan {
            tile_width,
            tile_height,
            precision: Precision::F64,
        })
    }
}

/// A rectangular piece of the relit image, row-major RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub tiles_emitted: usize,
    pub lights_used: usize,
    /// Largest number of accumulator plus source pixels held at once.
    pub peak_band_pixels: usize,
    pub aborted: bool,
}

#[inline]
fn is_zero(w: &[f64; 3]) -> bool {
    w[0] == 0.0 && w[1] == 0.0 && w[2] == 0.0
}

fn check_rig(stack: &OlatStack, w: &WeightVector) -> Result<()> {
    if !w.matches(&stack.rig) {
        return Err(Error::Contract(
            "weight vector was not computed for this stack's light rig".into(),
        ));
    }
    Ok(())
}

/// Canonical reduction order: lights sorted by label, which is invariant
/// under any joint reordering of rig and weights.
fn reduction_order(stack: &OlatStack) -> Vec<usize> {
    let labels = stack.rig.labels();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    order
}

fn active_lights(stack: &OlatStack, w: &WeightVector) -> Vec<usize> {
    reduction_order(stack)
        .into_iter()
        .filter(|&l| !is_zero(&w.weights[l]))
        .collect()
}

/// `acc[i] += w[i % 3] * src[i]` over interleaved RGB.
#[inline]
pub fn accumulate_row<T: Copy + Into<f64>>(acc: &mut [f64], src: &[T], w: [f64; 3]) {
    let n = acc.len().min(src.len()) / 3 * 3;
    let (acc, src) = (&mut acc[..n], &src[..n]);
    // four pixels per step so the weight pattern lines up with vector lanes
    let wide: [f64; 12] = std::array::from_fn(|k| w[k % 3]);
    let mut a_blocks = acc.chunks_exact_mut(12);
    let mut s_blocks = src.chunks_exact(12);
    for (a, s) in (&mut a_blocks).zip(&mut s_blocks) {
        for k in 0..12 {
            a[k] += wide[k] * s[k].into();
        }
    }
    for (a, s) in a_blocks
        .into_remainder()
        .chunks_exact_mut(3)
        .zip(s_blocks.remainder().chunks_exact(3))
    {
        a[0] += w[0] * s[0].into();
        a[1] += w[1] * s[1].into();
        a[2] += w[2] * s[2].into();
    }
}

#[inline]
fn accumulate_row_f32(acc: &mut [f32], src: &[f32], w: [f64; 3]) {
    let w = w.map(|v| v as f32);
    for (a, s) in acc.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
        a[0] += w[0] * s[0];
        a[1] += w[1] * s[1];
        a[2] += w[2] * s[2];
    }
}

/// Generic weighted sum over in-memory rasters of equal length.
pub fn weighted_sum<T: Copy + Into<f64> + Sync>(
    sources: &[&[T]],
    weights: &[[f64; 3]],
) -> Vec<f64> {
    assert_eq!(sources.len(), weights.len());
    let len = sources.first().map_or(0, |s| s.len());
    let mut acc = vec![0.0f64; len];
    for (src, w) in sources.iter().zip(weights) {
        if !is_zero(w) {
            accumulate_row(&mut acc, src, *w);
        }
    }
    acc
}

fn load_active(stack: &OlatStack, lights: &[usize]) -> Result<Vec<Arc<HdrImage>>> {
    lights
        .iter()
        .map(|&l| {
            let img = stack.image(l)?;
            stack
                .check_dims(&img)
                .map_err(|e| Error::for_light(&stack.rig.labels()[l], e))?;
            Ok(img)
        })
        .collect()
}

/// Relit image `sum_l w_l * O_l`. Lights whose weight is exactly zero are
/// never loaded.
pub fn combine(stack: &OlatStack, w: &WeightVector) -> Result<HdrImage> {
    let acc = combine_f64(stack, w)?;
    Ok(HdrImage {
        width: stack.width(),
        height: stack.height(),
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// [`combine`] before the final rounding to `f32`.
pub fn combine_f64(stack: &OlatStack, w: &WeightVector) -> Result<Vec<f64>> {
    check_rig(stack, w)?;
    let lights = active_lights(stack, w);
    let images = load_active(stack, &lights)?;
    let weights: Vec<[f64; 3]> = lights.iter().map(|&l| w.weights[l]).collect();
    let stride = stack.width() * 3;
    let mut out = vec![0.0f64; stride * stack.height()];
    if stride == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(stride).enumerate().for_each(|(y, acc)| {
        for (img, wl) in images.iter().zip(&weights) {
            accumulate_row(acc, img.row(y), *wl);
        }
    });
    Ok(out)
}

/// One OLAT frame consumed band by band, top to bottom.
enum RowStream {
    Memory(Arc<HdrImage>),
    Hdr(Box<HdrReader<BufReader<File>>>),
}

impl RowStream {
    fn open(stack: &OlatStack, l: usize) -> Result<RowStream> {
        let label = &stack.rig.labels()[l];
        if let OlatSource::File(path) = stack.source(l) {
            let is_hdr = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("hdr"));
            if is_hdr {
                let reader = imagecore::open_hdr(path).map_err(|e| Error::for_light(label, e))?;
                if reader.width != stack.width() || reader.height != stack.height() {
                    return Err(Error::for_light(
                        label,
                        Error::Validation(format!(
                            "image is {}x{}, stack is {}x{}",
                            reader.width,
                            reader.height,
                            stack.width(),
                            stack.height()
                        )),
                    ));
                }
                if reader.top_down() {
                    stack.note_decode();
                    return Ok(RowStream::Hdr(Box::new(reader)));
                }
            }
        }
        Ok(RowStream::Memory(load_active(stack, &[l])?.remove(0)))
    }

    /// Fills `buf` with rows `y0..y0 + rows`; rows are requested in order.
    fn read_band(&mut self, y0: usize, rows: usize, buf: &mut [f32], label: &str) -> Result<()> {
        match self {
            RowStream::Memory(img) => {
                let stride = img.width * 3;
                buf.copy_from_slice(&img.data[y0 * stride..(y0 + rows) * stride]);
                Ok(())
            }
            RowStream::Hdr(reader) => {
                let stride = reader.width * 3;
                for r in 0..rows {
                    reader
                        .read_scanline(&mut buf[r * stride..(r + 1) * stride])
                        .map_err(|e| Error::for_light(label, e))?;
                }
                Ok(())
            }
        }
    }
}

/// Memory-bounded [`combine`]: works through horizontal bands of
/// `tile_height` rows, streaming each contributing frame's scanlines one
/// light at a time, and hands tiles to `sink` in row-major order.
/// `sink` returns `false` to stop early.
pub fn combine_stream(
    stack: &OlatStack,
    w: &WeightVector,
    plan: TilePlan,
    mut sink: impl FnMut(Tile) -> bool,
) -> Result<StreamStats> {
    check_rig(stack, w)?;
    if plan.tile_width == 0 || plan.tile_height == 0 {
        return Err(Error::Validation("tile dimensions must be >= 1".into()));
    }
    let (width, height) = (stack.width(), stack.height());
    let lights = active_lights(stack, w);
    let mut streams: Vec<RowStream> = lights
        .iter()
        .map(|&l| RowStream::open(stack, l))
        .collect::<Result<_>>()?;
    let mut stats = StreamStats {
        lights_used: lights.len(),
        ..Default::default()
    };
    let stride = width * 3;
    let band_h = plan.tile_height.min(height.max(1));
    let mut src = vec![0.0f32; band_h * stride];
    let mut acc64 = vec![0.0f64; band_h * stride];
    let mut acc32 = vec![0.0f32; band_h * stride];
    stats.peak_band_pixels = 2 * band_h * width;

    let mut y0 = 0;
    while y0 < height {
        let rows = band_h.min(height - y0);
        let n = rows * stride;
        acc64[..n].fill(0.0);
        acc32[..n].fill(0.0);
        for (stream, &l) in streams.iter_mut().zip(&lights) {
            stream.read_band(y0, rows, &mut src[..n], &stack.rig.labels()[l])?;
            let wl = w.weights[l];
            match plan.precision {
                Precision::F64 => acc64[..n]
                    .par_chunks_mut(stride)
                    .zip(src[..n].par_chunks(stride))
                    .for_each(|(a, s)| accumulate_row(a, s, wl)),
                Precision::F32 => acc32[..n]
                    .par_chunks_mut(stride)
                    .zip(src[..n].par_chunks(stride))
                    .for_each(|(a, s)| accumulate_row_f32(a, s, wl)),
            }
        }
        let mut x0 = 0;
        while x0 < width {
            let tw = plan.tile_width.min(width - x0);
            let mut data = Vec::with_capacity(tw * rows * 3);
            for r in 0..rows {
                let base = r * stride + x0 * 3;
                match plan.precision {
                    Precision::F64 => {
                        data.extend(acc64[base..base + tw * 3].iter().map(|&v| v as f32))
                    }
                    Precision::F32 => data.extend_from_slice(&acc32[base..base + tw * 3]),
                }
            }
            stats.tiles_emitted += 1;
            let keep_going = sink(Tile {
                x: x0,
                y: y0,
                width: tw,
                height: rows,
                data,
            });
            if !keep_going {
                stats.aborted = true;
                return Ok(stats);
            }
            x0 += tw;
        }
        y0 += rows;
    }
    Ok(stats)
}

/// Writes tiles back into a full image.
pub fn assemble(width: usize, height: usize, tiles: &[Tile]) -> HdrImage {
    let mut img = HdrImage::new(width, height);
    for t in tiles {
        for r in 0..t.height {
            let dst = ((t.y + r) * width + t.x) * 3;
            img.data[dst..dst + t.width * 3]
                .copy_from_slice(&t.data[r * t.width * 3..(r + 1) * t.width * 3]);
        }
    }
    img
}

/// Relights the same stack under several weight vectors, reading each
/// contributing frame once. Element `i` equals `combine(stack, &list[i])`.
pub fn combine_many(stack: &OlatStack, list: &[WeightVector]) -> Result<Vec<HdrImage>> {
    for w in list {
        check_rig(stack, w)?;
    }
    let stride = stack.width() * 3;
    let mut accs: Vec<Vec<f64>> = list
        .iter()
        .map(|_| vec![0.0; stride * stack.height()])
        .collect();
    for l in reduction_order(stack) {
        let users: Vec<usize> = (0..list.len())
            .filter(|&i| !is_zero(&list[i].weights[l]))
            .collect();
        if users.is_empty() {
            continue;
        }
        let img = stack.load_uncached_or_cached(l)?;
        for &i in &users {
            let wl = list[i].weights[l];
            if stride == 0 {
                continue;
            }
            accs[i]
                .par_chunks_mut(stride)
                .zip(img.data.par_chunks(stride))
                .for_each(|(a, s)| accumulate_row(a, s, wl));
        }
    }
    Ok(accs
        .into_iter()
        .map(|acc| HdrImage {
            width: stack.width(),
            height: stack.height(),
            data: acc.into_iter().map(|v| v as f32).collect(),
        })
        .collect())
}

impl OlatStack {
    /// Cached frame if present or cacheable; otherwise a one-off decode.
    fn load_uncached_or_cached(&self, l: usize) -> Result<Arc<HdrImage>> {
        Ok(load_active(self, &[l])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lightrig::{CameraModel, LightRig, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_stack(
        rng: &mut ChaCha8Rng,
        lights: usize,
        w: usize,
        h: usize,
    ) -> OlatStack {
        let dirs = (0..lights)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize()
            })
            .collect();
        let rig = LightRig::with_default_labels(dirs).unwrap();
        let cam = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::zeros(),
            Vec3::y(),
            0.5,
            w,
            h,
        );
        let images = (0..lights)
            .map(|_| {
                HdrImage::from_fn(w, h, |_, _| {
                    [rng.gen(), rng.gen::<f32>() * 2.0, rng.gen::<f32>() * 0.5]
                })
            })
            .collect();
        OlatStack::from_images(rig, cam, images).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, stack: &OlatStack) -> WeightVector {
        let w = (0..stack.len())
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        WeightVector::new(&stack.rig, w).unwrap()
    }

    #[test]
    fn one_hot_selects_basis_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = random_stack(&mut rng, 5, 9, 7);
        for k in 0..5 {
            let out = combine(&stack, &WeightVector::one_hot(&stack.rig, k)).unwrap();
            assert_eq!(out, *stack.image(k).unwrap());
        }
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(&mut rng, 8, 32, 32);
        let w = random_weights(&mut rng, &stack);
        let got = combine_f64(&stack, &w).unwrap();
        for p in 0..32 * 32 {
            for c in 0..3 {
                let mut naive = 0.0f64;
                for l in 0..8 {
                    naive += w.weights[l][c] * stack.image(l).unwrap().data[p * 3 + c] as f64;
                }
                assert!((got[p * 3 + c] - naive).abs() <= 1e-12 * naive.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rig_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_stack(&mut rng, 4, 4, 4);
        let b = random_stack(&mut rng, 4, 4, 4);
        let w = WeightVector::one_hot(&b.rig, 0);
        assert!(matches!(combine(&a, &w), Err(Error::Contract(_))));
        assert!(matches!(
            combine_many(&a, &[w.clone()]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            combine_stream(&a, &w, TilePlan::default(), |_| true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stream_matches_combine_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = random_stack(&mut rng, 6, 64, 64);
        let w = random_weights(&mut rng, &stack);
        let full = combine(&stack, &w).unwrap();
        for plan in [
            TilePlan::new(16, 16).unwrap(),
            TilePlan::new(5, 11).unwrap(),
            TilePlan::new(1000, 1000).unwrap(),
        ] {
            let mut tiles = Vec::new();
            let stats = combine_stream(&stack, &w, plan, |t| {
                tiles.push(t);
                true
            })
            .unwrap();
            assert_eq!(stats.tiles_emitted, tiles.len());
            // row-major emission order
            for pair in tiles.windows(2) {
                assert!((pair[0].y, pair[0].x) < (pair[1].y, pair[1].x));
            }
            assert_eq!(assemble(64, 64, &tiles), full);
        }
    }

    #[test]
    fn aborting_sink_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = random_stack(&mut rng, 3, 32, 32);
        let before: Vec<_> = (0..3).map(|l| stack.image(l).unwrap()).collect();
        let w = random_weights(&mut rng, &stack);
        let mut count = 0;
        let stats = combine_stream(&stack, &w, TilePlan::new(8, 8).unwrap(), |_| {
            count += 1;
            false
        })
        .unwrap();
        assert!(stats.aborted);
        assert_eq!(count, 1);
        for (l, img) in before.iter().enumerate() {
            assert_eq!(**img, *stack.image(l).unwrap());
        }
    }

    #[test]
    fn combine_many_matches_individual_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = random_stack(&mut rng, 7, 12, 10);
        let mut list: Vec<_> = (0..4).map(|_| random_weights(&mut rng, &stack)).collect();
        list.push(WeightVector::one_hot(&stack.rig, 2));
        let many = combine_many(&stack, &list).unwrap();
        for (w, img) in list.iter().zip(&many) {
            assert_eq!(*img, combine(&stack, w).unwrap());
        }
        assert!(combine_many(&stack, &[]).unwrap().is_empty());
    }

    #[test]
    fn homogeneity_in_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = random_stack(&mut rng, 8, 16, 16);
        let w = random_weights(&mut rng, &stack);
        let alpha = 3.7;
        let a = combine_f64(&stack, &w.scaled(alpha)).unwrap();
        let b = combine_f64(&stack, &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - alpha * y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn joint_permutation_is_bitwise_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = random_stack(&mut rng, 6, 8, 8);
        let w = random_weights(&mut rng, &stack);
        let order = [3, 1, 5, 0, 2, 4];
        let rig = stack.rig.permuted(&order).unwrap();
        let images = order
            .iter()
            .map(|&i| (*stack.image(i).unwrap()).clone())
            .collect();
        let perm = OlatStack::from_images(rig.clone(), stack.camera.clone(), images).unwrap();
        let pw = WeightVector::new(&rig, order.iter().map(|&i| w.weights[i]).collect()).unwrap();
        let a = combine(&stack, &w).unwrap();
        let b = combine(&perm, &pw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_sum_over_f64_sources() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [0.5f64, 0.5, 0.5];
        let out = weighted_sum(&[&a[..], &b[..]], &[[2.0, 1.0, 0.0], [4.0, 4.0, 4.0]]);
        assert_eq!(out, vec![4.0, 4.0, 2.0]);
    }
}
