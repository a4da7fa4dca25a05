use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightrig::Vec3;

pub const PE_FREQUENCIES: usize = 4;
/// `d` plus `sin`/`cos` of `2^k d` for each frequency.
pub const PE_DIM: usize = 3 + 6 * PE_FREQUENCIES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDims {
    pub channels: usize,
    pub resolution: usize,
    pub hidden: usize,
}

impl Default for FieldDims {
    fn default() -> Self {
        FieldDims {
            channels: 16,
            resolution: 64,
            hidden: 64,
        }
    }
}

impl FieldDims {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::Validation(
                "field channels and hidden width must be >= 1".into(),
            ));
        }
        if self.resolution < 2 {
            return Err(Error::Validation("triplane resolution must be >= 2".into()));
        }
        Ok(())
    }

    /// Decoder input width: features, light encoding, view encoding.
    pub fn input_dim(&self) -> usize {
        self.channels + 2 * PE_DIM
    }

    pub fn layout(&self) -> ParamLayout {
        let planes = 3 * self.resolution * self.resolution * self.channels;
        let w1 = planes;
        let b1 = w1 + self.hidden * self.input_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + 4 * self.hidden;
        ParamLayout {
            plane_len: self.resolution * self.resolution * self.channels,
            w1,
            b1,
            w2,
            b2,
            total: b2 + 4,
        }
    }
}

/// Offsets into the flat parameter vector. Planes come first, each stored
/// `[row][col][channel]`; `w1` is `hidden x input`, `w2` is `4 x hidden` with
/// the density head in row 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub plane_len: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Xz, Plane::Yz];

    /// `(column, row)` coordinates of `p` on this plane.
    #[inline]
    pub fn project(self, p: &Vec3) -> (f64, f64) {
        match self {
            Plane::Xy => (p.x, p.y),
            Plane::Xz => (p.x, p.z),
            Plane::Yz => (p.y, p.z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneField {
    pub dims: FieldDims,
    pub params: Vec<f64>,
}

/// Bilinear taps of one point: offset of channel 0 of each corner and its
/// weight, four corners per plane.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Taps {
    pub offset: [usize; 12],
    pub weight: [f64; 12],
}

impl TriplaneField {
    pub fn zeros(dims: FieldDims) -> Result<Self> {
        dims.validate()?;
        Ok(TriplaneField {
            dims,
            params: vec![0.0; dims.layout().total],
        })
    }

    /// Small random planes, Xavier-uniform decoder weights and a negative
    /// density bias so empty space starts nearly transparent. Values are
    /// rounded to f32 so a fresh field survives a checkpoint round trip.
    pub fn init(dims: FieldDims, seed: u64) -> Result<Self> {
        let mut f = TriplaneField::zeros(dims)?;
        let lay = dims.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d) = (dims.hidden, dims.input_dim());
        for v in &mut f.params[..lay.w1] {
            *v = rng.gen_range(-0.1..0.1);
        }
        let a1 = (6.0 / (d + h) as f64).sqrt();
        for v in &mut f.params[lay.w1..lay.b1] {
            *v = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (h + 4) as f64).sqrt();
        for v in &mut f.params[lay.w2..lay.b2] {
            *v = rng.gen_range(-a2..a2);
        }
        f.params[lay.b2] = -1.0;
        for v in &mut f.params {
            *v = *v as f32 as f64;
        }
        Ok(f)
    }

    pub fn from_params(dims: FieldDims, params: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if params.len() != dims.layout().total {
            return Err(Error::Validation(format!(
                "field expects {} parameters, got {}",
                dims.layout().total,
                params.len()
            )));
        }
        let f = TriplaneField { dims, params };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("field parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        self.dims.layout()
    }

    pub fn plane(&self, plane: Plane) -> &[f64] {
        let n = self.layout().plane_len;
        let k = plane as usize;
        &self.params[k * n..(k + 1) * n]
    }

    pub fn plane_mut(&mut self, plane: Plane) -> &mut [f64] {
        let n = self.layout().plane_len;
        let k = plane as usize;
        &mut self.params[k * n..(k + 1) * n]
    }

    pub(crate) fn taps(&self, p: &Vec3) -> Taps {
        let n = self.dims.resolution;
        let c = self.dims.channels;
        let plane_len = n * n * c;
        let last = (n - 1) as f64;
        let mut t = Taps::default();
        for (k, plane) in Plane::ALL.iter().enumerate() {
            let (a, b) = plane.project(p);
            let gx = ((a + 1.0) * 0.5 * last).clamp(0.0, last);
            let gy = ((b + 1.0) * 0.5 * last).clamp(0.0, last);
            let x0 = (gx.floor() as usize).min(n - 2);
            let y0 = (gy.floor() as usize).min(n - 2);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let base = k * plane_len;
            let at = |x: usize, y: usize| base + (y * n + x) * c;
            let j = 4 * k;
            t.offset[j] = at(x0, y0);
            t.offset[j + 1] = at(x0 + 1, y0);
            t.offset[j + 2] = at(x0, y0 + 1);
            t.offset[j + 3] = at(x0 + 1, y0 + 1);
            t.weight[j] = (1.0 - fx) * (1.0 - fy);
            t.weight[j + 1] = fx * (1.0 - fy);
            t.weight[j + 2] = (1.0 - fx) * fy;
            t.weight[j + 3] = fx * fy;
        }
        t
    }

    pub(crate) fn gather(&self, taps: &Taps, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let c = self.dims.channels;
        for (off, w) in taps.offset.iter().zip(&taps.weight) {
            if *w == 0.0 {
                continue;
            }
            axpy(*w, &self.params[*off..*off + c], out);
        }
    }

    /// Light and view part of the first layer plus its bias.
    pub(crate) fn direction_preactivation(&self, pe: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let (h, d, c) = (self.dims.hidden, self.dims.input_dim(), self.dims.channels);
        (0..h)
            .map(|k| {
                self.params[lay.b1 + k]
                    + dot(&self.params[lay.w1 + k * d + c..lay.w1 + (k + 1) * d], pe)
            })
            .collect()
    }

    /// Feature block of the first layer, transposed to `[channel][hidden]`.
    pub(crate) fn feature_weights_t(&self) -> Vec<f64> {
        let lay = self.layout();
        let (h, d, c) = (self.dims.hidden, self.dims.input_dim(), self.dims.channels);
        let mut t = vec![0.0; c * h];
        for k in 0..h {
            for j in 0..c {
                t[j * h + k] = self.params[lay.w1 + k * d + j];
            }
        }
        t
    }

    /// Hidden activations and the four raw head outputs for one feature;
    /// `wt` comes from [`TriplaneField::feature_weights_t`].
    pub(crate) fn mlp(
        &self,
        wt: &[f64],
        feature: &[f64],
        dir_pre: &[f64],
        hidden: &mut [f64],
    ) -> [f64; 4] {
        let lay = self.layout();
        let h = self.dims.hidden;
        hidden.copy_from_slice(dir_pre);
        for (j, fj) in feature.iter().enumerate() {
            axpy(*fj, &wt[j * h..(j + 1) * h], hidden);
        }
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = [0.0; 4];
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.params[lay.b2 + m]
                + dot(&self.params[lay.w2 + m * h..lay.w2 + (m + 1) * h], hidden);
        }
        out
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four fixed accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Projection-and-sum triplane feature at `p`; coordinates outside the cube
/// clamp to its faces.
pub fn sample_triplane(field: &TriplaneField, p: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; field.dims.channels];
    field.gather(&field.taps(p), &mut out);
    out
}

pub fn positional_encoding(d: &Vec3) -> [f64; PE_DIM] {
    let mut out = [0.0; PE_DIM];
    out[..3].copy_from_slice(d.as_slice());
    for k in 0..PE_FREQUENCIES {
        let f = (1u32 << k) as f64;
        for i in 0..3 {
            out[3 + 6 * k + i] = (f * d[i]).sin();
            out[6 + 6 * k + i] = (f * d[i]).cos();
        }
    }
    out
}

/// Light then view encodings, the direction block of the decoder input.
pub(crate) fn direction_encoding(light: &Vec3, view: &Vec3) -> Vec<f64> {
    let mut pe = Vec::with_capacity(2 * PE_DIM);
    pe.extend_from_slice(&positional_encoding(light));
    pe.extend_from_slice(&positional_encoding(view));
    pe
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub sigma: f64,
    pub rgb: [f64; 3],
    /// Set when a direction was not unit length and had to be normalized.
    pub renormalized: bool,
}

pub(crate) fn unit_or_normalized(d: &Vec3) -> (Vec3, bool) {
    let n = d.norm();
    if (n - 1.0).abs() <= 1e-9 || n == 0.0 {
        (*d, false)
    } else {
        (d / n, true)
    }
}

pub fn decode(field: &TriplaneField, feature: &[f64], light: &Vec3, view: &Vec3) -> Decoded {
    let (l, rl) = unit_or_normalized(light);
    let (v, rv) = unit_or_normalized(view);
    let dir_pre = field.direction_preactivation(&direction_encoding(&l, &v));
    let mut hidden = vec![0.0; field.dims.hidden];
    let out = field.mlp(&field.feature_weights_t(), feature, &dir_pre, &mut hidden);
    Decoded {
        sigma: softplus(out[0]),
        rgb: [sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])],
        renormalized: rl || rv,
    }
}
