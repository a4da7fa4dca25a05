//! Image containers and codecs.
//!
//! Everything in memory is top-left origin, row-major, interleaved RGB.
//! Radiance `.hdr` and PFM decoders normalize their on-disk orientation to
//! that layout; encoders write the canonical orientation back out.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// Linear, scene-referred RGB raster with 32-bit float storage.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    /// Wraps a raw buffer, checking the length and value invariants.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let img = HdrImage {
            width,
            height,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut img = HdrImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * 3 {
            return Err(Error::Validation(format!(
                "image buffer has {} values, expected {}x{}x3",
                self.data.len(),
                self.width,
                self.height
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!(
                "pixel value {} at index {} is negative or non-finite",
                self.data[i], i
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn row(&self, y: usize) -> &[f32] {
        let stride = self.width * 3;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn same_dims(&self, other: &HdrImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec. 709 luminance, one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect()
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

/// Display-referred 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneMapParams {
    /// Exposure in stops; radiance is scaled by `2^exposure`.
    pub exposure: f64,
    pub gamma: f64,
}

impl Default for ToneMapParams {
    fn default() -> Self {
        ToneMapParams {
            exposure: 0.0,
            gamma: 2.2,
        }
    }
}

impl ToneMapParams {
    pub fn new(exposure: f64, gamma: f64) -> Result<Self> {
        let p = ToneMapParams { exposure, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Validation(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !self.exposure.is_finite() {
            return Err(Error::Validation("exposure must be finite".into()));
        }
        Ok(())
    }
}

/// `clamp(floor(255 * (2^stops * v)^(1/gamma) + 0.5), 0, 255)` per channel.
pub fn tone_map(img: &HdrImage, params: ToneMapParams) -> LdrImage {
    let scale = params.exposure.exp2();
    let inv_gamma = 1.0 / params.gamma;
    let data = img
        .data
        .iter()
        .map(|&v| {
            let v = (scale * v as f64).max(0.0);
            let out = (255.0 * v.powf(inv_gamma) + 0.5).floor();
            out.clamp(0.0, 255.0) as u8
        })
        .collect();
    LdrImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub fn encode_png(img: &LdrImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<LdrImage> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported("only 8-bit RGB png is supported".into()));
    }
    buf.truncate(info.buffer_size());
    Ok(LdrImage {
        width: info.width as usize,
        height: info.height as usize,
        data: buf,
    })
}

// ---------------------------------------------------------------------------
// Radiance RGBE

const HDR_MAGIC: &[&str] = &["#?RADIANCE", "#?RGBE"];

/// Decodes one RGBE texel. `m * 2^(e - 136)`, zero exponent is black.
#[inline]
pub fn rgbe_to_rgb(rgbe: [u8; 4]) -> [f32; 3] {
    if rgbe[3] == 0 {
        return [0.0; 3];
    }
    let scale = (rgbe[3] as i32 - 136) as f32;
    let f = scale.exp2();
    [rgbe[0] as f32 * f, rgbe[1] as f32 * f, rgbe[2] as f32 * f]
}

/// Shared-exponent encoding with round-to-nearest mantissas.
pub fn rgb_to_rgbe(rgb: [f32; 3]) -> Result<[u8; 4]> {
    for v in rgb {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!("cannot encode radiance {v} as RGBE")));
        }
    }
    let max = rgb[0].max(rgb[1]).max(rgb[2]) as f64;
    // smallest representable mantissa step is 2^-136; anything that rounds below it is black
    if max < 2f64.powi(-136) {
        return Ok([0, 0, 0, 0]);
    }
    let (_, mut exp) = frexp(max);
    if exp > 127 {
        // saturate at the largest representable exponent
        return Ok(quantize(rgb, 127).unwrap_or([255, 255, 255, 255]));
    }
    exp = exp.max(-127);
    loop {
        match quantize(rgb, exp) {
            Some(q) => return Ok(q),
            None => exp += 1,
        }
        if exp > 127 {
            return Ok([255, 255, 255, 255]);
        }
    }
}

/// Quantizes at exponent `exp`; `None` when a mantissa would round to 256.
fn quantize(rgb: [f32; 3], exp: i32) -> Option<[u8; 4]> {
    let step = 2f64.powi(exp - 8);
    let mut out = [0u8; 4];
    for (o, v) in out.iter_mut().zip(rgb) {
        let m = (v as f64 / step).round();
        if m > 255.0 {
            return None;
        }
        *o = m as u8;
    }
    if out[..3].iter().all(|&m| m == 0) {
        return Some([0, 0, 0, 0]);
    }
    out[3] = (exp + 128) as u8;
    Some(out)
}

/// `x = f * 2^e` with `f` in `[0.5, 1)`, for positive finite `x`.
fn frexp(x: f64) -> (f64, i32) {
    let mut e = x.log2().floor() as i32 + 1;
    let mut f = x / 2f64.powi(e);
    // correct for log2 rounding near powers of two
    if f >= 1.0 {
        e += 1;
        f /= 2.0;
    } else if f < 0.5 {
        e -= 1;
        f *= 2.0;
    }
    (f, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowOrder {
    TopDown,
    BottomUp,
}

/// Incremental Radiance scanline reader.
///
/// Scanlines are produced in file order; [`HdrReader::top_down`] reports
/// whether that matches the in-memory orientation.
pub struct HdrReader<R> {
    inner: R,
    pub width: usize,
    pub height: usize,
    order: RowOrder,
    offset: usize,
    rows_read: usize,
    scratch: Vec<u8>,
}

impl<R: BufRead> HdrReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut offset = 0usize;
        let mut line = String::new();
        let read_line = |inner: &mut R, line: &mut String, offset: &mut usize| -> Result<()> {
            line.clear();
            let mut raw = Vec::new();
            let n = inner
                .read_until(b'\n', &mut raw)
                .map_err(|e| Error::Format(format!("reading header: {e}")))?;
            if n == 0 {
                return Err(Error::Truncated {
                    offset: *offset,
                    what: "header ended early".into(),
                });
            }
            *offset += n;
            if raw.last() == Some(&b'\n') {
                raw.pop();
            }
            *line = String::from_utf8_lossy(&raw).into_owned();
            Ok(())
        };

        read_line(&mut inner, &mut line, &mut offset)?;
        if !HDR_MAGIC.iter().any(|m| line.trim_end() == *m) {
            return Err(Error::Format(format!(
                "missing Radiance signature, found {line:?}"
            )));
        }
        loop {
            read_line(&mut inner, &mut line, &mut offset)?;
            let l = line.trim();
            if l.is_empty() {
                break;
            }
            if let Some(fmt) = l.strip_prefix("FORMAT=") {
                if fmt != "32-bit_rle_rgbe" {
                    return Err(Error::Unsupported(format!("pixel format {fmt}")));
                }
            }
        }
        read_line(&mut inner, &mut line, &mut offset)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad resolution line {line:?}")))
        };
        if parts.len() != 4 || parts[2] != "+X" {
            return Err(Error::Format(format!(
                "unsupported resolution line {line:?}"
            )));
        }
        let order = match parts[0] {
            "-Y" => RowOrder::TopDown,
            "+Y" => RowOrder::BottomUp,
            _ => {
                return Err(Error::Format(format!(
                    "unsupported resolution line {line:?}"
                )))
            }
        };
        let height = parse(parts[1])?;
        let width = parse(parts[3])?;
        Ok(HdrReader {
            inner,
            width,
            height,
            order,
            offset,
            rows_read: 0,
            scratch: vec![0; width * 4],
        })
    }

    pub fn top_down(&self) -> bool {
        self.order == RowOrder::TopDown
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            let n = self
                .inner
                .read(&mut buf[filled..])
                .map_err(|e| Error::Format(format!("{what}: {e}")))?;
            if n == 0 {
                return Err(Error::Truncated {
                    offset: self.offset + filled,
                    what: what.to_string(),
                });
            }
            filled += n;
        }
        self.offset += buf.len();
        Ok(())
    }

    /// Decodes the next scanline in file order into `out` (`width * 3` floats).
    pub fn read_scanline(&mut self, out: &mut [f32]) -> Result<()> {
        assert_eq!(out.len(), self.width * 3);
        if self.rows_read >= self.height {
            return Err(Error::Contract("all scanlines already read".into()));
        }
        let what = format!("scanline {}", self.rows_read);
        let w = self.width;
        let mut head = [0u8; 4];
        self.read_exact(&mut head, &what)?;
        let mut scratch = std::mem::take(&mut self.scratch);
        let is_rle = (8..32768).contains(&w)
            && head[0] == 2
            && head[1] == 2
            && (head[2] & 0x80) == 0
            && ((head[2] as usize) << 8 | head[3] as usize) == w;
        let res = if is_rle {
            self.read_rle_components(&mut scratch, &what)
        } else {
            scratch[..4].copy_from_slice(&head);
            self.read_exact(&mut scratch[4..], &what)
        };
        if let Err(e) = res {
            self.scratch = scratch;
            return Err(e);
        }
        for (x, px) in out.chunks_exact_mut(3).enumerate() {
            let texel = if is_rle {
                [
                    scratch[x],
                    scratch[w + x],
                    scratch[2 * w + x],
                    scratch[3 * w + x],
                ]
            } else {
                [
                    scratch[4 * x],
                    scratch[4 * x + 1],
                    scratch[4 * x + 2],
                    scratch[4 * x + 3],
                ]
            };
            px.copy_from_slice(&rgbe_to_rgb(texel));
        }
        self.scratch = scratch;
        self.rows_read += 1;
        Ok(())
    }

    /// Planar component runs; fills `buf` as `[r.. | g.. | b.. | e..]`.
    fn read_rle_components(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let w = self.width;
        for c in 0..4 {
            let plane = &mut buf[c * w..(c + 1) * w];
            let mut x = 0;
            while x < w {
                let mut count = [0u8; 1];
                self.read_exact(&mut count, what)?;
                let count = count[0] as usize;
                if count > 128 {
                    let run = count - 128;
                    if x + run > w {
                        return Err(Error::Format(format!("{what}: run overflows scanline")));
                    }
                    let mut v = [0u8; 1];
                    self.read_exact(&mut v, what)?;
                    plane[x..x + run].fill(v[0]);
                    x += run;
                } else {
                    if count == 0 || x + count > w {
                        return Err(Error::Format(format!("{what}: bad literal length {count}")));
                    }
                    let start = x;
                    // split borrow: read directly into the plane segment
                    let mut tmp = vec![0u8; count];
                    self.read_exact(&mut tmp, what)?;
                    plane[start..start + count].copy_from_slice(&tmp);
                    x += count;
                }
            }
        }
        Ok(())
    }
}

pub fn decode_hdr(bytes: &[u8]) -> Result<HdrImage> {
    let mut reader = HdrReader::new(bytes)?;
    let (w, h) = (reader.width, reader.height);
    let mut img = HdrImage::new(w, h);
    let top_down = reader.top_down();
    for i in 0..h {
        let y = if top_down { i } else { h - 1 - i };
        let row = &mut img.data[y * w * 3..(y + 1) * w * 3];
        reader.read_scanline(row)?;
    }
    Ok(img)
}

pub fn encode_hdr(img: &HdrImage) -> Result<Vec<u8>> {
    if img.data.len() != img.width * img.height * 3 {
        return Err(Error::Validation("image buffer size mismatch".into()));
    }
    let w = img.width;
    let mut out = Vec::with_capacity(img.data.len() + 64);
    out.extend_from_slice(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n");
    out.extend_from_slice(format!("-Y {} +X {}\n", img.height, w).as_bytes());
    let rle = (8..32768).contains(&w);
    let mut planes = vec![0u8; w * 4];
    for y in 0..img.height {
        let row = img.row(y);
        if rle {
            for (x, px) in row.chunks_exact(3).enumerate() {
                let t = rgb_to_rgbe([px[0], px[1], px[2]])?;
                for c in 0..4 {
                    planes[c * w + x] = t[c];
                }
            }
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for c in 0..4 {
                rle_encode(&planes[c * w..(c + 1) * w], &mut out);
            }
        } else {
            for px in row.chunks_exact(3) {
                out.extend_from_slice(&rgb_to_rgbe([px[0], px[1], px[2]])?);
            }
        }
    }
    Ok(out)
}

/// Run-length codes one component plane. Runs of 4+ identical bytes become
/// run packets (max 127); everything else goes out as literals (max 128).
fn rle_encode(data: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let n = data.len();
    let mut i = 0;
    while i < n {
        // find the next run of MIN_RUN or more
        let mut run_start = i;
        let mut run_len = 0;
        while run_start < n {
            run_len = 1;
            while run_start + run_len < n
                && run_len < 127
                && data[run_start + run_len] == data[run_start]
            {
                run_len += 1;
            }
            if run_len >= MIN_RUN {
                break;
            }
            run_start += run_len;
        }
        if run_len < MIN_RUN {
            run_start = n;
        }
        while i < run_start {
            let lit = (run_start - i).min(128);
            out.push(lit as u8);
            out.extend_from_slice(&data[i..i + lit]);
            i += lit;
        }
        if run_start < n {
            out.push((128 + run_len) as u8);
            out.push(data[run_start]);
            i = run_start + run_len;
        }
    }
}

// ---------------------------------------------------------------------------
// PFM

struct PfmHeader {
    tag: String,
    width: usize,
    height: usize,
    little_endian: bool,
    data_offset: usize,
}

fn parse_pfm_header(bytes: &[u8]) -> Result<PfmHeader> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    // three whitespace-separated header fields, then a single whitespace byte
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated {
                offset: pos,
                what: "PFM header".into(),
            });
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(Error::Truncated {
            offset: pos,
            what: "PFM header".into(),
        });
    }
    pos += 1;
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be nonzero".into()));
    }
    Ok(PfmHeader {
        tag: tokens[0].clone(),
        width: num(&tokens[1])?,
        height: num(&tokens[2])?,
        little_endian: scale < 0.0,
        data_offset: pos,
    })
}

fn read_floats(bytes: &[u8], header: &PfmHeader, count: usize) -> Result<Vec<f32>> {
    let body = &bytes[header.data_offset..];
    if body.len() < count * 4 {
        return Err(Error::Truncated {
            offset: header.data_offset + body.len(),
            what: format!("PFM payload needs {} bytes", count * 4),
        });
    }
    Ok(body[..count * 4]
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if header.little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect())
}

/// Flips bottom-up rows of `channels`-wide pixels into top-down order.
fn flip_rows(data: Vec<f32>, width: usize, height: usize, channels: usize) -> Vec<f32> {
    let stride = width * channels;
    let mut out = Vec::with_capacity(data.len());
    for y in (0..height).rev() {
        out.extend_from_slice(&data[y * stride..(y + 1) * stride]);
    }
    out
}

fn write_floats(out: &mut Vec<u8>, data: &[f32], width: usize, height: usize, channels: usize) {
    let stride = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * stride..(y + 1) * stride] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let header = parse_pfm_header(bytes)?;
    match header.tag.as_str() {
        "PF" => {}
        "Pf" => return Err(Error::Unsupported("grayscale PFM (Pf)".into())),
        other => return Err(Error::Format(format!("not a PFM file (tag {other:?})"))),
    }
    let data = read_floats(bytes, &header, header.width * header.height * 3)?;
    let data = flip_rows(data, header.width, header.height, 3);
    HdrImage::from_vec(header.width, header.height, data)
}

/// Little-endian PFM, bottom-up rows as the format requires.
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    write_floats(&mut out, &img.data, img.width, img.height, 3);
    out
}

/// Two-channel float raster in a PFM-style container tagged `PF2`.
pub fn encode_pf2(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("PF2\n{width} {height}\n-1.0\n").into_bytes();
    write_floats(&mut out, data, width, height, 2);
    out
}

pub fn decode_pf2(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let header = parse_pfm_header(bytes)?;
    if header.tag != "PF2" {
        return Err(Error::Format(format!(
            "expected PF2 tag, found {:?}",
            header.tag
        )));
    }
    let data = read_floats(bytes, &header, header.width * header.height * 2)?;
    Ok((
        header.width,
        header.height,
        flip_rows(data, header.width, header.height, 2),
    ))
}

// ---------------------------------------------------------------------------
// file helpers

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads `.hdr` or `.pfm` by extension.
pub fn read_image(path: &Path) -> Result<HdrImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match extension(path).as_str() {
        "hdr" => decode_hdr(&bytes),
        "pfm" => decode_pfm(&bytes),
        ext => Err(Error::Unsupported(format!("image extension {ext:?}"))),
    }
}

pub fn write_image(path: &Path, img: &HdrImage) -> Result<()> {
    let bytes = match extension(path).as_str() {
        "hdr" => encode_hdr(img)?,
        "pfm" => encode_pfm(img),
        ext => return Err(Error::Unsupported(format!("image extension {ext:?}"))),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tone-mapped 8-bit PNG of an HDR image.
pub fn png_bytes(img: &HdrImage, params: ToneMapParams) -> Result<Vec<u8>> {
    encode_png(&tone_map(img, params))
}

pub fn write_png(path: &Path, img: &HdrImage, params: ToneMapParams) -> Result<()> {
    let bytes = png_bytes(img, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Opens a buffered scanline reader on an `.hdr` file.
pub fn open_hdr(path: &Path) -> Result<HdrReader<BufReader<fs::File>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    HdrReader::new(BufReader::new(f))
}
