//! Readers and writers for images (binary PNM and PNG), `.flo` optical
//! flow, PFM depth maps and camera intrinsics.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use arapdepth_core::geometry::{backproject_ray, range_to_zdepth, zdepth_to_range};
use arapdepth_core::{CameraIntrinsics, DepthMap, FlowField, Image};
use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{AppError, AppResult};

pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// How depth values are stored on disk. Internally depth is always the
/// range along the unit pixel ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthConvention {
    Range,
    Z,
}

impl std::str::FromStr for DepthConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "range" => Ok(DepthConvention::Range),
            "z" => Ok(DepthConvention::Z),
            _ => Err(format!("depth convention must be 'range' or 'z', got '{s}'")),
        }
    }
}

impl std::fmt::Display for DepthConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthConvention::Range => "range",
            DepthConvention::Z => "z",
        })
    }
}

fn read_bytes(path: &Path) -> AppResult<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> AppResult<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Whitespace/comment-aware tokenizer over a Netpbm-style header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: bool,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' if self.comments => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, path: &Path, what: &str) -> AppResult<(&'a str, u64)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(AppError::parse(path, start as u64, format!("expected {what}, found end of file")));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| AppError::parse(path, start as u64, format!("expected {what}")))?;
        Ok((tok, start as u64))
    }

    fn number<T: std::str::FromStr>(&mut self, path: &Path, what: &str) -> AppResult<T> {
        let (tok, at) = self.token(path, what)?;
        tok.parse().map_err(|_| AppError::parse(path, at, format!("invalid {what} '{tok}'")))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end(&mut self, path: &Path) -> AppResult<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(AppError::parse(path, self.pos as u64, "header must end with one whitespace byte")),
        }
    }
}

fn positive_dims(path: &Path, w: usize, h: usize, at: u64) -> AppResult<()> {
    if w == 0 || h == 0 {
        return Err(AppError::parse(path, at, format!("invalid dimensions {w}x{h}")));
    }
    Ok(())
}

fn read_pnm(path: &Path, bytes: &[u8]) -> AppResult<Image> {
    let mut hdr = Header { bytes, pos: 0, comments: true };
    let (magic, _) = hdr.token(path, "magic number")?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(AppError::parse(path, 0, format!("unsupported magic '{magic}' (expected P5 or P6)"))),
    };
    let w: usize = hdr.number(path, "width")?;
    let h: usize = hdr.number(path, "height")?;
    let max_at = hdr.pos as u64;
    let maxval: u32 = hdr.number(path, "maxval")?;
    positive_dims(path, w, h, max_at)?;
    if !(1..=65535).contains(&maxval) {
        return Err(AppError::parse(path, max_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let start = hdr.end(path)?;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = w * h * channels * sample;
    let data = &bytes[start..];
    if data.len() < need {
        return Err(AppError::parse(
            path,
            bytes.len() as u64,
            format!("truncated raster: expected {need} bytes, found {}", data.len()),
        ));
    }
    let max = maxval as f64;
    let value = |k: usize| -> f64 {
        let raw = if sample == 2 { BigEndian::read_u16(&data[2 * k..]) as u32 } else { data[k] as u32 };
        raw as f64 / max
    };
    let pixels = (0..w * h)
        .map(|i| {
            if channels == 1 {
                let g = value(i);
                [g, g, g]
            } else {
                [value(3 * i), value(3 * i + 1), value(3 * i + 2)]
            }
        })
        .collect();
    Ok(Image::new(w, h, pixels)?)
}

fn is_gray(img: &Image) -> bool {
    img.pixels().iter().all(|p| p[0] == p[1] && p[1] == p[2])
}

fn quantize(v: f64, depth: BitDepth) -> u16 {
    (v.clamp(0.0, 1.0) * depth.max()).round() as u16
}

fn encode_pnm(img: &Image, depth: BitDepth) -> Vec<u8> {
    let gray = is_gray(img);
    let mut out = format!(
        "{}\n{} {}\n{}\n",
        if gray { "P5" } else { "P6" },
        img.width(),
        img.height(),
        depth.max() as u32
    )
    .into_bytes();
    for p in img.pixels() {
        for &c in if gray { &p[..1] } else { &p[..] } {
            let q = quantize(c, depth);
            match depth {
                BitDepth::Eight => out.push(q as u8),
                BitDepth::Sixteen => out.write_u16::<BigEndian>(q).expect("in-memory write"),
            }
        }
    }
    out
}

fn read_png(path: &Path, bytes: &[u8]) -> AppResult<Image> {
    let decoded = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map_err(|e| AppError::Parse { path: path.to_path_buf(), offset: None, message: e.to_string() })?;
    let rgb = decoded.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.pixels().map(|p| p.0.map(|c| c as f64 / 65535.0)).collect();
    Ok(Image::new(w, h, pixels)?)
}

fn encode_png(path: &Path, img: &Image, depth: BitDepth) -> AppResult<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let gray = is_gray(img);
    let dynamic = match (gray, depth) {
        (true, BitDepth::Eight) => image::DynamicImage::ImageLuma8(image::ImageBuffer::from_fn(w, h, |x, y| {
            image::Luma([quantize(img.get(x as usize, y as usize)[0], depth) as u8])
        })),
        (true, BitDepth::Sixteen) => image::DynamicImage::ImageLuma16(image::ImageBuffer::from_fn(w, h, |x, y| {
            image::Luma([quantize(img.get(x as usize, y as usize)[0], depth)])
        })),
        (false, BitDepth::Eight) => image::DynamicImage::ImageRgb8(image::ImageBuffer::from_fn(w, h, |x, y| {
            image::Rgb(img.get(x as usize, y as usize).map(|c| quantize(c, depth) as u8))
        })),
        (false, BitDepth::Sixteen) => image::DynamicImage::ImageRgb16(image::ImageBuffer::from_fn(w, h, |x, y| {
            image::Rgb(img.get(x as usize, y as usize).map(|c| quantize(c, depth)))
        })),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| AppError::Config(format!("{}: cannot encode PNG: {e}", path.display())))?;
    Ok(out.into_inner())
}

/// Reads an 8- or 16-bit, 1- or 3-channel binary PNM (`P5`/`P6`) or PNG
/// image, scaling samples to `[0, 1]`. Grey images are replicated to RGB.
pub fn read_image(path: &Path) -> AppResult<Image> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"\x89PNG") {
        read_png(path, &bytes)
    } else {
        read_pnm(path, &bytes)
    }
}

/// Writes PNG for a `.png` extension and binary PNM otherwise. Images whose
/// channels are all equal are written as single-channel grey.
pub fn write_image(path: &Path, img: &Image, depth: BitDepth) -> AppResult<()> {
    let bytes = if extension(path) == "png" { encode_png(path, img, depth)? } else { encode_pnm(img, depth) };
    write_bytes(path, &bytes)
}

/// Middlebury `.flo`: magic, little-endian width and height, then
/// interleaved `u, v` f32 pairs in row-major order.
pub fn read_flo(path: &Path) -> AppResult<FlowField> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 12 {
        return Err(AppError::parse(path, bytes.len() as u64, "file shorter than the 12-byte header"));
    }
    let magic = LittleEndian::read_f32(&bytes[0..4]);
    if magic != FLO_MAGIC {
        return Err(AppError::parse(path, 0, format!("bad magic {magic} (expected {FLO_MAGIC})")));
    }
    let w = LittleEndian::read_i32(&bytes[4..8]);
    let h = LittleEndian::read_i32(&bytes[8..12]);
    if w <= 0 || h <= 0 {
        return Err(AppError::parse(path, 4, format!("invalid dimensions {w}x{h}")));
    }
    let n = (w as usize) * (h as usize);
    let expected = 12 + 8 * n;
    if bytes.len() != expected {
        return Err(AppError::parse(
            path,
            bytes.len().min(expected) as u64,
            format!("payload size mismatch: expected {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut rd = Cursor::new(&bytes[12..]);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(rd.read_f32::<LittleEndian>().expect("length checked"));
        v.push(rd.read_f32::<LittleEndian>().expect("length checked"));
    }
    Ok(FlowField::new(w as usize, h as usize, u, v)?)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> AppResult<()> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u().len());
    out.write_f32::<LittleEndian>(FLO_MAGIC).expect("in-memory write");
    out.write_i32::<LittleEndian>(flow.width() as i32).expect("in-memory write");
    out.write_i32::<LittleEndian>(flow.height() as i32).expect("in-memory write");
    for (&a, &b) in flow.u().iter().zip(flow.v()) {
        out.write_f32::<LittleEndian>(a).expect("in-memory write");
        out.write_f32::<LittleEndian>(b).expect("in-memory write");
    }
    write_bytes(path, &out)
}

/// Greyscale PFM (`Pf`). A negative scale means little-endian samples;
/// rows are stored bottom-up. Non-positive and non-finite values are
/// invalid. Values are returned as stored (no convention conversion).
pub fn read_pfm(path: &Path) -> AppResult<DepthMap> {
    let bytes = read_bytes(path)?;
    let mut hdr = Header { bytes: &bytes, pos: 0, comments: false };
    let (magic, _) = hdr.token(path, "magic")?;
    match magic {
        "Pf" => {}
        "PF" => return Err(AppError::parse(path, 0, "colour PFM is not a depth map (expected Pf)")),
        _ => return Err(AppError::parse(path, 0, format!("bad magic '{magic}' (expected Pf)"))),
    }
    let dims_at = hdr.pos as u64;
    let w: usize = hdr.number(path, "width")?;
    let h: usize = hdr.number(path, "height")?;
    positive_dims(path, w, h, dims_at)?;
    let scale_at = hdr.pos as u64;
    let scale: f64 = hdr.number(path, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(AppError::parse(path, scale_at, format!("invalid scale {scale}")));
    }
    let start = hdr.end(path)?;
    let data = &bytes[start..];
    if data.len() != 4 * w * h {
        return Err(AppError::parse(
            path,
            (start + data.len().min(4 * w * h)) as u64,
            format!("payload size mismatch: expected {} bytes, found {}", 4 * w * h, data.len()),
        ));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let x = if scale < 0.0 { LittleEndian::read_f32(chunk) } else { BigEndian::read_f32(chunk) };
        let (col, row_from_bottom) = (k % w, k / w);
        values[(h - 1 - row_from_bottom) * w + col] = x as f64;
    }
    Ok(DepthMap::from_values(w, h, values)?)
}

/// Little-endian PFM. Invalid pixels whose stored value is itself a valid
/// depth are written as 0 so they stay invalid when read back.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> AppResult<()> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1\n").into_bytes();
    for row in (0..h).rev() {
        for col in 0..w {
            let i = row * w + col;
            let raw = depth.values()[i];
            let x = if depth.mask()[i] || !(raw > 0.0 && raw.is_finite()) { raw } else { 0.0 };
            out.write_f32::<LittleEndian>(x as f32).expect("in-memory write");
        }
    }
    write_bytes(path, &out)
}

fn convert(depth: &DepthMap, k: &CameraIntrinsics, f: fn(f64, arapdepth_core::UnitRay) -> arapdepth_core::Result<f64>) -> AppResult<DepthMap> {
    let mut err = None;
    let out = depth.map_valid(|u, v, d| {
        let r = backproject_ray(k, [u as f64, v as f64]).and_then(|ray| f(d, ray));
        match r {
            Ok(x) => Some(x),
            Err(e) => {
                err.get_or_insert(e);
                None
            }
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

/// Reads a PFM depth map and returns range depth.
pub fn read_depth(path: &Path, convention: DepthConvention, k: &CameraIntrinsics) -> AppResult<DepthMap> {
    let stored = read_pfm(path)?;
    match convention {
        DepthConvention::Range => Ok(stored),
        DepthConvention::Z => convert(&stored, k, zdepth_to_range),
    }
}

/// Writes a range depth map in the given storage convention.
pub fn write_depth(path: &Path, depth: &DepthMap, convention: DepthConvention, k: &CameraIntrinsics) -> AppResult<()> {
    match convention {
        DepthConvention::Range => write_pfm(path, depth),
        DepthConvention::Z => write_pfm(path, &convert(depth, k, range_to_zdepth)?),
    }
}

/// Whitespace-separated `fx fy cx cy [skew]`.
pub fn read_intrinsics(path: &Path) -> AppResult<CameraIntrinsics> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut values = Vec::new();
    let mut offset = 0;
    for tok in text.split_ascii_whitespace() {
        let at = text[offset..].find(tok).map(|i| i + offset).unwrap_or(offset);
        offset = at + tok.len();
        if values.len() == 5 {
            return Err(AppError::parse(path, at as u64, "more than five values (fx fy cx cy [skew])"));
        }
        values.push(tok.parse::<f64>().map_err(|_| AppError::parse(path, at as u64, format!("invalid number '{tok}'")))?);
    }
    if values.len() < 4 {
        return Err(AppError::parse(path, bytes.len() as u64, format!("expected fx fy cx cy [skew], found {} values", values.len())));
    }
    let skew = values.get(4).copied().unwrap_or(0.0);
    CameraIntrinsics::with_skew(values[0], values[1], values[2], values[3], skew)
        .map_err(|e| AppError::parse(path, 0, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> AppResult<()> {
    write_bytes(path, format!("{} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.skew).as_bytes())
}
