//! Flow fields: `.flo` files, end-point error, and PPM renderings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// `.flo` magic: the f32 202021.25, whose little-endian bytes spell "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;

/// A two-channel displacement field: channel 0 is horizontal (u), channel 1
/// vertical (v), both in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().c != 2 {
            return dim_err(format!("flow field needs 2 channels, got {}", t.shape()));
        }
        Ok(FlowField(t))
    }

    pub fn constant(batch: usize, height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowField(Tensor::from_fn(
            Shape::new(batch, 2, height, width),
            |_, c, _, _| {
                if c == 0 {
                    u
                } else {
                    v
                }
            },
        ))
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self::constant(batch, height, width, 0.0, 0.0)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    /// Displacement at (batch, row, column).
    pub fn at(&self, n: usize, y: usize, x: usize) -> (f64, f64) {
        (self.0.at(n, 0, y, x), self.0.at(n, 1, y, x))
    }
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_flo(&mut w, flow)?;
    w.flush()?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&mut BufReader::new(File::open(path)?))
}

/// Values are narrowed to f32 on disk.
pub fn encode_flo(w: &mut impl Write, flow: &FlowField) -> Result<()> {
    let s = flow.shape();
    if s.n != 1 {
        return dim_err(format!(".flo holds a single field, got batch {}", s.n));
    }
    let (width, height) = (
        i32::try_from(s.w).map_err(|_| Error::InvalidArgument("width exceeds i32".into()))?,
        i32::try_from(s.h).map_err(|_| Error::InvalidArgument("height exceeds i32".into()))?,
    );
    w.write_all(&FLO_MAGIC.to_le_bytes())?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    for y in 0..s.h {
        for x in 0..s.w {
            let (u, v) = flow.at(0, y, x);
            w.write_all(&(u as f32).to_le_bytes())?;
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn decode_flo(r: &mut impl Read) -> Result<FlowField> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if f32::from_le_bytes(b4) != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {b4:?}")));
    }
    r.read_exact(&mut b4)?;
    let width = i32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let height = i32::from_le_bytes(b4);
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("bad .flo size {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let mut buf = vec![0u8; w * h * 8];
    r.read_exact(&mut buf)?;
    let mut t = Tensor::zeros(Shape::new(1, 2, h, w));
    for (i, px) in buf.chunks_exact(8).enumerate() {
        let (y, x) = (i / w, i % w);
        t.set(
            0,
            0,
            y,
            x,
            f32::from_le_bytes(px[..4].try_into().unwrap()) as f64,
        );
        t.set(
            0,
            1,
            y,
            x,
            f32::from_le_bytes(px[4..].try_into().unwrap()) as f64,
        );
    }
    FlowField::new(t)
}

/// Mean end-point error over all pixels of all batch items.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    let s = pred.shape();
    gt.tensor().expect_shape(s, "epe")?;
    let mut acc = 0.0;
    for n in 0..s.n {
        let (pu, pv) = (pred.tensor().plane(n, 0), pred.tensor().plane(n, 1));
        let (gu, gv) = (gt.tensor().plane(n, 0), gt.tensor().plane(n, 1));
        for i in 0..s.plane() {
            let (du, dv) = (pu[i] - gu[i], pv[i] - gv[i]);
            acc += (du * du + dv * dv).sqrt();
        }
    }
    Ok(acc / (s.n * s.plane()) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// A (1, 3, H, W) tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            self.get(x, y)[c] as f64 / 255.0
        })
    }
}

/// Writes a binary PPM (P6).
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    for px in &img.pixels {
        w.write_all(px)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary PPM (P6) with maxval 255; `#` comments are allowed in the
/// header.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!(
            "not a binary PPM (magic {:?})",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 || width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "unsupported PPM {width}x{height} maxval {maxval}"
        )));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated PPM payload",
        )));
    }
    let pixels = bytes[pos..pos + need]
        .chunks_exact(3)
        .map(|p| [p[0], p[1], p[2]])
        .collect();
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

fn hsv_to_rgb(hue_deg: f64, sat: f64) -> [u8; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue in degrees [0, 360) of an RGB color; `None` for greys.
pub fn rgb_hue(px: [u8; 3]) -> Option<f64> {
    let [r, g, b] = px.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}

/// Color-wheel rendering: hue follows the flow direction atan2(v, u),
/// saturation the magnitude relative to `max_magnitude` (clamped to 1),
/// value stays at 1 so zero flow is white. `None` normalizes by the largest
/// magnitude in the field.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let (h, w) = (flow.height(), flow.width());
    let max = max_magnitude.unwrap_or_else(|| {
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(0, y, x);
                m = m.max(u.hypot(v));
            }
        }
        m
    });
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(0, y, x);
            let mag = u.hypot(v);
            let sat = if max > 0.0 { (mag / max).min(1.0) } else { 0.0 };
            let hue = v.atan2(u).to_degrees();
            img.pixels[y * w + x] = if mag == 0.0 || !sat.is_finite() {
                [255, 255, 255]
            } else {
                hsv_to_rgb(hue, sat)
            };
        }
    }
    img
}

/// Grey levels round(255 * clamp(c, 0, 1)) of the first plane of `conf`.
pub fn weights_map_image(conf: &Tensor) -> RgbImage {
    let s = conf.shape();
    let mut img = RgbImage::new(s.w, s.h);
    for (px, &c) in img.pixels.iter_mut().zip(conf.plane(0, 0)) {
        let g = (255.0 * c.clamp(0.0, 1.0)).round() as u8;
        *px = [g; 3];
    }
    img
}

/// Writes [`weights_map_image`] as a PPM and returns it.
pub fn dump_weights_map(conf: &Tensor, path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = weights_map_image(conf);
    write_ppm(path, &img)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_flow(h: usize, w: usize, seed: u64) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowField::new(Tensor::from_fn(Shape::new(1, 2, h, w), |_, _, _, _| {
            rng.gen_range(-10.0..10.0)
        }))
        .unwrap()
    }

    #[test]
    fn flo_round_trip_is_bit_exact_after_narrowing() {
        let f = random_flow(4, 6, 1);
        let narrowed = FlowField::new(f.tensor().map(|v| v as f32 as f64)).unwrap();
        let mut bytes = Vec::new();
        encode_flo(&mut bytes, &narrowed).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 4 * 6 * 8);
        let back = decode_flo(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, narrowed);
        // re-encoding the decoded field reproduces the file
        let mut again = Vec::new();
        encode_flo(&mut again, &back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        encode_flo(&mut bytes, &FlowField::zeros(1, 2, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"HEIP");
        assert!(matches!(
            decode_flo(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_flo(&mut &bytes[..bytes.len() - 1]),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn epe_of_3_4_triangle() {
        let pred = FlowField::constant(1, 3, 5, 3.0, 4.0);
        let gt = FlowField::zeros(1, 3, 5);
        assert_eq!(epe(&pred, &gt).unwrap(), 5.0);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        assert!(epe(&pred, &FlowField::zeros(1, 3, 4)).is_err());
    }

    #[test]
    fn zero_flow_renders_white() {
        let img = flow_to_color(&FlowField::zeros(1, 3, 3), None);
        assert!(img.pixels.iter().all(|&p| p == [255, 255, 255]));
    }

    #[test]
    fn full_magnitude_along_u_is_saturated_red() {
        let img = flow_to_color(&FlowField::constant(1, 1, 1, 2.5, 0.0), Some(2.5));
        assert_eq!(img.pixels[0], [255, 0, 0]);
    }

    #[test]
    fn weights_map_levels() {
        let s = Shape::new(1, 1, 2, 3);
        assert!(weights_map_image(&Tensor::ones(s))
            .pixels
            .iter()
            .all(|&p| p == [255; 3]));
        assert!(weights_map_image(&Tensor::zeros(s))
            .pixels
            .iter()
            .all(|&p| p == [0; 3]));
        let t = Tensor::new(s, vec![-0.5, 0.25, 0.5, 1.5, 0.999, 0.002]).unwrap();
        let img = weights_map_image(&t);
        let got: Vec<u8> = img.pixels.iter().map(|p| p[0]).collect();
        assert_eq!(got, vec![0, 64, 128, 255, 255, 1]);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut img = RgbImage::new(3, 2);
        for (i, px) in img.pixels.iter_mut().enumerate() {
            *px = [i as u8 * 10, 255 - i as u8, 7];
        }
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
    }
}
