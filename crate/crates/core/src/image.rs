//! Raster types shared by every stage: single-channel planes, fingerprint
//! images, four-channel map stacks and block grids, plus their file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Row-major single-channel `f32` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample; `None` outside the raster.
    pub fn sample(&self, x: f32, y: f32) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0) || x > (self.width - 1) as f32 || y > (self.height - 1) as f32 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Grayscale fingerprint raster with intensities in `[0, 1]`.
///
/// Both sides must be multiples of 16 so the four stride-2 stages of the
/// networks divide evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintImage {
    pixels: Plane,
    pub dpi_hint: Option<u32>,
}

pub const SIZE_MULTIPLE: usize = 16;

impl FingerprintImage {
    pub fn new(pixels: Plane) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::validation("image", "empty raster"));
        }
        if pixels.width() % SIZE_MULTIPLE != 0 || pixels.height() % SIZE_MULTIPLE != 0 {
            return Err(Error::validation(
                "image",
                format!(
                    "{}x{} is not a multiple of {SIZE_MULTIPLE}",
                    pixels.width(),
                    pixels.height()
                ),
            ));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("image", format!("intensity {v} outside [0,1]")));
        }
        Ok(Self {
            pixels,
            dpi_hint: None,
        })
    }

    /// Clamps into `[0, 1]` (mapping NaN to 0) before validating dimensions.
    pub fn from_plane_clamped(pixels: Plane) -> Result<Self> {
        Self::new(pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(Plane::new(width, height, value))
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn plane(&self) -> &Plane {
        &self.pixels
    }

    pub fn into_plane(self) -> Plane {
        self.pixels
    }

    pub fn inverted(&self) -> FingerprintImage {
        FingerprintImage {
            pixels: self.pixels.map(|v| 1.0 - v),
            dpi_hint: self.dpi_hint,
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_plane_clamped(read_gray_png(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_gray_png(&self.pixels, path)
    }
}

pub fn read_gray_png(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|p| p as f32 / 255.0).collect();
    Plane::from_vec(w as usize, h as usize, data)
}

pub fn write_gray_png(plane: &Plane, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = plane
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(plane.width() as u32, plane.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Channel order inside a [`MapStack`]; fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Ridge = 0,
    Frequency = 1,
    Orientation = 2,
    Segmentation = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::Ridge,
        Channel::Frequency,
        Channel::Orientation,
        Channel::Segmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ridge => "ridge",
            Channel::Frequency => "frequency",
            Channel::Orientation => "orientation",
            Channel::Segmentation => "segmentation",
        }
    }
}

/// Frequencies are stored as `f / FREQUENCY_SCALE` (saturating at 1).
pub const FREQUENCY_SCALE: f32 = 0.25;

/// Depth-wise `[ridge, frequency, orientation, segmentation]` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    pub ridge: Plane,
    pub frequency: Plane,
    pub orientation: Plane,
    pub segmentation: Plane,
}

const STACK_MAGIC: &[u8; 4] = b"FPMS";

impl MapStack {
    pub fn new(ridge: Plane, frequency: Plane, orientation: Plane, segmentation: Plane) -> Result<Self> {
        let s = Self {
            ridge,
            frequency,
            orientation,
            segmentation,
        };
        for c in Channel::ALL {
            if !s.channel(c).same_shape(&s.ridge) {
                return Err(Error::Shape(format!("channel {} differs in size", c.name())));
            }
        }
        Ok(s)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let z = Plane::new(width, height, 0.0);
        Self {
            ridge: z.clone(),
            frequency: z.clone(),
            orientation: z.clone(),
            segmentation: z,
        }
    }

    pub fn width(&self) -> usize {
        self.ridge.width()
    }

    pub fn height(&self) -> usize {
        self.ridge.height()
    }

    pub fn channel(&self, c: Channel) -> &Plane {
        match c {
            Channel::Ridge => &self.ridge,
            Channel::Frequency => &self.frequency,
            Channel::Orientation => &self.orientation,
            Channel::Segmentation => &self.segmentation,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut Plane {
        match c {
            Channel::Ridge => &mut self.ridge,
            Channel::Frequency => &mut self.frequency,
            Channel::Orientation => &mut self.orientation,
            Channel::Segmentation => &mut self.segmentation,
        }
    }

    /// Checks ranges, and for ground-truth stacks also binarity and the
    /// background masking rule.
    pub fn check_invariants(&self, ground_truth: bool) -> Result<()> {
        for c in Channel::ALL {
            if let Some(v) = self.channel(c).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("{} value {v} outside [0,1]", c.name())));
            }
        }
        if ground_truth {
            for c in [Channel::Ridge, Channel::Segmentation] {
                if self.channel(c).data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Domain(format!("{} is not binary", c.name())));
                }
            }
            let bg_leak = self
                .segmentation
                .data()
                .iter()
                .zip(self.frequency.data().iter().zip(self.orientation.data()))
                .any(|(&s, (&f, &o))| s == 0.0 && (f != 0.0 || o != 0.0));
            if bg_leak {
                return Err(Error::Domain(
                    "frequency/orientation nonzero on background".into(),
                ));
            }
        }
        Ok(())
    }

    /// Ridge channel multiplied by the segmentation channel thresholded at 0.5.
    pub fn masked_ridge(&self) -> Plane {
        let data = self
            .ridge
            .data()
            .iter()
            .zip(self.segmentation.data())
            .map(|(&r, &s)| if s >= 0.5 { r } else { 0.0 })
            .collect();
        Plane::from_vec(self.width(), self.height(), data).expect("same shape")
    }

    /// Channel-major `[R, F, O, S]` values.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(4 * self.ridge.len());
        for c in Channel::ALL {
            out.extend_from_slice(self.channel(c).data());
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        let n = width * height;
        if data.len() != 4 * n {
            return Err(Error::Shape(format!(
                "stack {width}x{height}x4 needs {} values, got {}",
                4 * n,
                data.len()
            )));
        }
        let plane = |i: usize| Plane::from_vec(width, height, data[i * n..(i + 1) * n].to_vec());
        Self::new(plane(0)?, plane(1)?, plane(2)?, plane(3)?)
    }

    /// Binary blob: 16-byte header (`FPMS`, height, width, channels as
    /// little-endian u32) followed by channel-major little-endian f32.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * self.ridge.len());
        out.extend_from_slice(STACK_MAGIC);
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for v in self.to_chw() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != STACK_MAGIC {
            return Err(corrupt("missing map-stack header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (word(4), word(8), word(12));
        if c != 4 {
            return Err(corrupt("channel count is not 4"));
        }
        if bytes.len() != 16 + 4 * c * h * w {
            return Err(corrupt("payload length does not match header"));
        }
        let data: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_chw(w, h, &data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).at(path)?;
        f.write_all(&self.to_blob()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_blob(&bytes, path)
    }

    /// Writes `<stem>_{ridge,frequency,orientation,segmentation}.png`.
    pub fn save_png_set(&self, dir: &Path, stem: &str) -> Result<()> {
        for c in Channel::ALL {
            write_gray_png(self.channel(c), &dir.join(format!("{stem}_{}.png", c.name())))?;
        }
        Ok(())
    }

    pub fn load_png_set(dir: &Path, stem: &str) -> Result<Self> {
        let p = |c: Channel| read_gray_png(&dir.join(format!("{stem}_{}.png", c.name())));
        Self::new(
            p(Channel::Ridge)?,
            p(Channel::Frequency)?,
            p(Channel::Orientation)?,
            p(Channel::Segmentation)?,
        )
    }
}

/// Per-block scalars over a raster tiled by `block_size` squares.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f32>,
}

impl BlockGrid {
    pub fn new(width: usize, height: usize, block_size: usize, fill: f32) -> Result<Self> {
        check_block_size(width, height, block_size)?;
        let (cols, rows) = (width / block_size, height / block_size);
        Ok(Self {
            block_size,
            cols,
            rows,
            values: vec![fill; cols * rows],
        })
    }

    #[inline]
    pub fn get(&self, bx: usize, by: usize) -> f32 {
        self.values[by * self.cols + bx]
    }

    #[inline]
    pub fn set(&mut self, bx: usize, by: usize, v: f32) {
        self.values[by * self.cols + bx] = v;
    }

    /// Nearest-neighbour expansion to pixel resolution.
    pub fn expand(&self) -> Plane {
        let b = self.block_size;
        Plane::from_fn(self.cols * b, self.rows * b, |x, y| self.get(x / b, y / b))
    }

    pub fn mean(&self) -> f32 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }
}

pub fn check_block_size(width: usize, height: usize, block_size: usize) -> Result<()> {
    if block_size == 0 || width % block_size != 0 || height % block_size != 0 {
        return Err(Error::validation(
            "block_size",
            format!("{block_size} does not divide {width}x{height}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        assert!(FingerprintImage::constant(24, 32, 0.5).is_err());
        assert!(FingerprintImage::constant(32, 48, 0.5).is_ok());
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        let p = Plane::new(16, 16, 1.5);
        assert!(FingerprintImage::new(p).is_err());
    }

    #[test]
    fn blob_header_is_sixteen_bytes() {
        let s = MapStack::zeros(16, 32);
        let blob = s.to_blob();
        assert_eq!(&blob[..4], b"FPMS");
        assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), 32);
        assert_eq!(u32::from_le_bytes(blob[8..12].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(blob[12..16].try_into().unwrap()), 4);
        assert_eq!(blob.len(), 16 + 4 * 4 * 16 * 32);
    }

    #[test]
    fn blob_rejects_truncation() {
        let blob = MapStack::zeros(16, 16).to_blob();
        assert!(MapStack::from_blob(&blob[..blob.len() - 1], Path::new("x")).is_err());
        assert!(MapStack::from_blob(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let p = Plane::from_fn(16, 16, |x, y| ((x + y) as f32 / 30.0).min(1.0));
        let img = FingerprintImage::new(p.clone()).unwrap();
        img.save_png(&path).unwrap();
        let back = FingerprintImage::load_png(&path).unwrap();
        for (a, b) in p.data().iter().zip(back.plane().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn masked_ridge_respects_threshold() {
        let mut s = MapStack::zeros(16, 16);
        s.ridge = Plane::new(16, 16, 1.0);
        s.segmentation = Plane::from_fn(16, 16, |x, _| if x < 8 { 0.6 } else { 0.4 });
        let m = s.masked_ridge();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(15, 0), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn blob_round_trip(w in 1usize..5, h in 1usize..5, seed in 0u64..1000) {
            let (w, h) = (w * 4, h * 4);
            let data: Vec<f32> = (0..4 * w * h)
                .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0)
                .collect();
            let s = MapStack::from_chw(w, h, &data).unwrap();
            let back = MapStack::from_blob(&s.to_blob(), Path::new("mem")).unwrap();
            proptest::prop_assert_eq!(s, back);
        }
    }
}
