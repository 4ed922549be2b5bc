//! Image and descriptor file formats.
//!
//! Images are 8-bit PNG (gray or RGB, non-interlaced) or binary PGM/PPM.
//! Descriptors use the little-endian GHOG container:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GHOG"
//!      4     4  version (u32, currently 1)
//!      8     4  orientation mode (u32, 0 = unsigned, 1 = signed)
//!     12     4  cell size (u32)
//!     16    12  grid rows, grid cols, bins (u32 each)
//!     28   4·n  payload, f32, row-major with the bin index fastest
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hog::{self, HogConfig, HogDescriptor, Orientation};
use crate::tensor::Tensor;

pub const GHOG_MAGIC: [u8; 4] = *b"GHOG";
pub const GHOG_VERSION: u32 = 1;
const GHOG_HEADER_LEN: usize = 28;

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidShape {
                op: "image",
                shape: vec![height, width, channels],
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    /// Builds a gray or RGB image from a `(h, w)` or `(h, w, 3)` tensor,
    /// clamping values into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        match *t.shape() {
            [h, w] => Self::new(w, h, 1, data),
            [h, w, c] => Self::new(w, h, c, data),
            ref s => Err(Error::InvalidShape {
                op: "image",
                shape: s.to_vec(),
            }),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `(h, w)` for gray images, `(h, w, 3)` for RGB.
    pub fn to_tensor(&self) -> Tensor {
        let shape: &[usize] = if self.channels == 1 {
            &[self.height, self.width]
        } else {
            &[self.height, self.width, self.channels]
        };
        Tensor::new(shape, self.data.clone()).expect("image invariants guarantee shape")
    }

    /// Gray version using the HOG luminance weights.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| hog::luminance(p[0], p[1], p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Center crop to `width × height`.
    pub fn crop_center(&self, width: usize, height: usize) -> Result<Image> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return Err(Error::config(format!(
                "cannot crop {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let left = (self.width - width) / 2;
        let top = (self.height - height) / 2;
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(width, height, c, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

/// `round(v · 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit PNG, PGM (P5) or PPM (P6) image.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::Unsupported("unrecognized image signature".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Corrupt(format!("png header: {e}")))?;
    let info = reader.info();
    if info.interlaced {
        return Err(Error::Unsupported("interlaced PNG".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!("PNG bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Unsupported(format!("PNG color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Corrupt(format!("png data: {e}")))?;
    let data = buf[..frame.buffer_size()]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(width, height, channels, data)
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Corrupt("PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Corrupt("PNM header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Unsupported(format!("PNM maxval {maxval}")));
    }
    let n = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::Truncated {
            expected: n,
            found: payload.len(),
        });
    }
    let data = payload[..n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(width, height, channels, data)
}

/// Writes `img` as 8-bit PNG, or as PGM/PPM when the extension is
/// `.pgm`/`.ppm`. The file appears atomically.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pgm") | Some("ppm") => encode_pnm(img),
        _ => encode_png(img)?,
    };
    write_atomic(path, &bytes)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| -> Result<()> {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

pub fn encode_descriptor(d: &HogDescriptor) -> Vec<u8> {
    let (rows, cols, bins) = d.dims();
    let mode = match d.config.orientation {
        Orientation::Unsigned => 0u32,
        Orientation::Signed => 1u32,
    };
    let mut out = Vec::with_capacity(GHOG_HEADER_LEN + 4 * d.grid.len());
    out.extend_from_slice(&GHOG_MAGIC);
    for v in [GHOG_VERSION, mode, d.config.cell as u32, rows as u32, cols as u32, bins as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in d.grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_descriptor(bytes: &[u8]) -> Result<HogDescriptor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: GHOG_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != GHOG_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < GHOG_HEADER_LEN {
        return Err(Error::Truncated {
            expected: GHOG_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != GHOG_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let orientation = match word(1) {
        0 => Orientation::Unsigned,
        1 => Orientation::Signed,
        m => return Err(Error::Corrupt(format!("orientation mode {m}"))),
    };
    let (cell, rows, cols, bins) = (word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize);
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(bins))
        .ok_or_else(|| Error::Corrupt("grid dimensions overflow".into()))?;
    let expected = GHOG_HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[GHOG_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let config = HogConfig {
        cell,
        bins,
        orientation,
        ..HogConfig::default()
    };
    config.validate()?;
    Ok(HogDescriptor {
        grid: Tensor::new(&[rows, cols, bins], data)?,
        config,
    })
}

pub fn write_descriptor(d: &HogDescriptor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_descriptor(d))
}

pub fn read_descriptor(path: impl AsRef<Path>) -> Result<HogDescriptor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    decode_descriptor(&bytes)
}
