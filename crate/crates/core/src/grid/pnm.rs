//! Binary PNM files for depth (16-bit PGM, millimeters), masks (8-bit PGM)
//! and color (8-bit PPM).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DepthMap, GridError, RgbImage, ValidityMask};

#[derive(thiserror::Error, Debug)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("expected {expected} image, found {found}")]
    Kind { expected: &'static str, found: String },

    #[error("truncated pixel payload")]
    Truncated,

    #[error(transparent)]
    Grid(#[from] GridError),
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: u32,
}

fn read_header<R: Read>(r: &mut R) -> Result<Header, PnmError> {
    let mut tokens = Vec::with_capacity(4);
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    while tokens.len() < 4 {
        if r.read(&mut byte).map_err(|_| PnmError::Truncated)? == 0 {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        let b = byte[0];
        if in_comment {
            in_comment = b != b'\n';
            continue;
        }
        if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(b);
        }
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| PnmError::Header(format!("bad number {s:?}")));
    let maxval = num(&tokens[3])? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::Header(format!("maxval {maxval}")));
    }
    Ok(Header { magic: tokens[0].clone(), width: num(&tokens[1])?, height: num(&tokens[2])?, maxval })
}

fn read_samples<R: Read>(r: &mut R, count: usize, wide: bool) -> Result<Vec<u16>, PnmError> {
    let bytes = if wide { 2 } else { 1 };
    let mut buf = vec![0u8; count * bytes];
    r.read_exact(&mut buf).map_err(|_| PnmError::Truncated)?;
    Ok(if wide {
        buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        buf.into_iter().map(u16::from).collect()
    })
}

pub fn encode_depth<W: Write>(d: &DepthMap, w: &mut W) -> io::Result<()> {
    write!(w, "P5\n{} {}\n65535\n", d.width(), d.height())?;
    let mut buf = Vec::with_capacity(d.len() * 2);
    for &v in d.data() {
        let mm = (v * 1000.0).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    w.write_all(&buf)
}

pub fn decode_depth<R: Read>(r: &mut R) -> Result<DepthMap, PnmError> {
    let h = read_header(r)?;
    if h.magic != "P5" {
        return Err(PnmError::Kind { expected: "P5", found: h.magic });
    }
    let samples = read_samples(r, h.width * h.height, h.maxval > 255)?;
    let data = samples.into_iter().map(|s| s as f64 / 1000.0).collect();
    Ok(DepthMap::new(h.width, h.height, data)?)
}

pub fn encode_mask<W: Write>(m: &ValidityMask, w: &mut W) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", m.width(), m.height())?;
    let buf: Vec<u8> = m.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    w.write_all(&buf)
}

/// Any non-zero sample counts as valid.
pub fn decode_mask<R: Read>(r: &mut R) -> Result<ValidityMask, PnmError> {
    let h = read_header(r)?;
    if h.magic != "P5" {
        return Err(PnmError::Kind { expected: "P5", found: h.magic });
    }
    let samples = read_samples(r, h.width * h.height, h.maxval > 255)?;
    Ok(ValidityMask::new(h.width, h.height, samples.into_iter().map(|s| s != 0).collect())?)
}

pub fn encode_rgb<W: Write>(img: &RgbImage, w: &mut W) -> io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height())?;
    let mut buf = Vec::with_capacity(img.data().len() * 3);
    for px in img.data() {
        for &c in px {
            buf.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    w.write_all(&buf)
}

pub fn decode_rgb<R: Read>(r: &mut R) -> Result<RgbImage, PnmError> {
    let h = read_header(r)?;
    if h.magic != "P6" {
        return Err(PnmError::Kind { expected: "P6", found: h.magic });
    }
    let samples = read_samples(r, h.width * h.height * 3, h.maxval > 255)?;
    let scale = h.maxval as f64;
    let data = samples
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / scale, c[1] as f64 / scale, c[2] as f64 / scale])
        .collect();
    Ok(RgbImage::new(h.width, h.height, data)?)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PnmError + '_ {
    move |source| PnmError::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), PnmError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, PnmError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<(), PnmError> {
    write_file(path, |w| encode_depth(d, w))
}

pub fn read_depth(path: &Path) -> Result<DepthMap, PnmError> {
    decode_depth(&mut open(path)?)
}

pub fn write_mask(path: &Path, m: &ValidityMask) -> Result<(), PnmError> {
    write_file(path, |w| encode_mask(m, w))
}

pub fn read_mask(path: &Path) -> Result<ValidityMask, PnmError> {
    decode_mask(&mut open(path)?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), PnmError> {
    write_file(path, |w| encode_rgb(img, w))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, PnmError> {
    decode_rgb(&mut open(path)?)
}
