//! On-disk formats: raw tensors, weight stores, and PPM frames.
//!
//! Raw tensor file: magic `RVT0`, u8 rank, little-endian u32 extents, then
//! little-endian f32 data.
//!
//! Weight store: magic `RVRTW1`, u16 format version, 32-byte config hash,
//! u32 entry count, entry table (u16 name length, name bytes, u8 rank,
//! u32 LE extents, u64 LE absolute data offset), then contiguous f32 LE
//! payloads in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"RVT0";
pub const WEIGHTS_MAGIC: &[u8; 6] = b"RVRTW1";
pub const WEIGHTS_VERSION: u16 = 1;

/// Reader that tracks its byte position for error reports.
struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn new(inner: R) -> Self {
        Cursor { inner, pos: 0 }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

// ── raw tensor files ─────────────────────────────────────────────────────

pub fn write_tensor(path: &Path, t: &Tensor<impl Scalar>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(TENSOR_MAGIC).map_err(io_err)?;
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Invalid("tensor rank exceeds 255".into()))?;
    w.write_all(&[rank]).map_err(io_err)?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u32("extent")? as usize;
        if e == 0 {
            return Err(Error::Format { offset: r.pos, msg: "zero extent".into() });
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 4];
    for _ in 0..numel {
        r.fill(&mut b, "f32 payload")?;
        data.push(T::from_f32(f32::from_le_bytes(b)));
    }
    Tensor::from_vec(shape, data)
}

// ── weight stores ────────────────────────────────────────────────────────

/// Write named tensors with a config hash. Entry order is preserved, so a
/// round trip is byte-identical.
pub fn write_weights<T: Scalar>(
    path: &Path,
    hash: &[u8; 32],
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    // Header size must be known to place absolute payload offsets.
    let mut table_len = 0u64;
    for (name, t) in entries {
        table_len += 2 + name.len() as u64 + 1 + 4 * t.shape().len() as u64 + 8;
    }
    let header_len = 6 + 2 + 32 + 4 + table_len;

    w.write_all(WEIGHTS_MAGIC).map_err(io_err)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(hash).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;

    let mut offset = header_len;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        w.write_all(&[t.shape().len() as u8]).map_err(io_err)?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&offset.to_le_bytes()).map_err(io_err)?;
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in entries {
        for &v in t.data() {
            w.write_all(&v.as_f32().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a weight store; returns the stored config hash and named tensors in
/// table order.
pub fn read_weights<T: Scalar>(path: &Path) -> Result<([u8; 32], Vec<(String, Tensor<T>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 6];
    r.fill(&mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = r.u16("format version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format { offset: 6, msg: format!("unsupported version {version}") });
    }
    let mut hash = [0u8; 32];
    r.fill(&mut hash, "config hash")?;
    let count = r.u32("entry count")? as usize;

    struct RawEntry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let mut nb = vec![0u8; name_len];
        r.fill(&mut nb, "name")?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::Format { offset: r.pos, msg: "name is not utf-8".into() })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let offset = r.u64("data offset")?;
        raw.push(RawEntry { name, shape, offset });
    }

    // Payloads are contiguous in table order; validate the recorded offsets.
    let mut entries = Vec::with_capacity(count);
    for e in raw {
        if e.offset != r.pos {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("entry '{}' claims offset {}, payload is at {}", e.name, e.offset, r.pos),
            });
        }
        let numel: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            r.fill(&mut b, "f32 payload")?;
            data.push(T::from_f32(f32::from_le_bytes(b)));
        }
        entries.push((e.name, Tensor::from_vec(e.shape, data)?));
    }
    Ok((hash, entries))
}

// ── PPM frames ───────────────────────────────────────────────────────────

/// Write an `[H, W, 3]` image in `[0, 1]` as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, frame: &Tensor<impl Scalar>) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("ppm frame must be [H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(out, "P6\n{w} {h}\n255\n").map_err(io_err)?;
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Read a binary PPM (P6, 8-bit) into an `[H, W, 3]` tensor in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
        while *pos < bytes.len() {
            let c = bytes[*pos];
            if c == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                *pos += 1;
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format { offset: start as u64, msg: "truncated ppm header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let mut pos = 0usize;
    if token(&bytes, &mut pos)? != "P6" {
        return Err(Error::Format { offset: 0, msg: "not a P6 ppm".into() });
    }
    let parse = |s: String, at: usize| {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("bad ppm header field '{s}'"),
        })
    };
    let w = parse(token(&bytes, &mut pos)?, pos)?;
    let h = parse(token(&bytes, &mut pos)?, pos)?;
    let maxval = parse(token(&bytes, &mut pos)?, pos)?;
    if maxval != 255 {
        return Err(Error::Format { offset: pos as u64, msg: format!("maxval {maxval} != 255") });
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("ppm payload truncated: need {need} bytes"),
        });
    }
    let data: Vec<T> =
        bytes[pos..pos + need].iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
    Tensor::from_vec(vec![h, w, 3], data)
}

/// Read all `.ppm` frames of a directory, sorted by file name, as `[T, H, W, 3]`.
pub fn read_video_dir<T: Scalar>(dir: &Path) -> Result<Tensor<T>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no .ppm frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        frames.push(read_ppm::<T>(p)?);
    }
    let s0 = frames[0].shape().to_vec();
    for (p, f) in paths.iter().zip(&frames) {
        if f.shape() != s0 {
            return Err(Error::shape(format!(
                "frame {} has shape {:?}, expected {:?}",
                p.display(),
                f.shape(),
                s0
            )));
        }
    }
    let t = frames.len();
    let mut data = Vec::with_capacity(t * frames[0].numel());
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(vec![t, s0[0], s0[1], s0[2]], data)
}

/// Write a `[T, H, W, 3]` video as numbered PPM frames.
pub fn write_video_dir(dir: &Path, video: &Tensor<impl Scalar>) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape(format!("video must be [T, H, W, 3], got {s:?}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frame_elems = s[1] * s[2] * s[3];
    for t in 0..s[0] {
        let frame = Tensor::new(
            vec![s[1], s[2], s[3]],
            video.data()[t * frame_elems..(t + 1) * frame_elems].to_vec(),
        );
        write_ppm(&dir.join(format!("frame_{t:04}.ppm")), &frame)?;
    }
    Ok(())
}
