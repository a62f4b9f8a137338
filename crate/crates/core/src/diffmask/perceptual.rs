//! Perceptual difference backends.
//!
//! The built-in [`ProxyBackend`] is a deterministic stand-in for a learned
//! perceptual metric: a three-octave pyramid of local-contrast (high-pass)
//! differences, averaged after upsampling to full resolution.
//!
//! [`ExternalBackend`] talks to a subprocess over stdin/stdout:
//!
//! ```text
//! request  = b"EFPB1" image image
//! image    = u32 width, u32 height, width*height*3 bytes RGB8 row-major
//! response = u32 width, u32 height, width*height f32 row-major
//! ```
//!
//! All integers and floats are little-endian. One response per request; the
//! subprocess stays alive across requests and exits on EOF.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

use super::ssim::luma;

pub const MAGIC: &[u8; 5] = b"EFPB1";
const OCTAVES: usize = 3;

pub trait PerceptualBackend: Send {
    /// Name recorded in the per-signal means, e.g. `perceptual:proxy`.
    fn identity(&self) -> String;

    /// Nonnegative distance grid; any resolution, upsampled by the caller.
    fn distance(&mut self, real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyBackend;

impl PerceptualBackend for ProxyBackend {
    fn identity(&self) -> String {
        "perceptual:proxy".into()
    }

    fn distance(&mut self, real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
        proxy_distance(real, edited)
    }
}

fn box_downsample(src: &Grid<f64>) -> Grid<f64> {
    let (w, h) = (src.width() / 2, src.height() / 2);
    Grid::from_fn(w, h, |x, y| {
        (src.get(2 * x, 2 * y)
            + src.get(2 * x + 1, 2 * y)
            + src.get(2 * x, 2 * y + 1)
            + src.get(2 * x + 1, 2 * y + 1))
            / 4.0
    })
}

fn box3(src: &Grid<f64>) -> Grid<f64> {
    let (w, h) = src.dims();
    Grid::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                acc += src.get(xx, yy);
                n += 1.0;
            }
        }
        acc / n
    })
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(src: &Grid<f64>, width: usize, height: usize) -> Grid<f64> {
    let (sw, sh) = src.dims();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    Grid::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
        let bottom = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

pub fn proxy_distance(real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
    if real.dimensions() != edited.dimensions() {
        let (a, b) = (real.dimensions(), edited.dimensions());
        return Err(Error::DimensionMismatch {
            left: (a.0 as usize, a.1 as usize),
            right: (b.0 as usize, b.1 as usize),
        });
    }
    let (w, h) = (real.width() as usize, real.height() as usize);
    let mut a = luma(real);
    let mut b = luma(edited);
    let mut acc = Grid::filled(w, h, 0.0);
    let mut used = 0;
    for octave in 0..OCTAVES {
        if octave > 0 {
            if a.width() < 6 || a.height() < 6 {
                break;
            }
            a = box_downsample(&a);
            b = box_downsample(&b);
        }
        let (ma, mb) = (box3(&a), box3(&b));
        let diff = Grid::from_fn(a.width(), a.height(), |x, y| {
            ((a.get(x, y) - ma.get(x, y)) - (b.get(x, y) - mb.get(x, y))).abs()
        });
        let level = resize_bilinear(&box3(&diff), w, h);
        for (dst, v) in acc.data_mut().iter_mut().zip(level.data()) {
            *dst += v;
        }
        used += 1;
    }
    let scale = 1.0 / used.max(1) as f64;
    Ok(acc.map(|v| v * scale))
}

fn write_image(out: &mut impl Write, img: &RgbImage) -> io::Result<()> {
    out.write_all(&img.width().to_le_bytes())?;
    out.write_all(&img.height().to_le_bytes())?;
    out.write_all(img.as_raw())
}

fn read_u32(input: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_image(input: &mut impl Read) -> io::Result<RgbImage> {
    let w = read_u32(input)?;
    let h = read_u32(input)?;
    let mut raw = vec![0u8; w as usize * h as usize * 3];
    input.read_exact(&mut raw)?;
    RgbImage::from_raw(w, h, raw)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad image payload"))
}

pub fn write_request(out: &mut impl Write, real: &RgbImage, edited: &RgbImage) -> io::Result<()> {
    out.write_all(MAGIC)?;
    write_image(out, real)?;
    write_image(out, edited)?;
    out.flush()
}

/// Reads one request; `Ok(None)` on clean EOF before the magic.
pub fn read_request(input: &mut impl Read) -> io::Result<Option<(RgbImage, RgbImage)>> {
    let mut magic = [0u8; 5];
    let mut filled = 0;
    while filled < magic.len() {
        let n = input.read(&mut magic[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        filled += n;
    }
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let real = read_image(input)?;
    let edited = read_image(input)?;
    Ok(Some((real, edited)))
}

pub fn write_response(out: &mut impl Write, grid: &Grid<f64>) -> io::Result<()> {
    out.write_all(&(grid.width() as u32).to_le_bytes())?;
    out.write_all(&(grid.height() as u32).to_le_bytes())?;
    for v in grid.data() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()
}

pub fn read_response(input: &mut impl Read) -> io::Result<Grid<f64>> {
    let w = read_u32(input)? as usize;
    let h = read_u32(input)? as usize;
    let mut raw = vec![0u8; w * h * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Grid::from_vec(w, h, data)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

/// Serves requests with `backend` until EOF on `input`.
pub fn serve(
    backend: &mut dyn PerceptualBackend,
    input: &mut impl Read,
    output: &mut impl Write,
) -> Result<()> {
    let io_err = |e: io::Error| Error::Backend(e.to_string());
    while let Some((real, edited)) = read_request(input).map_err(io_err)? {
        let grid = backend.distance(&real, &edited)?;
        write_response(output, &grid).map_err(io_err)?;
    }
    Ok(())
}

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Perceptual backend living in a subprocess.
pub struct ExternalBackend {
    command: Vec<String>,
    session: Option<Session>,
}

impl ExternalBackend {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config(
                "external perceptual backend needs a command".into(),
            ));
        }
        Ok(Self {
            command,
            session: None,
        })
    }

    fn session(&mut self) -> Result<&mut Session> {
        if self.session.is_none() {
            let mut child = Command::new(&self.command[0])
                .args(&self.command[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| Error::Backend(format!("spawning {:?}: {e}", self.command[0])))?;
            let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            self.session = Some(Session {
                child,
                stdin,
                stdout,
            });
        }
        Ok(self.session.as_mut().expect("session just created"))
    }
}

impl PerceptualBackend for ExternalBackend {
    fn identity(&self) -> String {
        "perceptual:external".into()
    }

    fn distance(&mut self, real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
        let result = (|| {
            let session = self.session()?;
            write_request(&mut session.stdin, real, edited)
                .map_err(|e| Error::Backend(format!("request: {e}")))?;
            read_response(&mut session.stdout).map_err(|e| Error::Backend(format!("response: {e}")))
        })();
        if result.is_err() {
            // A broken pipe leaves the stream unusable; restart next time.
            if let Some(mut s) = self.session.take() {
                let _ = s.child.kill();
                let _ = s.child.wait();
            }
        }
        result
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(s) = self.session.take() {
            drop(s.stdin);
            let mut child = s.child;
            let _ = child.wait();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnFailure {
    #[default]
    Fail,
    FallbackToProxy,
}

/// Wraps an external backend with the configured failure policy.
pub struct GuardedBackend {
    primary: ExternalBackend,
    policy: OnFailure,
    last_identity: String,
}

impl GuardedBackend {
    pub fn new(primary: ExternalBackend, policy: OnFailure) -> Self {
        let last_identity = primary.identity();
        Self {
            primary,
            policy,
            last_identity,
        }
    }
}

impl PerceptualBackend for GuardedBackend {
    fn identity(&self) -> String {
        self.last_identity.clone()
    }

    fn distance(&mut self, real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
        match self.primary.distance(real, edited) {
            Ok(grid) => {
                self.last_identity = self.primary.identity();
                Ok(grid)
            }
            Err(e) if self.policy == OnFailure::FallbackToProxy => {
                log::warn!("external perceptual backend failed ({e}); using proxy");
                self.last_identity = ProxyBackend.identity();
                proxy_distance(real, edited)
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 31 + y * 17) % 64) as u8 * 3 + 40;
            image::Rgb([v, v / 2 + 20, 255 - v])
        })
    }

    #[test]
    fn identical_pair_is_zero() {
        let img = textured(40, 30);
        let d = proxy_distance(&img, &img).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn protocol_round_trip_in_memory() {
        let a = textured(12, 9);
        let b = textured(12, 9);
        let mut wire = Vec::new();
        write_request(&mut wire, &a, &b).unwrap();
        let (ra, rb) = read_request(&mut wire.as_slice()).unwrap().unwrap();
        assert_eq!((ra, rb), (a, b));

        let grid = Grid::from_fn(5, 3, |x, y| (x + 10 * y) as f64 * 0.25);
        let mut wire = Vec::new();
        write_response(&mut wire, &grid).unwrap();
        assert_eq!(read_response(&mut wire.as_slice()).unwrap(), grid);
    }

    #[test]
    fn empty_stream_ends_cleanly() {
        assert!(read_request(&mut &b""[..]).unwrap().is_none());
        assert!(read_request(&mut &b"EFP"[..]).is_err());
        assert!(read_request(&mut &b"XXXXX"[..]).is_err());
    }

    #[test]
    fn missing_binary_fails_or_falls_back() {
        let img = textured(20, 20);
        let mut strict = ExternalBackend::new(vec!["/nonexistent/backend".into()]).unwrap();
        assert!(matches!(
            strict.distance(&img, &img),
            Err(Error::Backend(_))
        ));

        let ext = ExternalBackend::new(vec!["/nonexistent/backend".into()]).unwrap();
        let mut guarded = GuardedBackend::new(ext, OnFailure::FallbackToProxy);
        let grid = guarded.distance(&img, &img).unwrap();
        assert_eq!(guarded.identity(), "perceptual:proxy");
        assert_eq!(grid.dims(), (20, 20));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let g = Grid::from_fn(4, 4, |x, y| (x * y) as f64);
        assert_eq!(resize_bilinear(&g, 4, 4), g);
        let c = Grid::filled(3, 5, 0.7);
        assert!(resize_bilinear(&c, 9, 2)
            .data()
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-12));
    }
}
