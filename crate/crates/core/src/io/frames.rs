use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

pub const MANIFEST: &str = "manifest.txt";

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.ppm"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit binary PPM. One-channel frames are written as gray RGB.
pub fn write_ppm(path: &Path, frame: &LatentGrid) -> Result<()> {
    let (c, h, w) = frame.shape();
    if c != 1 && c != 3 {
        return Err(Error::contract(format!(
            "PPM frames need 1 or 3 channels, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(frame.at(ch.min(c - 1), y, x)));
            }
        }
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(super::at(path))?);
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

/// Reads an 8-bit binary PPM into a three-channel frame scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<LatentGrid> {
    let bytes = fs::read(path).map_err(super::at(path))?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut hdr = Header {
        bytes: &bytes,
        pos: 0,
    };
    if hdr.token() != Some(b"P6".as_slice()) {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w = hdr.number().ok_or_else(|| bad("bad width"))?;
    let h = hdr.number().ok_or_else(|| bad("bad height"))?;
    let maxval = hdr.number().ok_or_else(|| bad("bad maxval"))?;
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    if maxval != 255 {
        return Err(bad("only 8-bit PPM (maxval 255) is supported"));
    }
    let start = hdr.pos + 1;
    let need = 3 * w * h;
    if bytes.len() < start + need {
        return Err(bad("truncated pixel data"));
    }
    let px = &bytes[start..start + need];
    Ok(LatentGrid::from_fn(3, h, w, |c, y, x| {
        px[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

fn scan_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(super::at(dir))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                indices.push(stem.parse().expect("six digits"));
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

fn read_manifest(dir: &Path) -> Result<Option<(usize, usize, usize)>> {
    let path = dir.join(MANIFEST);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let (mut count, mut width, mut height) = (None, None, None);
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("bad line {line:?}")))?;
        let num = || {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(&path, format!("bad value in {line:?}")))
        };
        match k.trim() {
            "count" => count = Some(num()?),
            "width" => width = Some(num()?),
            "height" => height = Some(num()?),
            "format" if v.trim() == "ppm" => {}
            "format" => {
                return Err(Error::format(
                    &path,
                    format!("unsupported frame format {:?}", v.trim()),
                ))
            }
            other => return Err(Error::format(&path, format!("unknown key {other:?}"))),
        }
    }
    match (count, width, height) {
        (Some(c), Some(w), Some(h)) => Ok(Some((c, w, h))),
        _ => Err(Error::format(
            &path,
            "manifest needs count, width and height",
        )),
    }
}

/// Random access to a numbered frame directory.
#[derive(Debug, Clone)]
pub struct FrameSource {
    dir: PathBuf,
    count: usize,
    width: usize,
    height: usize,
}

impl FrameSource {
    /// Validates numbering and the manifest (when present); frame sizes are
    /// checked as frames are read.
    pub fn open(dir: &Path) -> Result<Self> {
        let indices = scan_indices(dir)?;
        if let Some(missing) = indices
            .iter()
            .enumerate()
            .find(|(i, &idx)| *i != idx)
            .map(|(i, _)| i)
        {
            return Err(Error::Gap { index: missing });
        }
        let manifest = read_manifest(dir)?;
        if let Some((count, _, _)) = manifest {
            if count > indices.len() {
                return Err(Error::Gap {
                    index: indices.len(),
                });
            }
            if count < indices.len() {
                return Err(Error::format(
                    dir.join(MANIFEST),
                    format!("manifest lists {count} frames, found {}", indices.len()),
                ));
            }
        }
        if indices.is_empty() {
            return Err(Error::format(dir, "no frames found"));
        }
        let (width, height) = match manifest {
            Some((_, w, h)) => (w, h),
            None => {
                let first = read_ppm(&frame_path(dir, 0))?;
                (first.width(), first.height())
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            count: indices.len(),
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn read(&self, index: usize) -> Result<LatentGrid> {
        if index >= self.count {
            return Err(Error::contract(format!(
                "frame {index} outside sequence of {}",
                self.count
            )));
        }
        let path = frame_path(&self.dir, index);
        let f = read_ppm(&path)?;
        if f.width() != self.width || f.height() != self.height {
            return Err(Error::format(
                path,
                format!(
                    "frame is {}x{}, sequence is {}x{}",
                    f.width(),
                    f.height(),
                    self.width,
                    self.height
                ),
            ));
        }
        Ok(f)
    }

    pub fn read_range(&self, start: usize, end: usize) -> Result<Vec<LatentGrid>> {
        (start..end).map(|i| self.read(i)).collect()
    }
}

/// Writes numbered frames and, on [`FrameSink::finish`], the manifest.
#[derive(Debug)]
pub struct FrameSink {
    dir: PathBuf,
    written: usize,
    size: Option<(usize, usize)>,
}

impl FrameSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(super::at(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: 0,
            size: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> usize {
        self.written
    }

    /// Appends the next frame in order.
    pub fn push(&mut self, frame: &LatentGrid) -> Result<()> {
        let dims = (frame.width(), frame.height());
        match self.size {
            None => self.size = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::contract(format!(
                    "frame {} is {}x{}, sequence is {}x{}",
                    self.written, dims.0, dims.1, s.0, s.1
                )))
            }
            Some(_) => {}
        }
        write_ppm(&frame_path(&self.dir, self.written), frame)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let (w, h) = self.size.unwrap_or((0, 0));
        let path = self.dir.join(MANIFEST);
        let text = format!(
            "count={}\nwidth={w}\nheight={h}\nformat=ppm\n",
            self.written
        );
        fs::write(&path, text).map_err(super::at(&path))?;
        Ok(())
    }
}

pub fn load_frames(dir: &Path) -> Result<Vec<LatentGrid>> {
    let src = FrameSource::open(dir)?;
    src.read_range(0, src.len())
}

pub fn save_frames(frames: &[LatentGrid], dir: &Path) -> Result<()> {
    let mut sink = FrameSink::create(dir)?;
    for f in frames {
        sink.push(f)?;
    }
    sink.finish()
}
