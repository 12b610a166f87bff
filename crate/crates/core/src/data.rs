//! Image sets on disk: binary PPM (P6) files listed in a `manifest.tsv` of
//! `file  pid  cam` rows.
//!
//! Pixels load as `[3, H, W]` tensors scaled to `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "file\tpid\tcam";

/// 8-bit RGB raster, row-major `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    pub fn new(height: usize, width: usize) -> Self {
        Rgb8 {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::data("not a binary PPM (P6) file"));
        }
        for f in &mut fields {
            let tok = next_token(bytes, &mut pos)?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data("malformed PPM header"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 || width == 0 || height == 0 {
            return Err(Error::data(format!(
                "unsupported PPM: {width}x{height}, maxval {maxval}"
            )));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let body = bytes.get(pos + 1..).unwrap_or_default();
        let need = width * height * 3;
        if body.len() != need {
            return Err(Error::data(format!(
                "PPM raster has {} bytes, expected {need}",
                body.len()
            )));
        }
        Ok(Rgb8 {
            height,
            width,
            pixels: body.to_vec(),
        })
    }

    /// `[3, H, W]` with values `v / 127.5 − 1`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px[c]) / 127.5 - 1.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("non-empty raster")
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::data("truncated PPM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub file: String,
    pub pid: u32,
    pub cam: u32,
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.file, r.pid, r.cam));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
        return Err(Error::data(format!(
            "manifest must start with the header {MANIFEST_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || {
            Error::data(format!(
                "manifest line {}: expected `file<TAB>pid<TAB>cam`",
                i + 2
            ))
        };
        let [file, pid, cam] = cols[..] else {
            return Err(bad());
        };
        rows.push(ManifestRow {
            file: file.to_string(),
            pid: pid.trim().parse().map_err(|_| bad())?,
            cam: cam.trim().parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("manifest lists no images"));
    }
    Ok(rows)
}

/// Decoded images with their identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub root: PathBuf,
    pub files: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub pids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl ImageSet {
    /// Load every image listed in `dir/manifest.tsv`; all must share one size.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath)
            .map_err(|e| Error::data(format!("{}: {e}", mpath.display())))?;
        let rows = parse_manifest(&text)?;
        let mut set = ImageSet {
            root: dir.to_path_buf(),
            files: Vec::new(),
            images: Vec::new(),
            pids: Vec::new(),
            cams: Vec::new(),
        };
        for r in rows {
            let path = dir.join(&r.file);
            let bytes =
                fs::read(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let img = Rgb8::decode_ppm(&bytes)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let t = img.to_tensor();
            if let Some(first) = set.images.first() {
                if first.shape() != t.shape() {
                    return Err(Error::data(format!(
                        "{} is {:?}, expected {:?}",
                        path.display(),
                        t.shape(),
                        first.shape()
                    )));
                }
            }
            set.files.push(r.file);
            set.images.push(t);
            set.pids.push(r.pid);
            set.cams.push(r.cam);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W)` of the images.
    pub fn size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[1], s[2])
    }

    /// Distinct identities in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids = self.pids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_mean(&self) -> [f32; 3] {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.numel() / 3;
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.data()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>();
            }
            count += plane;
        }
        sum.map(|s| (s / count as f64) as f32)
    }

    /// Stack the images at `indices` into `[B, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        stack(indices.iter().map(|&i| &self.images[i]))
    }
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack<'a>(items: impl IntoIterator<Item = &'a Tensor<f32>>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut n = 0;
    for t in items {
        shape = t.shape().to_vec();
        data.extend_from_slice(t.data());
        n += 1;
    }
    shape.insert(0, n);
    Tensor::new(&shape, data).expect("stacking at least one tensor")
}
