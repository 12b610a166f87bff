//! Procedural pedestrian images for desk-scale retrieval experiments.
//!
//! Each identity has a head/torso/legs colour triple and a torso width.
//! Each camera applies a global illumination scale and a hue shift. Each
//! image adds position and scale jitter, background and body noise, and
//! (with the configured probability) a gray occluder over the lower half.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::{format_manifest, ManifestRow, Rgb8, MANIFEST};
use crate::error::{Error, Result};

pub const GENERATION_LOG: &str = "generation.tsv";
const OCCLUDER: [u8; 3] = [128, 128, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub ids: usize,
    pub cams: usize,
    /// Images per identity per camera.
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub occlude: f64,
    pub seed: u64,
    /// When positive, the last `holdout` identities are written to `query/`
    /// (camera 0) and `gallery/` (other cameras); the rest go to `train/`.
    pub holdout: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            ids: 8,
            cams: 2,
            per_id: 10,
            height: 60,
            width: 30,
            occlude: 0.0,
            seed: 0,
            holdout: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ids < 2 || self.cams == 0 || self.per_id == 0 {
            return Err(Error::config(
                "synthesis needs at least 2 identities, 1 camera and 1 image per identity",
            ));
        }
        if self.height < 10 || self.width < 10 {
            return Err(Error::config(format!(
                "image size {}x{} is below 10x10",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.occlude) {
            return Err(Error::config("occlusion probability must lie in [0, 1]"));
        }
        if self.holdout > 0 && (self.holdout >= self.ids || self.cams < 2) {
            return Err(Error::config(
                "holdout needs fewer held-out identities than identities and at least 2 cameras",
            ));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.ids * self.cams * self.per_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Signature {
    pub head: [u8; 3],
    pub torso: [u8; 3],
    pub legs: [u8; 3],
    /// Torso width as a fraction of the image width.
    pub torso_width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub illumination: f64,
    /// Weight of the channel-rotated colour mixed into each pixel.
    pub hue_shift: f64,
}

impl Camera {
    fn apply(&self, rgb: [f64; 3]) -> [u8; 3] {
        let rot = [rgb[1], rgb[2], rgb[0]];
        let h = self.hue_shift;
        std::array::from_fn(|c| {
            (((1.0 - h) * rgb[c] + h * rot[c]) * self.illumination)
                .round()
                .clamp(0.0, 255.0) as u8
        })
    }
}

/// One generated image and how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub split: &'static str,
    pub file: String,
    pub pid: u32,
    pub cam: u32,
    pub signature: Signature,
    pub occluded: bool,
    pub image: Rgb8,
}

pub fn file_name(pid: u32, cam: u32, idx: u32) -> String {
    format!("{pid:04}_{cam:02}_{idx:04}.ppm")
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    std::array::from_fn(|_| rng.gen_range(20..=235))
}

fn render<R: Rng + ?Sized>(
    spec: &SynthSpec,
    sig: &Signature,
    cam: &Camera,
    occluded: bool,
    rng: &mut R,
) -> Rgb8 {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let scale = rng.gen_range(0.88..1.0);
    let dy = rng.gen_range(-0.04..0.04) * h;
    let dx = rng.gen_range(-0.08..0.08) * w;
    let bh = 0.92 * h * scale;
    let top = (h - bh) / 2.0 + dy;
    let cx = w / 2.0 + dx;
    let bg = rng.gen_range(70.0..170.0);
    let mut img = Rgb8::new(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (fy, fx) = ((y as f64 + 0.5 - top) / bh, x as f64 + 0.5 - cx);
            let part = if !(0.0..1.0).contains(&fy) {
                None
            } else if fy < 0.18 {
                let (ry, rx) = ((fy - 0.09) / 0.09, fx / (0.17 * w * scale));
                (ry * ry + rx * rx <= 1.0).then_some(sig.head)
            } else if fy < 0.56 {
                (fx.abs() <= 0.5 * sig.torso_width * w * scale).then_some(sig.torso)
            } else {
                let off = fx.abs() / (w * scale);
                (0.03..0.2).contains(&off).then_some(sig.legs)
            };
            let rgb = match part {
                Some(c) => std::array::from_fn(|k| f64::from(c[k]) + rng.gen_range(-10.0..10.0)),
                None => std::array::from_fn(|_| bg + rng.gen_range(-25.0..25.0)),
            };
            img.put(y, x, cam.apply(rgb));
        }
    }
    if occluded {
        let y0 = spec.height / 2 + rng.gen_range(0..=spec.height / 8);
        let span = rng.gen_range(spec.width * 3 / 5..=spec.width);
        let x0 = rng.gen_range(0..=spec.width - span);
        for y in y0..spec.height {
            for x in x0..x0 + span {
                img.put(y, x, OCCLUDER);
            }
        }
    }
    img
}

/// Draw every image in memory; deterministic in `spec.seed`.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<GeneratedImage>> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let sigs: Vec<Signature> = (0..spec.ids)
        .map(|_| Signature {
            head: color(&mut rng),
            torso: color(&mut rng),
            legs: color(&mut rng),
            torso_width: rng.gen_range(0.4..0.75),
        })
        .collect();
    let cams: Vec<Camera> = (0..spec.cams)
        .map(|_| Camera {
            illumination: rng.gen_range(0.75..1.2),
            hue_shift: rng.gen_range(0.0..0.25),
        })
        .collect();
    let mut out = Vec::with_capacity(spec.total_images());
    for (pid, sig) in sigs.iter().enumerate() {
        let held = spec.holdout > 0 && pid >= spec.ids - spec.holdout;
        for (cam, c) in cams.iter().enumerate() {
            let split = match (spec.holdout > 0, held, cam) {
                (false, _, _) => "",
                (true, false, _) => "train",
                (true, true, 0) => "query",
                (true, true, _) => "gallery",
            };
            for idx in 0..spec.per_id {
                let occluded = spec.occlude > 0.0 && rng.gen_bool(spec.occlude);
                let image = render(spec, sig, c, occluded, &mut rng);
                let (pid, cam) = (pid as u32, cam as u32);
                out.push(GeneratedImage {
                    split,
                    file: file_name(pid, cam, idx as u32),
                    pid,
                    cam,
                    signature: *sig,
                    occluded,
                    image,
                });
            }
        }
    }
    Ok(out)
}

fn rgb_text(c: [u8; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

/// Write the images, one `manifest.tsv` per split directory, and a
/// generation log at the root. Returns the number of images written.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<usize> {
    let images = synthesize(spec)?;
    let mut manifests: Vec<(&str, Vec<ManifestRow>)> = Vec::new();
    let mut log = String::from("split\tfile\tpid\tcam\thead\ttorso\tlegs\ttorso_width\toccluded\n");
    fs::create_dir_all(out)?;
    for g in &images {
        let dir = out.join(g.split);
        if !manifests.iter().any(|(s, _)| *s == g.split) {
            fs::create_dir_all(&dir)?;
            manifests.push((g.split, Vec::new()));
        }
        fs::write(dir.join(&g.file), g.image.encode_ppm())?;
        let rows = &mut manifests
            .iter_mut()
            .find(|(s, _)| *s == g.split)
            .expect("split registered")
            .1;
        rows.push(ManifestRow {
            file: g.file.clone(),
            pid: g.pid,
            cam: g.cam,
        });
        let s = &g.signature;
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\n",
            if g.split.is_empty() { "all" } else { g.split },
            g.file,
            g.pid,
            g.cam,
            rgb_text(s.head),
            rgb_text(s.torso),
            rgb_text(s.legs),
            s.torso_width,
            u8::from(g.occluded)
        ));
    }
    for (split, rows) in &manifests {
        fs::write(out.join(split).join(MANIFEST), format_manifest(rows))?;
    }
    fs::write(out.join(GENERATION_LOG), log)?;
    Ok(images.len())
}
