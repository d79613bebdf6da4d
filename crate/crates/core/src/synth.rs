//! Procedural textures, homography warps and on-disk fixtures for tests and
//! toy training runs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::Homography;

const BUCKET: f64 = 32.0;

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Inverse covariance of an anisotropic Gaussian.
    a: f64,
    b: f64,
    c: f64,
    reach: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

/// A colour texture defined on the whole plane, so warped views need no border handling.
#[derive(Debug, Clone)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
    origin: (f64, f64),
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl Texture {
    /// Random blobs over `[-margin, extent + margin]²` on top of a few smooth waves.
    pub fn random(seed: u64, extent: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0.0, 1.0, 2.0].map(|_| rng.random_range(0.3..0.7));
        let waves = (0..3)
            .map(|_| {
                let freq = rng.random_range(0.01..0.05);
                let angle = rng.random_range(0.0..PI);
                Wave {
                    kx: freq * angle.cos(),
                    ky: freq * angle.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: [0.0, 1.0, 2.0].map(|_| rng.random_range(-0.08..0.08)),
                }
            })
            .collect();
        let margin = 0.25 * extent;
        let lo = -margin;
        let span = extent + 2.0 * margin;
        let count = (span * span / 500.0) as usize;
        let blobs = (0..count)
            .map(|_| {
                let sx = rng.random_range(2.0..9.0f64);
                let sy = sx * rng.random_range(0.5..1.5);
                let theta = rng.random_range(0.0..PI);
                let (ct, st) = (theta.cos(), theta.sin());
                let (ix, iy) = (1.0 / (sx * sx), 1.0 / (sy * sy));
                let mut color = [0.0, 1.0, 2.0].map(|_| rng.random_range(-0.6..0.6));
                if rng.random_bool(0.5) {
                    color = color.map(|v: f64| v.abs());
                }
                Blob {
                    cx: rng.random_range(lo..lo + span),
                    cy: rng.random_range(lo..lo + span),
                    a: ct * ct * ix + st * st * iy,
                    b: ct * st * (ix - iy),
                    c: st * st * ix + ct * ct * iy,
                    reach: 3.0 * sx.max(sy),
                    color,
                }
            })
            .collect();
        let mut tex = Texture {
            base,
            waves,
            blobs,
            origin: (lo, lo),
            cols: (span / BUCKET).ceil() as usize + 1,
            rows: (span / BUCKET).ceil() as usize + 1,
            buckets: vec![],
        };
        tex.index_blobs();
        tex
    }

    fn index_blobs(&mut self) {
        self.buckets = vec![vec![]; self.cols * self.rows];
        for (i, b) in self.blobs.iter().enumerate() {
            let x0 = self.bucket_coord(b.cx - b.reach, self.origin.0, self.cols);
            let x1 = self.bucket_coord(b.cx + b.reach, self.origin.0, self.cols);
            let y0 = self.bucket_coord(b.cy - b.reach, self.origin.1, self.rows);
            let y1 = self.bucket_coord(b.cy + b.reach, self.origin.1, self.rows);
            for by in y0..=y1 {
                for bx in x0..=x1 {
                    self.buckets[by * self.cols + bx].push(i);
                }
            }
        }
    }

    fn bucket_coord(&self, v: f64, origin: f64, n: usize) -> usize {
        (((v - origin) / BUCKET).floor().max(0.0) as usize).min(n - 1)
    }

    /// Linear RGB in `[0, 1]` at plane position `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut rgb = self.base;
        for w in &self.waves {
            let s = (w.kx * x + w.ky * y + w.phase).sin();
            for (v, a) in rgb.iter_mut().zip(w.amp.iter()) {
                *v += a * s;
            }
        }
        let inside = x >= self.origin.0
            && y >= self.origin.1
            && x < self.origin.0 + self.cols as f64 * BUCKET
            && y < self.origin.1 + self.rows as f64 * BUCKET;
        if inside {
            let bx = self.bucket_coord(x, self.origin.0, self.cols);
            let by = self.bucket_coord(y, self.origin.1, self.rows);
            for &i in &self.buckets[by * self.cols + bx] {
                let b = &self.blobs[i];
                let (dx, dy) = (x - b.cx, y - b.cy);
                if dx.abs() > b.reach || dy.abs() > b.reach {
                    continue;
                }
                let q = b.a * dx * dx + 2.0 * b.b * dx * dy + b.c * dy * dy;
                let g = (-0.5 * q).exp();
                for (v, c) in rgb.iter_mut().zip(b.color.iter()) {
                    *v += c * g;
                }
            }
        }
        rgb.map(|v| v.clamp(0.0, 1.0))
    }

    /// Renders the view in which plane point `p` appears at pixel `h·p`.
    pub fn render(&self, width: u32, height: u32, h: &Homography) -> Result<RgbImage> {
        let inv = h.inverse()?;
        let mut img = RgbImage::new(width, height);
        for (px, py, out) in img.enumerate_pixels_mut() {
            // pixel centers sit at integer coordinates
            let rgb = match inv.project(f64::from(px), f64::from(py)) {
                Some((u, v)) => self.sample(u, v),
                None => self.base,
            };
            *out = Rgb(rgb.map(|v| (v * 255.0).round() as u8));
        }
        Ok(img)
    }
}

/// Rotation about the image center by `angle_deg`, isotropic `scale`, a shift and a
/// small perspective term.
pub fn centered_homography(
    size: (f64, f64),
    angle_deg: f64,
    scale: f64,
    shift: (f64, f64),
    perspective: (f64, f64),
) -> Homography {
    let (cx, cy) = (size.0 / 2.0, size.1 / 2.0);
    let t = angle_deg.to_radians();
    let (c, s) = (scale * t.cos(), scale * t.sin());
    let to_origin = Homography([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]]);
    let core = Homography([
        [c, -s, 0.0],
        [s, c, 0.0],
        [perspective.0, perspective.1, 1.0],
    ]);
    let back = Homography([
        [1.0, 0.0, cx + shift.0],
        [0.0, 1.0, cy + shift.1],
        [0.0, 0.0, 1.0],
    ]);
    back.compose(&core.compose(&to_origin))
}

/// A random mild warp: rotation within `±max_angle_deg`, scale within `1 ± max_scale`.
pub fn random_homography<R: Rng + ?Sized>(
    rng: &mut R,
    size: (f64, f64),
    max_angle_deg: f64,
    max_scale: f64,
) -> Homography {
    let angle = rng.random_range(-max_angle_deg..=max_angle_deg);
    let scale = 1.0 + rng.random_range(-max_scale..=max_scale);
    let shift = (
        rng.random_range(-0.03..0.03) * size.0,
        rng.random_range(-0.03..0.03) * size.1,
    );
    let p = 1e-5 * 512.0 / size.0.max(size.1);
    let persp = (rng.random_range(-p..p), rng.random_range(-p..p));
    centered_homography(size, angle, scale, shift, persp)
}

/// Brightness/contrast change applied per channel.
pub fn relight(img: &RgbImage, gain: [f64; 3], bias: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p[c] = (f64::from(p[c]) * gain[c] + bias * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `scenes` anchor/positive pairs and a `manifest.jsonl` under `dir`.
///
/// Each scene is one texture seen through two independent mild warps.
pub fn write_pair_fixture(dir: &Path, scenes: usize, size: u32, seed: u64) -> Result<PathBuf> {
    mkdir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = String::new();
    let dims = (f64::from(size), f64::from(size));
    for s in 0..scenes {
        let tex = Texture::random(rng.random(), f64::from(size));
        let names = [format!("scene{s:03}_a.png"), format!("scene{s:03}_p.png")];
        for name in &names {
            let h = random_homography(&mut rng, dims, 10.0, 0.08);
            save(&tex.render(size, size, &h)?, &dir.join(name))?;
        }
        let record = serde_json::json!({"scene": format!("scene{s:03}"), "anchor": names[0], "positive": names[1]});
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Writes a small homography-benchmark layout: `i_*` sequences change lighting under
/// the identity, `v_*` sequences change viewpoint. Each has `1.png` and targets
/// `2.png..` with `H_1_k` files.
pub fn write_sequence_fixture(
    dir: &Path,
    per_kind: usize,
    targets: usize,
    size: u32,
    seed: u64,
) -> Result<()> {
    mkdir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = (f64::from(size), f64::from(size));
    for kind in ["i", "v"] {
        for n in 0..per_kind {
            let seq = dir.join(format!("{kind}_synth{n}"));
            mkdir(&seq)?;
            let tex = Texture::random(rng.random(), f64::from(size));
            let reference = tex.render(size, size, &Homography::IDENTITY)?;
            save(&reference, &seq.join("1.png"))?;
            for k in 2..targets + 2 {
                let (img, h) = if kind == "i" {
                    let gain = [0.0, 1.0, 2.0].map(|_| rng.random_range(0.6..1.3));
                    (
                        relight(&reference, gain, rng.random_range(-0.1..0.1)),
                        Homography::IDENTITY,
                    )
                } else {
                    let h = random_homography(&mut rng, dims, 12.0, 0.1);
                    (tex.render(size, size, &h)?, h)
                };
                save(&img, &seq.join(format!("{k}.png")))?;
                let hp = seq.join(format!("H_1_{k}"));
                fs::write(&hp, h.to_text()).map_err(|e| Error::io(&hp, e))?;
            }
        }
    }
    Ok(())
}
