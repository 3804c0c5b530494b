//! Procedural stand-in imagery: one texture family per class, each drawn
//! with random placement, orientation, colour jitter and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, split_assign, ChipRecord, ClassLabel, DatasetError, Manifest, Result, Split, SplitFractions};
use crate::geo::{self, GeoPoint, TileId};

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub per_class: usize,
    pub chip_size: usize,
    pub seed: u64,
    pub fractions: SplitFractions,
    /// Centre of the synthetic zoom-20 grid (defaults to Lahore).
    pub origin: (f64, f64),
}

impl SynthOptions {
    pub fn new(per_class: usize, chip_size: usize, seed: u64) -> Self {
        Self {
            per_class,
            chip_size,
            seed,
            fractions: SplitFractions::default(),
            origin: (31.52, 74.36),
        }
    }
}

/// Renders `per_class` chips of every class into `out_dir/chips/`, writes
/// `out_dir/manifest.csv` (split-assigned with the same seed) and returns it.
pub fn synth_generate(out_dir: impl AsRef<Path>, options: &SynthOptions) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if options.chip_size < 16 {
        return Err(DatasetError::Config(format!(
            "chip_size must be at least 16, got {}",
            options.chip_size
        )));
    }
    if options.per_class == 0 {
        return Err(DatasetError::Config("per_class must be positive".into()));
    }
    let chip_dir = out_dir.join("chips");
    fs::create_dir_all(&chip_dir).map_err(io_err(&chip_dir))?;

    let origin = GeoPoint::mercator(options.origin.0, options.origin.1)
        .and_then(|p| geo::mercator_latlon_to_tile(p, 20))
        .map_err(|e| DatasetError::Config(e.to_string()))?;
    const GRID_WIDTH: usize = 64;

    let mut records = Vec::with_capacity(options.per_class * ClassLabel::ALL.len());
    for label in ClassLabel::ALL {
        for i in 0..options.per_class {
            let global = records.len();
            let mut rng = chip_rng(options.seed, label, i);
            let pixels = render_chip(label, options.chip_size, &mut rng);
            let rel = format!("chips/{}_{:04}.png", label, i);
            let path = out_dir.join(&rel);
            save_png(&path, options.chip_size, &pixels)?;

            let tile = TileId::new(
                20,
                origin.x + (global % GRID_WIDTH) as u32,
                origin.y + (global / GRID_WIDTH) as u32,
            )
            .map_err(|e| DatasetError::Config(e.to_string()))?;
            let center = geo::mercator_tile_center(tile);
            records.push(ChipRecord {
                image_path: rel,
                label,
                lat: center.lat,
                lon: center.lon,
                zoom: 20,
                tile_x: tile.x,
                tile_y: tile.y,
                split: Split::Train,
            });
        }
    }
    let manifest = Manifest::new(records, Some(options.seed), out_dir);
    let manifest = split_assign(&manifest, options.fractions, options.seed)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn chip_rng(seed: u64, label: ClassLabel, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label.index() as u64) << 32) | index as u64);
    rng
}

fn save_png(path: &Path, size: usize, pixels: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(size as u32, size as u32, bytes).expect("buffer sized for the chip");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

type Rgb = [f64; 3];

/// Interleaved RGB canvas with values in [0, 1].
struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, color: Rgb) -> Self {
        let mut px = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            px.extend_from_slice(&color);
        }
        Self { size, px }
    }

    /// Sets every pixel whose centre satisfies `inside(x, y)` (canvas units 0..1).
    fn paint(&mut self, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        for py in 0..self.size {
            for px in 0..self.size {
                let (x, y) = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
                if inside(x, y) {
                    let o = (py * self.size + px) * 3;
                    self.px[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }

    fn shade(&mut self, f: impl Fn(f64, f64) -> f64) {
        let s = self.size as f64;
        for py in 0..self.size {
            for px in 0..self.size {
                let k = f((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
                let o = (py * self.size + px) * 3;
                self.px[o..o + 3].iter_mut().for_each(|v| *v *= k);
            }
        }
    }

    fn noise(&mut self, rng: &mut ChaCha8Rng, amplitude: f64) {
        for v in &mut self.px {
            *v += rng.random_range(-amplitude..amplitude);
        }
    }

    fn finish(mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let gain = rng.random_range(0.92..1.08);
        self.noise(rng, 0.04);
        self.px.iter_mut().for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
        self.px
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Coordinates of `(x, y)` in a frame centred on `(cx, cy)` rotated by `theta`.
fn local(x: f64, y: f64, cx: f64, cy: f64, theta: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

fn low_freq(rng: &mut ChaCha8Rng, depth: f64) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            (theta, rng.random_range(1.0..3.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    move |x, y| {
        let mut v = 0.0;
        for &(theta, freq, phase) in &waves {
            v += (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) + phase).sin();
        }
        1.0 + depth * v / 3.0
    }
}

fn render_chip(label: ClassLabel, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.random_range(0.0..PI);
    let cx = rng.random_range(0.35..0.65);
    let cy = rng.random_range(0.35..0.65);
    let canvas = match label {
        ClassLabel::BrickKiln => {
            // Oval kiln ring with a pale firing trench and a dark chimney.
            let mut c = Canvas::new(size, jitter(rng, [0.62, 0.53, 0.40], 0.04));
            let a = rng.random_range(0.26..0.34);
            let b = a * rng.random_range(0.5..0.7);
            let ring = jitter(rng, [0.48, 0.16, 0.10], 0.04);
            c.paint(ring, |x, y| {
                let (u, v) = local(x, y, cx, cy, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            });
            let inner = jitter(rng, [0.80, 0.70, 0.58], 0.04);
            c.paint(inner, |x, y| {
                let (u, v) = local(x, y, cx, cy, theta);
                (u / (0.6 * a)).powi(2) + (v / (0.45 * b)).powi(2) <= 1.0
            });
            c.paint([0.08, 0.06, 0.06], |x, y| (x - cx).hypot(y - cy) <= 0.05);
            c
        }
        ClassLabel::House => {
            let mut c = Canvas::new(size, jitter(rng, [0.70, 0.66, 0.58], 0.04));
            let cell = rng.random_range(0.2..0.28);
            let tilt = rng.random_range(-0.3..0.3);
            let roofs: Vec<Rgb> = (0..16)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        jitter(rng, [0.88, 0.87, 0.84], 0.05)
                    } else {
                        jitter(rng, [0.50, 0.50, 0.55], 0.05)
                    }
                })
                .collect();
            let fill = rng.random_range(0.6..0.8);
            for (k, roof) in roofs.iter().enumerate() {
                let (i, j) = ((k % 4) as f64, (k / 4) as f64);
                c.paint(*roof, |x, y| {
                    let (u, v) = local(x, y, 0.5, 0.5, tilt);
                    let (gu, gv) = ((u + 0.5) / cell - i, (v + 0.5) / cell - j);
                    (0.0..fill).contains(&gu) && (0.0..fill).contains(&gv)
                });
            }
            c
        }
        ClassLabel::Road => {
            let mut c = Canvas::new(size, jitter(rng, [0.50, 0.55, 0.38], 0.05));
            let half = rng.random_range(0.07..0.1);
            c.paint(jitter(rng, [0.36, 0.36, 0.38], 0.03), |x, y| {
                local(x, y, cx, cy, theta).1.abs() <= half
            });
            c.paint([0.9, 0.9, 0.85], |x, y| {
                let (u, v) = local(x, y, cx, cy, theta);
                v.abs() <= 0.01 && (u * 10.0).rem_euclid(1.0) < 0.5
            });
            c
        }
        ClassLabel::TennisCourt => {
            let mut c = Canvas::new(size, jitter(rng, [0.56, 0.60, 0.50], 0.04));
            let court = if rng.random_bool(0.5) {
                jitter(rng, [0.18, 0.42, 0.62], 0.04)
            } else {
                jitter(rng, [0.22, 0.55, 0.30], 0.04)
            };
            let (hu, hv) = (0.34, 0.2);
            c.paint(court, |x, y| {
                let (u, v) = local(x, y, cx, cy, theta);
                u.abs() <= hu && v.abs() <= hv
            });
            c.paint([0.97, 0.97, 0.97], |x, y| {
                let (u, v) = local(x, y, cx, cy, theta);
                let inside = u.abs() <= hu && v.abs() <= hv;
                let edge = u.abs() >= hu - 0.02 || v.abs() >= hv - 0.02 || u.abs() <= 0.01;
                inside && edge
            });
            c
        }
        ClassLabel::Farm => {
            let a = jitter(rng, [0.45, 0.62, 0.25], 0.05);
            let b = jitter(rng, [0.78, 0.72, 0.35], 0.05);
            let mut c = Canvas::new(size, a);
            let period = rng.random_range(0.14..0.22);
            c.paint(b, |x, y| (local(x, y, cx, cy, theta).1 / period).rem_euclid(1.0) < 0.5);
            c
        }
        ClassLabel::SparseTrees => {
            let mut c = Canvas::new(size, jitter(rng, [0.74, 0.68, 0.52], 0.04));
            let n = rng.random_range(4..8);
            for _ in 0..n {
                let (tx, ty) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
                let r = rng.random_range(0.05..0.09);
                let leaf = jitter(rng, [0.16, 0.36, 0.14], 0.04);
                c.paint(leaf, |x, y| (x - tx).hypot(y - ty) <= r);
            }
            c
        }
        ClassLabel::DenseTrees => {
            let mut c = Canvas::new(size, jitter(rng, [0.12, 0.26, 0.10], 0.03));
            for _ in 0..45 {
                let (tx, ty) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                let r = rng.random_range(0.06..0.12);
                let leaf = jitter(rng, [0.17, 0.38, 0.15], 0.06);
                c.paint(leaf, |x, y| (x - tx).hypot(y - ty) <= r);
            }
            c
        }
        ClassLabel::Orchard => {
            let mut c = Canvas::new(size, jitter(rng, [0.60, 0.52, 0.38], 0.04));
            let spacing = rng.random_range(0.15..0.2);
            let tilt = rng.random_range(-0.4..0.4);
            let leaf = jitter(rng, [0.20, 0.45, 0.18], 0.04);
            let (ox, oy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            c.paint(leaf, |x, y| {
                let (u, v) = local(x, y, 0.5, 0.5, tilt);
                let gu = (u / spacing + ox).rem_euclid(1.0) - 0.5;
                let gv = (v / spacing + oy).rem_euclid(1.0) - 0.5;
                gu.hypot(gv) <= 0.28
            });
            c
        }
        ClassLabel::Parking => {
            let mut c = Canvas::new(size, jitter(rng, [0.44, 0.44, 0.46], 0.03));
            let tilt = rng.random_range(-0.3..0.3);
            c.paint([0.92, 0.92, 0.90], |x, y| {
                let (u, v) = local(x, y, 0.5, 0.5, tilt);
                (u / 0.1).rem_euclid(1.0) < 0.12 && (v / 0.3).rem_euclid(1.0) < 0.5
            });
            let cars: Vec<(f64, f64, Rgb)> = (0..14)
                .filter_map(|k| {
                    if rng.random_bool(0.3) {
                        return None;
                    }
                    let colour = [rng.random(), rng.random(), rng.random()];
                    Some(((k % 7) as f64, (k / 7) as f64, colour))
                })
                .collect();
            for (i, j, colour) in cars {
                c.paint(colour, |x, y| {
                    let (u, v) = local(x, y, 0.5, 0.5, tilt);
                    let (gu, gv) = (u / 0.1 + 3.5 - i, (v + 0.3) / 0.3 - j * 2.0);
                    (0.25..0.85).contains(&gu) && (0.05..0.4).contains(&gv)
                });
            }
            c
        }
        ClassLabel::Park => {
            let mut c = Canvas::new(size, jitter(rng, [0.36, 0.62, 0.30], 0.04));
            let r = rng.random_range(0.25..0.4);
            c.paint(jitter(rng, [0.80, 0.76, 0.62], 0.03), |x, y| {
                ((x - cx).hypot(y - cy) - r).abs() <= 0.025
            });
            let shade = low_freq(rng, 0.08);
            c.shade(shade);
            c
        }
        ClassLabel::BarrenLand => {
            let mut c = Canvas::new(size, jitter(rng, [0.80, 0.72, 0.56], 0.04));
            let shade = low_freq(rng, 0.15);
            c.shade(shade);
            c
        }
    };
    canvas.finish(rng)
}
