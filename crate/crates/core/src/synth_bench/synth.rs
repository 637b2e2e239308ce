use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tokenization::ImageCrop;

/// Side of the square color grid that makes up a texture.
pub const TEXTURE_CELLS: usize = 4;

/// `TEXTURE_CELLS²` RGB cells stretched over an object's box.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub cells: Vec<[f64; 3]>,
}

impl Texture {
    pub fn random(rng: &mut impl Rng) -> Self {
        let cells = (0..TEXTURE_CELLS * TEXTURE_CELLS)
            .map(|_| {
                [
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                ]
            })
            .collect();
        Self { cells }
    }

    /// `s·self + (1 − s)·other`
    pub fn blend(&self, other: &Texture, s: f64) -> Self {
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| [0, 1, 2].map(|c| s * a[c] + (1.0 - s) * b[c]))
            .collect();
        Self { cells }
    }

    /// Color at relative position `(u, v) ∈ [0, 1)²`.
    pub fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let n = TEXTURE_CELLS as f64;
        let i = ((v * n) as usize).min(TEXTURE_CELLS - 1);
        let j = ((u * n) as usize).min(TEXTURE_CELLS - 1);
        self.cells[i * TEXTURE_CELLS + j]
    }
}

/// Synthetic sequence parameters. Everything random derives from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub frame_size: usize,
    pub length: usize,
    /// Smallest and largest target side in pixels.
    pub target_size: (f64, f64),
    pub distractors: usize,
    /// Texture closeness of distractors to the initial target, in `[0, 1]`.
    pub similarity: f64,
    /// Largest per-frame displacement of the linear motion, in pixels.
    pub speed: f64,
    /// Standard deviation of per-frame position noise, in pixels.
    pub jitter: f64,
    /// Fraction of the way the target texture drifts to a second texture
    /// by the last frame.
    pub drift: f64,
    pub occlusion: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_size: 128,
            length: 30,
            target_size: (14.0, 20.0),
            distractors: 1,
            similarity: 0.8,
            speed: 1.5,
            jitter: 0.5,
            drift: 0.6,
            occlusion: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.target_size;
        if self.frame_size == 0 || self.length == 0 {
            return Err(Error::config(
                "synth.frame_size",
                "frame size and length must be positive",
            ));
        }
        if !(lo > 1.0 && hi >= lo && 3.0 * hi < self.frame_size as f64) {
            return Err(Error::config(
                "synth.target_size",
                format!(
                    "target sides {lo}..{hi} do not fit a {} px frame",
                    self.frame_size
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::config("synth.similarity", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::config("synth.drift", "must lie in [0, 1]"));
        }
        if self.speed < 0.0 || self.jitter < 0.0 {
            return Err(Error::config(
                "synth.speed",
                "speed and jitter must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Rendered frames and the target box in each.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    pub frames: Vec<ImageCrop>,
    pub boxes: Vec<Rect>,
    /// Target texture in the first frame.
    pub target_texture: Texture,
    pub distractor_textures: Vec<Texture>,
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Background {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [
            0.3 + 0.3 * rng.random::<f64>(),
            0.3 + 0.3 * rng.random::<f64>(),
            0.3 + 0.3 * rng.random::<f64>(),
        ];
        let waves = (0..3)
            .map(|_| {
                let fx = rng.random::<f64>() * 0.15;
                let fy = rng.random::<f64>() * 0.15;
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                let amp = [
                    0.1 * rng.random::<f64>(),
                    0.1 * rng.random::<f64>(),
                    0.1 * rng.random::<f64>(),
                ];
                (fx, fy, phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (fx, fy, ph, amp) in &self.waves {
            let s = (fx * x + fy * y + ph).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

fn paint(frame: &mut ImageCrop, r: &Rect, tex: &Texture) {
    let size = frame.width() as isize;
    let x0 = r.x.floor().max(0.0) as isize;
    let y0 = r.y.floor().max(0.0) as isize;
    let x1 = ((r.x + r.w).ceil() as isize).min(size);
    let y1 = ((r.y + r.h).ceil() as isize).min(frame.height() as isize);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < r.x || px >= r.x + r.w || py < r.y || py >= r.y + r.h {
                continue;
            }
            let c = tex.at((px - r.x) / r.w, (py - r.y) / r.h);
            frame.set_pixel(y as usize, x as usize, c);
        }
    }
}

/// Renders a sequence: textured background, distractors circling the
/// target at one to two target sides, and the drifting-texture target on
/// top. Deterministic in the config.
pub fn gen_sequence(cfg: &SynthConfig) -> Result<SynthSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.frame_size as f64;
    let bg = Background::random(&mut rng);
    let t0 = Texture::random(&mut rng);
    let t1 = Texture::random(&mut rng);
    let (lo, hi) = cfg.target_size;
    let side = lo + (hi - lo) * rng.random::<f64>();
    let aspect = 0.8 + 0.45 * rng.random::<f64>();
    let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());

    // Linear path whose end stays inside the frame margins.
    let margin = 1.5 * side;
    let span = (fs - 2.0 * margin).max(0.0);
    let start = (
        margin + span * rng.random::<f64>(),
        margin + span * rng.random::<f64>(),
    );
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let mut v = (angle.cos() * cfg.speed, angle.sin() * cfg.speed);
    for (p, vel) in [(start.0, &mut v.0), (start.1, &mut v.1)] {
        let end = p + *vel * (cfg.length.saturating_sub(1)) as f64;
        if end < margin || end > fs - margin {
            *vel = -*vel;
        }
    }
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("positive std");

    struct Distractor {
        tex: Texture,
        radius: f64,
        phase: f64,
        omega: f64,
        scale: f64,
    }
    let distractors: Vec<Distractor> = (0..cfg.distractors)
        .map(|_| {
            let other = Texture::random(&mut rng);
            Distractor {
                tex: t0.blend(&other, cfg.similarity),
                radius: side * (1.2 + 0.8 * rng.random::<f64>()),
                phase: rng.random::<f64>() * std::f64::consts::TAU,
                omega: (rng.random::<f64>() - 0.5) * 0.1,
                scale: 0.9 + 0.2 * rng.random::<f64>(),
            }
        })
        .collect();

    let occl_start = cfg.length / 3;
    let occl_end = occl_start + (cfg.length / 6).max(1);
    let mut frames = Vec::with_capacity(cfg.length);
    let mut boxes = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let tf = t as f64;
        let (jx, jy) = if cfg.jitter > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let cx = start.0 + v.0 * tf + jx;
        let cy = start.1 + v.1 * tf + jy;
        let target = Rect::from_center(cx, cy, w, h);
        if target.intersection_area(&Rect::new(0.0, 0.0, fs, fs)) <= 0.0 {
            return Err(Error::config(
                "synth.speed",
                format!("target leaves the frame at frame {t}"),
            ));
        }
        let mut frame = ImageCrop::from_fn(cfg.frame_size, cfg.frame_size, |y, x| {
            bg.at(x as f64 + 0.5, y as f64 + 0.5)
        });
        for d in &distractors {
            let a = d.phase + d.omega * tf;
            let r = Rect::from_center(
                cx + d.radius * a.cos(),
                cy + d.radius * a.sin(),
                w * d.scale,
                h * d.scale,
            );
            paint(&mut frame, &r, &d.tex);
        }
        let progress = if cfg.length > 1 {
            tf / (cfg.length - 1) as f64
        } else {
            0.0
        };
        let tex = t1.blend(&t0, cfg.drift * progress);
        paint(&mut frame, &target, &tex);
        if cfg.occlusion && (occl_start..occl_end).contains(&t) {
            let occ = Rect::new(target.x, target.y, w / 2.0, h);
            let gray = Texture {
                cells: vec![[0.5; 3]; TEXTURE_CELLS * TEXTURE_CELLS],
            };
            paint(&mut frame, &occ, &gray);
        }
        frames.push(frame);
        boxes.push(target);
    }
    Ok(SynthSequence {
        frames,
        boxes,
        target_texture: t0,
        distractor_textures: distractors.into_iter().map(|d| d.tex).collect(),
    })
}
