//! Synthetic quadruped benchmark. Each species is a body ellipse, a head
//! disc with ears, eyes and nose, and four two-segment limbs; images add
//! part-like clutter on a textured background. Images are rendered on
//! demand from per-image seeds, so a dataset is a few hundred bytes until
//! it is used.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{param, Result};
use crate::fskd::Keypoint;
use crate::saliency::{self, SaliencyMap};

pub const NUM_KEYPOINTS: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "ear_front",
    "ear_back",
    "nose",
    "eye_front",
    "eye_back",
    "root_front_near",
    "root_front_far",
    "root_hind_near",
    "root_hind_far",
    "knee_front_near",
    "knee_front_far",
    "knee_hind_near",
    "knee_hind_far",
    "paw_front_near",
    "paw_front_far",
    "paw_hind_near",
    "paw_hind_far",
];

/// Ears, nose, limb roots and paws.
pub const BASE_KEYPOINTS: [usize; 11] = [0, 1, 2, 5, 6, 7, 8, 13, 14, 15, 16];
/// Eyes and knees.
pub const NOVEL_KEYPOINTS: [usize; 6] = [3, 4, 9, 10, 11, 12];

/// Endpoint pairs of the auxiliary interpolation paths: root to paw for
/// every limb, and each ear to the nose.
pub const AUX_PATHS: [(usize, usize); 6] = [(5, 13), (6, 14), (7, 15), (8, 16), (0, 2), (1, 2)];
pub const AUX_NODES: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub species: usize,
    pub images_per_species: usize,
    pub image: usize,
    pub diffusion_scale: f64,
    pub blur_sigma: f64,
    /// Distractor count range per image.
    pub clutter: (usize, usize),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            species: 5,
            images_per_species: 200,
            image: 96,
            diffusion_scale: 8.0,
            blur_sigma: 2.0,
            clutter: (3, 6),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub body: [f64; 3],
    pub head: [f64; 3],
    pub leg: [f64; 3],
    pub joint: [f64; 3],
    pub paw: [f64; 3],
    pub eye: [f64; 3],
    pub nose: [f64; 3],
    pub ear: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Species {
    pub id: usize,
    /// Body ellipse radii.
    pub body: [f64; 2],
    pub head_r: f64,
    /// Head center offset from the front of the body, up positive.
    pub neck: [f64; 2],
    pub ear_r: f64,
    pub upper: f64,
    pub lower: f64,
    pub leg_width: f64,
    /// Mean and spread of limb swing angles (radians).
    pub stance: f64,
    pub swing: f64,
    pub palette: Palette,
}

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Species {
    /// Species `id` of the dataset seeded by `seed`.
    pub fn generate(seed: u64, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5bd1_e995u64.wrapping_mul(id as u64 + 1)));
        let body = color(&mut rng, 0.35, 0.95);
        let palette = Palette {
            body,
            head: body.map(|c| (c + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0)),
            leg: body.map(|c| (c * rng.gen_range(0.6..0.9)).clamp(0.0, 1.0)),
            joint: color(&mut rng, 0.5, 1.0),
            paw: color(&mut rng, 0.0, 0.25),
            eye: color(&mut rng, 0.0, 0.15),
            nose: color(&mut rng, 0.05, 0.45),
            ear: color(&mut rng, 0.2, 0.8),
        };
        Self {
            id,
            body: [rng.gen_range(14.0..19.0), rng.gen_range(8.0..11.0)],
            head_r: rng.gen_range(6.0..8.5),
            neck: [rng.gen_range(1.0..5.0), rng.gen_range(5.0..10.0)],
            ear_r: rng.gen_range(2.2..3.2),
            upper: rng.gen_range(9.0..13.0),
            lower: rng.gen_range(8.0..12.0),
            leg_width: rng.gen_range(2.6..4.0),
            stance: rng.gen_range(-0.15..0.15),
            swing: rng.gen_range(0.15..0.35),
            palette,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Ellipse { c: [f64; 2], r: [f64; 2], angle: f64 },
    Disc { c: [f64; 2], r: f64 },
    Capsule { a: [f64; 2], b: [f64; 2], r: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Ellipse { c, r, angle } => {
                let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                let (s, co) = angle.sin_cos();
                let u = co * dx + s * dy;
                let v = -s * dx + co * dy;
                (u / r[0]).powi(2) + (v / r[1]).powi(2) <= 1.0
            }
            Shape::Disc { c, r } => (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r,
            Shape::Capsule { a, b, r } => {
                let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 {
                    (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p[0] - a[0] - t * ex).powi(2) + (p[1] - a[1] - t * ey).powi(2) <= r * r
            }
        }
    }

    /// Axis-aligned bounds `[x0, y0, x1, y1]`.
    fn bounds(&self) -> [f64; 4] {
        match *self {
            Shape::Ellipse { c, r, .. } => {
                let m = r[0].max(r[1]);
                [c[0] - m, c[1] - m, c[0] + m, c[1] + m]
            }
            Shape::Disc { c, r } => [c[0] - r, c[1] - r, c[0] + r, c[1] + r],
            Shape::Capsule { a, b, r } => [
                a[0].min(b[0]) - r,
                a[1].min(b[1]) - r,
                a[0].max(b[0]) + r,
                a[1].max(b[1]) + r,
            ],
        }
    }

    fn shifted(self, d: [f64; 2]) -> Self {
        let m = |p: [f64; 2]| [p[0] + d[0], p[1] + d[1]];
        match self {
            Shape::Ellipse { c, r, angle } => Shape::Ellipse { c: m(c), r, angle },
            Shape::Disc { c, r } => Shape::Disc { c: m(c), r },
            Shape::Capsule { a, b, r } => Shape::Capsule { a: m(a), b: m(b), r },
        }
    }
}

/// A rendered image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub species: usize,
    pub side: usize,
    /// Row-major RGB in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Ground-truth foreground (union of the animal's parts).
    pub mask: Vec<bool>,
    pub keypoints: Vec<Keypoint>,
    /// Tight pixel box of the foreground, `[x0, y0, x1, y1)`.
    pub bbox: [f64; 4],
}

impl Sample {
    pub fn raw_saliency(&self) -> SaliencyMap {
        let v = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        SaliencyMap::new(self.side, self.side, v).expect("square mask")
    }

    /// Encoder saliency input: the ground-truth mask after diffusion and blur.
    pub fn input_saliency(&self, cfg: &DataConfig) -> Result<SaliencyMap> {
        saliency::preprocess(&self.raw_saliency(), cfg.diffusion_scale, cfg.blur_sigma)
    }

    pub fn bbox_size(&self) -> (f64, f64) {
        (self.bbox[2] - self.bbox[0], self.bbox[3] - self.bbox[1])
    }
}

/// One image: its species and rendering seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Item {
    pub species: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cfg: DataConfig,
    pub species: Vec<Species>,
    pub items: Vec<Item>,
}

struct Animal {
    /// Paint order; the mask is the union of all of them.
    parts: Vec<(Shape, [f64; 3])>,
    keypoints: [[f64; 2]; NUM_KEYPOINTS],
}

fn jitter(rng: &mut impl Rng, c: [f64; 3]) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
}

fn build_animal(sp: &Species, rng: &mut impl Rng) -> Animal {
    let s = rng.gen_range(0.85..1.15);
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let tilt: f64 = rng.gen_range(-0.12..0.12);
    let (sn, cs) = tilt.sin_cos();
    let world = |p: [f64; 2]| {
        let (x, y) = (dir * p[0] * s, p[1] * s);
        [cs * x - sn * y, sn * x + cs * y]
    };
    let pal = Palette {
        body: jitter(rng, sp.palette.body),
        head: jitter(rng, sp.palette.head),
        leg: jitter(rng, sp.palette.leg),
        joint: jitter(rng, sp.palette.joint),
        paw: jitter(rng, sp.palette.paw),
        eye: jitter(rng, sp.palette.eye),
        nose: jitter(rng, sp.palette.nose),
        ear: jitter(rng, sp.palette.ear),
    };
    let [rx, ry] = sp.body;
    let hr = sp.head_r;
    let h = [rx + sp.neck[0], -sp.neck[1] + rng.gen_range(-2.0..2.0)];
    let at = |dx: f64, dy: f64| [h[0] + dx * hr, h[1] + dy * hr];
    let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
    kp[0] = at(0.35, -0.95);
    kp[1] = at(-0.35, -0.95);
    kp[2] = at(0.92, 0.15);
    kp[3] = at(0.45, -0.3);
    kp[4] = at(0.05, -0.35);
    let roots = [0.6, 0.35, -0.35, -0.6];
    for (i, &fx) in roots.iter().enumerate() {
        let root = [fx * rx, 0.55 * ry];
        let a = sp.stance + rng.gen_range(-sp.swing..sp.swing);
        let b = a + rng.gen_range(-0.3..0.3);
        let knee = [root[0] + sp.upper * a.sin(), root[1] + sp.upper * a.cos()];
        let paw = [knee[0] + sp.lower * b.sin(), knee[1] + sp.lower * b.cos()];
        kp[5 + i] = root;
        kp[9 + i] = knee;
        kp[13 + i] = paw;
    }
    let w = sp.leg_width * s;
    let mut parts = Vec::new();
    let limb = |parts: &mut Vec<(Shape, [f64; 3])>, i: usize, shade: f64| {
        let dark = |c: [f64; 3]| c.map(|v| v * shade);
        let (r, k, p) = (world(kp[5 + i]), world(kp[9 + i]), world(kp[13 + i]));
        parts.push((Shape::Capsule { a: r, b: k, r: w / 2.0 }, dark(pal.leg)));
        parts.push((Shape::Capsule { a: k, b: p, r: 0.4 * w }, dark(pal.leg)));
        parts.push((Shape::Disc { c: k, r: 0.7 * w }, dark(pal.joint)));
        parts.push((Shape::Disc { c: p, r: 0.65 * w }, dark(pal.paw)));
    };
    limb(&mut parts, 1, 0.75);
    limb(&mut parts, 3, 0.75);
    parts.push((Shape::Ellipse { c: world([0.0, 0.0]), r: [rx * s, ry * s], angle: tilt }, pal.body));
    limb(&mut parts, 0, 1.0);
    limb(&mut parts, 2, 1.0);
    for e in [kp[1], kp[0]] {
        parts.push((Shape::Disc { c: world(e), r: sp.ear_r * s }, pal.ear));
    }
    parts.push((Shape::Disc { c: world(h), r: hr * s }, pal.head));
    let eye_r = (0.14 * hr * s).max(1.0);
    parts.push((Shape::Disc { c: world(kp[3]), r: eye_r }, pal.eye));
    parts.push((Shape::Disc { c: world(kp[4]), r: eye_r }, pal.eye));
    parts.push((Shape::Disc { c: world(kp[2]), r: (0.2 * hr * s).max(1.2) }, pal.nose));
    Animal {
        parts,
        keypoints: kp.map(world),
    }
}

/// Head-, limb- or body-like distractor painted in some species' colors.
fn distractor(rng: &mut impl Rng, species: &[Species], side: f64) -> Vec<(Shape, [f64; 3])> {
    let pal = species[rng.gen_range(0..species.len())].palette;
    let c = [rng.gen_range(0.0..side), rng.gen_range(0.0..side)];
    match rng.gen_range(0..3) {
        0 => {
            let r = rng.gen_range(4.0..8.0);
            let e = [c[0] + rng.gen_range(-0.4..0.4) * r, c[1] - 0.3 * r];
            vec![
                (Shape::Disc { c, r }, pal.head),
                (Shape::Disc { c: e, r: (0.14 * r).max(1.0) }, pal.eye),
            ]
        }
        1 => {
            let len = rng.gen_range(8.0..16.0);
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let w = rng.gen_range(2.5..4.0);
            let b = [c[0] + len * ang.cos(), c[1] + len * ang.sin()];
            vec![
                (Shape::Capsule { a: c, b, r: w / 2.0 }, pal.leg),
                (Shape::Disc { c: b, r: 0.7 * w }, pal.joint),
            ]
        }
        _ => vec![(
            Shape::Ellipse {
                c,
                r: [rng.gen_range(6.0..12.0), rng.gen_range(4.0..7.0)],
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            pal.body,
        )],
    }
}

impl Dataset {
    pub fn generate(cfg: DataConfig) -> Result<Self> {
        if cfg.species == 0 || cfg.images_per_species == 0 {
            return param("dataset needs at least one species and one image per species");
        }
        if cfg.image < 48 {
            return param(format!("image side {} is too small for the synthetic animals", cfg.image));
        }
        let species = (0..cfg.species).map(|i| Species::generate(cfg.seed, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut items = Vec::with_capacity(cfg.species * cfg.images_per_species);
        for s in 0..cfg.species {
            for _ in 0..cfg.images_per_species {
                items.push(Item { species: s, seed: rng.gen() });
            }
        }
        Ok(Self { cfg, species, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item indices of species `s`.
    pub fn of_species(&self, s: usize) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].species == s).collect()
    }

    /// Placed animal parts and keypoints of image `index`, with the image's
    /// generator positioned after placement.
    fn layout(&self, index: usize) -> (ChaCha8Rng, Vec<(Shape, [f64; 3])>, Vec<Keypoint>) {
        let item = self.items[index];
        let sf = self.cfg.image as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
        let animal = build_animal(&self.species[item.species], &mut rng);

        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for (shape, _) in &animal.parts {
            let r = shape.bounds();
            b = [b[0].min(r[0]), b[1].min(r[1]), b[2].max(r[2]), b[3].max(r[3])];
        }
        let margin = 2.0;
        let place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let (a, z) = (margin - lo, sf - margin - hi);
            if a < z {
                rng.gen_range(a..z)
            } else {
                (a + z) / 2.0
            }
        };
        let shift = [place(&mut rng, b[0], b[2]), place(&mut rng, b[1], b[3])];
        let parts = animal.parts.iter().map(|(s, c)| (s.shifted(shift), *c)).collect();
        let keypoints = animal
            .keypoints
            .iter()
            .map(|p| {
                let x = [p[0] + shift[0], p[1] + shift[1]];
                if (0.0..sf).contains(&x[0]) && (0.0..sf).contains(&x[1]) {
                    Keypoint { x, visible: true }
                } else {
                    Keypoint::hidden()
                }
            })
            .collect();
        (rng, parts, keypoints)
    }

    pub fn render(&self, index: usize) -> Sample {
        let side = self.cfg.image;
        let sf = side as f64;
        let (mut rng, parts, keypoints) = self.layout(index);
        let n_clutter = rng.gen_range(self.cfg.clutter.0..=self.cfg.clutter.1);
        let clutter: Vec<(Shape, [f64; 3])> = (0..n_clutter).flat_map(|_| distractor(&mut rng, &self.species, sf)).collect();
        let base = color(&mut rng, 0.15, 0.85);
        let grad = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let noise = Normal::new(0.0, 0.03).expect("valid sigma");

        let mut rgb = vec![0.0; 3 * side * side];
        let mut mask = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let t = [p[0] / sf - 0.5, p[1] / sf - 0.5];
                let mut c = base.map(|v| v + grad[0] * t[0] + grad[1] * t[1]);
                for (shape, col) in &clutter {
                    if shape.contains(p) {
                        c = *col;
                    }
                }
                for (shape, col) in &parts {
                    if shape.contains(p) {
                        c = *col;
                        mask[y * side + x] = true;
                    }
                }
                for (ch, v) in c.iter().enumerate() {
                    rgb[3 * (y * side + x) + ch] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        let mut bbox = [f64::INFINITY, f64::INFINITY, 0.0f64, 0.0f64];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x + 1.0), bbox[3].max(y + 1.0)];
        }
        Sample {
            species: self.items[index].species,
            side,
            rgb,
            mask,
            keypoints,
            bbox,
        }
    }

    /// Foreground mask of image `index` computed directly from its part
    /// geometry.
    pub fn part_union(&self, index: usize) -> Vec<bool> {
        let side = self.cfg.image;
        let (_, parts, _) = self.layout(index);
        (0..side * side)
            .map(|i| {
                let p = [(i % side) as f64 + 0.5, (i / side) as f64 + 0.5];
                parts.iter().any(|(s, _)| s.contains(p))
            })
            .collect()
    }

    /// Writes every image as binary PPM, its ground-truth saliency in the
    /// saliency file format, and the annotations as CSV.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut kps = std::io::BufWriter::new(std::fs::File::create(dir.join("keypoints.csv"))?);
        writeln!(kps, "image,species,keypoint,name,x,y,visible")?;
        let mut boxes = std::io::BufWriter::new(std::fs::File::create(dir.join("boxes.csv"))?);
        writeln!(boxes, "image,species,x0,y0,x1,y1")?;
        for i in 0..self.len() {
            let s = self.render(i);
            write_ppm(&dir.join(format!("img_{i:05}.ppm")), &s.rgb, s.side)?;
            s.raw_saliency().save(dir.join(format!("sal_{i:05}.sal")))?;
            for (k, kp) in s.keypoints.iter().enumerate() {
                writeln!(kps, "{i},{},{k},{},{},{},{}", s.species, KEYPOINT_NAMES[k], kp.x[0], kp.x[1], kp.visible as u8)?;
            }
            writeln!(boxes, "{i},{},{},{},{},{}", s.species, s.bbox[0], s.bbox[1], s.bbox[2], s.bbox[3])?;
        }
        kps.flush()?;
        boxes.flush()?;
        Ok(())
    }
}

pub fn write_ppm(path: &Path, rgb: &[f64], side: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{side} {side}\n255\n")?;
    let bytes: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Auxiliary keypoints `(1 - t) u1 + t u2` along each path with both
/// endpoints visible; paths with a hidden endpoint yield hidden entries so
/// that indices stay aligned.
pub fn aux_keypoints(kps: &[Keypoint], paths: &[(usize, usize)], nodes: &[f64]) -> Vec<Keypoint> {
    let mut out = Vec::with_capacity(paths.len() * nodes.len());
    for &(a, b) in paths {
        let (u1, u2) = (kps[a], kps[b]);
        for &t in nodes {
            out.push(if u1.visible && u2.visible {
                Keypoint::visible((1.0 - t) * u1.x[0] + t * u2.x[0], (1.0 - t) * u1.x[1] + t * u2.x[1])
            } else {
                Keypoint::hidden()
            });
        }
    }
    out
}
