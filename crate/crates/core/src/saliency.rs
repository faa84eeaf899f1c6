//! Saliency maps: preprocessing, token-resolution pooling, failure
//! simulation and mask overlap.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{dim, param, Error, Result};

/// Foreground likelihood per pixel, row-major, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Binary foreground mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FailureMode {
    /// Binarize at the threshold (`v >= t` becomes 1).
    Threshold,
    /// `1 - v`.
    Reverse,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return dim(format!("{} values for a {width}x{height} map", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return param(format!("saliency value {v} outside [0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixels with value `>= t`.
    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| v >= t).collect(),
        }
    }

    /// `SAL <width> <height>\n` followed by little-endian `f32` values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "SAL {} {}", self.width, self.height)?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (width, height) = match parts.as_slice() {
            ["SAL", w, h] => (
                w.parse::<usize>().map_err(|e| Error::Format(format!("width: {e}")))?,
                h.parse::<usize>().map_err(|e| Error::Format(format!("height: {e}")))?,
            ),
            _ => return Err(Error::Format(format!("bad saliency header `{}`", header.trim_end()))),
        };
        let mut values = Vec::with_capacity(width * height);
        let mut buf = [0u8; 4];
        for _ in 0..width * height {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("saliency payload truncated".into()))?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        Self::new(width, height, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != width * height {
            return dim(format!("{} values for a {width}x{height} mask", values.len()));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel,
/// or `f64::INFINITY` everywhere when nothing is set. Separable lower
/// envelope of parabolas (Felzenszwalb & Huttenlocher), exact.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let mut grid: Vec<f64> = mask
        .values
        .iter()
        .map(|&v| if v { 0.0 } else { f64::INFINITY })
        .collect();
    let mut f = vec![0.0; w.max(h)];
    let mut d = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    // Vertices and boundaries of the lower envelope.
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let meet = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = meet(q, p);
                    if s <= z[v.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    *z.last_mut().expect("boundary") = s;
                    v.push(q);
                    z.push(f64::INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Separable Gaussian blur with clamp-to-edge borders and a kernel
/// truncated at `3 sigma`. The kernel is normalized, so constant maps are
/// fixed points and the output stays within the input range.
pub fn gaussian_blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[y * width + clamp(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}

/// Diffuses the thresholded foreground outward as `exp(-dist / diffusion_scale)`
/// and blurs the result. Foreground pixels are pinned to 1 after blurring.
/// `blur_sigma = 0` disables blurring.
pub fn preprocess(raw: &SaliencyMap, diffusion_scale: f64, blur_sigma: f64) -> Result<SaliencyMap> {
    if !(diffusion_scale > 0.0) {
        return param(format!("diffusion scale {diffusion_scale} must be positive"));
    }
    if !(blur_sigma >= 0.0) {
        return param(format!("blur sigma {blur_sigma} must be non-negative"));
    }
    let fg = raw.threshold(0.5);
    let diffused: Vec<f64> = squared_distance_transform(&fg)
        .into_iter()
        .map(|d2| (-d2.sqrt() / diffusion_scale).exp())
        .collect();
    let mut values = gaussian_blur(&diffused, raw.width, raw.height, blur_sigma);
    for (v, &f) in values.iter_mut().zip(&fg.values) {
        *v = if f { 1.0 } else { v.clamp(0.0, 1.0) };
    }
    SaliencyMap::new(raw.width, raw.height, values)
}

/// Mean-pools the map onto an `l x l` grid (row-major cell order). Sides not
/// divisible by `l` are first extended by mirror reflection to the next
/// multiple.
pub fn downscale(map: &SaliencyMap, l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return param("grid side must be positive");
    }
    let pw = map.width.div_ceil(l) * l;
    let ph = map.height.div_ceil(l) * l;
    let (cw, ch) = (pw / l, ph / l);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            let over = i - n;
            n.saturating_sub(2 + over % n.max(1)).min(n - 1)
        }
    };
    let mut cells = vec![0.0; l * l];
    for cy in 0..l {
        for cx in 0..l {
            let mut s = 0.0;
            for y in cy * ch..(cy + 1) * ch {
                for x in cx * cw..(cx + 1) * cw {
                    s += map.get(reflect(x, map.width), reflect(y, map.height));
                }
            }
            cells[cy * l + cx] = (s / (cw * ch) as f64).clamp(0.0, 1.0);
        }
    }
    Ok(cells)
}

pub fn simulate_failure(map: &SaliencyMap, mode: FailureMode, threshold: f64) -> Result<SaliencyMap> {
    if !(0.0..=1.0).contains(&threshold) {
        return param(format!("threshold {threshold} outside [0, 1]"));
    }
    let values = match mode {
        FailureMode::Threshold => map
            .values
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
        FailureMode::Reverse => map.values.iter().map(|&v| 1.0 - v).collect(),
    };
    SaliencyMap::new(map.width, map.height, values)
}

/// Intersection over union; two empty masks count as identical.
pub fn mean_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return dim(format!(
            "{}x{} mask against {}x{}",
            a.width, a.height, b.width, b.height
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
