//! Procedural shape domains, manifests and image files.
//!
//! Shapes are described in normalized canvas coordinates (`[0, 1]^2`), so one
//! spec renders at any resolution. Pixel values live in `[-1, 1]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use autodiff::{Tensor, TensorPack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

/// Minimum foreground/background contrast of sampled specs.
pub const MIN_CONTRAST: f64 = 0.3;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Half extents along the shape's own axes.
    pub half: (f64, f64),
    /// Radians, counter-clockwise.
    pub rotation: f64,
    pub intensity: f64,
    pub background: f64,
    /// Amplitude of a sinusoidal stripe texture on the foreground; 0 for flat.
    pub texture: f64,
    /// Stripe frequency in cycles per canvas width.
    pub texture_freq: f64,
}

impl ShapeSpec {
    /// Shape-frame coordinates of a canvas point.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn triangle(&self) -> [(f64, f64); 3] {
        let (a, b) = self.half;
        [(0.0, -b), (a, b), (-a, b)]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeKind::Triangle => {
                let p = self.triangle();
                let side = |(x0, y0): (f64, f64), (x1, y1): (f64, f64)| (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    /// Axis-aligned half extents of the rotated shape around its center.
    pub fn extent(&self) -> (f64, f64) {
        let (a, b) = self.half;
        let (s, c) = self.rotation.sin_cos();
        let to_canvas = |(u, v): (f64, f64)| (c * u - s * v, s * u + c * v);
        match self.kind {
            ShapeKind::Ellipse => (
                ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
                ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
            ),
            ShapeKind::Rectangle | ShapeKind::Triangle => {
                let pts: Vec<(f64, f64)> = match self.kind {
                    ShapeKind::Rectangle => vec![(a, b), (-a, b), (a, -b), (-a, -b)],
                    _ => self.triangle().to_vec(),
                };
                pts.into_iter()
                    .map(to_canvas)
                    .fold((0.0f64, 0.0f64), |(ex, ey), (x, y)| (ex.max(x.abs()), ey.max(y.abs())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ex, ey) = self.extent();
        let (cx, cy) = self.center;
        let eps = 1e-9;
        let inside = cx - ex >= -eps && cx + ex <= 1.0 + eps && cy - ey >= -eps && cy + ey <= 1.0 + eps;
        if !inside || self.half.0 <= 0.0 || self.half.1 <= 0.0 {
            return Err(Error::InvalidArgument(format!("shape outside the canvas: {self:?}")));
        }
        let in_range = |v: f64| (-1.0..=1.0).contains(&v);
        if !in_range(self.intensity) || !in_range(self.background) {
            return Err(Error::InvalidArgument(format!("intensity outside [-1, 1]: {self:?}")));
        }
        Ok(())
    }

    fn foreground(&self, x: f64, y: f64) -> f64 {
        let stripe = self.texture * (2.0 * std::f64::consts::PI * self.texture_freq * (x + y)).sin();
        (self.intensity + stripe).clamp(-1.0, 1.0)
    }
}

/// Anti-aliased filled rendering, `[1, size, size]`.
pub fn gen_solid(spec: &ShapeSpec, size: usize) -> Result<Tensor<f32>> {
    check_size(size)?;
    spec.validate()?;
    let n = SUPERSAMPLE;
    let inv = 1.0 / (size * n) as f64;
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..n {
                for sx in 0..n {
                    let x = ((px * n + sx) as f64 + 0.5) * inv;
                    let y = ((py * n + sy) as f64 + 0.5) * inv;
                    acc += if spec.contains(x, y) {
                        spec.foreground(x, y)
                    } else {
                        spec.background
                    };
                }
            }
            out.push((acc / (n * n) as f64).clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(Tensor::new([1, size, size], out)?)
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("canvas size {size} below 16")));
    }
    Ok(())
}

/// Pixel-center membership mask.
pub fn shape_mask(spec: &ShapeSpec, size: usize) -> Vec<bool> {
    let inv = 1.0 / size as f64;
    (0..size * size)
        .map(|i| spec.contains(((i % size) as f64 + 0.5) * inv, ((i / size) as f64 + 0.5) * inv))
        .collect()
}

/// Inner 4-neighbour boundary of a mask.
pub fn boundary(mask: &[bool], size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let (x, y) = (i % size, i / size);
            x == 0
                || y == 0
                || x + 1 == size
                || y + 1 == size
                || !mask[i - 1]
                || !mask[i + 1]
                || !mask[i - size]
                || !mask[i + size]
        })
        .collect()
}

/// One-pixel boundary rendering: edge `+1` on background `-1`.
pub fn gen_edge(spec: &ShapeSpec, size: usize) -> Result<Tensor<f32>> {
    check_size(size)?;
    spec.validate()?;
    let edge = boundary(&shape_mask(spec, size), size);
    Ok(Tensor::new(
        [1, size, size],
        edge.into_iter().map(|e| if e { 1.0 } else { -1.0 }).collect(),
    )?)
}

/// Paired translation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Filled shapes to their outlines (cross-modality).
    SolidsEdges,
    /// Bright textured shapes on dark ground to the swapped palette.
    BrightDark,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "solids-edges" => Ok(Task::SolidsEdges),
            "bright-dark" => Ok(Task::BrightDark),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (solids-edges | bright-dark)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::SolidsEdges => "solids-edges",
            Task::BrightDark => "bright-dark",
        }
    }

    pub fn cross_modality(&self) -> bool {
        matches!(self, Task::SolidsEdges)
    }

    /// Default sampling steps for the task family.
    pub fn default_steps(&self) -> usize {
        if self.cross_modality() {
            crate::sampler::CROSS_MODALITY_STEPS
        } else {
            crate::sampler::SAME_MODALITY_STEPS
        }
    }

    /// Source-domain rendering.
    pub fn render_source(&self, spec: &ShapeSpec, size: usize) -> Result<Tensor<f32>> {
        gen_solid(spec, size)
    }

    /// Target-domain rendering of the same spec.
    pub fn render_target(&self, spec: &ShapeSpec, size: usize) -> Result<Tensor<f32>> {
        match self {
            Task::SolidsEdges => gen_edge(spec, size),
            Task::BrightDark => gen_solid(
                &ShapeSpec {
                    intensity: spec.background,
                    background: spec.intensity,
                    ..*spec
                },
                size,
            ),
        }
    }

    /// Draw a spec from a seed.
    pub fn sample_spec(&self, seed: u64) -> ShapeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let half = (rng.random_range(0.16..0.36), rng.random_range(0.16..0.36));
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        let mut spec = ShapeSpec {
            kind,
            center: (0.5, 0.5),
            half,
            rotation,
            intensity: rng.random_range(0.4..0.9),
            background: rng.random_range(-0.9..-0.5),
            texture: 0.0,
            texture_freq: 0.0,
        };
        if let Task::BrightDark = self {
            spec.texture = 0.1;
            spec.texture_freq = rng.random_range(2.0..5.0);
        }
        let margin = 1.0 / 32.0;
        let (ex, ey) = spec.extent();
        let fit = (0.5 - margin) / ex.max(ey);
        if fit < 1.0 {
            spec.half = (spec.half.0 * fit, spec.half.1 * fit);
        }
        let (ex, ey) = spec.extent();
        let span = |e: f64| (e + margin, (1.0 - e - margin).max(e + margin));
        let (lx, hx) = span(ex);
        let (ly, hy) = span(ey);
        spec.center = (rng.random_range(lx..=hx), rng.random_range(ly..=hy));
        spec
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generation streams; the stream id occupies the top byte of every spec
/// seed, so different streams can never share a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainSource = 1,
    TrainTarget = 2,
    Eval = 3,
}

pub fn spec_seed(stream: Stream, base_seed: u64, index: usize) -> u64 {
    ((stream as u64) << 56) | ((base_seed & 0xFF_FFFF) << 32) | (index as u64 & 0xFFFF_FFFF)
}

pub fn stream_of(seed: u64) -> u64 {
    seed >> 56
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub seed: u64,
    pub domain: String,
}

/// Line-oriented `path seed domain` listing with `#` header comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub task: Task,
    pub size: usize,
    pub base_seed: u64,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# task={} size={} seed={} count={}\n",
            self.task,
            self.size,
            self.base_seed,
            self.entries.len()
        );
        for e in &self.entries {
            s.push_str(&format!("{} {} {}\n", e.path.display(), e.seed, e.domain));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Manifest> {
        let bad = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| bad("missing header".into()))?;
        let mut task = None;
        let mut size = None;
        let mut base_seed = None;
        for kv in header.split_whitespace() {
            match kv.split_once('=') {
                Some(("task", v)) => task = Some(Task::parse(v)?),
                Some(("size", v)) => size = v.parse().ok(),
                Some(("seed", v)) => base_seed = v.parse().ok(),
                _ => {}
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [path, seed, domain] = parts[..] else {
                return Err(bad(format!("line {}: expected `path seed domain`", n + 2)));
            };
            entries.push(Entry {
                path: PathBuf::from(path),
                seed: seed.parse().map_err(|_| bad(format!("line {}: bad seed", n + 2)))?,
                domain: domain.to_string(),
            });
        }
        Ok(Manifest {
            task: task.ok_or_else(|| bad("header lacks task".into()))?,
            size: size.ok_or_else(|| bad("header lacks size".into()))?,
            base_seed: base_seed.ok_or_else(|| bad("header lacks seed".into()))?,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.seed).collect()
    }
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// 8-bit binary PGM of a `[1, H, W]` (or `[H, W]`) image in `[-1, 1]`.
pub fn encode_pgm(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()[..h * w]
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8),
    );
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |r: &str| Error::InvalidArgument(format!("pgm: {r}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header"))?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let px = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixels"))?;
    Ok(Tensor::new(
        [1, h, w],
        px.iter().map(|&b| b as f32 / 127.5 - 1.0).collect(),
    )?)
}

/// Tile batches `[n, 1, h, w]` as rows of one `[1, rows*h, n*w]` image.
pub fn grid(rows: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || s[1] != 1 || rows.iter().any(|r| r.shape() != s.as_slice()) {
        return Err(Error::InvalidArgument(format!(
            "grid rows must share a [n, 1, h, w] shape, got {s:?}"
        )));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let width = n * w;
    let mut out = vec![0.0f32; rows.len() * h * width];
    for (r, t) in rows.iter().enumerate() {
        for i in 0..n {
            for y in 0..h {
                let src = &t.data()[(i * h + y) * w..(i * h + y + 1) * w];
                let dst = (r * h + y) * width + i * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new([1, rows.len() * h, width], out)?)
}

pub const TRAIN_SOURCE: &str = "train_S";
pub const TRAIN_TARGET: &str = "train_T";
pub const EVAL: &str = "eval";

/// Render `specs` into `dir/<split>/`, plus a tensor pack and a manifest.
fn write_split(
    root: &Path,
    split: &str,
    task: Task,
    size: usize,
    base_seed: u64,
    items: &[(u64, &str, Tensor<f32>)],
) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(items.len());
    let mut pack = TensorPack::new();
    pack.set_meta("task", task)?;
    pack.set_meta("size", size)?;
    for (i, (seed, domain, img)) in items.iter().enumerate() {
        let rel = PathBuf::from(split).join(format!("{domain}_{i:06}.pgm"));
        write_atomic(&root.join(&rel), &encode_pgm(img))?;
        pack.push(&format!("{domain}.{i}"), img)?;
        entries.push(Entry {
            path: rel,
            seed: *seed,
            domain: domain.to_string(),
        });
    }
    let mut buf = Vec::new();
    pack.write_to(&mut buf)?;
    write_atomic(&root.join(format!("{split}.pack")), &buf)?;
    let m = Manifest {
        task,
        size,
        base_seed,
        entries,
    };
    write_atomic(&root.join(format!("{split}.manifest")), m.to_text().as_bytes())?;
    Ok(m)
}

/// Unpaired training domains: sources from one seed stream, targets from a
/// disjoint one.
pub fn make_unpaired_split(
    root: &Path,
    task: Task,
    n_s: usize,
    n_t: usize,
    size: usize,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    let render = |stream, n, target: bool| -> Result<Vec<(u64, &str, Tensor<f32>)>> {
        (0..n)
            .map(|i| {
                let s = spec_seed(stream, seed, i);
                let spec = task.sample_spec(s);
                Ok(if target {
                    (s, "T", task.render_target(&spec, size)?)
                } else {
                    (s, "S", task.render_source(&spec, size)?)
                })
            })
            .collect()
    };
    let s = write_split(
        root,
        TRAIN_SOURCE,
        task,
        size,
        seed,
        &render(Stream::TrainSource, n_s, false)?,
    )?;
    let t = write_split(
        root,
        TRAIN_TARGET,
        task,
        size,
        seed,
        &render(Stream::TrainTarget, n_t, true)?,
    )?;
    Ok((s, t))
}

/// Held-out pairs: each eval seed rendered in both domains. Never used for
/// training.
pub fn make_paired_eval(root: &Path, task: Task, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    let mut items = Vec::with_capacity(2 * n);
    for i in 0..n {
        let s = spec_seed(Stream::Eval, seed, i);
        let spec = task.sample_spec(s);
        items.push((s, "S", task.render_source(&spec, size)?));
        items.push((s, "T", task.render_target(&spec, size)?));
    }
    write_split(root, EVAL, task, size, seed, &items)
}

/// Stacked images of one domain of a split, `[n, 1, size, size]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub seeds: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.narrow_batch(i, 1).expect("index in range")
    }

    /// Gather samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let parts: Vec<_> = idx.iter().map(|&i| self.image(i)).collect();
        Tensor::stack_batch(&parts).expect("uniform image shapes")
    }

    /// Read one domain of a split written by this module.
    pub fn load(root: &Path, split: &str, domain: &str) -> Result<Dataset> {
        let manifest = Manifest::load(&root.join(format!("{split}.manifest")))?;
        let pack_path = root.join(format!("{split}.pack"));
        let pack = TensorPack::load(&pack_path).map_err(|e| Error::Parse {
            path: pack_path.clone(),
            reason: e.to_string(),
        })?;
        let mut imgs = Vec::new();
        let mut seeds = Vec::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.domain != domain {
                continue;
            }
            let t: Tensor<f32> = pack.tensor(&format!("{domain}.{i}"))?;
            imgs.push(t.reshape([1, 1, manifest.size, manifest.size])?);
            seeds.push(e.seed);
        }
        if imgs.is_empty() {
            return Err(Error::Parse {
                path: pack_path,
                reason: format!("no images for domain {domain}"),
            });
        }
        Ok(Dataset {
            images: Tensor::stack_batch(&imgs)?,
            seeds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(center: (f64, f64), half: (f64, f64)) -> ShapeSpec {
        ShapeSpec {
            kind: ShapeKind::Rectangle,
            center,
            half,
            rotation: 0.0,
            intensity: 0.8,
            background: -0.8,
            texture: 0.0,
            texture_freq: 0.0,
        }
    }

    #[test]
    fn full_canvas_rectangle_is_constant() {
        let img = gen_solid(&rect((0.5, 0.5), (0.5, 0.5)), 16).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn outside_canvas_is_rejected() {
        assert!(gen_solid(&rect((0.9, 0.5), (0.3, 0.1)), 32).is_err());
        assert!(gen_solid(&rect((0.5, 0.5), (0.2, 0.2)), 8).is_err());
    }

    #[test]
    fn mean_lies_between_intensities() {
        for i in 0..20 {
            let spec = Task::SolidsEdges.sample_spec(i);
            let img = gen_solid(&spec, 32).unwrap();
            let m = img.mean();
            assert!(m > spec.background && m < spec.intensity);
            assert!((spec.intensity - spec.background).abs() >= MIN_CONTRAST);
        }
    }

    #[test]
    fn pgm_round_trip_quantizes() {
        let img = gen_solid(&Task::SolidsEdges.sample_spec(3), 16).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 127.5);
    }

    #[test]
    fn streams_are_disjoint() {
        let a = spec_seed(Stream::TrainSource, 7, 5);
        let b = spec_seed(Stream::TrainTarget, 7, 5);
        let c = spec_seed(Stream::Eval, 7, 5);
        assert_eq!([stream_of(a), stream_of(b), stream_of(c)], [1, 2, 3]);
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            task: Task::BrightDark,
            size: 32,
            base_seed: 9,
            entries: vec![Entry {
                path: "train_S/S_000000.pgm".into(),
                seed: 42,
                domain: "S".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("x")).unwrap(), m);
    }
}
