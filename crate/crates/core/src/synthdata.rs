//! Synthetic multi-view sprites with analytic flow between views.
//!
//! A sprite is a set of flat textured parts (rectangles, ellipses, convex
//! polygons), each at its own depth. Viewing at azimuth `theta` maps a
//! canonical point `(x, y)` of a part at depth `d` to
//!
//! ```text
//! x' = x cos(theta) + d sin(theta)
//! z  = -x sin(theta) + d cos(theta)        (larger is closer)
//! y' = y (1 + GAMMA z)
//! ```
//!
//! i.e. a per-depth horizontal shear and scale plus a depth-dependent
//! vertical scale. The map is invertible per part, so the source position
//! of every visible target pixel is known exactly. Canonical and image
//! coordinates span `[-1, 1]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Archive, Record};
use crate::deform::ViewLabel;
use crate::error::{Error, Result};
use crate::imageio::{from_byte, to_byte, RgbImage};
use crate::tensor::{Real, Shape, Tensor};
use crate::warpkit::{FlowField, Resolution};

pub const DEFAULT_VIEWS: usize = 9;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const MAX_AZIMUTH_DEG: f64 = 60.0;
pub const GAMMA: f64 = 0.2;
pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_VERSION: u32 = 1;
/// Supersampling grid per pixel edge.
const SS: usize = 4;
const BACKGROUND: [f64; 3] = [0.8, 0.8, 0.8];

/// Azimuth of view `k` out of `views`, evenly spaced over +-60 degrees.
pub fn view_azimuth(k: usize, views: usize) -> f64 {
    if views == 1 {
        return 0.0;
    }
    let deg = -MAX_AZIMUTH_DEG + 2.0 * MAX_AZIMUTH_DEG * k as f64 / (views - 1) as f64;
    deg * PI / 180.0
}

#[derive(Clone, Debug, PartialEq)]
pub enum PartShape {
    Rect { hw: f64, hh: f64 },
    Ellipse { rx: f64, ry: f64 },
    /// Convex polygon, vertices relative to the part center.
    Polygon(Vec<(f64, f64)>),
}

impl PartShape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            PartShape::Rect { hw, hh } => x.abs() <= *hw && y.abs() <= *hh,
            PartShape::Ellipse { rx, ry } => (x / rx).powi(2) + (y / ry).powi(2) <= 1.0,
            PartShape::Polygon(v) => {
                let n = v.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % n];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }

    fn mirrored(&self) -> Self {
        match self {
            PartShape::Polygon(v) => PartShape::Polygon(v.iter().rev().map(|&(x, y)| (-x, y)).collect()),
            s => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub shape: PartShape,
    pub center: (f64, f64),
    pub depth: f64,
    /// Base color in `[-1, 1]`.
    pub color: [f64; 3],
    /// Amplitude and frequencies of the `cos * cos` texture.
    pub texture: (f64, f64, f64),
}

impl Part {
    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let (amp, fx, fy) = self.texture;
        let t = amp * (fx * (x - self.center.0)).cos() * (fy * (y - self.center.1)).cos();
        self.color.map(|c| (c + t).clamp(-1.0, 1.0))
    }

    fn mirrored(&self) -> Self {
        Part {
            shape: self.shape.mirrored(),
            center: (-self.center.0, self.center.1),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub seed: u64,
    pub parts: Vec<Part>,
}

fn rand_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(-0.9..0.5), rng.random_range(-0.9..0.5), rng.random_range(-0.9..0.5)]
}

fn rand_texture(rng: &mut impl Rng) -> (f64, f64, f64) {
    (rng.random_range(0.1..0.3), rng.random_range(4.0..14.0), rng.random_range(4.0..14.0))
}

impl SpriteSpec {
    /// Chair-like sprite, possibly with asymmetric ornaments.
    pub fn from_seed(seed: u64) -> Self {
        Self::generate(seed, true)
    }

    /// Chair-like sprite whose parts are mirror symmetric about `x = 0`.
    pub fn symmetric(seed: u64) -> Self {
        Self::generate(seed, false)
    }

    fn generate(seed: u64, ornaments: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts = Vec::new();
        let seat_hw = rng.random_range(0.3..0.45);
        let seat_hh = rng.random_range(0.05..0.1);
        let seat_y = rng.random_range(0.0..0.1);
        let seat_d = rng.random_range(0.25..0.35);
        let frame = rand_color(&mut rng);
        parts.push(Part {
            shape: PartShape::Rect { hw: seat_hw, hh: seat_hh },
            center: (0.0, seat_y),
            depth: seat_d,
            color: rand_color(&mut rng),
            texture: rand_texture(&mut rng),
        });

        let back_hh = rng.random_range(0.18..0.28);
        let back_top = seat_hw * rng.random_range(0.6..1.0);
        let back_y = seat_y - seat_hh - back_hh;
        let back_d = seat_d - rng.random_range(0.2..0.25);
        let back = if rng.random_bool(0.5) {
            PartShape::Rect { hw: seat_hw, hh: back_hh }
        } else {
            PartShape::Polygon(vec![(-back_top, -back_hh), (back_top, -back_hh), (seat_hw, back_hh), (-seat_hw, back_hh)])
        };
        parts.push(Part {
            shape: back,
            center: (0.0, back_y),
            depth: back_d,
            color: rand_color(&mut rng),
            texture: rand_texture(&mut rng),
        });

        let leg_hw = rng.random_range(0.03..0.05);
        let leg_top = seat_y + seat_hh;
        let leg_bottom = rng.random_range(0.5..0.58);
        let leg_x = seat_hw - leg_hw - 0.02;
        let leg_tex = rand_texture(&mut rng);
        for (i, depth) in [seat_d + 0.22, back_d].into_iter().enumerate() {
            let leg = Part {
                shape: PartShape::Rect {
                    hw: leg_hw,
                    hh: (leg_bottom - leg_top) / 2.0,
                },
                center: (leg_x, (leg_top + leg_bottom) / 2.0),
                // keep the front and back legs apart in depth
                depth: depth + 0.001 * i as f64,
                color: frame,
                texture: leg_tex,
            };
            parts.push(leg.mirrored());
            parts.push(leg);
        }

        if rng.random_bool(0.5) {
            let arm = Part {
                shape: PartShape::Rect {
                    hw: 0.04,
                    hh: rng.random_range(0.06..0.1),
                },
                center: (seat_hw + 0.02, seat_y - seat_hh - 0.08),
                depth: seat_d + 0.05,
                color: frame,
                texture: leg_tex,
            };
            parts.push(arm.mirrored());
            parts.push(arm);
        }

        if ornaments && rng.random_bool(0.7) {
            let r = rng.random_range(0.06..0.12);
            parts.push(Part {
                shape: PartShape::Ellipse { rx: r, ry: r * rng.random_range(0.6..1.2) },
                center: (rng.random_range(-0.25..0.25), back_y + rng.random_range(-0.1..0.1)),
                depth: back_d + 0.02,
                color: rand_color(&mut rng),
                texture: rand_texture(&mut rng),
            });
        }
        if ornaments && rng.random_bool(0.5) {
            let w = rng.random_range(0.08..0.15);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            parts.push(Part {
                shape: PartShape::Polygon(vec![(-w, 0.05), (w, 0.05), (0.0, -w)]),
                center: (side * rng.random_range(0.1..0.3), seat_y - seat_hh - 0.05),
                depth: seat_d + 0.12,
                color: rand_color(&mut rng),
                texture: rand_texture(&mut rng),
            });
        }
        SpriteSpec { seed, parts }
    }

    /// Frontmost part at image point `(xi, yi)` seen at azimuth `theta`,
    /// with its canonical coordinates.
    fn hit(&self, xi: f64, yi: f64, theta: f64) -> Option<(usize, f64, f64)> {
        let (s, c) = theta.sin_cos();
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for (i, p) in self.parts.iter().enumerate() {
            let x = (xi - p.depth * s) / c;
            let z = -x * s + p.depth * c;
            let y = yi / (1.0 + GAMMA * z);
            if p.shape.contains(x - p.center.0, y - p.center.1) && best.is_none_or(|b| z > b.3) {
                best = Some((i, x, y, z));
            }
        }
        best.map(|(i, x, y, _)| (i, x, y))
    }

    /// Image coordinates of canonical point `(x, y)` on part `i`.
    fn project(&self, i: usize, x: f64, y: f64, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        let d = self.parts[i].depth;
        let z = -x * s + d * c;
        (x * c + d * s, y * (1.0 + GAMMA * z))
    }
}

fn pixel_to_image(p: f64, size: usize) -> f64 {
    (p + 0.5) / size as f64 * 2.0 - 1.0
}

fn image_to_pixel(v: f64, size: usize) -> f64 {
    (v + 1.0) / 2.0 * size as f64 - 0.5
}

/// Per-pixel part id when all subsamples agree (`parts.len()` for
/// background), `None` on mixed pixels.
fn pure_ids(spec: &SpriteSpec, theta: f64, size: usize) -> Vec<Option<usize>> {
    let bg = spec.parts.len();
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut id = None;
            let mut pure = true;
            for sy in 0..SS {
                for sx in 0..SS {
                    let xi = pixel_to_image(px as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64, size);
                    let yi = pixel_to_image(py as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64, size);
                    let h = spec.hit(xi, yi, theta).map_or(bg, |h| h.0);
                    match id {
                        None => id = Some(h),
                        Some(prev) if prev != h => pure = false,
                        _ => {}
                    }
                }
            }
            out.push(if pure { id } else { None });
        }
    }
    out
}

fn check_view(view: usize, views: usize) -> Result<()> {
    if view >= views {
        return Err(Error::InvalidArgument(format!("view {view} out of range for {views} views")));
    }
    Ok(())
}

/// Anti-aliased rendering of `spec` at view `view` of `views`.
pub fn render_view(spec: &SpriteSpec, view: usize, views: usize, size: usize) -> Result<RgbImage> {
    check_view(view, views)?;
    let theta = view_azimuth(view, views);
    let mut img = RgbImage::new(size, size);
    let n = (SS * SS) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let xi = pixel_to_image(px as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64, size);
                    let yi = pixel_to_image(py as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64, size);
                    let c = match spec.hit(xi, yi, theta) {
                        Some((i, x, y)) => spec.parts[i].color_at(x, y),
                        None => BACKGROUND,
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            img.put(px, py, acc.map(|v| to_byte(v / n)));
        }
    }
    Ok(img)
}

/// 1 on pixels fully covered by the sprite at view `view`, else 0.
pub fn foreground_mask(spec: &SpriteSpec, view: usize, views: usize, size: usize) -> Result<Tensor<f64>> {
    check_view(view, views)?;
    let bg = spec.parts.len();
    let ids = pure_ids(spec, view_azimuth(view, views), size);
    let data = ids.iter().map(|id| if matches!(id, Some(i) if *i != bg) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, size, size), data)
}

/// Backward flow taking view `b` (target) to view `a` (source), in pixels,
/// and the mask of pixels whose source is visible, unoccluded and away from
/// part edges.
pub fn gt_flow(spec: &SpriteSpec, a: usize, b: usize, views: usize, size: usize) -> Result<(FlowField<f64>, Tensor<f64>)> {
    check_view(a, views)?;
    check_view(b, views)?;
    let (ta, tb) = (view_azimuth(a, views), view_azimuth(b, views));
    let ids_a = pure_ids(spec, ta, size);
    let ids_b = if a == b { ids_a.clone() } else { pure_ids(spec, tb, size) };
    let bg = spec.parts.len();
    let mut flow = Tensor::zeros(Shape::new(1, 2, size, size));
    let mut mask = Tensor::zeros(Shape::new(1, 1, size, size));
    for py in 0..size {
        for px in 0..size {
            let Some(id) = ids_b[py * size + px] else { continue };
            let (xi, yi) = (pixel_to_image(px as f64, size), pixel_to_image(py as f64, size));
            let (sx, sy) = if id == bg {
                (px as f64, py as f64)
            } else {
                let (i, x, y) = spec.hit(xi, yi, tb).expect("pure pixel has a part");
                let (xa, ya) = spec.project(i, x, y, ta);
                (image_to_pixel(xa, size), image_to_pixel(ya, size))
            };
            flow.set(0, 0, py, px, sx - px as f64);
            flow.set(0, 1, py, px, sy - py as f64);
            if sx < 0.0 || sy < 0.0 || sx > (size - 1) as f64 || sy > (size - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let visible = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(x, y)| ids_a[y * size + x] == Some(id));
            if visible {
                mask.set(0, 0, py, px, 1.0);
            }
        }
    }
    Ok((FlowField::new(flow, Resolution::Full)?, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub views: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub flows: bool,
}

pub fn sprite_seed(base: u64, index: usize) -> u64 {
    base * 1_000_000 + index as u64
}

pub fn image_name(sprite: u64, view: usize) -> String {
    format!("sprite{sprite}view{view}.png")
}

fn parse_list(s: &str) -> Result<Vec<u64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad sprite id {v:?}"))))
        .collect()
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[u64]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "version={}\nviews={}\nimage_size={}\nseed={}\ncount={}\ntrain_count={}\ntest_count={}\ntrain={}\ntest={}\nflows={}\n",
            self.version,
            self.views,
            self.image_size,
            self.seed,
            self.count(),
            self.train.len(),
            self.test.len(),
            join(&self.train),
            join(&self.test),
            self.flows
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Missing(format!("manifest key {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("manifest key {k} is not a number")))
        };
        let m = DatasetManifest {
            version: num("version")? as u32,
            views: num("views")? as usize,
            image_size: num("image_size")? as usize,
            seed: num("seed")?,
            train: parse_list(get("train")?)?,
            test: parse_list(get("test")?)?,
            flows: get("flows")? == "true",
        };
        if num("count")? as usize != m.count() || num("train_count")? as usize != m.train.len() {
            return Err(Error::InvalidArgument("manifest counts disagree with sprite lists".into()));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub views: usize,
    pub image_size: usize,
    /// Also write every pair's flow per sprite as an archive.
    pub flows: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            views: DEFAULT_VIEWS,
            image_size: DEFAULT_IMAGE_SIZE,
            flows: false,
        }
    }
}

/// Number of training sprites out of `n` (80%, at least one when n >= 1).
pub fn train_count(n: usize) -> usize {
    ((n * 4 + 2) / 5).clamp(n.min(1), n)
}

/// Writes `n` sprites x `views` PNGs and the manifest (last) into `dir`.
pub fn generate_dataset(n: usize, dir: &Path, seed: u64, opts: &GenerateOptions) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sprite".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seeds: Vec<u64> = (0..n).map(|i| sprite_seed(seed, i)).collect();
    for &s in &seeds {
        let spec = SpriteSpec::from_seed(s);
        for v in 0..opts.views {
            render_view(&spec, v, opts.views, opts.image_size)?.save_png(&dir.join(image_name(s, v)))?;
        }
        if opts.flows {
            let mut archive = Archive::default();
            for a in 0..opts.views {
                for b in 0..opts.views {
                    let (f, m) = gt_flow(&spec, a, b, opts.views, opts.image_size)?;
                    archive.params.push(f.to_record(&format!("flow/{a}/{b}")));
                    archive.params.push(Record {
                        name: format!("mask/{a}/{b}"),
                        tensor: m.cast(),
                    });
                }
            }
            archive.save(&dir.join(format!("sprite{s}flows.idu")))?;
        }
    }
    let k = train_count(n);
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        views: opts.views,
        image_size: opts.image_size,
        seed,
        train: seeds[..k].to_vec(),
        test: seeds[k..].to_vec(),
        flows: opts.flows,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct SyntheticSample<F> {
    pub sprite: u64,
    /// `(1, 3, size, size)` in `[-1, 1]`.
    pub x_a: Tensor<F>,
    pub x_b: Tensor<F>,
    pub c_a: ViewLabel,
    pub c_b: ViewLabel,
    pub gt_flow: FlowField<F>,
    /// `(1, 1, size, size)`, 1 where `gt_flow` is valid.
    pub mask: Tensor<F>,
}

pub fn image_path(dir: &Path, sprite: u64, view: usize) -> PathBuf {
    dir.join(image_name(sprite, view))
}

/// Loads views `a` and `b` of `sprite` and recomputes their flow.
pub fn load_pair<F: Real>(dir: &Path, m: &DatasetManifest, sprite: u64, a: usize, b: usize) -> Result<SyntheticSample<F>> {
    if !m.train.contains(&sprite) && !m.test.contains(&sprite) {
        return Err(Error::Missing(format!("sprite {sprite} is not in the manifest")));
    }
    check_view(a, m.views)?;
    check_view(b, m.views)?;
    let x_a = RgbImage::load_png(&image_path(dir, sprite, a))?.to_tensor();
    let x_b = RgbImage::load_png(&image_path(dir, sprite, b))?.to_tensor();
    let (flow, mask) = gt_flow(&SpriteSpec::from_seed(sprite), a, b, m.views, m.image_size)?;
    Ok(SyntheticSample {
        sprite,
        x_a,
        x_b,
        c_a: ViewLabel::new(a, m.views)?,
        c_b: ViewLabel::new(b, m.views)?,
        gt_flow: FlowField::new(flow.tensor().cast(), Resolution::Full)?,
        mask: mask.cast(),
    })
}

/// Decoded views of a set of sprites, kept as bytes.
#[derive(Clone, Debug)]
pub struct ImageCache {
    pub views: usize,
    pub size: usize,
    images: BTreeMap<(u64, usize), RgbImage>,
}

impl ImageCache {
    pub fn load(dir: &Path, m: &DatasetManifest, sprites: &[u64]) -> Result<Self> {
        let mut images = BTreeMap::new();
        for &s in sprites {
            for v in 0..m.views {
                let img = RgbImage::load_png(&image_path(dir, s, v))?;
                if img.width != m.image_size || img.height != m.image_size {
                    return Err(Error::format(
                        image_path(dir, s, v),
                        format!("expected {0}x{0}, got {1}x{2}", m.image_size, img.width, img.height),
                    ));
                }
                images.insert((s, v), img);
            }
        }
        Ok(ImageCache {
            views: m.views,
            size: m.image_size,
            images,
        })
    }

    pub fn get(&self, sprite: u64, view: usize) -> Result<&RgbImage> {
        self.images
            .get(&(sprite, view))
            .ok_or_else(|| Error::Missing(format!("image of sprite {sprite} view {view}")))
    }

    /// Stacks `(sprite, view)` images into a `(n, 3, size, size)` tensor.
    pub fn batch<F: Real>(&self, items: &[(u64, usize)]) -> Result<Tensor<F>> {
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(items.len() * 3 * plane);
        for &(s, v) in items {
            let img = self.get(s, v)?;
            for c in 0..3 {
                data.extend(img.data.iter().skip(c).step_by(3).map(|&b| F::lit(from_byte(b))));
            }
        }
        Tensor::from_vec(Shape::new(items.len(), 3, self.size, self.size), data)
    }
}
