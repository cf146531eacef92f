//! Deterministic synthetic scenes of regular ("easy") and irregular ("hard") shapes.
//!
//! Layout of a generated dataset directory:
//!
//! ```text
//! manifest.jsonl          one record per instance, ordered by id
//! scenes/scene_00000.png  224x224 RGB
//! masks/inst_000000.png   224x224 grayscale, unoccluded silhouette
//! ```

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::mask::{self, crop_window, MaskGrid, Window};

pub const IMAGE_SIDE: usize = 224;
pub const MAX_INSTANCES_PER_SCENE: usize = 6;
const MIN_AREA: f64 = 16.0;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Disk,
    Rectangle,
    Star,
    Blob,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Disk, Family::Rectangle, Family::Star, Family::Blob];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn difficulty(self) -> Difficulty {
        match self {
            Family::Disk | Family::Rectangle => Difficulty::Easy,
            Family::Star | Family::Blob => Difficulty::Hard,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Disk => "disk",
            Family::Rectangle => "rectangle",
            Family::Star => "star",
            Family::Blob => "blob",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Pixel box `(x, y, w, h)`; covers columns `x..x+w` and rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn window(&self) -> Window {
        Window { y0: self.y as f64, x0: self.x as f64, y1: (self.y + self.h) as f64, x1: (self.x + self.w) as f64 }
    }

    pub fn area(&self) -> f64 {
        (self.w * self.h) as f64
    }
}

/// Geometric description of one generated silhouette.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { x: usize, y: usize, w: usize, h: usize },
    Star { cy: f64, cx: f64, outer: f64, inner: f64, spikes: usize, phase: f64 },
    Blob { cy: f64, cx: f64, r0: f64, amps: [f64; 6], phases: [f64; 6] },
}

fn blob_radius(amps: &[f64; 6], phases: &[f64; 6], theta: f64) -> f64 {
    1.0 + (0..6).map(|n| amps[n] * ((n + 1) as f64 * theta + phases[n]).cos()).sum::<f64>()
}

fn star_vertices(cy: f64, cx: f64, outer: f64, inner: f64, spikes: usize, phase: f64) -> Vec<(f64, f64)> {
    (0..2 * spikes)
        .map(|j| {
            let a = phase + PI * j as f64 / spikes as f64;
            let r = if j % 2 == 0 { outer } else { inner };
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect()
}

fn inside_polygon(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl Shape {
    /// Rasterises at pixel centres on a `side x side` grid.
    pub fn rasterize(&self, side: usize) -> MaskGrid {
        match self {
            Shape::Disk { cy, cx, r } => MaskGrid::binary_from_fn(side, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }),
            Shape::Rect { x, y, w, h } => {
                MaskGrid::binary_from_fn(side, |py, px| (*x..x + w).contains(&px) && (*y..y + h).contains(&py))
            }
            Shape::Star { cy, cx, outer, inner, spikes, phase } => {
                let poly = star_vertices(*cy, *cx, *outer, *inner, *spikes, *phase);
                MaskGrid::binary_from_fn(side, |y, x| inside_polygon(&poly, y as f64 + 0.5, x as f64 + 0.5))
            }
            Shape::Blob { cy, cx, r0, amps, phases } => MaskGrid::binary_from_fn(side, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let d = (dy * dy + dx * dx).sqrt();
                d <= r0 * blob_radius(amps, phases, dy.atan2(dx)).max(0.0)
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    pub id: usize,
    pub family: Family,
    pub bbox: BBox,
    pub full_mask: MaskGrid,
    pub difficulty: Difficulty,
    pub class_id: usize,
}

impl SyntheticInstance {
    /// Builds an instance from a rasterised silhouette; the box is the tight support box.
    pub fn from_shape(id: usize, family: Family, shape: &Shape, side: usize) -> Result<Self> {
        let full_mask = shape.rasterize(side);
        if full_mask.area() < MIN_AREA {
            return Err(Error::Data(format!("degenerate {} with area {}", family.name(), full_mask.area())));
        }
        let (x, y, w, h) = full_mask.support_box().expect("non-empty mask");
        Ok(Self {
            id,
            family,
            bbox: BBox { x, y, w, h },
            full_mask,
            difficulty: family.difficulty(),
            class_id: family.class_id(),
        })
    }
}

/// Box-aligned ground-truth grid at side `r`.
pub fn crop_gt(instance: &SyntheticInstance, r: usize) -> Result<MaskGrid> {
    crop_window(&instance.full_mask, instance.bbox.window(), r)
}

/// Object-size distribution and canvas of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeSizes {
    /// Smallest nominal object extent in pixels.
    pub min_extent: f64,
    /// Largest nominal object extent in pixels.
    pub max_extent: f64,
    /// Largest share of either instance's area two instances of a scene may
    /// share; placement is redrawn until it holds or attempts run out.
    pub max_overlap: f64,
}

impl Default for ShapeSizes {
    fn default() -> Self {
        Self { min_extent: 32.0, max_extent: 208.0, max_overlap: 0.1 }
    }
}

impl ShapeSizes {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_extent >= 8.0 && self.min_extent <= self.max_extent && self.max_extent <= IMAGE_SIDE as f64) {
            return Err(Error::Config(format!(
                "object extents must satisfy 8 <= min <= max <= {IMAGE_SIDE}, got {} and {}",
                self.min_extent, self.max_extent
            )));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(Error::Config(format!("max_overlap must be in [0, 1], got {}", self.max_overlap)));
        }
        Ok(())
    }
}

fn overlap_share(a: &SyntheticInstance, b: &SyntheticInstance) -> f64 {
    let (av, bv) = (a.full_mask.values(), b.full_mask.values());
    let inter = av.iter().zip(bv).filter(|(x, y)| **x >= 0.5 && **y >= 0.5).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / a.full_mask.area()).max(inter / b.full_mask.area())
}

/// Draws an instance whose overlap with every earlier one stays within
/// `sizes.max_overlap`; falls back to the least-overlapping draw.
fn place_instance(
    id: usize,
    family: Family,
    sizes: &ShapeSizes,
    placed: &[SyntheticInstance],
    rng: &mut impl Rng,
) -> Result<SyntheticInstance> {
    let mut best: Option<(f64, SyntheticInstance)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let inst = generate_instance(id, family, sizes, rng)?;
        let worst = placed.iter().map(|o| overlap_share(&inst, o)).fold(0.0, f64::max);
        if worst <= sizes.max_overlap {
            return Ok(inst);
        }
        if best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, inst));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

fn draw_shape(family: Family, sizes: &ShapeSizes, side: usize, rng: &mut impl Rng) -> Shape {
    let extent = (rng.random_range(sizes.min_extent.ln()..=sizes.max_extent.ln())).exp();
    let side_f = side as f64;
    let center = |radius: f64, rng: &mut dyn rand::RngCore| {
        let lo = radius + 1.0;
        let hi = (side_f - radius - 1.0).max(lo);
        let cy = lo + (hi - lo) * rng.random::<f64>();
        let cx = lo + (hi - lo) * rng.random::<f64>();
        (cy, cx)
    };
    match family {
        Family::Disk => {
            let r = extent / 2.0;
            let (cy, cx) = center(r, rng);
            Shape::Disk { cy, cx, r }
        }
        Family::Rectangle => {
            let aspect = rng.random_range(0.5f64.ln()..=2.0f64.ln()).exp();
            let w = ((extent * aspect.sqrt()).round() as usize).clamp(4, side - 2);
            let h = ((extent / aspect.sqrt()).round() as usize).clamp(4, side - 2);
            let x = rng.random_range(0..=side - w);
            let y = rng.random_range(0..=side - h);
            Shape::Rect { x, y, w, h }
        }
        Family::Star => {
            let outer = extent / 2.0;
            let inner = outer * rng.random_range(0.35..0.6);
            let spikes = rng.random_range(5..=9);
            let phase = rng.random_range(0.0..TAU);
            let (cy, cx) = center(outer, rng);
            Shape::Star { cy, cx, outer, inner, spikes, phase }
        }
        Family::Blob => {
            let mut amps = [0.0; 6];
            let mut phases = [0.0; 6];
            for n in 0..6 {
                amps[n] = rng.random_range(-0.25..=0.25);
                phases[n] = rng.random_range(0.0..TAU);
            }
            let peak = (0..720).map(|i| blob_radius(&amps, &phases, TAU * i as f64 / 720.0)).fold(f64::MIN, f64::max);
            let r0 = extent / 2.0 / peak.max(0.1);
            let (cy, cx) = center(extent / 2.0, rng);
            Shape::Blob { cy, cx, r0, amps, phases }
        }
    }
}

/// Draws one instance of `family`, retrying degenerate draws.
pub fn generate_instance(
    id: usize,
    family: Family,
    sizes: &ShapeSizes,
    rng: &mut impl Rng,
) -> Result<SyntheticInstance> {
    for _ in 0..MAX_ATTEMPTS {
        let shape = draw_shape(family, sizes, IMAGE_SIDE, rng);
        if let Ok(inst) = SyntheticInstance::from_shape(id, family, &shape, IMAGE_SIDE) {
            return Ok(inst);
        }
    }
    Err(Error::Data(format!("could not draw a non-degenerate {} in {MAX_ATTEMPTS} attempts", family.name())))
}

/// A rendered scene: `[3, 224, 224]` pixels in `[0, 1]` plus its instances.
#[derive(Clone, Debug)]
pub struct SceneImage {
    pub pixels: Tensor<f32>,
    pub instances: Vec<SyntheticInstance>,
}

/// Paints instances over a noisy background; later instances occlude earlier ones.
pub fn render_scene(instances: Vec<SyntheticInstance>, rng: &mut impl Rng) -> SceneImage {
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let mut px = vec![0.0f32; 3 * n];
    for c in 0..3 {
        let base: f32 = rng.random_range(0.0..0.2);
        for v in &mut px[c * n..(c + 1) * n] {
            *v = base + rng.random_range(-0.04..0.04);
        }
    }
    for inst in &instances {
        let color: [f32; 3] = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
        for (i, &m) in inst.full_mask.values().iter().enumerate() {
            if m > 0.0 {
                for c in 0..3 {
                    px[c * n + i] = color[c] + rng.random_range(-0.05..0.05);
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    SceneImage { pixels: Tensor::new(&[3, IMAGE_SIDE, IMAGE_SIDE], px).expect("scene shape"), instances }
}

/// Requested instance counts per family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyCounts {
    pub disk: usize,
    pub rectangle: usize,
    pub star: usize,
    pub blob: usize,
}

impl FamilyCounts {
    pub fn uniform(n: usize) -> Self {
        Self { disk: n, rectangle: n, star: n, blob: n }
    }

    pub fn get(&self, f: Family) -> usize {
        match f {
            Family::Disk => self.disk,
            Family::Rectangle => self.rectangle,
            Family::Star => self.star,
            Family::Blob => self.blob,
        }
    }

    pub fn total(&self) -> usize {
        Family::ALL.iter().map(|&f| self.get(f)).sum()
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: usize,
    pub scene: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub family: Family,
    pub difficulty: Difficulty,
    pub class_id: usize,
    pub mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn count(&self, f: Family) -> usize {
        self.records.iter().filter(|r| r.family == f).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("manifest record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Scene sub-seed; depends only on the dataset seed and scene index.
pub fn scene_seed(seed: u64, scene: usize) -> u64 {
    let mut z = seed ^ (scene as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_scene_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push((d[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    mask::write_png(path, IMAGE_SIDE as u32, IMAGE_SIDE as u32, png::ColorType::Rgb, &bytes)
}

fn load_scene_png(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, channels, bytes) = mask::read_png(path)?;
    if (w as usize, h as usize, channels) != (IMAGE_SIDE, IMAGE_SIDE, 3) {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {IMAGE_SIDE}x{IMAGE_SIDE} RGB, got {w}x{h}x{channels}"),
        ));
    }
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let mut px = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            px[c * n + i] = bytes[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, IMAGE_SIDE, IMAGE_SIDE], px)
}

/// Generates scenes, masks and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(counts: &FamilyCounts, sizes: &ShapeSizes, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut families: Vec<Family> = Family::ALL.iter().flat_map(|&f| std::iter::repeat_n(f, counts.get(f))).collect();
    families.shuffle(&mut master);
    let mut scenes: Vec<Vec<Family>> = Vec::new();
    let mut rest = families.as_slice();
    while !rest.is_empty() {
        let k = master.random_range(1..=MAX_INSTANCES_PER_SCENE).min(rest.len());
        scenes.push(rest[..k].to_vec());
        rest = &rest[k..];
    }

    ensure_dir(&out_dir.join("scenes"))?;
    ensure_dir(&out_dir.join("masks"))?;
    let mut manifest = Manifest::default();
    let mut next_id = 0;
    for (si, fams) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, si));
        let mut instances = Vec::with_capacity(fams.len());
        for &f in fams {
            let inst = place_instance(next_id, f, sizes, &instances, &mut rng)?;
            instances.push(inst);
            next_id += 1;
        }
        let scene = render_scene(instances, &mut rng);
        let scene_file = format!("scenes/scene_{si:05}.png");
        save_scene_png(&scene.pixels, &out_dir.join(&scene_file))?;
        for inst in &scene.instances {
            let mask_file = format!("masks/inst_{:06}.png", inst.id);
            mask::save_png(&inst.full_mask, &out_dir.join(&mask_file))?;
            manifest.records.push(ManifestRecord {
                id: inst.id,
                scene: scene_file.clone(),
                bbox: inst.bbox,
                family: inst.family,
                difficulty: inst.difficulty,
                class_id: inst.class_id,
                mask: mask_file,
            });
        }
    }
    let path = out_dir.join("manifest.jsonl");
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(manifest.to_jsonl().as_bytes()))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A scene loaded back from disk.
#[derive(Clone, Debug)]
pub struct Scene {
    pub file: String,
    pub image: Tensor<f32>,
    pub instances: Vec<SyntheticInstance>,
}

/// A dataset loaded from a generated directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub scenes: Vec<Scene>,
}

/// Position of one instance inside a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceRef {
    pub scene: usize,
    pub index: usize,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.jsonl");
        if !manifest_path.exists() {
            return Err(Error::Data(format!("no manifest at {}", manifest_path.display())));
        }
        let manifest = Manifest::read(&manifest_path)?;
        let mut scenes: Vec<Scene> = Vec::new();
        for rec in manifest.records {
            if scenes.last().is_none_or(|s| s.file != rec.scene) {
                scenes.push(Scene {
                    file: rec.scene.clone(),
                    image: load_scene_png(&root.join(&rec.scene))?,
                    instances: Vec::new(),
                });
            }
            let full_mask = mask::load_png(&root.join(&rec.mask))?;
            if full_mask.side() != IMAGE_SIDE {
                return Err(Error::Data(format!("mask {} is not {IMAGE_SIDE}px", rec.mask)));
            }
            if rec.bbox.w == 0
                || rec.bbox.h == 0
                || rec.bbox.x + rec.bbox.w > IMAGE_SIDE
                || rec.bbox.y + rec.bbox.h > IMAGE_SIDE
            {
                return Err(Error::Data(format!("instance {} has an invalid box", rec.id)));
            }
            scenes.last_mut().expect("scene").instances.push(SyntheticInstance {
                id: rec.id,
                family: rec.family,
                bbox: rec.bbox,
                full_mask,
                difficulty: rec.difficulty,
                class_id: rec.class_id,
            });
        }
        Ok(Self { root: root.to_path_buf(), scenes })
    }

    pub fn instance_refs(&self) -> Vec<InstanceRef> {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| (0..sc.instances.len()).map(move |i| InstanceRef { scene: s, index: i }))
            .collect()
    }

    pub fn instance(&self, r: InstanceRef) -> &SyntheticInstance {
        &self.scenes[r.scene].instances[r.index]
    }

    pub fn len(&self) -> usize {
        self.scenes.iter().map(|s| s.instances.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
