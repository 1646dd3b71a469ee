//! Synthetic labeled shapes built from simple parametric surfaces, plus dataset files on disk.
//!
//! Every shape is sampled uniformly by area over the union of its part surfaces, jittered,
//! normalized into the unit ball and spun by a random angle about the vertical (z) axis.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{load_ply_file, save_ply, Point3, PointCloud};
use crate::labels::{ClassId, LabelMap, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Chair,
    Table,
    Lamp,
    TwoClassPlant,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
            Family::Lamp => "lamp",
            Family::TwoClassPlant => "two_class_plant",
        }
    }

    /// Part counts this family can be labeled with.
    pub fn supports(self, part_count: usize) -> bool {
        match self {
            Family::TwoClassPlant => part_count == 2,
            _ => part_count == 2 || part_count == 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub family: Family,
    /// Number of classes; 2 merges the structural parts of 3-part families.
    pub part_count: usize,
    pub noise_sigma: f64,
    pub points_n: usize,
    pub rng_seed: u64,
}

impl ShapeSpec {
    pub fn new(family: Family, part_count: usize, rng_seed: u64) -> Self {
        Self { family, part_count, noise_sigma: 0.01, points_n: 1024, rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.family.supports(self.part_count) {
            return Err(Error::invalid(format!(
                "{} cannot be labeled with {} parts",
                self.family.name(),
                self.part_count
            )));
        }
        if self.points_n < 64 {
            return Err(Error::invalid("points_n must be at least 64"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Closed surface patches in the generating frame (z up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Surface of an axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder with both end caps.
    Cylinder { center: [f64; 2], z0: f64, z1: f64, radius: f64 },
    /// Open vertical cone frustum, radius `r0` at `z0` and `r1` at `z1`, optional bottom disk.
    Frustum { center: [f64; 2], z0: f64, z1: f64, r0: f64, r1: f64, bottom: bool },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { min, max } => {
                let [a, b, c] = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                2.0 * (a * b + b * c + a * c)
            }
            Primitive::Cylinder { z0, z1, radius, .. } => TAU * radius * (z1 - z0) + 2.0 * PI * radius * radius,
            Primitive::Frustum { z0, z1, r0, r1, bottom, .. } => {
                let slant = ((r1 - r0).powi(2) + (z1 - z0).powi(2)).sqrt();
                PI * (r0 + r1) * slant + if bottom { PI * r0 * r0 } else { 0.0 }
            }
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    /// Uniform sample on the surface.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Primitive::Box { min, max } => {
                let ext = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                // faces come in pairs normal to each axis
                let areas = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
                let axis = pick_weighted(&areas, rng);
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = min[k] + rng.gen::<f64>() * ext[k];
                }
                p[axis] = if rng.gen::<bool>() { max[axis] } else { min[axis] };
                p
            }
            Primitive::Cylinder { center, z0, z1, radius } => {
                let side = TAU * radius * (z1 - z0);
                let cap = PI * radius * radius;
                let angle = rng.gen::<f64>() * TAU;
                match pick_weighted(&[side, cap, cap], rng) {
                    0 => [
                        center[0] + radius * angle.cos(),
                        center[1] + radius * angle.sin(),
                        z0 + rng.gen::<f64>() * (z1 - z0),
                    ],
                    face => {
                        let r = radius * rng.gen::<f64>().sqrt();
                        let z = if face == 1 { z0 } else { z1 };
                        [center[0] + r * angle.cos(), center[1] + r * angle.sin(), z]
                    }
                }
            }
            Primitive::Frustum { center, z0, z1, r0, r1, bottom } => {
                let slant = ((r1 - r0).powi(2) + (z1 - z0).powi(2)).sqrt();
                let side = PI * (r0 + r1) * slant;
                let cap = if bottom { PI * r0 * r0 } else { 0.0 };
                let angle = rng.gen::<f64>() * TAU;
                if pick_weighted(&[side, cap], rng) == 0 {
                    // radius is linear in t, so density along t must be proportional to it
                    let u: f64 = rng.gen();
                    let t = if (r1 - r0).abs() < 1e-12 {
                        u
                    } else {
                        ((r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                    };
                    let r = r0 + t * (r1 - r0);
                    [center[0] + r * angle.cos(), center[1] + r * angle.sin(), z0 + t * (z1 - z0)]
                } else {
                    let r = r0 * rng.gen::<f64>().sqrt();
                    [center[0] + r * angle.cos(), center[1] + r * angle.sin(), z0]
                }
            }
            Primitive::Sphere { center, radius } => {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                [
                    center[0] + radius * v[0] / len,
                    center[1] + radius * v[1] / len,
                    center[2] + radius * v[2] / len,
                ]
            }
        }
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// One generating part of a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub class: ClassId,
    pub primitives: Vec<Primitive>,
}

/// Maps generating-frame coordinates to the stored cloud: `p' = Rz(angle) · (p − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub center: [f64; 3],
    pub scale: f64,
    pub angle: f64,
}

impl Frame {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ];
        let (s, c) = self.angle.sin_cos();
        [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let q = [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]];
        [
            q[0] * self.scale + self.center[0],
            q[1] * self.scale + self.center[1],
            q[2] * self.scale + self.center[2],
        ]
    }
}

/// A generated shape together with its construction metadata.
#[derive(Debug, Clone)]
pub struct GeneratedShape {
    pub cloud: PointCloud,
    pub labels: LabelMap,
    pub parts: Vec<Part>,
    /// Generating part of every point, indexing `parts`.
    pub part_of_point: Vec<usize>,
    pub frame: Frame,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn chair_parts(rng: &mut impl Rng, part_count: usize) -> Vec<Part> {
    let w = uniform(rng, 0.8, 1.2);
    let d = uniform(rng, 0.8, 1.2);
    let seat_t = uniform(rng, 0.08, 0.12);
    let leg_h = uniform(rng, 0.8, 1.1);
    let back_h = uniform(rng, 0.8, 1.2);
    let back_t = uniform(rng, 0.08, 0.12);
    let leg_r = uniform(rng, 0.04, 0.07);
    let seat_top = leg_h + seat_t;
    let seat = Primitive::Box { min: [-w / 2.0, -d / 2.0, leg_h], max: [w / 2.0, d / 2.0, seat_top] };
    let back = Primitive::Box {
        min: [-w / 2.0, d / 2.0 - back_t, seat_top],
        max: [w / 2.0, d / 2.0, seat_top + back_h],
    };
    let legs = corner_legs(w, d, leg_r, 0.0, leg_h);
    let (seat_c, back_c, legs_c) = if part_count == 3 { (0, 1, 2) } else { (0, 0, 1) };
    vec![
        Part { name: "seat".into(), class: seat_c, primitives: vec![seat] },
        Part { name: "back".into(), class: back_c, primitives: vec![back] },
        Part { name: "legs".into(), class: legs_c, primitives: legs },
    ]
}

fn corner_legs(w: f64, d: f64, r: f64, z0: f64, z1: f64) -> Vec<Primitive> {
    let (x, y) = (w / 2.0 - r, d / 2.0 - r);
    [[-x, -y], [x, -y], [-x, y], [x, y]]
        .into_iter()
        .map(|center| Primitive::Cylinder { center, z0, z1, radius: r })
        .collect()
}

fn table_parts(rng: &mut impl Rng, part_count: usize) -> Vec<Part> {
    let w = uniform(rng, 1.2, 1.8);
    let d = uniform(rng, 0.7, 1.1);
    let top_t = uniform(rng, 0.06, 0.1);
    let h = uniform(rng, 0.7, 1.0);
    let leg_r = uniform(rng, 0.04, 0.06);
    let shelf_z = h * uniform(rng, 0.25, 0.4);
    let shelf_t = uniform(rng, 0.03, 0.05);
    let top = Primitive::Box { min: [-w / 2.0, -d / 2.0, h], max: [w / 2.0, d / 2.0, h + top_t] };
    let inset = 2.0 * leg_r;
    let shelf = Primitive::Box {
        min: [-w / 2.0 + inset, -d / 2.0 + inset, shelf_z],
        max: [w / 2.0 - inset, d / 2.0 - inset, shelf_z + shelf_t],
    };
    let (top_c, legs_c, shelf_c) = if part_count == 3 { (0, 1, 2) } else { (0, 1, 0) };
    vec![
        Part { name: "top".into(), class: top_c, primitives: vec![top] },
        Part { name: "legs".into(), class: legs_c, primitives: corner_legs(w, d, leg_r, 0.0, h) },
        Part { name: "shelf".into(), class: shelf_c, primitives: vec![shelf] },
    ]
}

fn lamp_parts(rng: &mut impl Rng, part_count: usize) -> Vec<Part> {
    let base_r = uniform(rng, 0.25, 0.4);
    let base_h = uniform(rng, 0.05, 0.1);
    let pole_r = uniform(rng, 0.03, 0.05);
    let pole_h = uniform(rng, 1.0, 1.5);
    let shade_r0 = uniform(rng, 0.3, 0.5);
    let shade_r1 = uniform(rng, 0.15, 0.3);
    let shade_h = uniform(rng, 0.3, 0.5);
    let pole_top = base_h + pole_h;
    let base = Primitive::Cylinder { center: [0.0, 0.0], z0: 0.0, z1: base_h, radius: base_r };
    let pole = Primitive::Cylinder { center: [0.0, 0.0], z0: base_h, z1: pole_top, radius: pole_r };
    let shade = Primitive::Frustum {
        center: [0.0, 0.0],
        z0: pole_top - 0.6 * shade_h,
        z1: pole_top + 0.4 * shade_h,
        r0: shade_r0,
        r1: shade_r1,
        bottom: false,
    };
    let (base_c, pole_c, shade_c) = if part_count == 3 { (0, 1, 2) } else { (0, 0, 1) };
    vec![
        Part { name: "base".into(), class: base_c, primitives: vec![base] },
        Part { name: "pole".into(), class: pole_c, primitives: vec![pole] },
        Part { name: "shade".into(), class: shade_c, primitives: vec![shade] },
    ]
}

fn plant_parts(rng: &mut impl Rng) -> Vec<Part> {
    let pot_r0 = uniform(rng, 0.25, 0.35);
    let pot_r1 = pot_r0 * uniform(rng, 1.15, 1.4);
    let pot_h = uniform(rng, 0.4, 0.6);
    let leaf_r = uniform(rng, 0.45, 0.7);
    let pot = Primitive::Frustum { center: [0.0, 0.0], z0: 0.0, z1: pot_h, r0: pot_r0, r1: pot_r1, bottom: true };
    let foliage = Primitive::Sphere { center: [0.0, 0.0, pot_h + 0.8 * leaf_r], radius: leaf_r };
    vec![
        Part { name: "pot".into(), class: 0, primitives: vec![pot] },
        Part { name: "foliage".into(), class: 1, primitives: vec![foliage] },
    ]
}

/// Generates one shape with full construction metadata.
pub fn generate_shape_detailed(spec: &ShapeSpec) -> Result<GeneratedShape> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let parts = match spec.family {
        Family::Chair => chair_parts(&mut rng, spec.part_count),
        Family::Table => table_parts(&mut rng, spec.part_count),
        Family::Lamp => lamp_parts(&mut rng, spec.part_count),
        Family::TwoClassPlant => plant_parts(&mut rng),
    };
    let prims: Vec<(usize, Primitive)> =
        parts.iter().enumerate().flat_map(|(pi, p)| p.primitives.iter().map(move |q| (pi, *q))).collect();
    let areas: Vec<f64> = prims.iter().map(|(_, q)| q.area()).collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut raw = Vec::with_capacity(spec.points_n);
    let mut part_of_point = Vec::with_capacity(spec.points_n);
    // every part gets at least one point so all classes are present
    for pi in 0..parts.len() {
        let (_, prim) = prims.iter().find(|(owner, _)| *owner == pi).expect("part has a primitive");
        raw.push(prim.sample(&mut rng));
        part_of_point.push(pi);
    }
    while raw.len() < spec.points_n {
        let (pi, prim) = prims[pick_weighted(&areas, &mut rng)];
        raw.push(prim.sample(&mut rng));
        part_of_point.push(pi);
    }
    if spec.noise_sigma > 0.0 {
        for p in &mut raw {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let n = raw.len() as f64;
    let mut center = [0.0; 3];
    for p in &raw {
        for k in 0..3 {
            center[k] += p[k] / n;
        }
    }
    let scale = raw
        .iter()
        .map(|p| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let frame = Frame { center, scale, angle: rng.gen::<f64>() * TAU };
    let positions: Vec<Point3> = raw
        .iter()
        .map(|p| {
            let q = frame.apply(*p);
            [q[0] as f32, q[1] as f32, q[2] as f32]
        })
        .collect();
    let cloud = PointCloud::new(format!("{}-{}-{}", spec.family.name(), spec.part_count, spec.rng_seed), positions)?;
    let classes: Vec<ClassId> = part_of_point.iter().map(|&pi| parts[pi].class).collect();
    let labels = LabelMap::from_classes(&classes, spec.part_count, Provenance::Seed)?;
    Ok(GeneratedShape { cloud, labels, parts, part_of_point, frame })
}

/// Generates one shape and its ground-truth labels.
pub fn generate_shape(spec: &ShapeSpec) -> Result<(PointCloud, LabelMap)> {
    let shape = generate_shape_detailed(spec)?;
    Ok((shape.cloud, shape.labels))
}

/// Generates `count` shapes; shape `i` uses seed `rng_seed + i`.
pub fn generate_dataset(
    family: Family,
    count: usize,
    part_count: usize,
    rng_seed: u64,
) -> Result<Vec<(PointCloud, LabelMap)>> {
    generate_dataset_with(family, count, part_count, rng_seed, 1024, 0.01)
}

pub fn generate_dataset_with(
    family: Family,
    count: usize,
    part_count: usize,
    rng_seed: u64,
    points_n: usize,
    noise_sigma: f64,
) -> Result<Vec<(PointCloud, LabelMap)>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    (0..count as u64)
        .map(|i| {
            generate_shape(&ShapeSpec {
                family,
                part_count,
                noise_sigma,
                points_n,
                rng_seed: rng_seed.wrapping_add(i),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub ply: String,
    pub labels: String,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<name>.ply`, `<name>.labels` and the manifest into `dir`.
pub fn write_dataset(dir: &Path, items: &[(PointCloud, LabelMap)], family: Option<Family>) -> Result<Manifest> {
    let num_classes = items.first().map(|(_, l)| l.num_classes()).ok_or_else(|| Error::invalid("empty dataset"))?;
    if items.iter().any(|(c, l)| l.num_classes() != num_classes || l.len() != c.len()) {
        return Err(Error::invalid("dataset items disagree on class count or length"));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for (cloud, labels) in items {
        let name = sanitize(cloud.id());
        let entry = ManifestEntry { ply: format!("{name}.ply"), labels: format!("{name}.labels"), name };
        fs::write(dir.join(&entry.ply), save_ply(cloud))?;
        fs::write(dir.join(&entry.labels), labels.to_label_file())?;
        entries.push(entry);
    }
    let manifest = Manifest { num_classes, family, entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<(PointCloud, LabelMap)>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut items = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let cloud = load_ply_file(&dir.join(&entry.ply))?.with_id(entry.name.clone());
        let labels = LabelMap::from_label_file(&fs::read_to_string(dir.join(&entry.labels))?, Provenance::Seed)?;
        if labels.len() != cloud.len() || labels.num_classes() != manifest.num_classes {
            return Err(Error::format(format!("labels of {} do not match its cloud", entry.name)));
        }
        items.push((cloud, labels));
    }
    Ok((manifest, items))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
