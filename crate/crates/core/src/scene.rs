//! Scene geometry: objects, voxelized surface point clouds, interactable
//! parts, spatial queries, spawn sampling, and the egocentric heightmap.
//!
//! Conventions: meters, z-up, flat ground at z = 0. Scenes are immutable
//! after load; dynamic object poses live in episode state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::math::{Vec2, Vec3};

/// Surface voxel size used when discretizing box primitives.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.10;
/// Spatial index cell edge.
pub const INDEX_CELL: f64 = 0.5;
/// Heightmap grid edge (cells per side).
pub const HEIGHTMAP_SIZE: usize = 12;
/// Heightmap cell spacing.
pub const HEIGHTMAP_CELL: f64 = 0.15;
/// Objects farther than this from the root do not enter the heightmap.
pub const HEIGHTMAP_GATING_DIST: f64 = 2.0;
/// Largest AABB edge a carryable (dynamic) object may have.
pub const MAX_DYNAMIC_EDGE: f64 = 0.5;
/// Scene schema version.
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("object {object}: part '{part}' point {index} lies outside the inflated AABB")]
    PartOutsideAabb {
        object: String,
        part: String,
        index: usize,
    },
    #[error("dynamic object {object} exceeds max AABB edge {MAX_DYNAMIC_EDGE} m")]
    OversizedDynamic { object: String },
    #[error("scene too crowded: spawn sampling exceeded {0} rejections")]
    TooCrowded(usize),
    #[error("empty part: no surface points to query")]
    EmptyPart,
}

/// Axis-aligned box, world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Aabb { min, max }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max).scale(0.5)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn max_edge(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }

    /// The 8 corners, z-low face first, x fastest.
    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    pub fn inflated(&self, r: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::new(r, r, r),
            max: self.max + Vec3::new(r, r, r),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Distance from a 2D point to the XY footprint rectangle (0 inside).
    pub fn footprint_dist(&self, p: Vec2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        (dx * dx + dy * dy).sqrt()
    }

    fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: Vec3::new(
                self.min.x.min(other.min.x),
                self.min.y.min(other.min.y),
                self.min.z.min(other.min.z),
            ),
            max: Vec3::new(
                self.max.x.max(other.max.x),
                self.max.y.max(other.max.y),
                self.max.z.max(other.max.z),
            ),
        }
    }

    fn of_points(points: &[Vec3]) -> Option<Aabb> {
        let first = *points.first()?;
        let mut aabb = Aabb {
            min: first,
            max: first,
        };
        for p in &points[1..] {
            aabb = aabb.union(&Aabb { min: *p, max: *p });
        }
        Some(aabb)
    }
}

/// Ordered set of surface points, world frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud(pub Vec<Vec3>);

impl PointCloud {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }
}

/// Exact nearest point under the Euclidean metric, ties to lowest index.
pub fn nearest_surface_point(part: &PointCloud, q: Vec3) -> Result<(Vec3, f64), SceneError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in part.0.iter().enumerate() {
        let d = (*p - q).norm_sq();
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, d)| (part.0[i], d.sqrt())).ok_or(SceneError::EmptyPart)
}

/// Centers of surface voxels of an AABB, ordered x then y then z.
///
/// The grid uses `ceil(extent / voxel_size)` cells per axis (minimum 1)
/// with cell size `extent / n`, so centers stay inside the box and a
/// degenerate axis yields a single layer rather than an error.
pub fn voxelize_box(aabb: &Aabb, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0);
    let e = aabb.extent();
    let counts = [e.x, e.y, e.z].map(|len| ((len / voxel_size).ceil() as usize).max(1));
    let steps = [e.x / counts[0] as f64, e.y / counts[1] as f64, e.z / counts[2] as f64];
    let mut out = Vec::new();
    for ix in 0..counts[0] {
        for iy in 0..counts[1] {
            for iz in 0..counts[2] {
                let on_surface = ix == 0
                    || ix == counts[0] - 1
                    || iy == 0
                    || iy == counts[1] - 1
                    || iz == 0
                    || iz == counts[2] - 1;
                if !on_surface {
                    continue;
                }
                out.push(Vec3::new(
                    aabb.min.x + (ix as f64 + 0.5) * steps[0],
                    aabb.min.y + (iy as f64 + 0.5) * steps[1],
                    aabb.min.z + (iz as f64 + 0.5) * steps[2],
                ));
            }
        }
    }
    PointCloud(out)
}

/// One scene object: pose, world AABB, labeled interactable parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub category: String,
    pub dynamic: bool,
    /// Root position; static objects keep z at the AABB bottom.
    pub root: Vec3,
    pub yaw: f64,
    pub aabb: Aabb,
    pub parts: BTreeMap<String, PointCloud>,
}

impl SceneObject {
    /// All part points, in part-label order.
    pub fn surface_points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.parts.values().flat_map(|pc| pc.0.iter().copied())
    }

    pub fn part(&self, label: &str) -> Option<&PointCloud> {
        self.parts.get(label)
    }
}

/// Uniform 2D grid over all scene surface points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    owners: Vec<u32>,
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl SpatialIndex {
    fn cell_of(p: Vec2) -> (i64, i64) {
        (
            (p.x / INDEX_CELL).floor() as i64,
            (p.y / INDEX_CELL).floor() as i64,
        )
    }

    fn insert(&mut self, p: Vec3, owner: u32) {
        let idx = self.points.len() as u32;
        self.points.push(p);
        self.owners.push(owner);
        self.cells.entry(Self::cell_of(p.xy())).or_default().push(idx);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Visit every indexed point within `radius` (2D) of `center`.
    pub fn for_each_in_radius(&self, center: Vec2, radius: f64, mut f: impl FnMut(Vec3, u32)) {
        let r_cells = (radius / INDEX_CELL).ceil() as i64 + 1;
        let (cx, cy) = Self::cell_of(center);
        let r_sq = radius * radius;
        for gx in (cx - r_cells)..=(cx + r_cells) {
            for gy in (cy - r_cells)..=(cy + r_cells) {
                let Some(bucket) = self.cells.get(&(gx, gy)) else {
                    continue;
                };
                for &i in bucket {
                    let p = self.points[i as usize];
                    if (p.xy() - center).norm_sq() <= r_sq {
                        f(p, self.owners[i as usize]);
                    }
                }
            }
        }
    }
}

/// Loaded scene: objects plus a spatial index over their surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub index: SpatialIndex,
    /// XY bounds used for spawn and goal sampling.
    pub bounds: (Vec2, Vec2),
}

impl Scene {
    /// Build a scene from in-memory objects (tests and synthetic scenes).
    pub fn from_objects(objects: Vec<SceneObject>) -> Scene {
        let mut index = SpatialIndex::default();
        for (oi, obj) in objects.iter().enumerate() {
            for p in obj.surface_points() {
                index.insert(p, oi as u32);
            }
        }
        let bounds = ground_bounds(&objects);
        Scene {
            objects,
            index,
            bounds,
        }
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn objects_of_category<'a>(
        &'a self,
        category: &'a str,
    ) -> impl Iterator<Item = &'a SceneObject> + 'a {
        self.objects.iter().filter(move |o| o.category == category)
    }

    pub fn categories(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for o in &self.objects {
            *out.entry(o.category.clone()).or_insert(0) += 1;
        }
        out
    }
}

fn ground_bounds(objects: &[SceneObject]) -> (Vec2, Vec2) {
    let mut iter = objects.iter();
    let Some(first) = iter.next() else {
        return (Vec2::new(-5.0, -5.0), Vec2::new(5.0, 5.0));
    };
    let mut aabb = first.aabb;
    for o in iter {
        aabb = aabb.union(&o.aabb);
    }
    (
        Vec2::new(aabb.min.x - 1.0, aabb.min.y - 1.0),
        Vec2::new(aabb.max.x + 1.0, aabb.max.y + 1.0),
    )
}

// --- scene file schema ---

#[derive(Debug, Deserialize)]
struct SceneFile {
    objects: Vec<ObjectRecord>,
    v: u32,
}

#[derive(Debug, Deserialize)]
struct ObjectRecord {
    id: String,
    category: String,
    #[serde(default)]
    dynamic: bool,
    #[serde(default)]
    pose: Option<PoseRecord>,
    #[serde(default)]
    root: Option<[f64; 3]>,
    geometry: GeometryRecord,
    #[serde(default)]
    parts: BTreeMap<String, PartRecord>,
    #[serde(default)]
    voxel_size: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct PoseRecord {
    x: f64,
    y: f64,
    #[serde(default)]
    yaw: f64,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum GeometryRecord {
    Box { min: [f64; 3], max: [f64; 3] },
    Points(Vec<[f64; 3]>),
    Ply(String),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PartRecord {
    Indices(Vec<usize>),
    Points(Vec<[f64; 3]>),
}

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Load a scene JSON file, voxelizing box primitives and building the
/// spatial index. Part points are validated against the inflated AABB.
pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let file: SceneFile = serde_json::from_str(&text)
        .map_err(|e| schema_err("$", e.to_string()))?;
    if file.v != SCENE_VERSION {
        return Err(schema_err("$.v", format!("unsupported version {}", file.v)));
    }
    let mut objects = Vec::with_capacity(file.objects.len());
    for (oi, rec) in file.objects.into_iter().enumerate() {
        let jpath = format!("$.objects[{oi}]");
        let (translate, yaw) = match (&rec.pose, &rec.root) {
            (Some(p), None) => (Vec3::new(p.x, p.y, 0.0), p.yaw),
            (None, Some(r)) => (Vec3::new(r[0], r[1], r[2]), 0.0),
            (None, None) => (Vec3::ZERO, 0.0),
            (Some(_), Some(_)) => {
                return Err(schema_err(jpath, "object has both pose and root"))
            }
        };
        let voxel = rec.voxel_size.unwrap_or(DEFAULT_VOXEL_SIZE);
        if voxel <= 0.0 {
            return Err(schema_err(format!("{jpath}.voxel_size"), "must be > 0"));
        }

        // Local-frame surface points and box corners.
        let (local_points, local_corners) = match &rec.geometry {
            GeometryRecord::Box { min, max } => {
                let aabb = Aabb::new(
                    Vec3::new(min[0], min[1], min[2]),
                    Vec3::new(max[0], max[1], max[2]),
                );
                if aabb.min.x > aabb.max.x || aabb.min.y > aabb.max.y || aabb.min.z > aabb.max.z {
                    return Err(schema_err(
                        format!("{jpath}.geometry.box"),
                        "min exceeds max",
                    ));
                }
                (voxelize_box(&aabb, voxel).0, Some(aabb.corners()))
            }
            GeometryRecord::Points(pts) => {
                (pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), None)
            }
            GeometryRecord::Ply(rel) => {
                let ply_path = path.parent().unwrap_or(Path::new(".")).join(rel);
                (load_ply_points(&ply_path)?, None)
            }
        };

        let transform = |p: Vec3| p.rotated_z(yaw) + translate;
        let world_points: Vec<Vec3> = local_points.iter().map(|p| transform(*p)).collect();

        // World AABB from rotated corners for boxes, else from points.
        let aabb = match local_corners {
            Some(corners) => {
                let moved: Vec<Vec3> = corners.iter().map(|c| transform(*c)).collect();
                Aabb::of_points(&moved).unwrap()
            }
            None => Aabb::of_points(&world_points)
                .ok_or_else(|| schema_err(format!("{jpath}.geometry"), "no points"))?,
        };

        if rec.dynamic && aabb.max_edge() > MAX_DYNAMIC_EDGE {
            return Err(SceneError::OversizedDynamic {
                object: rec.id.clone(),
            });
        }

        let mut parts: BTreeMap<String, PointCloud> = BTreeMap::new();
        if rec.parts.is_empty() {
            parts.insert("surface".to_string(), PointCloud(world_points.clone()));
        } else {
            for (label, part) in &rec.parts {
                let pts = match part {
                    PartRecord::Indices(idx) => idx
                        .iter()
                        .map(|&i| {
                            world_points.get(i).copied().ok_or_else(|| {
                                schema_err(
                                    format!("{jpath}.parts.{label}"),
                                    format!("index {i} out of range"),
                                )
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    PartRecord::Points(pts) => pts
                        .iter()
                        .map(|p| transform(Vec3::new(p[0], p[1], p[2])))
                        .collect(),
                };
                parts.insert(label.clone(), PointCloud(pts));
            }
        }

        let inflated = aabb.inflated(voxel);
        for (label, pc) in &parts {
            for (i, p) in pc.0.iter().enumerate() {
                if !inflated.contains(*p) {
                    return Err(SceneError::PartOutsideAabb {
                        object: rec.id.clone(),
                        part: label.clone(),
                        index: i,
                    });
                }
            }
        }

        objects.push(SceneObject {
            id: rec.id,
            category: rec.category,
            dynamic: rec.dynamic,
            root: translate,
            yaw,
            aabb,
            parts,
        });
    }
    Ok(Scene::from_objects(objects))
}

/// Minimal ASCII-PLY vertex reader (x, y, z properties).
pub fn load_ply_points(path: &Path) -> Result<Vec<Vec3>, SceneError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut vertex_count: Option<usize> = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = rest.trim().parse().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let n = vertex_count.ok_or_else(|| schema_err("ply", "missing element vertex"))?;
    let mut out = Vec::with_capacity(n);
    for line in lines.take(n) {
        let mut it = line.split_whitespace().map(|t| t.parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), Some(Ok(z))) => out.push(Vec3::new(x, y, z)),
            _ => return Err(schema_err("ply", format!("bad vertex line: {line}"))),
        }
    }
    if out.len() != n {
        return Err(schema_err("ply", "fewer vertices than declared"));
    }
    Ok(out)
}

/// Rejection-sample a collision-free spawn on the ground rectangle.
/// Deterministic given the RNG stream.
pub fn sample_spawn(
    scene: &Scene,
    rng: &mut impl Rng,
    clearance: f64,
) -> Result<(Vec2, f64), SceneError> {
    const MAX_REJECTIONS: usize = 10_000;
    let (lo, hi) = scene.bounds;
    for _ in 0..MAX_REJECTIONS {
        let p = Vec2::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
        );
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let clear = scene
            .objects
            .iter()
            .all(|o| o.aabb.footprint_dist(p) >= clearance);
        if clear {
            return Ok((p, yaw));
        }
    }
    Err(SceneError::TooCrowded(MAX_REJECTIONS))
}

/// Egocentric heightmap: 12x12 sample cells aligned to the character's
/// yaw, centered on the root, 0.15 m spacing. Cell value is the max z of
/// gated surface points in the cell footprint, 0 for bare ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightmapObservation {
    pub grid: Vec<f64>,
    pub origin: Vec2,
    pub yaw: f64,
    pub cell: f64,
}

impl HeightmapObservation {
    pub fn flatten(&self) -> &[f64] {
        &self.grid
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.grid[iy * HEIGHTMAP_SIZE + ix]
    }

    /// Stable content hash for trace records.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.grid {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Compute the heightmap with the default gating distance.
pub fn compute_heightmap(scene: &Scene, root_pos: Vec2, yaw: f64) -> HeightmapObservation {
    compute_heightmap_gated(scene, root_pos, yaw, HEIGHTMAP_GATING_DIST)
}

pub fn compute_heightmap_gated(
    scene: &Scene,
    root_pos: Vec2,
    yaw: f64,
    gating_dist: f64,
) -> HeightmapObservation {
    let half = HEIGHTMAP_SIZE as f64 / 2.0;
    // Only objects whose AABB centroid is close enough contribute.
    let gated: Vec<bool> = scene
        .objects
        .iter()
        .map(|o| (o.aabb.centroid().xy() - root_pos).norm() <= gating_dist)
        .collect();
    let mut grid = vec![0.0f64; HEIGHTMAP_SIZE * HEIGHTMAP_SIZE];
    // Grid footprint circumradius plus index slack.
    let radius = half * HEIGHTMAP_CELL * std::f64::consts::SQRT_2 + INDEX_CELL;
    scene.index.for_each_in_radius(root_pos, radius, |p, owner| {
        if !gated[owner as usize] {
            return;
        }
        let local = (p.xy() - root_pos).rotated(-yaw);
        let ix = (local.x / HEIGHTMAP_CELL + half).floor();
        let iy = (local.y / HEIGHTMAP_CELL + half).floor();
        if ix < 0.0 || iy < 0.0 || ix >= HEIGHTMAP_SIZE as f64 || iy >= HEIGHTMAP_SIZE as f64 {
            return;
        }
        let slot = &mut grid[iy as usize * HEIGHTMAP_SIZE + ix as usize];
        *slot = slot.max(p.z.max(0.0));
    });
    HeightmapObservation {
        grid,
        origin: root_pos,
        yaw,
        cell: HEIGHTMAP_CELL,
    }
}

/// Convenience constructor for a box-primitive object.
pub fn box_object(
    id: impl Into<String>,
    category: impl Into<String>,
    dynamic: bool,
    local: Aabb,
    translate: Vec3,
    yaw: f64,
    voxel: f64,
) -> SceneObject {
    let transform = |p: Vec3| p.rotated_z(yaw) + translate;
    let points: Vec<Vec3> = voxelize_box(&local, voxel).0.iter().map(|p| transform(*p)).collect();
    let corners: Vec<Vec3> = local.corners().iter().map(|c| transform(*c)).collect();
    let aabb = Aabb::of_points(&corners).unwrap();
    let mut parts = BTreeMap::new();
    parts.insert("surface".to_string(), PointCloud(points));
    SceneObject {
        id: id.into(),
        category: category.into(),
        dynamic,
        root: translate,
        yaw,
        aabb,
        parts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit_box_at(x: f64, y: f64) -> SceneObject {
        box_object(
            format!("box-{x}-{y}"),
            "box",
            false,
            Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)),
            Vec3::new(x, y, 0.0),
            0.0,
            0.1,
        )
    }

    #[test]
    fn voxelize_cube_two_cells_per_axis() {
        let aabb = Aabb::new(Vec3::ZERO, Vec3::new(0.2, 0.2, 0.2));
        let pc = voxelize_box(&aabb, 0.1);
        assert_eq!(pc.len(), 8); // 2x2x2, all on surface
    }

    #[test]
    fn voxelize_surface_count_matches_combinatorics() {
        // n^3 - (n-2)^3 surface voxels for an n-per-axis cube.
        let aabb = Aabb::new(Vec3::ZERO, Vec3::new(0.5, 0.5, 0.5));
        let pc = voxelize_box(&aabb, 0.1);
        let n: i64 = 5;
        assert_eq!(pc.len() as i64, n.pow(3) - (n - 2).pow(3));
    }

    #[test]
    fn voxelize_flat_box_single_layer() {
        let aabb = Aabb::new(Vec3::ZERO, Vec3::new(0.3, 0.3, 0.0));
        let pc = voxelize_box(&aabb, 0.1);
        assert_eq!(pc.len(), 9);
        assert!(pc.points().iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn voxelize_voxel_larger_than_box() {
        let aabb = Aabb::new(Vec3::ZERO, Vec3::new(0.05, 0.05, 0.05));
        let pc = voxelize_box(&aabb, 0.1);
        assert_eq!(pc.len(), 1);
        let c = pc.points()[0];
        assert!((c.x - 0.025).abs() < 1e-12);
    }

    #[test]
    fn nearest_point_exact_against_scan() {
        let part = PointCloud(voxelize_box(
            &Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)),
            0.1,
        )
        .0);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = Vec3::new(
                rng.random_range(-2.0..3.0),
                rng.random_range(-2.0..3.0),
                rng.random_range(-2.0..3.0),
            );
            let (p, d) = nearest_surface_point(&part, q).unwrap();
            // Linear-scan oracle.
            let (op, od) = part
                .points()
                .iter()
                .map(|c| (*c, (*c - q).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(p, op);
            assert!((d - od).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_point_far_plus_x_hits_plus_x_face() {
        let part = PointCloud(voxelize_box(
            &Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)),
            0.1,
        )
        .0);
        let (p, _) = nearest_surface_point(&part, Vec3::new(10.0, 0.5, 0.5)).unwrap();
        assert!(p.x > 0.9);
    }

    #[test]
    fn nearest_point_on_stored_point_is_exact() {
        let part = PointCloud(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
        let (p, d) = nearest_surface_point(&part, Vec3::new(4.0, 5.0, 6.0)).unwrap();
        assert_eq!(p, Vec3::new(4.0, 5.0, 6.0));
        assert_eq!(d, 0.0);
    }

    #[test]
    fn empty_part_errors() {
        assert!(nearest_surface_point(&PointCloud::default(), Vec3::ZERO).is_err());
    }

    #[test]
    fn spawn_empty_scene_first_sample() {
        let scene = Scene::from_objects(vec![]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (p, yaw) = sample_spawn(&scene, &mut rng, 0.4).unwrap();
        assert!(p.x >= -5.0 && p.x <= 5.0);
        assert!((0.0..std::f64::consts::TAU).contains(&yaw));
    }

    #[test]
    fn spawn_is_deterministic() {
        let scene = Scene::from_objects(vec![unit_box_at(0.0, 0.0)]);
        let a = sample_spawn(&scene, &mut ChaCha12Rng::seed_from_u64(7), 0.4).unwrap();
        let b = sample_spawn(&scene, &mut ChaCha12Rng::seed_from_u64(7), 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spawn_fully_covered_scene_errors() {
        // One AABB covering the whole (inflated) ground rectangle.
        let big = box_object(
            "slab",
            "slab",
            false,
            Aabb::new(Vec3::new(-10.0, -10.0, 0.0), Vec3::new(10.0, 10.0, 0.1)),
            Vec3::ZERO,
            0.0,
            5.0,
        );
        let scene = Scene::from_objects(vec![big]);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        // Bounds inflate the slab by 1 m, so the farthest sampleable
        // point is sqrt(2) m from the footprint; 1.5 m is unreachable.
        assert!(matches!(
            sample_spawn(&scene, &mut rng, 1.5),
            Err(SceneError::TooCrowded(_))
        ));
    }

    #[test]
    fn spawn_respects_clearance() {
        let scene = Scene::from_objects(vec![unit_box_at(0.0, 0.0), unit_box_at(2.0, 2.0)]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (p, _) = sample_spawn(&scene, &mut rng, 0.4).unwrap();
            for o in &scene.objects {
                assert!(o.aabb.footprint_dist(p) >= 0.4);
            }
        }
    }

    #[test]
    fn heightmap_empty_scene_all_zero() {
        let scene = Scene::from_objects(vec![]);
        let hm = compute_heightmap(&scene, Vec2::ZERO, 0.3);
        assert_eq!(hm.flatten().len(), 144);
        assert!(hm.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heightmap_covering_box_reads_box_height() {
        // A 1 m tall box much larger than the grid footprint.
        let slab = box_object(
            "slab",
            "slab",
            false,
            Aabb::new(Vec3::new(-3.0, -3.0, 0.0), Vec3::new(3.0, 3.0, 1.0)),
            Vec3::ZERO,
            0.0,
            0.1,
        );
        let scene = Scene::from_objects(vec![slab]);
        let hm = compute_heightmap(&scene, Vec2::ZERO, 0.0);
        for &v in hm.flatten() {
            assert!((v - 1.0).abs() <= 0.05 + 1e-12, "cell height {v}");
        }
    }

    #[test]
    fn heightmap_translation_invariant() {
        let mk = |shift: Vec3| {
            Scene::from_objects(vec![box_object(
                "t",
                "table",
                false,
                Aabb::new(Vec3::ZERO, Vec3::new(0.8, 0.8, 0.7)),
                Vec3::new(0.5, 0.2, 0.0) + shift,
                0.0,
                0.1,
            )])
        };
        let a = compute_heightmap(&mk(Vec3::ZERO), Vec2::new(0.1, -0.2), 0.7);
        let shift = Vec3::new(5.0, -3.0, 0.0);
        let b = compute_heightmap(&mk(shift), Vec2::new(0.1 + 5.0, -0.2 - 3.0), 0.7);
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn heightmap_gating_excludes_far_objects() {
        let far = box_object(
            "far",
            "table",
            false,
            Aabb::new(Vec3::ZERO, Vec3::new(0.5, 0.5, 1.0)),
            Vec3::new(50.0, 0.0, 0.0),
            0.0,
            0.1,
        );
        let scene = Scene::from_objects(vec![far]);
        // Centroid 0.95 m away and box edge inside the 0.9 m grid span.
        let query = Vec2::new(49.3, 0.25);
        let hm = compute_heightmap(&scene, query, 0.0);
        assert!(hm.flatten().iter().any(|&v| v > 0.0));
        let hm = compute_heightmap_gated(&scene, query, 0.0, 0.5);
        // Tighter gate excludes it.
        assert!(hm.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn part_points_within_inflated_aabb() {
        let obj = unit_box_at(3.0, 4.0);
        let inflated = obj.aabb.inflated(0.1);
        for p in obj.surface_points() {
            assert!(inflated.contains(p));
        }
    }
}
