//! Synthetic labeled scene pairs and the plain-text scene file format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{self, FlowField, Point, PointSet};

/// Radius of each blob in the clustered shape family.
pub const BLOB_RADIUS: f64 = 0.15;
/// Largest rotational displacement of a rigid motion, as a share of the
/// maximum displacement.
pub const ROTATION_SHARE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Uniform in the unit cube.
    Cube,
    /// Uniform inside `count` balls whose centers lie in the unit cube.
    Blobs { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionFamily {
    Rigid,
    /// Independent rigid motions of `clusters` nearest-centroid regions.
    Piecewise { clusters: usize },
}

/// Everything needed to generate one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecipe {
    pub n_source: usize,
    pub n_target: usize,
    pub shape: ShapeFamily,
    pub motion: MotionFamily,
    pub max_displacement: f64,
    /// Fraction of warped source points removed from the target.
    pub dropout: f64,
    /// Standard deviation of the Gaussian noise added to target points.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            n_source: 256,
            n_target: 256,
            shape: ShapeFamily::Blobs { count: 4 },
            motion: MotionFamily::Rigid,
            max_displacement: 0.5,
            dropout: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Config("scene point counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1) (got {})", self.dropout)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be >= 0 (got {})", self.noise)));
        }
        if matches!(self.shape, ShapeFamily::Blobs { count: 0 }) {
            return Err(Error::Config("blob count must be >= 1".into()));
        }
        if matches!(self.motion, MotionFamily::Piecewise { clusters: 0 }) {
            return Err(Error::Config("cluster count must be >= 1".into()));
        }
        if !(self.max_displacement >= 0.0) || self.max_displacement > 3f64.sqrt() {
            return Err(Error::Config(format!(
                "max displacement {} exceeds the unit cube diagonal",
                self.max_displacement
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment).
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut r = SceneRecipe::default();
        let mut blobs = 4usize;
        let mut clusters = 3usize;
        let mut shape = "blobs".to_string();
        let mut motion = "rigid".to_string();
        for (line_no, key, value) in key_values(text, path)? {
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: m,
            };
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("'{key}' expects a number, got '{v}'")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| err(format!("'{key}' expects an integer, got '{v}'")));
            match key.as_str() {
                "n_source" => r.n_source = int(&value)? as usize,
                "n_target" => r.n_target = int(&value)? as usize,
                "shape" => shape = value,
                "blobs" => blobs = int(&value)? as usize,
                "motion" => motion = value,
                "clusters" => clusters = int(&value)? as usize,
                "max_displacement" => r.max_displacement = num(&value)?,
                "dropout" => r.dropout = num(&value)?,
                "noise" => r.noise = num(&value)?,
                "seed" => r.seed = int(&value)?,
                _ => return Err(err(format!("unknown recipe key '{key}'"))),
            }
        }
        r.shape = match shape.as_str() {
            "cube" => ShapeFamily::Cube,
            "blobs" => ShapeFamily::Blobs { count: blobs },
            other => return Err(Error::Config(format!("unknown shape family '{other}'"))),
        };
        r.motion = match motion.as_str() {
            "rigid" => MotionFamily::Rigid,
            "piecewise" => MotionFamily::Piecewise { clusters },
            other => return Err(Error::Config(format!("unknown motion family '{other}'"))),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `(line number, key, value)` triples of a `key = value` file.
pub(crate) fn key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A source/target pair with optional ground-truth flow on the source.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub id: String,
    pub source: PointSet,
    pub target: PointSet,
    pub gt_flow: Option<FlowField>,
}

impl ScenePair {
    pub fn new(id: &str, source: PointSet, target: PointSet, gt_flow: Option<FlowField>) -> Result<Self> {
        if let Some(f) = &gt_flow {
            if f.len() != source.len() {
                return Err(Error::CountMismatch {
                    what: "ground-truth flow",
                    expected: source.len(),
                    found: f.len(),
                });
            }
        }
        Ok(Self {
            id: id.to_string(),
            source,
            target,
            gt_flow,
        })
    }
}

/// Rotation about `pivot` followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
struct RigidMotion {
    rotation: [[f64; 3]; 3],
    pivot: Point,
    translation: Point,
}

impl RigidMotion {
    fn apply(&self, p: &Point) -> Point {
        let d = [p[0] - self.pivot[0], p[1] - self.pivot[1], p[2] - self.pivot[2]];
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.pivot[a] + r[a][0] * d[0] + r[a][1] * d[1] + r[a][2] * d[2] + self.translation[a];
        }
        out
    }

    /// Translation of magnitude in `[0.25, 0.75] * max` plus a rotation whose
    /// displacement is at most `ROTATION_SHARE * max` for every point within
    /// `reach` of the pivot.
    fn sample(rng: &mut ChaCha8Rng, pivot: Point, reach: f64, max: f64) -> Self {
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let mag = rng.gen_range(0.25..=0.75) * max;
        let translation = [dir[0] * mag, dir[1] * mag, dir[2] * mag];
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let limit = if reach > 0.0 {
            2.0 * (ROTATION_SHARE * max / (2.0 * reach)).min(1.0).asin()
        } else {
            0.0
        };
        let angle = if limit > 0.0 { rng.gen_range(-limit..=limit) } else { 0.0 };
        Self {
            rotation: axis_angle(axis, angle),
            pivot,
            translation,
        }
    }
}

fn axis_angle(u: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + u[0] * u[0] * t, u[0] * u[1] * t - u[2] * s, u[0] * u[2] * t + u[1] * s],
        [u[1] * u[0] * t + u[2] * s, c + u[1] * u[1] * t, u[1] * u[2] * t - u[0] * s],
        [u[2] * u[0] * t - u[1] * s, u[2] * u[1] * t + u[0] * s, c + u[2] * u[2] * t],
    ]
}

struct Shape {
    family: ShapeFamily,
    centers: Vec<Point>,
}

impl Shape {
    fn new(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        let centers = match family {
            ShapeFamily::Cube => Vec::new(),
            ShapeFamily::Blobs { count } => (0..count)
                .map(|_| {
                    let lo = BLOB_RADIUS;
                    let hi = 1.0 - BLOB_RADIUS;
                    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
                })
                .collect(),
        };
        Self { family, centers }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match self.family {
            ShapeFamily::Cube => [rng.gen(), rng.gen(), rng.gen()],
            ShapeFamily::Blobs { .. } => {
                let c = self.centers[rng.gen_range(0..self.centers.len())];
                loop {
                    let d: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0 {
                        break [
                            c[0] + BLOB_RADIUS * d[0],
                            c[1] + BLOB_RADIUS * d[1],
                            c[2] + BLOB_RADIUS * d[2],
                        ];
                    }
                }
            }
        }
    }
}

/// Nearest-centroid partition refined by a few Lloyd iterations.
fn partition(points: &[Point], clusters: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let c = clusters.min(points.len());
    let mut centroids: Vec<Point> = sample(rng, points.len(), c).into_iter().map(|i| points[i]).collect();
    for _ in 0..10 {
        let mut sums = vec![[0.0; 4]; c];
        for p in points {
            let j = geometry::nearest(p, &centroids);
            for a in 0..3 {
                sums[j][a] += p[a];
            }
            sums[j][3] += 1.0;
        }
        for (centroid, s) in centroids.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                *centroid = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
            }
        }
    }
    centroids
}

fn reach(points: &[Point], pivot: &Point) -> f64 {
    points.iter().map(|p| geometry::distance(p, pivot)).fold(0.0, f64::max)
}

/// Generates one labeled scene; the id is `scene_<seed>`.
pub fn generate(recipe: &SceneRecipe) -> Result<ScenePair> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let shape = Shape::new(recipe.shape, &mut rng);
    let source: Vec<Point> = (0..recipe.n_source).map(|_| shape.sample(&mut rng)).collect();
    let max = recipe.max_displacement;

    let (centroids, motions): (Vec<Point>, Vec<RigidMotion>) = match recipe.motion {
        MotionFamily::Rigid => {
            let pivot = PointSet::new(source.clone())?.centroid();
            // Fresh target points may land anywhere in the shape, so bound the
            // rotation by the whole cube as seen from the pivot.
            let r = reach(&source, &pivot).max(cube_reach(&pivot));
            (vec![pivot], vec![RigidMotion::sample(&mut rng, pivot, r, max)])
        }
        MotionFamily::Piecewise { clusters } => {
            let centroids = partition(&source, clusters, &mut rng);
            let motions = centroids
                .iter()
                .map(|c| RigidMotion::sample(&mut rng, *c, cube_reach(c), max))
                .collect();
            (centroids, motions)
        }
    };
    let motion_of = |p: &Point| &motions[geometry::nearest(p, &centroids)];

    let moved: Vec<Point> = source.iter().map(|p| motion_of(p).apply(p)).collect();
    let flow: Vec<Point> = source
        .iter()
        .zip(&moved)
        .map(|(p, q)| [q[0] - p[0], q[1] - p[1], q[2] - p[2]])
        .collect();

    let n1 = recipe.n_source;
    let drop = (recipe.dropout * n1 as f64).round() as usize;
    let mut target: Vec<Point> = if drop > 0 {
        let mut keep: Vec<usize> = sample(&mut rng, n1, n1 - drop).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| moved[i]).collect()
    } else {
        moved
    };
    if target.len() > recipe.n_target {
        let mut keep: Vec<usize> = sample(&mut rng, target.len(), recipe.n_target).into_vec();
        keep.sort_unstable();
        target = keep.into_iter().map(|i| target[i]).collect();
    }
    while target.len() < recipe.n_target {
        let p = shape.sample(&mut rng);
        target.push(motion_of(&p).apply(&p));
    }
    if recipe.noise > 0.0 {
        let normal = Normal::new(0.0, recipe.noise).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut target {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    if drop > 0 || recipe.n_target != n1 {
        target.shuffle(&mut rng);
    }
    ScenePair::new(
        &format!("scene_{:04}", recipe.seed),
        PointSet::new(source)?,
        PointSet::new(target)?,
        Some(FlowField::new(flow)?),
    )
}

fn cube_reach(pivot: &Point) -> f64 {
    let far: Point = [
        if pivot[0] < 0.5 { 1.0 } else { 0.0 },
        if pivot[1] < 0.5 { 1.0 } else { 0.0 },
        if pivot[2] < 0.5 { 1.0 } else { 0.0 },
    ];
    geometry::distance(pivot, &far)
}

/// `count` scenes from consecutive seeds starting at `recipe.seed`.
pub fn generate_set(recipe: &SceneRecipe, count: usize) -> Result<Vec<ScenePair>> {
    (0..count as u64)
        .map(|i| {
            generate(&SceneRecipe {
                seed: recipe.seed + i,
                ..recipe.clone()
            })
        })
        .collect()
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 60);
    for p in points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `x y z` lines; any malformed line is reported with its number.
pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 space-separated values, got '{line}'")));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("invalid number '{f}'")))?;
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file contains no points".into(),
        });
    }
    Ok(out)
}

fn scene_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}_{suffix}.txt"))
}

/// Writes `<id>_src.txt`, `<id>_tgt.txt` and, if present, `<id>_flow.txt`.
pub fn save_scene(pair: &ScenePair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_points(&scene_path(dir, &pair.id, "src"), pair.source.points())?;
    write_points(&scene_path(dir, &pair.id, "tgt"), pair.target.points())?;
    if let Some(f) = &pair.gt_flow {
        write_points(&scene_path(dir, &pair.id, "flow"), f.vectors())?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path, id: &str) -> Result<ScenePair> {
    load_scene_parts(dir, id, true)
}

/// Like [`load_scene`] but never touches the flow file when `with_flow` is false.
pub fn load_scene_parts(dir: &Path, id: &str, with_flow: bool) -> Result<ScenePair> {
    let src_path = scene_path(dir, id, "src");
    let source = PointSet::new(read_points(&src_path)?)?;
    let target = PointSet::new(read_points(&scene_path(dir, id, "tgt"))?)?;
    let flow_path = scene_path(dir, id, "flow");
    let gt_flow = if with_flow && flow_path.exists() {
        let f = FlowField::new(read_points(&flow_path)?)?;
        if f.len() != source.len() {
            return Err(Error::Parse {
                path: flow_path,
                line: 0,
                message: format!("{} flow vectors for {} source points", f.len(), source.len()),
            });
        }
        Some(f)
    } else {
        None
    };
    ScenePair::new(id, source, target, gt_flow)
}

/// Saves scenes plus an `index.txt` manifest listing their ids.
pub fn save_dataset(scenes: &[ScenePair], dir: &Path) -> Result<()> {
    for s in scenes {
        save_scene(s, dir)?;
    }
    let index: String = scenes.iter().map(|s| format!("{}\n", s.id)).collect();
    let path = dir.join("index.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn dataset_ids(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if ids.is_empty() {
        return Err(Error::Parse {
            path,
            line: 0,
            message: "dataset index lists no scenes".into(),
        });
    }
    Ok(ids)
}

pub fn load_dataset(dir: &Path, with_flow: bool) -> Result<Vec<ScenePair>> {
    dataset_ids(dir)?
        .iter()
        .map(|id| load_scene_parts(dir, id, with_flow))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{chamfer, laplacian_reg};

    fn rigid(seed: u64) -> SceneRecipe {
        SceneRecipe {
            n_source: 128,
            n_target: 128,
            seed,
            ..SceneRecipe::default()
        }
    }

    #[test]
    fn clean_rigid_scene_is_exact_warp() {
        let scene = generate(&rigid(3)).unwrap();
        let flow = scene.gt_flow.as_ref().unwrap();
        let warped = geometry::warp(&scene.source, flow).unwrap();
        assert!(chamfer(&warped, &scene.target) < 1e-24);
        for (a, b) in warped.points().iter().zip(scene.target.points()) {
            assert_eq!(a, b);
        }
        for v in flow.vectors() {
            assert!(geometry::distance(v, &[0.0; 3]) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let r = SceneRecipe {
            dropout: 0.2,
            noise: 0.01,
            n_target: 100,
            motion: MotionFamily::Piecewise { clusters: 3 },
            ..rigid(9)
        };
        assert_eq!(generate(&r).unwrap(), generate(&r).unwrap());
        let s = generate(&r).unwrap();
        assert_eq!(s.target.len(), 100);
        assert_eq!(s.gt_flow.unwrap().len(), 128);
    }

    #[test]
    fn rigid_flow_is_smoother_than_piecewise() {
        let mut rigid_sum = 0.0;
        let mut piece_sum = 0.0;
        for seed in 0..10 {
            let a = generate(&rigid(seed)).unwrap();
            let b = generate(&SceneRecipe {
                motion: MotionFamily::Piecewise { clusters: 4 },
                ..rigid(seed)
            })
            .unwrap();
            let na = geometry::regularization_neighborhood(&a.source, 4, 8, 0.25, 0).unwrap();
            let nb = geometry::regularization_neighborhood(&b.source, 4, 8, 0.25, 0).unwrap();
            rigid_sum += laplacian_reg(&a.source, a.gt_flow.as_ref().unwrap(), &na).unwrap();
            piece_sum += laplacian_reg(&b.source, b.gt_flow.as_ref().unwrap(), &nb).unwrap();
        }
        assert!(rigid_sum < piece_sum, "{rigid_sum} vs {piece_sum}");
    }

    #[test]
    fn displacement_beyond_diagonal_is_rejected() {
        let r = SceneRecipe {
            max_displacement: 2.0,
            ..rigid(0)
        };
        assert!(generate(&r).is_err());
    }

    #[test]
    fn recipe_parsing() {
        let text = "# toy\nshape = cube\nmotion = piecewise\nclusters = 5\nn_source = 64\ndropout = 0.1 # comment\n";
        let r = SceneRecipe::parse(text, Path::new("r.txt")).unwrap();
        assert_eq!(r.shape, ShapeFamily::Cube);
        assert_eq!(r.motion, MotionFamily::Piecewise { clusters: 5 });
        assert_eq!(r.n_source, 64);
        assert!(SceneRecipe::parse("colour = red\n", Path::new("r.txt")).is_err());
        assert!(SceneRecipe::parse("dropout = 1.0\n", Path::new("r.txt")).is_err());
    }

    #[test]
    fn scene_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate(&SceneRecipe {
            noise: 0.01,
            dropout: 0.1,
            ..rigid(4)
        })
        .unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path(), &scene.id).unwrap();
        assert_eq!(back, scene);

        fs::remove_file(dir.path().join(format!("{}_flow.txt", scene.id))).unwrap();
        assert!(load_scene(dir.path(), &scene.id).unwrap().gt_flow.is_none());

        fs::write(dir.path().join("bad_src.txt"), "0 0 0\n1 2\n").unwrap();
        fs::write(dir.path().join("bad_tgt.txt"), "0 0 0\n").unwrap();
        match load_scene(dir.path(), "bad") {
            Err(Error::Parse { path, line, .. }) => {
                assert!(path.ends_with("bad_src.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        fs::write(dir.path().join("short_src.txt"), "0 0 0\n1 1 1\n").unwrap();
        fs::write(dir.path().join("short_tgt.txt"), "0 0 0\n").unwrap();
        fs::write(dir.path().join("short_flow.txt"), "0 0 0\n").unwrap();
        assert!(load_scene(dir.path(), "short").is_err());
    }
}
