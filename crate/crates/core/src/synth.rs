//! Deterministic generator of labeled synthetic scenes.
//!
//! Points are sampled from object *surfaces* (box shells, spheres, plane
//! patches) so instance centroids fall in empty space, then jittered with
//! Gaussian noise and mixed with unlabeled clutter. Suites dial in the hard
//! cases: touching instances, instances split into distant blobs, and heavy
//! size imbalance.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scene::Scene;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    BoxSurface,
    SphereSurface,
    PlanePatch,
}

/// Recipe for one scene family.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub id: String,
    /// Inclusive instance-count range.
    pub n_instances: (usize, usize),
    pub shapes: Vec<Shape>,
    /// Inclusive points-per-instance range.
    pub points_per_instance: (usize, usize),
    /// Semantic class count `S`; class 0 is reserved for clutter.
    pub classes: usize,
    /// Surface gap (meters) at which each instance is anchored to a placed
    /// one; may be <= 0 for touching. Also the pairwise lower bound.
    pub min_gap: f64,
    pub noise_sigma: f64,
    /// Fraction of the final point count that is unlabeled clutter.
    pub clutter_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            id: "scene".to_string(),
            n_instances: (3, 8),
            shapes: vec![Shape::BoxSurface, Shape::SphereSurface, Shape::PlanePatch],
            points_per_instance: (450, 700),
            classes: 5,
            min_gap: 0.3,
            noise_sigma: 0.01,
            clutter_fraction: 0.08,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_instances;
        if lo < 1 || lo > hi {
            return Err(Error::invalid(format!("empty instance range {lo}..={hi}")));
        }
        let (plo, phi) = self.points_per_instance;
        if plo < 1 || plo > phi {
            return Err(Error::invalid(format!("empty points range {plo}..={phi}")));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes (clutter + 1)"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("shape set is empty"));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(Error::invalid("clutter fraction must be in [0, 1)"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// A placed shape: axis-aligned half extents around a center.
#[derive(Debug, Clone, Copy)]
struct Placement {
    shape: Shape,
    center: [f64; 3],
    half: [f64; 3],
}

impl Placement {
    /// Surface gap between axis-aligned bounding boxes (exact for boxes and
    /// patches, slightly conservative for spheres).
    fn gap(&self, other: &Placement) -> f64 {
        let mut sq = 0.0;
        for d in 0..3 {
            let s = (self.center[d] - other.center[d]).abs() - self.half[d] - other.half[d];
            if s > 0.0 {
                sq += s * s;
            }
        }
        sq.sqrt()
    }
}

const PLACEMENT_RETRIES: usize = 200;

fn sample_half_extents(shape: Shape, rng: &mut impl Rng) -> [f64; 3] {
    match shape {
        Shape::BoxSurface => [
            rng.random_range(0.18..0.45),
            rng.random_range(0.18..0.45),
            rng.random_range(0.18..0.45),
        ],
        Shape::SphereSurface => {
            let r = rng.random_range(0.18..0.40);
            [r, r, r]
        }
        Shape::PlanePatch => {
            // Thin slab in a random axis.
            let mut half = [rng.random_range(0.22..0.5), rng.random_range(0.22..0.5), 0.005];
            let axis = rng.random_range(0..3);
            half.swap(2, axis);
            half
        }
    }
}

fn place_instances(spec: &SceneSpec, n_inst: usize, rng: &mut impl Rng) -> Result<Vec<Placement>> {
    let mut placed: Vec<Placement> = Vec::with_capacity(n_inst);
    for i in 0..n_inst {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let half = sample_half_extents(shape, rng);
            let center = if placed.is_empty() {
                [0.0, 0.0, 0.0]
            } else {
                // Anchor to a random placed instance at the recipe gap along
                // one axis, so surfaces meet at `min_gap` exactly (pre-noise).
                let anchor = placed[rng.random_range(0..placed.len())];
                let axis = rng.random_range(0..3usize);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut c = anchor.center;
                c[axis] += sign * (anchor.half[axis] + half[axis] + spec.min_gap.max(0.0));
                // Slide along the other axes while keeping face overlap.
                for d in 0..3 {
                    if d != axis {
                        let slack = (anchor.half[d].min(half[d])) * 0.6;
                        c[d] += rng.random_range(-slack..=slack);
                    }
                }
                c
            };
            let candidate = Placement { shape, center, half };
            let far_enough =
                placed.iter().all(|p| candidate.gap(p) >= spec.min_gap.max(0.0) - 1e-9);
            if far_enough {
                placed.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place instance {i} with pairwise gap >= {} after {PLACEMENT_RETRIES} attempts",
                spec.min_gap
            )));
        }
    }
    Ok(placed)
}

fn sample_surface_point(p: &Placement, rng: &mut impl Rng) -> [f64; 3] {
    match p.shape {
        Shape::SphereSurface => {
            // Uniform direction via normalized Gaussian.
            let n = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
            loop {
                let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-9 {
                    let r = p.half[0];
                    return [
                        p.center[0] + v[0] / len * r,
                        p.center[1] + v[1] / len * r,
                        p.center[2] + v[2] / len * r,
                    ];
                }
            }
        }
        Shape::BoxSurface | Shape::PlanePatch => {
            // Pick a face weighted by area, then uniform on it. A patch is a
            // thin box, so its two large faces dominate.
            let h = p.half;
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = 2.0 * (areas[0] + areas[1] + areas[2]);
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            let mut sign = 1.0;
            'outer: for d in 0..3 {
                for s in [1.0, -1.0] {
                    if pick < areas[d] {
                        axis = d;
                        sign = s;
                        break 'outer;
                    }
                    pick -= areas[d];
                }
            }
            let mut out = p.center;
            out[axis] += sign * h[axis];
            for d in 0..3 {
                if d != axis && h[d] > 0.0 {
                    out[d] += rng.random_range(-h[d]..=h[d]);
                }
            }
            out
        }
    }
}

fn class_color(class: u32, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    // Evenly spaced hues, fixed saturation/value.
    let h = (class as f64 - 1.0) / (classes.max(2) as f64 - 1.0) * 0.92;
    let (s, v) = (0.65, 0.9);
    let i = (h * 6.0).floor() as i64 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Default)]
struct SceneParts {
    coords: Vec<[f64; 3]>,
    features: Vec<f64>,
    semantic: Vec<u32>,
    instance: Vec<i32>,
}

impl SceneParts {
    fn push(&mut self, pt: [f64; 3], class: u32, inst: i32, classes: usize, rng: &mut impl Rng) {
        self.coords.push(pt);
        for c in class_color(class, classes) {
            self.features.push((c + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0));
        }
        self.semantic.push(class);
        self.instance.push(inst);
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &self.coords {
            for d in 0..3 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        (lo, hi)
    }
}

/// Deterministic scene synthesis: place instances, sample surfaces, add
/// noise, clutter and per-class RGB with jitter.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, 0x5ce9e);
    let n_inst = rng.random_range(spec.n_instances.0..=spec.n_instances.1);
    let placements = place_instances(spec, n_inst, &mut rng)?;
    let classes: Vec<u32> =
        (0..n_inst).map(|_| rng.random_range(1..spec.classes as u32)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).expect("valid sigma");

    let mut parts = SceneParts::default();

    for (i, p) in placements.iter().enumerate() {
        let n_points = rng.random_range(spec.points_per_instance.0..=spec.points_per_instance.1);
        for _ in 0..n_points {
            let mut pt = sample_surface_point(p, &mut rng);
            if spec.noise_sigma > 0.0 {
                for v in pt.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            parts.push(pt, classes[i], i as i32, spec.classes, &mut rng);
        }
    }

    // Clutter: uniform in the inflated scene bounding box, unlabeled.
    let labeled = parts.coords.len();
    let n_clutter =
        (labeled as f64 * spec.clutter_fraction / (1.0 - spec.clutter_fraction)).round() as usize;
    if n_clutter > 0 {
        let (lo, hi) = parts.bounds();
        for _ in 0..n_clutter {
            let pt = [
                rng.random_range(lo[0] - 0.3..=hi[0] + 0.3),
                rng.random_range(lo[1] - 0.3..=hi[1] + 0.3),
                rng.random_range(lo[2] - 0.3..=hi[2] + 0.3),
            ];
            parts.push(pt, 0, -1, spec.classes, &mut rng);
        }
    }

    Scene::new(spec.id.clone(), parts.coords, parts.features, 3, parts.semantic, parts.instance)
}

/// Named suites mirroring the failure modes the assignment strategies react
/// to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Easy,
    Adjacent,
    Disconnected,
    Imbalanced,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Suite> {
        match name {
            "easy" => Ok(Suite::Easy),
            "adjacent" => Ok(Suite::Adjacent),
            "disconnected" => Ok(Suite::Disconnected),
            "imbalanced" => Ok(Suite::Imbalanced),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}`; valid suites: easy, adjacent, disconnected, imbalanced"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Easy => "easy",
            Suite::Adjacent => "adjacent",
            Suite::Disconnected => "disconnected",
            Suite::Imbalanced => "imbalanced",
        }
    }

    fn base_spec(&self, seed: u64, id: String) -> SceneSpec {
        match self {
            Suite::Easy => SceneSpec {
                seed,
                id,
                n_instances: (3, 6),
                shapes: vec![Shape::BoxSurface, Shape::SphereSurface, Shape::PlanePatch],
                points_per_instance: (180, 320),
                classes: 5,
                min_gap: 0.5,
                noise_sigma: 0.01,
                clutter_fraction: 0.08,
            },
            Suite::Adjacent => SceneSpec {
                seed,
                id,
                n_instances: (4, 6),
                shapes: vec![Shape::BoxSurface, Shape::SphereSurface],
                points_per_instance: (160, 280),
                classes: 5,
                min_gap: 0.0,
                noise_sigma: 0.015,
                clutter_fraction: 0.08,
            },
            Suite::Disconnected => SceneSpec {
                seed,
                id,
                n_instances: (3, 5),
                shapes: vec![Shape::BoxSurface, Shape::SphereSurface],
                points_per_instance: (200, 320),
                classes: 5,
                min_gap: 0.4,
                noise_sigma: 0.01,
                clutter_fraction: 0.08,
            },
            Suite::Imbalanced => SceneSpec {
                seed,
                id,
                n_instances: (3, 5),
                shapes: vec![Shape::BoxSurface, Shape::SphereSurface],
                points_per_instance: (1500, 2500),
                classes: 5,
                min_gap: 0.4,
                noise_sigma: 0.01,
                clutter_fraction: 0.05,
            },
        }
    }
}

/// Splits roughly half of a scene's instances into two blobs >= `separation`
/// meters apart, keeping ids and classes.
fn split_instances(scene: Scene, seed: u64, separation: f64) -> Scene {
    let mut rng = rng_for(seed, 0xd15c);
    let ids = scene.instance_ids();
    let split: Vec<bool> = ids.iter().map(|_| rng.random::<f64>() < 0.6).collect();
    let mut coords: Vec<[f64; 3]> = scene.coords().to_vec();
    for id in ids.iter().zip(&split).filter(|(_, s)| **s).map(|(id, _)| id) {
        let members: Vec<usize> = scene
            .instance()
            .iter()
            .enumerate()
            .filter(|(_, v)| *v == id)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 8 {
            continue;
        }
        // Cut by a random axis plane through the centroid and move one half
        // along that axis, away from the other; the axis gap is then at
        // least `dist` no matter how the noise fell.
        let axis = rng.random_range(0..3usize);
        let mid: f64 =
            members.iter().map(|i| coords[*i][axis]).sum::<f64>() / members.len() as f64;
        let dist = separation + rng.random_range(0.0..0.3);
        for i in members {
            if coords[i][axis] > mid {
                coords[i][axis] += dist;
            }
        }
    }
    Scene::new(
        scene.id.clone(),
        coords,
        (0..scene.len()).flat_map(|i| scene.features_of(i).to_vec()).collect(),
        scene.n_features(),
        scene.semantic().to_vec(),
        scene.instance().to_vec(),
    )
    .expect("split preserves scene invariants")
}

/// Appends tiny far-away instances so the size ratio is extreme.
fn add_tiny_instances(scene: Scene, seed: u64, count: usize, points: usize) -> Scene {
    let mut rng = rng_for(seed, 0x717e);
    let mut coords = scene.coords().to_vec();
    let mut features: Vec<f64> =
        (0..scene.len()).flat_map(|i| scene.features_of(i).to_vec()).collect();
    let mut semantic = scene.semantic().to_vec();
    let mut instance = scene.instance().to_vec();
    let next_id = scene.instance_ids().iter().max().map_or(0, |m| m + 1);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &coords {
        for d in 0..3 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let classes = semantic.iter().copied().max().unwrap_or(1).max(1) as usize + 1;
    for j in 0..count {
        let r = rng.random_range(0.04..0.08);
        let center = [
            rng.random_range(lo[0] - 0.5..=hi[0] + 0.5),
            rng.random_range(lo[1] - 0.5..=hi[1] + 0.5),
            rng.random_range(hi[2] + 0.8..=hi[2] + 1.4),
        ];
        let class = rng.random_range(1..classes.max(2) as u32);
        let place = Placement { shape: Shape::SphereSurface, center, half: [r, r, r] };
        for _ in 0..points {
            let pt = sample_surface_point(&place, &mut rng);
            coords.push(pt);
            for c in class_color(class, classes) {
                features.push((c + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0));
            }
            semantic.push(class);
            instance.push(next_id + j as i32);
        }
    }
    Scene::new(scene.id.clone(), coords, features, scene.n_features(), semantic, instance)
        .expect("tiny instances preserve scene invariants")
}

/// Fixed-recipe datasets, deterministic in `(name, count, seed)`.
pub fn generate_suite(suite: Suite, count: usize, seed: u64) -> Result<Vec<Scene>> {
    let scenes = crate::par::map_indexed(count, |i| {
        let scene_seed = crate::rng::derive_seed(seed, i as u64);
        let id = format!("{}-{i:04}", suite.name());
        let spec = suite.base_spec(scene_seed, id);
        let scene = generate(&spec)?;
        Ok(match suite {
            Suite::Disconnected => split_instances(scene, scene_seed, 1.0),
            Suite::Imbalanced => add_tiny_instances(scene, scene_seed, 2, 30),
            _ => scene,
        })
    });
    scenes.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_cross_instance_distance(scene: &Scene) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..scene.len() {
            if scene.instance()[i] < 0 {
                continue;
            }
            for j in (i + 1)..scene.len() {
                if scene.instance()[j] < 0 || scene.instance()[j] == scene.instance()[i] {
                    continue;
                }
                let a = scene.coord(i);
                let b = scene.coord(j);
                let d =
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn single_instance_no_clutter() {
        let spec = SceneSpec {
            n_instances: (1, 1),
            clutter_fraction: 0.0,
            seed: 5,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        assert!(scene.instance().iter().all(|i| *i == 0));
    }

    #[test]
    fn same_seed_identical_scenes() {
        let spec = SceneSpec { seed: 99, ..SceneSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn touching_recipe_brings_instances_together() {
        // Surfaces anchored at zero gap: the nearest cross-instance pair
        // must sit within the noise-adjusted bound.
        for seed in 0..5 {
            let spec = SceneSpec {
                seed,
                n_instances: (2, 2),
                shapes: vec![Shape::BoxSurface],
                points_per_instance: (220, 260),
                min_gap: 0.0,
                noise_sigma: 0.015,
                clutter_fraction: 0.0,
                ..SceneSpec::default()
            };
            let scene = generate(&spec).unwrap();
            let d = nearest_cross_instance_distance(&scene);
            assert!(d <= 3.0 * spec.noise_sigma, "seed {seed}: nearest distance {d}");
        }
    }

    #[test]
    fn easy_suite_keeps_instances_separated() {
        let scenes = generate_suite(Suite::Easy, 4, 11).unwrap();
        for scene in &scenes {
            let d = nearest_cross_instance_distance(scene);
            // Placement gap 0.5 minus 6 sigma of coordinate noise.
            assert!(d >= 0.5 - 6.0 * 0.01, "scene {}: distance {d}", scene.id);
        }
    }

    #[test]
    fn disconnected_suite_splits_an_instance() {
        let scenes = generate_suite(Suite::Disconnected, 4, 3).unwrap();
        let mut found = false;
        for scene in &scenes {
            for id in scene.instance_ids() {
                let pts: Vec<[f64; 3]> = scene
                    .instance()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v == id)
                    .map(|(i, _)| scene.coord(i))
                    .collect();
                // Single-linkage with a 0.5 m threshold: >= 2 components at
                // >= 1 m separation means a genuinely split instance.
                let mut comp = vec![usize::MAX; pts.len()];
                let mut n_comp = 0;
                for i in 0..pts.len() {
                    if comp[i] != usize::MAX {
                        continue;
                    }
                    let mut stack = vec![i];
                    comp[i] = n_comp;
                    while let Some(a) = stack.pop() {
                        for b in 0..pts.len() {
                            if comp[b] == usize::MAX {
                                let d2: f64 =
                                    (0..3).map(|d| (pts[a][d] - pts[b][d]).powi(2)).sum();
                                if d2 < 0.5 * 0.5 {
                                    comp[b] = n_comp;
                                    stack.push(b);
                                }
                            }
                        }
                    }
                    n_comp += 1;
                }
                if n_comp >= 2 {
                    let mut best = f64::INFINITY;
                    for a in 0..pts.len() {
                        for b in 0..pts.len() {
                            if comp[a] != comp[b] {
                                let d2: f64 =
                                    (0..3).map(|d| (pts[a][d] - pts[b][d]).powi(2)).sum();
                                best = best.min(d2.sqrt());
                            }
                        }
                    }
                    if best >= 1.0 {
                        found = true;
                    }
                }
            }
        }
        assert!(found, "no split instance found in the disconnected suite");
    }

    #[test]
    fn imbalanced_suite_has_extreme_size_ratio() {
        let scenes = generate_suite(Suite::Imbalanced, 2, 7).unwrap();
        for scene in &scenes {
            let ids = scene.instance_ids();
            let sizes: Vec<usize> = ids
                .iter()
                .map(|id| scene.instance().iter().filter(|v| *v == id).count())
                .collect();
            let max = *sizes.iter().max().unwrap() as f64;
            let min = *sizes.iter().min().unwrap() as f64;
            assert!(max / min >= 50.0, "scene {}: ratio {}", scene.id, max / min);
        }
    }

    #[test]
    fn generated_scenes_satisfy_invariants() {
        // Scene::new validates; a round over every recipe must construct.
        for suite in [Suite::Easy, Suite::Adjacent, Suite::Disconnected, Suite::Imbalanced] {
            let scenes = generate_suite(suite, 2, 21).unwrap();
            assert_eq!(scenes.len(), 2);
            for s in scenes {
                assert!(s.len() > 100);
                assert!(!s.instance_ids().is_empty());
            }
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        let err = Suite::parse("hardcore").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("easy") && msg.contains("imbalanced"));
    }

    #[test]
    fn suite_generation_is_deterministic() {
        let a = generate_suite(Suite::Adjacent, 3, 42).unwrap();
        let b = generate_suite(Suite::Adjacent, 3, 42).unwrap();
        assert_eq!(a, b);
    }
}
