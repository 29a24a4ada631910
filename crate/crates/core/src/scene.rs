//! Point-cloud container types, coordinate utilities and point sampling.
//!
//! A [`Scene`] is immutable after construction and safe to share across
//! threads; everything here is a pure function of its inputs.

use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskSet};
use crate::mat::Mat;
use crate::rng::rng_for;
use rand::Rng;

/// Instance id used for unlabeled / background points.
pub const UNLABELED: i32 = -1;

/// One labeled point cloud: `N` points with coordinates (meters), `I` input
/// feature channels (RGB in `[0, 1]` when present), semantic class ids in
/// `[0, S)` and instance ids (`-1` for unassigned).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    coords: Vec<[f64; 3]>,
    features: Vec<f64>,
    n_features: usize,
    semantic: Vec<u32>,
    instance: Vec<i32>,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        coords: Vec<[f64; 3]>,
        features: Vec<f64>,
        n_features: usize,
        semantic: Vec<u32>,
        instance: Vec<i32>,
    ) -> Result<Self> {
        let scene = Scene { id: id.into(), coords, features, n_features, semantic, instance };
        scene.validate()?;
        Ok(scene)
    }

    fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::invalid("scene must contain at least one point"));
        }
        if self.semantic.len() != n || self.instance.len() != n {
            return Err(Error::invalid(format!(
                "per-point arrays disagree: coords {n}, semantic {}, instance {}",
                self.semantic.len(),
                self.instance.len()
            )));
        }
        if self.features.len() != n * self.n_features {
            return Err(Error::invalid(format!(
                "feature array has {} values, expected {n} x {}",
                self.features.len(),
                self.n_features
            )));
        }
        if let Some(bad) = self.instance.iter().find(|v| **v < UNLABELED) {
            return Err(Error::invalid(format!("instance id {bad} below -1")));
        }
        // All points of one instance share one semantic id.
        let mut sem_of = std::collections::BTreeMap::new();
        for (inst, sem) in self.instance.iter().zip(&self.semantic) {
            if *inst < 0 {
                continue;
            }
            match sem_of.insert(*inst, *sem) {
                Some(prev) if prev != *sem => {
                    return Err(Error::invalid(format!(
                        "instance {inst} spans semantic classes {prev} and {sem}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn semantic(&self) -> &[u32] {
        &self.semantic
    }

    pub fn instance(&self) -> &[i32] {
        &self.instance
    }

    /// Distinct instance ids `>= 0`, ascending. Row `t` of
    /// [`Scene::instance_masks`] corresponds to `instance_ids()[t]`.
    pub fn instance_ids(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.instance.iter().copied().filter(|v| *v >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// One binary mask per distinct instance id, ordered by ascending id.
    /// Masks are pairwise disjoint; zero instances yield an empty set.
    pub fn instance_masks(&self) -> MaskSet {
        let ids = self.instance_ids();
        if ids.is_empty() {
            return MaskSet::empty(self.len());
        }
        let mut values = Mat::zeros(ids.len(), self.len());
        for (t, id) in ids.iter().enumerate() {
            let row = values.row_mut(t);
            for (i, inst) in self.instance.iter().enumerate() {
                if inst == id {
                    row[i] = 1.0;
                }
            }
        }
        MaskSet::new(values, MaskKind::Binary).expect("partition masks are binary")
    }

    /// Semantic class of each instance, aligned with [`Scene::instance_ids`].
    pub fn instance_classes(&self) -> Vec<u32> {
        let ids = self.instance_ids();
        ids.iter()
            .map(|id| {
                let i = self.instance.iter().position(|v| v == id).expect("id came from labels");
                self.semantic[i]
            })
            .collect()
    }

    /// Per-point vector from the point to its instance centroid (mean of the
    /// member coordinates); zero for unlabeled points.
    pub fn centroid_offsets(&self) -> Vec<[f64; 3]> {
        let ids = self.instance_ids();
        let mut centroid = std::collections::BTreeMap::new();
        for id in &ids {
            let mut sum = [0.0f64; 3];
            let mut count = 0usize;
            for (i, inst) in self.instance.iter().enumerate() {
                if inst == id {
                    for d in 0..3 {
                        sum[d] += self.coords[i][d];
                    }
                    count += 1;
                }
            }
            centroid.insert(*id, [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64]);
        }
        self.instance
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                if *inst < 0 {
                    [0.0; 3]
                } else {
                    let c = centroid[inst];
                    let p = self.coords[i];
                    [c[0] - p[0], c[1] - p[1], c[2] - p[2]]
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    Fps,
    Random,
}

/// `K` distinct point indices chosen by one sampling method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub indices: Vec<usize>,
    pub method: SampleMethod,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest-point sampling from an explicit start index: each subsequent
/// index maximises the minimum Euclidean distance to the chosen set, ties
/// broken toward the lowest index.
pub fn farthest_point_sample_from(scene: &Scene, k: usize, start: usize) -> Result<SampleSet> {
    let n = scene.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("fps: k = {k} outside [1, {n}]")));
    }
    if start >= n {
        return Err(Error::invalid(format!("fps: start {start} out of range [0, {n})")));
    }
    let mut indices = Vec::with_capacity(k);
    indices.push(start);
    let mut chosen = vec![false; n];
    chosen[start] = true;
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = start;
    while indices.len() < k {
        let last_coord = scene.coord(last);
        let mut best = usize::MAX;
        let mut best_d2 = -1.0;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(scene.coord(i), last_coord);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            // Strict > keeps the lowest index on ties.
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        indices.push(best);
        chosen[best] = true;
        last = best;
    }
    Ok(SampleSet { indices, method: SampleMethod::Fps })
}

/// Farthest-point sampling with a seeded uniform-random start, deterministic
/// given `(scene, k, seed)`.
pub fn farthest_point_sample(scene: &Scene, k: usize, seed: u64) -> Result<SampleSet> {
    let start = rng_for(seed, 0x0f5).random_range(0..scene.len());
    farthest_point_sample_from(scene, k, start)
}

/// `k` distinct indices drawn uniformly without replacement.
pub fn random_sample(scene: &Scene, k: usize, seed: u64) -> Result<SampleSet> {
    let n = scene.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("random sample: k = {k} outside [1, {n}]")));
    }
    let mut rng = rng_for(seed, 0x7a2);
    let indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    Ok(SampleSet { indices, method: SampleMethod::Random })
}

/// Per-anchor relative position embedding: `values[i] = coords[anchor] -
/// coords[i]` (instance-centric sign, fixed project-wide).
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeCoords {
    pub anchor: usize,
    pub values: Vec<[f64; 3]>,
}

pub fn relative_coords(scene: &Scene, anchor: usize) -> Result<RelativeCoords> {
    let n = scene.len();
    if anchor >= n {
        return Err(Error::invalid(format!("anchor {anchor} out of range [0, {n})")));
    }
    let a = scene.coord(anchor);
    let values = scene
        .coords()
        .iter()
        .map(|p| [a[0] - p[0], a[1] - p[1], a[2] - p[2]])
        .collect();
    Ok(RelativeCoords { anchor, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn plain_scene(coords: Vec<[f64; 3]>, instance: Vec<i32>) -> Scene {
        let semantic = instance.iter().map(|i| if *i < 0 { 0 } else { 1 }).collect();
        Scene::new("test", coords, vec![], 0, semantic, instance).unwrap()
    }

    fn random_scene(seed: u64, n: usize) -> Scene {
        let mut rng = rng_for(seed, 1);
        let coords = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let instance = (0..n).map(|_| rng.random_range(-1..3)).collect();
        plain_scene(coords, instance)
    }

    #[test]
    fn scene_rejects_mismatched_lengths() {
        let err = Scene::new("x", vec![[0.0; 3]], vec![], 0, vec![0, 0], vec![-1]);
        assert!(err.is_err());
    }

    #[test]
    fn scene_rejects_split_semantic_instance() {
        let err = Scene::new(
            "x",
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
            vec![],
            0,
            vec![1, 2],
            vec![0, 0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn fps_collinear_extremes() {
        let scene = plain_scene(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            vec![0, 0, 0, 0],
        );
        let s = farthest_point_sample_from(&scene, 2, 0).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
    }

    #[test]
    fn fps_exhaustive_returns_all() {
        let scene = random_scene(3, 17);
        let s = farthest_point_sample(&scene, 17, 9).unwrap();
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_oversized_k() {
        let scene = random_scene(1, 5);
        assert!(farthest_point_sample(&scene, 6, 0).is_err());
    }

    fn min_pairwise(scene: &Scene, idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(dist2(scene.coord(i), scene.coord(j)).sqrt());
            }
        }
        best
    }

    #[test]
    fn fps_beats_random_min_distance() {
        // Oracle: random sampling computed by the same harness.
        let scene = random_scene(11, 100);
        for seed in 0..20 {
            let fps = farthest_point_sample(&scene, 10, seed).unwrap();
            let rnd = random_sample(&scene, 10, seed).unwrap();
            assert!(min_pairwise(&scene, &fps.indices) >= min_pairwise(&scene, &rnd.indices));
        }
    }

    #[test]
    fn fps_deterministic_and_monotone_coverage() {
        let scene = random_scene(5, 60);
        let a = farthest_point_sample(&scene, 20, 7).unwrap();
        let b = farthest_point_sample(&scene, 20, 7).unwrap();
        assert_eq!(a, b);
        // Prefixes of the greedy sequence are the smaller-k samples, and each
        // added index can only shrink any point's distance to the chosen set.
        let full = farthest_point_sample(&scene, 60, 7).unwrap();
        for i in 0..scene.len() {
            let mut prev = f64::INFINITY;
            for k in 1..=10 {
                let chosen = &full.indices[..k];
                let d = chosen
                    .iter()
                    .map(|&c| dist2(scene.coord(i), scene.coord(c)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= prev + 1e-12);
                prev = d;
            }
        }
    }

    #[test]
    fn relative_coords_cases() {
        let scene = plain_scene(vec![[0.0; 3], [1.0, 2.0, 3.0]], vec![0, 0]);
        let rel = relative_coords(&scene, 0).unwrap();
        assert_eq!(rel.values[1], [-1.0, -2.0, -3.0]);
        assert_eq!(rel.values[0], [0.0, 0.0, 0.0]);
        assert!(relative_coords(&scene, 2).is_err());
    }

    #[test]
    fn relative_coords_anchor_difference_is_constant() {
        let scene = random_scene(13, 40);
        let ra = relative_coords(&scene, 4).unwrap();
        let rb = relative_coords(&scene, 29).unwrap();
        let expect = [
            scene.coord(4)[0] - scene.coord(29)[0],
            scene.coord(4)[1] - scene.coord(29)[1],
            scene.coord(4)[2] - scene.coord(29)[2],
        ];
        for i in 0..scene.len() {
            for d in 0..3 {
                assert!((ra.values[i][d] - rb.values[i][d] - expect[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instance_masks_partition() {
        let scene = plain_scene(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            vec![0, 0, 1, -1],
        );
        let m = scene.instance_masks();
        assert_eq!(m.len(), 2);
        assert_eq!(m.row(0), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn instance_masks_empty_when_all_unlabeled() {
        let scene = plain_scene(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![-1, -1]);
        assert!(scene.instance_masks().is_empty());
    }

    #[test]
    fn centroid_offsets_pair_and_singleton() {
        let scene = plain_scene(
            vec![[0.0; 3], [2.0, 0.0, 0.0], [5.0, 5.0, 5.0]],
            vec![0, 0, 1],
        );
        let off = scene.centroid_offsets();
        assert_eq!(off[0], [1.0, 0.0, 0.0]);
        assert_eq!(off[1], [-1.0, 0.0, 0.0]);
        assert_eq!(off[2], [0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn masks_disjoint_and_roundtrip(seed in 0u64..200) {
            let scene = random_scene(seed, 30);
            let masks = scene.instance_masks();
            let ids = scene.instance_ids();
            for i in 0..scene.len() {
                let total: f64 = (0..masks.len()).map(|t| masks.row(t)[i]).sum();
                prop_assert!(total <= 1.0);
                // Reconstruct the label and compare on labeled points.
                let hit = (0..masks.len()).find(|t| masks.row(*t)[i] == 1.0);
                match hit {
                    Some(t) => prop_assert_eq!(ids[t], scene.instance()[i]),
                    None => prop_assert!(scene.instance()[i] < 0),
                }
            }
        }

        #[test]
        fn centroid_offsets_sum_to_zero(seed in 0u64..100) {
            let scene = random_scene(seed, 25);
            let off = scene.centroid_offsets();
            for id in scene.instance_ids() {
                let mut sum = [0.0f64; 3];
                for (i, inst) in scene.instance().iter().enumerate() {
                    if *inst == id {
                        for d in 0..3 { sum[d] += off[i][d]; }
                    }
                }
                for v in sum { prop_assert!(v.abs() < 1e-9); }
            }
        }
    }
}
