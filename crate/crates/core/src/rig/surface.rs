use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Rig;

/// Bones that contribute to a ground-truth skinning weight row.
pub const WEIGHT_NEIGHBORS: usize = 4;
/// Inverse-distance falloff exponent.
pub const WEIGHT_EXPONENT: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub bone: usize,
    pub weights: Vec<f64>,
}

/// Distance from `x` to the segment `[a, b]`.
pub fn segment_distance(x: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((x - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (x - (a + ab * t)).norm()
}

/// Ground-truth weights: inverse-square distance to each bone segment,
/// restricted to the nearest bones and normalized onto the simplex.
pub fn capsule_weights(rig: &Rig, x: &Vector3<f64>) -> Vec<f64> {
    let n = rig.bone_count();
    let mut d: Vec<(f64, usize)> = (0..n)
        .map(|b| (segment_distance(x, &rig.head(b), &rig.tail(b)).max(1e-9), b))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut w = vec![0.0; n];
    let k = WEIGHT_NEIGHBORS.min(n);
    let mut total = 0.0;
    for &(dist, b) in &d[..k] {
        let v = dist.powi(-WEIGHT_EXPONENT);
        w[b] = v;
        total += v;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

fn unit_sphere<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

fn capsule_area(rig: &Rig, b: usize) -> f64 {
    let r = rig.radius(b);
    let len = (rig.tail(b) - rig.head(b)).norm();
    std::f64::consts::TAU * r * len + 2.0 * std::f64::consts::TAU * r * r
}

/// Whether `x` lies strictly inside some capsule other than `skip`.
pub fn inside_other_capsule(rig: &Rig, x: &Vector3<f64>, skip: usize, margin: f64) -> bool {
    (0..rig.bone_count())
        .filter(|&b| b != skip)
        .any(|b| segment_distance(x, &rig.head(b), &rig.tail(b)) < rig.radius(b) - margin)
}

/// Uniform samples on the exposed capsule surface with analytic weights.
///
/// Points buried inside a neighbouring capsule are rejected. Deterministic
/// for a fixed seed.
pub fn sample_surface(rig: &Rig, n: usize, seed: u64) -> Vec<SurfaceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = (0..rig.bone_count()).map(|b| capsule_area(rig, b)).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        let mut pick = rng.gen_range(0.0..total);
        let mut bone = areas.len() - 1;
        for (b, a) in areas.iter().enumerate() {
            if pick < *a {
                bone = b;
                break;
            }
            pick -= a;
        }
        let head = rig.head(bone);
        let tail = rig.tail(bone);
        let r = rig.radius(bone);
        let seg = tail - head;
        let len = seg.norm();
        let axis = if len > 0.0 { seg / len } else { Vector3::y() };
        let (u, v) = perpendicular_frame(&axis);
        let side = std::f64::consts::TAU * r * len;
        let (position, normal) = if rng.gen_range(0.0..side + 2.0 * std::f64::consts::TAU * r * r) < side {
            let t: f64 = rng.gen_range(0.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let nrm = u * phi.cos() + v * phi.sin();
            (head + seg * t + nrm * r, nrm)
        } else {
            let s = unit_sphere(&mut rng);
            let center = if s.dot(&axis) >= 0.0 { tail } else { head };
            (center + s * r, s)
        };
        // give up on rejection for pathological rigs rather than spinning forever
        if attempts < 50 * n + 1000 && inside_other_capsule(rig, &position, bone, 1e-3) {
            continue;
        }
        let weights = capsule_weights(rig, &position);
        out.push(SurfaceSample {
            position,
            normal,
            bone,
            weights,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::{BodyPart, Bone};

    #[test]
    fn deterministic_for_seed() {
        let rig = Rig::smpl_like();
        assert_eq!(sample_surface(&rig, 1, 42), sample_surface(&rig, 1, 42));
        assert_ne!(sample_surface(&rig, 5, 42), sample_surface(&rig, 5, 43));
    }

    #[test]
    fn weights_on_simplex_and_points_on_surface() {
        let rig = Rig::smpl_like();
        for s in sample_surface(&rig, 500, 7) {
            let sum: f64 = s.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert_eq!(s.weights.iter().filter(|&&w| w > 0.0).count(), WEIGHT_NEIGHBORS);
            let d = segment_distance(&s.position, &rig.head(s.bone), &rig.tail(s.bone));
            assert!((d - rig.radius(s.bone)).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_capsule_gets_one_hot_weight() {
        // four bones spaced 2 m apart; a point on bone 1's mid surface
        let bones = (0..4)
            .map(|i| Bone {
                name: format!("b{i}"),
                parent: if i == 0 { None } else { Some(i - 1) },
                head: [2.0 * i as f64, 0.0, 0.0],
                radius: 0.05,
                part: BodyPart::Torso,
            })
            .collect();
        let rig = Rig::new(bones).unwrap();
        let mid = (rig.head(1) + rig.tail(1)) / 2.0 + Vector3::new(0.0, 0.05, 0.0);
        let w = capsule_weights(&rig, &mid);
        // hand evaluation: own bone at 0.05 m, others ≥ 1.0 m away
        let own = 0.05f64.powi(-2);
        let others: f64 = [1.0f64, 1.0, 3.0].iter().map(|d: &f64| (d * d + 0.05 * 0.05).powi(-1)).sum();
        assert!(w[1] > 0.99);
        assert!((w[1] - own / (own + others)).abs() < 1e-3);
    }
}
