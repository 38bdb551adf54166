use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SceneSpec;
use crate::geometry::{add, scale, CameraFrame, Extrinsics, Intrinsics, Point3};

const FLOOR_GRAY: f64 = 0.35;
const WALL_GRAY: f64 = 0.55;
const CEILING_GRAY: f64 = 0.75;

/// Ring of cameras at fixed height looking at the room center.
#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Horizontal distance from the room center, meters.
    pub radius: f64,
    pub camera_height: f64,
    pub target_height: f64,
    /// Uniform azimuth jitter half-width, radians.
    pub azimuth_noise: f64,
    /// Uniform position/target jitter half-width, meters.
    pub position_noise: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            num_views: 4,
            width: 64,
            height: 64,
            focal: 36.0,
            radius: 2.6,
            camera_height: 2.2,
            target_height: 0.3,
            azimuth_noise: 0.15,
            position_noise: 0.1,
        }
    }
}

impl RigConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Camera poses for one scene. Views start at the room's corner directions
/// and are spread evenly in azimuth.
pub fn camera_ring(scene: &SceneSpec, rig: &RigConfig, seed: u64) -> Vec<Extrinsics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = scene.room.center();
    let n = rig.num_views.max(1);
    (0..n)
        .map(|i| {
            let az =
                std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / n as f64 + rng.gen_range(-rig.azimuth_noise..=rig.azimuth_noise);
            let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-rig.position_noise..=rig.position_noise);
            let eye = [
                center[0] + rig.radius * az.cos() + jitter(&mut rng),
                center[1] + rig.radius * az.sin() + jitter(&mut rng),
                rig.camera_height + jitter(&mut rng),
            ];
            let target = [center[0] + jitter(&mut rng), center[1] + jitter(&mut rng), rig.target_height];
            Extrinsics::look_at(eye, target, [0.0, 0.0, 1.0]).expect("camera not looking straight down")
        })
        .collect()
}

/// Nearest surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter: the hit is `origin + t * dir`.
    pub t: f64,
    pub point: Point3,
    /// Object id, or `None` for a room surface.
    pub object: Option<usize>,
    pub color: [f64; 3],
}

/// Casts `origin + t * dir` against every object box (slab test) and the
/// enclosing room. `origin` must lie inside the room and outside all objects.
pub fn trace_ray(scene: &SceneSpec, origin: Point3, dir: Point3) -> Hit {
    let room = &scene.room;
    let mut t_exit = f64::INFINITY;
    let mut exit_axis = 2;
    for i in 0..3 {
        if dir[i] == 0.0 {
            continue;
        }
        let bound = if dir[i] > 0.0 { room.max[i] } else { room.min[i] };
        let t = (bound - origin[i]) / dir[i];
        if t < t_exit {
            t_exit = t;
            exit_axis = i;
        }
    }
    let gray = match exit_axis {
        2 if dir[2] < 0.0 => FLOOR_GRAY,
        2 => CEILING_GRAY,
        _ => WALL_GRAY,
    };
    let mut best = (t_exit, None, [gray; 3]);
    for o in &scene.objects {
        if let Some(t) = o.bbox.ray_entry(origin, dir) {
            if t < best.0 {
                best = (t, Some(o.id), o.color);
            }
        }
    }
    Hit {
        t: best.0,
        point: add(origin, scale(dir, best.0)),
        object: best.1,
        color: best.2,
    }
}

/// Raycasts one RGB-D frame per pose. The world ray through pixel `(u, v)` is
/// `R K^-1 (u, v, 1)`, whose camera-frame z is 1, so the hit parameter is the
/// z-depth directly.
pub fn render_views(scene: &SceneSpec, poses: &[Extrinsics], intrinsics: &Intrinsics) -> Vec<CameraFrame> {
    poses
        .iter()
        .map(|pose| {
            let (w, h) = (intrinsics.width, intrinsics.height);
            let mut color = Vec::with_capacity(w * h * 3);
            let mut depth = Vec::with_capacity(w * h);
            for v in 0..h {
                for u in 0..w {
                    let cam = intrinsics.unproject(u as f64, v as f64);
                    let dir = sub_origin(pose.cam_to_world(cam), pose.translation);
                    let hit = trace_ray(scene, pose.translation, dir);
                    depth.push(hit.t);
                    color.extend(hit.color.iter().map(|c| (c * 255.0).round() as u8));
                }
            }
            CameraFrame {
                color,
                depth,
                intrinsics: *intrinsics,
                extrinsics: *pose,
            }
        })
        .collect()
}

fn sub_origin(p: Point3, o: Point3) -> Point3 {
    [p[0] - o[0], p[1] - o[1], p[2] - o[2]]
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneObject};
    use super::*;
    use crate::geometry::{distance, Aabb};

    /// Independent oracle: intersect every face plane and keep the nearest
    /// in-rectangle hit.
    fn face_hit(b: &Aabb, o: Point3, d: Point3) -> Option<f64> {
        let mut best: Option<f64> = None;
        for axis in 0..3 {
            if d[axis] == 0.0 {
                continue;
            }
            for plane in [b.min[axis], b.max[axis]] {
                let t = (plane - o[axis]) / d[axis];
                if t <= 0.0 {
                    continue;
                }
                let p = add(o, scale(d, t));
                let inside = (0..3)
                    .filter(|&k| k != axis)
                    .all(|k| p[k] >= b.min[k] - 1e-12 && p[k] <= b.max[k] + 1e-12);
                if inside && best.is_none_or(|x| t < x) {
                    best = Some(t);
                }
            }
        }
        best
    }

    fn oracle_point(scene: &SceneSpec, o: Point3, d: Point3) -> Point3 {
        let mut t = face_hit(&scene.room, o, d).expect("closed room");
        for ob in &scene.objects {
            if let Some(s) = face_hit(&ob.bbox, o, d) {
                t = t.min(s);
            }
        }
        add(o, scale(d, t))
    }

    #[test]
    fn rendered_depth_backprojects_to_hit_points() {
        let scene = generate_scene(21, 8, [6.0, 6.0, 2.5]).unwrap();
        let rig = RigConfig::default();
        let poses = camera_ring(&scene, &rig, 4);
        let frames = render_views(&scene, &poses, &rig.intrinsics());
        let mut worst = 0.0_f64;
        for f in &frames {
            for v in 0..f.height() {
                for u in 0..f.width() {
                    let p = f.backproject_pixel(u, v).unwrap();
                    let o = f.extrinsics.translation;
                    let d = sub_origin(f.extrinsics.cam_to_world(f.intrinsics.unproject(u as f64, v as f64)), o);
                    worst = worst.max(distance(p, oracle_point(&scene, o, d)));
                }
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn box_filling_view_is_flat_and_uniform() {
        let bbox = Aabb {
            min: [-2.0, 1.0, 0.0],
            max: [2.0, 1.5, 2.0],
        };
        let scene = SceneSpec {
            seed: 0,
            room: Aabb {
                min: [-3.0, -3.0, 0.0],
                max: [3.0, 3.0, 2.5],
            },
            objects: vec![SceneObject {
                id: 0,
                category: 0,
                bbox,
                color: [0.2, 0.4, 0.6],
            }],
        };
        // looking along +y from y = 0, 1 m from the front face
        let pose = Extrinsics::look_at([0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]).unwrap();
        let k = Intrinsics::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap();
        let f = &render_views(&scene, &[pose], &k)[0];
        assert!(f.depth.iter().all(|d| (d - 1.0).abs() < 1e-12));
        assert!(f.color.chunks(3).all(|c| c == [51, 102, 153]));
    }

    #[test]
    fn empty_room_depth_matches_walls() {
        let scene = SceneSpec {
            seed: 0,
            room: Aabb {
                min: [-3.0, -3.0, 0.0],
                max: [3.0, 3.0, 2.5],
            },
            objects: vec![],
        };
        let pose = Extrinsics::look_at([0.0, 0.0, 1.25], [1.0, 0.0, 1.25], [0.0, 0.0, 1.0]).unwrap();
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let f = &render_views(&scene, &[pose], &k)[0];
        for v in 0..8 {
            for u in 0..8 {
                // camera faces the x = 3 wall; a ray with z-depth d reaches x = d
                let dx = (u as f64 - 3.5) / 8.0;
                let dy = (v as f64 - 3.5) / 8.0;
                let t_wall: f64 = 3.0;
                let t_side = 3.0 / dx.abs();
                let t_cap = 1.25 / dy.abs();
                let want = t_wall.min(t_side).min(t_cap);
                assert!((f.depth_at(u, v) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cameras_see_the_room_from_above_objects() {
        for seed in 0..20 {
            let scene = generate_scene(seed, 8, [6.0, 6.0, 2.5]).unwrap();
            for p in camera_ring(&scene, &RigConfig::default(), seed) {
                assert!(scene.room.contains(p.translation));
                assert!(scene.objects.iter().all(|o| !o.bbox.contains(p.translation)));
            }
        }
    }
}
