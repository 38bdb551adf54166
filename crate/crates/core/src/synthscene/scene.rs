use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Aabb;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place {wanted} objects after {attempts} attempts")]
    Placement { wanted: usize, attempts: usize },
    #[error("need at least 2 objects, got {0}")]
    TooFew(usize),
    #[error("no scene with an unambiguous query after {0} attempts")]
    NoQuery(usize),
}

/// Category name, footprint range (x, y), height range and albedo.
pub struct Category {
    pub name: &'static str,
    pub footprint: ([f64; 2], [f64; 2]),
    pub height: [f64; 2],
    pub color: [f64; 3],
}

pub const CATEGORIES: [Category; 12] = [
    Category {
        name: "chair",
        footprint: ([0.45, 0.6], [0.45, 0.6]),
        height: [0.8, 1.0],
        color: [0.85, 0.20, 0.15],
    },
    Category {
        name: "table",
        footprint: ([0.8, 1.3], [0.6, 0.9]),
        height: [0.7, 0.8],
        color: [0.55, 0.35, 0.15],
    },
    Category {
        name: "sofa",
        footprint: ([1.4, 1.9], [0.8, 0.95]),
        height: [0.8, 0.9],
        color: [0.20, 0.35, 0.80],
    },
    Category {
        name: "bed",
        footprint: ([1.4, 1.9], [1.0, 1.4]),
        height: [0.5, 0.65],
        color: [0.95, 0.90, 0.70],
    },
    Category {
        name: "cabinet",
        footprint: ([0.6, 1.0], [0.4, 0.6]),
        height: [1.0, 1.5],
        color: [0.45, 0.25, 0.45],
    },
    Category {
        name: "lamp",
        footprint: ([0.3, 0.4], [0.3, 0.4]),
        height: [1.2, 1.5],
        color: [0.95, 0.85, 0.10],
    },
    Category {
        name: "desk",
        footprint: ([1.0, 1.4], [0.6, 0.75]),
        height: [0.7, 0.8],
        color: [0.20, 0.60, 0.30],
    },
    Category {
        name: "shelf",
        footprint: ([0.8, 1.2], [0.3, 0.4]),
        height: [1.2, 1.5],
        color: [0.10, 0.75, 0.75],
    },
    Category {
        name: "toilet",
        footprint: ([0.4, 0.5], [0.6, 0.7]),
        height: [0.7, 0.8],
        color: [0.92, 0.92, 0.98],
    },
    Category {
        name: "bathtub",
        footprint: ([1.4, 1.7], [0.7, 0.8]),
        height: [0.5, 0.6],
        color: [0.60, 0.80, 0.95],
    },
    Category {
        name: "television",
        footprint: ([0.8, 1.2], [0.2, 0.3]),
        height: [0.5, 0.8],
        color: [0.08, 0.08, 0.10],
    },
    Category {
        name: "plant",
        footprint: ([0.3, 0.5], [0.3, 0.5]),
        height: [0.6, 1.2],
        color: [0.35, 0.85, 0.10],
    },
];

/// Minimum horizontal gap between neighbouring boxes, meters.
const GAP: f64 = 0.15;
/// Keep-out band along the walls, meters.
const WALL_MARGIN: f64 = 0.1;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room interior; floor at `min[2] = 0`, centered on the origin in x and y.
    pub room: Aabb,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn category_count(&self, category: usize) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }
}

/// Roughly half of all scenes repeat some category.
fn sample_categories(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..CATEGORIES.len()).collect();
    pool.shuffle(rng);
    if n <= 1 || !rng.gen_bool(0.5) {
        return (0..n).map(|i| pool[i % pool.len()]).collect();
    }
    let copies = if rng.gen_bool(0.7) { 2 } else { 3 }.min(n);
    let mut cats = vec![pool[0]; copies];
    let mut next = 1;
    while cats.len() < n {
        cats.push(pool[next % pool.len()]);
        next += 1;
    }
    cats.shuffle(rng);
    cats
}

/// Places `num_objects` non-overlapping floor-standing boxes in a room of
/// `room_size` (x, y, z) meters. Deterministic in `seed`.
pub fn generate_scene(seed: u64, num_objects: usize, room_size: [f64; 3]) -> Result<SceneSpec, SceneError> {
    if num_objects < 2 {
        return Err(SceneError::TooFew(num_objects));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = Aabb {
        min: [-room_size[0] / 2.0, -room_size[1] / 2.0, 0.0],
        max: [room_size[0] / 2.0, room_size[1] / 2.0, room_size[2]],
    };
    let cats = sample_categories(&mut rng, num_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(num_objects);
    let mut attempts = 0;
    for (id, &category) in cats.iter().enumerate() {
        let c = &CATEGORIES[category];
        let mut sx = rng.gen_range(c.footprint.0[0]..=c.footprint.0[1]);
        let mut sy = rng.gen_range(c.footprint.1[0]..=c.footprint.1[1]);
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut sx, &mut sy);
        }
        let sz = rng.gen_range(c.height[0]..=c.height[1]).min(room_size[2] - 0.5);
        let shade = rng.gen_range(-0.05..0.05);
        let color = c.color.map(|v: f64| (v + shade).clamp(0.0, 1.0));
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(SceneError::Placement {
                    wanted: num_objects,
                    attempts: MAX_ATTEMPTS,
                });
            }
            let hx = room.max[0] - WALL_MARGIN - sx / 2.0;
            let hy = room.max[1] - WALL_MARGIN - sy / 2.0;
            if hx <= 0.0 || hy <= 0.0 {
                continue;
            }
            let cx = rng.gen_range(-hx..hx);
            let cy = rng.gen_range(-hy..hy);
            let bbox = Aabb {
                min: [cx - sx / 2.0, cy - sy / 2.0, 0.0],
                max: [cx + sx / 2.0, cy + sy / 2.0, sz],
            };
            let clear = objects.iter().all(|o| {
                bbox.min[0] >= o.bbox.max[0] + GAP
                    || o.bbox.min[0] >= bbox.max[0] + GAP
                    || bbox.min[1] >= o.bbox.max[1] + GAP
                    || o.bbox.min[1] >= bbox.max[1] + GAP
            });
            if clear {
                objects.push(SceneObject { id, category, bbox, color });
                break;
            }
        }
    }
    Ok(SceneSpec { seed, room, objects })
}
