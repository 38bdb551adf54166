//! Template referring expressions with world-frame relation semantics:
//! left = -x, right = +x, in front = -y, behind = +y.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SceneObject, SceneSpec, CATEGORIES};
use crate::geometry::Point3;

/// Directional relations need the target this far past the anchor, and
/// distractors this far on the other side, meters.
const SIDE_MARGIN: f64 = 0.2;
/// Distance-ranked relations need this gap between the best and runner-up.
const RANK_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    NearestTo,
    FarthestFrom,
    Between,
    ClosestToWall,
}

impl Relation {
    pub const ALL: [Relation; 8] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::InFrontOf,
        Relation::Behind,
        Relation::NearestTo,
        Relation::FarthestFrom,
        Relation::Between,
        Relation::ClosestToWall,
    ];

    pub fn num_anchors(self) -> usize {
        match self {
            Relation::Between => 2,
            Relation::ClosestToWall => 0,
            _ => 1,
        }
    }

    fn phrase(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::InFrontOf => &["in", "front", "of"],
            Relation::Behind => &["behind"],
            Relation::NearestTo => &["nearest", "to"],
            Relation::FarthestFrom => &["farthest", "from"],
            Relation::Between => &["between"],
            Relation::ClosestToWall => &["closest", "to"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Uniqueness {
    Unique,
    Multiple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub tokens: Vec<String>,
    pub relation: Relation,
    pub anchors: Vec<usize>,
    pub target_id: usize,
    pub uniqueness: Uniqueness,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("no relation singles out any candidate target")]
    NoUnambiguousQuery,
    #[error("query references unknown object {0}")]
    UnknownObject(usize),
    #[error("query does not single out its target")]
    Ambiguous,
}

/// Function words and relation words; category names follow at the end.
pub const QUERY_VOCAB: [&str; 16] = [
    "the", "left", "of", "right", "in", "front", "behind", "nearest", "to", "farthest", "from", "between", "and", "closest", "wall", "<pad>",
];

fn center(o: &SceneObject) -> Point3 {
    o.bbox.center()
}

fn planar_distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn wall_distance(scene: &SceneSpec, o: &SceneObject) -> f64 {
    let r = &scene.room;
    let b = &o.bbox;
    (b.min[0] - r.min[0])
        .min(r.max[0] - b.max[0])
        .min(b.min[1] - r.min[1])
        .min(r.max[1] - b.max[1])
}

/// Signed "how strongly" score for the directional and betweenness relations:
/// positive means the relation holds by that many meters.
fn side_score(rel: Relation, o: Point3, anchors: &[Point3]) -> f64 {
    match rel {
        Relation::LeftOf => anchors[0][0] - o[0],
        Relation::RightOf => o[0] - anchors[0][0],
        Relation::InFrontOf => anchors[0][1] - o[1],
        Relation::Behind => o[1] - anchors[0][1],
        Relation::Between => {
            // inside the slab spanned by the two anchors along their axis,
            // and close to the connecting segment
            let (a, b) = (anchors[0], anchors[1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt();
            if len == 0.0 {
                return f64::NEG_INFINITY;
            }
            let u = [ab[0] / len, ab[1] / len];
            let s = (o[0] - a[0]) * u[0] + (o[1] - a[1]) * u[1];
            let off = ((o[0] - a[0]) * u[1] - (o[1] - a[1]) * u[0]).abs();
            let along = s.min(len - s);
            along.min(len / 3.0 - off)
        }
        _ => unreachable!("not a side relation"),
    }
}

/// Whether `target` satisfies `rel` with respect to `anchors`, and every
/// other object of its category clearly does not.
pub fn relation_holds(scene: &SceneSpec, rel: Relation, target: usize, anchors: &[usize]) -> Result<bool, QueryError> {
    let get = |id: usize| scene.object(id).ok_or(QueryError::UnknownObject(id));
    let t = get(target)?;
    let anchor_pts: Vec<Point3> = anchors.iter().map(|&a| get(a).map(center)).collect::<Result<_, _>>()?;
    if anchor_pts.len() != rel.num_anchors() || anchors.contains(&target) {
        return Ok(false);
    }
    let rivals: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.category == t.category && o.id != target).collect();
    let ok = match rel {
        Relation::LeftOf | Relation::RightOf | Relation::InFrontOf | Relation::Behind | Relation::Between => {
            side_score(rel, center(t), &anchor_pts) > SIDE_MARGIN && rivals.iter().all(|r| side_score(rel, center(r), &anchor_pts) < -SIDE_MARGIN)
        }
        Relation::NearestTo | Relation::FarthestFrom => {
            let sign = if rel == Relation::NearestTo { 1.0 } else { -1.0 };
            let key = |o: &SceneObject| sign * planar_distance(center(o), anchor_pts[0]);
            rivals.iter().all(|r| key(r) - key(t) > RANK_MARGIN)
        }
        Relation::ClosestToWall => rivals.iter().all(|r| wall_distance(scene, r) - wall_distance(scene, t) > RANK_MARGIN),
    };
    Ok(ok)
}

fn render_tokens(scene: &SceneSpec, rel: Relation, target: usize, anchors: &[usize]) -> Vec<String> {
    let name = |id: usize| CATEGORIES[scene.object(id).expect("known id").category].name.to_string();
    let mut toks = vec!["the".to_string(), name(target)];
    toks.extend(rel.phrase().iter().map(|s| s.to_string()));
    match rel {
        Relation::ClosestToWall => toks.extend(["the".into(), "wall".into()]),
        Relation::Between => {
            toks.extend(["the".into(), name(anchors[0]), "and".into(), "the".into(), name(anchors[1])]);
        }
        _ => toks.extend(["the".into(), name(anchors[0])]),
    }
    toks
}

/// Re-checks an emitted query against its scene.
pub fn verify_query(scene: &SceneSpec, q: &Query) -> Result<(), QueryError> {
    let unique_anchor = q
        .anchors
        .iter()
        .all(|&a| scene.object(a).is_some_and(|o| scene.category_count(o.category) == 1));
    if unique_anchor && relation_holds(scene, q.relation, q.target_id, &q.anchors)? {
        Ok(())
    } else {
        Err(QueryError::Ambiguous)
    }
}

/// Draws a target, relation and anchors such that the relation picks out the
/// target among all objects of its category. Anchors always have a category
/// that occurs once in the scene. Scenes with a repeated category draw the
/// target from a repeated category.
pub fn make_query(scene: &SceneSpec, seed: u64) -> Result<Query, QueryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let repeated: Vec<usize> = scene
        .objects
        .iter()
        .filter(|o| scene.category_count(o.category) > 1)
        .map(|o| o.id)
        .collect();
    let mut targets = if repeated.is_empty() {
        scene.objects.iter().map(|o| o.id).collect()
    } else {
        repeated
    };
    targets.shuffle(&mut rng);
    let singles: Vec<usize> = scene
        .objects
        .iter()
        .filter(|o| scene.category_count(o.category) == 1)
        .map(|o| o.id)
        .collect();

    for &target in &targets {
        let mut rels = Relation::ALL;
        rels.shuffle(&mut rng);
        for rel in rels {
            let mut anchors: Vec<usize> = singles.iter().copied().filter(|&a| a != target).collect();
            anchors.shuffle(&mut rng);
            let candidates: Vec<Vec<usize>> = match rel.num_anchors() {
                0 => vec![vec![]],
                1 => anchors.iter().map(|&a| vec![a]).collect(),
                _ => anchors
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &a)| anchors[i + 1..].iter().map(move |&b| vec![a, b]))
                    .collect(),
            };
            for anchor_set in candidates {
                if relation_holds(scene, rel, target, &anchor_set)? {
                    let multiple = scene.category_count(scene.object(target).expect("target").category) > 1;
                    return Ok(Query {
                        tokens: render_tokens(scene, rel, target, &anchor_set),
                        relation: rel,
                        anchors: anchor_set,
                        target_id: target,
                        uniqueness: if multiple { Uniqueness::Multiple } else { Uniqueness::Unique },
                    });
                }
            }
        }
    }
    Err(QueryError::NoUnambiguousQuery)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneObject};
    use super::*;
    use crate::geometry::Aabb;

    fn obj(id: usize, category: usize, cx: f64, cy: f64) -> SceneObject {
        SceneObject {
            id,
            category,
            bbox: Aabb::from_center_size([cx, cy, 0.4], [0.5, 0.5, 0.8]),
            color: [0.5; 3],
        }
    }

    fn room(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            seed: 0,
            room: Aabb {
                min: [-3.0, -3.0, 0.0],
                max: [3.0, 3.0, 2.5],
            },
            objects,
        }
    }

    const CHAIR: usize = 0;
    const TABLE: usize = 1;

    #[test]
    fn chair_left_of_table() {
        let s = room(vec![obj(0, CHAIR, -1.5, 0.0), obj(1, TABLE, 1.0, 0.0)]);
        assert!(relation_holds(&s, Relation::LeftOf, 0, &[1]).unwrap());
        let q = Query {
            tokens: render_tokens(&s, Relation::LeftOf, 0, &[1]),
            relation: Relation::LeftOf,
            anchors: vec![1],
            target_id: 0,
            uniqueness: Uniqueness::Unique,
        };
        assert_eq!(q.tokens.join(" "), "the chair left of the table");
        assert!(verify_query(&s, &q).is_ok());
    }

    #[test]
    fn nearest_of_two_chairs() {
        let s = room(vec![obj(0, CHAIR, 0.0, 0.0), obj(1, CHAIR, 2.0, 2.0), obj(2, TABLE, 0.8, 0.0)]);
        assert!(relation_holds(&s, Relation::NearestTo, 0, &[2]).unwrap());
        assert!(!relation_holds(&s, Relation::NearestTo, 1, &[2]).unwrap());
        let q = make_query(&s, 0).unwrap();
        assert_eq!(q.uniqueness, Uniqueness::Multiple);
        assert!(verify_query(&s, &q).is_ok());
    }

    #[test]
    fn two_chairs_left_of_anchor_is_ambiguous() {
        let s = room(vec![obj(0, CHAIR, -2.0, 0.0), obj(1, CHAIR, -1.0, 1.5), obj(2, TABLE, 1.0, 0.0)]);
        assert!(!relation_holds(&s, Relation::LeftOf, 0, &[2]).unwrap());
        assert!(!relation_holds(&s, Relation::LeftOf, 1, &[2]).unwrap());
    }

    #[test]
    fn tokens_in_vocab() {
        for seed in 0..200 {
            let s = generate_scene(seed, 8, [6.0, 6.0, 2.5]).unwrap();
            if let Ok(q) = make_query(&s, seed) {
                for t in &q.tokens {
                    assert!(QUERY_VOCAB.contains(&t.as_str()) || CATEGORIES.iter().any(|c| c.name == t));
                }
            }
        }
    }

    #[test]
    fn emitted_queries_are_sound_and_mixed() {
        let (mut unique, mut multiple, mut skipped) = (0, 0, 0);
        for seed in 0..1000 {
            let s = generate_scene(seed, 8, [6.0, 6.0, 2.5]).unwrap();
            match make_query(&s, seed + 1) {
                Ok(q) => {
                    verify_query(&s, &q).unwrap();
                    let t = s.object(q.target_id).unwrap();
                    let same: Vec<_> = s.objects.iter().filter(|o| o.category == t.category).collect();
                    let satisfied = same.iter().filter(|o| relation_holds(&s, q.relation, o.id, &q.anchors).unwrap()).count();
                    assert_eq!(satisfied, 1);
                    match q.uniqueness {
                        Uniqueness::Unique => unique += 1,
                        Uniqueness::Multiple => multiple += 1,
                    }
                }
                Err(_) => skipped += 1,
            }
        }
        let frac = multiple as f64 / (unique + multiple) as f64;
        assert!((0.4..=0.6).contains(&frac), "multiple fraction {frac}, skipped {skipped}");
    }
}
