//! JSON-Lines episodes with sidecar binary frame blobs.
//!
//! Each line holds `scene`, `objects`, `frames` (blob paths relative to the
//! `.jsonl` file), `query`, `proposals` and `target_id`. A frame blob is
//!
//! ```text
//! "G3DF"
//! 18 x f64: width, height, fx, fy, cx, cy, rotation (row-major 3x3), translation
//! width*height*3 color bytes
//! width*height x f64 depth
//! ```
//! little-endian throughout.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{verify_query, GroundingEpisode, ObjectProposal, Query, SceneObject, SceneSpec, CATEGORIES, QUERY_VOCAB};
use crate::geometry::{Aabb, CameraFrame, Extrinsics, Intrinsics};

pub const FRAME_MAGIC: &[u8; 4] = b"G3DF";
const HEADER_FLOATS: usize = 18;
const MAX_SIDE: usize = 1 << 13;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("frame blob {path}: {msg}")]
    Blob { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneHeader {
    pub seed: u64,
    pub room: Aabb,
}

/// One serialized line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub scene: SceneHeader,
    pub objects: Vec<SceneObject>,
    pub frames: Vec<String>,
    pub query: Query,
    pub proposals: Vec<ObjectProposal>,
    pub target_id: usize,
}

impl EpisodeRecord {
    /// Structural checks that do not need the frame blobs.
    pub fn validate(&self) -> Result<(), String> {
        if !self.scene.room.is_valid() {
            return Err("invalid room box".into());
        }
        for o in &self.objects {
            if o.category >= CATEGORIES.len() {
                return Err(format!("object {} has unknown category {}", o.id, o.category));
            }
            if !o.bbox.is_valid() {
                return Err(format!("object {} has an invalid box", o.id));
            }
        }
        for p in &self.proposals {
            if p.gt_category >= CATEGORIES.len() {
                return Err(format!("proposal {} has unknown category {}", p.id, p.gt_category));
            }
            if !p.bbox.is_valid() {
                return Err(format!("proposal {} has an invalid box", p.id));
            }
        }
        if self.proposals.is_empty() {
            return Err("no proposals".into());
        }
        if !self.proposals.iter().any(|p| p.id == self.target_id) {
            return Err(format!("target {} not among proposals", self.target_id));
        }
        if self.query.target_id != self.target_id {
            return Err("query target disagrees with target_id".into());
        }
        for t in &self.query.tokens {
            if !QUERY_VOCAB.contains(&t.as_str()) && !CATEGORIES.iter().any(|c| c.name == t) {
                return Err(format!("unknown query token {t:?}"));
            }
        }
        let scene = self.scene_spec();
        if scene.object(self.target_id).is_none() {
            return Err(format!("target {} not in scene", self.target_id));
        }
        verify_query(&scene, &self.query).map_err(|e| e.to_string())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.scene.seed,
            room: self.scene.room,
            objects: self.objects.clone(),
        }
    }
}

pub fn parse_episode_line(line: &str) -> Result<EpisodeRecord, String> {
    let rec: EpisodeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.validate()?;
    Ok(rec)
}

pub fn encode_frame_blob(f: &CameraFrame) -> Vec<u8> {
    let k = &f.intrinsics;
    let e = &f.extrinsics;
    let mut header = vec![k.width as f64, k.height as f64, k.fx, k.fy, k.cx, k.cy];
    header.extend(e.rotation.iter().flatten());
    header.extend(e.translation);
    let mut out = Vec::with_capacity(4 + 8 * HEADER_FLOATS + f.color.len() + 8 * f.depth.len());
    out.extend_from_slice(FRAME_MAGIC);
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&f.color);
    for d in &f.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

fn read_f64(b: &[u8], i: usize) -> f64 {
    f64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"))
}

fn extent(v: f64, what: &str) -> Result<usize, String> {
    if v.fract() != 0.0 || !(1.0..=MAX_SIDE as f64).contains(&v) {
        return Err(format!("{what} {v} is not an integer in 1..={MAX_SIDE}"));
    }
    Ok(v as usize)
}

pub fn decode_frame_blob(bytes: &[u8]) -> Result<CameraFrame, String> {
    let head = 4 + 8 * HEADER_FLOATS;
    if bytes.len() < head {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err("bad magic".into());
    }
    let h: Vec<f64> = (0..HEADER_FLOATS).map(|i| read_f64(bytes, 4 + 8 * i)).collect();
    let (w, ht) = (extent(h[0], "width")?, extent(h[1], "height")?);
    let n = w * ht;
    if bytes.len() != head + 11 * n {
        return Err(format!("expected {} bytes for {w}x{ht}, found {}", head + 11 * n, bytes.len()));
    }
    let intrinsics = Intrinsics::new(h[2], h[3], h[4], h[5], w, ht).map_err(|e| e.to_string())?;
    let rotation = [[h[6], h[7], h[8]], [h[9], h[10], h[11]], [h[12], h[13], h[14]]];
    let extrinsics = Extrinsics::new(rotation, [h[15], h[16], h[17]]).map_err(|e| e.to_string())?;
    if !h[15..18].iter().all(|v| v.is_finite()) {
        return Err("non-finite translation".into());
    }
    let color = bytes[head..head + 3 * n].to_vec();
    let depth = (0..n).map(|i| read_f64(bytes, head + 3 * n + 8 * i)).collect();
    CameraFrame::new(color, depth, intrinsics, extrinsics).map_err(|e| e.to_string())
}

fn frames_dir(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PathBuf::from(format!("{stem}_frames"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `episodes` to the JSON-Lines file at `path`; frame blobs go to a
/// sibling `<stem>_frames/` directory.
pub fn write_dataset(path: &Path, episodes: &[GroundingEpisode]) -> Result<(), DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel_dir = frames_dir(path);
    let abs_dir = base.join(&rel_dir);
    if !episodes.is_empty() {
        fs::create_dir_all(&abs_dir).map_err(io_err(&abs_dir))?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for (i, ep) in episodes.iter().enumerate() {
        let mut frames = Vec::with_capacity(ep.frames.len());
        for (v, f) in ep.frames.iter().enumerate() {
            let rel = rel_dir.join(format!("{i:06}_{v}.bin"));
            let abs = base.join(&rel);
            fs::write(&abs, encode_frame_blob(f)).map_err(io_err(&abs))?;
            frames.push(rel.to_string_lossy().replace('\\', "/"));
        }
        let rec = EpisodeRecord {
            scene: SceneHeader {
                seed: ep.scene.seed,
                room: ep.scene.room,
            },
            objects: ep.scene.objects.clone(),
            frames,
            query: ep.query.clone(),
            proposals: ep.proposals.clone(),
            target_id: ep.target_id,
        };
        let line = serde_json::to_string(&rec).expect("episode serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<GroundingEpisode>, DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_episode_line(&line).map_err(|msg| DatasetError::Line { line: line_no, msg })?;
        let mut frames = Vec::with_capacity(rec.frames.len());
        for rel in &rec.frames {
            if Path::new(rel).is_absolute() || rel.split('/').any(|c| c == "..") {
                return Err(DatasetError::Line {
                    line: line_no,
                    msg: format!("frame path {rel:?} escapes the dataset directory"),
                });
            }
            let abs = base.join(rel);
            let bytes = fs::read(&abs).map_err(io_err(&abs))?;
            frames.push(decode_frame_blob(&bytes).map_err(|msg| DatasetError::Blob { path: abs, msg })?);
        }
        let scene = rec.scene_spec();
        episodes.push(GroundingEpisode {
            scene,
            frames,
            query: rec.query,
            proposals: rec.proposals,
            target_id: rec.target_id,
        });
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_episodes, GenConfig};
    use super::*;

    fn small() -> Vec<GroundingEpisode> {
        let cfg = GenConfig {
            rig: super::super::RigConfig {
                width: 16,
                height: 16,
                focal: 9.0,
                ..Default::default()
            },
            ..Default::default()
        };
        generate_episodes(3, 4, &cfg).unwrap().0
    }

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let eps = small();
        write_dataset(&path, &eps).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), eps);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_dataset(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &small()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"target_id\"", "\"target\"");
        fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_category_rejected() {
        let eps = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &eps[..1]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut rec: EpisodeRecord = serde_json::from_str(text.trim()).unwrap();
        rec.objects[0].category = 99;
        let err = parse_episode_line(&serde_json::to_string(&rec).unwrap()).unwrap_err();
        assert!(err.contains("unknown category"), "{err}");
    }

    #[test]
    fn blob_decoder_rejects_garbage() {
        let f = &small()[0].frames[0];
        let blob = encode_frame_blob(f);
        assert_eq!(&decode_frame_blob(&blob).unwrap(), f);
        assert!(decode_frame_blob(&blob[..blob.len() - 1]).is_err());
        assert!(decode_frame_blob(b"G3DF").is_err());
        let mut bad = blob.clone();
        bad[4..12].copy_from_slice(&1e12f64.to_le_bytes());
        assert!(decode_frame_blob(&bad).is_err());
    }
}
