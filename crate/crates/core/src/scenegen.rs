//! Deterministic synthetic worlds: a grid of 30 × 30 m cells holding
//! labelled object instances, and template hints describing target poses.
//!
//! Every cell draws from its own ChaCha stream keyed by `(seed, cell_id)`,
//! so a cell's content does not depend on how many cells precede it.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cloud::{ObjectInstance, Submap, CELL_SIDE, CLASSES};
use crate::error::{Error, Result};
use crate::text::{tokenize, TextQuery};

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.8, 0.1, 0.1]),
    ("green", [0.1, 0.6, 0.2]),
    ("blue", [0.1, 0.2, 0.8]),
    ("yellow", [0.9, 0.8, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.5, 0.5, 0.5]),
    ("brown", [0.5, 0.3, 0.1]),
];

/// Sector names counter-clockwise from east, 45° apart.
pub const DIRECTIONS: [&str; 8] = [
    "east", "north-east", "north", "north-west", "west", "south-west", "south", "south-east",
];

/// Below this distance a hint says "just", at or above [`FAR`] it says "well".
pub const NEAR: f64 = 4.0;
pub const FAR: f64 = 10.0;

/// Nearest palette entry by squared RGB distance.
pub fn color_name(rgb: [f64; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| dist2(a.1, rgb).total_cmp(&dist2(b.1, rgb)))
        .map(|p| p.0)
        .unwrap()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Compass sector of the bearing from `from` to `to`; +x east, +y north.
pub fn direction(from: [f64; 2], to: [f64; 2]) -> &'static str {
    let ang = (to[1] - from[1]).atan2(to[0] - from[0]);
    let sector = ((ang / (PI / 4.0)).round() as i64).rem_euclid(8);
    DIRECTIONS[sector as usize]
}

pub fn qualifier(distance: f64) -> Option<&'static str> {
    if distance < NEAR {
        Some("just")
    } else if distance < FAR {
        None
    } else {
        Some("well")
    }
}

pub fn hint_sentence(qual: Option<&str>, dir: &str, color: &str, class: &str) -> String {
    match qual {
        Some(q) => format!("The pose is {q} {dir} of a {color} {class}."),
        None => format!("The pose is {dir} of a {color} {class}."),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    /// Cells per side.
    pub grid: usize,
    pub stride: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_points: usize,
    pub max_points: usize,
    /// Minimum planar distance between instance centroids.
    pub min_separation: f64,
    pub hints_per_query: usize,
    pub queries_per_cell: usize,
    /// Train, val, test.
    pub fractions: [f64; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            grid: 16,
            stride: 10.0,
            min_instances: 6,
            max_instances: 10,
            min_points: 24,
            max_points: 48,
            min_separation: 3.0,
            hints_per_query: 6,
            queries_per_cell: 8,
            fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid == 0 {
            return bad("grid must be positive");
        }
        if !(self.stride > 0.0 && self.stride <= CELL_SIDE) {
            return bad("stride must be in (0, 30]");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > 64 {
            return bad("instance range must satisfy 1 <= min <= max <= 64");
        }
        if self.min_points < crate::cloud::MIN_POINTS || self.min_points > self.max_points {
            return bad("point range must satisfy 8 <= min <= max");
        }
        if self.hints_per_query == 0
            || self.hints_per_query > crate::text::MAX_HINTS
            || self.hints_per_query > self.min_instances
        {
            return bad("hints per query must be in 1..=min(12, min_instances)");
        }
        if self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// World-frame center of a cell; `cell_id = gy · grid + gx`.
    pub fn center(&self, cell_id: u32) -> [f64; 2] {
        let (gx, gy) = (cell_id as usize % self.grid, cell_id as usize / self.grid);
        [
            gx as f64 * self.stride + CELL_SIDE / 2.0,
            gy as f64 * self.stride + CELL_SIDE / 2.0,
        ]
    }

    /// The cell whose center is nearest `xy`; ties go to the lowest id.
    pub fn nearest_cell(&self, xy: [f64; 2]) -> u32 {
        (0..self.cells() as u32)
            .min_by(|&a, &b| {
                let (ca, cb) = (self.center(a), self.center(b));
                let da = (ca[0] - xy[0]).powi(2) + (ca[1] - xy[1]).powi(2);
                let db = (cb[0] - xy[0]).powi(2) + (cb[1] - xy[1]).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap()
    }
}

/// Submaps and queries with their split labels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub submaps: Vec<Submap>,
    pub submap_splits: Vec<Split>,
    pub queries: Vec<TextQuery>,
    pub query_splits: Vec<Split>,
}

impl Dataset {
    pub fn submap(&self, cell_id: u32) -> Option<&Submap> {
        self.submaps.iter().find(|s| s.cell_id == cell_id)
    }

    pub fn queries_in(&self, split: Split) -> Vec<&TextQuery> {
        self.queries
            .iter()
            .zip(&self.query_splits)
            .filter(|(_, &s)| s == split)
            .map(|(q, _)| q)
            .collect()
    }

    /// Only the records of one split.
    pub fn subset(&self, split: Split) -> Dataset {
        let mut out = Dataset::default();
        for (s, &sp) in self.submaps.iter().zip(&self.submap_splits) {
            if sp == split {
                out.submaps.push(s.clone());
                out.submap_splits.push(sp);
            }
        }
        for (q, &sp) in self.queries.iter().zip(&self.query_splits) {
            if sp == split {
                out.queries.push(q.clone());
                out.query_splits.push(sp);
            }
        }
        out
    }

    /// Concatenation in argument order.
    pub fn merge(parts: &[Dataset]) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.submaps.extend(p.submaps.iter().cloned());
            out.submap_splits.extend(&p.submap_splits);
            out.queries.extend(p.queries.iter().cloned());
            out.query_splits.extend(&p.query_splits);
        }
        out
    }
}

/// Row-major contiguous blocks: the first `round(f_train · M)` cells train,
/// the next `round(f_val · M)` validate, the rest test.
pub fn split_cells(cells: usize, fractions: [f64; 3]) -> Result<Vec<Split>> {
    let n_train = (fractions[0] * cells as f64).round() as usize;
    let n_val = (fractions[1] * cells as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= cells {
        return Err(Error::Config(format!(
            "{cells} cells cannot be split into three non-empty blocks with fractions {fractions:?}"
        )));
    }
    Ok((0..cells)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect())
}

fn cell_rng(seed: u64, cell_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell_id as u64 + 1);
    rng
}

const HALF: f64 = CELL_SIDE / 2.0;
/// Centroids stay this far inside the cell edge.
const MARGIN: f64 = 3.0;
const PLACEMENT_TRIES: usize = 400;

fn class_shape(class: &str) -> (f64, f64, f64) {
    // (planar spread, height center, height spread)
    match class {
        "building" => (1.6, 4.0, 2.0),
        "tree" => (1.0, 3.0, 1.2),
        "pole" => (0.3, 2.5, 1.2),
        "road" => (1.8, 0.05, 0.05),
        "sign" => (0.4, 2.0, 0.5),
        "vehicle" => (1.0, 0.8, 0.4),
        "terrain" => (1.8, 0.2, 0.2),
        _ => (1.2, 0.6, 0.3),
    }
}

fn generate_submap(cfg: &WorldConfig, cell_id: u32, rng: &mut ChaCha8Rng) -> Result<Submap> {
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let lim = HALF - MARGIN;
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let c = [rng.random_range(-lim..lim), rng.random_range(-lim..lim)];
            let clear = centers
                .iter()
                .all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= cfg.min_separation);
            if clear {
                placed = Some(c);
                break;
            }
        }
        match placed {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::Generation {
                    cell_id,
                    reason: format!("no room for instance {} of {n}", centers.len() + 1),
                })
            }
        }
    }
    let mut instances = Vec::with_capacity(n);
    for (i, c) in centers.iter().enumerate() {
        let class = CLASSES[rng.random_range(0..CLASSES.len())];
        let (name, rgb) = PALETTE[rng.random_range(0..PALETTE.len())];
        debug_assert_eq!(color_name(rgb), name);
        let (spread, hz, sz) = class_shape(class);
        let np = rng.random_range(cfg.min_points..=cfg.max_points);
        let planar = Normal::new(0.0, spread).expect("positive spread");
        let vertical = Normal::new(hz, sz).expect("positive spread");
        let points = (0..np)
            .map(|_| {
                let x: f64 = c[0] + planar.sample(rng);
                let y: f64 = c[1] + planar.sample(rng);
                let z: f64 = vertical.sample(rng);
                [x.clamp(-HALF, HALF), y.clamp(-HALF, HALF), z.clamp(0.0, 12.0)]
            })
            .collect();
        instances.push(ObjectInstance::from_points(i as u32, class, rgb, points));
    }
    Ok(Submap {
        cell_id,
        center_xy: cfg.center(cell_id),
        instances,
    })
}

/// Hints for a target at cell-local `local`, from the nearest instances.
pub fn describe(submap: &Submap, local: [f64; 2], hints: usize) -> Vec<String> {
    let mut by_dist: Vec<(f64, &ObjectInstance)> = submap
        .instances
        .iter()
        .map(|i| {
            let d = ((i.centroid[0] - local[0]).powi(2) + (i.centroid[1] - local[1]).powi(2)).sqrt();
            (d, i)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.instance_id.cmp(&b.1.instance_id)));
    by_dist
        .iter()
        .take(hints)
        .map(|(d, inst)| {
            let dir = direction([inst.centroid[0], inst.centroid[1]], local);
            hint_sentence(qualifier(*d), dir, color_name(inst.color_rgb), &inst.class_label)
        })
        .collect()
}

/// Parsed slots of a template hint: (qualifier, direction, color, class).
pub fn parse_hint(hint: &str) -> Option<(Option<String>, String, String, String)> {
    let t = tokenize(hint);
    let t: Vec<&str> = t.iter().map(String::as_str).collect();
    if t.len() < 7 || t[..3] != ["the", "pose", "is"] {
        return None;
    }
    let mut rest = &t[3..];
    let qual = match rest.first() {
        Some(&q @ ("just" | "well")) => {
            rest = &rest[1..];
            Some(q.to_string())
        }
        _ => None,
    };
    let of = rest.iter().position(|&w| w == "of")?;
    let dir = rest[..of].join("-");
    if rest.len() != of + 4 || rest[of + 1] != "a" {
        return None;
    }
    Some((qual, dir, rest[of + 2].to_string(), rest[of + 3].to_string()))
}

/// True when some instance of the stated color and class sits at the
/// stated bearing sector and distance band from the query's target.
pub fn hint_consistent(submap: &Submap, query: &TextQuery, hint: &str) -> bool {
    let Some((qual, dir, color, class)) = parse_hint(hint) else {
        return false;
    };
    let local = [
        query.target_xy[0] - submap.center_xy[0],
        query.target_xy[1] - submap.center_xy[1],
    ];
    submap.instances.iter().any(|i| {
        let d = ((i.centroid[0] - local[0]).powi(2) + (i.centroid[1] - local[1]).powi(2)).sqrt();
        color_name(i.color_rgb) == color
            && i.class_label == class
            && direction([i.centroid[0], i.centroid[1]], local) == dir
            && qualifier(d).map(str::to_string) == qual
    })
}

/// Generates every cell and its queries; output is ordered by cell id.
pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let splits = split_cells(cfg.cells(), cfg.fractions)?;
    let mut ds = Dataset::default();
    let core = cfg.stride / 2.0;
    for cell in 0..cfg.cells() as u32 {
        let mut rng = cell_rng(cfg.seed, cell);
        let submap = generate_submap(cfg, cell, &mut rng)?;
        for k in 0..cfg.queries_per_cell {
            // the stride square around the center is exactly the set of
            // points whose nearest center is this cell
            let local = loop {
                let l = [rng.random_range(-core..core), rng.random_range(-core..core)];
                let w = [submap.center_xy[0] + l[0], submap.center_xy[1] + l[1]];
                if cfg.nearest_cell(w) == cell {
                    break l;
                }
            };
            ds.queries.push(TextQuery {
                query_id: cell * cfg.queries_per_cell as u32 + k as u32,
                cell_id: cell,
                target_xy: [submap.center_xy[0] + local[0], submap.center_xy[1] + local[1]],
                hints: describe(&submap, local, cfg.hints_per_query),
            });
            ds.query_splits.push(splits[cell as usize]);
        }
        ds.submaps.push(submap);
        ds.submap_splits.push(splits[cell as usize]);
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct SubmapRecord {
    kind: String,
    cell_id: u32,
    center: [f64; 2],
    split: Split,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: u32,
    class: String,
    color: [f64; 3],
    centroid: [f64; 3],
    points: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    kind: String,
    query_id: u32,
    cell_id: u32,
    target_xy: [f64; 2],
    hints: Vec<String>,
    split: Split,
}

/// One JSON object per line: submaps first, then queries.
pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for (s, &split) in ds.submaps.iter().zip(&ds.submap_splits) {
        let rec = SubmapRecord {
            kind: "submap".into(),
            cell_id: s.cell_id,
            center: s.center_xy,
            split,
            instances: s
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    instance_id: i.instance_id,
                    class: i.class_label.clone(),
                    color: i.color_rgb,
                    centroid: i.centroid,
                    points: i.points.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    for (q, &split) in ds.queries.iter().zip(&ds.query_splits) {
        let rec = QueryRecord {
            kind: "query".into(),
            query_id: q.query_id,
            cell_id: q.cell_id,
            target_xy: q.target_xy,
            hints: q.hints.clone(),
            split,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let schema = |msg: String| Error::Schema { line: line_no, msg };
        match v.get("kind").and_then(Value::as_str) {
            Some("submap") => {
                let r: SubmapRecord = serde_json::from_value(v).map_err(|e| schema(e.to_string()))?;
                ds.submaps.push(Submap {
                    cell_id: r.cell_id,
                    center_xy: r.center,
                    instances: r
                        .instances
                        .into_iter()
                        .map(|i| ObjectInstance {
                            instance_id: i.instance_id,
                            class_label: i.class,
                            color_rgb: i.color,
                            centroid: i.centroid,
                            points: i.points,
                        })
                        .collect(),
                });
                ds.submap_splits.push(r.split);
            }
            Some("query") => {
                let r: QueryRecord = serde_json::from_value(v).map_err(|e| schema(e.to_string()))?;
                ds.queries.push(TextQuery {
                    query_id: r.query_id,
                    cell_id: r.cell_id,
                    target_xy: r.target_xy,
                    hints: r.hints,
                });
                ds.query_splits.push(r.split);
            }
            Some(other) => return Err(schema(format!("unknown record kind {other:?}"))),
            None => return Err(schema("record has no string `kind`".into())),
        }
    }
    Ok(ds)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub file: String,
    pub sha256: String,
    pub submaps: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub grid: usize,
    pub world_config: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and the manifest.
pub fn write_split_files(dir: &Path, ds: &Dataset, cfg: &WorldConfig, world_config: String) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for split in Split::ALL {
        let part = ds.subset(split);
        let mut bytes = Vec::new();
        write_dataset(&part, &mut bytes)?;
        let file = format!("{}.jsonl", split.name());
        std::fs::write(dir.join(&file), &bytes)?;
        files.push(ManifestEntry {
            split,
            file,
            sha256: sha256_hex(&bytes),
            submaps: part.submaps.len(),
            queries: part.queries.len(),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        grid: cfg.grid,
        world_config,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Loads all splits, verifying each file against the manifest digest.
/// Returns the data and the manifest's own digest.
pub fn load_split_files(dir: &Path) -> Result<(Dataset, String)> {
    let mpath = dir.join(MANIFEST);
    let mbytes = std::fs::read(&mpath).map_err(|_| Error::Dependency(mpath.clone()))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    let mut parts = Vec::new();
    for e in &manifest.files {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path).map_err(|_| Error::Dependency(path.clone()))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Provenance(format!("{} does not match its manifest digest", path.display())));
        }
        parts.push(read_dataset(bytes.as_slice())?);
    }
    Ok((Dataset::merge(&parts), sha256_hex(&mbytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            grid: 4,
            queries_per_cell: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn compass_examples() {
        assert_eq!(direction([10.0, 10.0], [20.0, 10.0]), "east");
        assert_eq!(direction([0.0, 0.0], [0.0, 5.0]), "north");
        assert_eq!(direction([0.0, 0.0], [-3.0, -3.0]), "south-west");
        assert_eq!(direction([0.0, 0.0], [1.0, -0.1]), "east");
        assert_eq!(direction([0.0, 0.0], [-1.0, 0.1]), "west");
    }

    #[test]
    fn split_arithmetic() {
        let s = split_cells(100, [0.6, 0.2, 0.2]).unwrap();
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (60, 20, 20));
        let s = split_cells(256, [0.6, 0.2, 0.2]).unwrap();
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (154, 51, 51));
        assert!(matches!(split_cells(1, [0.6, 0.2, 0.2]), Err(Error::Config(_))));
    }

    #[test]
    fn generated_world_is_consistent() {
        let cfg = small();
        let ds = generate_world(&cfg).unwrap();
        assert_eq!(ds.submaps.len(), 16);
        assert_eq!(ds.queries.len(), 48);
        for q in &ds.queries {
            let s = ds.submap(q.cell_id).unwrap();
            assert_eq!(cfg.nearest_cell(q.target_xy), q.cell_id);
            assert_eq!(q.hints.len(), cfg.hints_per_query);
            for h in &q.hints {
                assert!(hint_consistent(s, q, h), "{h}");
            }
        }
        for s in &ds.submaps {
            for i in &s.instances {
                assert!(i.points.len() >= 8);
                assert!(i.points.iter().all(|p| p[0].abs() <= HALF && p[1].abs() <= HALF));
            }
        }
    }

    #[test]
    fn crowded_cell_fails_with_id() {
        let cfg = WorldConfig {
            min_instances: 60,
            max_instances: 60,
            min_separation: 6.0,
            ..small()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Generation { cell_id: 0, .. })));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let ds = generate_world(&small()).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        assert_eq!(read_dataset(bytes.as_slice()).unwrap(), ds);
        let mut empty = Vec::new();
        write_dataset(&Dataset::default(), &mut empty).unwrap();
        assert!(empty.is_empty());
        assert_eq!(read_dataset(empty.as_slice()).unwrap(), Dataset::default());
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let cut = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        assert!(matches!(read_dataset(cut.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let odd = format!("{}\n{{\"kind\":\"road\"}}\n", lines[0]);
        assert!(matches!(read_dataset(odd.as_bytes()), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn parse_hint_examples() {
        assert_eq!(
            parse_hint("The pose is just north-west of a red tree."),
            Some((Some("just".into()), "north-west".into(), "red".into(), "tree".into()))
        );
        assert_eq!(
            parse_hint("The pose is east of a gray building."),
            Some((None, "east".into(), "gray".into(), "building".into()))
        );
        assert_eq!(parse_hint("hello"), None);
    }
}
