//! Configuration, stage files and the end-to-end run.
//!
//! Every stage reads the files of the stages before it from the output
//! directory and writes its own:
//!
//! | stage | writes |
//! |---|---|
//! | ingest | `extract.geojson` |
//! | grid | `cells.csv` |
//! | render | `crhd/<col>_<row>.png` |
//! | classify | `probs.csv`, `categories.csv` |
//! | indices | `features.csv` |
//! | vitality | `vitality.csv` |
//! | fit | `fit.json`, `model_baseline.mgbm`, `model_augmented.mgbm` |
//! | analyze | `analysis.json`, `map.geojson`, `kde.csv` |
//!
//! `run` executes them in order and finishes with `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    category_shares, cluster_cities, compare_models, export_categorical_map, kde_curve, proportion_by_range, stats_by_category, top_n_table,
    Comparison, MapCell, ScoredCell,
};
use crate::classifier::{
    assign_category, classify_heuristic, cnn_train, evaluate, load_external_probs, write_probs_csv, CategoryProbs, CnnArch, CnnInput, CnnModel,
    RoadCategory, TrainConfig,
};
use crate::crhd::{png_name, render_for_cell, Palette, DEFAULT_RGB_FLOOR, DEFAULT_SIZE_PX};
use crate::error::{Error, Result};
use crate::gbm::{fit, r2_level, GbmParams, Goss};
use crate::geodata::{
    cell_at, extract_to_geojson, filter_built, make_grid, parse_cell_values, parse_esri_ascii, parse_extract, parse_geojson, Bbox, CellId,
    GeoPoint, GridCell, RawWay, UrbanExtract,
};
use crate::morpho::{assemble_matrix, compute_indices_with, parse_features_csv, write_features_csv, CellFeatures, MorphoOptions};
use crate::road_graph::{build_graph, extract_faces, RoadGraph, RoadTier};
use crate::synth::{DatasetSpec, Split};
use crate::vitality::{
    indicators_for_cell, parse_vitality_csv, score_records, write_vitality_csv, Indicator, StandardizationStrategy, VitalityRecord,
    VitalitySources, DEFAULT_BANDWIDTH_M, DEFAULT_INCLUDE,
};

pub const SEED_ENV: &str = "MORPHOGRID_SEED";
pub const MANIFEST: &str = "manifest.json";
pub const PARTIAL_MARKER: &str = ".partial";

/// Rows needed before `fit` attempts the 80/20 comparison.
pub const MIN_COMPARE_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Heuristic,
    Cnn,
    External,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Backend::Heuristic),
            "cnn" => Ok(Backend::Cnn),
            "external" => Ok(Backend::External),
            _ => Err(Error::Config(format!("backend must be cnn, heuristic or external, got `{s}`"))),
        }
    }
}

/// Keys accepted in the configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "city",
    "output",
    "osm",
    "buildings",
    "landuse",
    "points",
    "ntl",
    "population",
    "external_probs",
    "model",
    "bbox",
    "backend",
    "render_px",
    "rgb_floor",
    "palette.background",
    "palette.minor",
    "palette.tertiary",
    "palette.secondary",
    "palette.primary",
    "palette.motorway",
    "train.n_per_class",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "gbm.num_iterations",
    "gbm.learning_rate",
    "gbm.num_leaves",
    "gbm.min_samples_leaf",
    "gbm.max_bins",
    "gbm.goss",
    "indices.min_tier",
    "vitality.strategy",
    "vitality.include",
    "vitality.bandwidth_m",
    "analysis.clusters",
    "analysis.top_n",
];

/// Keys naming input files, in manifest order.
const PATH_KEYS: [&str; 8] = ["osm", "buildings", "landuse", "points", "ntl", "population", "external_probs", "model"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub seed: u64,
    pub city: String,
    pub output: PathBuf,
    /// Input files by key, as written in the configuration.
    pub inputs: BTreeMap<String, String>,
    pub bbox: Option<Bbox>,
    pub palette: Palette,
    pub render_px: u32,
    pub rgb_floor: u8,
    pub backend: Backend,
    pub n_per_class: usize,
    pub train: TrainConfig,
    pub gbm: GbmParams,
    /// Lowest tier whose junctions count as intersections.
    pub min_tier: RoadTier,
    pub strategy: StandardizationStrategy,
    pub include: [bool; 5],
    pub bandwidth_m: f64,
    pub clusters: usize,
    pub top_n: usize,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            base_dir: PathBuf::from("."),
            seed: 0,
            city: "city".into(),
            output: PathBuf::from("out"),
            inputs: BTreeMap::new(),
            bbox: None,
            palette: Palette::default(),
            render_px: DEFAULT_SIZE_PX,
            rgb_floor: DEFAULT_RGB_FLOOR,
            backend: Backend::Heuristic,
            n_per_class: 200,
            train: TrainConfig::default(),
            gbm: GbmParams::default(),
            min_tier: RoadTier::Minor,
            strategy: StandardizationStrategy::BeforeMerging,
            include: DEFAULT_INCLUDE,
            bandwidth_m: DEFAULT_BANDWIDTH_M,
            clusters: 4,
            top_n: 10,
            jobs: 1,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_rgb(key: &str, v: &str) -> Result<[u8; 3]> {
    let hex = v.strip_prefix('#').unwrap_or(v);
    let bytes = hex::decode(hex).map_err(|_| Error::Config(format!("`{key}`: bad color `{v}`")))?;
    bytes.try_into().map_err(|_| Error::Config(format!("`{key}`: color needs 6 hex digits")))
}

impl PipelineConfig {
    /// Parses flat `key = value` text; lines starting with `#` are comments. The
    /// `MORPHOGRID_SEED` environment variable overrides `seed`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig { base_dir: base_dir.to_path_buf(), ..Default::default() };
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value)?;
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = parse_num(SEED_ENV, s.trim())?;
        }
        cfg.train.seed = derive_seed(cfg.seed, "train");
        cfg.gbm.seed = derive_seed(cfg.seed, "fit");
        cfg.palette.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.gbm.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "city" => self.city = v.to_string(),
            "output" => self.output = PathBuf::from(v),
            k if PATH_KEYS.contains(&k) => {
                self.inputs.insert(k.to_string(), v.to_string());
            }
            "bbox" => {
                let p: Vec<f64> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
                if p.len() != 4 {
                    return Err(Error::Config("`bbox` needs west,south,east,north".into()));
                }
                self.bbox = Some(Bbox::new(p[0], p[1], p[2], p[3]).map_err(|e| Error::Config(e.to_string()))?);
            }
            "backend" => self.backend = v.parse()?,
            "render_px" => self.render_px = parse_num(key, v)?,
            "rgb_floor" => self.rgb_floor = parse_num(key, v)?,
            "palette.background" => self.palette.background = parse_rgb(key, v)?,
            k if k.starts_with("palette.") => {
                let tier = RoadTier::ASCENDING.into_iter().find(|t| k == format!("palette.{}", t.name())).expect("listed key");
                let (color, width) = v.split_once(',').ok_or_else(|| Error::Config(format!("`{k}` needs #rrggbb,width")))?;
                self.palette.tiers[tier.index()].color = parse_rgb(k, color.trim())?;
                self.palette.tiers[tier.index()].width = parse_num(k, width.trim())?;
            }
            "train.n_per_class" => self.n_per_class = parse_num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "gbm.num_iterations" => self.gbm.num_iterations = parse_num(key, v)?,
            "gbm.learning_rate" => self.gbm.learning_rate = parse_num(key, v)?,
            "gbm.num_leaves" => self.gbm.num_leaves = parse_num(key, v)?,
            "gbm.min_samples_leaf" => self.gbm.min_samples_leaf = parse_num(key, v)?,
            "gbm.max_bins" => self.gbm.max_bins = parse_num(key, v)?,
            "gbm.goss" => {
                self.gbm.goss = match v {
                    "none" | "off" => None,
                    _ => {
                        let (a, b) = v.split_once(',').ok_or_else(|| Error::Config("`gbm.goss` needs top_rate,other_rate or none".into()))?;
                        Some(Goss { top_rate: parse_num(key, a.trim())?, other_rate: parse_num(key, b.trim())? })
                    }
                }
            }
            "indices.min_tier" => self.min_tier = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "vitality.strategy" => self.strategy = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "vitality.include" => {
                let mut mask = [false; 5];
                for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let ind: Indicator = name.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
                    mask[ind.index()] = true;
                }
                self.include = mask;
            }
            "vitality.bandwidth_m" => self.bandwidth_m = parse_num(key, v)?,
            "analysis.clusters" => self.clusters = parse_num(key, v)?,
            "analysis.top_n" => self.top_n = parse_num(key, v)?,
            _ => unreachable!("key checked against CONFIG_KEYS"),
        }
        Ok(())
    }

    pub fn input_path(&self, key: &str) -> Option<PathBuf> {
        self.inputs.get(key).map(|p| self.base_dir.join(p))
    }

    /// The input path for `key`, which must be configured and exist.
    pub fn require(&self, key: &str) -> Result<PathBuf> {
        let p = self.input_path(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        if !p.exists() {
            return Err(Error::Config(format!("`{key}` path {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Checks that every configured input file exists.
    pub fn validate_paths(&self) -> Result<()> {
        for key in self.inputs.keys() {
            self.require(key)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output)
    }
}

/// Seed for a labelled consumer (stage name plus index), derived from the
/// configured seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Parse { .. } | Error::Format(_) | Error::Schema { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Maps `f` over `items` on `jobs` workers, keeping input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    pool(jobs)?.install(|| items.par_iter().map(&f).collect())
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

// ---- stage file readers ----

const CELLS_HEADER: [&str; 3] = ["cell_col", "cell_row", "built"];
const CATEGORIES_HEADER: [&str; 3] = ["cell_col", "cell_row", "category"];

fn csv_rows(text: &str, source: &str, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(format!("{source}: {e}")))?.clone();
    let idx: Vec<usize> = header
        .iter()
        .map(|h| headers.iter().position(|x| x == *h).ok_or_else(|| Error::Schema { file: source.into(), column: (*h).into() }))
        .collect::<Result<_>>()?;
    rdr.records()
        .enumerate()
        .map(|(n, r)| {
            let r = r.map_err(|e| Error::Parse { line: n + 2, column: 1, message: format!("{source}: {e}") })?;
            Ok(idx.iter().map(|&i| r.get(i).unwrap_or("").to_string()).collect())
        })
        .collect()
}

fn field<T: FromStr>(v: &str, source: &str, line: usize, column: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line, column: 1, message: format!("{source}: bad `{column}` value `{v}`") })
}

/// `(cell, built)` rows of `cells.csv`.
pub fn read_cells(out: &Path) -> Result<Vec<(GridCell, bool)>> {
    let path = out.join("cells.csv");
    let src = file_name(&path);
    csv_rows(&read(&path)?, &src, &CELLS_HEADER)?
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let col = field(&r[0], &src, n + 2, "cell_col")?;
            let row = field(&r[1], &src, n + 2, "cell_row")?;
            let built: u8 = field(&r[2], &src, n + 2, "built")?;
            Ok((cell_at(col, row), built == 1))
        })
        .collect()
}

fn built_cells(out: &Path) -> Result<Vec<GridCell>> {
    Ok(read_cells(out)?.into_iter().filter(|(_, b)| *b).map(|(c, _)| c).collect())
}

pub fn read_extract(out: &Path) -> Result<UrbanExtract> {
    parse_geojson(&read(&out.join("extract.geojson"))?)
}

pub fn read_categories(out: &Path) -> Result<BTreeMap<CellId, RoadCategory>> {
    let path = out.join("categories.csv");
    let src = file_name(&path);
    csv_rows(&read(&path)?, &src, &CATEGORIES_HEADER)?
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let id = (field(&r[0], &src, n + 2, "cell_col")?, field(&r[1], &src, n + 2, "cell_row")?);
            let cat: RoadCategory = r[2].parse().map_err(|_| Error::Parse { line: n + 2, column: 3, message: format!("{src}: bad category") })?;
            Ok((id, cat))
        })
        .collect()
}

fn read_probs(out: &Path) -> Result<BTreeMap<CellId, CategoryProbs>> {
    let path = out.join("probs.csv");
    let ext = load_external_probs(&read(&path)?, &file_name(&path))?;
    if let Some((line, reason)) = ext.rejected.first() {
        return Err(Error::Parse { line: *line, column: 1, message: format!("probs.csv: {reason}") });
    }
    Ok(ext.probs)
}

// ---- stages ----

/// Reads the configured sources into `extract.geojson`.
pub fn stage_ingest(cfg: &PipelineConfig) -> Result<PathBuf> {
    let osm = cfg.require("osm")?;
    cfg.validate_paths()?;
    let load = |p: &Path| -> Result<UrbanExtract> { parse_extract(&fs::read(p).map_err(|e| Error::io(p, e))?, cfg.bbox.as_ref()) };
    let mut extract = load(&osm)?;
    for key in ["buildings", "landuse", "points"] {
        if let Some(p) = cfg.input_path(key) {
            extract.merge(load(&p)?);
        }
    }
    if extract.roads.is_empty() {
        return Err(Error::Format(format!("{}: no roads found", file_name(&osm))));
    }
    log::info!(
        "ingest: {} roads, {} buildings, {} land-use polygons, {} dropped ways",
        extract.roads.len(),
        extract.buildings.len(),
        extract.landuse.len(),
        extract.dropped_ways
    );
    let path = cfg.out_dir().join("extract.geojson");
    write(&path, extract_to_geojson(&extract))?;
    Ok(path)
}

/// Lays the grid over the study area and flags built cells (`cells.csv`).
pub fn stage_grid(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let extract = read_extract(&out)?;
    let bbox = match cfg.bbox {
        Some(b) => b,
        None => Bbox::around(&extract.roads.iter().flat_map(|r| r.points.iter().copied()).collect::<Vec<_>>()),
    };
    let cells = make_grid(&bbox)?;
    let built: BTreeSet<CellId> = filter_built(&cells, &extract.buildings).iter().map(GridCell::id).collect();
    let mut s = CELLS_HEADER.join(",");
    s.push('\n');
    for c in &cells {
        s.push_str(&format!("{},{},{}\n", c.col, c.row, u8::from(built.contains(&c.id()))));
    }
    log::info!("grid: {} cells, {} built", cells.len(), built.len());
    let path = out.join("cells.csv");
    write(&path, s)?;
    Ok(path)
}

fn city_graph(out: &Path) -> Result<(UrbanExtract, RoadGraph)> {
    let extract = read_extract(out)?;
    let graph = build_graph(&extract.roads);
    Ok((extract, graph))
}

/// Renders one CRHD per built cell, or only `only` when given.
pub fn stage_render(cfg: &PipelineConfig, only: Option<CellId>) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir();
    let (_, graph) = city_graph(&out)?;
    let cells: Vec<GridCell> = match only {
        Some(id) => {
            let all = read_cells(&out)?;
            let c = all.iter().find(|(c, _)| c.id() == id).ok_or_else(|| Error::argument(format!("cell {},{} is outside the grid", id.0, id.1)))?;
            vec![c.0]
        }
        None => built_cells(&out)?,
    };
    let dir = out.join("crhd");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    par_map(cfg.jobs, &cells, |c| {
        let img = render_for_cell(&graph, c, cfg.render_px, &cfg.palette, Some(cfg.rgb_floor))?;
        let path = dir.join(png_name(c.col, c.row));
        img.write_png(&path)?;
        Ok(path)
    })
}

/// The part of `graph` inside the square of half-side `radius_m` around
/// `center`, with edges cut at the square's border.
pub fn window_graph(graph: &RoadGraph, center: GeoPoint, radius_m: f64) -> RoadGraph {
    let dlat = (radius_m / crate::geodata::sphere::EARTH_RADIUS_M).to_degrees();
    let dlon = dlat / center.lat.to_radians().cos();
    let window = Bbox { west: center.lon - dlon, south: center.lat - dlat, east: center.lon + dlon, north: center.lat + dlat };
    let lerp = |a: GeoPoint, b: GeoPoint, t: f64| GeoPoint { lon: a.lon + t * (b.lon - a.lon), lat: a.lat + t * (b.lat - a.lat) };
    let mut ways = Vec::new();
    for e in &graph.edges {
        let mut run: Vec<GeoPoint> = Vec::new();
        for w in e.polyline.windows(2) {
            match window.clip_segment(w[0], w[1]) {
                Some((t0, t1)) => {
                    let (p, q) = (lerp(w[0], w[1], t0), lerp(w[0], w[1], t1));
                    if run.last() != Some(&p) {
                        if run.len() >= 2 {
                            ways.push(RawWay { highway: e.tier.name().into(), points: std::mem::take(&mut run) });
                        }
                        run = vec![p];
                    }
                    run.push(q);
                }
                None => {
                    if run.len() >= 2 {
                        ways.push(RawWay { highway: e.tier.name().into(), points: std::mem::take(&mut run) });
                    }
                    run.clear();
                }
            }
        }
        if run.len() >= 2 {
            ways.push(RawWay { highway: e.tier.name().into(), points: run });
        }
    }
    build_graph(&ways)
}

pub struct ClassifyOptions {
    pub backend: Option<Backend>,
    pub probs: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

/// Probabilities and categories for every built cell.
pub fn stage_classify(cfg: &PipelineConfig, opts: &ClassifyOptions) -> Result<(PathBuf, PathBuf)> {
    let out = cfg.out_dir();
    let cells = built_cells(&out)?;
    let backend = opts.backend.unwrap_or(cfg.backend);
    let probs: BTreeMap<CellId, CategoryProbs> = match backend {
        Backend::External => {
            let path = match &opts.probs {
                Some(p) => p.clone(),
                None => cfg.require("external_probs")?,
            };
            let ext = load_external_probs(&read(&path)?, &file_name(&path))?;
            for (line, reason) in &ext.rejected {
                log::warn!("{}: line {line} rejected: {reason}", file_name(&path));
            }
            cells
                .iter()
                .map(|c| {
                    ext.probs
                        .get(&c.id())
                        .map(|p| (c.id(), *p))
                        .ok_or_else(|| Error::Format(format!("{} has no row for built cell {},{}", file_name(&path), c.col, c.row)))
                })
                .collect::<Result<_>>()?
        }
        Backend::Heuristic => {
            let (_, graph) = city_graph(&out)?;
            let rows = par_map(cfg.jobs, &cells, |c| {
                let radius = 2.0 * c.half_width_m();
                let local = window_graph(&graph, c.centroid(), radius);
                Ok((c.id(), classify_heuristic(&local, 2.0 * radius)))
            })?;
            rows.into_iter().collect()
        }
        Backend::Cnn => {
            let path = match &opts.model {
                Some(p) => p.clone(),
                None => cfg.require("model")?,
            };
            let model = CnnModel::load(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)?;
            let (_, graph) = city_graph(&out)?;
            let rows = par_map(cfg.jobs, &cells, |c| {
                let img = render_for_cell(&graph, c, model.arch.input_px as u32, &cfg.palette, Some(cfg.rgb_floor))?;
                Ok((c.id(), model.forward(&CnnInput::from_image(&img, model.arch.input_px))))
            })?;
            rows.into_iter().collect()
        }
    };
    let probs_path = out.join("probs.csv");
    write(&probs_path, write_probs_csv(&probs))?;
    let mut s = CATEGORIES_HEADER.join(",");
    s.push('\n');
    for (id, p) in &probs {
        s.push_str(&format!("{},{},{}\n", id.0, id.1, assign_category(p)));
    }
    let cat_path = out.join("categories.csv");
    write(&cat_path, s)?;
    Ok((probs_path, cat_path))
}

/// Morphological indices of every classified cell (`features.csv`).
pub fn stage_indices(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let (extract, graph) = city_graph(&out)?;
    let probs = read_probs(&out)?;
    let faces = extract_faces(&graph);
    let cells: Vec<GridCell> = built_cells(&out)?.into_iter().filter(|c| probs.contains_key(&c.id())).collect();
    let rows = par_map(cfg.jobs, &cells, |c| {
        let vector = compute_indices_with(c, &extract, &graph, &faces, &probs[&c.id()], &MorphoOptions { min_tier: cfg.min_tier });
        Ok(CellFeatures { city: cfg.city.clone(), cell: c.id(), vector })
    })?;
    let path = out.join("features.csv");
    write(&path, write_features_csv(&rows))?;
    Ok(path)
}

/// Indicators and scores of every built cell (`vitality.csv`).
pub fn stage_vitality(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let extract = read_extract(&out)?;
    let ntl = cfg.input_path("ntl").map(|p| parse_esri_ascii(&read(&p)?)).transpose()?;
    let population = cfg.input_path("population").map(|p| parse_cell_values(&read(&p)?, &file_name(&p))).transpose()?;
    let set = |k: &str| extract.points.get(k).map(Vec::as_slice);
    let sources = VitalitySources { poi: set("poi"), tweets: set("tweet"), ntl: ntl.as_ref(), population: population.as_ref(), airbnb: set("airbnb") };
    let cells = built_cells(&out)?;
    let mut records = par_map(cfg.jobs, &cells, |c| indicators_for_cell(&cfg.city, c, &sources, cfg.bandwidth_m))?;
    score_records(&mut records, cfg.strategy, cfg.include)?;
    let path = out.join("vitality.csv");
    write(&path, write_vitality_csv(&records))?;
    Ok(path)
}

/// Features joined with vitality scores on `(city, cell)`, sorted.
fn joined(features: &[CellFeatures], vitality: &[VitalityRecord]) -> Vec<(CellFeatures, f64)> {
    let scores: BTreeMap<(&str, CellId), f64> = vitality.iter().filter_map(|r| r.score.map(|s| ((r.city.as_str(), r.cell), s))).collect();
    let mut rows: Vec<(CellFeatures, f64)> =
        features.iter().filter_map(|f| scores.get(&(f.city.as_str(), f.cell)).map(|&s| (f.clone(), s))).collect();
    rows.sort_by(|a, b| (&a.0.city, a.0.cell).cmp(&(&b.0.city, b.0.cell)));
    rows
}

fn load_joined(dirs: &[PathBuf]) -> Result<Vec<(CellFeatures, f64)>> {
    let mut features = Vec::new();
    let mut vitality = Vec::new();
    for d in dirs {
        features.extend(parse_features_csv(&read(&d.join("features.csv"))?, "features.csv")?);
        vitality.extend(parse_vitality_csv(&read(&d.join("vitality.csv"))?, "vitality.csv")?);
    }
    Ok(joined(&features, &vitality))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub rows: usize,
    pub baseline_columns: Vec<String>,
    pub augmented_columns: Vec<String>,
    /// Split counts of the augmented model, by column.
    pub importance: BTreeMap<String, usize>,
    pub comparison: Option<Comparison>,
    pub r2_level: Option<crate::gbm::R2Level>,
    pub note: Option<String>,
}

fn fit_report(rows: &[(CellFeatures, f64)], params: &GbmParams, seed: u64) -> Result<(FitReport, Option<(String, String)>)> {
    let vectors: Vec<_> = rows.iter().map(|(f, _)| f.vector.clone()).collect();
    let y: Vec<f64> = rows.iter().map(|(_, s)| *s).collect();
    let (base_cols, xb) = assemble_matrix(&vectors, false);
    let (aug_cols, xa) = assemble_matrix(&vectors, true);
    let mut report = FitReport {
        rows: rows.len(),
        baseline_columns: base_cols,
        augmented_columns: aug_cols.clone(),
        importance: BTreeMap::new(),
        comparison: None,
        r2_level: None,
        note: None,
    };
    if rows.len() < 2 {
        report.note = Some(format!("{} scored cells; nothing to fit", rows.len()));
        return Ok((report, None));
    }
    let base = fit(&xb, &y, params)?;
    let aug = fit(&xa, &y, params)?;
    report.importance = aug_cols.iter().cloned().zip(aug.feature_importance()).collect();
    if rows.len() >= MIN_COMPARE_ROWS {
        let c = compare_models(&xb, &xa, &y, params, seed)?;
        report.r2_level = c.augmented.r2.map(r2_level);
        report.comparison = Some(c);
    } else {
        report.note = Some(format!("{} scored cells; the 80/20 comparison needs {MIN_COMPARE_ROWS}", rows.len()));
    }
    Ok((report, Some((base.to_checkpoint(), aug.to_checkpoint()))))
}

/// Baseline and augmented regressions of vitality on the indices.
pub fn stage_fit(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let rows = load_joined(std::slice::from_ref(&out))?;
    let (report, models) = fit_report(&rows, &cfg.gbm, derive_seed(cfg.seed, "fit/split"))?;
    if let Some((b, a)) = models {
        write(&out.join("model_baseline.mgbm"), b)?;
        write(&out.join("model_augmented.mgbm"), a)?;
    }
    let path = out.join("fit.json");
    write(&path, pretty(&report))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    None,
    Cluster,
}

pub struct AnalyzeOptions {
    /// Stage directories to pool; the configured output when empty.
    pub inputs: Vec<PathBuf>,
    pub group_by: GroupBy,
}

/// Statistics, clustering, curves and the categorical map over one or
/// more stage directories. Outputs go to the configured output directory.
pub fn stage_analyze(cfg: &PipelineConfig, opts: &AnalyzeOptions) -> Result<PathBuf> {
    let out = cfg.out_dir();
    let dirs = if opts.inputs.is_empty() { vec![out.clone()] } else { opts.inputs.clone() };
    let rows = load_joined(&dirs)?;
    let cats: Vec<RoadCategory> = rows.iter().map(|(f, _)| assign_category(&CategoryProbs(probs_of(f)))).collect();
    let scores: Vec<f64> = rows.iter().map(|(_, s)| *s).collect();

    let city_cells: Vec<(String, RoadCategory)> = rows.iter().zip(&cats).map(|((f, _), &c)| (f.city.clone(), c)).collect();
    let (shares, excluded) = category_shares(&city_cells);
    let k = cfg.clusters.min(shares.len());
    let clustering = if k >= 1 { Some(cluster_cities(&shares, k, derive_seed(cfg.seed, "analyze/cluster"))?) } else { None };
    let cluster_of: BTreeMap<&str, usize> = match &clustering {
        Some(c) => shares.iter().zip(&c.labels).map(|(s, &l)| (s.city.as_str(), l)).collect(),
        None => BTreeMap::new(),
    };

    let mut kde_csv = String::from("category,x,density\n");
    let mut curves = BTreeMap::new();
    for c in RoadCategory::ALL {
        let s: Vec<f64> = scores.iter().zip(&cats).filter(|(_, &k)| k == c).map(|(v, _)| *v).collect();
        if s.len() < 2 {
            continue;
        }
        let curve = kde_curve(&s, None)?;
        for (x, d) in curve.x.iter().zip(&curve.density) {
            kde_csv.push_str(&format!("{c},{x},{d}\n"));
        }
        curves.insert(c.name(), curve.bandwidth);
    }

    let scored: Vec<ScoredCell> =
        rows.iter().zip(&cats).map(|((f, s), &c)| ScoredCell { category: c, score: *s, vector: f.vector.clone() }).collect();

    let mut subgroups = Vec::new();
    if opts.group_by == GroupBy::Cluster {
        let labels: BTreeSet<usize> = cluster_of.values().copied().collect();
        for label in labels {
            let members: Vec<(CellFeatures, f64)> = rows.iter().filter(|(f, _)| cluster_of.get(f.city.as_str()) == Some(&label)).cloned().collect();
            let cities: BTreeSet<&str> = members.iter().map(|(f, _)| f.city.as_str()).collect();
            let (report, _) = fit_report(&members, &cfg.gbm, derive_seed(cfg.seed, &format!("analyze/group/{label}")))?;
            subgroups.push(json!({ "cluster": label, "cities": cities, "fit": report }));
        }
    }

    let report = json!({
        "cells": rows.len(),
        "cities": shares.iter().map(|s| s.city.as_str()).collect::<Vec<_>>(),
        "excluded_cities": excluded,
        "shares": shares,
        "clustering": clustering,
        "stats": stats_by_category(&scores, &cats)?,
        "proportions": proportion_by_range(&scores, &cats)?,
        "kde_bandwidths": curves,
        "top_n": top_n_table(&scored, cfg.top_n),
        "subgroups": if opts.group_by == GroupBy::Cluster { Value::from(subgroups) } else { Value::Null },
    });

    let mut map_cells = Vec::new();
    for ((f, s), &c) in rows.iter().zip(&cats) {
        map_cells.push(MapCell { city: f.city.clone(), cell: cell_at(f.cell.0, f.cell.1), probs: CategoryProbs(probs_of(f)), category: c, score: Some(*s) });
    }
    write(&out.join("map.geojson"), export_categorical_map(&map_cells))?;
    write(&out.join("kde.csv"), kde_csv)?;
    let path = out.join("analysis.json");
    write(&path, pretty(&report))?;
    Ok(path)
}

fn probs_of(f: &CellFeatures) -> [f64; 4] {
    let v = &f.vector;
    [v.prob_g, v.prob_o, v.prob_r, v.prob_n]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub city: String,
    /// Configured input files by key (path as configured).
    pub inputs: BTreeMap<String, ManifestEntry>,
    /// Artifacts relative to the output directory, sorted.
    pub artifacts: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(|e| Error::io(path, e))?)))
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, root, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Digests of the configured inputs and of every artifact in the output
/// directory (the manifest itself and the partial marker excluded).
pub fn build_manifest(cfg: &PipelineConfig) -> Result<Manifest> {
    let out = cfg.out_dir();
    let mut inputs = BTreeMap::new();
    for (key, p) in &cfg.inputs {
        inputs.insert(key.clone(), ManifestEntry { path: p.clone(), sha256: sha256_file(&cfg.base_dir.join(p))? });
    }
    let mut files = Vec::new();
    collect_files(&out, &out, &mut files)?;
    let mut names: Vec<String> = files.iter().map(|p| p.to_string_lossy().replace('\\', "/")).filter(|n| n != MANIFEST && n != PARTIAL_MARKER).collect();
    names.sort();
    let artifacts = names.into_iter().map(|n| Ok(ManifestEntry { sha256: sha256_file(&out.join(&n))?, path: n })).collect::<Result<_>>()?;
    Ok(Manifest { seed: cfg.seed, city: cfg.city.clone(), inputs, artifacts })
}

/// All stages in order, then the manifest. On failure the output directory
/// keeps what was written plus a `.partial` marker naming the failed stage.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.require("osm")?;
    cfg.validate_paths()?;
    let out = cfg.out_dir();
    let marker = out.join(PARTIAL_MARKER);
    let mut stage = "ingest";
    let result = (|| -> Result<Manifest> {
        stage_ingest(cfg)?;
        stage = "grid";
        stage_grid(cfg)?;
        stage = "render";
        stage_render(cfg, None)?;
        stage = "classify";
        stage_classify(cfg, &ClassifyOptions { backend: None, probs: None, model: None })?;
        stage = "indices";
        stage_indices(cfg)?;
        stage = "vitality";
        stage_vitality(cfg)?;
        stage = "fit";
        stage_fit(cfg)?;
        stage = "analyze";
        stage_analyze(cfg, &AnalyzeOptions { inputs: Vec::new(), group_by: GroupBy::None })?;
        stage = "manifest";
        let m = build_manifest(cfg)?;
        write(&out.join(MANIFEST), pretty(&m))?;
        Ok(m)
    })();
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
        }
        Err(e) => {
            let _ = write(&marker, format!("stage: {stage}\nerror: {e}\n"));
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub sha256: String,
    pub best_epoch: usize,
    pub report: crate::classifier::EvalReport,
}

/// Trains the CNN on the synthetic dataset (`train.n_per_class` per class,
/// 80/10/10 split) and writes `model.mgrd` and `eval.txt`.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let arch = CnnArch::default();
    let ds = DatasetSpec::new(cfg.n_per_class, derive_seed(cfg.seed, "train/data"), arch.input_px as u32)?;
    let load = |s: Split| -> Result<Vec<(CnnInput, RoadCategory)>> {
        let items: Vec<_> = ds.split(s).copied().collect();
        par_map(cfg.jobs, &items, |it| Ok((CnnInput::from_image(&ds.image(it), arch.input_px), it.label)))
    };
    let (train, val, test) = (load(Split::Train)?, load(Split::Validation)?, load(Split::Test)?);
    let outcome = cnn_train(&train, &val, arch, &cfg.train)?;
    let preds: Vec<(CategoryProbs, RoadCategory)> = test.iter().map(|(x, y)| (outcome.model.forward(x), *y)).collect();
    let report = evaluate(&preds)?;
    let out = cfg.out_dir();
    let checkpoint = out.join("model.mgrd");
    write(&checkpoint, outcome.model.to_bytes())?;
    write(&out.join("eval.txt"), report.to_text())?;
    Ok(TrainSummary { sha256: sha256_file(&checkpoint)?, checkpoint, best_epoch: outcome.best_epoch, report })
}
