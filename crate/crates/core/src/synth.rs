//! Procedurally generated road networks for the four categories.
//!
//! Networks are laid out in a local metric frame around `SynthParams::center`,
//! clipped to the square frame of side `extent_m`, and converted to WGS84.
//! Everything is a pure function of the parameters (including the seed).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::RoadCategory;
use crate::crhd::{render_crhd, truncate_minor, CrhdImage, Palette, DEFAULT_RGB_FLOOR};
use crate::error::{Error, Result};
use crate::geodata::sphere::LocalProjection;
use crate::geodata::{GeoPoint, RawWay};
use crate::road_graph::{build_graph, RoadGraph, RoadTier};

type Pt = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub center: GeoPoint,
    /// Side of the square frame, meters.
    pub extent_m: f64,
    /// Positional noise as a fraction of the characteristic spacing, `[0, 1)`.
    pub jitter: f64,
    /// Gridiron street spacing.
    pub spacing_m: f64,
    /// Gridiron orientation, degrees.
    pub rotation_deg: f64,
    pub spokes: usize,
    pub rings: usize,
    /// Offset of the radial hub from the frame centre, meters.
    pub hub_offset_m: (f64, f64),
    /// Organic random-walk step.
    pub walk_step_m: f64,
    pub organic_majors: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            center: GeoPoint::new(0.0, 0.0),
            extent_m: 2000.0,
            jitter: 0.0,
            spacing_m: 120.0,
            rotation_deg: 0.0,
            spokes: 8,
            rings: 3,
            hub_offset_m: (0.0, 0.0),
            walk_step_m: 40.0,
            organic_majors: 6,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_m > 0.0) {
            return Err(Error::argument("extent_m must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::argument("jitter must lie in [0, 1)"));
        }
        if self.spokes < 4 {
            return Err(Error::argument("radial networks need at least 4 spokes"));
        }
        if !(self.spacing_m > 0.0) || !(self.walk_step_m > 0.0) {
            return Err(Error::argument("spacing_m and walk_step_m must be positive"));
        }
        Ok(())
    }
}

/// Generates one road network of the given category.
pub fn gen_category(category: RoadCategory, params: &SynthParams) -> Result<RoadGraph> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let ways = match category {
        RoadCategory::Gridiron => gridiron(params, &mut rng),
        RoadCategory::Radial => radial(params, &mut rng),
        RoadCategory::Organic => organic(params, &mut rng),
        RoadCategory::NoPattern => no_pattern(params, &mut rng),
    };
    Ok(to_graph(ways, params))
}

/// [`gen_category`] with the category given by name.
pub fn gen_category_named(name: &str, params: &SynthParams) -> Result<RoadGraph> {
    gen_category(name.parse()?, params)
}

fn to_graph(ways: Vec<(RoadTier, Vec<Pt>)>, params: &SynthParams) -> RoadGraph {
    let proj = LocalProjection::new(params.center);
    let half = params.extent_m / 2.0;
    let mut raw = Vec::new();
    for (tier, line) in ways {
        for piece in clip_polyline(&line, half) {
            raw.push(RawWay {
                highway: tier.name().to_string(),
                points: piece.iter().map(|&(x, y)| proj.inverse(x, y)).collect(),
            });
        }
    }
    build_graph(&raw)
}

/// Pieces of a polyline inside the square `[-half, half]²`.
fn clip_polyline(line: &[Pt], half: f64) -> Vec<Vec<Pt>> {
    let inside = |p: &Pt| p.0.abs() <= half && p.1.abs() <= half;
    let mut out = Vec::new();
    let mut cur: Vec<Pt> = Vec::new();
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        if inside(&a) && inside(&b) {
            if cur.is_empty() {
                cur.push(a);
            }
            cur.push(b);
            continue;
        }
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let mut hit = true;
        for (p, q) in [(-dx, a.0 + half), (dx, half - a.0), (-dy, a.1 + half), (dy, half - a.1)] {
            if p == 0.0 {
                if q < 0.0 {
                    hit = false;
                }
            } else if p < 0.0 {
                t0 = t0.max(q / p);
            } else {
                t1 = t1.min(q / p);
            }
        }
        if !hit || t0 >= t1 {
            if cur.len() >= 2 {
                out.push(std::mem::take(&mut cur));
            }
            cur.clear();
            continue;
        }
        let at = |t: f64| if t == 0.0 { a } else if t == 1.0 { b } else { (a.0 + t * dx, a.1 + t * dy) };
        if t0 > 0.0 || cur.is_empty() {
            if cur.len() >= 2 {
                out.push(std::mem::take(&mut cur));
            }
            cur = vec![at(t0)];
        }
        cur.push(at(t1));
        if t1 < 1.0 {
            out.push(std::mem::take(&mut cur));
        }
    }
    if cur.len() >= 2 {
        out.push(cur);
    }
    out
}

fn rotate(p: Pt, deg: f64) -> Pt {
    let (s, c) = deg.to_radians().sin_cos();
    (p.0 * c - p.1 * s, p.0 * s + p.1 * c)
}

fn major_tier(rng: &mut ChaCha8Rng) -> RoadTier {
    match rng.gen_range(0..20) {
        0 => RoadTier::Motorway,
        1..=8 => RoadTier::Primary,
        _ => RoadTier::Secondary,
    }
}

fn gridiron(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<(RoadTier, Vec<Pt>)> {
    // generous margin so rotated lattices still fill the frame
    let half = p.extent_m / 2.0 * 1.5;
    let n = (2.0 * half / p.spacing_m).ceil() as usize;
    let j = p.jitter * p.spacing_m;
    let mut grid = vec![vec![(0.0, 0.0); n + 1]; n + 1];
    for (i, col) in grid.iter_mut().enumerate() {
        for (k, v) in col.iter_mut().enumerate() {
            let mut q = (-half + i as f64 * p.spacing_m, -half + k as f64 * p.spacing_m);
            if j > 0.0 {
                q.0 += rng.gen_range(-j..=j);
                q.1 += rng.gen_range(-j..=j);
            }
            *v = rotate(q, p.rotation_deg);
        }
    }
    let period = rng.gen_range(3..=4);
    let phase = rng.gen_range(0..period);
    let tier_for = |idx: usize, rng: &mut ChaCha8Rng| {
        if idx % period == phase {
            major_tier(rng)
        } else if rng.gen_bool(0.35) {
            RoadTier::Tertiary
        } else {
            RoadTier::Minor
        }
    };
    let mut ways = Vec::new();
    for i in 0..=n {
        let t = tier_for(i, rng);
        ways.push((t, grid[i].clone()));
        let t = tier_for(i, rng);
        ways.push((t, (0..=n).map(|k| grid[k][i]).collect()));
    }
    ways
}

fn radial(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<(RoadTier, Vec<Pt>)> {
    let hub = p.hub_offset_m;
    let reach = p.extent_m * 0.75 + hub.0.hypot(hub.1);
    let spacing = reach / (p.rings as f64 + 1.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / p.spokes as f64;
    let angles: Vec<f64> = (0..p.spokes)
        .map(|k| phase + k as f64 * step + p.jitter * rng.gen_range(-0.5..=0.5) * step)
        .collect();
    let radii: Vec<f64> = (1..=p.rings)
        .map(|m| m as f64 * spacing * (1.0 + p.jitter * rng.gen_range(-0.3..=0.3)))
        .collect();
    let polar = |r: f64, a: f64| (hub.0 + r * a.cos(), hub.1 + r * a.sin());

    let mut ways = Vec::new();
    for &a in &angles {
        let mut line = vec![hub];
        line.extend(radii.iter().map(|&r| polar(r, a)));
        line.push(polar(reach, a));
        let tier = if rng.gen_bool(0.2) { RoadTier::Motorway } else { RoadTier::Primary };
        ways.push((tier, line));
    }
    const SUBDIV: usize = 6;
    for (m, &r) in radii.iter().enumerate() {
        let mut ring = Vec::new();
        for k in 0..p.spokes {
            let (a0, a1) = (angles[k], angles[(k + 1) % p.spokes] + if k + 1 == p.spokes { std::f64::consts::TAU } else { 0.0 });
            for s in 0..SUBDIV {
                ring.push(polar(r, a0 + (a1 - a0) * s as f64 / SUBDIV as f64));
            }
        }
        ring.push(ring[0]);
        let tier = if m + 1 == radii.len() { RoadTier::Tertiary } else { RoadTier::Secondary };
        ways.push((tier, ring));
        // minor connectors at the middle of some sectors, between this ring and the next
        if let Some(&r2) = radii.get(m + 1) {
            for k in 0..p.spokes {
                if rng.gen_bool(0.5) {
                    let (a0, a1) = (angles[k], angles[(k + 1) % p.spokes] + if k + 1 == p.spokes { std::f64::consts::TAU } else { 0.0 });
                    let a = a0 + (a1 - a0) * 0.5;
                    ways.push((RoadTier::Minor, vec![polar(r, a), polar(r2, a)]));
                }
            }
        }
    }
    ways
}

/// Curvature-bounded random walk: the heading changes by at most 25° per
/// step and the turn rate is smoothed between steps.
fn random_walk(start: Pt, heading: f64, step: f64, max_steps: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<Pt> {
    let max_turn = 25f64.to_radians();
    let mut pts = vec![start];
    let mut h = heading;
    let mut turn = 0.0;
    let mut cur = start;
    for _ in 0..max_steps {
        turn = (0.6 * turn + rng.gen_range(-0.5..=0.5) * max_turn).clamp(-max_turn, max_turn);
        h += turn;
        cur = (cur.0 + step * h.cos(), cur.1 + step * h.sin());
        pts.push(cur);
        if cur.0.abs() > bound || cur.1.abs() > bound {
            break;
        }
    }
    pts
}

fn organic(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<(RoadTier, Vec<Pt>)> {
    let half = p.extent_m / 2.0;
    let bound = half * 1.1;
    let mut ways: Vec<(RoadTier, Vec<Pt>)> = Vec::new();
    let n_major = p.organic_majors.max(2);
    for k in 0..n_major {
        // start on the frame boundary and head roughly across it
        let side = rng.gen_range(0..4);
        let s = rng.gen_range(-half..half);
        let start = match side {
            0 => (-bound, s),
            1 => (bound, s),
            2 => (s, -bound),
            _ => (s, bound),
        };
        let target = (rng.gen_range(-half..half) * 0.5, rng.gen_range(-half..half) * 0.5);
        let heading = (target.1 - start.1).atan2(target.0 - start.0);
        let max_steps = (4.0 * bound / p.walk_step_m) as usize;
        let line = random_walk(start, heading, p.walk_step_m, max_steps, bound * 1.01, rng);
        let tier = match k % 3 {
            0 => major_tier(rng),
            1 => RoadTier::Secondary,
            _ => RoadTier::Tertiary,
        };
        ways.push((tier, line));
    }
    // minor infill branching off existing majors
    let n_minor = rng.gen_range(10..20);
    for _ in 0..n_minor {
        let (_, base) = &ways[rng.gen_range(0..n_major)];
        let start = base[rng.gen_range(0..base.len())];
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = rng.gen_range(4..12);
        let line = random_walk(start, heading, p.walk_step_m * 0.6, steps, bound, rng);
        ways.push((RoadTier::Minor, line));
    }
    node_crossings(ways)
}

fn no_pattern(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<(RoadTier, Vec<Pt>)> {
    let half = p.extent_m / 2.0;
    let n = rng.gen_range(3..8);
    let mut ways = Vec::new();
    for _ in 0..n {
        let start = (rng.gen_range(-half..half), rng.gen_range(-half..half));
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = rng.gen_range(2..8);
        let line = random_walk(start, heading, p.walk_step_m, steps, half * 1.1, rng);
        let tier = if rng.gen_bool(0.25) { RoadTier::Tertiary } else { RoadTier::Minor };
        ways.push((tier, line));
    }
    ways
}

/// Inserts a shared vertex at every proper crossing between segments so
/// that crossing walks become intersections of the graph.
fn node_crossings(ways: Vec<(RoadTier, Vec<Pt>)>) -> Vec<(RoadTier, Vec<Pt>)> {
    struct Seg {
        way: usize,
        idx: usize,
        a: Pt,
        b: Pt,
    }
    let segs: Vec<Seg> = ways
        .iter()
        .enumerate()
        .flat_map(|(w, (_, line))| line.windows(2).enumerate().map(move |(i, s)| Seg { way: w, idx: i, a: s[0], b: s[1] }))
        .collect();
    // (way, segment) -> [(t, point)]
    let mut inserts: Vec<Vec<Vec<(f64, Pt)>>> = ways.iter().map(|(_, l)| vec![Vec::new(); l.len()]).collect();
    for i in 0..segs.len() {
        let s = &segs[i];
        let (minx, maxx) = (s.a.0.min(s.b.0), s.a.0.max(s.b.0));
        let (miny, maxy) = (s.a.1.min(s.b.1), s.a.1.max(s.b.1));
        for t in &segs[i + 1..] {
            if t.way == s.way && t.idx <= s.idx + 1 {
                continue;
            }
            if t.a.0.max(t.b.0) < minx || t.a.0.min(t.b.0) > maxx || t.a.1.max(t.b.1) < miny || t.a.1.min(t.b.1) > maxy {
                continue;
            }
            let r = (s.b.0 - s.a.0, s.b.1 - s.a.1);
            let q = (t.b.0 - t.a.0, t.b.1 - t.a.1);
            let den = r.0 * q.1 - r.1 * q.0;
            if den.abs() < 1e-12 {
                continue;
            }
            let d = (t.a.0 - s.a.0, t.a.1 - s.a.1);
            let u = (d.0 * q.1 - d.1 * q.0) / den;
            let v = (d.0 * r.1 - d.1 * r.0) / den;
            if u > 1e-9 && u < 1.0 - 1e-9 && v > 1e-9 && v < 1.0 - 1e-9 {
                let x = (s.a.0 + u * r.0, s.a.1 + u * r.1);
                inserts[s.way][s.idx].push((u, x));
                inserts[t.way][t.idx].push((v, x));
            }
        }
    }
    ways.into_iter()
        .enumerate()
        .map(|(w, (tier, line))| {
            let mut out = Vec::with_capacity(line.len());
            for i in 0..line.len() {
                out.push(line[i]);
                let mut extra = std::mem::take(&mut inserts[w][i]);
                extra.sort_by(|a, b| a.0.total_cmp(&b.0));
                out.extend(extra.into_iter().map(|(_, p)| p));
            }
            (tier, out)
        })
        .collect()
}

/// Randomised generator settings for dataset instance `index`.
pub fn instance_params(category: RoadCategory, seed: u64, index: u64) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index));
    let extent = 2000.0;
    let mut p = SynthParams {
        seed: rng.gen(),
        extent_m: extent,
        jitter: rng.gen_range(0.0..=0.05),
        ..SynthParams::default()
    };
    match category {
        RoadCategory::Gridiron => {
            p.spacing_m = rng.gen_range(90.0..170.0);
            p.rotation_deg = rng.gen_range(0.0..90.0);
        }
        RoadCategory::Radial => {
            p.spokes = rng.gen_range(6..=12);
            p.rings = rng.gen_range(2..=4);
            let r = rng.gen_range(0.0..0.12) * extent;
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            p.hub_offset_m = (r * a.cos(), r * a.sin());
        }
        RoadCategory::Organic => {
            p.organic_majors = rng.gen_range(5..=8);
            p.walk_step_m = rng.gen_range(30.0..50.0);
        }
        RoadCategory::NoPattern => {
            p.walk_step_m = rng.gen_range(30.0..60.0);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub index: usize,
    pub label: RoadCategory,
    pub split: Split,
}

/// Layout of a synthetic dataset: `4 * n_per_class` items, class-major,
/// each class split 80/10/10 by a seeded shuffle.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub size_px: u32,
    pub items: Vec<DatasetItem>,
}

impl DatasetSpec {
    pub fn new(n_per_class: usize, seed: u64, size_px: u32) -> Result<Self> {
        if n_per_class == 0 {
            return Err(Error::argument("n_per_class must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
        let n_train = (n_per_class as f64 * 0.8).round() as usize;
        let n_val = ((n_per_class as f64 * 0.1).round() as usize).min(n_per_class - n_train);
        let mut items = Vec::with_capacity(4 * n_per_class);
        for c in RoadCategory::ALL {
            let mut order: Vec<usize> = (0..n_per_class).collect();
            order.shuffle(&mut rng);
            let mut split = vec![Split::Test; n_per_class];
            for (rank, &i) in order.iter().enumerate() {
                split[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
            for (j, s) in split.into_iter().enumerate() {
                items.push(DatasetItem { index: c.index() * n_per_class + j, label: c, split: s });
            }
        }
        Ok(DatasetSpec { n_per_class, seed, size_px, items })
    }

    pub fn params(&self, item: &DatasetItem) -> SynthParams {
        instance_params(item.label, self.seed, item.index as u64)
    }

    pub fn graph(&self, item: &DatasetItem) -> RoadGraph {
        gen_category(item.label, &self.params(item)).expect("instance params are valid")
    }

    /// Diagram of one item: default palette, minor roads truncated.
    pub fn image(&self, item: &DatasetItem) -> CrhdImage {
        let p = self.params(item);
        let g = gen_category(item.label, &p).expect("instance params are valid");
        let img = render_crhd(&g, p.center, p.extent_m / 2.0, self.size_px, &Palette::default()).expect("valid render arguments");
        truncate_minor(&img, DEFAULT_RGB_FLOOR)
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == s)
    }

    /// `path,label,split` manifest; paths are `<prefix><index>.png`.
    pub fn manifest_csv(&self, prefix: &str) -> String {
        let mut s = String::from("path,label,split\n");
        for it in &self.items {
            s.push_str(&format!("{prefix}{:05}.png,{},{}\n", it.index, it.label, it.split.name()));
        }
        s
    }
}

/// Materialises every image of the dataset with its label and split.
pub fn gen_dataset(n_per_class: usize, seed: u64, size_px: u32) -> Result<Vec<(CrhdImage, RoadCategory, Split)>> {
    let ds = DatasetSpec::new(n_per_class, seed, size_px)?;
    Ok(ds.items.iter().map(|it| (ds.image(it), it.label, it.split)).collect())
}
