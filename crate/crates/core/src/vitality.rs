//! Vitality indicators, standardization and the 0–100 vitality score.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::sphere::{haversine_m, EARTH_RADIUS_M};
use crate::geodata::{zonal_mean, CellId, CellValues, GeoPoint, GridCell, RasterGrid};

pub const DEFAULT_BANDWIDTH_M: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    PoiKde,
    TweetCount,
    Ntl,
    Population,
    AirbnbKde,
}

impl Indicator {
    pub const ALL: [Indicator; 5] = [
        Indicator::PoiKde,
        Indicator::TweetCount,
        Indicator::Ntl,
        Indicator::Population,
        Indicator::AirbnbKde,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Indicator::PoiKde => "poi_kde",
            Indicator::TweetCount => "tweet_count",
            Indicator::Ntl => "ntl",
            Indicator::Population => "population",
            Indicator::AirbnbKde => "airbnb_kde",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Indicator::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::argument(format!("unknown vitality indicator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalityRecord {
    pub city: String,
    pub cell: CellId,
    /// Raw indicator values in [`Indicator::ALL`] order; `None` when the
    /// source is missing.
    pub values: [Option<f64>; 5],
    pub score: Option<f64>,
}

impl VitalityRecord {
    pub fn get(&self, i: Indicator) -> Option<f64> {
        self.values[i.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StandardizationStrategy {
    /// z-scores within each city.
    BeforeMerging,
    /// z-scores over the pooled cells of all cities.
    AfterMerging,
}

impl FromStr for StandardizationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(StandardizationStrategy::BeforeMerging),
            "after" => Ok(StandardizationStrategy::AfterMerging),
            _ => Err(Error::argument(format!("standardization must be `before` or `after`, got `{s}`"))),
        }
    }
}

impl fmt::Display for StandardizationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StandardizationStrategy::BeforeMerging => "before",
            StandardizationStrategy::AfterMerging => "after",
        })
    }
}

/// Gaussian kernel density at the cell centroid, per km². Points further
/// than `4h` are ignored.
pub fn kde_at_cell(points: &[GeoPoint], cell: &GridCell, bandwidth_m: f64) -> Result<f64> {
    kde_at(points, cell.centroid(), bandwidth_m)
}

pub fn kde_at(points: &[GeoPoint], at: GeoPoint, bandwidth_m: f64) -> Result<f64> {
    if !(bandwidth_m > 0.0) || !bandwidth_m.is_finite() {
        return Err(Error::argument("bandwidth_m must be positive"));
    }
    let cutoff = 4.0 * bandwidth_m;
    let dlat = (cutoff / EARTH_RADIUS_M).to_degrees();
    let coslat = at.lat.to_radians().cos().abs();
    let dlon = if coslat > 1e-6 { (dlat / coslat).min(360.0) } else { 360.0 };
    let two_h2 = 2.0 * bandwidth_m * bandwidth_m;
    let mut sum = 0.0;
    for p in points {
        if (p.lat - at.lat).abs() > dlat * 1.0001 {
            continue;
        }
        let dl = (p.lon - at.lon).rem_euclid(360.0);
        if dl.min(360.0 - dl) > dlon * 1.0001 {
            continue;
        }
        let d = haversine_m(*p, at);
        if d <= cutoff {
            sum += (-d * d / two_h2).exp();
        }
    }
    // per m², times 1e6 for per km²
    Ok(sum * 1e6 / (std::f64::consts::PI * two_h2))
}

/// Input data for the indicators of one city; absent sources stay missing.
#[derive(Debug, Clone, Copy, Default)]
pub struct VitalitySources<'a> {
    pub poi: Option<&'a [GeoPoint]>,
    pub tweets: Option<&'a [GeoPoint]>,
    pub ntl: Option<&'a RasterGrid>,
    pub population: Option<&'a CellValues>,
    pub airbnb: Option<&'a [GeoPoint]>,
}

pub fn indicators_for_cell(city: &str, cell: &GridCell, sources: &VitalitySources<'_>, bandwidth_m: f64) -> Result<VitalityRecord> {
    let kde = |pts: Option<&[GeoPoint]>| pts.map(|p| kde_at_cell(p, cell, bandwidth_m)).transpose();
    let values = [
        kde(sources.poi)?,
        sources.tweets.map(|p| p.iter().filter(|q| cell.contains(q)).count() as f64),
        sources.ntl.and_then(|r| zonal_mean(r, cell)),
        sources.population.and_then(|m| m.get(&cell.id()).copied()),
        kde(sources.airbnb)?,
    ];
    Ok(VitalityRecord { city: city.to_string(), cell: cell.id(), values, score: None })
}

/// Population mean and standard deviation of the present values.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// z-scores per record and indicator. Missing values and zero-variance
/// indicators map to 0.
pub fn standardize(records: &[VitalityRecord], strategy: StandardizationStrategy) -> Result<Vec<[f64; 5]>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = match strategy {
            StandardizationStrategy::BeforeMerging => r.city.as_str(),
            StandardizationStrategy::AfterMerging => "",
        };
        groups.entry(key).or_default().push(i);
    }
    let mut out = vec![[0.0; 5]; records.len()];
    for (city, members) in &groups {
        if strategy == StandardizationStrategy::BeforeMerging && members.len() < 2 {
            return Err(Error::argument(format!("city `{city}` has fewer than 2 cells to standardize")));
        }
        for k in 0..5 {
            let present = members.iter().filter_map(|&i| records[i].values[k]);
            let (mean, std) = mean_std(present);
            if std == 0.0 {
                continue;
            }
            for &i in members {
                if let Some(v) = records[i].values[k] {
                    out[i][k] = (v - mean) / std;
                }
            }
        }
    }
    Ok(out)
}

/// Included-indicator mask with the tweet count left out.
pub const DEFAULT_INCLUDE: [bool; 5] = [true, false, true, true, true];

/// Sums the included z-scores of each row and rescales the sums onto
/// `[0, 100]`; all zeros when fewer than two distinct sums exist.
pub fn vitality_score(z: &[[f64; 5]], include: [bool; 5]) -> Vec<f64> {
    let sums: Vec<f64> = z.iter().map(|row| (0..5).filter(|&k| include[k]).map(|k| row[k]).sum()).collect();
    let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; sums.len()];
    }
    sums.iter()
        .map(|&s| {
            if s == max {
                100.0
            } else {
                (100.0 * (s - min) / (max - min)).clamp(0.0, 100.0)
            }
        })
        .collect()
}

/// Standardizes, scores and stores the score in each record.
pub fn score_records(records: &mut [VitalityRecord], strategy: StandardizationStrategy, include: [bool; 5]) -> Result<()> {
    let z = standardize(records, strategy)?;
    for (r, s) in records.iter_mut().zip(vitality_score(&z, include)) {
        r.score = Some(s);
    }
    Ok(())
}

pub const VITALITY_HEADER: [&str; 9] = [
    "city", "cell_col", "cell_row", "poi_kde", "tweet_count", "ntl", "population", "airbnb_kde", "score",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_vitality_csv(records: &[VitalityRecord]) -> String {
    let mut s = VITALITY_HEADER.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{},{}", r.city, r.cell.0, r.cell.1));
        for v in r.values {
            s.push(',');
            s.push_str(&opt(v));
        }
        s.push(',');
        s.push_str(&opt(r.score));
        s.push('\n');
    }
    s
}

pub fn parse_vitality_csv(text: &str, source: &str) -> Result<Vec<VitalityRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(format!("{source}: {e}")))?.clone();
    let idx: Vec<usize> = VITALITY_HEADER
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Schema { file: source.to_string(), column: name.to_string() })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Parse { line, column: 1, message: format!("{source}: {e}") })?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let bad = |k: usize| Error::Parse { line, column: idx[k] + 1, message: format!("{source}: bad {}", VITALITY_HEADER[k]) };
        let num = |k: usize| -> Result<Option<f64>> {
            match field(k) {
                "" => Ok(None),
                f => f.parse().map(Some).map_err(|_| bad(k)),
            }
        };
        let int = |k: usize| -> Result<i64> { field(k).parse().map_err(|_| bad(k)) };
        out.push(VitalityRecord {
            city: field(0).to_string(),
            cell: (int(1)?, int(2)?),
            values: [num(3)?, num(4)?, num(5)?, num(6)?, num(7)?],
            score: num(8)?,
        });
    }
    Ok(out)
}
