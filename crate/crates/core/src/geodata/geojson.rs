//! GeoJSON FeatureCollection reader and writer.
//!
//! Feature roles: `LineString` with a `highway` property is a road;
//! `Polygon`/`MultiPolygon` with a `landuse` property is land use, any other
//! polygon is a building footprint; `Point` with a `kind` property joins the
//! point set of that name.

use serde_json::{json, Map, Value};

use super::{close_ring, GeoPoint, LandUse, Polygon, RawWay, UrbanExtract};
use crate::error::{Error, Result};

pub fn parse_geojson(text: &str) -> Result<UrbanExtract> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::Format("GeoJSON root must be a FeatureCollection".into()));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("FeatureCollection without `features` array".into()))?;
    let mut extract = UrbanExtract {
        dropped_ways: root.get("dropped_ways").and_then(Value::as_u64).unwrap_or(0) as usize,
        ..Default::default()
    };
    for (i, f) in features.iter().enumerate() {
        let Some(geom) = f.get("geometry").filter(|g| !g.is_null()) else {
            continue;
        };
        let props = f.get("properties").and_then(Value::as_object);
        let prop = |k: &str| props.and_then(|p| p.get(k)).and_then(Value::as_str);
        let gtype = geom.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geom.get("coordinates").ok_or_else(|| feature_err(i, "geometry without coordinates"))?;
        match gtype {
            "LineString" | "MultiLineString" => {
                let Some(hw) = prop("highway") else { continue };
                let lines = if gtype == "LineString" {
                    vec![positions(coords, i)?]
                } else {
                    array(coords, i)?.iter().map(|c| positions(c, i)).collect::<Result<_>>()?
                };
                for points in lines.into_iter().filter(|l| l.len() >= 2) {
                    extract.roads.push(RawWay { highway: hw.to_string(), points });
                }
            }
            "Polygon" | "MultiPolygon" => {
                let polys = if gtype == "Polygon" {
                    vec![polygon(coords, i)?]
                } else {
                    array(coords, i)?.iter().map(|c| polygon(c, i)).collect::<Result<_>>()?
                };
                for poly in polys.into_iter().flatten() {
                    match prop("landuse") {
                        Some(cat) => extract.landuse.push(LandUse { polygon: poly, category: cat.to_string() }),
                        None => extract.buildings.push(poly),
                    }
                }
            }
            "Point" => {
                let Some(kind) = prop("kind") else { continue };
                let p = position(coords, i)?;
                extract.points.entry(kind.to_string()).or_default().push(p);
            }
            "MultiPoint" => {
                let Some(kind) = prop("kind") else { continue };
                let pts = positions(coords, i)?;
                extract.points.entry(kind.to_string()).or_default().extend(pts);
            }
            other => log::debug!("feature {i}: ignoring geometry type {other}"),
        }
    }
    Ok(extract)
}

fn feature_err(i: usize, msg: &str) -> Error {
    Error::Format(format!("feature {i}: {msg}"))
}

fn array(v: &Value, i: usize) -> Result<&Vec<Value>> {
    v.as_array().ok_or_else(|| feature_err(i, "expected coordinate array"))
}

fn position(v: &Value, i: usize) -> Result<GeoPoint> {
    let a = array(v, i)?;
    match (a.first().and_then(Value::as_f64), a.get(1).and_then(Value::as_f64)) {
        (Some(lon), Some(lat)) => Ok(GeoPoint::new(lon, lat)),
        _ => Err(feature_err(i, "position needs two numbers")),
    }
}

fn positions(v: &Value, i: usize) -> Result<Vec<GeoPoint>> {
    array(v, i)?.iter().map(|p| position(p, i)).collect()
}

fn polygon(v: &Value, i: usize) -> Result<Option<Polygon>> {
    let mut rings = array(v, i)?.iter().map(|r| positions(r, i));
    let Some(mut exterior) = rings.next().transpose()? else {
        return Ok(None);
    };
    if close_ring(&mut exterior).is_none() {
        return Ok(None);
    }
    let mut holes = Vec::new();
    for r in rings {
        let mut r = r?;
        if close_ring(&mut r).is_some() {
            holes.push(r);
        }
    }
    Ok(Some(Polygon { exterior, holes }))
}

fn coords(points: &[GeoPoint]) -> Value {
    Value::Array(points.iter().map(|p| json!([p.lon, p.lat])).collect())
}

fn polygon_coords(p: &Polygon) -> Value {
    let mut rings = vec![coords(&p.exterior)];
    rings.extend(p.holes.iter().map(|h| coords(h)));
    Value::Array(rings)
}

fn feature(geometry: Value, props: Map<String, Value>) -> Value {
    json!({ "type": "Feature", "properties": props, "geometry": geometry })
}

/// Serializes an extract as a FeatureCollection, one feature per line, in
/// the order roads, buildings, land use, points.
pub fn extract_to_geojson(extract: &UrbanExtract) -> String {
    let mut features = Vec::new();
    for r in &extract.roads {
        let mut p = Map::new();
        p.insert("highway".into(), r.highway.clone().into());
        features.push(feature(json!({"type": "LineString", "coordinates": coords(&r.points)}), p));
    }
    for b in &extract.buildings {
        let mut p = Map::new();
        p.insert("building".into(), "yes".into());
        features.push(feature(json!({"type": "Polygon", "coordinates": polygon_coords(b)}), p));
    }
    for l in &extract.landuse {
        let mut p = Map::new();
        p.insert("landuse".into(), l.category.clone().into());
        features.push(feature(json!({"type": "Polygon", "coordinates": polygon_coords(&l.polygon)}), p));
    }
    for (kind, pts) in &extract.points {
        for pt in pts {
            let mut p = Map::new();
            p.insert("kind".into(), kind.clone().into());
            features.push(feature(json!({"type": "Point", "coordinates": [pt.lon, pt.lat]}), p));
        }
    }
    let mut out = String::from("{\"type\":\"FeatureCollection\",");
    out.push_str(&format!("\"dropped_ways\":{},\"features\":[", extract.dropped_ways));
    for (i, f) in features.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&f.to_string());
    }
    out.push_str("\n]}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_by_property() {
        let text = r#"{"type":"FeatureCollection","features":[
 {"type":"Feature","properties":{"highway":"residential"},"geometry":{"type":"LineString","coordinates":[[0,0],[0.001,0]]}},
 {"type":"Feature","properties":{"name":"x"},"geometry":{"type":"LineString","coordinates":[[0,0],[0.001,0]]}},
 {"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0,0],[0.001,0],[0.001,0.001],[0,0]]]}},
 {"type":"Feature","properties":{"landuse":"park"},"geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[0.001,0],[0.001,0.001]]]]}},
 {"type":"Feature","properties":{"kind":"tweet"},"geometry":{"type":"Point","coordinates":[0.0002,0.0003]}},
 {"type":"Feature","properties":{},"geometry":{"type":"Point","coordinates":[0.0002,0.0003]}},
 {"type":"Feature","properties":{"kind":"tweet"},"geometry":null}
]}"#;
        let e = parse_geojson(text).unwrap();
        assert_eq!(e.roads.len(), 1);
        assert_eq!(e.buildings.len(), 1);
        assert_eq!(e.landuse.len(), 1);
        assert_eq!(e.landuse[0].polygon.exterior.len(), 4);
        assert_eq!(e.point_set("tweet").len(), 1);
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_geojson("{\"type\":\n\"FeatureCollection\",,}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn not_a_collection() {
        assert!(matches!(parse_geojson(r#"{"type":"Feature"}"#), Err(Error::Format(_))));
    }
}
