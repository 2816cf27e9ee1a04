//! OSM XML (`.osm`) reader.

use std::collections::HashMap;

use super::{close_ring, GeoPoint, LandUse, Polygon, RawWay, UrbanExtract};
use crate::error::{Error, Result};

/// Node tags that mark a point of interest.
const POI_KEYS: [&str; 6] = ["amenity", "shop", "tourism", "leisure", "office", "craft"];

pub fn parse_osm_xml(text: &str) -> Result<UrbanExtract> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        Error::Parse {
            line: pos.row as usize,
            column: pos.col as usize,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "osm" {
        return Err(Error::Format(format!(
            "root element is <{}>, expected <osm>",
            root.tag_name().name()
        )));
    }

    let mut nodes: HashMap<i64, GeoPoint> = HashMap::new();
    let mut extract = UrbanExtract::default();

    for node in root.children().filter(|n| n.has_tag_name("node")) {
        let id = attr_i64(&doc, node, "id")?;
        let lat = attr_f64(&doc, node, "lat")?;
        let lon = attr_f64(&doc, node, "lon")?;
        let p = GeoPoint::new(lon, lat);
        nodes.insert(id, p);
        let is_poi = node
            .children()
            .filter(|t| t.has_tag_name("tag"))
            .any(|t| t.attribute("k").is_some_and(|k| POI_KEYS.contains(&k)));
        if is_poi {
            extract.points.entry("poi".to_string()).or_default().push(p);
        }
    }

    for way in root.children().filter(|n| n.has_tag_name("way")) {
        let mut tags: HashMap<&str, &str> = HashMap::new();
        for t in way.children().filter(|t| t.has_tag_name("tag")) {
            if let (Some(k), Some(v)) = (t.attribute("k"), t.attribute("v")) {
                tags.insert(k, v);
            }
        }
        let mut points = Vec::new();
        let mut missing = false;
        for nd in way.children().filter(|n| n.has_tag_name("nd")) {
            let r = attr_i64(&doc, nd, "ref")?;
            match nodes.get(&r) {
                Some(p) => points.push(*p),
                None => missing = true,
            }
        }
        if missing {
            log::warn!("way {:?} references missing nodes; dropped", way.attribute("id"));
            extract.dropped_ways += 1;
            continue;
        }
        if let Some(hw) = tags.get("highway") {
            if points.len() >= 2 {
                extract.roads.push(RawWay {
                    highway: hw.to_string(),
                    points,
                });
            }
        } else if tags.contains_key("building") {
            if let Some(poly) = closed_polygon(points) {
                extract.buildings.push(poly);
            }
        } else if let Some(lu) = tags.get("landuse") {
            if let Some(polygon) = closed_polygon(points) {
                extract.landuse.push(LandUse {
                    polygon,
                    category: lu.to_string(),
                });
            }
        }
    }
    Ok(extract)
}

fn closed_polygon(mut ring: Vec<GeoPoint>) -> Option<Polygon> {
    // OSM areas repeat the first node; open ways are not areas
    if ring.first() != ring.last() {
        return None;
    }
    close_ring(&mut ring)?;
    Some(Polygon {
        exterior: ring,
        holes: Vec::new(),
    })
}

fn attr<'a>(doc: &roxmltree::Document, node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str> {
    node.attribute(name).ok_or_else(|| parse_err(doc, node, format!("missing attribute `{name}`")))
}

fn attr_i64(doc: &roxmltree::Document, node: roxmltree::Node, name: &str) -> Result<i64> {
    attr(doc, node, name)?
        .parse()
        .map_err(|_| parse_err(doc, node, format!("attribute `{name}` is not an integer")))
}

fn attr_f64(doc: &roxmltree::Document, node: roxmltree::Node, name: &str) -> Result<f64> {
    let v: f64 = attr(doc, node, name)?
        .parse()
        .map_err(|_| parse_err(doc, node, format!("attribute `{name}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(doc, node, format!("attribute `{name}` is not finite")));
    }
    Ok(v)
}

fn parse_err(doc: &roxmltree::Document, node: roxmltree::Node, message: String) -> Error {
    let pos = doc.text_pos_at(node.range().start);
    Error::Parse {
        line: pos.row as usize,
        column: pos.col as usize,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_node_references_are_counted() {
        let xml = r#"<osm>
  <node id="1" lat="0" lon="0"/>
  <node id="2" lat="0" lon="0.001"/>
  <way id="5"><nd ref="1"/><nd ref="9"/><tag k="highway" v="primary"/></way>
  <way id="6"><nd ref="1"/><nd ref="2"/><tag k="highway" v="footway"/></way>
</osm>"#;
        let e = parse_osm_xml(xml).unwrap();
        assert_eq!(e.dropped_ways, 1);
        assert_eq!(e.roads.len(), 1);
        assert_eq!(e.roads[0].highway, "footway");
    }

    #[test]
    fn buildings_landuse_and_pois() {
        let xml = r#"<osm>
  <node id="1" lat="0" lon="0"/>
  <node id="2" lat="0" lon="0.001"/>
  <node id="3" lat="0.001" lon="0.001"/>
  <node id="4" lat="0.0005" lon="0.0005"><tag k="amenity" v="cafe"/></node>
  <way id="7"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/><tag k="building" v="yes"/></way>
  <way id="8"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/><tag k="landuse" v="retail"/></way>
  <way id="9"><nd ref="1"/><nd ref="2"/><nd ref="3"/><tag k="building" v="yes"/></way>
</osm>"#;
        let e = parse_osm_xml(xml).unwrap();
        assert_eq!(e.buildings.len(), 1);
        assert_eq!(e.landuse.len(), 1);
        assert_eq!(e.landuse[0].category, "retail");
        assert_eq!(e.point_set("poi"), &[GeoPoint::new(0.0005, 0.0005)]);
    }

    #[test]
    fn bad_coordinate_reports_position() {
        let xml = "<osm>\n  <node id=\"1\" lat=\"abc\" lon=\"0\"/>\n</osm>";
        match parse_osm_xml(xml) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_root_is_format_error() {
        assert!(matches!(parse_osm_xml("<gpx></gpx>"), Err(Error::Format(_))));
    }
}
