//! Distances, bearings and areas on the Earth.
//!
//! Lengths use the haversine formula on a sphere of radius
//! [`EARTH_RADIUS_M`]; polygon areas are geodesic areas on the WGS84
//! ellipsoid.

use geo::GeodesicArea;

use super::{GeoPoint, Polygon};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn polyline_length_m(points: &[GeoPoint]) -> f64 {
    points.windows(2).map(|w| haversine_m(w[0], w[1])).sum()
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from north in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Unsigned geodesic area (m²) of a polygon on the WGS84 ellipsoid.
pub fn polygon_area_m2(polygon: &Polygon) -> f64 {
    polygon.to_geo().geodesic_area_unsigned()
}

pub fn geo_area_m2(polygon: &geo::Polygon<f64>) -> f64 {
    polygon.geodesic_area_unsigned()
}

pub fn multi_area_m2(mp: &geo::MultiPolygon<f64>) -> f64 {
    mp.geodesic_area_unsigned()
}

/// Azimuthal-equidistant projection centred on `center`, returning
/// (east, north) in meters.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjection {
    lon0: f64,
    sin_lat0: f64,
    cos_lat0: f64,
}

impl LocalProjection {
    pub fn new(center: GeoPoint) -> Self {
        let lat0 = center.lat.to_radians();
        LocalProjection {
            lon0: center.lon,
            sin_lat0: lat0.sin(),
            cos_lat0: lat0.cos(),
        }
    }

    pub fn forward(&self, p: GeoPoint) -> (f64, f64) {
        let phi = p.lat.to_radians();
        let dlambda = (p.lon - self.lon0).to_radians();
        let (sin_phi, cos_phi) = phi.sin_cos();
        let cos_c = (self.sin_lat0 * sin_phi + self.cos_lat0 * cos_phi * dlambda.cos()).clamp(-1.0, 1.0);
        let c = cos_c.acos();
        let k = if c < 1e-12 { 1.0 } else { c / c.sin() };
        let x = k * cos_phi * dlambda.sin();
        let y = k * (self.cos_lat0 * sin_phi - self.sin_lat0 * cos_phi * dlambda.cos());
        (EARTH_RADIUS_M * x, EARTH_RADIUS_M * y)
    }

    pub fn inverse(&self, x: f64, y: f64) -> GeoPoint {
        let rho = (x * x + y * y).sqrt();
        let lat0 = self.sin_lat0.atan2(self.cos_lat0);
        if rho < 1e-9 {
            return GeoPoint::new(self.lon0, lat0.to_degrees());
        }
        let c = rho / EARTH_RADIUS_M;
        let (sin_c, cos_c) = c.sin_cos();
        let phi = (cos_c * self.sin_lat0 + y * sin_c * self.cos_lat0 / rho).asin();
        let dlambda = (x * sin_c).atan2(rho * self.cos_lat0 * cos_c - y * self.sin_lat0 * sin_c);
        GeoPoint::new(self.lon0 + dlambda.to_degrees(), phi.to_degrees())
    }
}
