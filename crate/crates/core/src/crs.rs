//! WGS84 geographic and UTM coordinate systems.
//!
//! Transverse Mercator uses the Krüger series in the third flattening `n`
//! (terms through `n^4`), which is accurate to well under a millimetre
//! within a UTM zone.

use alloc::format;
use alloc::string::String;
use core::f64::consts::PI;
use core::fmt;

use libm::{asin, atan, atan2, atanh, cos, cosh, sin, sinh, sqrt};

use crate::error::{Error, Result};

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
pub const UTM_K0: f64 = 0.9996;
pub const UTM_FALSE_EASTING: f64 = 500_000.0;
pub const UTM_FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

/// Coordinate reference systems the pipeline understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crs {
    /// EPSG:4326, axis order (lon, lat) in this crate.
    Wgs84,
    Utm { zone: u8, north: bool },
}

impl Crs {
    /// Accepts `EPSG:4326`, `EPSG:326zz` and `EPSG:327zz` (case-insensitive).
    pub fn parse(s: &str) -> Result<Crs> {
        let t = s.trim();
        let code = t
            .get(..5)
            .filter(|p| p.eq_ignore_ascii_case("EPSG:"))
            .and_then(|_| t[5..].parse::<u32>().ok())
            .ok_or_else(|| Error::Parse(format!("unrecognized CRS {s:?}")))?;
        match code {
            4326 => Ok(Crs::Wgs84),
            32601..=32660 => Ok(Crs::Utm { zone: (code - 32600) as u8, north: true }),
            32701..=32760 => Ok(Crs::Utm { zone: (code - 32700) as u8, north: false }),
            _ => Err(Error::Parse(format!("unsupported EPSG code {code}"))),
        }
    }

    pub fn epsg(&self) -> u32 {
        match *self {
            Crs::Wgs84 => 4326,
            Crs::Utm { zone, north: true } => 32600 + zone as u32,
            Crs::Utm { zone, north: false } => 32700 + zone as u32,
        }
    }

    /// Map coordinates `(x, y)` to `(lon, lat)` in degrees.
    pub fn to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Crs::Wgs84 => (x, y),
            Crs::Utm { zone, north } => {
                let n = if north { y } else { y - UTM_FALSE_NORTHING_SOUTH };
                let (lat, lon) = tm_inverse(central_meridian(zone), x - UTM_FALSE_EASTING, n);
                (lon, lat)
            }
        }
    }

    /// `(lon, lat)` in degrees to map coordinates.
    pub fn from_lonlat(&self, lon: f64, lat: f64) -> (f64, f64) {
        match *self {
            Crs::Wgs84 => (lon, lat),
            Crs::Utm { zone, north } => {
                let (e, n) = tm_forward(central_meridian(zone), lat, lon);
                (e + UTM_FALSE_EASTING, if north { n } else { n + UTM_FALSE_NORTHING_SOUTH })
            }
        }
    }
}

impl fmt::Display for Crs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EPSG:{}", self.epsg())
    }
}

impl From<Crs> for String {
    fn from(c: Crs) -> String {
        format!("{c}")
    }
}

pub fn central_meridian(zone: u8) -> f64 {
    zone as f64 * 6.0 - 183.0
}

struct Series {
    n: f64,
    a_hat: f64,
    alpha: [f64; 4],
    beta: [f64; 4],
    delta: [f64; 4],
}

fn series() -> Series {
    let n = WGS84_F / (2.0 - WGS84_F);
    let (n2, n3, n4) = (n * n, n * n * n, n * n * n * n);
    Series {
        n,
        a_hat: WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0),
        alpha: [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0,
            49561.0 * n4 / 161280.0,
        ],
        beta: [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0,
            4397.0 * n4 / 161280.0,
        ],
        delta: [
            2.0 * n - 2.0 * n2 / 3.0 - 2.0 * n3 + 116.0 * n4 / 45.0,
            7.0 * n2 / 3.0 - 8.0 * n3 / 5.0 - 227.0 * n4 / 45.0,
            56.0 * n3 / 15.0 - 136.0 * n4 / 35.0,
            4279.0 * n4 / 630.0,
        ],
    }
}

/// Latitude/longitude in degrees to `(easting, northing)` relative to the
/// central meridian and equator, scaled by `k0`.
pub fn tm_forward(lon0: f64, lat: f64, lon: f64) -> (f64, f64) {
    let s = series();
    let phi = lat.to_radians();
    let lam = (lon - lon0).to_radians();
    let c = 2.0 * sqrt(s.n) / (1.0 + s.n);
    let t = sinh(atanh(sin(phi)) - c * atanh(c * sin(phi)));
    let xi_p = atan2(t, cos(lam));
    let eta_p = atanh(sin(lam) / sqrt(1.0 + t * t));
    let (mut xi, mut eta) = (xi_p, eta_p);
    for (j, &a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi += a * sin(k * xi_p) * cosh(k * eta_p);
        eta += a * cos(k * xi_p) * sinh(k * eta_p);
    }
    (UTM_K0 * s.a_hat * eta, UTM_K0 * s.a_hat * xi)
}

/// Inverse of [`tm_forward`]; returns `(lat, lon)` in degrees.
pub fn tm_inverse(lon0: f64, e: f64, n: f64) -> (f64, f64) {
    let s = series();
    let xi = n / (UTM_K0 * s.a_hat);
    let eta = e / (UTM_K0 * s.a_hat);
    let (mut xi_p, mut eta_p) = (xi, eta);
    for (j, &b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi_p -= b * sin(k * xi) * cosh(k * eta);
        eta_p -= b * cos(k * xi) * sinh(k * eta);
    }
    let chi = asin(sin(xi_p) / cosh(eta_p));
    let mut phi = chi;
    for (j, &d) in s.delta.iter().enumerate() {
        phi += d * sin(2.0 * (j + 1) as f64 * chi);
    }
    let lam = atan(sinh(eta_p) / cos(xi_p));
    (phi.to_degrees(), lon0 + lam * 180.0 / PI)
}

/// Standard UTM zone for a point, including the Norway and Svalbard
/// exceptions.
pub fn utm_zone(lat: f64, lon: f64) -> u8 {
    let lon = if lon >= 180.0 { lon - 360.0 } else { lon };
    let mut zone = (libm::floor((lon + 180.0) / 6.0) as i32 + 1).clamp(1, 60) as u8;
    if (56.0..64.0).contains(&lat) && (3.0..12.0).contains(&lon) {
        zone = 32;
    }
    if (72.0..84.0).contains(&lat) && (0.0..42.0).contains(&lon) {
        zone = if lon < 9.0 {
            31
        } else if lon < 21.0 {
            33
        } else if lon < 33.0 {
            35
        } else {
            37
        };
    }
    zone
}

/// UTM coordinates of a point in its own zone.
pub fn to_utm(lat: f64, lon: f64) -> (Crs, f64, f64) {
    let crs = Crs::Utm { zone: utm_zone(lat, lon), north: lat >= 0.0 };
    let (e, n) = crs.from_lonlat(lon, lat);
    (crs, e, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_format() {
        assert_eq!(Crs::parse("EPSG:4326").unwrap(), Crs::Wgs84);
        assert_eq!(Crs::parse("epsg:32615").unwrap(), Crs::Utm { zone: 15, north: true });
        assert_eq!(Crs::parse("EPSG:32755").unwrap(), Crs::Utm { zone: 55, north: false });
        assert!(Crs::parse("EPSG:3857").is_err());
        assert!(Crs::parse("").is_err());
        assert_eq!(Crs::Utm { zone: 18, north: true }.to_string(), "EPSG:32618");
    }

    #[test]
    fn zone_exceptions() {
        assert_eq!(utm_zone(38.9, -77.0), 18);
        assert_eq!(utm_zone(60.0, 5.0), 32);
        assert_eq!(utm_zone(78.0, 15.0), 33);
        assert_eq!(utm_zone(0.0, 180.0), 1);
        assert_eq!(utm_zone(0.0, 179.9), 60);
    }

    #[test]
    fn central_meridian_maps_to_false_easting() {
        let crs = Crs::Utm { zone: 15, north: true };
        let (e, n) = crs.from_lonlat(-93.0, 0.0);
        assert!((e - 500_000.0).abs() < 1e-6);
        assert!(n.abs() < 1e-6);
    }

    #[test]
    fn known_point() {
        // Washington Monument area; reference 18S 323478 4306483 (1 m truncation)
        let (_, e, n) = to_utm(38.8895, -77.0353);
        assert_eq!((libm::floor(e) as i64, libm::floor(n) as i64), (323_478, 4_306_483));
    }

    proptest! {
        #[test]
        fn round_trip(lat in -79.9f64..83.9, lon in -179.9f64..179.9) {
            let (crs, e, n) = to_utm(lat, lon);
            let (lon2, lat2) = crs.to_lonlat(e, n);
            prop_assert!((lat2 - lat).abs() < 1e-9);
            prop_assert!((lon2 - lon).abs() < 1e-9);
        }
    }
}
