//! Positional cross-match: for every row of a MyDB table, all catalog rows
//! within a given angular radius.
//!
//! Candidates come from a declination band and right-ascension window (an
//! index range scan when `dec` is indexed); the haversine separation is the
//! final filter, so the window only has to be a superset of the true cone.

use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::engine::{table_columns, Value};
use crate::error::{Error, Result};
use crate::rewriter::quote_ident;

/// Padding added to every pruning bound, in degrees.
const WINDOW_EPS_DEG: f64 = 1e-9;

/// Above this |dec| the RA window is the whole ring.
const POLAR_CAP_DEG: f64 = 89.9;

pub const MAX_RADIUS_ARCMIN: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkyPosition {
    pub ra: f64,
    pub dec: f64,
}

impl SkyPosition {
    /// Wraps `ra` into [0, 360); rejects declinations outside [-90, 90].
    pub fn new(ra: f64, dec: f64) -> Result<Self> {
        if !ra.is_finite() || !dec.is_finite() || !(-90.0..=90.0).contains(&dec) {
            return Err(Error::Invalid(format!("position ({ra}, {dec}) is not on the sky")));
        }
        let mut ra = ra.rem_euclid(360.0);
        if ra >= 360.0 {
            ra = 0.0;
        }
        Ok(SkyPosition { ra, dec })
    }
}

/// Great-circle separation in degrees (haversine form).
pub fn separation_deg(a: SkyPosition, b: SkyPosition) -> f64 {
    let (p1, p2) = (a.dec.to_radians(), b.dec.to_radians());
    let dp = p2 - p1;
    let dl = (b.ra - a.ra).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    (2.0 * h.sqrt().min(1.0).asin()).to_degrees()
}

/// Inclusive RA ranges in [0, 360] that contain every point within
/// `radius_deg` of `c`.
///
/// The half-width is the exact maximum RA offset on the cone,
/// asin(sin r / cos dec), which is slightly wider than r / cos dec.
pub fn ra_windows(c: SkyPosition, radius_deg: f64) -> Vec<(f64, f64)> {
    let full = vec![(0.0, 360.0)];
    if c.dec.abs() > POLAR_CAP_DEG || c.dec + radius_deg >= 90.0 || c.dec - radius_deg <= -90.0 {
        return full;
    }
    let s = radius_deg.to_radians().sin() / c.dec.to_radians().cos();
    if s >= 1.0 {
        return full;
    }
    let half = s.asin().to_degrees() + WINDOW_EPS_DEG;
    if half >= 180.0 {
        return full;
    }
    let (lo, hi) = (c.ra - half, c.ra + half);
    if lo < 0.0 {
        vec![(0.0, hi), (lo + 360.0, 360.0)]
    } else if hi >= 360.0 {
        vec![(lo, 360.0), (0.0, hi - 360.0)]
    } else {
        vec![(lo, hi)]
    }
}

pub fn dec_band(c: SkyPosition, radius_deg: f64) -> (f64, f64) {
    (c.dec - radius_deg - WINDOW_EPS_DEG, c.dec + radius_deg + WINDOW_EPS_DEG)
}

/// Column roles for one side of a match.
#[derive(Debug, Clone)]
pub struct Coords {
    pub id: Option<String>,
    pub ra: String,
    pub dec: String,
}

/// Finds the coordinate columns of `table`; the id defaults to the first of
/// `id`, `obj_id`, `objid`, else the rowid.
pub fn resolve_coords(conn: &Connection, table: &str, ra: &str, dec: &str, id: Option<&str>) -> Result<Coords> {
    let cols = table_columns(conn, table)?;
    let find = |n: &str| cols.iter().find(|c| c.name.eq_ignore_ascii_case(n)).map(|c| c.name.clone());
    let (Some(ra), Some(dec)) = (find(ra), find(dec)) else {
        return Err(Error::MissingCoordinates(table.to_string()));
    };
    let id = match id {
        Some(i) => Some(find(i).ok_or_else(|| Error::Invalid(format!("{table} has no column {i}")))?),
        None => ["id", "obj_id", "objid"].iter().find_map(|n| find(n)),
    };
    Ok(Coords { id, ra, dec })
}

pub fn validate_radius(radius_arcmin: f64) -> Result<()> {
    if radius_arcmin > 0.0 && radius_arcmin <= MAX_RADIUS_ARCMIN {
        Ok(())
    } else {
        Err(Error::RadiusOutOfRange(radius_arcmin))
    }
}

/// Streams every (my_id, match_id, dist_arcmin) pair to `emit`.
pub fn cross_match(
    mine: &Connection,
    my_table: &str,
    my_cols: &Coords,
    catalog: &Connection,
    cat_table: &str,
    cat_cols: &Coords,
    radius_arcmin: f64,
    emit: &mut dyn FnMut(Value, Value, f64) -> Result<()>,
) -> Result<u64> {
    validate_radius(radius_arcmin)?;
    let r = radius_arcmin / 60.0;
    let id_expr = |c: &Coords| c.id.as_deref().map(quote_ident).unwrap_or_else(|| "rowid".into());

    let mut outer = mine.prepare(&format!(
        "SELECT {}, {}, {} FROM {}",
        id_expr(my_cols),
        quote_ident(&my_cols.ra),
        quote_ident(&my_cols.dec),
        quote_ident(my_table)
    ))?;
    let (cra, cdec) = (quote_ident(&cat_cols.ra), quote_ident(&cat_cols.dec));
    let mut inner = catalog.prepare(&format!(
        "SELECT {}, {cra}, {cdec} FROM {} WHERE {cdec} BETWEEN ?1 AND ?2 \
         AND ({cra} BETWEEN ?3 AND ?4 OR {cra} BETWEEN ?5 AND ?6)",
        id_expr(cat_cols),
        quote_ident(cat_table)
    ))?;

    let mut pairs = 0u64;
    let mut rows = outer.query([])?;
    while let Some(row) = rows.next()? {
        let my_id = Value::from_ref(row.get_ref(0)?);
        let (Some(ra), Some(dec)) = (Value::from_ref(row.get_ref(1)?).as_f64(), Value::from_ref(row.get_ref(2)?).as_f64())
        else {
            continue;
        };
        let c = SkyPosition::new(ra, dec)?;
        let (d0, d1) = dec_band(c, r);
        let w = ra_windows(c, r);
        let (a, b) = (w[0], w.get(1).copied().unwrap_or((1.0, 0.0)));
        let mut cands = inner.query(rusqlite::params![d0, d1, a.0, a.1, b.0, b.1])?;
        while let Some(m) = cands.next()? {
            let (Some(mra), Some(mdec)) = (Value::from_ref(m.get_ref(1)?).as_f64(), Value::from_ref(m.get_ref(2)?).as_f64())
            else {
                continue;
            };
            let p = SkyPosition { ra: mra, dec: mdec };
            let sep = separation_deg(c, p);
            if sep <= r {
                emit(my_id.clone(), Value::from_ref(m.get_ref(0)?), sep * 60.0)?;
                pairs += 1;
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(ra: f64, dec: f64) -> SkyPosition {
        SkyPosition::new(ra, dec).unwrap()
    }

    #[test]
    fn pure_dec_offset() {
        let d = separation_deg(pos(10.0, 0.0), pos(10.0, 0.5)) * 60.0;
        assert!((d - 30.0).abs() <= 30.0 * 1e-9, "{d}");
    }

    #[test]
    fn self_separation_is_zero() {
        assert_eq!(separation_deg(pos(123.4, -56.7), pos(123.4, -56.7)), 0.0);
    }

    #[test]
    fn ra_normalization() {
        assert_eq!(pos(-1.0, 0.0).ra, 359.0);
        assert_eq!(pos(360.0, 0.0).ra, 0.0);
        assert!(SkyPosition::new(0.0, 90.5).is_err());
    }

    #[test]
    fn windows_wrap() {
        let w = ra_windows(pos(0.001, 10.0), 0.01);
        assert_eq!(w.len(), 2);
        assert!(w.iter().any(|&(lo, hi)| lo <= 359.999 && hi == 360.0));
        assert_eq!(ra_windows(pos(50.0, 89.95), 0.01), vec![(0.0, 360.0)]);
        assert_eq!(ra_windows(pos(50.0, 89.5), 0.6), vec![(0.0, 360.0)]);
    }

    #[test]
    fn window_covers_cone_edge() {
        // the point of maximum RA offset on the cone must fall inside
        let (c, r) = (pos(180.0, 60.0), 1.0);
        let half = ra_windows(c, r)[0].1 - 180.0;
        let tangent_dec = (c.dec.to_radians().sin() / r.to_radians().cos()).asin().to_degrees();
        let edge = pos(180.0 + half, tangent_dec);
        assert!(separation_deg(c, edge) >= r - 1e-9);
        assert!(half > r / c.dec.to_radians().cos());
    }

    #[test]
    fn radius_bounds() {
        assert!(validate_radius(0.0).is_err());
        assert!(validate_radius(60.0).is_ok());
        assert!(matches!(validate_radius(61.0), Err(Error::RadiusOutOfRange(_))));
    }
}
