use proptest::prelude::*;

use casbatch_core::engine::{Column, ColumnType, Value};
use casbatch_core::model::TableFormat;
use casbatch_core::mydb::formats;
use casbatch_core::mydb::xmatch::{dec_band, ra_windows, separation_deg, SkyPosition};
use casbatch_core::rewriter::extract_into;

fn offset(c: SkyPosition, dist_deg: f64, bearing: f64) -> SkyPosition {
    // destination point on the sphere
    let (d, th) = (dist_deg.to_radians(), bearing);
    let (p1, l1) = (c.dec.to_radians(), c.ra.to_radians());
    let p2 = (p1.sin() * d.cos() + p1.cos() * d.sin() * th.cos()).asin();
    let l2 = l1 + (th.sin() * d.sin() * p1.cos()).atan2(d.cos() - p1.sin() * p2.sin());
    SkyPosition::new(l2.to_degrees(), p2.to_degrees().clamp(-90.0, 90.0)).unwrap()
}

proptest! {
    #[test]
    fn search_box_covers_the_cone(
        ra in 0.0..360.0f64,
        dec in -89.0..89.0f64,
        r_arcmin in 0.01..60.0f64,
        frac in 0.0..0.999f64,
        bearing in 0.0..std::f64::consts::TAU,
    ) {
        let c = SkyPosition::new(ra, dec).unwrap();
        let r = r_arcmin / 60.0;
        let p = offset(c, r * frac, bearing);
        prop_assume!(separation_deg(c, p) <= r);
        let (lo, hi) = dec_band(c, r);
        prop_assert!(p.dec >= lo && p.dec <= hi, "dec {} outside [{lo}, {hi}]", p.dec);
        prop_assert!(
            ra_windows(c, r).iter().any(|&(a, b)| p.ra >= a && p.ra <= b),
            "ra {} outside {:?}", p.ra, ra_windows(c, r)
        );
    }

    #[test]
    fn separation_is_symmetric_and_wraps(ra in 0.0..360.0f64, dec in -90.0..90.0f64, ra2 in 0.0..360.0f64, dec2 in -90.0..90.0f64) {
        let a = SkyPosition::new(ra, dec).unwrap();
        let b = SkyPosition::new(ra2, dec2).unwrap();
        let shifted = SkyPosition::new(ra2 + 360.0, dec2).unwrap();
        prop_assert!((separation_deg(a, b) - separation_deg(b, a)).abs() < 1e-12);
        prop_assert!((separation_deg(a, b) - separation_deg(a, shifted)).abs() < 1e-9);
        prop_assert!(separation_deg(a, b) <= 180.0 + 1e-12);
    }

    #[test]
    fn typed_rows_survive_a_format_round_trip(
        rows in prop::collection::vec((any::<i64>(), -1e12..1e12f64, "[a-z][a-z0-9 ,\"<&]{0,10}"), 1..40),
        votable in any::<bool>(),
    ) {
        let format = if votable { TableFormat::VoTable } else { TableFormat::Csv };
        let columns = vec![
            Column::new("n", ColumnType::Integer),
            Column::new("x", ColumnType::Float),
            Column::new("s", ColumnType::Text),
        ];
        let values: Vec<Vec<Value>> = rows
            .iter()
            .map(|(n, x, s)| vec![Value::Integer(*n), Value::Float(*x), Value::Text(s.clone())])
            .collect();
        let mut buf = Vec::new();
        formats::write_rowset(&mut buf, format, "t", &columns, &values).unwrap();
        let mut src = formats::open_source(&buf[..], format).unwrap();
        prop_assert_eq!(src.columns().iter().map(|c| c.ty).collect::<Vec<_>>(), columns.iter().map(|c| c.ty).collect::<Vec<_>>());
        let mut back = Vec::new();
        loop {
            let chunk = src.next_chunk(7).unwrap();
            if chunk.is_empty() {
                break;
            }
            back.extend(chunk);
        }
        prop_assert_eq!(back, values);
    }

    #[test]
    fn into_is_lifted_out_of_the_select_list(
        cols in prop::collection::vec("[a-z][a-z0-9_]{0,6}", 1..5),
        dest in "[a-z][a-z0-9_]{0,8}",
        table in "[a-z][a-z0-9_]{0,8}",
    ) {
        let list = cols.join(", ");
        let x = extract_into(&format!("SELECT {list} INTO MyDB.{dest} FROM {table}")).unwrap();
        prop_assert_eq!(x.dest.as_deref(), Some(dest.as_str()));
        prop_assert_eq!(x.clean_sql, format!("SELECT {list} FROM {table}"));
    }
}
