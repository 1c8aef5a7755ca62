use std::path::Path;

use rusqlite::Connection;

use super::{BucketSource, RiderQuery};
use crate::engine::{self, Value};
use crate::error::{Error, Result};
use crate::executor::{infer_schema, RowBatch};
use crate::rewriter::quote_ident;

/// Buckets are equal rowid ranges of a catalog table. The current bucket is
/// copied into a temp table of the same name, which shadows the catalog
/// table for unqualified references.
pub struct SqliteBucketSource {
    conn: Connection,
    table: String,
    shadow: String,
    lo: i64,
    hi: i64,
}

impl SqliteBucketSource {
    pub fn open(catalog: &Path, table: &str) -> Result<Self> {
        let conn = engine::open_catalog(catalog)?;
        if !engine::table_exists(&conn, "main", table)? {
            return Err(Error::UnknownTable(table.to_string()));
        }
        let cols = engine::table_columns(&conn, table)?;
        let q = quote_ident(table);
        let defs: Vec<String> = cols.iter().map(|c| format!("{} {}", quote_ident(&c.name), c.ty.sql_name())).collect();
        conn.execute_batch(&format!("CREATE TEMP TABLE {q} ({})", defs.join(", ")))?;
        let (lo, hi): (Option<i64>, Option<i64>) =
            conn.query_row(&format!("SELECT MIN(rowid), MAX(rowid) FROM main.{q}"), [], |r| Ok((r.get(0)?, r.get(1)?)))?;
        Ok(SqliteBucketSource {
            conn,
            table: table.to_string(),
            shadow: format!("temp.{q}"),
            lo: lo.unwrap_or(1),
            hi: hi.unwrap_or(0),
        })
    }

    /// Rowid range `[start, end)` of bucket `index`.
    pub fn bucket_range(&self, index: usize, n_buckets: usize) -> (i64, i64) {
        let span = (self.hi as i128 - self.lo as i128 + 1).max(0);
        let at = |k: usize| (self.lo as i128 + span * k as i128 / n_buckets as i128) as i64;
        (at(index), at(index + 1))
    }

    /// Prepares the rider's statement so bad column names fail at boarding.
    pub fn validate(&self, query: &RiderQuery) -> Result<()> {
        self.conn.prepare_cached(&query.sql_against(&self.shadow))?;
        Ok(())
    }

    pub fn table(&self) -> &str {
        &self.table
    }
}

impl BucketSource for SqliteBucketSource {
    fn load_bucket(&mut self, index: usize, n_buckets: usize) -> Result<u64> {
        let (start, end) = self.bucket_range(index, n_buckets);
        let q = quote_ident(&self.table);
        self.conn.execute(&format!("DELETE FROM {}", self.shadow), [])?;
        let n = self.conn.execute(
            &format!("INSERT INTO {} SELECT * FROM main.{q} WHERE rowid >= ?1 AND rowid < ?2", self.shadow),
            [start, end],
        )?;
        Ok(n as u64)
    }

    fn evaluate(&mut self, query: &RiderQuery) -> Result<RowBatch> {
        let mut stmt = self.conn.prepare_cached(&query.sql_against(&self.shadow))?;
        let n = stmt.column_count();
        let mut rows = Vec::new();
        {
            let mut cursor = stmt.query([])?;
            while let Some(r) = cursor.next()? {
                rows.push((0..n).map(|i| r.get_ref(i).map(Value::from_ref)).collect::<rusqlite::Result<Vec<_>>>()?);
            }
        }
        let columns = infer_schema(&stmt, &rows);
        Ok(RowBatch { columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{write_catalog, CatalogSpec};
    use crate::ferris::{ScanWheel, VecSink};
    use std::sync::{Arc, Mutex};

    #[test]
    fn one_revolution_equals_plain_query() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("C.db");
        write_catalog(CatalogSpec { n_rows: 1000, seed: 4 }, &path).unwrap();
        let mut src = SqliteBucketSource::open(&path, "galaxy").unwrap();

        let ranges: Vec<_> = (0..7).map(|k| src.bucket_range(k, 7)).collect();
        assert_eq!(ranges[0].0, 1);
        assert_eq!(ranges[6].1, 1001);
        assert!(ranges.windows(2).all(|w| w[0].1 == w[1].0));

        let mut wheel = ScanWheel::new("C", "galaxy", 7);
        let sink = Arc::new(Mutex::new(VecSink::default()));
        wheel.step(&mut src).unwrap();
        wheel.admit_sql("SELECT obj_id, r FROM galaxy WHERE r < 16", Box::new(sink.clone())).unwrap();
        while wheel.step(&mut src).unwrap().is_some() {}

        let mut got: Vec<Vec<Value>> = sink.lock().unwrap().batches.iter().flat_map(|b| b.rows.clone()).collect();
        got.sort_by_key(|r| match r[0] {
            Value::Integer(i) => i,
            _ => 0,
        });
        let plain = engine::open_catalog(&path).unwrap();
        let mut stmt = plain.prepare("SELECT obj_id, r FROM galaxy WHERE r < 16 ORDER BY obj_id").unwrap();
        let want: Vec<Vec<Value>> = stmt
            .query_map([], |r| Ok(vec![Value::Integer(r.get(0)?), Value::Float(r.get(1)?)]))
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert!(!want.is_empty());
        assert_eq!(got, want);
        let b = &sink.lock().unwrap().batches[0];
        assert_eq!(b.columns[0].ty, engine::ColumnType::Integer);
    }

    #[test]
    fn bad_column_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("C.db");
        write_catalog(CatalogSpec { n_rows: 10, seed: 4 }, &path).unwrap();
        let src = SqliteBucketSource::open(&path, "galaxy").unwrap();
        let q = crate::ferris::parse_rider_query("SELECT nope FROM galaxy").unwrap();
        assert!(src.validate(&q).is_err());
        assert!(SqliteBucketSource::open(&path, "star").is_err());
    }
}
