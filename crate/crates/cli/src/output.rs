//! Terminal output: tab-separated with a header line, or JSON with `--json`.

use std::io::{self, Write};

use serde::Serialize;

use casbatch_core::engine::Value;
use casbatch_core::executor::RowSet;
use casbatch_core::model::JobRecord;
use casbatch_core::mydb::MyDbTableInfo;

pub fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Text(s) => s.replace(['\t', '\n'], " "),
    }
}

pub fn tsv(out: &mut impl Write, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
    writeln!(out, "{}", header.join("\t"))?;
    for r in rows {
        writeln!(out, "{}", r.join("\t"))?;
    }
    Ok(())
}

pub fn json(out: &mut impl Write, v: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)
}

pub fn rowset(out: &mut impl Write, rs: &RowSet) -> io::Result<()> {
    let header: Vec<&str> = rs.columns.iter().map(|c| c.name.as_str()).collect();
    tsv(out, &header, rs.rows.iter().map(|r| r.iter().map(cell).collect()))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub fn jobs(out: &mut impl Write, jobs: &[JobRecord]) -> io::Result<()> {
    tsv(
        out,
        &["job_id", "kind", "queue", "context", "state", "rows_out", "submitted", "dest", "error"],
        jobs.iter().map(|j| {
            vec![
                j.job_id.0.to_string(),
                j.job_kind.as_str().to_string(),
                j.queue_id.clone(),
                j.context.clone(),
                j.state.as_str().to_string(),
                j.rows_out.to_string(),
                j.t_submitted.0.to_string(),
                opt(&j.dest_table),
                opt(&j.error_msg),
            ]
        }),
    )
}

/// One job as `field<TAB>value` lines.
pub fn job(out: &mut impl Write, j: &JobRecord) -> io::Result<()> {
    let fields = [
        ("job_id", j.job_id.0.to_string()),
        ("kind", j.job_kind.as_str().to_string()),
        ("queue", j.queue_id.clone()),
        ("context", j.context.clone()),
        ("state", j.state.as_str().to_string()),
        ("rows_out", j.rows_out.to_string()),
        ("submitted", j.t_submitted.0.to_string()),
        ("started", opt(&j.t_started.map(|t| t.0))),
        ("finished", opt(&j.t_finished.map(|t| t.0))),
        ("dest", opt(&j.dest_table)),
        ("route", opt(&j.exec_route)),
        ("output_url", opt(&j.output_url)),
        ("error", opt(&j.error_msg)),
        ("query", j.query_text.clone()),
    ];
    tsv(out, &["field", "value"], fields.into_iter().map(|(k, v)| vec![k.to_string(), v]))
}

pub fn tables(out: &mut impl Write, tables: &[MyDbTableInfo]) -> io::Result<()> {
    tsv(
        out,
        &["name", "rows", "columns", "created", "published_to"],
        tables.iter().map(|t| {
            vec![
                t.name.clone(),
                t.row_count.to_string(),
                t.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(","),
                t.created_at.0.to_string(),
                t.published_to.join(","),
            ]
        }),
    )
}
