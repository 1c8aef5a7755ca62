//! Table serialization: CSV (comma, double-quote quoting, mandatory header),
//! VOTable (TABLEDATA only) and JSON.
//!
//! Floats are written in Rust's shortest round-trip form so a value read
//! back parses to the identical bit pattern.

use std::io::{BufRead, Write};

use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use crate::engine::{Column, ColumnType, Value};
use crate::error::{Error, Result};
use crate::model::TableFormat;

/// Rows examined to choose each CSV column's type.
pub const SNIFF_ROWS: usize = 1000;

pub fn format_value(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => format!("{f:?}"),
        Value::Text(s) => s.clone(),
    }
}

/// Interprets a text cell as a value of column type `ty`. Empty cells are
/// NULL; cells that do not parse as the column's type are kept as text.
pub fn parse_cell(s: &str, ty: ColumnType) -> Value {
    if s.is_empty() {
        return Value::Null;
    }
    match ty {
        ColumnType::Integer => match s.trim().parse::<i64>() {
            Ok(i) => Value::Integer(i),
            Err(_) => s.trim().parse::<f64>().map(Value::Float).unwrap_or_else(|_| Value::Text(s.to_string())),
        },
        ColumnType::Float => s.trim().parse::<f64>().map(Value::Float).unwrap_or_else(|_| Value::Text(s.to_string())),
        ColumnType::Text | ColumnType::Timestamp => Value::Text(s.to_string()),
    }
}

fn looks_like_timestamp(s: &str) -> bool {
    let b = s.as_bytes();
    let digits = |r: std::ops::Range<usize>| b.get(r).is_some_and(|x| x.iter().all(u8::is_ascii_digit));
    let date = b.len() >= 10 && digits(0..4) && b[4] == b'-' && digits(5..7) && b[7] == b'-' && digits(8..10);
    if !date {
        return false;
    }
    if b.len() == 10 {
        return true;
    }
    b.len() >= 19
        && (b[10] == b'T' || b[10] == b' ')
        && digits(11..13)
        && b[13] == b':'
        && digits(14..16)
        && b[16] == b':'
        && digits(17..19)
}

/// Narrowest type every non-empty sample fits: integer, float, timestamp,
/// then text.
pub fn sniff_type<'a>(samples: impl Iterator<Item = &'a str> + Clone) -> ColumnType {
    let mut present = samples.filter(|s| !s.is_empty()).peekable();
    if present.peek().is_none() {
        return ColumnType::Text;
    }
    let all = |f: &dyn Fn(&str) -> bool| present.clone().all(f);
    if all(&|s| s.trim().parse::<i64>().is_ok()) {
        ColumnType::Integer
    } else if all(&|s| s.trim().parse::<f64>().is_ok()) {
        ColumnType::Float
    } else if all(&looks_like_timestamp) {
        ColumnType::Timestamp
    } else {
        ColumnType::Text
    }
}

/// Deduplicates and fills in blank column names.
fn tidy_names(raw: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    for (i, n) in raw.into_iter().enumerate() {
        let base = if n.trim().is_empty() { format!("col{}", i + 1) } else { n.trim().to_string() };
        let mut name = base.clone();
        let mut k = 2;
        while out.iter().any(|x| x.eq_ignore_ascii_case(&name)) {
            name = format!("{base}_{k}");
            k += 1;
        }
        out.push(name);
    }
    out
}

/// A stream of rows with a known schema.
pub trait RowSource {
    fn columns(&self) -> &[Column];
    /// Up to `n` further rows; empty at end of input.
    fn next_chunk(&mut self, n: usize) -> Result<Vec<Vec<Value>>>;
}

pub fn open_source<'r, R: BufRead + 'r>(input: R, format: TableFormat) -> Result<Box<dyn RowSource + 'r>> {
    match format {
        TableFormat::Csv => Ok(Box::new(CsvSource::new(input)?)),
        TableFormat::VoTable => Ok(Box::new(VoTableSource::new(input)?)),
        TableFormat::Json => Err(Error::Invalid("JSON import is not supported; use CSV or VOTable".into())),
    }
}

pub struct CsvSource<R> {
    reader: csv::Reader<R>,
    columns: Vec<Column>,
    buffered: std::collections::VecDeque<csv::StringRecord>,
}

impl<R: std::io::Read> CsvSource<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers()?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::Parse { location: "line 1".into(), message: "missing header row".into() });
        }
        let mut buffered = std::collections::VecDeque::new();
        let mut rec = csv::StringRecord::new();
        while buffered.len() < SNIFF_ROWS && reader.read_record(&mut rec)? {
            buffered.push_back(rec.clone());
        }
        let names = tidy_names(header.iter().map(str::to_string).collect());
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| Column::new(name, sniff_type(buffered.iter().map(move |r| r.get(i).unwrap_or("")))))
            .collect();
        Ok(CsvSource { reader, columns, buffered })
    }

    fn convert(&self, rec: &csv::StringRecord) -> Vec<Value> {
        self.columns.iter().enumerate().map(|(i, c)| parse_cell(rec.get(i).unwrap_or(""), c.ty)).collect()
    }
}

impl<R: std::io::Read> RowSource for CsvSource<R> {
    fn columns(&self) -> &[Column] {
        &self.columns
    }

    fn next_chunk(&mut self, n: usize) -> Result<Vec<Vec<Value>>> {
        let mut out = Vec::with_capacity(n.min(4096));
        while out.len() < n {
            if let Some(rec) = self.buffered.pop_front() {
                out.push(self.convert(&rec));
                continue;
            }
            let mut rec = csv::StringRecord::new();
            if !self.reader.read_record(&mut rec)? {
                break;
            }
            out.push(self.convert(&rec));
        }
        Ok(out)
    }
}

fn votable_type(datatype: &str, xtype: Option<&str>) -> Result<ColumnType> {
    if xtype.is_some_and(|x| x.eq_ignore_ascii_case("timestamp")) {
        return Ok(ColumnType::Timestamp);
    }
    Ok(match datatype {
        "boolean" | "bit" | "unsignedByte" | "short" | "int" | "long" => ColumnType::Integer,
        "float" | "double" => ColumnType::Float,
        "char" | "unicodeChar" => ColumnType::Text,
        other => {
            return Err(Error::Parse {
                location: "FIELD".into(),
                message: format!("unsupported VOTable datatype {other:?}"),
            })
        }
    })
}

pub struct VoTableSource<R> {
    reader: Reader<R>,
    columns: Vec<Column>,
    done: bool,
    /// True once the reader has consumed a `<TABLEDATA>` start tag.
    in_data: bool,
}

impl<R: BufRead> VoTableSource<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut reader = Reader::from_reader(input);
        reader.config_mut().trim_text(false);
        let mut s = VoTableSource { reader, columns: Vec::new(), done: false, in_data: false };
        s.read_header()?;
        Ok(s)
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { location: format!("byte {}", self.reader.buffer_position()), message: message.into() }
    }

    fn read_header(&mut self) -> Result<()> {
        let mut names = Vec::new();
        let mut types = Vec::new();
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let ev = self.reader.read_event_into(&mut buf).map_err(|e| Error::Parse {
                location: format!("byte {}", self.reader.error_position()),
                message: e.to_string(),
            })?;
            match ev {
                Event::Start(e) | Event::Empty(e) if e.local_name().as_ref() == b"FIELD" => {
                    let (name, datatype, xtype) = field_attrs(&e)?;
                    types.push(votable_type(&datatype, xtype.as_deref())?);
                    names.push(name);
                }
                Event::Start(e) if e.local_name().as_ref() == b"TABLEDATA" => {
                    self.in_data = true;
                    break;
                }
                Event::Empty(e) if e.local_name().as_ref() == b"TABLEDATA" => {
                    self.done = true;
                    break;
                }
                Event::Start(e) if e.local_name().as_ref() == b"BINARY" || e.local_name().as_ref() == b"FITS" => {
                    return Err(self.err("only TABLEDATA serialization is supported"));
                }
                Event::Eof => {
                    self.done = true;
                    break;
                }
                _ => {}
            }
        }
        if names.is_empty() {
            return Err(self.err("no FIELD declarations"));
        }
        self.columns = tidy_names(names).into_iter().zip(types).map(|(n, t)| Column::new(n, t)).collect();
        Ok(())
    }

    /// Next `<TR>` as raw cell strings (None for an empty/absent TD).
    fn next_tr(&mut self) -> Result<Option<Vec<Option<String>>>> {
        if self.done || !self.in_data {
            return Ok(None);
        }
        let mut cells: Option<Vec<Option<String>>> = None;
        let mut cell: Option<String> = None;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let ev = self.reader.read_event_into(&mut buf).map_err(|e| Error::Parse {
                location: format!("byte {}", self.reader.error_position()),
                message: e.to_string(),
            })?;
            match ev {
                Event::Start(e) => match e.local_name().as_ref() {
                    b"TR" => cells = Some(Vec::new()),
                    b"TD" => cell = Some(String::new()),
                    other => {
                        let tag = String::from_utf8_lossy(other).into_owned();
                        return Err(self.err(format!("unexpected <{tag}> in TABLEDATA")));
                    }
                },
                Event::Empty(e) => match e.local_name().as_ref() {
                    b"TD" => cells.as_mut().ok_or_else(|| self.err("<TD/> outside <TR>"))?.push(None),
                    b"TR" => return Ok(Some(Vec::new())),
                    _ => {}
                },
                Event::Text(t) => {
                    if let Some(c) = cell.as_mut() {
                        c.push_str(&t.xml_content().map_err(|e| self.err(e.to_string()))?);
                    }
                }
                Event::CData(t) => {
                    if let Some(c) = cell.as_mut() {
                        c.push_str(&String::from_utf8_lossy(&t));
                    }
                }
                Event::GeneralRef(r) => {
                    if let Some(c) = cell.as_mut() {
                        if let Some(ch) = r.resolve_char_ref().map_err(|e| self.err(e.to_string()))? {
                            c.push(ch);
                        } else {
                            let name = r.decode().map_err(|e| self.err(e.to_string()))?;
                            let rep = resolve_predefined_entity(&name)
                                .ok_or_else(|| self.err(format!("unknown entity &{name};")))?;
                            c.push_str(rep);
                        }
                    }
                }
                Event::End(e) => match e.local_name().as_ref() {
                    b"TD" => {
                        let v = cell.take().ok_or_else(|| self.err("</TD> without <TD>"))?;
                        let cells = cells.as_mut().ok_or_else(|| self.err("<TD> outside <TR>"))?;
                        cells.push(if v.is_empty() { None } else { Some(v) });
                    }
                    b"TR" => return Ok(cells.take()),
                    b"TABLEDATA" => {
                        self.done = true;
                        return Ok(None);
                    }
                    _ => {}
                },
                Event::Eof => return Err(self.err("unexpected end of document inside TABLEDATA")),
                _ => {}
            }
        }
    }
}

fn field_attrs(e: &BytesStart<'_>) -> Result<(String, String, Option<String>)> {
    let mut name = None;
    let mut datatype = None;
    let mut xtype = None;
    for a in e.attributes() {
        let a = a.map_err(|err| Error::Parse { location: "FIELD".into(), message: err.to_string() })?;
        let v = a
            .unescape_value()
            .map_err(|err| Error::Parse { location: "FIELD".into(), message: err.to_string() })?
            .into_owned();
        match a.key.local_name().as_ref() {
            b"name" => name = Some(v),
            b"datatype" => datatype = Some(v),
            b"xtype" => xtype = Some(v),
            _ => {}
        }
    }
    let missing = |what: &str| Error::Parse { location: "FIELD".into(), message: format!("FIELD without {what}") };
    Ok((name.ok_or_else(|| missing("name"))?, datatype.ok_or_else(|| missing("datatype"))?, xtype))
}

impl<R: BufRead> RowSource for VoTableSource<R> {
    fn columns(&self) -> &[Column] {
        &self.columns
    }

    fn next_chunk(&mut self, n: usize) -> Result<Vec<Vec<Value>>> {
        let mut out = Vec::with_capacity(n.min(4096));
        while out.len() < n {
            let Some(cells) = self.next_tr()? else { break };
            if cells.len() != self.columns.len() {
                return Err(self.err(format!(
                    "row has {} cells, expected {}",
                    cells.len(),
                    self.columns.len()
                )));
            }
            out.push(
                cells
                    .iter()
                    .zip(&self.columns)
                    .map(|(c, col)| c.as_deref().map_or(Value::Null, |s| parse_cell(s, col.ty)))
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Incremental table writer.
pub trait TableWriter {
    fn begin(&mut self, columns: &[Column]) -> Result<()>;
    fn row(&mut self, row: &[Value]) -> Result<()>;
    fn finish(&mut self) -> Result<()>;
}

pub fn writer_for<'w, W: Write + 'w>(out: W, format: TableFormat, table: &str) -> Box<dyn TableWriter + 'w> {
    match format {
        TableFormat::Csv => Box::new(CsvWriter::new(out)),
        TableFormat::VoTable => Box::new(VoTableWriter::new(out, table)),
        TableFormat::Json => Box::new(JsonWriter::new(out)),
    }
}

pub struct CsvWriter<W: Write> {
    w: csv::Writer<W>,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(out: W) -> Self {
        CsvWriter { w: csv::WriterBuilder::new().from_writer(out) }
    }
}

impl<W: Write> TableWriter for CsvWriter<W> {
    fn begin(&mut self, columns: &[Column]) -> Result<()> {
        self.w.write_record(columns.iter().map(|c| c.name.as_str()))?;
        Ok(())
    }

    fn row(&mut self, row: &[Value]) -> Result<()> {
        self.w.write_record(row.iter().map(format_value))?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub struct VoTableWriter<W: Write> {
    w: W,
    table: String,
}

impl<W: Write> VoTableWriter<W> {
    pub fn new(out: W, table: &str) -> Self {
        VoTableWriter { w: out, table: table.to_string() }
    }
}

impl<W: Write> TableWriter for VoTableWriter<W> {
    fn begin(&mut self, columns: &[Column]) -> Result<()> {
        let w = &mut self.w;
        writeln!(w, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>")?;
        writeln!(w, "<VOTABLE version=\"1.4\" xmlns=\"http://www.ivoa.net/xml/VOTable/v1.3\">")?;
        writeln!(w, "<RESOURCE>")?;
        writeln!(w, "<TABLE name=\"{}\">", escape(self.table.as_str()))?;
        for c in columns {
            let attrs = match c.ty {
                ColumnType::Integer => "datatype=\"long\"",
                ColumnType::Float => "datatype=\"double\"",
                ColumnType::Text => "datatype=\"char\" arraysize=\"*\"",
                ColumnType::Timestamp => "datatype=\"char\" arraysize=\"*\" xtype=\"timestamp\"",
            };
            writeln!(w, "<FIELD name=\"{}\" {attrs}/>", escape(c.name.as_str()))?;
        }
        writeln!(w, "<DATA>")?;
        writeln!(w, "<TABLEDATA>")?;
        Ok(())
    }

    fn row(&mut self, row: &[Value]) -> Result<()> {
        self.w.write_all(b"<TR>")?;
        for v in row {
            match v {
                Value::Null => self.w.write_all(b"<TD/>")?,
                _ => write!(self.w, "<TD>{}</TD>", escape(format_value(v)))?,
            }
        }
        self.w.write_all(b"</TR>\n")?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        writeln!(self.w, "</TABLEDATA>")?;
        writeln!(self.w, "</DATA>")?;
        writeln!(self.w, "</TABLE>")?;
        writeln!(self.w, "</RESOURCE>")?;
        writeln!(self.w, "</VOTABLE>")?;
        self.w.flush()?;
        Ok(())
    }
}

/// `{"columns": [{"name", "type"}...], "rows": [[...]...]}`, streamed.
pub struct JsonWriter<W: Write> {
    w: W,
    first: bool,
}

impl<W: Write> JsonWriter<W> {
    pub fn new(out: W) -> Self {
        JsonWriter { w: out, first: true }
    }
}

impl<W: Write> TableWriter for JsonWriter<W> {
    fn begin(&mut self, columns: &[Column]) -> Result<()> {
        let cols = serde_json::to_string(columns).map_err(|e| Error::Invalid(e.to_string()))?;
        write!(self.w, "{{\"columns\":{cols},\"rows\":[")?;
        Ok(())
    }

    fn row(&mut self, row: &[Value]) -> Result<()> {
        if !self.first {
            self.w.write_all(b",")?;
        }
        self.first = false;
        let cells: Vec<serde_json::Value> = row
            .iter()
            .map(|v| match v {
                // JSON has no NaN/inf; those become null
                Value::Float(f) if !f.is_finite() => serde_json::Value::Null,
                other => serde_json::to_value(other).unwrap_or(serde_json::Value::Null),
            })
            .collect();
        serde_json::to_writer(&mut self.w, &cells).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.w.write_all(b"]}\n")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Writes an in-memory result in `format`.
pub fn write_rowset(
    out: impl Write,
    format: TableFormat,
    name: &str,
    columns: &[Column],
    rows: &[Vec<Value>],
) -> Result<()> {
    let mut w = writer_for(out, format, name);
    w.begin(columns)?;
    for r in rows {
        w.row(r)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(src: &mut dyn RowSource) -> Vec<Vec<Value>> {
        let mut out = Vec::new();
        loop {
            let c = src.next_chunk(2).unwrap();
            if c.is_empty() {
                return out;
            }
            out.extend(c);
        }
    }

    #[test]
    fn csv_sniffing() {
        let mut src = CsvSource::new("id,ra,dec\n1,10.0,-5.0\n2,11.5,3\n3,12,0.25\n".as_bytes()).unwrap();
        assert_eq!(
            src.columns(),
            &[
                Column::new("id", ColumnType::Integer),
                Column::new("ra", ColumnType::Float),
                Column::new("dec", ColumnType::Float)
            ]
        );
        let rows = read_all(&mut src);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1], vec![Value::Integer(2), Value::Float(11.5), Value::Float(3.0)]);
    }

    #[test]
    fn csv_timestamps_text_and_nulls() {
        let mut src = CsvSource::new("t,name,x\n2024-01-02 03:04:05,a,\n2024-02-03,b,1\n".as_bytes()).unwrap();
        let types: Vec<_> = src.columns().iter().map(|c| c.ty).collect();
        assert_eq!(types, vec![ColumnType::Timestamp, ColumnType::Text, ColumnType::Integer]);
        let rows = read_all(&mut src);
        assert_eq!(rows[0][2], Value::Null);
    }

    #[test]
    fn csv_wrong_arity_names_line() {
        // past the sniffing window the error surfaces while streaming
        let mut text = String::from("a,b\n");
        for i in 0..SNIFF_ROWS + 5 {
            text.push_str(&format!("{i},{i}\n"));
        }
        text.push_str("oops\n");
        let mut src = CsvSource::new(text.as_bytes()).unwrap();
        let err = loop {
            match src.next_chunk(100) {
                Ok(c) if c.is_empty() => panic!("expected error"),
                Ok(_) => continue,
                Err(e) => break e,
            }
        };
        let want = format!("line {}", SNIFF_ROWS + 7);
        assert!(matches!(err, Error::Parse { ref location, .. } if *location == want), "{err}");
    }

    #[test]
    fn csv_arity_error_inside_sniff_window() {
        let err = CsvSource::new("a,b\n1,2,3\n".as_bytes()).err().unwrap();
        assert!(matches!(err, Error::Parse { ref location, .. } if location == "line 2"), "{err}");
    }

    #[test]
    fn votable_fields_map_types() {
        let doc = r#"<?xml version="1.0"?>
<VOTABLE><RESOURCE><TABLE>
<FIELD name="id" datatype="long"/>
<FIELD name="ra" datatype="double" unit="deg"/>
<FIELD name="note" datatype="char" arraysize="*"/>
<DATA><TABLEDATA>
<TR><TD>1</TD><TD>10.5</TD><TD>a &amp; b</TD></TR>
<TR><TD>2</TD><TD/><TD></TD></TR>
</TABLEDATA></DATA></TABLE></RESOURCE></VOTABLE>"#;
        let mut src = VoTableSource::new(doc.as_bytes()).unwrap();
        assert_eq!(src.columns()[1], Column::new("ra", ColumnType::Float));
        let rows = read_all(&mut src);
        assert_eq!(
            rows,
            vec![
                vec![Value::Integer(1), Value::Float(10.5), Value::Text("a & b".into())],
                vec![Value::Integer(2), Value::Null, Value::Null],
            ]
        );
    }

    #[test]
    fn votable_bad_row_is_parse_error() {
        let doc = "<VOTABLE><RESOURCE><TABLE><FIELD name=\"a\" datatype=\"int\"/><DATA><TABLEDATA><TR><TD>1</TD><TD>2</TD></TR></TABLEDATA></DATA></TABLE></RESOURCE></VOTABLE>";
        let mut src = VoTableSource::new(doc.as_bytes()).unwrap();
        assert!(matches!(src.next_chunk(5), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_table_exports() {
        let cols = [Column::new("a", ColumnType::Integer)];
        let mut csv = Vec::new();
        write_rowset(&mut csv, TableFormat::Csv, "t", &cols, &[]).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "a\n");
        let mut vot = Vec::new();
        write_rowset(&mut vot, TableFormat::VoTable, "t", &cols, &[]).unwrap();
        let mut src = VoTableSource::new(vot.as_slice()).unwrap();
        assert!(src.next_chunk(10).unwrap().is_empty());
        let mut json = Vec::new();
        write_rowset(&mut json, TableFormat::Json, "t", &cols, &[]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["rows"], serde_json::json!([]));
        assert_eq!(v["columns"][0]["type"], "integer");
    }

    #[test]
    fn floats_round_trip_bit_exact() {
        for f in [0.1, 1.0 / 3.0, 1e300, -2.5e-310, 123456789.123456789, 0.0] {
            let s = format_value(&Value::Float(f));
            assert_eq!(parse_cell(&s, ColumnType::Float), Value::Float(f), "{s}");
        }
    }
}
