//! Output files: CSV tables with full-precision numbers, JSON documents with
//! a schema version, and atomic writes.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::Value;

use crate::error::{MepError, Result};
use crate::geometry::DiscretePath;

pub const SCHEMA_VERSION: u32 = 1;

/// The number format of every CSV file.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> MepError {
    MepError::Io(std::io::Error::other(e))
}

/// CSV text with LF line endings from a header and rows of fields.
pub fn csv_table<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(vec![]);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| MepError::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| MepError::Parse(e.to_string()))
}

/// `alpha,y0,y1,…`, one row per node.
pub fn path_csv(path: &DiscretePath) -> Result<String> {
    let cols: Vec<String> = std::iter::once("alpha".to_string())
        .chain((0..path.dim()).map(|k| format!("y{k}")))
        .collect();
    let header: Vec<&str> = cols.iter().map(String::as_str).collect();
    csv_table(
        &header,
        path.alphas().iter().zip(path.nodes()).map(|(a, y)| {
            std::iter::once(num(*a))
                .chain(y.iter().map(|v| num(*v)))
                .collect::<Vec<_>>()
        }),
    )
}

/// Reads a path written by [`path_csv`]. Any further columns must be named
/// `y<k>` in order.
pub fn read_path_csv(text: &str) -> Result<DiscretePath> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| MepError::Parse(e.to_string()))?.clone();
    if header.get(0) != Some("alpha") || header.len() < 2 {
        return Err(MepError::Parse("path file must start with columns alpha,y0".into()));
    }
    for (k, h) in header.iter().skip(1).enumerate() {
        if h != format!("y{k}") {
            return Err(MepError::Parse(format!("unexpected column '{h}'")));
        }
    }
    let mut alphas = Vec::new();
    let mut nodes = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| MepError::Parse(e.to_string()))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MepError::Parse(format!("row {}: {e}", line + 1)))?;
        alphas.push(vals[0]);
        nodes.push(DVector::from_column_slice(&vals[1..]));
    }
    DiscretePath::new(alphas, nodes)
}

/// Pretty JSON with `schema_version` as the first key.
pub fn versioned_json<T: Serialize>(body: &T) -> Result<String> {
    let value = serde_json::to_value(body).map_err(|e| MepError::Parse(e.to_string()))?;
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    match value {
        Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(|e| MepError::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| MepError::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trips_exactly() {
        let p = DiscretePath::from_fn(vec![0.0, 0.3, 1.0], |a| {
            DVector::from_column_slice(&[a.sin() / 3.0, -a * 1e-17])
        })
        .unwrap();
        let text = path_csv(&p).unwrap();
        assert!(text.starts_with("alpha,y0,y1\n"));
        assert!(!text.contains('\r'));
        let q = read_path_csv(&text).unwrap();
        assert_eq!(p.alphas(), q.alphas());
        assert_eq!(p.nodes(), q.nodes());
    }

    #[test]
    fn malformed_paths_are_parse_errors() {
        for text in [
            "x,y0\n0,1\n",
            "alpha,y1\n0,1\n",
            "alpha,y0\n0,abc\n",
            "alpha,y0\n0,1,2\n",
        ] {
            assert!(read_path_csv(text).is_err(), "{text}");
        }
    }

    #[test]
    fn json_leads_with_the_schema_version() {
        #[derive(Serialize)]
        struct Doc {
            x: f64,
        }
        let text = versioned_json(&Doc { x: 0.5 }).unwrap();
        assert!(text.starts_with("{\n  \"schema_version\": 1,"));
    }

    #[test]
    fn atomic_write_replaces_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sub").join("a.txt");
        write_atomic(&f, "one").unwrap();
        write_atomic(&f, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&f).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }
}
