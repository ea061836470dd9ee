//! CSV helpers shared by every tabular output.
//!
//! Files may begin with `#` comment lines (the CLI records the run seed that
//! way); the reader skips them.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Like [`to_csv`], preceded by a `# header` line when `header` is set.
pub fn to_csv_with_header<T: Serialize>(rows: &[T], header: Option<&str>) -> Result<String> {
    let body = to_csv(rows)?;
    Ok(match header {
        Some(h) => format!("# {h}\n{body}"),
        None => body,
    })
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
