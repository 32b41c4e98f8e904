//! Versioned CSV files. Line one is a comment `# skiptune <schema> v<N>`;
//! the header row follows.

use std::fs::File;
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_VERSION: u32 = 1;

pub fn schema_line(schema: &str) -> String {
    format!("# skiptune {schema} v{CSV_VERSION}")
}

/// Create `path` and write the version comment.
pub fn writer(path: &Path, schema: &str) -> Result<csv::Writer<File>> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", schema_line(schema))?;
    Ok(csv::Writer::from_writer(f))
}

/// Open `path`, checking the version comment, positioned at the header row.
pub fn reader(path: &Path, schema: &str) -> Result<csv::Reader<File>> {
    let mut f = File::open(path)?;
    let mut first = String::new();
    let consumed = BufReader::new(&mut f).read_line(&mut first)?;
    if first.trim_end() != schema_line(schema) {
        return Err(Error::Format(format!(
            "{}: expected {:?}, found {:?}",
            path.display(),
            schema_line(schema),
            first.trim_end()
        )));
    }
    f.seek(SeekFrom::Start(consumed as u64))?;
    Ok(csv::Reader::from_reader(f))
}

/// Shortest round-tripping text for a float.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}
