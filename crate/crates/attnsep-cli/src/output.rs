use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use attnsep::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Writes `rows` as CSV preceded by a `# attnsep <table> v1` line.
pub fn write_csv<T: Serialize>(dir: &Path, table: &str, rows: &[T]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut file = BufWriter::new(File::create(dir.join(format!("{table}.csv")))?);
    writeln!(file, "# attnsep {table} v1")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Validation(format!("{other:?}")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
