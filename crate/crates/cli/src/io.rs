use std::fs;
use std::io::Write;
use std::path::Path;

use dwad_core::{Error, Result, Sample};

/// Reads a `y,x1,...,xd` file.
pub fn read_sample(path: &Path, dim: usize) -> Result<Sample> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.clone();
    let expected: Vec<String> = std::iter::once("y".to_string()).chain((1..=dim).map(|k| format!("x{k}"))).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Data(format!(
            "{}: header must be '{}', found '{}'",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = i + 2;
        let mut vals = rec.iter().map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Data(format!("{}:{line}: '{t}' is not a number", path.display())))
        });
        y.push(vals.next().transpose()?.expect("header fixes the field count"));
        for v in vals {
            x.push(v?);
        }
    }
    Sample::new(y, x, dim)
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// To a file when given, else stdout.
pub fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, contents),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("direction '{s}': '{}' is not a number", t.trim())))
        })
        .collect()
}
