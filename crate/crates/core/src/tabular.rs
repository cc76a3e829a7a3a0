//! Reading and writing delimited numeric tables.
//!
//! Input files are one sample per row, one column per signal, comma or tab
//! separated (autodetected), with an optional one-line header. Floats are
//! written with `Display`, whose shortest-representation output round-trips
//! bit-exactly through `parse::<f64>()`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Table {
    pub header: Option<Vec<String>>,
    /// Row-major cells; non-numeric markers (`nan`, empty fields) become NaN.
    pub rows: Vec<Vec<f64>>,
    pub delimiter: char,
}

fn detect_delimiter(line: &str) -> char {
    let commas = line.matches(',').count();
    let tabs = line.matches('\t').count();
    if tabs > commas {
        '\t'
    } else {
        ','
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Some(f64::NAN);
    }
    cell.parse::<f64>().ok()
}

/// Read a delimited numeric table. The header is detected by attempting to
/// parse the first row: if any field is non-numeric it is taken as a header.
/// `force_header` overrides detection when the caller knows the layout.
pub fn read_table(path: &Path, force_header: Option<bool>) -> Result<Table> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut delimiter = ',';
    let mut first_data_line = true;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if first_data_line {
            delimiter = detect_delimiter(&line);
        }
        let cells: Vec<&str> = line.split(delimiter).collect();
        if first_data_line {
            first_data_line = false;
            let looks_numeric = cells.iter().all(|c| parse_cell(c).is_some());
            let is_header = match force_header {
                Some(h) => h,
                None => !looks_numeric,
            };
            if is_header {
                header = Some(cells.iter().map(|c| c.trim().to_string()).collect());
                continue;
            }
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            match parse_cell(cell) {
                Some(v) => row.push(v),
                None => {
                    return Err(Error::data(format!(
                        "`{}` line {} column {}: cannot parse `{}` as a number",
                        path.display(),
                        lineno + 1,
                        col + 1,
                        cell.trim()
                    )))
                }
            }
        }
        rows.push(row);
    }

    Ok(Table {
        header,
        rows,
        delimiter,
    })
}

/// Write rows as CSV. Floats use `Display` (shortest round-trip form).
pub fn write_csv<'a, I>(path: &Path, header: Option<&[String]>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create `{}`: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    if let Some(names) = header {
        writeln!(out, "{}", names.join(","))?;
    }
    for row in rows {
        let mut first = true;
        for v in row {
            if first {
                first = false;
            } else {
                out.write_all(b",")?;
            }
            write!(out, "{v}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
