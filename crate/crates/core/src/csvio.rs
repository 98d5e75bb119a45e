//! Small helpers shared by every CSV reader and writer in the crate.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::ingest::IngestError;

/// Formats a value with 9 significant digits in plain decimal notation.
///
/// Trailing zeros are trimmed. Magnitudes below `1e-6` switch to scientific
/// notation so that vanishing probabilities stay short. Parsing the output
/// and formatting again yields the same text.
///
/// ```
/// use imbalkit::format_sig9;
/// assert_eq!(format_sig9(0.6), "0.6");
/// assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
/// assert_eq!(format_sig9(2.5e-9), "2.5e-9");
/// ```
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    let mut out = String::with_capacity(16);
    if negative {
        out.push('-');
    }
    if exp < -6 {
        out.push_str(&digits[..1]);
        if digits.len() > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        out.push_str(&format!("e{exp}"));
        return out;
    }
    let point = exp + 1;
    if point <= 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat('0').take((-point) as usize));
        out.push_str(digits);
    } else if point as usize >= digits.len() {
        out.push_str(digits);
        out.extend(std::iter::repeat('0').take(point as usize - digits.len()));
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    out
}

pub(crate) fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

pub(crate) fn writer<W: Write>(output: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(output)
}

pub(crate) fn open(path: &Path) -> Result<fs::File, IngestError> {
    fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Column lookup over a header row.
pub(crate) struct Header {
    names: Vec<String>,
}

impl Header {
    pub(crate) fn read<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Self, IngestError> {
        let names = rdr
            .headers()
            .map_err(IngestError::from_csv)?
            .iter()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        if names.iter().all(String::is_empty) {
            return Err(IngestError::MissingHeader);
        }
        Ok(Self { names })
    }

    pub(crate) fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<usize, IngestError> {
        self.find(name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
    }

    /// Positions of `prefix0, prefix1, ...` in order; stops at the first gap.
    pub(crate) fn numbered(&self, prefix: &str) -> Vec<usize> {
        (0..)
            .map_while(|i| self.find(&format!("{prefix}{i}")))
            .collect()
    }

    pub(crate) fn len(&self) -> usize {
        self.names.len()
    }
}

pub(crate) fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

pub(crate) fn field<'r>(
    record: &'r csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<&'r str, IngestError> {
    record.get(idx).ok_or_else(|| IngestError::InvalidValue {
        line: line_of(record),
        column: column.to_owned(),
        value: String::new(),
    })
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<T, IngestError> {
    let raw = field(record, idx, column)?;
    raw.parse().map_err(|_| IngestError::InvalidValue {
        line: line_of(record),
        column: column.to_owned(),
        value: raw.to_owned(),
    })
}

pub(crate) fn parse_f64(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
) -> Result<f64, IngestError> {
    let v: f64 = parse_field(record, idx, column)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IngestError::InvalidValue {
            line: line_of(record),
            column: column.to_owned(),
            value: field(record, idx, column)?.to_owned(),
        })
    }
}

pub(crate) fn write_row<W: Write, I, S>(wtr: &mut csv::Writer<W>, row: I) -> Result<(), IngestError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    wtr.write_record(row).map_err(IngestError::from_csv)
}

pub(crate) fn finish<W: Write>(wtr: csv::Writer<W>) -> Result<(), IngestError> {
    wtr.into_inner()
        .map_err(|e| IngestError::from_io(e.into_error()))?
        .flush()
        .map_err(IngestError::from_io)
}

/// Writes `path` by filling a sibling temp file and renaming it into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), IngestError>
where
    F: FnOnce(&mut io::BufWriter<&mut fs::File>) -> Result<(), IngestError>,
{
    let io_err = |source: io::Error| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        {
            let mut buf = io::BufWriter::new(&mut file);
            fill(&mut buf)?;
            buf.flush().map_err(io_err)?;
        }
        file.sync_all().map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
