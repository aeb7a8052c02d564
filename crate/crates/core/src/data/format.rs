// VZEC binary dataset files and CSV record import.
//
// Layout (all integers little-endian):
//   "VZEC" | u32 version = 1 | u32 n_records | u32 n_leads = 12 | u32 T
//   then per record: 12 * T f32 samples (lead-major) | u8 label bitmask

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DataError, Dataset, EcgRecord, Labels, Result, DEFAULT_SAMPLE_RATE_HZ, N_CLASSES, N_LEADS};

pub const MAGIC: &[u8; 4] = b"VZEC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

fn format_err(offset: usize, msg: impl Into<String>) -> DataError {
    DataError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let len = ds.records.first().map_or(0, EcgRecord::len);
    if let Some((i, r)) = ds.records.iter().enumerate().find(|(_, r)| r.len() != len) {
        return Err(DataError::InvalidRecord(format!(
            "record {i} has {} samples per lead, record 0 has {len}",
            r.len()
        )));
    }
    let count = u32::try_from(ds.len()).map_err(|_| DataError::InvalidRecord("too many records".into()))?;
    out.write_all(MAGIC)?;
    for v in [FORMAT_VERSION, count, N_LEADS as u32, len as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(N_LEADS * len * 4 + 1);
    for r in &ds.records {
        buf.clear();
        for &s in r.samples() {
            buf.extend_from_slice(&(s as f32).to_le_bytes());
        }
        buf.push(r.labels.to_mask());
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"VZEC\"", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let count = read_u32(bytes, 8) as usize;
    let leads = read_u32(bytes, 12) as usize;
    if leads != N_LEADS {
        return Err(format_err(12, format!("expected {N_LEADS} leads, header says {leads}")));
    }
    let len = read_u32(bytes, 16) as usize;
    if len == 0 {
        return Err(format_err(16, "record length must be positive"));
    }
    let record_bytes = N_LEADS * len * 4 + 1;
    let expected = HEADER_LEN + count * record_bytes;
    if bytes.len() < expected {
        let record = (bytes.len() - HEADER_LEN) / record_bytes;
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated in record {record}: expected {expected} bytes in total, found {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            expected,
            format!("{} trailing bytes after the last record", bytes.len() - expected),
        ));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let start = HEADER_LEN + i * record_bytes;
        let samples = bytes[start..start + record_bytes - 1]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        let mask = bytes[start + record_bytes - 1];
        if mask >> N_CLASSES != 0 {
            return Err(format_err(
                start + record_bytes - 1,
                format!("label mask {mask:#010b} sets bits beyond the {N_CLASSES} classes"),
            ));
        }
        records.push(EcgRecord::new(samples, len, Labels::from_mask(mask), DEFAULT_SAMPLE_RATE_HZ)?);
    }
    Ok(Dataset::new(records))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

/// Reads a 12-column CSV (header row of lead names, one sample per row) into an unlabelled
/// record. Rows and columns in errors are 1-based; row 1 is the first data row.
pub fn import_csv(path: impl AsRef<Path>) -> Result<EcgRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            other => DataError::Parse {
                row: 0,
                column: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let header_len = reader
        .headers()
        .map_err(|e| DataError::Parse {
            row: 0,
            column: 0,
            msg: e.to_string(),
        })?
        .len();
    if header_len != N_LEADS {
        return Err(DataError::ColumnCount {
            expected: N_LEADS,
            found: header_len,
        });
    }
    let mut leads: Vec<Vec<f64>> = vec![Vec::new(); N_LEADS];
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| DataError::Parse {
            row: row_no,
            column: 0,
            msg: e.to_string(),
        })?;
        if row.len() != N_LEADS {
            return Err(DataError::Parse {
                row: row_no,
                column: row.len(),
                msg: format!("expected {N_LEADS} columns, found {}", row.len()),
            });
        }
        for (c, cell) in row.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row: row_no,
                column: c + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            leads[c].push(v);
        }
    }
    if leads[0].len() < 2 {
        return Err(DataError::InvalidRecord(format!(
            "csv needs at least 2 data rows, found {}",
            leads[0].len()
        )));
    }
    EcgRecord::from_leads(&leads, Labels::none(), DEFAULT_SAMPLE_RATE_HZ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            length: 64,
            ..SynthConfig::default()
        };
        generate_dataset(&cfg, 3, 5).unwrap()
    }

    fn encode(ds: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let bytes = encode(&ds);
        assert_eq!(bytes.len(), 20 + 3 * (12 * 64 * 4 + 1));
        assert_eq!(read_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&small());
        bytes[0] = b'X';
        assert!(matches!(read_dataset(&bytes), Err(DataError::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&small());
        bytes[4] = 2;
        assert!(matches!(read_dataset(&bytes), Err(DataError::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_names_expected_and_actual_length() {
        let bytes = encode(&small());
        let cut = &bytes[..bytes.len() - 100];
        let err = read_dataset(cut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&bytes.len().to_string()), "{msg}");
        assert!(msg.contains(&cut.len().to_string()), "{msg}");
        assert!(read_dataset(&bytes[..10]).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&small());
        bytes.push(0);
        assert!(read_dataset(&bytes).is_err());
    }

    #[test]
    fn ragged_dataset_cannot_be_written() {
        let mut ds = small();
        let short = EcgRecord::new(vec![0.0; 12 * 10], 10, Labels::none(), 400.0).unwrap();
        ds.records.push(short);
        assert!(write_dataset(&ds, &mut Vec::new()).is_err());
    }
}
