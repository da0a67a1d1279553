use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{format_sig9, DatasetTable, DeviceRecord, Label, ID_COLUMNS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::Config(format!("unsupported table format `{other}`"))),
        }
    }
}

pub fn load_table(path: &Path, format: TableFormat) -> Result<DatasetTable> {
    match format {
        TableFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(BufReader::new(file))
        }
    }
}

pub(crate) fn read_csv<R: Read>(reader: R) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();

    let mut id_idx = [0usize; 5];
    for (slot, name) in id_idx.iter_mut().zip(ID_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing mandatory column `{name}`")))?;
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|i| !id_idx.contains(i))
        .collect();
    let feature_names: Vec<String> = feature_cols
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();

    let [lot_i, wf_i, x_i, y_i, label_i] = id_idx;
    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let parse_err = |col: usize, message: String| Error::Parse {
            row: row + 1,
            column: headers[col].to_string(),
            message,
        };
        let die = |col: usize| -> Result<i64> {
            rec[col]
                .trim()
                .parse::<i64>()
                .map_err(|e| parse_err(col, e.to_string()))
        };
        let label = Label::parse(&rec[label_i])
            .ok_or_else(|| parse_err(label_i, format!("unknown label `{}`", &rec[label_i])))?;

        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = rec[c].trim();
            if cell.is_empty() {
                features.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| parse_err(c, format!("`{cell}` is not numeric")))?;
            if !v.is_finite() {
                return Err(parse_err(c, format!("`{cell}` is not a finite number")));
            }
            features.push(v);
        }
        records.push(DeviceRecord {
            lot_key: rec[lot_i].to_string(),
            wf_key: rec[wf_i].to_string(),
            die_x: die(x_i)?,
            die_y: die(y_i)?,
            label,
            features,
        });
    }
    DatasetTable::new(records, feature_names)
}

pub fn write_table(table: &DatasetTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(table, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_csv<W: Write>(table: &DatasetTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ID_COLUMNS.to_vec();
    header.extend(table.feature_names.iter().map(String::as_str));
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in &table.records {
        row.clear();
        row.push(r.lot_key.clone());
        row.push(r.wf_key.clone());
        row.push(r.die_x.to_string());
        row.push(r.die_y.to_string());
        row.push(r.label.as_code().to_string());
        row.extend(r.features.iter().map(|&v| {
            if v.is_nan() {
                String::new()
            } else {
                format_sig9(v)
            }
        }));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
