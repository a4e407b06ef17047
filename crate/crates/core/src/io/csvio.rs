use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// A row type with a fixed CSV header.
pub trait CsvRecord: Serialize + DeserializeOwned {
    const KIND: &'static str;
    const HEADER: &'static [&'static str];

    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

pub fn write_records_csv<R: CsvRecord>(rows: &[R]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(R::HEADER).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
}

pub fn read_records_csv<R: CsvRecord>(text: &str) -> Result<Vec<R>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::format(R::KIND, e))?.clone();
    if header.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::format(
            R::KIND,
            format!("header {:?}, expected {:?}", header.iter().collect::<Vec<_>>(), R::HEADER),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<R>().enumerate() {
        let row = row.map_err(|e| Error::format(R::KIND, e))?;
        row.validate().map_err(|m| Error::format(R::KIND, format!("row {}: {m}", i + 1)))?;
        out.push(row);
    }
    Ok(out)
}
