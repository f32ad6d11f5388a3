//! Normalized generation and load profiles read from `step,value` CSV files.

use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::error::Error;

const PV: &str = include_str!("../../data/profiles/pv.csv");
const WIND: &str = include_str!("../../data/profiles/wind.csv");
const LOAD: &str = include_str!("../../data/profiles/load.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub pv: Vec<f64>,
    pub wind: Vec<f64>,
    pub load: Vec<f64>,
}

#[derive(Deserialize)]
struct Row {
    step: usize,
    value: f64,
}

/// Reads one profile. Steps must run 0, 1, 2, … and values be finite and
/// non-negative.
pub fn read_profile(reader: impl Read) -> Result<Vec<f64>, Error> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Profile(e.to_string()))?;
        if row.step != i {
            return Err(Error::Profile(format!("row {i} has step {}", row.step)));
        }
        if !(row.value.is_finite() && row.value >= 0.0) {
            return Err(Error::Profile(format!("step {i}: value {}", row.value)));
        }
        out.push(row.value);
    }
    if out.is_empty() {
        return Err(Error::Profile("no rows".into()));
    }
    Ok(out)
}

impl Profiles {
    /// The synthetic profiles shipped with the crate (three days, 15 min).
    pub fn synthetic() -> Profiles {
        let parse = |s: &str| read_profile(s.as_bytes()).expect("shipped profile parses");
        Profiles { pv: parse(PV), wind: parse(WIND), load: parse(LOAD) }
    }

    /// Reads `pv.csv`, `wind.csv` and `load.csv` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Profiles, Error> {
        let read = |name: &str| -> Result<Vec<f64>, Error> {
            let path = dir.join(name);
            let f = std::fs::File::open(&path).map_err(|e| Error::Profile(format!("{}: {e}", path.display())))?;
            read_profile(f).map_err(|e| Error::Profile(format!("{}: {e}", path.display())))
        };
        Ok(Profiles { pv: read("pv.csv")?, wind: read("wind.csv")?, load: read("load.csv")? })
    }

    pub fn len(&self) -> usize {
        self.pv.len().min(self.wind.len()).min(self.load.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
