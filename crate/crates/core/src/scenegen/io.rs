//! JSON Lines dataset files: a header object on line 1, then one dialog per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dialog::DialogRecord;
use super::{GenConfig, GenError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub cfg: GenConfig,
    pub vocab: Vec<String>,
    pub answer_vocab: Vec<String>,
}

impl DatasetHeader {
    pub fn new(cfg: GenConfig) -> Self {
        Self {
            version: FORMAT_VERSION,
            vocab: super::question_vocab(&cfg),
            answer_vocab: super::oracle::answer_tokens(),
            cfg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DialogRecord>,
}

impl Dataset {
    pub fn num_questions(&self) -> usize {
        self.records.iter().map(|r| r.turns.len()).sum()
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), GenError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to<W: Write>(dataset: &Dataset, w: &mut W) -> Result<(), GenError> {
    serde_json::to_writer(&mut *w, &dataset.header).map_err(|e| GenError::Io(e.into()))?;
    writeln!(w)?;
    for r in &dataset.records {
        serde_json::to_writer(&mut *w, r).map_err(|e| GenError::Io(e.into()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, GenError> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Dataset, GenError> {
    let mut lines = r.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| GenError::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
        None => {
            return Err(GenError::Parse {
                line: 1,
                msg: "missing header line".into(),
            })
        }
    };
    if header.version != FORMAT_VERSION {
        return Err(GenError::Parse {
            line: 1,
            msg: format!("unsupported version {}", header.version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord = serde_json::from_str(&line).map_err(|e| GenError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.scene.validate().map_err(|e| GenError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(Dataset { header, records })
}
