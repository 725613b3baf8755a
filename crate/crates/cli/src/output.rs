use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::args::{Common, Format};

/// Where a command's result goes. JSON documents carry `seed` as a field,
/// CSV files as a leading `# seed=` line.
pub struct Sink {
    out: Option<PathBuf>,
    pub format: Format,
    seed: u64,
}

impl Sink {
    pub fn new(c: &Common) -> Self {
        Sink {
            out: c.out.clone(),
            format: c.format,
            seed: c.seed,
        }
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        })
    }

    pub fn json(&self, value: &impl Serialize) -> Result<()> {
        let mut w = self.writer()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn csv<T: Serialize>(&self, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = self.writer()?;
        writeln!(w, "# seed={}", self.seed)?;
        let mut csv = csv::Writer::from_writer(w);
        for row in rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    }
}
