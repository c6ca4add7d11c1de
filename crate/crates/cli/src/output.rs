use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

/// CSV goes to `--out` when given, else stdout. The summary goes to stdout
/// in the first case and stderr in the second so the CSV stays clean.
pub struct Output {
    csv: Box<dyn Write>,
    to_file: bool,
}

impl Output {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        Ok(match path {
            Some(p) => {
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                Self { csv: Box::new(BufWriter::new(f)), to_file: true }
            }
            None => Self { csv: Box::new(io::stdout().lock()), to_file: false },
        })
    }

    pub fn csv(&mut self) -> &mut dyn Write {
        &mut self.csv
    }

    pub fn summary(&self, line: &str) {
        if self.to_file {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        Ok(())
    }
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
