//! JSONL metrics stream: one `MetricsLine` per update.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::orchestrator::MetricsLine;

pub struct MetricsWriter {
    out: BufWriter<File>,
    last_update: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
            last_update: None,
        })
    }

    /// Appends to an existing stream, continuing after its last update.
    pub fn append(path: &Path) -> io::Result<Self> {
        let last_update = read_metrics(path)?.last().map(|m| m.update);
        let file = File::options().append(true).create(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            last_update,
        })
    }

    /// Lines must arrive in strictly increasing update order.
    pub fn write(&mut self, line: &MetricsLine) -> io::Result<()> {
        if self.last_update.is_some_and(|u| line.update <= u) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("metrics update {} does not follow {:?}", line.update, self.last_update),
            ));
        }
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.last_update = Some(line.update);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<MetricsLine>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MetricsLine = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(update: u64, eval: Option<f64>) -> MetricsLine {
        MetricsLine {
            update,
            mean_reward: 0.5,
            kl: 0.0,
            clip_fraction: 0.25,
            entropy: 1.0,
            eval_reward: eval,
        }
    }

    #[test]
    fn field_names_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&line(1, None)).unwrap();
        w.write(&line(2, Some(0.75))).unwrap();
        assert!(w.write(&line(2, None)).is_err());
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"update":1,"mean_reward":0.5,"kl":0.0,"clip_fraction":0.25,"entropy":1.0}"#);
        assert_eq!(read_metrics(&p).unwrap(), vec![line(1, None), line(2, Some(0.75))]);

        let mut w = MetricsWriter::append(&p).unwrap();
        assert!(w.write(&line(1, None)).is_err());
        w.write(&line(3, None)).unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 3);
    }
}
