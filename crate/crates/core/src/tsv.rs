//! Small file helpers: tab-separated tables and atomic writes.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// A header row plus data rows; `#` lines are comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|h| h.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(|c| c.to_string()).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", self.header.join("\t"))?;
        for r in &self.rows {
            writeln!(out, "{}", r.join("\t"))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        v
    }

    pub fn read<R: BufRead>(input: R) -> io::Result<Self> {
        let mut t = Table::default();
        let mut have_header = false;
        for line in input.lines() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
            if have_header {
                if cells.len() != t.header.len() {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, format!("row has {} cells, header has {}", cells.len(), t.header.len())));
                }
                t.rows.push(cells);
            } else {
                t.header = cells;
                have_header = true;
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Self::read(io::BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(["1", "x y"]);
        t.push(["2", ""]);
        let back = Table::read(&t.to_bytes()[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("b"), Some(1));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
