use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Non-empty lines of a UTF-8 corpus file (one sequence per line).
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pre-tokenized file: one sequence per line of space-separated ids.
pub fn read_pretokenized(path: &Path) -> Result<Vec<Vec<usize>>> {
    read_corpus(path)?
        .iter()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Data(format!("{}:{}: bad token id {t:?}", path.display(), n + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn write_pretokenized(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let lines: Vec<String> =
        seqs.iter().map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")).collect();
    write_corpus(path, &lines)
}

/// Probe labels as CSV `line_index,label`.
pub fn write_probe_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["line_index", "label"]).map_err(|e| Error::Data(e.to_string()))?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `line_index,label` rows; the result is indexed by line.
pub fn read_probe_labels(path: &Path, num_lines: usize) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut labels = vec![None; num_lines];
    for rec in r.deserialize::<(usize, usize)>() {
        let (i, l) = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let slot =
            labels.get_mut(i).ok_or_else(|| Error::Data(format!("label for line {i} beyond {num_lines} lines")))?;
        *slot = Some(l);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("line {i} has no probe label"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.txt");
        write_corpus(&corpus, &["a b".into(), "c".into()]).unwrap();
        assert_eq!(read_corpus(&corpus).unwrap(), ["a b", "c"]);

        let ids = dir.path().join("ids.txt");
        write_pretokenized(&ids, &[vec![2, 9, 3], vec![2, 3]]).unwrap();
        assert_eq!(read_pretokenized(&ids).unwrap(), vec![vec![2, 9, 3], vec![2, 3]]);

        let probe = dir.path().join("p.csv");
        write_probe_labels(&probe, &[1, 0, 1]).unwrap();
        assert_eq!(std::fs::read_to_string(&probe).unwrap(), "line_index,label\n0,1\n1,0\n2,1\n");
        assert_eq!(read_probe_labels(&probe, 3).unwrap(), [1, 0, 1]);
        assert!(read_probe_labels(&probe, 4).is_err());
    }

    #[test]
    fn bad_ids_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ids = dir.path().join("ids.txt");
        std::fs::write(&ids, "1 2\n3 x\n").unwrap();
        let err = read_pretokenized(&ids).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
