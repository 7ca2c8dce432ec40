use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use super::MediaRecord;
use crate::error::Result;

/// Parsed records plus `(line number, message)` for each skipped line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestRead {
    pub records: Vec<MediaRecord>,
    pub errors: Vec<(usize, String)>,
}

/// One JSON object per line. Blank lines are ignored; unparseable lines
/// and repeated ids are skipped and reported with their 1-based line
/// number.
pub fn parse_manifest(text: &str) -> ManifestRead {
    let mut out = ManifestRead::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MediaRecord>(line) {
            Ok(r) if !seen.insert(r.id.clone()) => {
                out.errors.push((i + 1, format!("duplicate id {:?}", r.id)));
            }
            Ok(r) => out.records.push(r),
            Err(e) => out.errors.push((i + 1, e.to_string())),
        }
    }
    for (line, msg) in &out.errors {
        log::warn!("manifest line {line} skipped: {msg}");
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<ManifestRead> {
    Ok(parse_manifest(&std::fs::read_to_string(path)?))
}

pub fn write_manifest(records: &[MediaRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::TextView;

    fn rec(i: usize) -> MediaRecord {
        let mut r = MediaRecord::new(format!("r{i}"), format!("title number {i}"), vec!["#a".into()], i as f64 + 0.5);
        r.modal_paths.insert("depth".into(), format!("depth/{i}.npy"));
        r.texts.insert(TextView::VideoCaption, "a caption".into());
        if i % 2 == 0 {
            r.rating = Some(4.5);
            r.downloads = Some(12);
            r.label = Some("dog".into());
            r.sample_rate = Some(16_000.0);
        }
        r
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs: Vec<_> = (0..5).map(rec).collect();
        write_manifest(&recs, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.records, recs);
        assert!(back.errors.is_empty());
    }

    #[test]
    fn corrupt_line_is_skipped_and_counted() {
        let mut lines: Vec<String> = (0..9).map(|i| serde_json::to_string(&rec(i)).unwrap()).collect();
        lines.insert(4, "{\"id\": \"broken\", ".into());
        let read = parse_manifest(&lines.join("\n"));
        assert_eq!(read.records.len(), 9);
        assert_eq!(read.errors.len(), 1);
        assert_eq!(read.errors[0].0, 5);
    }

    #[test]
    fn empty_and_duplicates() {
        assert_eq!(parse_manifest(""), ManifestRead::default());
        let line = serde_json::to_string(&rec(1)).unwrap();
        let read = parse_manifest(&format!("{line}\n{line}\n"));
        assert_eq!(read.records.len(), 1);
        assert_eq!(read.errors[0].0, 2);
        let unknown = parse_manifest("{\"id\":\"x\",\"title\":\"a b\",\"duration\":1,\"colour\":1}");
        assert_eq!(unknown.errors.len(), 1);
    }
}
