//! Dataset manifests: one tab-separated record per image plus a header
//! carrying the class count, image size, and channel count.
//!
//! Format:
//! ```text
//! #K=4 size=32 channels=1
//! relative/or/absolute/path.png<TAB>subject_007<TAB>2
//! ```

use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:1: malformed header {line:?} (expected `#K=<int> size=<int> channels=<int>`)")]
    BadHeader { path: String, line: String },
    #[error("{path}:{line}: malformed record (expected `path<TAB>subject_id<TAB>class_index`)")]
    BadRecord { path: String, line: usize },
    #[error("{path}:{line}: class index {class} out of range for K={class_count}")]
    ClassOutOfRange {
        path: String,
        line: usize,
        class: usize,
        class_count: usize,
    },
    #[error("{path}:{line}: empty subject id")]
    EmptySubject { path: String, line: usize },
    #[error("{path}:{line}: duplicate image path {dup:?}")]
    DuplicatePath {
        path: String,
        line: usize,
        dup: String,
    },
    #[error("{path}: manifest has no entries")]
    Empty { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.subject_id.as_str()) {
                out.push(e.subject_id.clone());
            }
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for e in &self.entries {
            counts[e.class_index] += 1;
        }
        counts
    }

    pub fn serialize(&self) -> String {
        let mut out = format!(
            "#K={} size={} channels={}\n",
            self.class_count, self.image_size, self.channels
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path, e.subject_id, e.class_index
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.serialize()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: display.clone(),
        source,
    })?;
    parse_manifest(&text, &display)
}

fn parse_manifest(text: &str, display: &str) -> Result<DatasetManifest, ManifestError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let (class_count, image_size, channels) =
        parse_header(header).ok_or_else(|| ManifestError::BadHeader {
            path: display.to_string(),
            line: header.to_string(),
        })?;

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (p, s, c) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(s), Some(c), None) => (p, s, c),
            _ => {
                return Err(ManifestError::BadRecord {
                    path: display.to_string(),
                    line: line_no,
                })
            }
        };
        let class_index: usize = c.parse().map_err(|_| ManifestError::BadRecord {
            path: display.to_string(),
            line: line_no,
        })?;
        if class_index >= class_count {
            return Err(ManifestError::ClassOutOfRange {
                path: display.to_string(),
                line: line_no,
                class: class_index,
                class_count,
            });
        }
        if s.is_empty() {
            return Err(ManifestError::EmptySubject {
                path: display.to_string(),
                line: line_no,
            });
        }
        if !seen.insert(p.to_string()) {
            return Err(ManifestError::DuplicatePath {
                path: display.to_string(),
                line: line_no,
                dup: p.to_string(),
            });
        }
        entries.push(ManifestEntry {
            path: p.to_string(),
            subject_id: s.to_string(),
            class_index,
        });
    }
    if entries.is_empty() {
        return Err(ManifestError::Empty {
            path: display.to_string(),
        });
    }
    Ok(DatasetManifest {
        class_count,
        image_size,
        channels,
        entries,
    })
}

fn parse_header(line: &str) -> Option<(usize, usize, usize)> {
    let rest = line.strip_prefix('#')?;
    let mut k = None;
    let mut size = None;
    let mut channels = None;
    for part in rest.split_whitespace() {
        let (key, value) = part.split_once('=')?;
        let value: usize = value.parse().ok()?;
        match key {
            "K" => k = Some(value),
            "size" => size = Some(value),
            "channels" => channels = Some(value),
            _ => return None,
        }
    }
    Some((k?, size?, channels?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            class_count: 3,
            image_size: 32,
            channels: 1,
            entries: vec![
                ManifestEntry {
                    path: "a/0.png".into(),
                    subject_id: "id_000".into(),
                    class_index: 0,
                },
                ManifestEntry {
                    path: "a/1.png".into(),
                    subject_id: "id_000".into(),
                    class_index: 2,
                },
                ManifestEntry {
                    path: "b/0.png".into(),
                    subject_id: "id_001".into(),
                    class_index: 1,
                },
            ],
        }
    }

    #[test]
    fn round_trip_preserves_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        let m = sample();
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn class_index_at_k_names_the_line() {
        let text = "#K=3 size=32 channels=1\nx.png\ts\t3\n";
        let err = parse_manifest(text, "m").unwrap_err();
        match err {
            ManifestError::ClassOutOfRange { line, class, .. } => {
                assert_eq!(line, 2);
                assert_eq!(class, 3);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let text = "#K=2 size=32 channels=1\nx.png\ts\t0\nx.png\tt\t1\n";
        assert!(matches!(
            parse_manifest(text, "m").unwrap_err(),
            ManifestError::DuplicatePath { line: 3, .. }
        ));
    }

    #[test]
    fn malformed_records_and_header_rejected() {
        assert!(matches!(
            parse_manifest("K=2 size=32 channels=1\n", "m").unwrap_err(),
            ManifestError::BadHeader { .. }
        ));
        assert!(matches!(
            parse_manifest("#K=2 size=32 channels=1\nonly_two\tfields\n", "m").unwrap_err(),
            ManifestError::BadRecord { line: 2, .. }
        ));
        assert!(matches!(
            parse_manifest("#K=2 size=32 channels=1\nx.png\t\t1\n", "m").unwrap_err(),
            ManifestError::EmptySubject { line: 2, .. }
        ));
        assert!(matches!(
            parse_manifest("#K=2 size=32 channels=1\n", "m").unwrap_err(),
            ManifestError::Empty { .. }
        ));
    }

    #[test]
    fn subjects_and_histogram() {
        let m = sample();
        assert_eq!(m.subjects(), vec!["id_000".to_string(), "id_001".into()]);
        assert_eq!(m.class_histogram(), vec![1, 1, 1]);
    }
}
