use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_features, LabelSequence, Utterance, Vocabulary};
use crate::error::{Error, Result};

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub streams: Vec<String>,
    pub text: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format(offset, format!("{}: {e}", path.display())))?;
            out.push(e);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Feature paths in a manifest are relative to the manifest's directory
/// unless absolute.
pub fn resolve_stream_path(manifest: &Path, stream: &str) -> PathBuf {
    let p = Path::new(stream);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Reads a manifest and every feature file it references.
pub fn load_manifest(path: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let streams = e
                .streams
                .iter()
                .map(|s| read_features(&resolve_stream_path(path, s)))
                .collect::<Result<Vec<_>>>()?;
            let labels = LabelSequence::new(vocab.encode_text(&e.text))
                .map_err(|err| Error::arg(format!("utterance {}: {err}", e.id)))?;
            Utterance::new(e.id, streams, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let entries = vec![ManifestEntry {
            id: "u1".into(),
            streams: vec!["a.fmat".into(), "b.fmat".into()],
            text: "ab ba".into(),
        }];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);

        fs::write(&p, "{\"id\":\"u\",\"streams\":[],\"text\":\"a\",\"extra\":1}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let p = resolve_stream_path(Path::new("/data/set/manifest.jsonl"), "feats/x.fmat");
        assert_eq!(p, Path::new("/data/set/feats/x.fmat"));
        let p = resolve_stream_path(Path::new("/data/m.jsonl"), "/abs/x.fmat");
        assert_eq!(p, Path::new("/abs/x.fmat"));
    }
}
