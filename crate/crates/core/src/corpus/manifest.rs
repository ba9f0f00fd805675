//! JSON manifest and on-disk layout of a generated corpus.
//!
//! ```text
//! DIR/manifest.json
//! DIR/pages/page_00000.pgm
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusConfig, CorpusPage, DamageKind, Forgery, GrayImage, Page, Split};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRecord {
    pub id: usize,
    pub file: String,
    pub writer_id: usize,
    pub split: Split,
    pub damage_ratio: f64,
    pub damage_kinds: BTreeSet<DamageKind>,
    pub forged: bool,
    pub imposter_id: Option<usize>,
    pub fidelity: Option<f64>,
    pub style_seed: u64,
    pub render_seed: u64,
    pub damage_seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub pages: Vec<PageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn record(config: &CorpusConfig, p: &CorpusPage, file: String, digest: String) -> PageRecord {
    PageRecord {
        id: p.id,
        file,
        writer_id: p.page.writer_id,
        split: p.split,
        damage_ratio: p.page.damage_ratio,
        damage_kinds: p.damage_kinds.clone(),
        forged: p.page.is_forged(),
        imposter_id: p.page.forgery.map(|f| f.imposter_id),
        fidelity: p.page.forgery.map(|f| f.fidelity),
        style_seed: config.style_seed(p.page.writer_id),
        render_seed: p.page.render_seed,
        damage_seed: p.damage_seed,
        sha256: digest,
    }
}

/// Writes every page as PGM plus the manifest.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    let pages_dir = dir.join("pages");
    std::fs::create_dir_all(&pages_dir).map_err(|e| Error::io(&pages_dir, e))?;
    let mut records = Vec::with_capacity(corpus.pages.len());
    for p in &corpus.pages {
        let file = format!("pages/page_{:05}.pgm", p.id);
        let bytes = p.page.image.encode_pgm();
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        records.push(record(&corpus.config, p, file, sha256_hex(&bytes)));
    }
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        config: corpus.config.clone(),
        pages: records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "manifest format version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads a corpus, checking every file against its recorded digest.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let m = read_manifest(dir)?;
    let mut pages = Vec::with_capacity(m.pages.len());
    let mut ids = BTreeSet::new();
    for r in &m.pages {
        if !ids.insert(r.id) {
            return Err(Error::Format(format!("page id {} listed twice", r.id)));
        }
        let path = dir.join(&r.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = sha256_hex(&bytes);
        if digest != r.sha256 {
            return Err(Error::Format(format!(
                "{} hashes to {digest}, manifest records {}",
                path.display(),
                r.sha256
            )));
        }
        let image = GrayImage::decode_pgm(&bytes)?;
        let forgery = match (r.forged, r.imposter_id, r.fidelity) {
            (true, Some(imposter_id), Some(fidelity)) => Some(Forgery {
                imposter_id,
                fidelity,
            }),
            (false, _, _) => None,
            _ => {
                return Err(Error::Format(format!(
                    "forged page {} lacks imposter or fidelity",
                    r.id
                )))
            }
        };
        pages.push(CorpusPage {
            id: r.id,
            split: r.split,
            page: Page {
                image,
                writer_id: r.writer_id,
                damage_ratio: r.damage_ratio,
                forgery,
                render_seed: r.render_seed,
            },
            damage_seed: r.damage_seed,
            damage_kinds: r.damage_kinds.clone(),
        });
    }
    Ok(Corpus {
        config: m.config,
        pages,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate_corpus;
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            writers: 3,
            pages_per_writer: 4,
            height: 32,
            width: 32,
            seed: 21,
            ..Default::default()
        }
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&tiny()).unwrap();
        let m = write_corpus(&c, dir.path()).unwrap();
        assert_eq!(m.pages.len(), 12);
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tampered_page_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&tiny()).unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let path = dir.path().join("pages/page_00000.pgm");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn manifests_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_corpus(&generate_corpus(&tiny()).unwrap(), a.path()).unwrap();
        let mb = write_corpus(&generate_corpus(&tiny()).unwrap(), b.path()).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let c = generate_corpus(&tiny()).unwrap();
        assert!(matches!(write_corpus(&c, &blocker.join("sub")), Err(Error::Io { .. })));
    }
}
