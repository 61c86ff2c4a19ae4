//! Adapter checkpoints: the networks in nnkit binary format plus a JSON
//! manifest describing the configuration they were trained for.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ObjectQuery, OaConfig, OaError, OaParams, Result, NET_NAMES};
use crate::nnkit::{read_f64s, read_network, write_f64s, write_network};

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TTCOA\0\0\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OaManifest {
    pub version: u32,
    pub config: OaConfig,
    pub networks: Vec<String>,
    pub sha256: String,
}

impl OaManifest {
    /// Refuses configurations the checkpoint was not trained for.
    pub fn check_compatible(&self, want: &OaConfig) -> Result<()> {
        let c = &self.config;
        let mut diffs = Vec::new();
        if c.n_candidates != want.n_candidates {
            diffs.push(format!("N {} vs {}", c.n_candidates, want.n_candidates));
        }
        if c.bands != want.bands {
            diffs.push(format!("bands {} vs {}", c.bands, want.bands));
        }
        if c.descriptor_dim != want.descriptor_dim {
            diffs.push(format!("D {} vs {}", c.descriptor_dim, want.descriptor_dim));
        }
        if c.grid != want.grid {
            diffs.push(format!("grid {:?} vs {:?}", c.grid, want.grid));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(OaError::ManifestMismatch(diffs.join(", ")))
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn encode(params: &OaParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for net in params.networks() {
        write_network(&mut out, net).expect("in-memory write");
    }
    out.extend_from_slice(&(params.object_queries.len() as u32).to_le_bytes());
    for q in &params.object_queries {
        write_f64s(&mut out, &q.embedding).expect("in-memory write");
        write_f64s(&mut out, &q.anchor).expect("in-memory write");
    }
    out
}

impl OaParams {
    /// SHA-256 of the serialized checkpoint bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(encode(self)))
    }
}

/// Writes `path` and `path.manifest.json`.
pub fn save_checkpoint(path: &Path, params: &OaParams) -> Result<OaManifest> {
    let bytes = encode(params);
    let manifest = OaManifest {
        version: MANIFEST_VERSION,
        config: params.config.clone(),
        networks: NET_NAMES.iter().map(|s| s.to_string()).collect(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a checkpoint, verifying its manifest and, when given, that it was
/// trained for `expected`.
pub fn load_checkpoint(path: &Path, expected: Option<&OaConfig>) -> Result<OaParams> {
    let manifest: OaManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(OaError::ManifestMismatch(format!("manifest version {}", manifest.version)));
    }
    if let Some(want) = expected {
        manifest.check_compatible(want)?;
    }
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(OaError::ManifestMismatch("checkpoint hash differs from manifest".into()));
    }
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(OaError::ManifestMismatch("not an adapter checkpoint".into()));
    }
    let mut r = &bytes[MAGIC.len()..];
    let mut nets = Vec::with_capacity(NET_NAMES.len());
    for _ in NET_NAMES {
        nets.push(read_network(&mut r)?);
    }
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let mut object_queries = Vec::new();
    for _ in 0..u32::from_le_bytes(n) {
        let embedding = read_f64s(&mut r)?;
        let a = read_f64s(&mut r)?;
        if a.len() != 2 {
            return Err(OaError::ManifestMismatch("bad object query anchor".into()));
        }
        object_queries.push(ObjectQuery {
            embedding,
            anchor: [a[0], a[1]],
        });
    }
    let mut it = nets.into_iter();
    let mut next = || it.next().expect("seven networks");
    let params = OaParams {
        config: manifest.config.clone(),
        prompt_encoder: next(),
        proj_prompt: next(),
        proj_image: next(),
        locator: next(),
        point_lift: next(),
        shape_lift: next(),
        decoder: next(),
        object_queries,
    };
    let fresh = OaParams::init(manifest.config.clone(), 0)?;
    for (a, b) in params.networks().iter().zip(fresh.networks()) {
        if a.layers() != b.layers() {
            return Err(OaError::ManifestMismatch("network shapes differ from config".into()));
        }
    }
    Ok(params)
}
