//! Native dataset cache: one little-endian blob per sample plus a JSON
//! manifest recording the catalog, the generation seed and a config hash.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassCatalog, PanopticSample, Segment};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCLS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub catalog: ClassCatalog,
    pub seed: u64,
    pub config_hash: String,
    pub samples: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(s: &PanopticSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.image.len() + s.segment_map.len() * 4);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(s.height as u32).unwrap();
    out.write_u32::<LittleEndian>(s.width as u32).unwrap();
    out.extend(s.image.iter().map(|v| (v * 255.0).round() as u8));
    for id in &s.segment_map {
        out.write_u32::<LittleEndian>(*id).unwrap();
    }
    out.write_u32::<LittleEndian>(s.segments.len() as u32).unwrap();
    for g in &s.segments {
        out.write_u32::<LittleEndian>(g.id).unwrap();
        out.write_u32::<LittleEndian>(g.class_id).unwrap();
        out.write_u8(g.is_thing as u8).unwrap();
    }
    out
}

fn decode(bytes: &[u8]) -> std::io::Result<PanopticSample> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.read_u32::<LittleEndian>()? != VERSION {
        return Err(bad("unsupported blob version"));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let mut raw = vec![0u8; h * w * 3];
    r.read_exact(&mut raw)?;
    let image = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let mut segment_map = vec![0u32; h * w];
    r.read_u32_into::<LittleEndian>(&mut segment_map)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        segments.push(Segment {
            id: r.read_u32::<LittleEndian>()?,
            class_id: r.read_u32::<LittleEndian>()?,
            is_thing: r.read_u8()? != 0,
        });
    }
    Ok(PanopticSample {
        height: h,
        width: w,
        image,
        segment_map,
        segments,
    })
}

pub fn write_cache(
    dir: &Path,
    catalog: &ClassCatalog,
    samples: &[PanopticSample],
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:06}.bin");
        let blob = encode(s);
        let path = dir.join(&file);
        fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
        entries.push(BlobEntry {
            file,
            sha256: sha256_hex(&blob),
        });
    }
    let manifest = CacheManifest {
        catalog: catalog.clone(),
        seed,
        config_hash: config_hash.to_string(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_cache(dir: &Path) -> Result<(CacheManifest, Vec<PanopticSample>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&blob) != entry.sha256 {
            return Err(Error::format(&path, "blob hash does not match manifest"));
        }
        let s = decode(&blob).map_err(|e| Error::format(&path, e.to_string()))?;
        s.validate().map_err(|e| Error::format(&path, e.to_string()))?;
        samples.push(s);
    }
    Ok((manifest, samples))
}
