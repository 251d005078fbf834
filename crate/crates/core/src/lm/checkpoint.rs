//! Checkpoint container.
//!
//! Layout: the 8-byte magic `NTRPCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (config, recipe,
//! iteration, named parameter blocks), then every parameter as a
//! little-endian `f32` in block order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LmConfig, TrainRecipe};
use super::model::{LmParams, ParamLayout, Span};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NTRPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: LmConfig,
    recipe: TrainRecipe,
    iter: usize,
    dtype: String,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LmParams,
    pub recipe: TrainRecipe,
    pub iter: usize,
}

/// Every named tensor of the layout, in buffer order.
pub fn named_blocks(layout: &ParamLayout) -> Vec<BlockEntry> {
    let entry = |name: String, s: Span| BlockEntry { name, offset: s.offset, len: s.len };
    let mut out = vec![entry("wte".into(), layout.wte), entry("wpe".into(), layout.wpe)];
    for (i, l) in layout.layers.iter().enumerate() {
        for (name, span) in [
            ("ln1_w", l.ln1_w),
            ("ln1_b", l.ln1_b),
            ("qkv_w", l.qkv_w),
            ("qkv_b", l.qkv_b),
            ("proj_w", l.proj_w),
            ("proj_b", l.proj_b),
            ("ln2_w", l.ln2_w),
            ("ln2_b", l.ln2_b),
            ("fc_w", l.fc_w),
            ("fc_b", l.fc_b),
            ("fcproj_w", l.fcproj_w),
            ("fcproj_b", l.fcproj_b),
        ] {
            out.push(entry(format!("h{i}.{name}"), span));
        }
    }
    out.push(entry("lnf_w".into(), layout.lnf_w));
    out.push(entry("lnf_b".into(), layout.lnf_b));
    out
}

pub fn save_checkpoint(path: &Path, params: &LmParams, recipe: &TrainRecipe, iter: usize) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config,
        recipe: recipe.clone(),
        iter,
        dtype: "f32le".into(),
        blocks: named_blocks(&params.layout),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + 4 * params.data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| Error::CorruptFile(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Unsupported(format!("checkpoint format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])?;
    let layout = ParamLayout::new(&header.config);
    if header.blocks != named_blocks(&layout) {
        return Err(corrupt("block table does not match the configuration"));
    }
    let raw = &bytes[body..];
    if raw.len() != 4 * layout.total {
        return Err(corrupt("parameter block length mismatch"));
    }
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Checkpoint { params: LmParams::from_raw(header.config, data)?, recipe: header.recipe, iter: header.iter })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = LmConfig { n_layers: 2, n_heads: 2, d_model: 8, context_len: 4, vocab_size: 11, dropout: 0.0 };
        let params = LmParams::<f32>::init(cfg, 3).unwrap();
        let recipe = TrainRecipe::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params, &recipe, 17).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck, Checkpoint { params, recipe, iter: 17 });
    }

    #[test]
    fn blocks_tile_the_buffer() {
        let layout = ParamLayout::new(&LmConfig::desk());
        let blocks = named_blocks(&layout);
        let mut cursor = 0;
        for b in &blocks {
            assert_eq!(b.offset, cursor, "{}", b.name);
            cursor += b.len;
        }
        assert_eq!(cursor, layout.total);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"NTRPCKPT\x01\0\0\0\xff\0\0\0\0\0\0\0{}").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptFile(_))));
    }
}
