//! Binary checkpoint file.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "FISF" | version | config length | config text (key = value lines)
//! group count | per group: name length, name, ndims, dims..., f32 LE payload (row-major)
//! CRC-32 of every preceding byte
//! ```

use std::path::Path;

use fisformer::params::Parameters;
use fisformer::transformer::{ModelConfig, ModelParams};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"FISF";
pub const VERSION: u32 = 1;

pub fn config_text(cfg: &ModelConfig) -> String {
    format!(
        "d_model = {}\nn_blocks = {}\nn_rules = {}\ninteraction = {}\nmf_kind = {}\nffn_hidden = {}\n\
         lookback = {}\nhorizon = {}\nn_variates = {}\nshare_mf_across_tokens = {}\nepsilon = {:?}\ndropout = {:?}\n",
        cfg.d_model,
        cfg.n_blocks,
        cfg.n_rules,
        cfg.interaction,
        cfg.mf_kind,
        cfg.ffn_hidden,
        cfg.lookback,
        cfg.horizon,
        cfg.n_variates,
        cfg.share_mf_across_tokens,
        cfg.epsilon,
        cfg.dropout
    )
}

pub fn parse_config_text(text: &str) -> Result<ModelConfig, String> {
    let mut cfg = ModelConfig::new(0, 0, 0);
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed config line {line:?}"))?;
        let (k, v) = (k.trim(), v.trim());
        let e = |_| format!("bad value {v:?} for {k}");
        match k {
            "d_model" => cfg.d_model = v.parse().map_err(e)?,
            "n_blocks" => cfg.n_blocks = v.parse().map_err(e)?,
            "n_rules" => cfg.n_rules = v.parse().map_err(e)?,
            "interaction" => {
                cfg.interaction = v.parse().map_err(|_| format!("bad interaction {v:?}"))?
            }
            "mf_kind" => cfg.mf_kind = v.parse().map_err(|_| format!("bad mf_kind {v:?}"))?,
            "ffn_hidden" => cfg.ffn_hidden = v.parse().map_err(e)?,
            "lookback" => cfg.lookback = v.parse().map_err(e)?,
            "horizon" => cfg.horizon = v.parse().map_err(e)?,
            "n_variates" => cfg.n_variates = v.parse().map_err(e)?,
            "share_mf_across_tokens" => {
                cfg.share_mf_across_tokens = v.parse().map_err(|_| format!("bad bool {v:?}"))?
            }
            "epsilon" => cfg.epsilon = v.parse().map_err(|_| format!("bad epsilon {v:?}"))?,
            "dropout" => cfg.dropout = v.parse().map_err(|_| format!("bad dropout {v:?}"))?,
            other => return Err(format!("unknown model key {other:?}")),
        }
        seen += 1;
    }
    if seen != 12 {
        return Err(format!("expected 12 model keys, found {seen}"));
    }
    Ok(cfg)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> CliResult<()> {
    let v = u32::try_from(v)
        .map_err(|_| CliError::Usage(format!("value {v} does not fit a checkpoint field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes `params` with every entry rounded to `f32`.
pub fn encode(cfg: &ModelConfig, params: &ModelParams) -> CliResult<Vec<u8>> {
    params.check_config(cfg)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(cfg);
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    let tensors = params.tensors();
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        // logical iteration order is row-major whatever the memory layout
        for &v in t.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), String> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        ));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(format!(
            "unsupported format version {version} (expected {VERSION})"
        ));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| "config text is not UTF-8")?;
    let cfg = parse_config_text(text)?;
    cfg.validate().map_err(|e| e.to_string())?;
    let mut params = ModelParams::init(&cfg, 0).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(format!(
            "expected {} parameter groups, found {count}",
            tensors.len()
        ));
    }
    for (name, t) in tensors.iter_mut() {
        let n = r.u32()?;
        let stored_name = std::str::from_utf8(r.take(n)?).map_err(|_| "group name is not UTF-8")?;
        if stored_name != name {
            return Err(format!("expected group {name}, found {stored_name}"));
        }
        let ndims = r.u32()?;
        let dims: Vec<usize> = (0..ndims).map(|_| r.u32()).collect::<Result<_, _>>()?;
        if dims != t.shape() {
            return Err(format!(
                "group {name}: expected dims {:?}, found {dims:?}",
                t.shape()
            ));
        }
        let payload = r.take(t.len() * 4)?;
        for (v, b) in t.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    drop(tensors);
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok((cfg, params))
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> CliResult<()> {
    let bytes = encode(cfg, params)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::checkpoint(path, m))
}

/// Fields on which two model configs disagree.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let ta = config_text(a);
    let tb = config_text(b);
    ta.lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("checkpoint has {x:?}, run config has {y:?}"))
        .collect()
}

/// Loads a checkpoint and refuses it unless it was written for `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> CliResult<ModelParams> {
    let (cfg, params) = load(path)?;
    let diffs = config_differences(&cfg, expected);
    if !diffs.is_empty() {
        return Err(CliError::checkpoint(
            path,
            format!("config mismatch: {}", diffs.join("; ")),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fisformer::membership::MfKind;
    use fisformer::transformer::Interaction;

    fn rounded(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg, seed).unwrap();
        p.round_to_f32();
        p
    }

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in MfKind::ALL {
            for interaction in [Interaction::Fis, Interaction::SelfAttention] {
                let mut cfg = ModelConfig::new(3, 16, 4).with_width(8);
                cfg.mf_kind = kind;
                cfg.interaction = interaction;
                cfg.epsilon = 1e-8 / 3.0;
                let p = rounded(&cfg, 11);
                let bytes = encode(&cfg, &p).unwrap();
                let (cfg2, p2) = decode(&bytes).unwrap();
                assert_eq!(cfg2, cfg);
                assert_eq!(bits(&p2), bits(&p));
                assert_eq!(encode(&cfg2, &p2).unwrap(), bytes);
            }
        }
    }

    #[test]
    fn corruption_is_refused() {
        let cfg = ModelConfig::new(2, 8, 2).with_width(4);
        let bytes = encode(&cfg, &rounded(&cfg, 0)).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(decode(&flipped).unwrap_err().contains("checksum"));
        let mut bad_crc = bytes.clone();
        *bad_crc.last_mut().unwrap() ^= 0xff;
        assert!(decode(&bad_crc).unwrap_err().contains("checksum"));
        assert!(decode(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode(b"NOPE00000000").unwrap_err().contains("magic"));
    }

    #[test]
    fn future_version_is_refused() {
        let cfg = ModelConfig::new(2, 8, 2).with_width(4);
        let mut bytes = encode(&cfg, &rounded(&cfg, 0)).unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode(&bytes).unwrap_err().contains("version 9"));
    }

    #[test]
    fn mismatched_config_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fisf");
        let cfg = ModelConfig::new(2, 8, 2).with_width(4);
        save(&path, &cfg, &rounded(&cfg, 0)).unwrap();
        assert!(load_matching(&path, &cfg).is_ok());
        let mut other = cfg.clone();
        other.horizon = 3;
        let msg = load_matching(&path, &other).unwrap_err().to_string();
        assert!(msg.contains("horizon"), "{msg}");
    }
}
