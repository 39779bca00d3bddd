//! Self-describing parameter container.
//!
//! A text header (magic line, problem kind, network configuration as JSON,
//! one `name rank dims…` line per array, `end`) is followed by the values of
//! every array as little-endian `f32`, in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::{Model, ParameterSet};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::routing::ProblemKind;

const MAGIC: &str = "EPOSECKPT 1";

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let params = model.params();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("kind {}\n", model.kind()));
    out.push_str(&format!(
        "config {}\n",
        serde_json::to_string(model.config()).expect("config serializes")
    ));
    out.push_str(&format!("tensors {}\n", params.len()));
    for p in params.iter() {
        out.push_str(&p.name);
        out.push_str(&format!(" {}", p.dims.len()));
        for d in &p.dims {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for p in params.iter() {
        for &v in p.value.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<&[u8]>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if n == 0 {
            return Err(Error::Checkpoint("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let kind: ProblemKind = field(&next_line(&mut reader)?, "kind")?
        .parse()
        .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    let config: NetConfig = serde_json::from_str(field(&next_line(&mut reader)?, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let count: usize = field(&next_line(&mut reader)?, "tensors")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad tensor count".into()))?;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut reader)?;
        let mut parts = l.split(' ');
        let name = parts.next().unwrap_or_default().to_string();
        let nums: std::result::Result<Vec<usize>, _> = parts.map(str::parse).collect();
        let nums = nums.map_err(|_| Error::Checkpoint(format!("bad header line `{l}`")))?;
        match nums.split_first() {
            Some((&rank, dims)) if rank == dims.len() && rank <= 2 => headers.push((name, dims.to_vec())),
            _ => return Err(Error::Checkpoint(format!("bad header line `{l}`"))),
        }
    }
    if next_line(&mut reader)? != "end" {
        return Err(Error::Checkpoint("missing header terminator".into()));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: usize = headers.iter().map(|(_, d)| d.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let arrays = headers
        .into_iter()
        .map(|(name, dims)| {
            let len = dims.iter().product();
            let data = values.by_ref().take(len).collect();
            (name, dims, data)
        })
        .collect();
    let mut model = Model::new(kind, config, 0, 1.0)?;
    let params = ParameterSet::with_values(model.params(), arrays)?;
    model.load_params(params)?;
    Ok(model)
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` line, found `{line}`")))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&checkpoint_bytes(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path.as_ref())?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig {
            embed_dim: 8,
            encoder_layers: 1,
            heads: 2,
            ff_dim: 8,
            critic_layers: 1,
            critic_hidden: 4,
            clip_c: 7.5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in ProblemKind::ALL {
            let mut model = Model::new(kind, cfg(), 7, 0.2).unwrap();
            model.set_log_alpha(-1.234_567_89);
            let bytes = checkpoint_bytes(&model);
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(back.config(), model.config());
            assert_eq!(checkpoint_bytes(&back), bytes);
            for (a, b) in model.params().iter().zip(back.params().iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.group, b.group);
                for (x, y) in a.value.iter().zip(b.value.iter()) {
                    assert_eq!((*x as f32) as f64, *y);
                }
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(ProblemKind::Cvrp, cfg(), 1, 0.03).unwrap();
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&model));
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = Model::new(ProblemKind::Tsp, cfg(), 1, 0.03).unwrap();
        let bytes = checkpoint_bytes(&model);
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(model_from_bytes(b"hello\n"), Err(Error::Checkpoint(_))));
        let text = String::from_utf8_lossy(&bytes[..200]).replace("policy.encoder", "policy.encodex");
        let mut tampered = text.into_bytes();
        tampered.extend_from_slice(&bytes[200..]);
        assert!(model_from_bytes(&tampered).is_err());
    }
}
