//! Binary checkpoint: magic, version, a `key = value` echo of the model
//! configuration (plus caller-supplied keys and the vocabulary), then named
//! tensors as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::config::KeyValues;
use crate::language::Vocabulary;
use crate::numerics::{Params, Tensor2};

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCNP";
pub const CHECKPOINT_VERSION: u32 = 1;

const WORD_TABLE: &str = "language.word_table";
const VOCABULARY_KEY: &str = "vocabulary";

fn shapes(p: &ModelParams) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    for (prefix, b) in [("rgb", &p.rgb), ("flow", &p.flow)] {
        for (layer, lin) in [("first", &b.first), ("second", &b.second)] {
            out.insert(format!("{prefix}.{layer}.weight"), lin.weight.shape());
            out.insert(format!("{prefix}.{layer}.bias"), (lin.bias.len(), 1));
        }
    }
    let lstm = &p.encoder.lstm;
    out.insert("language.lstm.input_weight".into(), lstm.input_weight.shape());
    out.insert("language.lstm.hidden_weight".into(), lstm.hidden_weight.shape());
    out.insert("language.lstm.bias".into(), (lstm.bias.len(), 1));
    let proj = &p.encoder.projection;
    out.insert("language.projection.weight".into(), proj.weight.shape());
    out.insert("language.projection.bias".into(), (proj.bias.len(), 1));
    out.insert("language.query_constant".into(), (1, p.query_constant.len()));
    out.insert(WORD_TABLE.into(), p.vocabulary.table().shape());
    out
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>, ModelError> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(ModelError::Checkpoint(format!("truncated {what}")));
    }
    Ok(buf)
}

/// Writes `params`; `extra` keys (training settings, say) are echoed too.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &ModelParams,
    extra: &KeyValues,
) -> Result<(), ModelError> {
    let mut echo = extra.clone();
    echo.merge(&params.config.to_kv());
    echo.set(VOCABULARY_KEY, params.vocabulary.tokens().join(" "));
    let text = echo.render();

    let shapes = shapes(params);
    let mut tensors: Vec<(String, &[f64])> = params.tensors();
    if !tensors.iter().any(|(n, _)| n == WORD_TABLE) {
        tensors.push((WORD_TABLE.to_string(), params.vocabulary.table().data()));
    }

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    put_u32(w, text.len())?;
    w.write_all(text.as_bytes())?;
    put_u32(w, tensors.len())?;
    for (name, data) in tensors {
        let (rows, cols) = shapes[&name];
        debug_assert_eq!(rows * cols, data.len());
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, rows)?;
        put_u32(w, cols)?;
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into parameters and its configuration echo.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelParams, KeyValues), ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let magic = get_bytes(r, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r)?;
    let text = String::from_utf8(get_bytes(r, len, "configuration")?)
        .map_err(|_| bad("configuration is not UTF-8".into()))?;
    let echo = KeyValues::parse(&text)?;

    let mut config = ModelConfig::new(1, 1, 1);
    config.apply_kv(&echo)?;
    let tokens: Vec<String> = echo
        .get_str(VOCABULARY_KEY)
        .ok_or_else(|| bad("missing vocabulary".into()))?
        .split_whitespace()
        .map(str::to_string)
        .collect();

    let count = get_u32(r)?;
    let mut tensors: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let n = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, n, "tensor name")?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rows = get_u32(r)?;
        let cols = get_u32(r)?;
        let bytes = get_bytes(r, rows * cols * 8, &format!("tensor `{name}`"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), (rows, cols, data)).is_some() {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes".into()));
    }

    let (rows, cols, table) = tensors
        .remove(WORD_TABLE)
        .ok_or_else(|| bad("missing word table".into()))?;
    let vocabulary = Vocabulary::from_parts(tokens, Tensor2::from_vec(rows, cols, table)?)?;
    let mut params = ModelParams::init(config, vocabulary, 0)?;
    let expected = shapes(&params);
    for (name, target) in params.tensors_mut() {
        if name == WORD_TABLE {
            // already loaded into the vocabulary
            continue;
        }
        let (rows, cols, data) = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if expected[&name] != (rows, cols) {
            return Err(bad(format!(
                "tensor `{name}` is {rows}x{cols}, expected {:?}",
                expected[&name]
            )));
        }
        target.copy_from_slice(&data);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{name}`")));
    }
    Ok((params, echo))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;

    fn round_trip(p: &ModelParams) -> (ModelParams, Vec<u8>) {
        let mut extra = KeyValues::new();
        extra.set("seed", 7);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, p, &extra).unwrap();
        let (back, echo) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(echo.get_str("seed"), Some("7"));
        (back, buf)
    }

    #[test]
    fn round_trip_all_variants() {
        for (lf, ft) in [(false, false), (false, true), (true, false)] {
            let mut cfg = small_config(3, 2);
            cfg.language_free = lf;
            cfg.fine_tune_words = ft;
            cfg.eta = 0.1 + 0.2;
            let p = ModelParams::init(cfg, vocabulary(5, 2, 3), 9).unwrap();
            let (back, buf) = round_trip(&p);
            assert_eq!(back, p);
            assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
            let (_, again) = round_trip(&back);
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = ModelParams::init(small_config(3, 2), vocabulary(5, 2, 3), 9).unwrap();
        let (_, buf) = round_trip(&p);
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&mut bad_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_checkpoint(&mut longer.as_slice()).is_err());
    }
}
