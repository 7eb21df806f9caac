//! `NGGS` generator checkpoints: magic, a JSON header, then the special
//! tokens, LoRA adapters, head/encoders and frozen base as length-prefixed
//! f32 segments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use super::{ContextEncoder, GenError, GeneratorConfig, GeneratorState, Result, TargetSizing};
use crate::binio::{read_array, read_blob, read_f32s, read_u64, write_blob, write_f32s, write_u64};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NGGSv001";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: GeneratorConfig,
    target: TargetSizing,
    encoder: ContextEncoder,
}

fn write_segment(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    write_u64(w, t.len() as u64)?;
    write_f32s(w, t.data())
}

fn read_segment(r: &mut impl Read, into: &mut Tensor<f32>, name: &str) -> Result<()> {
    let n = read_u64(r)? as usize;
    if n != into.len() {
        return Err(GenError::File(format!("segment {name}: {n} values, expected {}", into.len())));
    }
    into.data_mut().copy_from_slice(&read_f32s(r, n)?);
    Ok(())
}

fn write_to(w: &mut impl Write, state: &GeneratorState) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let header = Header {
        config: state.config.clone(),
        target: state.target,
        encoder: state.encoder,
    };
    write_blob(w, &serde_json::to_vec(&header).expect("header serializes"))?;
    for (_, t) in state.trainable_parameters() {
        write_segment(w, t)?;
    }
    for t in state.base.tensors() {
        write_segment(w, t)?;
    }
    Ok(())
}

fn read_from(r: &mut impl Read) -> Result<GeneratorState> {
    let magic = read_array::<8>(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GenError::File(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let header: Header =
        serde_json::from_slice(&read_blob(r, 1 << 20)?).map_err(|e| GenError::File(format!("header: {e}")))?;
    header.config.validate()?;
    // Shapes come from a skeleton built with the stored config; every value
    // is then overwritten from the file.
    let mut state = GeneratorState::skeleton(header.config, header.target, header.encoder);
    let names: Vec<String> = state.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    for (t, name) in state.trainable_mut().into_iter().zip(&names) {
        read_segment(r, t, name)?;
    }
    for (i, t) in state.base.tensors_mut().into_iter().enumerate() {
        read_segment(r, t, &format!("base.{i}"))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(GenError::File("trailing bytes after last segment".into()));
    }
    Ok(state)
}

pub fn encode_checkpoint(state: &GeneratorState) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(&mut out, state).expect("writing to memory");
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GeneratorState> {
    read_from(&mut Cursor::new(bytes))
}

pub fn write_checkpoint(path: &Path, state: &GeneratorState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<GeneratorState> {
    read_from(&mut BufReader::new(File::open(path)?))
}
