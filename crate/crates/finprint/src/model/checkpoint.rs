//! Checkpoint format: a JSON header followed by FNT1 tensor blobs.
//!
//! Layout: little-endian u32 header length, the UTF-8 JSON header, then one
//! FNT1-encoded tensor per name listed in the header, in order. Weight
//! tensors come first, then optimizer moments when present. Loading a saved
//! checkpoint reproduces weights and optimizer state bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnt;

use super::{
    EncoderConfig, OptimizerKind, OptimizerState, ParamTensors, Weights, WEIGHTS_VERSION,
};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    init_seed: u64,
    optimizer: OptHeader,
    tensors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptHeader {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    has_m: bool,
    has_v: bool,
}

pub fn save_checkpoint(w: &Weights, opt: &OptimizerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensor_names: Vec<String> = w
        .tensors
        .named_slices()
        .iter()
        .map(|(n, _, _)| n.clone())
        .collect();
    if let Some(m) = &opt.m {
        tensor_names.extend(m.named_slices().iter().map(|(n, _, _)| format!("opt.m.{n}")));
    }
    if let Some(v) = &opt.v {
        tensor_names.extend(v.named_slices().iter().map(|(n, _, _)| format!("opt.v.{n}")));
    }
    let header = Header {
        version: w.version,
        config: w.config.clone(),
        init_seed: w.init_seed,
        optimizer: OptHeader {
            kind: opt.kind,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            t: opt.t,
            has_m: opt.m.is_some(),
            has_v: opt.v.is_some(),
        },
        tensors: tensor_names,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Invalid(format!("checkpoint header serialization: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    out.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    let mut write_set = |set: &ParamTensors| -> Result<()> {
        for (_, slice, shape) in set.named_slices() {
            fnt::write_tensor_to(&mut out, &shape, slice).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    write_set(&w.tensors)?;
    if let Some(m) = &opt.m {
        write_set(m)?;
    }
    if let Some(v) = &opt.v {
        write_set(v)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Weights, OptimizerState)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|e| Error::corrupt(path, format!("truncated header length: {e}")))?;
    let hlen = u32::from_le_bytes(len_buf) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)
        .map_err(|e| Error::corrupt(path, format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::corrupt(path, format!("bad header json: {e}")))?;
    if header.version != WEIGHTS_VERSION {
        return Err(Error::corrupt(
            path,
            format!(
                "unsupported checkpoint version {} (expected {WEIGHTS_VERSION})",
                header.version
            ),
        ));
    }
    header.config.validate()?;

    let mut read_set = |expect_prefix: &str| -> Result<ParamTensors> {
        let mut set = ParamTensors::zeros(&header.config);
        let names: Vec<String> = set
            .named_slices()
            .iter()
            .map(|(n, _, _)| format!("{expect_prefix}{n}"))
            .collect();
        for (i, name) in names.iter().enumerate() {
            let t = fnt::read_tensor_from(&mut r).map_err(|m| {
                Error::corrupt(path, format!("tensor {name}: {m}"))
            })?;
            let slices = set.slices_mut();
            if t.data.len() != slices[i].len() {
                return Err(Error::corrupt(
                    path,
                    format!(
                        "tensor {name} has {} values, config implies {}",
                        t.data.len(),
                        slices[i].len()
                    ),
                ));
            }
            set.slices_mut()[i].copy_from_slice(&t.data);
        }
        Ok(set)
    };

    let tensors = read_set("")?;
    let oh = &header.optimizer;
    let m = if oh.has_m { Some(read_set("opt.m.")?) } else { None };
    let v = if oh.has_v { Some(read_set("opt.v.")?) } else { None };

    let weights = Weights {
        config: header.config.clone(),
        tensors,
        version: header.version,
        init_seed: header.init_seed,
    };
    let opt = OptimizerState {
        kind: oh.kind,
        learning_rate: oh.learning_rate,
        momentum: oh.momentum,
        beta1: oh.beta1,
        beta2: oh.beta2,
        eps: oh.eps,
        t: oh.t,
        m,
        v,
    };
    Ok((weights, opt))
}
