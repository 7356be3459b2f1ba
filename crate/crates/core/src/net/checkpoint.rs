//! Checkpoint container.
//!
//! Layout: the 8-byte magic `SYNCTCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then the payload.
//! The header lists every tensor with its name, shape, byte offset into the
//! payload and element count; values are little-endian in the scalar type the
//! header names (`f32` or `f64`). Optimizer moments are stored as tensors named
//! `opt.{G,D,S}.{m,v}.<param>`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, Variant};
use crate::adaon::OrganStyleBank;
use crate::nn::{Adam, AdamConfig, HasParams};
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"SYNCTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch_hash: String,
    pub scalar: String,
    pub base_channels: usize,
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    pub optimizers: BTreeMap<String, OptimizerHeader>,
    pub style_bank: Option<OrganStyleBank>,
    pub tensors: Vec<TensorEntry>,
}

const OPTIMIZER_KEYS: [&str; 3] = ["G", "D", "S"];

fn param_names<T: Scalar>(net: &impl HasParams<T>) -> Vec<String> {
    net.params().into_iter().map(|(n, _)| n).collect()
}

fn optimizer_names<T: Scalar>(b: &ModelBundle<T>) -> [Vec<String>; 3] {
    [
        param_names(&b.generator),
        param_names(&b.discriminator),
        param_names(&b.segmenter),
    ]
}

fn optimizer_mut<'a, T>(b: &'a mut ModelBundle<T>, key: &str) -> &'a mut Adam<T> {
    match key {
        "G" => &mut b.optim.generator,
        "D" => &mut b.optim.discriminator,
        _ => &mut b.optim.segmenter,
    }
}

pub fn save_checkpoint<T: Scalar>(bundle: &ModelBundle<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            count: values.len() as u64,
        });
        for &v in values {
            v.write_le(&mut payload);
        }
    };
    for (name, p) in bundle.params() {
        push(name, p.shape.clone(), &p.value);
    }
    let mut opt_headers = BTreeMap::new();
    let adams = [
        &bundle.optim.generator,
        &bundle.optim.discriminator,
        &bundle.optim.segmenter,
    ];
    for ((key, adam), names) in OPTIMIZER_KEYS.iter().zip(adams).zip(optimizer_names(bundle)) {
        for (i, n) in names.iter().enumerate() {
            let len = adam.first[i].len();
            push(format!("opt.{key}.m.{n}"), vec![len], &adam.first[i]);
            push(format!("opt.{key}.v.{n}"), vec![len], &adam.second[i]);
        }
        opt_headers.insert(
            key.to_string(),
            OptimizerHeader {
                config: adam.config,
                step: adam.step,
            },
        );
    }
    let header = CheckpointHeader {
        arch_hash: bundle.arch_hash(),
        scalar: T::NAME.to_string(),
        base_channels: bundle.base_channels,
        variant: bundle.variant,
        seed: bundle.seed,
        epoch: bundle.epoch,
        optimizers: opt_headers,
        style_bank: bundle.adaon.bank.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&(header_bytes.len() as u64).to_le_bytes())?;
    write(&header_bytes)?;
    write(&payload)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parse only the header, e.g. to inspect the variant or epoch.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split(&bytes, path).map(|(h, _)| h)
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::json(path, e))?;
    Ok((header, &bytes[header_end..]))
}

fn decode<T: Scalar>(payload: &[u8], scalar: &str, e: &TensorEntry) -> Option<Vec<T>> {
    let width = match scalar {
        "f32" => 4,
        "f64" => 8,
        _ => return None,
    };
    let start = e.offset as usize;
    let end = start.checked_add(e.count as usize * width)?;
    let raw = payload.get(start..end)?;
    Some(
        raw.chunks_exact(width)
            .map(|c| match width {
                4 => T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect(),
    )
}

/// Load a checkpoint, converting the stored scalar type to `T` if needed.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split(&bytes, path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let adam = header
        .optimizers
        .get("G")
        .map(|o| o.config)
        .unwrap_or_default();
    let mut bundle = ModelBundle::<T>::new(header.base_channels, header.variant, header.seed, adam)?;
    let expected = bundle.arch_hash();
    if expected != header.arch_hash {
        return Err(Error::ArchitectureMismatch {
            expected,
            found: header.arch_hash,
        });
    }
    let table: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let fetch = |name: &str, len: usize| -> Result<Vec<T>> {
        let e = table
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        if e.count as usize != len {
            return Err(bad(format!("tensor `{name}` has {} values, expected {len}", e.count)));
        }
        let v = decode::<T>(payload, &header.scalar, e)
            .ok_or_else(|| bad(format!("tensor `{name}` is truncated or has an unknown scalar type")))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { term: name.to_string() });
        }
        Ok(v)
    };
    for (name, p) in bundle.params_mut() {
        p.value = fetch(&name, p.len())?;
    }
    let names = optimizer_names(&bundle);
    for (key, names) in OPTIMIZER_KEYS.into_iter().zip(names) {
        let oh = header
            .optimizers
            .get(key)
            .ok_or_else(|| bad(format!("missing optimizer `{key}`")))?;
        let adam = optimizer_mut(&mut bundle, key);
        adam.config = oh.config;
        adam.step = oh.step;
        for (i, n) in names.iter().enumerate() {
            let len = adam.first[i].len();
            adam.first[i] = fetch(&format!("opt.{key}.m.{n}"), len)?;
            adam.second[i] = fetch(&format!("opt.{key}.v.{n}"), len)?;
        }
    }
    bundle.epoch = header.epoch;
    bundle.adaon.bank = header.style_bank;
    Ok(bundle)
}
