//! Bit-exact checkpoint files.
//!
//! Layout: the magic string `DCAPS1\n`, an 8-byte little-endian manifest
//! length, the UTF-8 manifest, then the raw little-endian 64-bit float
//! payload. The manifest carries the config snapshot, epoch, RNG state,
//! and one `tensor = <name> f64 <shape> <offset> <len>` line per tensor
//! (offset and len in elements, contiguous).

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{apply_model_key, model_config_pairs};
use crate::model::{Decaps, ModelConfig, ModelError};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"DCAPS1\n";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic or version)")]
    Format { path: String },
    #[error("checkpoint {path} is corrupt: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("checkpoint does not fit this model: {0}")]
    Mismatch(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub config: ModelConfig,
    pub epoch: usize,
    pub rng_state: [u64; 4],
    pub adam_t: Option<u64>,
    pub tensors: Vec<(String, Vec<usize>, Vec<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<F>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

pub fn save<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut manifest = String::new();
    manifest.push_str("version = 1\n");
    manifest.push_str(&format!("epoch = {}\n", ckpt.epoch));
    let [a, b, c, d] = ckpt.rng_state;
    manifest.push_str(&format!("rng = {a} {b} {c} {d}\n"));
    if let Some(t) = ckpt.adam_t {
        manifest.push_str(&format!("adam_t = {t}\n"));
    }
    for (k, v) in model_config_pairs(&ckpt.config) {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }
    let mut offset = 0usize;
    for (name, shape, data) in &ckpt.tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor = {name} f64 {} {offset} {}\n",
            if dims.is_empty() {
                "scalar".to_string()
            } else {
                dims.join("x")
            },
            data.len()
        ));
        offset += data.len();
    }

    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(manifest.as_bytes()).map_err(io_err)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, _, data) in &ckpt.tensors {
        for &v in data {
            buf.extend_from_slice(&v.cast_f64().to_le_bytes());
            if buf.len() >= (1 << 16) {
                file.write_all(&buf).map_err(io_err)?;
                buf.clear();
            }
        }
    }
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let corrupt = |detail: String| CheckpointError::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Format {
            path: path.display().to_string(),
        });
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let manifest_start = MAGIC.len() + 8;
    if bytes.len() < manifest_start + manifest_len {
        return Err(corrupt("manifest extends past end of file".to_string()));
    }
    let manifest = std::str::from_utf8(&bytes[manifest_start..manifest_start + manifest_len])
        .map_err(|_| corrupt("manifest is not UTF-8".to_string()))?;
    let payload = &bytes[manifest_start + manifest_len..];

    let mut config = ModelConfig::paper();
    let mut epoch = 0usize;
    let mut rng_state = [0u64; 4];
    let mut adam_t = None;
    let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    let mut version_seen = false;
    for line in manifest.lines() {
        let Some(eq) = line.find('=') else {
            return Err(corrupt(format!("manifest line without '=': {line}")));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        match key {
            "version" => {
                if value != "1" {
                    return Err(CheckpointError::Format {
                        path: path.display().to_string(),
                    });
                }
                version_seen = true;
            }
            "epoch" => {
                epoch = value
                    .parse()
                    .map_err(|_| corrupt(format!("bad epoch '{value}'")))?
            }
            "adam_t" => {
                adam_t = Some(
                    value
                        .parse()
                        .map_err(|_| corrupt(format!("bad adam_t '{value}'")))?,
                )
            }
            "rng" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(corrupt(format!("bad rng state '{value}'")));
                }
                for (slot, p) in rng_state.iter_mut().zip(parts) {
                    *slot = p
                        .parse()
                        .map_err(|_| corrupt(format!("bad rng word '{p}'")))?;
                }
            }
            "tensor" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 5 || parts[1] != "f64" {
                    return Err(corrupt(format!("bad tensor line '{value}'")));
                }
                let shape: Vec<usize> = if parts[2] == "scalar" {
                    Vec::new()
                } else {
                    parts[2]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| corrupt(format!("bad shape '{}'", parts[2])))?
                };
                let offset: usize = parts[3]
                    .parse()
                    .map_err(|_| corrupt(format!("bad offset '{}'", parts[3])))?;
                let len: usize = parts[4]
                    .parse()
                    .map_err(|_| corrupt(format!("bad length '{}'", parts[4])))?;
                if shape.iter().product::<usize>() != len {
                    return Err(corrupt(format!(
                        "tensor '{}' shape/len mismatch",
                        parts[0]
                    )));
                }
                specs.push((parts[0].to_string(), shape, offset, len));
            }
            k if k.starts_with("config.") => {
                let ck = &k["config.".len()..];
                let known =
                    apply_model_key(&mut config, ck, value).map_err(|e| corrupt(e.to_string()))?;
                if !known {
                    return Err(corrupt(format!("unknown config key '{ck}'")));
                }
            }
            _ => return Err(corrupt(format!("unknown manifest key '{key}'"))),
        }
    }
    if !version_seen {
        return Err(CheckpointError::Format {
            path: path.display().to_string(),
        });
    }

    let mut expected_offset = 0usize;
    for (name, _, offset, len) in &specs {
        if *offset != expected_offset {
            return Err(corrupt(format!("tensor '{name}' offset gap")));
        }
        expected_offset += len;
    }
    if payload.len() != expected_offset * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest declares {}",
            payload.len(),
            expected_offset * 8
        )));
    }

    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, offset, len) in specs {
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let at = (offset + i) * 8;
            let mut w = [0u8; 8];
            w.copy_from_slice(&payload[at..at + 8]);
            data.push(F::cast_from(f64::from_le_bytes(w)));
        }
        tensors.push((name, shape, data));
    }

    Ok(Checkpoint {
        config,
        epoch,
        rng_state,
        adam_t,
        tensors,
    })
}

impl<F: Scalar> Decaps<F> {
    /// Snapshot weights, running statistics, and (optionally) optimizer
    /// moments into a checkpoint.
    pub fn to_checkpoint(
        &self,
        epoch: usize,
        rng: &Rng,
        adam: Option<&Adam<F>>,
    ) -> Checkpoint<F> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<F>)> = Vec::new();
        for p in self.params() {
            tensors.push((p.name.clone(), p.shape.clone(), p.data.clone()));
        }
        for s in self.bn_stats() {
            let c = s.mean.len();
            tensors.push((format!("running_mean.{}", s.name), vec![c], s.mean.clone()));
            tensors.push((format!("running_var.{}", s.name), vec![c], s.var.clone()));
        }
        let adam_t = adam.map(|a| {
            tensors.extend(a.state_tensors(self.params()));
            a.step_count()
        });
        Checkpoint {
            config: self.config.clone(),
            epoch,
            rng_state: rng.state(),
            adam_t,
            tensors,
        }
    }

    /// Rebuild a model from a checkpoint. Every parameter and running
    /// statistic must be present with its exact shape.
    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self, ModelError> {
        let mut model = Decaps::build(ckpt.config.clone())?;
        let missing = |name: &str| ModelError::Config(format!("checkpoint missing tensor {name}"));
        for i in 0..model.params().len() {
            let (name, shape) = {
                let p = &model.params()[i];
                (p.name.clone(), p.shape.clone())
            };
            let (_, cshape, data) = ckpt
                .tensor(&name)
                .ok_or_else(|| missing(&name))?
                .clone();
            if cshape != shape {
                return Err(ModelError::Config(format!(
                    "checkpoint tensor {name} has shape {cshape:?}, expected {shape:?}"
                )));
            }
            model.params_mut()[i].data = data;
        }
        for i in 0..model.bn_stats().len() {
            let name = model.bn_stats()[i].name.clone();
            let mean = ckpt
                .tensor(&format!("running_mean.{name}"))
                .ok_or_else(|| missing(&format!("running_mean.{name}")))?
                .2
                .clone();
            let var = ckpt
                .tensor(&format!("running_var.{name}"))
                .ok_or_else(|| missing(&format!("running_var.{name}")))?
                .2
                .clone();
            let stats = &mut model.bn_stats_mut()[i];
            if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
                return Err(ModelError::Config(format!(
                    "checkpoint bn stats {name} have the wrong width"
                )));
            }
            stats.mean = mean;
            stats.var = var;
        }
        Ok(model)
    }
}
