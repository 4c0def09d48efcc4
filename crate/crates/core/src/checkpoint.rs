//! Model checkpoints: a short text header followed by little-endian `f32`
//! parameters in tensor declaration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{EmbeddingNet, NetConfig, Params};

const MAGIC: &str = "TLPIM1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: EmbeddingNet,
    /// Decision threshold chosen on the validation split.
    pub threshold: Option<f64>,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = &ckpt.net.config;
    let blocks: Vec<String> = cfg.conv_blocks.iter().map(|c| c.to_string()).collect();
    let mut header = String::from(MAGIC);
    header.push_str(&format!("input_size={}\n", cfg.input_size));
    header.push_str(&format!("conv_blocks={}\n", blocks.join(",")));
    header.push_str(&format!("reduce_channels={}\n", cfg.reduce_channels));
    header.push_str(&format!("embed_dim={}\n", cfg.embed_dim));
    header.push_str(&format!("seed={}\n", cfg.seed));
    if let Some(t) = ckpt.threshold {
        header.push_str(&format!("threshold={t}\n"));
    }
    header.push('\n');

    let mut out = header.into_bytes();
    for (_, tensor) in ckpt.net.params.tensors() {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(bad("not a checkpoint file".into()));
    }
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("unterminated header".into()))?;
    let header = std::str::from_utf8(&bytes[MAGIC.len()..end + 1]).map_err(|_| bad("header is not UTF-8".into()))?;

    let mut config = NetConfig {
        conv_blocks: Vec::new(),
        ..NetConfig::default()
    };
    let mut seen = [false; 5];
    let mut threshold = None;
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value for {key}: `{v}`")));
        match key {
            "input_size" => (config.input_size, seen[0]) = (num(value)?, true),
            "conv_blocks" => {
                config.conv_blocks = value.split(',').map(&num).collect::<Result<_>>()?;
                seen[1] = true;
            }
            "reduce_channels" => (config.reduce_channels, seen[2]) = (num(value)?, true),
            "embed_dim" => (config.embed_dim, seen[3]) = (num(value)?, true),
            "seed" => {
                config.seed = value.parse().map_err(|_| bad(format!("bad seed `{value}`")))?;
                seen[4] = true;
            }
            "threshold" => {
                let t: f64 = value.parse().map_err(|_| bad(format!("bad threshold `{value}`")))?;
                threshold = Some(t);
            }
            other => return Err(bad(format!("unknown header key `{other}`"))),
        }
    }
    if seen.contains(&false) {
        return Err(bad("header is missing a network field".into()));
    }
    config.validate().map_err(|e| bad(e.to_string()))?;

    let body = &bytes[end + 2..];
    let mut params = Params::zeros(&config);
    let expected = params.parameter_count() * 4;
    if body.len() != expected {
        return Err(bad(format!("expected {expected} parameter bytes, found {}", body.len())));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    params.for_each_tensor_mut(|_, t| {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    });
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    let net = EmbeddingNet::with_params(config, params).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { net, threshold })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
