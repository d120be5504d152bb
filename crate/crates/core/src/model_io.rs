//! Model file format: magic `MKEY`, version, a length-prefixed key/value
//! text header (config + standardization statistics), the parameter tensors
//! as little-endian binary32 in declared order, and a CRC32 trailer.
//!
//! Bytes after the trailer are ignored on load; training checkpoints append
//! their optimizer state there.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{EncoderConfig, EncoderMode, EncoderModel, FeatureStats, GruLayer, GruStack};
use crate::error::{Error, Result};
use crate::format::{write_atomic, Reader, Writer};
use crate::kv::KvMap;

pub const MODEL_MAGIC: [u8; 4] = *b"MKEY";
pub const MODEL_VERSION: u16 = 1;

pub fn model_to_bytes(model: &EncoderModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut header = KvMap::new();
    header.set("mode", cfg.mode.tag());
    header.set("input_dim", cfg.input_dim);
    header.set("gru_layers", cfg.gru_layers);
    header.set("gru_layer_size", cfg.gru_layer_size);
    header.set("gru_dropout", cfg.gru_dropout);
    header.set("embedding_dim", cfg.embedding_dim);
    header.set("num_classes", cfg.num_classes);
    header.set("window_len", cfg.window_len);
    header.set("classes", model.classes.join(","));
    header.set("stats_mean", join_f32(&model.stats.mean));
    header.set("stats_std", join_f32(&model.stats.std));
    let header_text = header.to_text();

    let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
    w.u32(header_text.len() as u32);
    w.bytes(header_text.as_bytes());
    w.f32_slice(model.stack.to_flat());
    w.finish()
}

fn join_f32(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses a model file. Returns the model and the byte offset just past the
/// CRC trailer (where a checkpoint's training-state section would begin).
pub fn model_from_bytes(data: &[u8]) -> Result<(EncoderModel, usize)> {
    let (mut r, _) = Reader::open(data, &MODEL_MAGIC, MODEL_VERSION, "model file")?;
    let header_len = r.u32()? as usize;
    let header = KvMap::parse(r.utf8(header_len)?)?;

    let mode = match header.require("mode")? {
        "embedding" => EncoderMode::Embedding,
        "classification" => EncoderMode::Classification,
        other => return Err(Error::Validation(format!("unknown model mode {other:?}"))),
    };
    let config = EncoderConfig {
        mode,
        input_dim: header.require_parsed("input_dim")?,
        gru_layers: header.require_parsed("gru_layers")?,
        gru_layer_size: header.require_parsed("gru_layer_size")?,
        gru_dropout: header.require_parsed("gru_dropout")?,
        embedding_dim: header.require_parsed("embedding_dim")?,
        num_classes: header.require_parsed("num_classes")?,
        window_len: header.require_parsed("window_len")?,
    };
    config.validate()?;
    let classes = header.get_list("classes");
    let stats = FeatureStats {
        mean: header.get_f32_list("stats_mean")?,
        std: header.get_f32_list("stats_std")?,
    };
    if stats.mean.len() != config.input_dim || stats.std.len() != config.input_dim {
        return Err(Error::Validation(format!(
            "standardization statistics carry {} features, config says {}",
            stats.mean.len(),
            config.input_dim
        )));
    }
    if mode == EncoderMode::Classification && classes.len() != config.num_classes {
        return Err(Error::Validation(format!(
            "{} class names for {} classes",
            classes.len(),
            config.num_classes
        )));
    }

    let h = config.gru_layer_size;
    let mut layers = Vec::with_capacity(config.gru_layers);
    for l in 0..config.gru_layers {
        let input = if l == 0 { config.input_dim } else { h };
        let w_ih = read_matrix(&mut r, 3 * h, input)?;
        let w_hh = read_matrix(&mut r, 3 * h, h)?;
        let b_ih = Array1::from_vec(r.f32_slice(3 * h)?);
        let b_hh = Array1::from_vec(r.f32_slice(3 * h)?);
        layers.push(GruLayer { w_ih, w_hh, b_ih, b_hh });
    }
    let head_w = read_matrix(&mut r, config.output_dim(), h)?;
    let head_b = Array1::from_vec(r.f32_slice(config.output_dim())?);

    let end = r.pos();
    r.verify_crc(end)?;

    let stack = GruStack {
        input_dim: config.input_dim,
        hidden: h,
        output_dim: config.output_dim(),
        normalize: mode == EncoderMode::Embedding,
        dropout: f64::from(config.gru_dropout),
        layers,
        head_w,
        head_b,
    };
    if stack.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("model contains non-finite parameters".into()));
    }
    Ok((EncoderModel { config, stats, classes, stack }, end + 4))
}

fn read_matrix(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let data = r.f32_slice(rows * cols)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Validation(format!("bad tensor shape: {e}")))
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let bytes = std::fs::read(path)?;
    Ok(model_from_bytes(&bytes)?.0)
}
