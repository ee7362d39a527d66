//! Single-file checkpoints: one line of JSON describing the field and how it
//! was trained, then the parameters as little-endian `f32`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, LayerShape, NetworkLayout};
use crate::render::RenderConfig;

const MAGIC: &str = "semfield-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    magic: String,
    field: FieldConfig,
    render: RenderConfig,
    step: usize,
    num_params: usize,
    layers: Vec<LayerShape>,
}

/// A trained field plus what is needed to render it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams<f32>,
    pub render: RenderConfig,
    pub step: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            magic: MAGIC.into(),
            field: self.params.config,
            render: self.render,
            step: self.step,
            num_params: self.params.len(),
            layers: self.params.layout.layers.clone(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::load(path, e.to_string()))?;
        bytes.push(b'\n');
        bytes.reserve(4 * self.params.len());
        for v in &self.params.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::load(path, "missing checkpoint header line"))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::load(path, format!("bad header: {e}")))?;
        if header.magic != MAGIC {
            return Err(Error::load(path, format!("unknown checkpoint format {:?}", header.magic)));
        }
        header.field.validate().map_err(|e| Error::load(path, e.to_string()))?;
        let layout = NetworkLayout::new(&header.field);
        if layout.layers != header.layers || 2 * layout.len() != header.num_params {
            return Err(Error::load(path, "layer table does not match the field configuration"));
        }
        let blob = &bytes[nl + 1..];
        if blob.len() != 4 * header.num_params {
            return Err(Error::load(
                path,
                format!("expected {} parameter bytes, found {}", 4 * header.num_params, blob.len()),
            ));
        }
        let values = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let params = FieldParams::from_values(header.field, values).map_err(|e| Error::load(path, e.to_string()))?;
        Ok(Checkpoint { params, render: header.render, step: header.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RayBounds;

    fn sample() -> Checkpoint {
        let mut cfg = FieldConfig::desk(5);
        cfg.trunk_width = 16;
        cfg.head_width = 8;
        Checkpoint {
            params: FieldParams::init(cfg, 4).unwrap(),
            render: RenderConfig::desk(RayBounds::new(0.1, 10.0).unwrap()),
            step: 123,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/field.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncated_blob_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Load { .. })));
    }
}
