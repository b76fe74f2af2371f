//! `GLMC` checkpoint files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::CrossModalModel;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const MAGIC: &[u8; 4] = b"GLMC";
const VERSION: u32 = 1;
const LABEL: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: BTreeMap<String, String>,
}

impl CrossModalModel<f32> {
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = Writer::new(w);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        let header = serde_json::to_string(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        w.str(&header)?;
        w.u32(self.params.len() as u32)?;
        for (_, e) in self.params.iter() {
            w.str(&e.name)?;
            w.u32(e.value.shape().len() as u32)?;
            for &s in e.value.shape() {
                w.u64(s as u64)?;
            }
            w.f32s(e.value.data())?;
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Rebuilds the architecture from the stored config and overwrites every
    /// parameter by name. Missing or extra tensors are errors.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r, LABEL);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("version {version} is not supported (expected version {VERSION})")));
        }
        let header: Header = serde_json::from_str(&r.str()?).map_err(|e| r.err(format!("bad header: {e}")))?;
        let mut model = CrossModalModel::<f32>::new(header.config)?;
        model.meta = header.meta;
        let n = r.u32()? as usize;
        let mut seen = vec![false; model.params.len()];
        let mut pending_cls: Vec<(String, Tensor<f32>)> = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 4 {
                return Err(r.err(format!("tensor `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let value = Tensor::new(shape, r.f32s(numel)?)?;
            match model.params.find(&name) {
                Some(id) => {
                    if model.params.value(id).shape() != value.shape() {
                        return Err(r.err(format!(
                            "tensor `{name}` has shape {:?}, config implies {:?}",
                            value.shape(),
                            model.params.value(id).shape()
                        )));
                    }
                    *model.params.value_mut(id) = value;
                    seen[id] = true;
                }
                None if name.starts_with("head.cls.") => pending_cls.push((name, value)),
                None => return Err(r.err(format!("unexpected tensor `{name}`"))),
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(r.err(format!("missing tensor `{}`", model.params.get(id).name)));
        }
        if !pending_cls.is_empty() {
            pending_cls.sort_by(|a, b| b.0.cmp(&a.0));
            if pending_cls.len() != 2 || pending_cls[0].0 != "head.cls.w" || pending_cls[1].0 != "head.cls.b" {
                return Err(r.err("incomplete classification head"));
            }
            for (name, value) in pending_cls {
                model.params.add(name, value)?;
            }
            model.attach_cls_ids();
        }
        r.finish()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::read_from(BufReader::new(f))
    }
}
