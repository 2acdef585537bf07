//! Single-file checkpoints: a text manifest, the canonical config dump, then
//! named tensors in the binary container format.
//!
//! ```text
//! PKCK 1
//! step = 120
//! seed = 0
//! config_hash = <hex>
//! tensors = 86
//! --- config
//! <canonical config dump>
//! --- tensors
//! (u32 name length | name bytes | tensor container) * tensors
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::blocks::{Model, Module};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::container::{read_tensor, write_tensor, DType};
use crate::tensor::Tensor;

const HEADER: &str = "PKCK 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, step: usize, model: &Model) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.config.seed)?;
        let mut slots = model.params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.params.len(),
                slots.len()
            )));
        }
        for (name, value) in &self.params {
            let slot = slots
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor `{name}` is not a model parameter")))?;
            if slot.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}, parameter has {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value.clone();
        }
        Ok(model)
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        writeln!(w, "step = {}", self.step)?;
        writeln!(w, "seed = {}", self.config.seed)?;
        writeln!(w, "config_hash = {}", self.config.hash())?;
        writeln!(w, "tensors = {}", self.params.len())?;
        writeln!(w, "--- config")?;
        w.write_all(self.config.dump().as_bytes())?;
        writeln!(w, "--- tensors")?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t, DType::F64)?;
        }
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint ends inside its manifest".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != HEADER {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut manifest = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "--- config" {
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad manifest line `{l}`")))?;
            manifest.push((k.to_string(), v.to_string()));
        }
        let field = |key: &str| -> Result<&str> {
            manifest
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
        };
        let number = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest `{key}` is not a number")))
        };
        let step = number("step")?;
        let count = number("tensors")?;
        let hash = field("config_hash")?.to_string();

        let mut dump = String::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "--- tensors" {
                break;
            }
            dump.push_str(&l);
            dump.push('\n');
        }
        let config = RunConfig::parse(&dump)?;
        if config.hash() != hash {
            return Err(Error::Format("checkpoint config does not match its recorded hash".into()));
        }

        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (t, _) = read_tensor(&mut r)?;
            params.push((name, t));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", rest.len())));
        }
        Ok(Checkpoint { config, step, params })
    }
}
