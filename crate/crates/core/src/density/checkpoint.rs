//! Versioned JSON checkpoints for density models. Parameters round-trip
//! exactly (serde_json preserves f64 through the shortest-round-trip
//! formatter), and loading validates version, kind, and parameter length.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::flow::FlowArch;
use super::fourier::FourierArch;
use super::mlp::MlpArch;
use super::{CouplingFlowDensity, DensityModel, FourierDensity, MlpDensity};
use crate::domain::Domain;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub domain: Domain,
    pub arch: serde_json::Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of(model: &dyn DensityModel) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: model.kind_name().to_string(),
            domain: model.domain().clone(),
            arch: model.arch_json(),
            params: model.params_vec(),
        }
    }

    pub fn into_model(self) -> Result<Box<dyn DensityModel>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {})",
                self.version, CHECKPOINT_VERSION
            )));
        }
        let mut model: Box<dyn DensityModel> = match self.kind.as_str() {
            "mlp" => {
                let arch: MlpArch = parse_arch(self.arch)?;
                Box::new(MlpDensity::new(
                    self.domain,
                    &arch.hidden,
                    arch.activation,
                    0,
                )?)
            }
            "coupling_flow" => {
                let arch: FlowArch = parse_arch(self.arch)?;
                Box::new(CouplingFlowDensity::new(
                    self.domain,
                    arch.blocks,
                    &arch.cond_hidden,
                    0,
                )?)
            }
            "fourier" => {
                let arch: FourierArch = parse_arch(self.arch)?;
                Box::new(FourierDensity::new(
                    self.domain,
                    arch.grid,
                    arch.modes_per_axis,
                )?)
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown model kind '{other}'")));
            }
        };
        if self.params.len() != model.param_len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match the {} architecture ({} expected)",
                self.params.len(),
                self.kind,
                model.param_len()
            )));
        }
        model.set_params(&self.params)?;
        Ok(model)
    }
}

fn parse_arch<T: for<'de> Deserialize<'de>>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v)
        .map_err(|e| Error::Checkpoint(format!("malformed architecture block: {e}")))
}

pub fn save_model(model: &dyn DensityModel, w: impl Write) -> Result<()> {
    serde_json::to_writer(w, &Checkpoint::of(model))?;
    Ok(())
}

pub fn load_model(r: impl Read) -> Result<Box<dyn DensityModel>> {
    let ck: Checkpoint = serde_json::from_reader(r)?;
    ck.into_model()
}

pub fn save_model_file(model: &dyn DensityModel, path: &Path) -> Result<()> {
    save_model(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_model_file(path: &Path) -> Result<Box<dyn DensityModel>> {
    load_model(std::io::BufReader::new(std::fs::File::open(path)?))
}
