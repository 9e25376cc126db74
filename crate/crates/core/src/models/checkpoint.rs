//! Versioned JSON checkpoints.
//!
//! ```json
//! {"format_version": 1, "setting": [[3,40,8]], "seed": 7,
//!  "tensors": [{"name": "block0.layer0.filters", "shape": [8,1,40], "values": [...]}],
//!  "meta": {"class_count": 3, ...}}
//! ```
//!
//! Quantized layers are stored as dequantized values; codes can be recomputed
//! with the same per-tensor calibration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::StudentNetwork;
use super::quant::{calibrate_quantspec, quantize};
use super::setting::StudentSetting;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, t: &Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub setting: Option<StudentSetting>,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name:?}")))?
            .to_tensor()
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Data(format!("checkpoint meta lacks {key:?}")))
    }
}

impl StudentNetwork {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let names = self.parameter_names();
        let mut tensors = Vec::with_capacity(names.len());
        let conv_bits = self
            .setting
            .blocks
            .iter()
            .zip(&self.blocks)
            .flat_map(|(b, layers)| std::iter::repeat_n(b.bits, 2 * layers.len()));
        let bits: Vec<u32> = conv_bits.chain([32, 32]).collect();
        for ((name, t), bits) in names.into_iter().zip(self.parameters()).zip(bits) {
            let spec = calibrate_quantspec(t, bits)?;
            let stored = Tensor::new(t.shape().to_vec(), quantize(t.data(), &spec).values)?;
            tensors.push(NamedTensor::new(name, &stored));
        }
        let mut meta = BTreeMap::new();
        meta.insert("class_count".into(), self.class_count.into());
        meta.insert("input_dims".into(), self.input_dims.into());
        meta.insert("filters_per_layer".into(), self.filters_per_layer.into());
        meta.insert("size_bits".into(), self.size_bits().into());
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            setting: Some(self.setting.clone()),
            seed: self.seed,
            tensors,
            meta,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let setting = ck
            .setting
            .clone()
            .ok_or_else(|| Error::Data("checkpoint has no student setting".into()))?;
        let mut net = StudentNetwork::build(
            &setting,
            ck.meta_usize("class_count")?,
            ck.meta_usize("input_dims")?,
            ck.meta_usize("filters_per_layer")?,
            ck.seed,
        )?;
        let names = net.parameter_names();
        for (name, slot) in names.iter().zip(net.parameters_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "tensor {name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(net)
    }
}

