//! Model checkpoints: parameters keyed by module path together with the
//! configuration that produced them and, optionally, resumable train state.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, JsccModel};
use crate::protocols::ProtocolSpec;
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub protocol: ProtocolSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    pub params: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
    /// Best-so-far parameters of an unfinished run, for exact resumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_params: Option<BTreeMap<String, Tensor>>,
}

fn named(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &JsccModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            encoder: model.config().clone(),
            protocol: model.protocol().clone(),
            train_config: None,
            params: named(model.params()),
            train_state: None,
            best_params: None,
        }
    }

    pub fn with_training(mut self, cfg: &TrainConfig, state: &TrainState, best: Option<&ParamStore>) -> Self {
        self.train_config = Some(cfg.clone());
        self.train_state = Some(state.clone());
        self.best_params = best.map(named);
        self
    }

    /// Writes atomically: a temporary file in the same directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, self)?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported checkpoint format {}", ckpt.format_version),
            ));
        }
        Ok(ckpt)
    }

    /// Refuses with a field-by-field report when the checkpoint was made
    /// with a different architecture or protocol.
    pub fn verify(&self, encoder: &EncoderConfig, protocol: &ProtocolSpec) -> Result<()> {
        let mut diff = Vec::new();
        json_diff("encoder", &to_value(&self.encoder), &to_value(encoder), &mut diff);
        json_diff("protocol", &to_value(&self.protocol), &to_value(protocol), &mut diff);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch { diff: diff.join("\n") })
        }
    }

    /// Rebuilds the model with the stored parameters.
    pub fn to_model(&self) -> Result<JsccModel> {
        let mut model = JsccModel::new(self.encoder.clone(), self.protocol.clone(), 0)?;
        load_into(model.params_mut(), &self.params)?;
        Ok(model)
    }

    pub fn best_store(&self) -> Result<Option<ParamStore>> {
        let Some(best) = &self.best_params else {
            return Ok(None);
        };
        let mut store = JsccModel::new(self.encoder.clone(), self.protocol.clone(), 0)?.params().clone();
        load_into(&mut store, best)?;
        Ok(Some(store))
    }
}

fn load_into(store: &mut ParamStore, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut diff = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        match params.get(&name) {
            None => diff.push(format!("{name}: missing from checkpoint")),
            Some(t) if t.shape() != store.get(id).shape() => diff.push(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )),
            Some(t) => *store.get_mut(id) = t.clone(),
        }
    }
    diff.extend(
        params
            .keys()
            .filter(|k| store.lookup(k).is_none())
            .map(|k| format!("{k}: not a parameter of this model")),
    );
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch { diff: diff.join("\n") })
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configuration serializes to JSON")
}

fn json_diff(path: &str, ours: &Value, theirs: &Value, out: &mut Vec<String>) {
    match (ours, theirs) {
        (Value::Object(a), Value::Object(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            for k in keys {
                let null = Value::Null;
                json_diff(
                    &format!("{path}.{k}"),
                    a.get(k).unwrap_or(&null),
                    b.get(k).unwrap_or(&null),
                    out,
                );
            }
        }
        (a, b) if a != b => out.push(format!("{path}: checkpoint {a}, current {b}")),
        _ => {}
    }
}
