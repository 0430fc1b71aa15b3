use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualModel, EncoderConfig};
use crate::data::{Vocab, Vocabs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON container of named parameter tensors plus everything needed to
/// rebuild the model around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub num_items: usize,
    pub num_scenes: usize,
    pub disc_hidden: Vec<usize>,
    /// Known item and scene tokens in id order, when saved with vocabularies.
    #[serde(default)]
    pub item_tokens: Option<Vec<String>>,
    #[serde(default)]
    pub scene_tokens: Option<Vec<String>>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &DualModel, vocabs: Option<&Vocabs>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            num_items: model.num_items,
            num_scenes: model.num_scenes,
            disc_hidden: model.disc_hidden.clone(),
            item_tokens: vocabs.map(|v| v.items.tokens().to_vec()),
            scene_tokens: vocabs.map(|v| v.scenes.tokens().to_vec()),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model, validating every tensor against the shapes the
    /// stored config implies.
    pub fn into_model(self) -> Result<DualModel> {
        let mut model = DualModel::new(
            &self.config,
            self.num_items,
            self.num_scenes,
            &self.disc_hidden,
            0,
        )
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for t in self.params {
            let id = model
                .store
                .by_name(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {:?}", t.name)))?;
            let expected = model.store.tensor(id).shape().to_vec();
            if t.shape != expected || t.values.len() != expected.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {:?}, config implies {:?}",
                    t.name, t.shape, expected
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} holds non-finite values",
                    t.name
                )));
            }
            model.store.values_mut(id).copy_from_slice(&t.values);
        }
        Ok(model)
    }

    pub fn vocabs(&self) -> Option<Vocabs> {
        Some(Vocabs {
            items: Vocab::from_tokens(self.item_tokens.clone()?),
            scenes: Vocab::from_tokens(self.scene_tokens.clone()?),
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &DualModel, vocabs: Option<&Vocabs>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model, vocabs))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a checkpoint. Unreadable files are I/O errors; anything
/// malformed inside is a checkpoint error.
pub fn load_checkpoint(path: &Path) -> Result<(DualModel, Option<Vocabs>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let vocabs = ckpt.vocabs();
    if let Some(v) = &vocabs {
        if v.items.size() != ckpt.num_items || v.scenes.size() != ckpt.num_scenes {
            return Err(Error::Checkpoint(
                "stored vocabularies disagree with table sizes".into(),
            ));
        }
    }
    Ok((ckpt.into_model()?, vocabs))
}
