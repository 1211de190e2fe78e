use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Array, ParamId};

/// Parameter groups trained and frozen as units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder shared by both decoders in stage 1; the CMLM's encoder afterwards.
    Encoder,
    /// Separate NMT encoder (a copy of `Encoder` in stage 2, or independent when sharing is off).
    NmtEncoder,
    NmtDecoder,
    CmlmDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array,
}

/// Named parameter arrays, addressed by [`ParamId`] = insertion index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let by_name = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self { entries, by_name }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ParamEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn count_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn push(&mut self, name: String, group: ParamGroup, value: Array) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }
}

/// Creates parameters under a name prefix, or looks them up when rebuilding from a checkpoint.
pub(crate) enum ParamSource<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
    },
    Lookup {
        store: &'a ParamStore,
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

impl ParamSource<'_> {
    pub(crate) fn take(
        &mut self,
        name: String,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
    ) -> Result<ParamId, String> {
        match self {
            ParamSource::Init { store, rng } => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier => {
                        let limit = (6.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                    }
                    Init::Normal(std) => (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                let arr = Array::new(shape.to_vec(), data).map_err(|e| e.to_string())?;
                Ok(store.push(name, group, arr))
            }
            ParamSource::Lookup { store } => {
                let id = store
                    .find(&name)
                    .ok_or_else(|| format!("checkpoint lacks parameter {name}"))?;
                let entry = store.get(id);
                if entry.value.shape() != shape {
                    return Err(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        entry.value.shape()
                    ));
                }
                if entry.group != group {
                    return Err(format!("parameter {name} filed under {:?}", entry.group));
                }
                Ok(id)
            }
        }
    }
}
