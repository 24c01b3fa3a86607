//! One handle over every trainable model kind.

use std::path::Path;

use crate::baselines::DeepLstmReader;
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::graphgen::{GraphInstance, Label};
use crate::params::ParamStore;
use crate::reasonet::{ModelConfig, ModelKind, ReasoNetModel};

#[derive(Clone, Debug)]
pub enum AnyModel {
    ReasoNet(ReasoNetModel),
    DeepLstm(DeepLstmReader),
}

/// Test-time output for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: Label,
    /// `P(Yes)` at the chosen termination step.
    pub score: f64,
    /// Chosen termination step, 1-based. Always 1 for the LSTM reader.
    pub step: usize,
    /// `P(Yes)` averaged over termination steps by `p(k)`.
    pub expected_score: f64,
}

impl AnyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(match config.kind {
            ModelKind::DeepLstm => AnyModel::DeepLstm(DeepLstmReader::new(config).map_err(Error::Config)?),
            _ => AnyModel::ReasoNet(ReasoNetModel::new(config).map_err(Error::Config)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::ReasoNet(m) => &m.config,
            AnyModel::DeepLstm(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::ReasoNet(m) => &m.params,
            AnyModel::DeepLstm(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::ReasoNet(m) => &mut m.params,
            AnyModel::DeepLstm(m) => &mut m.params,
        }
    }

    /// Predictions for instances of any mix of lengths, in input order.
    pub fn predict(&self, instances: &[GraphInstance], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = vec![None; instances.len()];
        for group in length_groups(instances) {
            for chunk in group.chunks(batch_size.max(1)) {
                let refs: Vec<&GraphInstance> = chunk.iter().map(|&i| &instances[i]).collect();
                let preds = self.predict_equal_length(&refs)?;
                for (&i, p) in chunk.iter().zip(preds) {
                    out[i] = Some(p);
                }
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every instance predicted")).collect())
    }

    fn predict_equal_length(&self, refs: &[&GraphInstance]) -> Result<Vec<Prediction>> {
        Ok(match self {
            AnyModel::ReasoNet(m) => m
                .predict(refs)?
                .into_iter()
                .map(|(d, _)| Prediction {
                    answer: d.answer,
                    score: d.score,
                    step: d.step,
                    expected_score: d.expected_score,
                })
                .collect(),
            AnyModel::DeepLstm(m) => m
                .predict(refs)?
                .into_iter()
                .map(|p| Prediction {
                    answer: Label::from_bool(p >= 0.5),
                    score: p,
                    step: 1,
                    expected_score: p,
                })
                .collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self.config(), self.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ck.config.clone())?;
        checkpoint::restore(model.params_mut(), &ck.params)?;
        Ok(model)
    }

    /// Writes a checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        Ok(checkpoint::save(path, self.config(), self.params())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

/// Instance indices grouped by serialized length, each group in input order,
/// groups ordered by first appearance.
pub fn length_groups(instances: &[GraphInstance]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let len = inst.edges.len();
        match groups.iter_mut().find(|(l, _)| *l == len) {
            Some((_, g)) => g.push(i),
            None => groups.push((len, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}
