use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{EstimationState, OptimizerState, Status};
use crate::behavior::RouteChoiceMatrix;
use crate::demand::Pdod;
use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::net::PathTable;

/// Serialized estimation state; enough to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub status: Status,
    pub loss_history: Vec<(usize, f64)>,
    pub pdod: Pdod,
    pub optimizer: OptimizerState,
    pub shares: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &EstimationState) -> Self {
        Self {
            epoch: state.epoch,
            status: state.status,
            loss_history: state.loss_history.clone(),
            pdod: state.pdod.clone(),
            optimizer: state.optimizer.clone(),
            shares: state.choice.shares().to_vec(),
        }
    }

    pub fn into_state(self, paths: &PathTable, num_intervals: usize) -> Result<EstimationState> {
        let pdod = Pdod::new(self.pdod.num_od(), self.pdod.mean().to_vec(), self.pdod.std().to_vec())?;
        Ok(EstimationState {
            pdod,
            optimizer: self.optimizer,
            epoch: self.epoch,
            loss_history: self.loss_history,
            status: self.status,
            choice: RouteChoiceMatrix::from_shares(paths, num_intervals, self.shares)?,
        })
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        write_file(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&read_file(path)?)
            .map_err(|e| Error::Validation(format!("{}: bad checkpoint: {e}", path.display())))
    }
}
