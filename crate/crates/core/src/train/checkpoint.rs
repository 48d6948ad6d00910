use std::path::Path;

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::losses::MineEstimator;
use crate::model::Model;

use super::config::TrainConfig;

/// Everything needed to resume: parameters with their optimizer moments,
/// the critic, the resolved config and the step. Per-step randomness is a
/// pure function of `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub model: Model<f32>,
    pub mine: MineEstimator<f32>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("train.config", Record::from_bytes(&serde_json::to_vec(&self.config)?));
        c.insert("train.step", Record::from_u64s(&[self.step]));
        self.model.save_into(&mut c, "model")?;
        self.mine.save_into(&mut c, "mine");
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(&c.get("train.config")?.payload)?;
        let step = c.get("train.step")?.to_u64s()?;
        let [step] = step[..] else {
            return Err(Error::Format("train.step must hold one value".into()));
        };
        Ok(Checkpoint {
            config,
            step,
            model: Model::load_from(c, "model")?,
            mine: MineEstimator::load_from(c, "mine")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        self.to_container()?.save(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_container(&Container::load(path)?)
    }
}
