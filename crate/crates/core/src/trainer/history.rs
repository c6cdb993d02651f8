use std::io::Write;

use crate::error::Result;

use super::StepReport;

/// Averages over one epoch's steps plus the validation accuracy after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task_loss: f64,
    pub task_loss_aug: f64,
    pub consistency: f64,
    pub vae_kl: f64,
    pub mask_fraction: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Filled only when per-step logging is enabled.
    pub steps: Vec<StepReport>,
    pub best_val_accuracy: f64,
}

pub const EPOCH_COLUMNS: [&str; 7] = [
    "epoch",
    "train_task_loss",
    "task_loss_aug",
    "consistency",
    "vae_kl",
    "mask_fraction",
    "val_accuracy",
];

pub const STEP_COLUMNS: [&str; 6] = [
    "step",
    "task_loss_orig",
    "task_loss_aug",
    "consistency",
    "vae_kl",
    "mask_fraction",
];

impl TrainingHistory {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }

    pub fn write_epochs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EPOCH_COLUMNS)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_task_loss.to_string(),
                e.task_loss_aug.to_string(),
                e.consistency.to_string(),
                e.vae_kl.to_string(),
                e.mask_fraction.to_string(),
                e.val_accuracy.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_steps_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(STEP_COLUMNS)?;
        for s in &self.steps {
            w.write_record([
                s.step_index.to_string(),
                s.task_loss_orig.to_string(),
                s.task_loss_aug.to_string(),
                s.consistency_loss.to_string(),
                s.vae_kl.to_string(),
                s.mask_fraction.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
