use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::{LengthBucket, MAX_PAGES, MIN_PAGES};

/// Learning-rate multiplier for the final focus stage.
pub const FINAL_STAGE_LR_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub min_len: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub lr_scale: f64,
}

impl CurriculumStage {
    pub fn new(min_len: usize, max_len: usize, epochs: usize, lr_scale: f64) -> Result<Self, TrainError> {
        if !(MIN_PAGES <= min_len && min_len <= max_len && max_len <= MAX_PAGES) || epochs == 0 {
            return Err(TrainError::Config(format!("invalid stage {min_len}-{max_len} × {epochs}")));
        }
        Ok(Self { min_len, max_len, epochs, lr_scale })
    }

    pub fn contains(&self, len: usize) -> bool {
        (self.min_len..=self.max_len).contains(&len)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.min_len, self.max_len)
    }
}

pub fn curriculum_schedule(target: LengthBucket, total_epochs: usize) -> Result<Vec<CurriculumStage>, TrainError> {
    curriculum_schedule_with(target, total_epochs, FINAL_STAGE_LR_SCALE)
}

/// Short documents, a bridge range halfway to the target, the target range,
/// then the target range again at `final_lr_scale`. Epochs split 15/15/50/20;
/// a 2-5 target collapses to target + reduced-rate target at 80/20.
pub fn curriculum_schedule_with(
    target: LengthBucket,
    total_epochs: usize,
    final_lr_scale: f64,
) -> Result<Vec<CurriculumStage>, TrainError> {
    if total_epochs < 4 {
        return Err(TrainError::Config(format!("a curriculum needs at least 4 epochs, got {total_epochs}")));
    }
    let (lo, hi) = target.range();
    let share = |f: f64| ((total_epochs as f64 * f).round() as usize).max(1);
    if target == LengthBucket::B2_5 {
        let last = share(0.2);
        return Ok(vec![
            CurriculumStage::new(lo, hi, total_epochs - last, 1.0)?,
            CurriculumStage::new(lo, hi, last, final_lr_scale)?,
        ]);
    }
    let (first_lo, first_hi) = LengthBucket::B2_5.range();
    let (e1, e2, e4) = (share(0.15), share(0.15), share(0.2));
    let e3 = total_epochs - e1 - e2 - e4;
    Ok(vec![
        CurriculumStage::new(first_lo, first_hi, e1, 1.0)?,
        CurriculumStage::new((first_lo + lo) / 2, (first_hi + hi) / 2, e2, 1.0)?,
        CurriculumStage::new(lo, hi, e3, 1.0)?,
        CurriculumStage::new(lo, hi, e4, final_lr_scale)?,
    ])
}

/// Stage index active at 0-based `epoch`.
pub fn stage_at(stages: &[CurriculumStage], epoch: usize) -> usize {
    let mut end = 0;
    for (k, s) in stages.iter().enumerate() {
        end += s.epochs;
        if epoch < end {
            return k;
        }
    }
    stages.len() - 1
}
