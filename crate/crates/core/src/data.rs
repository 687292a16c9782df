//! Longitudinal and competing-risks survival records.

use alloc::{collections::BTreeMap, format, string::String, vec::Vec};

use crate::error::{Error, Result};

pub type Covariates = BTreeMap<String, f64>;

/// One measurement of a longitudinal marker.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub individual_id: u64,
    pub time: f64,
    /// Real for Gaussian markers, a nonnegative integer for Poisson markers.
    pub value: f64,
    pub covariates: Covariates,
    /// Which longitudinal series (file) the record belongs to, from 0.
    pub marker: usize,
}

/// Observed time and cause for one individual. Cause 0 means censored.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub individual_id: u64,
    pub time: f64,
    pub cause: u32,
    pub covariates: Covariates,
}

/// What to do with longitudinal records observed after the individual's
/// survival time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatePolicy {
    #[default]
    Error,
    /// Drop them; the count is reported in [`JointDataset::dropped_late`].
    Truncate,
}

/// Validated joint dataset with individuals re-indexed densely `1..=N` in
/// survival-record order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    longitudinal: Vec<LongitudinalRecord>,
    survival: Vec<SurvivalRecord>,
    n_causes: u32,
    original_ids: Vec<u64>,
    dropped_late: usize,
}

impl JointDataset {
    pub fn longitudinal(&self) -> &[LongitudinalRecord] {
        &self.longitudinal
    }

    pub fn survival(&self) -> &[SurvivalRecord] {
        &self.survival
    }

    pub fn n_causes(&self) -> u32 {
        self.n_causes
    }

    pub fn n_individuals(&self) -> usize {
        self.survival.len()
    }

    /// Number of longitudinal series.
    pub fn n_markers(&self) -> usize {
        self.longitudinal.iter().map(|r| r.marker + 1).max().unwrap_or(0)
    }

    /// Original identifier of dense individual `id` (1-based).
    pub fn original_id(&self, id: u64) -> u64 {
        self.original_ids[(id - 1) as usize]
    }

    pub fn original_ids(&self) -> &[u64] {
        &self.original_ids
    }

    pub fn dropped_late(&self) -> usize {
        self.dropped_late
    }

    /// Survival record of dense individual `id` (1-based).
    pub fn survival_of(&self, id: u64) -> &SurvivalRecord {
        &self.survival[(id - 1) as usize]
    }

    /// Validates the dataset again, keeping the original identifiers.
    pub fn revalidate(&self, policy: LatePolicy) -> Result<JointDataset> {
        let mut again = validate_joint_dataset(
            self.longitudinal.clone(),
            self.survival.clone(),
            self.n_causes,
            policy,
        )?;
        again.original_ids = again
            .original_ids
            .iter()
            .map(|&dense| self.original_id(dense))
            .collect();
        again.dropped_late += self.dropped_late;
        Ok(again)
    }

    /// Divides every time by the largest time in the dataset.
    pub fn rescale_time(&self) -> JointDataset {
        let max = self
            .survival
            .iter()
            .map(|r| r.time)
            .chain(self.longitudinal.iter().map(|r| r.time))
            .fold(0.0f64, f64::max);
        let mut out = self.clone();
        out.survival.iter_mut().for_each(|r| r.time /= max);
        out.longitudinal.iter_mut().for_each(|r| r.time /= max);
        out
    }
}

pub fn validate_joint_dataset(
    longitudinal: Vec<LongitudinalRecord>,
    survival: Vec<SurvivalRecord>,
    n_causes: u32,
    policy: LatePolicy,
) -> Result<JointDataset> {
    if survival.is_empty() || longitudinal.is_empty() {
        return Err(Error::Validation(String::from(
            "both longitudinal and survival records are required",
        )));
    }
    if n_causes == 0 {
        return Err(Error::Validation(String::from("at least one cause is required")));
    }
    let mut dense: BTreeMap<u64, u64> = BTreeMap::new();
    let mut original_ids = Vec::with_capacity(survival.len());
    let mut survival_out = Vec::with_capacity(survival.len());
    for (row, mut rec) in survival.into_iter().enumerate() {
        if !(rec.time > 0.0) || !rec.time.is_finite() {
            return Err(Error::Validation(format!(
                "survival row {}: time must be positive, got {}",
                row + 1,
                rec.time
            )));
        }
        if rec.cause > n_causes {
            return Err(Error::Validation(format!(
                "survival row {}: cause {} outside 0..={n_causes}",
                row + 1,
                rec.cause
            )));
        }
        let next = dense.len() as u64 + 1;
        if dense.insert(rec.individual_id, next).is_some() {
            return Err(Error::Validation(format!(
                "duplicate survival record for individual {}",
                rec.individual_id
            )));
        }
        original_ids.push(rec.individual_id);
        rec.individual_id = next;
        survival_out.push(rec);
    }

    let mut longitudinal_out = Vec::with_capacity(longitudinal.len());
    let mut dropped_late = 0;
    for (row, mut rec) in longitudinal.into_iter().enumerate() {
        let Some(&id) = dense.get(&rec.individual_id) else {
            return Err(Error::Validation(format!(
                "longitudinal row {}: individual {} has no survival record",
                row + 1,
                rec.individual_id
            )));
        };
        if !(rec.time >= 0.0) || !rec.time.is_finite() || !rec.value.is_finite() {
            return Err(Error::Validation(format!(
                "longitudinal row {}: time must be nonnegative and value finite",
                row + 1
            )));
        }
        let limit = survival_out[(id - 1) as usize].time;
        if rec.time > limit {
            match policy {
                LatePolicy::Error => {
                    return Err(Error::Validation(format!(
                        "longitudinal row {}: time {} exceeds survival time {limit} of individual {}",
                        row + 1,
                        rec.time,
                        rec.individual_id
                    )))
                }
                LatePolicy::Truncate => {
                    dropped_late += 1;
                    continue;
                }
            }
        }
        rec.individual_id = id;
        longitudinal_out.push(rec);
    }
    if longitudinal_out.is_empty() {
        return Err(Error::Validation(String::from(
            "no longitudinal records left after truncation",
        )));
    }

    Ok(JointDataset {
        longitudinal: longitudinal_out,
        survival: survival_out,
        n_causes,
        original_ids,
        dropped_late,
    })
}
