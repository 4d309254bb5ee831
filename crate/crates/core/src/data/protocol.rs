//! Incremental task protocol: an ordered class list cut into a base step and
//! equally sized increments, plus the per-step training views.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, PanopticSample, VOID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    /// Images may contain future classes; those pixels are voided.
    Overlap,
    /// Images containing any future class are dropped.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProtocol {
    pub ordering: Vec<u32>,
    pub base_count: usize,
    pub increment: usize,
    pub mode: ProtocolMode,
    /// `steps[t - 1]` is the class set of step `t`, in ordering order.
    pub steps: Vec<Vec<u32>>,
}

impl TaskProtocol {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes of step `t` (1-based).
    pub fn step_classes(&self, t: usize) -> Result<&[u32]> {
        self.check_step(t)?;
        Ok(&self.steps[t - 1])
    }

    /// Union of the class sets of steps `1..=t`.
    pub fn classes_upto(&self, t: usize) -> Result<BTreeSet<u32>> {
        self.check_step(t)?;
        Ok(self.steps[..t].iter().flatten().copied().collect())
    }

    /// `(step, local index)` of a class.
    pub fn locate(&self, class_id: u32) -> Option<(usize, usize)> {
        self.steps.iter().enumerate().find_map(|(i, s)| {
            s.iter().position(|&c| c == class_id).map(|j| (i + 1, j))
        })
    }

    pub fn base_classes(&self) -> &[u32] {
        &self.steps[0]
    }

    pub fn new_classes(&self) -> Vec<u32> {
        self.steps[1..].iter().flatten().copied().collect()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps.len() {
            return Err(Error::Protocol(format!(
                "step {t} outside 1..={}",
                self.steps.len()
            )));
        }
        Ok(())
    }
}

/// Splits the catalog into `base` classes followed by steps of `inc` classes.
/// With `ordering_seed` the class order is a seeded shuffle, otherwise the
/// catalog order.
pub fn build_protocol(
    catalog: &ClassCatalog,
    base: usize,
    inc: usize,
    mode: ProtocolMode,
    ordering_seed: Option<u64>,
) -> Result<TaskProtocol> {
    let n = catalog.len();
    if base == 0 || base > n {
        return Err(Error::Protocol(format!(
            "base size {base} does not fit a catalog of {n}"
        )));
    }
    let rest = n - base;
    if rest > 0 && (inc == 0 || !rest.is_multiple_of(inc)) {
        return Err(Error::Protocol(format!(
            "{rest} classes after the base step cannot be split into increments of {inc}"
        )));
    }
    let mut ordering: Vec<u32> = catalog.ids().collect();
    if let Some(seed) = ordering_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ordering.shuffle(&mut rng);
    }
    let mut steps = vec![ordering[..base].to_vec()];
    if rest > 0 {
        steps.extend(ordering[base..].chunks(inc).map(|c| c.to_vec()));
    }
    Ok(TaskProtocol {
        ordering,
        base_count: base,
        increment: inc,
        mode,
        steps,
    })
}

/// Training view of step `t`: segments outside `C^t` become void; images are
/// kept according to the protocol mode and must contain a class of `C^t`.
pub fn step_view(
    dataset: &[PanopticSample],
    protocol: &TaskProtocol,
    t: usize,
) -> Result<Vec<PanopticSample>> {
    let current: BTreeSet<u32> = protocol.step_classes(t)?.iter().copied().collect();
    let seen = protocol.classes_upto(t)?;
    Ok(dataset
        .iter()
        .filter(|s| {
            let classes = s.class_ids();
            let has_current = classes.iter().any(|c| current.contains(c));
            match protocol.mode {
                ProtocolMode::Overlap => has_current,
                ProtocolMode::Disjoint => has_current && classes.is_subset(&seen),
            }
        })
        .map(|s| restrict_classes(s, &current))
        .collect())
}

/// Copy of `sample` with every segment outside `keep` turned void.
pub fn restrict_classes(sample: &PanopticSample, keep: &BTreeSet<u32>) -> PanopticSample {
    let kept: BTreeSet<u32> = sample
        .segments
        .iter()
        .filter(|g| keep.contains(&g.class_id))
        .map(|g| g.id)
        .collect();
    PanopticSample {
        segment_map: sample
            .segment_map
            .iter()
            .map(|id| if kept.contains(id) { *id } else { VOID })
            .collect(),
        segments: sample
            .segments
            .iter()
            .filter(|g| kept.contains(&g.id))
            .copied()
            .collect(),
        ..sample.clone()
    }
}
