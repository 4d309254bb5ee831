//! Panoptic samples, the class catalog, synthetic scene generation, the
//! incremental task protocol and on-disk interchange formats.

pub mod cache;
pub mod coco;
pub mod protocol;
pub mod scene;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use protocol::{build_protocol, restrict_classes, step_view, ProtocolMode, TaskProtocol};
pub use scene::{generate_dataset, generate_dataset_at, SceneGenConfig};

/// Segment id 0 marks void pixels.
pub const VOID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
}

/// One image with its panoptic ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, `height × width × 3`, values in `[0, 1]` on the 1/255 grid.
    pub image: Vec<f32>,
    /// Segment id per pixel, row-major.
    pub segment_map: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticSample {
    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.segments.iter().map(|s| s.class_id).collect()
    }

    /// Pixel count per segment id (void excluded).
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &id in &self.segment_map {
            if id != VOID {
                *out.entry(id).or_insert(0) += 1;
            }
        }
        out
    }

    /// Class id per pixel, void as 0.
    pub fn class_map(&self) -> Vec<u32> {
        let lut: BTreeMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class_id)).collect();
        self.segment_map
            .iter()
            .map(|id| if *id == VOID { VOID } else { lut[id] })
            .collect()
    }

    /// Checks the structural invariants: map ids and segment records are in
    /// bijection, ids are unique, and no stuff class repeats.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.segment_map.len() != n || self.image.len() != n * 3 {
            return Err(Error::Input(format!(
                "sample buffers do not match {}x{}",
                self.height, self.width
            )));
        }
        let mut ids = BTreeSet::new();
        let mut stuff = BTreeSet::new();
        for s in &self.segments {
            if s.id == VOID {
                return Err(Error::Input("segment id 0 is reserved for void".into()));
            }
            if !ids.insert(s.id) {
                return Err(Error::Input(format!("duplicate segment id {}", s.id)));
            }
            if !s.is_thing && !stuff.insert(s.class_id) {
                return Err(Error::Input(format!(
                    "stuff class {} has more than one segment",
                    s.class_id
                )));
            }
        }
        let present: BTreeSet<u32> = self.areas().into_keys().collect();
        if present != ids {
            return Err(Error::Input(format!(
                "segment map ids {present:?} do not match segment records {ids:?}"
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

/// Ordered class universe with dense ids `1..=len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i + 1 {
                return Err(Error::Input(format!(
                    "class ids must be dense from 1; position {i} has id {}",
                    c.id
                )));
            }
        }
        Ok(ClassCatalog { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn get(&self, id: u32) -> Option<&ClassInfo> {
        id.checked_sub(1).and_then(|i| self.classes.get(i as usize))
    }

    pub fn is_thing(&self, id: u32) -> bool {
        self.get(id).is_some_and(|c| c.is_thing)
    }
}
