//! COCO panoptic interchange: one JSON annotation file, one RGB image per
//! sample under an image directory, and one segment PNG per sample under the
//! directory named like the annotation file without its extension.
//!
//! Segment PNG pixels encode `id = R + 256·G + 256²·B`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, ClassInfo, PanopticSample, Segment, VOID};
use crate::error::{Error, Result};

pub const MAX_SEGMENT_ID: u32 = (1 << 24) - 1;

pub fn id_to_rgb(id: u32) -> Result<[u8; 3]> {
    if id > MAX_SEGMENT_ID {
        return Err(Error::Input(format!("segment id {id} exceeds 24 bits")));
    }
    Ok([(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, ((id >> 16) & 0xff) as u8])
}

pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 256 * 256 * rgb[2] as u32
}

#[derive(Debug, Serialize, Deserialize)]
struct PanopticFile {
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
    categories: Vec<CategoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryEntry {
    id: u32,
    name: String,
    isthing: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    image_id: u64,
    file_name: String,
    segments_info: Vec<SegmentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentEntry {
    id: u32,
    category_id: u32,
    #[serde(default)]
    area: u64,
    #[serde(default)]
    iscrowd: u8,
}

/// Directory holding the segment PNGs for an annotation file.
pub fn panoptic_dir(annotation_file: &Path) -> PathBuf {
    annotation_file.with_extension("")
}

/// Writes samples with the catalog's class ids as category ids.
pub fn write_coco_panoptic(
    annotation_file: &Path,
    image_dir: &Path,
    catalog: &ClassCatalog,
    samples: &[PanopticSample],
) -> Result<()> {
    let seg_dir = panoptic_dir(annotation_file);
    for dir in [image_dir, seg_dir.as_path()] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = PanopticFile {
        images: Vec::with_capacity(samples.len()),
        annotations: Vec::with_capacity(samples.len()),
        categories: catalog
            .classes()
            .iter()
            .map(|c| CategoryEntry {
                id: c.id,
                name: c.name.clone(),
                isthing: c.is_thing as u8,
            })
            .collect(),
    };
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let name = format!("{i:06}.png");
        let (w, h) = (s.width as u32, s.height as u32);
        let rgb: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
            let o = (y as usize * s.width + x as usize) * 3;
            Rgb([0, 1, 2].map(|c| (s.image[o + c] * 255.0).round() as u8))
        });
        let path = image_dir.join(&name);
        rgb.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;

        let mut seg = RgbImage::new(w, h);
        for (p, id) in seg.pixels_mut().zip(&s.segment_map) {
            *p = Rgb(id_to_rgb(*id)?);
        }
        let path = seg_dir.join(&name);
        seg.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;

        let areas = s.areas();
        file.images.push(ImageEntry {
            id: i as u64,
            file_name: name.clone(),
            width: w,
            height: h,
        });
        file.annotations.push(AnnotationEntry {
            image_id: i as u64,
            file_name: name,
            segments_info: s
                .segments
                .iter()
                .map(|g| SegmentEntry {
                    id: g.id,
                    category_id: g.class_id,
                    area: areas.get(&g.id).copied().unwrap_or(0) as u64,
                    iscrowd: 0,
                })
                .collect(),
        });
    }
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::format(annotation_file, e.to_string()))?;
    fs::write(annotation_file, json).map_err(|e| Error::io(annotation_file, e))
}

/// Reads a COCO panoptic dataset. Category ids are remapped to dense ids in
/// ascending category-id order.
pub fn read_coco_panoptic(
    annotation_file: &Path,
    image_dir: &Path,
) -> Result<(ClassCatalog, Vec<PanopticSample>)> {
    let text = fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let file: PanopticFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(annotation_file, e.to_string()))?;

    let mut cats: Vec<&CategoryEntry> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let mut remap = BTreeMap::new();
    let mut classes = Vec::new();
    for (i, c) in cats.iter().enumerate() {
        if remap.insert(c.id, i as u32 + 1).is_some() {
            return Err(Error::format(
                annotation_file,
                format!("duplicate category id {}", c.id),
            ));
        }
        classes.push(ClassInfo {
            id: i as u32 + 1,
            name: c.name.clone(),
            is_thing: c.isthing != 0,
        });
    }
    let catalog = ClassCatalog::new(classes)?;
    let images: HashMap<u64, &ImageEntry> = file.images.iter().map(|i| (i.id, i)).collect();
    let seg_dir = panoptic_dir(annotation_file);

    let mut samples = Vec::with_capacity(file.annotations.len());
    for ann in &file.annotations {
        let entry = images.get(&ann.image_id).ok_or_else(|| {
            Error::format(
                annotation_file,
                format!("annotation {} references unknown image id {}", ann.file_name, ann.image_id),
            )
        })?;
        let img_path = image_dir.join(&entry.file_name);
        let rgb = load_rgb(&img_path)?;
        let seg_path = seg_dir.join(&ann.file_name);
        let seg = load_rgb(&seg_path)?;
        let (w, h) = (entry.width, entry.height);
        for (path, im) in [(&img_path, &rgb), (&seg_path, &seg)] {
            if im.dimensions() != (w, h) {
                return Err(Error::format(
                    path,
                    format!("expected {w}x{h}, found {:?}", im.dimensions()),
                ));
            }
        }
        let image = rgb.pixels().flat_map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
        let segment_map: Vec<u32> = seg.pixels().map(|p| rgb_to_id(p.0)).collect();

        let mut segments = Vec::with_capacity(ann.segments_info.len());
        let mut listed = BTreeSet::new();
        for si in &ann.segments_info {
            let class_id = *remap.get(&si.category_id).ok_or_else(|| {
                Error::format(
                    &seg_path,
                    format!("segment {} has unknown category {}", si.id, si.category_id),
                )
            })?;
            if si.id == VOID || !listed.insert(si.id) {
                return Err(Error::format(
                    &seg_path,
                    format!("segment id {} is void or listed twice", si.id),
                ));
            }
            segments.push(Segment {
                id: si.id,
                class_id,
                is_thing: catalog.is_thing(class_id),
            });
        }
        let present: BTreeSet<u32> = segment_map.iter().copied().filter(|&id| id != VOID).collect();
        if present != listed {
            let orphan: Vec<_> = present.symmetric_difference(&listed).take(5).collect();
            return Err(Error::format(
                &seg_path,
                format!("segment ids in PNG and segments_info differ (e.g. {orphan:?})"),
            ));
        }
        let sample = PanopticSample {
            height: h as usize,
            width: w as usize,
            image,
            segment_map,
            segments,
        };
        sample
            .validate()
            .map_err(|e| Error::format(&seg_path, e.to_string()))?;
        samples.push(sample);
    }
    Ok((catalog, samples))
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::format(path, "missing image file"));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img.to_rgb8())
}
