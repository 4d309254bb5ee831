//! Parametric 2-D scenes: stuff classes paint the background (a canvas and
//! an optional band), thing classes are coloured shapes drawn on top in
//! order, so later shapes occlude earlier ones.
//!
//! Thing class `i` uses shape `i % 3` and colour `i / 3`, so neighbouring
//! classes share a colour and differ only in outline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, ClassInfo, PanopticSample, Segment, VOID};
use crate::error::{Error, Result};

const SHAPES: [Shape; 3] = [Shape::Ellipse, Shape::Rectangle, Shape::Triangle];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenConfig {
    pub height: usize,
    pub width: usize,
    pub num_thing_classes: usize,
    pub num_stuff_classes: usize,
    pub max_instances_per_image: usize,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            height: 64,
            width: 64,
            num_thing_classes: 18,
            num_stuff_classes: 6,
            max_instances_per_image: 3,
            seed: 7,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene size {}x{} is below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if self.num_thing_classes == 0 || self.num_stuff_classes == 0 {
            return Err(Error::Config(
                "scenes need at least one thing and one stuff class".into(),
            ));
        }
        if self.max_instances_per_image == 0 {
            return Err(Error::Config("max_instances_per_image must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_thing_classes + self.num_stuff_classes
    }

    /// Class universe with stuff classes spread evenly through the id range.
    pub fn catalog(&self) -> ClassCatalog {
        let total = self.num_classes();
        let ns = self.num_stuff_classes;
        let stuff_slots: Vec<usize> = (0..ns).map(|i| (i + 1) * total / ns - 1).collect();
        let (mut ti, mut si) = (0, 0);
        let classes = (0..total)
            .map(|slot| {
                let id = slot as u32 + 1;
                if stuff_slots.contains(&slot) {
                    si += 1;
                    ClassInfo {
                        id,
                        name: format!("stuff-{}", si - 1),
                        is_thing: false,
                    }
                } else {
                    ti += 1;
                    let k = ti - 1;
                    ClassInfo {
                        id,
                        name: format!("{}-{}", SHAPES[k % 3].name(), k / 3),
                        is_thing: true,
                    }
                }
            })
            .collect();
        ClassCatalog::new(classes).expect("dense by construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
}

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Ellipse => "ellipse",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
        }
    }

    fn contains(self, dx: f32, dy: f32, rx: f32, ry: f32) -> bool {
        match self {
            Shape::Ellipse => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
            Shape::Rectangle => dx.abs() <= rx && dy.abs() <= ry,
            // apex at the top, base at the bottom
            Shape::Triangle => {
                if dy.abs() > ry {
                    return false;
                }
                let half = rx * (dy + ry) / (2.0 * ry);
                dx.abs() <= half
            }
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Palette {
    things: Vec<(Shape, [f32; 3])>,
    stuff: Vec<([f32; 3], u32)>,
}

impl Palette {
    fn new(cfg: &SceneGenConfig) -> Self {
        let ncolors = cfg.num_thing_classes.div_ceil(3);
        let things = (0..cfg.num_thing_classes)
            .map(|k| {
                let hue = (k / 3) as f32 / ncolors as f32;
                (SHAPES[k % 3], hsv(hue, 0.85, 0.95))
            })
            .collect();
        let ns = cfg.num_stuff_classes;
        let stuff = (0..ns)
            .map(|s| {
                let hue = (s as f32 + 0.5) / ns as f32;
                let v = 0.3 + 0.1 * (s % 3) as f32;
                (hsv(hue, 0.35, v), (s % 3) as u32)
            })
            .collect();
        Palette { things, stuff }
    }

    fn stuff_color(&self, s: usize, y: usize, x: usize) -> [f32; 3] {
        let (base, texture) = self.stuff[s];
        let delta = match texture {
            1 if (y / 3).is_multiple_of(2) => 0.08,
            2 if ((y / 4) + (x / 4)).is_multiple_of(2) => 0.08,
            _ => 0.0,
        };
        base.map(|c| c + delta)
    }
}

struct Instance {
    class_id: u32,
    thing_index: usize,
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Instance {
    fn bbox(&self) -> [f32; 4] {
        [self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry]
    }
}

fn bbox_iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f32; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Generates `n` samples; sample `i` draws from its own RNG stream so the
/// result is a pure function of `(cfg, n)`.
pub fn generate_dataset(cfg: &SceneGenConfig, n: usize) -> Result<Vec<PanopticSample>> {
    generate_dataset_at(cfg, 0, n)
}

/// Generates samples with indices `start..start + n`.
pub fn generate_dataset_at(
    cfg: &SceneGenConfig,
    start: u64,
    n: usize,
) -> Result<Vec<PanopticSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let catalog = cfg.catalog();
    let palette = Palette::new(cfg);
    Ok((0..n as u64)
        .map(|i| generate_one(cfg, &catalog, &palette, start + i))
        .collect())
}

fn generate_one(
    cfg: &SceneGenConfig,
    catalog: &ClassCatalog,
    palette: &Palette,
    index: u64,
) -> PanopticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let stuff_ids: Vec<u32> = catalog.classes().iter().filter(|c| !c.is_thing).map(|c| c.id).collect();
    let thing_ids: Vec<u32> = catalog.classes().iter().filter(|c| c.is_thing).map(|c| c.id).collect();

    // The forced class guarantees every class shows up once per catalog cycle.
    let forced = (index % catalog.len() as u64) as u32 + 1;
    let canvas = if catalog.is_thing(forced) {
        stuff_ids[rng.random_range(0..stuff_ids.len())]
    } else {
        forced
    };
    let band = if stuff_ids.len() >= 2 && rng.random_bool(0.6) {
        let others: Vec<u32> = stuff_ids.iter().copied().filter(|&s| s != canvas).collect();
        let class = others[rng.random_range(0..others.len())];
        let rows = rng.random_range(h / 4..=h / 2);
        let top = rng.random_bool(0.5);
        Some((class, top, rows))
    } else {
        None
    };

    let count = rng.random_range(1..=cfg.max_instances_per_image);
    let mut classes: Vec<u32> = (0..count)
        .map(|_| thing_ids[rng.random_range(0..thing_ids.len())])
        .collect();
    if catalog.is_thing(forced) {
        // drawn last so it stays fully visible
        *classes.last_mut().expect("count >= 1") = forced;
    }
    let (hf, wf) = (h as f32, w as f32);
    let mut instances: Vec<Instance> = Vec::new();
    for class_id in classes {
        let thing_index = thing_ids.iter().position(|&t| t == class_id).expect("thing");
        for _attempt in 0..20 {
            let rx = rng.random_range(0.10..0.22) * wf;
            let ry = rng.random_range(0.10..0.22) * hf;
            let cx = rng.random_range(rx..wf - rx);
            let cy = rng.random_range(ry..hf - ry);
            let cand = Instance {
                class_id,
                thing_index,
                cx,
                cy,
                rx,
                ry,
            };
            if instances.iter().all(|o| bbox_iou(o.bbox(), cand.bbox()) < 0.3) {
                instances.push(cand);
                break;
            }
        }
    }
    // keep the forced instance even when placement retries ran out
    if catalog.is_thing(forced) && instances.last().map(|i| i.class_id) != Some(forced) {
        let thing_index = thing_ids.iter().position(|&t| t == forced).expect("thing");
        instances.push(Instance {
            class_id: forced,
            thing_index,
            cx: wf / 2.0,
            cy: hf / 2.0,
            rx: 0.15 * wf,
            ry: 0.15 * hf,
        });
    }

    let stuff_index = |id: u32| stuff_ids.iter().position(|&s| s == id).expect("stuff");
    let mut image = vec![0.0f32; h * w * 3];
    let mut owner = vec![0usize; h * w]; // 0 canvas, 1 band, 2.. instances
    for y in 0..h {
        for x in 0..w {
            let in_band = band.is_some_and(|(_, top, rows)| if top { y < rows } else { y >= h - rows });
            let (class, o) = if in_band {
                (band.expect("band").0, 1)
            } else {
                (canvas, 0)
            };
            let c = palette.stuff_color(stuff_index(class), y, x);
            image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
            owner[y * w + x] = o;
        }
    }
    let mut full_area = vec![0usize; instances.len()];
    for (k, inst) in instances.iter().enumerate() {
        let (shape, color) = palette.things[inst.thing_index];
        let y0 = (inst.cy - inst.ry).floor().max(0.0) as usize;
        let y1 = ((inst.cy + inst.ry).ceil() as usize).min(h - 1);
        let x0 = (inst.cx - inst.rx).floor().max(0.0) as usize;
        let x1 = ((inst.cx + inst.rx).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f32 + 0.5 - inst.cx;
                let dy = y as f32 + 0.5 - inst.cy;
                if shape.contains(dx, dy, inst.rx, inst.ry) {
                    image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    owner[y * w + x] = 2 + k;
                    full_area[k] += 1;
                }
            }
        }
    }
    for v in image.iter_mut() {
        let noisy = (*v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
        *v = (noisy * 255.0).round() / 255.0;
    }

    let mut visible = vec![0usize; instances.len() + 2];
    for &o in &owner {
        visible[o] += 1;
    }
    // heavily occluded remnants become void
    let keep_instance: Vec<bool> = (0..instances.len())
        .map(|k| visible[k + 2] >= 12 && visible[k + 2] * 10 >= full_area[k] * 3)
        .collect();

    let mut next_id = 1u32;
    let mut owner_to_id = vec![VOID; instances.len() + 2];
    let mut segments = Vec::new();
    let stuff_layers = [(0usize, Some(canvas)), (1usize, band.map(|b| b.0))];
    for (o, class) in stuff_layers {
        if let Some(class_id) = class {
            if visible[o] > 0 {
                owner_to_id[o] = next_id;
                segments.push(Segment {
                    id: next_id,
                    class_id,
                    is_thing: false,
                });
                next_id += 1;
            }
        }
    }
    for (k, inst) in instances.iter().enumerate() {
        if keep_instance[k] {
            owner_to_id[k + 2] = next_id;
            segments.push(Segment {
                id: next_id,
                class_id: inst.class_id,
                is_thing: true,
            });
            next_id += 1;
        }
    }
    let segment_map = owner.iter().map(|&o| owner_to_id[o]).collect();
    PanopticSample {
        height: h,
        width: w,
        image,
        segment_map,
        segments,
    }
}
