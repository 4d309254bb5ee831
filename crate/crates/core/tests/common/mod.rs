//! Oracles shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use pcl_core::data::cache::{read_cache, write_cache};
use pcl_core::data::coco::{id_to_rgb, read_coco_panoptic, rgb_to_id, write_coco_panoptic};
use pcl_core::data::{
    build_protocol, generate_dataset, step_view, ClassCatalog, ClassInfo, PanopticSample, ProtocolMode,
    SceneGenConfig, Segment,
};
use pcl_core::metrics::{image_stats, panoptic_quality, ClassGroups, ClassStats};
use pcl_core::model::{
    add_step, attention_cost, forward_all_counted, forward_step, image_tensor, init_model, ModelConfig, ModelState,
    ParamGroup, PromptMode, StepOutput,
};
use pcl_core::training::{
    grad_check, hungarian, mask_targets, train_task, CostMatrix, GradCheck, MatchWeights, Objective, TrainHyper,
};
use pcl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum total cost over every injection of the smaller side into the larger.
pub fn brute_force(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, transposed: bool) -> f64 {
        let (rows, cols) = if transposed {
            (cost.cols, cost.rows)
        } else {
            (cost.rows, cost.cols)
        };
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if used[c] {
                continue;
            }
            used[c] = true;
            let here = if transposed { cost.at(c, row) } else { cost.at(row, c) };
            best = best.min(here + rec(cost, row + 1, used, transposed));
            used[c] = false;
        }
        best
    }
    let transposed = cost.rows > cost.cols;
    let cols = cost.rows.max(cost.cols);
    rec(cost, 0, &mut vec![false; cols], transposed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
    // integer costs keep brute-force sums exact
    let data = (0..rows * cols).map(|_| rng.random_range(0..50) as f64).collect();
    CostMatrix::new(rows, cols, data)
}

pub const SIDE: usize = 16;
pub const CLASSES: u32 = 4;

pub fn groups() -> ClassGroups {
    ClassGroups {
        groups: vec![("all".into(), (1..=CLASSES).collect())],
    }
}

/// Sample whose segment list is derived from the ids present in `map`.
pub fn sample(map: Vec<u32>, class_of: &BTreeMap<u32, u32>) -> PanopticSample {
    let ids: BTreeSet<u32> = map.iter().copied().filter(|&i| i != 0).collect();
    PanopticSample {
        height: SIDE,
        width: SIDE,
        image: vec![0.0; SIDE * SIDE * 3],
        segment_map: map,
        segments: ids
            .into_iter()
            .map(|id| Segment {
                id,
                class_id: class_of[&id],
                is_thing: true,
            })
            .collect(),
    }
}

/// Up to five rectangles painted over a void or fully covered canvas.
pub fn random_scene(rng: &mut ChaCha8Rng, first_id: u32, void_canvas: bool) -> (Vec<u32>, BTreeMap<u32, u32>) {
    let mut map = vec![0u32; SIDE * SIDE];
    let mut class_of = BTreeMap::new();
    let n = rng.random_range(1..=5);
    for k in 0..n {
        let id = first_id + k;
        class_of.insert(id, rng.random_range(1..=CLASSES));
        let (y0, x0) = (rng.random_range(0..SIDE), rng.random_range(0..SIDE));
        let (h, w) = (rng.random_range(2..=10), rng.random_range(2..=10));
        let full = k == 0 && !void_canvas;
        for y in 0..SIDE {
            for x in 0..SIDE {
                if full || (y >= y0 && y < y0 + h && x >= x0 && x < x0 + w) {
                    map[y * SIDE + x] = id;
                }
            }
        }
    }
    (map, class_of)
}

/// Prediction derived from a ground truth: shifted, relabelled, partly
/// erased, plus an occasional spurious segment.
pub fn perturb(rng: &mut ChaCha8Rng, gt: &[u32], gt_class: &BTreeMap<u32, u32>) -> (Vec<u32>, BTreeMap<u32, u32>) {
    let (dy, dx) = (rng.random_range(0..3), rng.random_range(0..3));
    let mut map = vec![0u32; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (sy, sx) = (y.saturating_sub(dy), x.saturating_sub(dx));
            let g = gt[sy * SIDE + sx];
            map[y * SIDE + x] = if g == 0 || rng.random::<f64>() < 0.1 { 0 } else { g + 100 };
        }
    }
    let mut class_of: BTreeMap<u32, u32> = gt_class
        .iter()
        .map(|(&id, &c)| {
            let c = if rng.random::<f64>() < 0.2 { rng.random_range(1..=CLASSES) } else { c };
            (id + 100, c)
        })
        .collect();
    if rng.random::<bool>() {
        let (y0, x0) = (rng.random_range(0..SIDE - 4), rng.random_range(0..SIDE - 4));
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                map[y * SIDE + x] = 200;
            }
        }
        class_of.insert(200, rng.random_range(1..=CLASSES));
    }
    (map, class_of)
}

/// Enumerates every class-consistent one-to-one pairing of predicted and
/// ground-truth segments, keeps the pairing with the most IoU > 0.5 pairs,
/// and scores it; IoU ignores pixels void in the ground truth.
pub fn oracle(pred: &PanopticSample, gt: &PanopticSample) -> BTreeMap<u32, ClassStats> {
    let cls = |s: &PanopticSample, id: u32| s.segments.iter().find(|g| g.id == id).unwrap().class_id;
    let gts: Vec<u32> = gt.segments.iter().map(|s| s.id).collect();
    let preds: Vec<u32> = pred.segments.iter().map(|s| s.id).collect();
    let iou = |g: u32, p: u32| -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&pm, &gm) in pred.segment_map.iter().zip(&gt.segment_map) {
            if gm == 0 {
                continue;
            }
            let (a, b) = (gm == g, pm == p);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        inter as f64 / union as f64
    };
    fn search(
        i: usize,
        gts: &[u32],
        preds: &[u32],
        used: &mut Vec<bool>,
        ok: &dyn Fn(u32, u32) -> Option<f64>,
        cur: &mut Vec<(u32, u32, f64)>,
        best: &mut Vec<(u32, u32, f64)>,
    ) {
        if i == gts.len() {
            if cur.len() > best.len() {
                *best = cur.clone();
            }
            return;
        }
        search(i + 1, gts, preds, used, ok, cur, best);
        for (j, &p) in preds.iter().enumerate() {
            if used[j] {
                continue;
            }
            if let Some(v) = ok(gts[i], p) {
                used[j] = true;
                cur.push((gts[i], p, v));
                search(i + 1, gts, preds, used, ok, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let ok = |g: u32, p: u32| -> Option<f64> {
        if cls(gt, g) != cls(pred, p) {
            return None;
        }
        let v = iou(g, p);
        (v > 0.5).then_some(v)
    };
    let mut best = Vec::new();
    search(0, &gts, &preds, &mut vec![false; preds.len()], &ok, &mut Vec::new(), &mut best);
    let mut stats: BTreeMap<u32, ClassStats> = BTreeMap::new();
    for &(g, _, v) in &best {
        let s = stats.entry(cls(gt, g)).or_default();
        s.tp += 1;
        s.iou_sum += v;
    }
    for &g in &gts {
        if !best.iter().any(|b| b.0 == g) {
            stats.entry(cls(gt, g)).or_default().fn_ += 1;
        }
    }
    for &p in &preds {
        if best.iter().any(|b| b.1 == p) {
            continue;
        }
        let area = pred.segment_map.iter().filter(|&&v| v == p).count();
        let on_void = pred
            .segment_map
            .iter()
            .zip(&gt.segment_map)
            .filter(|(&v, &g)| v == p && g == 0)
            .count();
        if 2 * on_void <= area {
            stats.entry(cls(pred, p)).or_default().fp += 1;
        }
    }
    stats
}


/// Compares per-image statistics against `oracle` on `instances` random
/// scenes, then the dataset-level scores against the accumulated oracle
/// counts. Half the ground truths have void backgrounds.
pub fn pq_agrees_with_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let mut total: BTreeMap<u32, ClassStats> = BTreeMap::new();
    let nonempty = |m: &BTreeMap<u32, ClassStats>| -> BTreeMap<u32, ClassStats> {
        m.iter().filter(|(_, s)| !s.is_empty()).map(|(&c, &s)| (c, s)).collect()
    };
    for i in 0..instances {
        let (gmap, gcls) = random_scene(&mut rng, 1, i % 2 == 0);
        let (pmap, pcls) = perturb(&mut rng, &gmap, &gcls);
        let (gt, pred) = (sample(gmap, &gcls), sample(pmap, &pcls));
        let want = nonempty(&oracle(&pred, &gt));
        let got = nonempty(&image_stats(&pred, &gt).map_err(|e| e.to_string())?);
        if want.keys().ne(got.keys()) {
            return Err(format!("image {i}: classes {:?} vs oracle {:?}", got.keys(), want.keys()));
        }
        for (c, w) in &want {
            let g = &got[c];
            if (g.tp, g.fp, g.fn_) != (w.tp, w.fp, w.fn_) || (g.iou_sum - w.iou_sum).abs() >= 1e-12 {
                return Err(format!("image {i} class {c}: {g:?} vs oracle {w:?}"));
            }
            let t = total.entry(*c).or_default();
            t.tp += w.tp;
            t.fp += w.fp;
            t.fn_ += w.fn_;
            t.iou_sum += w.iou_sum;
        }
        preds.push(pred);
        gts.push(gt);
    }
    let r = panoptic_quality(&preds, &gts, &groups()).map_err(|e| e.to_string())?;
    let mut mean = 0.0;
    for (c, w) in &total {
        let s = &r.per_class[c];
        if (s.pq() - w.pq()).abs() >= 1e-12 || !(0.0..=1.0).contains(&s.pq()) {
            return Err(format!("class {c}: PQ {} vs oracle {}", s.pq(), w.pq()));
        }
        if s.tp > 0 && (s.pq() - s.sq() * s.rq()).abs() >= 1e-12 {
            return Err(format!("class {c}: PQ {} != SQ·RQ {}", s.pq(), s.sq() * s.rq()));
        }
        mean += w.pq();
    }
    mean /= total.len() as f64;
    let all = r.group("all").map_or(f64::NAN, |g| g.pq);
    if (all - mean).abs() >= 1e-12 {
        return Err(format!("group PQ {all} vs oracle mean {mean}"));
    }
    Ok(())
}

/// PQ, SQ and RQ of 20 scenes scored against themselves.
pub fn perfect_prediction_scores(seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<PanopticSample> = (0..20)
        .map(|i| {
            let (m, c) = random_scene(&mut rng, 1, i % 2 == 0);
            sample(m, &c)
        })
        .collect();
    let all = panoptic_quality(&scenes, &scenes, &groups()).unwrap().group("all").unwrap();
    (all.pq, all.sq, all.rq)
}

/// `D → H (depth times) → C` with biases.
pub fn head_params(d: usize, h: usize, depth: usize, c: usize) -> usize {
    (d * h + h) + (depth - 1) * (h * h + h) + (h * c + c)
}

pub fn scene32(seed: u64) -> SceneGenConfig {
    SceneGenConfig {
        height: 32,
        width: 32,
        num_thing_classes: 6,
        num_stuff_classes: 2,
        max_instances_per_image: 2,
        seed,
    }
}

pub fn model32(mode: PromptMode, layers: usize) -> ModelConfig {
    ModelConfig {
        image_size: [32, 32],
        mask_resolution: [8, 8],
        embed_dim: 16,
        num_layers: layers,
        num_heads: 2,
        pixel_embed_dim: 8,
        mlp_hidden: 16,
        encoder_channels: [4, 8, 8],
        prompt_mode: mode,
        ..Default::default()
    }
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(u, v)| f64::from((u - v).abs())).fold(0.0, f64::max)
}

/// Trains every step of a 4 + 2 + 2 scenario and returns the largest change
/// of raw class and mask logits of any earlier prompt set on `probes`
/// images, measured across each later step's training.
pub fn freeze_invariance(probes: usize) -> Result<f64, String> {
    let e = |e: pcl_core::Error| e.to_string();
    let scene = scene32(5);
    let p = build_protocol(&scene.catalog(), 4, 2, ProtocolMode::Overlap, None).map_err(e)?;
    let data = generate_dataset(&scene, 30 + probes).map_err(e)?;
    let (train, held) = data.split_at(30);
    let mut s: ModelState<f32> = init_model(&model32(PromptMode::Deep, 2), &p, 1).map_err(e)?;
    let hyper = TrainHyper {
        iters_per_class: 5,
        iter_scale: 1.0,
        batch_size: 2,
        ..Default::default()
    };
    let w = MatchWeights::default();
    train_task(&mut s, &step_view(train, &p, 1).map_err(e)?, 1, &hyper, &w, Objective::Eclipse).map_err(e)?;
    let images: Vec<Tensor<f32>> = held.iter().map(image_tensor).collect();
    let outputs = |s: &ModelState<f32>, k: usize| -> Result<Vec<StepOutput<f32>>, String> {
        images.iter().map(|i| forward_step(s, i, k).map_err(|x| x.to_string())).collect()
    };
    let mut worst = 0.0f64;
    for t in 2..=p.num_steps() {
        let before: Vec<Vec<StepOutput<f32>>> = (1..t).map(|k| outputs(&s, k)).collect::<Result<_, _>>()?;
        add_step(&mut s, p.step_classes(t).map_err(e)?, 10 + t as u64).map_err(e)?;
        train_task(&mut s, &step_view(train, &p, t).map_err(e)?, t, &hyper, &w, Objective::Eclipse).map_err(e)?;
        for k in 1..t {
            for (a, b) in outputs(&s, k)?.iter().zip(&before[k - 1]) {
                worst = worst
                    .max(max_abs_diff(&a.class_logits, &b.class_logits))
                    .max(max_abs_diff(&a.mask_logits, &b.mask_logits));
            }
        }
    }
    Ok(worst)
}

/// Checks `count_trainable` after every `add_step` of five configurations
/// against `blocks · N^t · D + head` and against an enumeration of the
/// step's registry groups. Returns the number of states checked.
pub fn trainable_accounting() -> Result<usize, String> {
    let catalog = scene32(5).catalog();
    let cases = [
        (PromptMode::Deep, 16, 3, 16, 2, 2),
        (PromptMode::Deep, 32, 2, 8, 1, 4),
        (PromptMode::Shallow, 16, 3, 24, 2, 2),
        (PromptMode::Shallow, 8, 1, 8, 3, 1),
        (PromptMode::Deep, 24, 4, 12, 2, 2),
    ];
    let mut checked = 0;
    for (mode, d, layers, hidden, depth, inc) in cases {
        let cfg = ModelConfig {
            embed_dim: d,
            num_heads: 2,
            mlp_hidden: hidden,
            mlp_depth: depth,
            ..model32(mode, layers)
        };
        let p = build_protocol(&catalog, 4, inc, ProtocolMode::Overlap, None).map_err(|e| e.to_string())?;
        let mut s: ModelState<f32> = init_model(&cfg, &p, 2).map_err(|e| e.to_string())?;
        for t in 2..=p.num_steps() {
            let classes = p.step_classes(t).map_err(|e| e.to_string())?;
            add_step(&mut s, classes, t as u64).map_err(|e| e.to_string())?;
            let n = classes.len().max(cfg.min_prompts);
            let blocks = if mode == PromptMode::Deep { layers } else { 1 };
            let expected = blocks * n * d + head_params(d, hidden, depth, classes.len());
            let enumerated: usize = s
                .params()
                .iter()
                .filter(|q| matches!(q.group, ParamGroup::Prompts(k) | ParamGroup::Head(k) if k == t))
                .map(|q| q.value.len())
                .sum();
            if s.count_trainable() != expected || enumerated != expected {
                return Err(format!(
                    "{mode:?} D={d} L={layers} t={t}: count {} enumerated {enumerated} closed form {expected}",
                    s.count_trainable()
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// At every step of a 2 + 3·2 scenario with 3 queries per prompt set, the
/// counted attention cost of a forward pass over every set equals
/// `Σ f(N^k)` and is below `f(Σ N^k)`. Returns the number of states checked.
pub fn attention_additivity() -> Result<usize, String> {
    let e = |e: pcl_core::Error| e.to_string();
    let catalog = scene32(5).catalog();
    let cfg = ModelConfig {
        min_prompts: 3,
        ..model32(PromptMode::Deep, 2)
    };
    let p = build_protocol(&catalog, 2, 2, ProtocolMode::Overlap, None).map_err(e)?;
    let mut s: ModelState<f32> = init_model(&cfg, &p, 2).map_err(e)?;
    let mut checked = 0;
    for t in 2..=p.num_steps() {
        add_step(&mut s, p.step_classes(t).map_err(e)?, t as u64).map_err(e)?;
        let ns: Vec<usize> = (1..=t)
            .map(|k| s.prompt_set(k).map(|p| p.num_queries))
            .collect::<pcl_core::Result<_>>()
            .map_err(e)?;
        let separate: u64 = ns.iter().map(|&n| attention_cost(&s.config, n)).sum();
        let joint = attention_cost(&s.config, ns.iter().sum());
        let (_, counter) = forward_all_counted(&s, &Tensor::zeros(&[32, 32, 3]), t).map_err(e)?;
        let reported = s.count_attention_flops(t).map_err(e)?;
        if counter.attention != separate || reported != separate || separate >= joint {
            return Err(format!(
                "T={t} N={ns:?}: counted {} reported {reported} Σf(N) {separate} f(ΣN) {joint}",
                counter.attention
            ));
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn catalog(n: u32) -> ClassCatalog {
    ClassCatalog::new(
        (1..=n)
            .map(|id| ClassInfo {
                id,
                name: format!("c{id}"),
                is_thing: id != n,
            })
            .collect(),
    )
    .unwrap()
}

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: [16, 16],
        mask_resolution: [4, 4],
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        pixel_embed_dim: 8,
        mlp_hidden: 8,
        mlp_depth: 1,
        encoder_channels: [2, 4, 4],
        min_prompts: 2,
        ..Default::default()
    }
}

/// Left half class 1, right half class 2, with a void column in between.
pub fn two_region_sample(size: usize) -> PanopticSample {
    let mut image = Vec::with_capacity(size * size * 3);
    let mut map = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (id, rgb) = if x < size / 2 - 1 {
                (1, [0.8, 0.2, 0.1])
            } else if x > size / 2 {
                (2, [0.1, 0.3, 0.9])
            } else {
                (0, [0.5, 0.5, 0.5])
            };
            let shade = (y % 4) as f32 / 255.0;
            image.extend(rgb.map(|c: f32| ((c + shade) * 255.0).round() / 255.0));
            map.push(id);
        }
    }
    PanopticSample {
        height: size,
        width: size,
        image,
        segment_map: map,
        segments: vec![
            Segment {
                id: 1,
                class_id: 1,
                is_thing: true,
            },
            Segment {
                id: 2,
                class_id: 2,
                is_thing: false,
            },
        ],
    }
}

/// Gradient check of the float64 tiny model at step 1, where every
/// parameter is trainable, and at step 2, where the base is frozen.
pub fn gradient_checks() -> Result<[GradCheck; 2], String> {
    let e = |e: pcl_core::Error| e.to_string();
    let w = MatchWeights::default();
    let p1 = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).map_err(e)?;
    let s1: ModelState<f64> = init_model(&tiny_cfg(), &p1, 11).map_err(e)?;
    let sample = two_region_sample(16);
    let targets = mask_targets(&sample, [4, 4], &[1, 2], 0).map_err(e)?;
    let first = grad_check(&s1, &image_tensor(&sample), &targets, 1, 1e-5, &w).map_err(e)?;

    let p2 = build_protocol(&catalog(4), 2, 2, ProtocolMode::Overlap, None).map_err(e)?;
    let mut s2: ModelState<f64> = init_model(&tiny_cfg(), &p2, 11).map_err(e)?;
    add_step(&mut s2, p2.step_classes(2).map_err(e)?, 12).map_err(e)?;
    let mut later = two_region_sample(16);
    later.segments[0].class_id = 3;
    later.segments[1].class_id = 4;
    let targets = mask_targets(&later, [4, 4], &[3, 4], 0).map_err(e)?;
    let second = grad_check(&s2, &image_tensor(&later), &targets, 2, 1e-5, &w).map_err(e)?;
    for (r, s) in [(&first, &s1), (&second, &s2)] {
        if r.checked != s.count_trainable() {
            return Err(format!("checked {} of {} trainable scalars", r.checked, s.count_trainable()));
        }
    }
    Ok([first, second])
}

/// Writes `n` generated samples as COCO panoptic files and as a binary
/// cache and requires both to read back unchanged.
pub fn coco_round_trip(n: usize) -> Result<(), String> {
    let e = |e: pcl_core::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SceneGenConfig::default();
    let samples = generate_dataset(&cfg, n).map_err(e)?;
    let ann = dir.path().join("panoptic.json");
    let images = dir.path().join("images");
    write_coco_panoptic(&ann, &images, &cfg.catalog(), &samples).map_err(e)?;
    let (catalog, back) = read_coco_panoptic(&ann, &images).map_err(e)?;
    if catalog != cfg.catalog() || back != samples {
        return Err("COCO panoptic files read back differently".into());
    }
    let cache = dir.path().join("cache");
    write_cache(&cache, &cfg.catalog(), &samples, cfg.seed, "hash").map_err(e)?;
    let (manifest, cached) = read_cache(&cache).map_err(e)?;
    if manifest.config_hash != "hash" || cached != samples {
        return Err("binary cache read back differently".into());
    }
    Ok(())
}

/// Encodes `n` random 24-bit segment ids as colors; every id decodes back
/// and distinct ids never share a color. Returns the distinct ids seen.
pub fn codec_bijective(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for _ in 0..n {
        let id = rng.random_range(0..1u32 << 24);
        let rgb = id_to_rgb(id).map_err(|e| e.to_string())?;
        if rgb_to_id(rgb) != id {
            return Err(format!("id {id} decodes to {}", rgb_to_id(rgb)));
        }
        if ids.insert(id) && !colors.insert(rgb) {
            return Err(format!("two ids share color {rgb:?}"));
        }
    }
    Ok(ids.len())
}

/// Hungarian totals against brute force on `instances` random integer
/// cost matrices of up to 7 × 7.
pub fn hungarian_matches_brute_force(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost = random_matrix(&mut rng, n, m);
        let a = hungarian(&cost);
        if a.pairs.len() != n.min(m) || cost.total(&a) != brute_force(&cost) {
            return Err(format!(
                "instance {i} ({n}x{m}): {} pairs, total {} vs brute force {}",
                a.pairs.len(),
                cost.total(&a),
                brute_force(&cost)
            ));
        }
    }
    Ok(())
}
