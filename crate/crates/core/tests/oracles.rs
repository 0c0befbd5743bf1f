//! Exhaustive and brute-force reference implementations checked against the
//! production NMS and mAP code on random instances.
//!
//! Boxes use integer corners so every IoU comparison in the oracles can be
//! done exactly in integer arithmetic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdet_core::eval::{map50, Detection, DetectionResult, GroundTruth};
use refdet_core::geometry::nms;
use refdet_core::BBox;

type IBox = [i64; 4];

fn to_bbox(b: &IBox) -> BBox {
    BBox::new(b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32)
}

fn area(b: &IBox) -> i64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// `(intersection, union)` as exact integers.
fn overlap(a: &IBox, b: &IBox) -> (i64, i64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

fn random_box(rng: &mut ChaCha8Rng, extent: i64) -> IBox {
    let x1 = rng.random_range(0..extent - 1);
    let y1 = rng.random_range(0..extent - 1);
    [
        x1,
        y1,
        rng.random_range(x1 + 1..=extent),
        rng.random_range(y1 + 1..=extent),
    ]
}

/// Enumerates every subset and keeps those that are a fixed point of the
/// greedy rule: a box is kept iff no kept box ranked above it overlaps it by
/// more than `quarters / 4`. Exactly one subset qualifies.
fn nms_oracle(boxes: &[IBox], scores: &[f32], quarters: i64) -> Vec<usize> {
    let n = boxes.len();
    let ranks_above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let suppresses = |i: usize, j: usize| {
        let (inter, union) = overlap(&boxes[i], &boxes[j]);
        4 * inter > quarters * union
    };
    let mut solutions = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && kept(j) && ranks_above(i, j) && suppresses(i, j));
            kept(i) == !blocked
        });
        if consistent {
            solutions.push(mask);
        }
    }
    assert_eq!(solutions.len(), 1, "greedy fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| solutions[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| {
        if ranks_above(b, a) {
            core::cmp::Ordering::Less
        } else {
            core::cmp::Ordering::Greater
        }
    });
    kept
}

#[test]
fn nms_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let levels = [0.1f32, 0.3, 0.5, 0.7, 0.9];
    for case in 0..200 {
        let n = rng.random_range(0..=10);
        let extent = rng.random_range(6..24);
        let boxes: Vec<IBox> = (0..n).map(|_| random_box(&mut rng, extent)).collect();
        // few distinct score levels, so ties are common
        let scores: Vec<f32> = (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect();
        let quarters = rng.random_range(1..=3);
        let fboxes: Vec<BBox> = boxes.iter().map(to_bbox).collect();
        let got = nms(&fboxes, &scores, quarters as f32 / 4.0).unwrap();
        assert_eq!(
            got,
            nms_oracle(&boxes, &scores, quarters),
            "case {case}: {boxes:?} {scores:?}"
        );
    }
}

struct Scene {
    gts: Vec<Vec<(IBox, usize)>>,
    dets: Vec<Vec<(IBox, usize, f32)>>,
}

fn random_scene(rng: &mut ChaCha8Rng, classes: usize) -> Scene {
    let images = rng.random_range(1..=4);
    let mut gts = Vec::with_capacity(images);
    let mut dets: Vec<Vec<(IBox, usize)>> = Vec::with_capacity(images);
    for _ in 0..images {
        let g: Vec<(IBox, usize)> = (0..rng.random_range(0..=3))
            .map(|_| (random_box(rng, 30), rng.random_range(1..=classes)))
            .collect();
        let mut d = Vec::new();
        for &(b, c) in &g {
            // zero to two jittered copies, sometimes with the wrong class
            for _ in 0..rng.random_range(0..=2) {
                let j = |v: i64, rng: &mut ChaCha8Rng| v + rng.random_range(-2..=2);
                let mut nb = [j(b[0], rng), j(b[1], rng), j(b[2], rng), j(b[3], rng)];
                nb[2] = nb[2].max(nb[0] + 1);
                nb[3] = nb[3].max(nb[1] + 1);
                let cls = if rng.random_bool(0.8) {
                    c
                } else {
                    rng.random_range(1..=classes)
                };
                d.push((nb, cls));
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            d.push((random_box(rng, 30), rng.random_range(1..=classes)));
        }
        gts.push(g);
        dets.push(d);
    }
    if gts.iter().all(Vec::is_empty) {
        gts[0].push((random_box(rng, 30), 1));
    }
    // distinct scores so the ranking is unambiguous
    let total: usize = dets.iter().map(Vec::len).sum();
    let mut scores: Vec<f32> = (0..total).map(|i| (i + 1) as f32 / (total + 1) as f32).collect();
    scores.shuffle(rng);
    let mut it = scores.into_iter();
    let dets = dets
        .into_iter()
        .map(|d| d.into_iter().map(|(b, c)| (b, c, it.next().unwrap())).collect())
        .collect();
    Scene { gts, dets }
}

/// Enumerates the ranked detections of one class, marks each true or false
/// positive, and integrates the precision envelope one recall step (1/G) at a
/// time: `AP = sum_k max{precision_j : recall_j >= k/G} / G`.
fn brute_force_ap(scene: &Scene, class: usize) -> Option<f64> {
    let num_gt = scene.gts.iter().flatten().filter(|g| g.1 == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f32, usize, IBox)> = Vec::new();
    for (img, d) in scene.dets.iter().enumerate() {
        ranked.extend(d.iter().filter(|x| x.1 == class).map(|x| (x.2, img, x.0)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = scene.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, (_, img, b)) in ranked.iter().enumerate() {
        // best unmatched same-class ground truth with IoU >= 1/2
        let mut best: Option<(usize, i64, i64)> = None;
        for (j, (g, c)) in scene.gts[*img].iter().enumerate() {
            if *c != class || used[*img][j] {
                continue;
            }
            let (inter, union) = overlap(b, g);
            if 2 * inter < union {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter * bu > bi * union,
            };
            if better {
                best = Some((j, inter, union));
            }
        }
        if let Some((j, _, _)) = best {
            used[*img][j] = true;
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    for k in 1..=num_gt {
        let level = k as f64 / num_gt as f64;
        let envelope = points
            .iter()
            .filter(|(r, _)| *r >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += envelope / num_gt as f64;
    }
    Some(ap)
}

#[test]
fn map_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let classes = 3;
    for case in 0..20 {
        let scene = random_scene(&mut rng, classes);
        let gts: Vec<GroundTruth> = scene
            .gts
            .iter()
            .map(|g| GroundTruth {
                boxes: g.iter().map(|x| to_bbox(&x.0)).collect(),
                labels: g.iter().map(|x| x.1).collect(),
            })
            .collect();
        let dets: Vec<DetectionResult> = scene
            .dets
            .iter()
            .map(|d| DetectionResult {
                detections: d
                    .iter()
                    .map(|x| Detection {
                        bbox: to_bbox(&x.0),
                        category: x.1,
                        score: x.2,
                    })
                    .collect(),
            })
            .collect();
        let report = map50(&dets, &gts, classes).unwrap();
        let oracle: Vec<Option<f64>> = (1..=classes).map(|c| brute_force_ap(&scene, c)).collect();
        for (c, (got, want)) in report.per_category.iter().zip(&oracle).enumerate() {
            match (got.ap, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9, "case {case} class {}: {g} vs {w}", c + 1),
                (g, w) => assert_eq!(g, *w, "case {case} class {}", c + 1),
            }
        }
        let valid: Vec<f64> = oracle.iter().flatten().copied().collect();
        let want = valid.iter().sum::<f64>() / valid.len() as f64;
        assert!(
            (report.map - want).abs() < 1e-9,
            "case {case}: mAP {} vs {want}",
            report.map
        );
    }
}

#[test]
fn iou_matches_pixel_count_on_integer_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (a, b) = (random_box(&mut rng, 16), random_box(&mut rng, 16));
        let inside = |bx: &IBox, x: i64, y: i64| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
        let (mut inter, mut union) = (0, 0);
        for y in 0..16 {
            for x in 0..16 {
                let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
                inter += (ia && ib) as i64;
                union += (ia || ib) as i64;
            }
        }
        let want = inter as f32 / union as f32;
        let got = refdet_core::geometry::iou(&to_bbox(&a), &to_bbox(&b));
        assert!((got - want).abs() < 1e-6, "{a:?} {b:?}: {got} vs {want}");
    }
}
