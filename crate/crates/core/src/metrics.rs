//! Evaluation metrics: per-part IoU and Chamfer Distance, class/instance
//! aggregation, visible-surface masking for segmentation scoring, instance
//! unions for object completion, and detection-style mAP@25.
//!
//! Conventions pinned here (and reported alongside results):
//! - Chamfer Distance averages the two directional means (halved sum) over
//!   voxel centers normalized to the unit box.
//! - If exactly one of the two point sets is empty, CD is `sqrt(3)` — the
//!   unit-box diameter. Both empty → 0. IoU is 1 when both masks are empty
//!   and 0 when exactly one is.
//! - Detection confidence ties in mAP break by input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Taxonomy;
use crate::voxelgrid::{GridSemantics, OccupancyGrid};

/// Mask-IoU threshold for a detection to count as a true positive.
pub const MAP_IOU_THRESHOLD: f64 = 0.25;

/// Chamfer penalty when exactly one mask is empty: unit-box diameter.
pub const EMPTY_SET_CHAMFER: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(usize, usize),
}

// ---------------------------------------------------------------------------
// Per-part scores
// ---------------------------------------------------------------------------

/// Evaluate both grids as hard masks (strictly above `threshold`) and return
/// intersection-over-union. Both empty → 1, exactly one empty → 0.
pub fn part_iou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    threshold: f32,
) -> Result<f64, MetricsError> {
    if pred.resolution() != gt.resolution() {
        return Err(MetricsError::ResolutionMismatch(
            pred.resolution(),
            gt.resolution(),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let p = p > threshold;
        let g = g > threshold;
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Symmetric Chamfer Distance between the occupied voxel centers of two
/// grids, with centers normalized to the unit box: half the sum of the two
/// directional mean nearest-neighbor distances.
///
/// Nearest-neighbor distances come from an exact Euclidean distance
/// transform, so this matches brute-force pairwise search exactly (centers
/// share the same half-voxel offset, which cancels in every difference).
pub fn chamfer(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    threshold: f32,
) -> Result<f64, MetricsError> {
    if pred.resolution() != gt.resolution() {
        return Err(MetricsError::ResolutionMismatch(
            pred.resolution(),
            gt.resolution(),
        ));
    }
    let occupied = |g: &OccupancyGrid| -> Vec<usize> {
        g.values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, _)| i)
            .collect()
    };
    let p_occ = occupied(pred);
    let g_occ = occupied(gt);
    match (p_occ.is_empty(), g_occ.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(EMPTY_SET_CHAMFER),
        (false, false) => {}
    }
    let r = pred.resolution() as f64;
    let dist_to_gt = squared_distance_field(gt, threshold);
    let dist_to_pred = squared_distance_field(pred, threshold);
    let forward: f64 = p_occ.iter().map(|&i| dist_to_gt[i].sqrt()).sum::<f64>()
        / p_occ.len() as f64;
    let backward: f64 = g_occ.iter().map(|&i| dist_to_pred[i].sqrt()).sum::<f64>()
        / g_occ.len() as f64;
    Ok(0.5 * (forward + backward) / r)
}

/// Exact squared Euclidean distance (in voxel-index units) from every cell to
/// the nearest cell with value strictly above `threshold`. Cells in a grid
/// with no occupied cells get `f64::INFINITY`.
fn squared_distance_field(grid: &OccupancyGrid, threshold: f32) -> Vec<f64> {
    let r = grid.resolution();
    let mut field: Vec<f64> = grid
        .values()
        .iter()
        .map(|&v| if v > threshold { 0.0 } else { f64::INFINITY })
        .collect();
    // Separable 1D transforms along z, then y, then x.
    let mut line = vec![0.0f64; r];
    let mut out = vec![0.0f64; r];
    let mut verts = vec![0usize; r];
    let mut bounds = vec![0.0f64; r + 1];
    let mut run = |field: &mut [f64], base: usize, stride: usize| {
        for (i, slot) in line.iter_mut().enumerate() {
            *slot = field[base + i * stride];
        }
        dt_1d(&line, &mut out, &mut verts, &mut bounds);
        for (i, &d) in out.iter().enumerate() {
            field[base + i * stride] = d;
        }
    };
    for x in 0..r {
        for y in 0..r {
            run(&mut field, (x * r + y) * r, 1);
        }
    }
    for x in 0..r {
        for z in 0..r {
            run(&mut field, x * r * r + z, r);
        }
    }
    for y in 0..r {
        for z in 0..r {
            run(&mut field, y * r + z, r * r);
        }
    }
    field
}

/// One-dimensional squared distance transform: lower envelope of the
/// parabolas `f[i] + (q - i)^2`, skipping infinite sources so a fully empty
/// line stays infinite.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut seeded = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !seeded {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            seeded = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !seeded {
        d[..n].fill(f64::INFINITY);
        return;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        d[q] = diff * diff + f[p];
    }
}

/// Restricts a predicted mask to the voxels visible in the input scan
/// (element-wise AND of the two hard masks). Used by the segmentation
/// protocol, which only scores predictions overlapping observed geometry.
pub fn mask_to_visible(
    pred: &OccupancyGrid,
    scan: &OccupancyGrid,
    threshold: f32,
) -> OccupancyGrid {
    assert_eq!(
        pred.resolution(),
        scan.resolution(),
        "mask_to_visible requires equal resolutions"
    );
    let values: Vec<f32> = pred
        .values()
        .iter()
        .zip(scan.values())
        .map(|(&p, &s)| ((p > threshold) && (s > threshold)) as u8 as f32)
        .collect();
    OccupancyGrid::from_values(pred.resolution(), GridSemantics::Binary, values)
        .expect("0/1 values are valid")
}

/// Element-wise max over all part masks, binarized: the whole-object
/// completion mask. Panics on an empty slice or mixed resolutions.
pub fn instance_union(parts: &[OccupancyGrid], threshold: f32) -> OccupancyGrid {
    let first = parts.first().expect("instance_union needs at least one part");
    let r = first.resolution();
    let mut max = vec![0.0f32; r * r * r];
    for part in parts {
        assert_eq!(part.resolution(), r, "instance_union requires equal resolutions");
        for (m, &v) in max.iter_mut().zip(part.values()) {
            *m = m.max(v);
        }
    }
    let values: Vec<f32> = max
        .into_iter()
        .map(|v| (v > threshold) as u8 as f32)
        .collect();
    OccupancyGrid::from_values(r, GridSemantics::Binary, values)
        .expect("0/1 values are valid")
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Score of one predicted/ground-truth part pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct PartScore {
    pub object: String,
    pub class: usize,
    pub part_type: usize,
    pub iou: f64,
    pub cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAggregate {
    pub part_type: usize,
    pub name: String,
    pub instances: usize,
    pub iou: f64,
    pub cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: usize,
    pub name: String,
    pub instances: usize,
    /// Mean over this class's per-type means (each type weighted equally).
    pub iou: f64,
    pub cd: f64,
    pub types: Vec<TypeAggregate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAverages {
    pub iou: f64,
    pub cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes with at least one scored instance, ascending class index.
    pub classes: Vec<ClassAggregate>,
    /// Unweighted mean over the per-class numbers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_average: Option<EvalAverages>,
    /// Mean over every scored part instance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_average: Option<EvalAverages>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_at_25: Option<MapReport>,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Aligned plain-text table: one column per scored class plus the class
    /// and instance averages, then a per-part breakdown.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        if self.is_empty() {
            s.push_str("no scored instances\n");
        } else {
            let mut header = vec!["metric".to_string()];
            header.extend(self.classes.iter().map(|c| c.name.clone()));
            header.push("class-avg".into());
            header.push("inst-avg".into());
            let avg = self.class_average.expect("non-empty report");
            let inst = self.instance_average.expect("non-empty report");
            let mut iou_row = vec!["IoU".to_string()];
            let mut cd_row = vec!["CD".to_string()];
            for c in &self.classes {
                iou_row.push(format!("{:.4}", c.iou));
                cd_row.push(format!("{:.4}", c.cd));
            }
            iou_row.push(format!("{:.4}", avg.iou));
            iou_row.push(format!("{:.4}", inst.iou));
            cd_row.push(format!("{:.4}", avg.cd));
            cd_row.push(format!("{:.4}", inst.cd));
            let rows = [&header[..], &iou_row[..], &cd_row[..]];
            let widths: Vec<usize> = (0..header.len())
                .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap())
                .collect();
            for row in rows {
                for (i, cell) in row.iter().enumerate() {
                    if i > 0 {
                        s.push_str("  ");
                    }
                    let _ = write!(s, "{cell:>width$}", width = widths[i]);
                }
                s.push('\n');
            }
            s.push('\n');
            s.push_str("per-part breakdown (n, IoU, CD):\n");
            for c in &self.classes {
                for t in &c.types {
                    let _ = writeln!(
                        s,
                        "  {}/{}  n={}  {:.4}  {:.4}",
                        c.name, t.name, t.instances, t.iou, t.cd
                    );
                }
            }
        }
        if let Some(map) = &self.map_at_25 {
            s.push('\n');
            s.push_str("instance completion mAP@25:\n");
            for c in &map.per_class {
                let _ = writeln!(
                    s,
                    "  {}  targets={}  predictions={}  AP={:.4}",
                    c.name, c.targets, c.predictions, c.ap
                );
            }
            let _ = writeln!(s, "  mean {:.4}", map.mean);
        }
        s
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }
}

/// Folds part scores into per-type means, per-class means of those, a class
/// average, and an instance average. Rows are sorted internally, so the
/// result is exactly permutation-invariant.
pub fn aggregate(scores: &[PartScore], taxonomy: &Taxonomy) -> EvalReport {
    for s in scores {
        assert!(
            (0.0..=1.0).contains(&s.iou) && s.cd >= 0.0 && s.cd.is_finite(),
            "invalid score for object {}: iou={} cd={}",
            s.object,
            s.iou,
            s.cd
        );
        assert!(s.class < taxonomy.class_count(), "unknown class {}", s.class);
        assert!(
            s.part_type < taxonomy.part_count(),
            "unknown part type {}",
            s.part_type
        );
    }
    let mut rows: Vec<&PartScore> = scores.iter().collect();
    rows.sort_by(|a, b| {
        (a.class, a.part_type, &a.object).cmp(&(b.class, b.part_type, &b.object))
    });

    // (class, part type) → accumulated (count, Σiou, Σcd)
    let mut cells: BTreeMap<(usize, usize), (usize, f64, f64)> = BTreeMap::new();
    let mut inst = (0usize, 0.0f64, 0.0f64);
    for s in &rows {
        let cell = cells.entry((s.class, s.part_type)).or_insert((0, 0.0, 0.0));
        cell.0 += 1;
        cell.1 += s.iou;
        cell.2 += s.cd;
        inst.0 += 1;
        inst.1 += s.iou;
        inst.2 += s.cd;
    }

    let mut classes: Vec<ClassAggregate> = Vec::new();
    let mut current: Option<ClassAggregate> = None;
    for (&(class, part_type), &(n, iou_sum, cd_sum)) in &cells {
        if current.as_ref().map(|c| c.class) != Some(class) {
            if let Some(done) = current.take() {
                classes.push(done);
            }
            current = Some(ClassAggregate {
                class,
                name: taxonomy.class_name(class).to_string(),
                instances: 0,
                iou: 0.0,
                cd: 0.0,
                types: Vec::new(),
            });
        }
        let c = current.as_mut().unwrap();
        c.instances += n;
        c.types.push(TypeAggregate {
            part_type,
            name: taxonomy.part_name(part_type).to_string(),
            instances: n,
            iou: iou_sum / n as f64,
            cd: cd_sum / n as f64,
        });
    }
    if let Some(done) = current.take() {
        classes.push(done);
    }
    for c in &mut classes {
        let k = c.types.len() as f64;
        c.iou = c.types.iter().map(|t| t.iou).sum::<f64>() / k;
        c.cd = c.types.iter().map(|t| t.cd).sum::<f64>() / k;
    }

    let (class_average, instance_average) = if classes.is_empty() {
        (None, None)
    } else {
        let k = classes.len() as f64;
        (
            Some(EvalAverages {
                iou: classes.iter().map(|c| c.iou).sum::<f64>() / k,
                cd: classes.iter().map(|c| c.cd).sum::<f64>() / k,
            }),
            Some(EvalAverages {
                iou: inst.1 / inst.0 as f64,
                cd: inst.2 / inst.0 as f64,
            }),
        )
    };
    EvalReport {
        classes,
        class_average,
        instance_average,
        map_at_25: None,
    }
}

// ---------------------------------------------------------------------------
// Detection-style instance completion (mAP@25)
// ---------------------------------------------------------------------------

/// One whole-object completion prediction.
#[derive(Debug, Clone)]
pub struct DetectionPrediction {
    pub class: usize,
    pub mask: OccupancyGrid,
    pub confidence: f64,
}

/// One ground-truth object.
#[derive(Debug, Clone)]
pub struct DetectionTarget {
    pub class: usize,
    pub mask: OccupancyGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    pub targets: usize,
    pub predictions: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Classes with at least one target, ascending class index.
    pub per_class: Vec<ClassAp>,
    pub mean: f64,
}

/// Average precision at mask-IoU 0.25 per class, and the mean over classes
/// with at least one target. Predictions are consumed in descending
/// confidence order and greedily matched to the best still-unmatched target.
pub fn map_at_25(
    predictions: &[DetectionPrediction],
    targets: &[DetectionTarget],
    taxonomy: &Taxonomy,
) -> MapReport {
    for p in predictions {
        assert!(p.confidence.is_finite(), "non-finite confidence");
    }
    let mut per_class = Vec::new();
    for class in 0..taxonomy.class_count() {
        let class_targets: Vec<&DetectionTarget> =
            targets.iter().filter(|t| t.class == class).collect();
        if class_targets.is_empty() {
            continue;
        }
        let mut preds: Vec<(usize, &DetectionPrediction)> = predictions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == class)
            .collect();
        preds.sort_by(|(ia, a), (ib, b)| {
            b.confidence.total_cmp(&a.confidence).then(ia.cmp(ib))
        });

        let mut matched = vec![false; class_targets.len()];
        let mut tp = 0usize;
        // Precision/recall after each prediction, in rank order.
        let mut precision = Vec::with_capacity(preds.len());
        let mut recall = Vec::with_capacity(preds.len());
        for (rank, (_, p)) in preds.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in class_targets.iter().enumerate() {
                if matched[ti] {
                    continue;
                }
                let iou = part_iou(&p.mask, &t.mask, 0.5).expect("equal resolutions");
                if iou >= MAP_IOU_THRESHOLD
                    && best.map_or(true, |(_, b)| iou > b)
                {
                    best = Some((ti, iou));
                }
            }
            if let Some((ti, _)) = best {
                matched[ti] = true;
                tp += 1;
            }
            precision.push(tp as f64 / (rank + 1) as f64);
            recall.push(tp as f64 / class_targets.len() as f64);
        }

        // All-point interpolation: precision at recall r is the max precision
        // achieved at any recall ≥ r.
        let mut running_max = 0.0f64;
        let mut interp = vec![0.0f64; precision.len()];
        for i in (0..precision.len()).rev() {
            running_max = running_max.max(precision[i]);
            interp[i] = running_max;
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..recall.len() {
            ap += (recall[i] - prev_recall) * interp[i];
            prev_recall = recall[i];
        }
        per_class.push(ClassAp {
            class,
            name: taxonomy.class_name(class).to_string(),
            targets: class_targets.len(),
            predictions: preds.len(),
            ap,
        });
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelgrid::occupied_centers;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(r: usize, cells: &[(usize, usize, usize)]) -> OccupancyGrid {
        let mut g = OccupancyGrid::zeros_binary(r);
        for &(x, y, z) in cells {
            g.set(x, y, z, 1.0);
        }
        g
    }

    fn random_mask(r: usize, max_cells: usize, rng: &mut impl Rng) -> OccupancyGrid {
        let mut g = OccupancyGrid::zeros_binary(r);
        let n = rng.gen_range(0..=max_cells);
        for _ in 0..n {
            let x = rng.gen_range(0..r);
            let y = rng.gen_range(0..r);
            let z = rng.gen_range(0..r);
            g.set(x, y, z, 1.0);
        }
        g
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = grid_from(4, &[(0, 0, 0), (1, 1, 1)]);
        let b = grid_from(4, &[(2, 2, 2), (3, 3, 3)]);
        assert_eq!(part_iou(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(part_iou(&a, &b, 0.5).unwrap(), 0.0);
        // Two voxels each, one shared: |∩| = 1, |∪| = 3.
        let c = grid_from(4, &[(1, 1, 1), (2, 2, 2)]);
        assert!((part_iou(&a, &c, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_empty_conventions_and_mismatch() {
        let empty = OccupancyGrid::zeros_binary(4);
        let one = grid_from(4, &[(0, 0, 0)]);
        assert_eq!(part_iou(&empty, &empty, 0.5).unwrap(), 1.0);
        assert_eq!(part_iou(&one, &empty, 0.5).unwrap(), 0.0);
        assert_eq!(part_iou(&empty, &one, 0.5).unwrap(), 0.0);
        let other = OccupancyGrid::zeros_binary(8);
        assert!(part_iou(&one, &other, 0.5).is_err());
    }

    #[test]
    fn iou_symmetric_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_mask(6, 30, &mut rng);
            let b = random_mask(6, 30, &mut rng);
            assert_eq!(
                part_iou(&a, &b, 0.5).unwrap(),
                part_iou(&b, &a, 0.5).unwrap()
            );
        }
    }

    #[test]
    fn chamfer_identity_and_single_pair() {
        let a = grid_from(4, &[(1, 2, 3), (0, 0, 0)]);
        assert_eq!(chamfer(&a, &a, 0.5).unwrap(), 0.0);
        // R=2: centers (0.25,0.25,0.25) and (0.75,0.25,0.25) are 0.5 apart.
        let p = grid_from(2, &[(0, 0, 0)]);
        let g = grid_from(2, &[(1, 0, 0)]);
        assert!((chamfer(&p, &g, 0.5).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chamfer_empty_conventions() {
        let empty = OccupancyGrid::zeros_binary(4);
        let one = grid_from(4, &[(2, 1, 0)]);
        assert_eq!(chamfer(&empty, &empty, 0.5).unwrap(), 0.0);
        assert_eq!(chamfer(&one, &empty, 0.5).unwrap(), EMPTY_SET_CHAMFER);
        assert_eq!(chamfer(&empty, &one, 0.5).unwrap(), EMPTY_SET_CHAMFER);
        assert!((EMPTY_SET_CHAMFER - 3.0f64.sqrt()).abs() < 1e-15);
    }

    /// Brute-force O(n²) nearest-neighbor chamfer over occupied centers.
    fn brute_chamfer(pred: &OccupancyGrid, gt: &OccupancyGrid) -> f64 {
        let pc = occupied_centers(pred, 0.5);
        let gc = occupied_centers(gt, 0.5);
        let nn_mean = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
            from.iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            ((a[0] - b[0]).powi(2)
                                + (a[1] - b[1]).powi(2)
                                + (a[2] - b[2]).powi(2))
                            .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        0.5 * (nn_mean(&pc, &gc) + nn_mean(&gc, &pc))
    }

    #[test]
    fn chamfer_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut nontrivial = 0;
        for _ in 0..30 {
            let a = random_mask(8, 50, &mut rng);
            let b = random_mask(8, 50, &mut rng);
            if a.count_above(0.5) == 0 || b.count_above(0.5) == 0 {
                continue;
            }
            nontrivial += 1;
            let fast = chamfer(&a, &b, 0.5).unwrap();
            let brute = brute_chamfer(&a, &b);
            assert!(
                (fast - brute).abs() < 1e-9,
                "edt {fast} vs brute {brute}"
            );
            // Symmetry by construction of the halved sum.
            assert!((chamfer(&b, &a, 0.5).unwrap() - fast).abs() < 1e-15);
        }
        assert!(nontrivial > 20);
    }

    #[test]
    fn visible_masking_identity_annihilation_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = random_mask(6, 60, &mut rng);
        let mut full = OccupancyGrid::zeros_binary(6);
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    full.set(x, y, z, 1.0);
                }
            }
        }
        assert!(mask_to_visible(&pred, &full, 0.5).bit_eq(&pred.binarize(0.5)));
        let empty = OccupancyGrid::zeros_binary(6);
        assert_eq!(mask_to_visible(&pred, &empty, 0.5).count_above(0.5), 0);
        for _ in 0..10 {
            let p = random_mask(6, 40, &mut rng);
            let s = random_mask(6, 40, &mut rng);
            let vis = mask_to_visible(&p, &s, 0.5);
            let np = p.count_above(0.5);
            let ns = s.count_above(0.5);
            assert!(vis.count_above(0.5) <= np.min(ns));
            // Subset of both inputs, element-wise.
            for ((&v, &pv), &sv) in vis.values().iter().zip(p.values()).zip(s.values()) {
                assert!(v <= pv && v <= sv);
            }
        }
    }

    #[test]
    fn union_singleton_disjoint_and_oracle() {
        let a = grid_from(5, &[(0, 0, 0), (1, 0, 0), (2, 0, 0)]);
        let b = grid_from(5, &[(0, 4, 4), (1, 4, 4), (2, 4, 4), (3, 4, 4)]);
        assert!(instance_union(&[a.clone()], 0.5).bit_eq(&a.binarize(0.5)));
        assert_eq!(instance_union(&[a.clone(), b.clone()], 0.5).count_above(0.5), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let parts: Vec<OccupancyGrid> =
            (0..4).map(|_| random_mask(5, 30, &mut rng)).collect();
        let union = instance_union(&parts, 0.5);
        for i in 0..125 {
            let any = parts.iter().any(|p| p.values()[i] > 0.5);
            assert_eq!(union.values()[i] > 0.5, any);
        }
    }

    fn score(object: &str, class: usize, part_type: usize, iou: f64) -> PartScore {
        PartScore {
            object: object.into(),
            class,
            part_type,
            iou,
            cd: 0.0,
        }
    }

    #[test]
    fn aggregate_single_group_mean() {
        let tax = Taxonomy::builtin();
        let scores = vec![score("a", 0, 0, 0.2), score("b", 0, 0, 0.4)];
        let report = aggregate(&scores, &tax);
        let avg = report.class_average.unwrap();
        let inst = report.instance_average.unwrap();
        assert!((avg.iou - 0.3).abs() < 1e-15);
        assert!((inst.iou - 0.3).abs() < 1e-15);
        assert_eq!(report.classes.len(), 1);
        assert_eq!(report.classes[0].instances, 2);
    }

    #[test]
    fn aggregate_class_vs_instance_weighting() {
        let tax = Taxonomy::builtin();
        // Class 0 has one instance at 0.1; class 1 has three at 0.5.
        let scores = vec![
            score("a", 0, 0, 0.1),
            score("b", 1, 10, 0.5),
            score("c", 1, 10, 0.5),
            score("d", 1, 10, 0.5),
        ];
        let report = aggregate(&scores, &tax);
        let avg = report.class_average.unwrap();
        let inst = report.instance_average.unwrap();
        assert!((avg.iou - 0.3).abs() < 1e-15);
        assert!((inst.iou - (0.1 + 3.0 * 0.5) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_type_means_feed_class_mean() {
        let tax = Taxonomy::builtin();
        // One class, two types: means 0.3 and 0.8 → class mean 0.55, but
        // instance mean over the three raw rows.
        let scores = vec![
            score("a", 0, 0, 0.2),
            score("b", 0, 0, 0.4),
            score("c", 0, 1, 0.8),
        ];
        let report = aggregate(&scores, &tax);
        assert!((report.classes[0].iou - 0.55).abs() < 1e-15);
        assert!(
            (report.instance_average.unwrap().iou - (0.2 + 0.4 + 0.8) / 3.0).abs() < 1e-15
        );
    }

    #[test]
    fn aggregate_empty_and_permutation_invariant() {
        let tax = Taxonomy::builtin();
        let report = aggregate(&[], &tax);
        assert!(report.is_empty());
        assert!(report.class_average.is_none());
        assert!(report.instance_average.is_none());
        assert!(!report.render_text().contains("NaN"));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scores: Vec<PartScore> = (0..40)
            .map(|i| PartScore {
                object: format!("obj{i}"),
                class: rng.gen_range(0..3),
                part_type: rng.gen_range(0..4),
                iou: rng.gen_range(0.0..1.0),
                cd: rng.gen_range(0.0..1.0),
            })
            .collect();
        let before = aggregate(&scores, &tax);
        scores.shuffle(&mut rng);
        let after = aggregate(&scores, &tax);
        assert_eq!(before, after);
    }

    #[test]
    fn report_text_and_toml_roundtrip() {
        let tax = Taxonomy::builtin();
        let scores = vec![score("a", 0, 0, 0.25), score("b", 1, 10, 0.75)];
        let report = aggregate(&scores, &tax);
        let text = report.render_text();
        assert!(text.contains("chair"));
        assert!(text.contains("class-avg"));
        let toml_str = report.to_toml_string();
        let parsed: EvalReport = toml::from_str(&toml_str).unwrap();
        assert_eq!(parsed, report);
    }

    fn blob(r: usize, x0: usize, n: usize) -> OccupancyGrid {
        let mut g = OccupancyGrid::zeros_binary(r);
        for i in 0..n {
            g.set(x0 + i, 0, 0, 1.0);
        }
        g
    }

    #[test]
    fn map_perfect_detector_scores_one() {
        let tax = Taxonomy::builtin();
        let targets = vec![
            DetectionTarget { class: 0, mask: blob(8, 0, 3) },
            DetectionTarget { class: 1, mask: blob(8, 4, 3) },
        ];
        let preds = vec![
            DetectionPrediction { class: 0, mask: blob(8, 0, 3), confidence: 1.0 },
            DetectionPrediction { class: 1, mask: blob(8, 4, 3), confidence: 1.0 },
        ];
        let report = map_at_25(&preds, &targets, &tax);
        assert_eq!(report.per_class.len(), 2);
        for c in &report.per_class {
            assert_eq!(c.ap, 1.0);
        }
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn map_no_predictions_scores_zero() {
        let tax = Taxonomy::builtin();
        let targets = vec![DetectionTarget { class: 2, mask: blob(8, 0, 4) }];
        let report = map_at_25(&[], &targets, &tax);
        assert_eq!(report.per_class.len(), 1);
        assert_eq!(report.per_class[0].ap, 0.0);
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn map_hand_computed_pr_curve() {
        let tax = Taxonomy::builtin();
        // Two targets; three predictions ranked TP, FP, TP:
        //   after #1: P=1,   R=1/2
        //   after #2: P=1/2, R=1/2
        //   after #3: P=2/3, R=1
        // Interpolated precision: 1, 2/3, 2/3 → AP = 0.5·1 + 0.5·(2/3) = 5/6.
        let targets = vec![
            DetectionTarget { class: 0, mask: blob(8, 0, 2) },
            DetectionTarget { class: 0, mask: blob(8, 5, 2) },
        ];
        let preds = vec![
            DetectionPrediction { class: 0, mask: blob(8, 0, 2), confidence: 0.9 },
            DetectionPrediction { class: 0, mask: blob(8, 3, 1), confidence: 0.8 },
            DetectionPrediction { class: 0, mask: blob(8, 5, 2), confidence: 0.7 },
        ];
        let report = map_at_25(&preds, &targets, &tax);
        assert!((report.per_class[0].ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_invariant_under_monotone_confidence_transform() {
        let tax = Taxonomy::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let targets: Vec<DetectionTarget> = (0..6)
            .map(|i| DetectionTarget {
                class: i % 3,
                mask: random_mask(6, 40, &mut rng),
            })
            .filter(|t| t.mask.count_above(0.5) > 0)
            .collect();
        let preds: Vec<DetectionPrediction> = (0..10)
            .map(|i| DetectionPrediction {
                class: i % 3,
                mask: random_mask(6, 40, &mut rng),
                confidence: rng.gen_range(0.0..1.0),
            })
            .collect();
        let base = map_at_25(&preds, &targets, &tax);
        let transformed: Vec<DetectionPrediction> = preds
            .iter()
            .map(|p| DetectionPrediction {
                class: p.class,
                mask: p.mask.clone(),
                confidence: (p.confidence * 3.0 + 2.0).atan(),
            })
            .collect();
        let same = map_at_25(&transformed, &targets, &tax);
        assert_eq!(base.mean, same.mean);
        assert_eq!(base.per_class, same.per_class);
    }

    #[test]
    fn distance_field_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let g = random_mask(6, 10, &mut rng);
            if g.count_above(0.5) == 0 {
                continue;
            }
            let field = squared_distance_field(&g, 0.5);
            let occ: Vec<(usize, usize, usize)> = (0..6usize)
                .flat_map(|x| (0..6usize).flat_map(move |y| (0..6usize).map(move |z| (x, y, z))))
                .filter(|&(x, y, z)| g.get(x, y, z) > 0.5)
                .collect();
            for x in 0..6usize {
                for y in 0..6usize {
                    for z in 0..6usize {
                        let brute = occ
                            .iter()
                            .map(|&(a, b, c)| {
                                let d = |u: usize, v: usize| {
                                    let diff = u as f64 - v as f64;
                                    diff * diff
                                };
                                d(x, a) + d(y, b) + d(z, c)
                            })
                            .fold(f64::INFINITY, f64::min);
                        assert_eq!(field[g.index(x, y, z)], brute);
                    }
                }
            }
        }
    }
}
