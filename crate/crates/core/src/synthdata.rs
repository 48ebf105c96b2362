//! Procedural desk-scale dataset: complete objects assembled from solid
//! primitives per class template, simulated partial-scan corruption, and the
//! on-disk dataset manifest.
//!
//! Templates place axis-aligned solids in normalized `[0,1]` coordinates and
//! rasterize them by testing inverse-rotated voxel centers, so every rotation
//! bin yields an exact binary mask without resampling. The pullback matches
//! [`crate::voxelgrid::rotate_grid`], which keeps generated samples in the
//! same frame as rotated part priors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::taxonomy::{ClassSpec, PartInstance, PartTreeTarget, Taxonomy};
use crate::voxelgrid::{AngleBin, GridError, GridSemantics, OccupancyGrid, N_ANGLE_BINS};

/// Template re-rolls before a sample with an off-template adjacency or a
/// fully occluded part is accepted as-is.
const SHAPE_REROLLS: usize = 10;
/// Corruption re-rolls before falling back to the least-destructive result.
const CORRUPT_REROLLS: usize = 10;

/// Everything a template places fits inside an xy-disk of this radius about
/// the grid center, so rotation never pushes geometry outside the grid.
const FIT_RADIUS: f64 = 0.48;

/// Smallest box side that still rasterizes non-empty at any placement and
/// bin: a 45-degree square footprint is guaranteed to cover a voxel center
/// once its side exceeds sqrt(2) voxels.
fn min_thickness(r: usize) -> f64 {
    1.45 / r as f64
}

/// Vertical gap that keeps two parts non-adjacent under 1-voxel dilation.
/// Rotation is about z, so vertical separations are bin-independent.
fn clear_z(r: usize) -> f64 {
    4.0 / r as f64
}

/// Horizontal gap that keeps two parts non-adjacent at any rotation bin:
/// gap/sqrt(2) voxel layers survive the worst-case 45-degree projection.
fn clear_xy(r: usize) -> f64 {
    5.0 / r as f64
}

// ---------------------------------------------------------------------------
// Solid primitives and exact-rotation rasterization

/// Axis-aligned solid in normalized coordinates. Cylinders and tubes are
/// centered on the grid's vertical axis, matching the rotation axis.
#[derive(Clone, Debug)]
enum Solid {
    Box { lo: [f64; 3], hi: [f64; 3] },
    Cylinder { radius: f64, z0: f64, z1: f64 },
    Tube { outer: f64, inner: f64, z0: f64, z1: f64 },
}

impl Solid {
    fn boxed(lo: [f64; 3], hi: [f64; 3]) -> Self {
        debug_assert!(lo.iter().zip(&hi).all(|(a, b)| a < b), "{lo:?} {hi:?}");
        Solid::Box { lo, hi }
    }

    /// Largest distance from the rotation axis reached in the xy plane.
    fn xy_radius(&self) -> f64 {
        match *self {
            Solid::Box { lo, hi } => {
                let dx = (lo[0] - 0.5).abs().max((hi[0] - 0.5).abs());
                let dy = (lo[1] - 0.5).abs().max((hi[1] - 0.5).abs());
                (dx * dx + dy * dy).sqrt()
            }
            Solid::Cylinder { radius, .. } => radius,
            Solid::Tube { outer, .. } => outer,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Solid::Box { lo, hi } => (0..3).all(|a| lo[a] <= p[a] && p[a] < hi[a]),
            Solid::Cylinder { radius, z0, z1 } => {
                let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
                z0 <= p[2] && p[2] < z1 && dx * dx + dy * dy <= radius * radius
            }
            Solid::Tube {
                outer,
                inner,
                z0,
                z1,
            } => {
                let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
                let d2 = dx * dx + dy * dy;
                z0 <= p[2] && p[2] < z1 && d2 <= outer * outer && d2 >= inner * inner
            }
        }
    }
}

/// Rasterizes a union of solids under a rotation bin. Each output voxel
/// center is pulled back through the inverse rotation — the same pullback
/// `rotate_grid` uses — so the object appears rotated by `+bin` while the
/// solids stay axis-aligned.
fn rasterize(solids: &[Solid], bin: AngleBin, r: usize) -> OccupancyGrid {
    let rf = r as f64;
    let (c, s) = bin.cos_sin();
    let mut grid = OccupancyGrid::zeros_binary(r);
    for x in 0..r {
        let ax = (x as f64 + 0.5) / rf - 0.5;
        for y in 0..r {
            let ay = (y as f64 + 0.5) / rf - 0.5;
            let px = ax * c + ay * s + 0.5;
            let py = -ax * s + ay * c + 0.5;
            for z in 0..r {
                let pz = (z as f64 + 0.5) / rf;
                if solids.iter().any(|sol| sol.contains([px, py, pz])) {
                    grid.set(x, y, z, 1.0);
                }
            }
        }
    }
    grid
}

// ---------------------------------------------------------------------------
// Class templates

struct PartDraft {
    part_type: usize,
    solids: Vec<Solid>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn part_type(taxonomy: &Taxonomy, name: &str) -> usize {
    taxonomy
        .part_index(name)
        .unwrap_or_else(|| panic!("taxonomy lacks part type {name}"))
}

/// Seat slab, backrest, 3-4 legs, optional pair of arms. The seat is at
/// least `clear_z` thick: it vertically separates legs (below) from the
/// backrest and arms (above), which the class forbids as adjacent.
fn chair_template(rng: &mut ChaCha8Rng, r: usize, tax: &Taxonomy) -> Vec<PartDraft> {
    let t = min_thickness(r);
    let hx = uniform(rng, 0.27, 0.31);
    let hy = uniform(rng, 0.27, 0.31);
    let zs = uniform(rng, 0.34, 0.42);
    let ts = uniform(rng, 0.08, 0.12).max(clear_z(r));
    let tb = uniform(rng, 0.08, 0.11).max(t);
    let zt = uniform(rng, 0.78, 0.92);
    let lw = uniform(rng, 0.07, 0.09).max(t);
    let four_legs = rng.gen::<f64>() < 0.7;
    let skipped_corner = rng.gen_range(0..4);
    let want_arms = rng.gen::<f64>() < 0.5;

    let mut drafts = vec![
        PartDraft {
            part_type: part_type(tax, "chair_seat"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, zs],
                [0.5 + hx, 0.5 + hy, zs + ts],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "chair_back"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, zs + ts],
                [0.5 - hx + tb, 0.5 + hy, zt],
            )],
        },
    ];
    let leg = part_type(tax, "chair_leg");
    for (corner, (sx, sy)) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0f64, 1.0f64)]
        .into_iter()
        .enumerate()
    {
        if !four_legs && corner == skipped_corner {
            continue;
        }
        let cx = 0.5 + sx * (hx - 0.015 - lw / 2.0);
        let cy = 0.5 + sy * (hy - 0.015 - lw / 2.0);
        drafts.push(PartDraft {
            part_type: leg,
            solids: vec![Solid::boxed(
                [cx - lw / 2.0, cy - lw / 2.0, 0.02],
                [cx + lw / 2.0, cy + lw / 2.0, zs],
            )],
        });
    }
    if want_arms {
        let aw = uniform(rng, 0.07, 0.09).max(t);
        let ah = uniform(rng, 0.10, 0.16);
        let alen = hx * uniform(rng, 1.1, 1.5);
        let arm = part_type(tax, "chair_arm");
        for sy in [-1.0, 1.0f64] {
            let (y0, y1) = if sy < 0.0 {
                (0.5 - hy, 0.5 - hy + aw)
            } else {
                (0.5 + hy - aw, 0.5 + hy)
            };
            drafts.push(PartDraft {
                part_type: arm,
                // Overlaps the backrest in x; the backrest's lower type
                // index wins those voxels, leaving a flush arm-back joint.
                solids: vec![Solid::boxed(
                    [0.5 - hx, y0, zs + ts],
                    [0.5 - hx + alen, y1, zs + ts + ah],
                )],
            });
        }
    }
    drafts
}

/// Full-extent top over either four corner posts or two pedestal slabs; the
/// pedestal style may carry a low shelf when it clears the top vertically.
fn table_template(rng: &mut ChaCha8Rng, r: usize, tax: &Taxonomy) -> Vec<PartDraft> {
    let t = min_thickness(r);
    let four_legs = rng.gen::<f64>() < 0.6;
    let (hx, hy) = if four_legs {
        (uniform(rng, 0.30, 0.38), uniform(rng, 0.27, 0.28))
    } else {
        (uniform(rng, 0.34, 0.40), uniform(rng, 0.22, 0.26))
    };
    let zs = uniform(rng, 0.50, 0.62);
    let tt = uniform(rng, 0.06, 0.09).max(t);
    let lw = uniform(rng, 0.07, 0.09).max(t);

    let mut drafts = vec![PartDraft {
        part_type: part_type(tax, "table_top"),
        solids: vec![Solid::boxed(
            [0.5 - hx, 0.5 - hy, zs],
            [0.5 + hx, 0.5 + hy, zs + tt],
        )],
    }];
    let leg = part_type(tax, "table_leg");
    if four_legs {
        for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0f64, 1.0f64)] {
            let cx = 0.5 + sx * (hx - 0.015 - lw / 2.0);
            let cy = 0.5 + sy * (hy - 0.015 - lw / 2.0);
            drafts.push(PartDraft {
                part_type: leg,
                solids: vec![Solid::boxed(
                    [cx - lw / 2.0, cy - lw / 2.0, 0.02],
                    [cx + lw / 2.0, cy + lw / 2.0, zs],
                )],
            });
        }
    } else {
        for sx in [-1.0, 1.0f64] {
            let x1 = 0.5 + sx * (hx - 0.015);
            let x0 = 0.5 + sx * (hx - 0.015 - lw);
            drafts.push(PartDraft {
                part_type: leg,
                solids: vec![Solid::boxed(
                    [x0.min(x1), 0.5 - hy + 0.03, 0.02],
                    [x0.max(x1), 0.5 + hy - 0.03, zs],
                )],
            });
        }
        let st = uniform(rng, 0.05, 0.07).max(t);
        let shz = uniform(rng, 0.16, 0.24);
        let want_shelf = rng.gen::<f64>() < 0.6;
        // Shelf-top adjacency is off-template, so the shelf must clear the
        // top vertically; skip it when the draw leaves too little room.
        if want_shelf && zs - (shz + st) >= clear_z(r) {
            let span = hx - 0.015 - lw;
            drafts.push(PartDraft {
                part_type: part_type(tax, "table_shelf"),
                solids: vec![Solid::boxed(
                    [0.5 - span - 0.02, 0.5 - hy + 0.05, shz],
                    [0.5 + span + 0.02, 0.5 + hy - 0.05, shz + st],
                )],
            });
        }
    }
    drafts
}

/// Carcass of side/top/bottom/back panels. Cabinets prefer a front door
/// (optionally with a handle); open carcasses take 1-3 shelves when the
/// interior height allows the mandatory shelf spacing.
fn storage_template(
    rng: &mut ChaCha8Rng,
    r: usize,
    tax: &Taxonomy,
    bookshelf: bool,
) -> Vec<PartDraft> {
    let t = min_thickness(r);
    let hx = uniform(rng, 0.30, 0.33);
    let hy = uniform(rng, 0.25, 0.27);
    let zb = 0.02;
    let zt = if bookshelf {
        uniform(rng, 0.90, 0.96)
    } else {
        uniform(rng, 0.82, 0.92)
    };
    let st = uniform(rng, 0.055, 0.07).max(t);
    let bkt = uniform(rng, 0.055, 0.07).max(t);
    let bt = uniform(rng, 0.055, 0.07).max(t);
    let tt = uniform(rng, 0.055, 0.07).max(t);

    let mut drafts = vec![
        PartDraft {
            // Spans the full x extent; the back's lower type index wins the
            // corner overlaps with both side panels.
            part_type: part_type(tax, "storage_back_panel"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, zb],
                [0.5 + hx, 0.5 - hy + bkt, zt],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "storage_side_panel"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, zb],
                [0.5 - hx + st, 0.5 + hy, zt],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "storage_side_panel"),
            solids: vec![Solid::boxed(
                [0.5 + hx - st, 0.5 - hy, zb],
                [0.5 + hx, 0.5 + hy, zt],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "storage_bottom_panel"),
            solids: vec![Solid::boxed(
                [0.5 - hx + st - 0.02, 0.5 - hy + bkt - 0.02, zb],
                [0.5 + hx - st + 0.02, 0.5 + hy, zb + bt],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "storage_top_panel"),
            solids: vec![Solid::boxed(
                [0.5 - hx + st - 0.02, 0.5 - hy + bkt - 0.02, zt - tt],
                [0.5 + hx - st + 0.02, 0.5 + hy, zt],
            )],
        },
    ];

    let want_door = !bookshelf && rng.gen::<f64>() < 0.6;
    let dz0 = zb + bt + clear_z(r);
    let dz1 = zt - tt - clear_z(r);
    if want_door && dz1 - dz0 >= t {
        let dt = uniform(rng, 0.055, 0.07).max(t);
        drafts.push(PartDraft {
            part_type: part_type(tax, "storage_door"),
            solids: vec![Solid::boxed(
                [0.5 - hx + st - 0.02, 0.5 + hy - dt, dz0],
                [0.5 + hx - st + 0.02, 0.5 + hy, dz1],
            )],
        });
        let hw = uniform(rng, 0.07, 0.08).max(t);
        let hh = uniform(rng, 0.05, 0.07).max(t);
        let want_handle = rng.gen::<f64>() < 0.6;
        let zm = (dz0 + dz1) / 2.0;
        if want_handle
            && (hx - st) - hw / 2.0 >= clear_xy(r)
            && (dz1 - dz0) / 2.0 - hh / 2.0 >= clear_z(r)
        {
            drafts.push(PartDraft {
                part_type: part_type(tax, "storage_handle"),
                solids: vec![Solid::boxed(
                    [0.5 - hw / 2.0, 0.5 + hy - 0.02, zm - hh / 2.0],
                    [0.5 + hw / 2.0, 0.5 + hy + 0.05, zm + hh / 2.0],
                )],
            });
        }
    } else {
        let shth = uniform(rng, 0.05, 0.06).max(t);
        let want = rng.gen_range(1..=3usize);
        let interior = (zt - tt) - (zb + bt);
        let fit = (interior / (clear_z(r) + shth)).floor() as isize - 1;
        let front = 0.5 + hy - 0.02;
        if fit >= 1 {
            let k = want.min(fit as usize);
            let spacing = interior / (k + 1) as f64;
            let shelf = part_type(tax, "storage_shelf");
            for i in 1..=k {
                let zc = zb + bt + spacing * i as f64;
                drafts.push(PartDraft {
                    part_type: shelf,
                    solids: vec![Solid::boxed(
                        [0.5 - hx + st - 0.02, 0.5 - hy + bkt - 0.02, zc - shth / 2.0],
                        [0.5 + hx - st + 0.02, front, zc + shth / 2.0],
                    )],
                });
            }
        }
    }
    drafts
}

/// Platform frame with mattress, floor-standing headboard, four legs, and an
/// optional footboard. The frame is at least `clear_z` thick so legs never
/// read as adjacent to the mattress.
fn bed_template(rng: &mut ChaCha8Rng, r: usize, tax: &Taxonomy) -> Vec<PartDraft> {
    let t = min_thickness(r);
    let hx = uniform(rng, 0.34, 0.38);
    let hy = uniform(rng, 0.27, 0.285);
    let zf = uniform(rng, 0.14, 0.18);
    let ft = uniform(rng, 0.10, 0.14).max(clear_z(r));
    let mt = uniform(rng, 0.10, 0.16);
    let ht = uniform(rng, 0.07, 0.09).max(t);
    let zh = uniform(rng, 0.60, 0.78);
    let lw = uniform(rng, 0.07, 0.09).max(t);
    let fbt = uniform(rng, 0.07, 0.09).max(t);
    let fb_rise = uniform(rng, 0.02, 0.06);
    let want_footboard = rng.gen::<f64>() < 0.5;

    let rear_inset = ht + 0.02;
    let front_inset_fb = fbt + 0.02;
    // Keep the rear/front leg rows out of dilation range of each other even
    // at 45 degrees; drop the footboard rather than violate that.
    let gap_with_fb = 2.0 * hx - (rear_inset + lw) - (front_inset_fb + lw);
    let footboard = want_footboard && gap_with_fb >= clear_xy(r);
    let front_inset = if footboard { front_inset_fb } else { 0.015 };

    let mut drafts = vec![
        PartDraft {
            part_type: part_type(tax, "bed_frame"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, zf],
                [0.5 + hx, 0.5 + hy, zf + ft],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "bed_mattress"),
            solids: vec![Solid::boxed(
                [0.5 - hx + 0.03, 0.5 - hy + 0.03, zf + ft],
                [0.5 + hx - 0.03, 0.5 + hy - 0.03, zf + ft + mt],
            )],
        },
        PartDraft {
            part_type: part_type(tax, "bed_headboard"),
            solids: vec![Solid::boxed(
                [0.5 - hx, 0.5 - hy, 0.02],
                [0.5 - hx + ht, 0.5 + hy, zh],
            )],
        },
    ];
    if footboard {
        drafts.push(PartDraft {
            part_type: part_type(tax, "bed_footboard"),
            solids: vec![Solid::boxed(
                [0.5 + hx - fbt, 0.5 - hy, 0.02],
                [0.5 + hx, 0.5 + hy, zf + ft + fb_rise],
            )],
        });
    }
    let leg = part_type(tax, "bed_leg");
    for (inset, sx) in [(rear_inset, -1.0), (front_inset, 1.0f64)] {
        for sy in [-1.0, 1.0f64] {
            let x0 = 0.5 + sx * (hx - inset - lw);
            let x1 = 0.5 + sx * (hx - inset);
            let cy = 0.5 + sy * (hy - 0.015 - lw / 2.0);
            drafts.push(PartDraft {
                part_type: leg,
                solids: vec![Solid::boxed(
                    [x0.min(x1), cy - lw / 2.0, 0.02],
                    [x0.max(x1), cy + lw / 2.0, zf],
                )],
            });
        }
    }
    drafts
}

/// Open cylinder body on a solid base with a thickened rim; a lid appears
/// only when the rim is tall enough to keep it clear of the body.
fn bin_template(rng: &mut ChaCha8Rng, r: usize, tax: &Taxonomy) -> Vec<PartDraft> {
    let t = min_thickness(r);
    let outer = uniform(rng, 0.17, 0.24);
    let wall = uniform(rng, 0.06, 0.08).max(t);
    let zb = uniform(rng, 0.08, 0.12);
    let zr = uniform(rng, 0.72, 0.84);
    let rh = uniform(rng, 0.06, 0.16).max(t);
    let lt = uniform(rng, 0.05, 0.08).max(t);
    let want_lid = rng.gen::<f64>() < 0.5;

    let mut drafts = vec![
        PartDraft {
            part_type: part_type(tax, "bin_body"),
            solids: vec![Solid::Tube {
                outer,
                inner: outer - wall,
                z0: zb,
                z1: zr,
            }],
        },
        PartDraft {
            part_type: part_type(tax, "bin_base"),
            solids: vec![Solid::Cylinder {
                radius: outer,
                z0: 0.02,
                z1: zb,
            }],
        },
        PartDraft {
            part_type: part_type(tax, "bin_rim"),
            solids: vec![Solid::Tube {
                outer: outer + 0.02,
                inner: outer - wall - 0.02,
                z0: zr,
                z1: zr + rh,
            }],
        },
    ];
    if want_lid && rh >= clear_z(r) {
        drafts.push(PartDraft {
            part_type: part_type(tax, "bin_lid"),
            solids: vec![Solid::Cylinder {
                radius: outer + 0.03,
                z0: zr + rh,
                z1: zr + rh + lt,
            }],
        });
    }
    drafts
}

fn template(class: usize, rng: &mut ChaCha8Rng, r: usize, tax: &Taxonomy) -> Vec<PartDraft> {
    match tax.class(class).name() {
        "chair" => chair_template(rng, r, tax),
        "table" => table_template(rng, r, tax),
        "cabinet" => storage_template(rng, r, tax, false),
        "bookshelf" => storage_template(rng, r, tax, true),
        "bed" => bed_template(rng, r, tax),
        "bin" => bin_template(rng, r, tax),
        other => panic!("no shape template for class {other}"),
    }
}

// ---------------------------------------------------------------------------
// Assembly: overlap resolution, dilation adjacency

/// 26-neighborhood dilation by one voxel.
fn dilate(mask: &[bool], r: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let idx = |x: usize, y: usize, z: usize| (x * r + y) * r + z;
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                for nx in x.saturating_sub(1)..=(x + 1).min(r - 1) {
                    for ny in y.saturating_sub(1)..=(y + 1).min(r - 1) {
                        for nz in z.saturating_sub(1)..=(z + 1).min(r - 1) {
                            out[idx(nx, ny, nz)] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rasterizes every draft, resolves overlaps (lowest part-type index wins,
/// then draft order), derives dilation adjacency, and reports whether every
/// draft kept at least one voxel.
fn assemble(
    drafts: &[PartDraft],
    bin: AngleBin,
    r: usize,
) -> (PartTreeTarget, OccupancyGrid, bool) {
    let n3 = r * r * r;
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by_key(|&i| (drafts[i].part_type, i));

    let mut claim = vec![usize::MAX; n3];
    let mut kept: Vec<(usize, Vec<bool>)> = Vec::new();
    for &i in &order {
        let raster = rasterize(&drafts[i].solids, bin, r);
        let mut mask = vec![false; n3];
        let mut any = false;
        for (vi, &v) in raster.values().iter().enumerate() {
            if v > 0.5 && claim[vi] == usize::MAX {
                claim[vi] = i;
                mask[vi] = true;
                any = true;
            }
        }
        if any {
            kept.push((drafts[i].part_type, mask));
        }
    }
    let intact = kept.len() == drafts.len();

    let dilated: Vec<Vec<bool>> = kept.iter().map(|(_, m)| dilate(m, r)).collect();
    let n = kept.len();
    let mut adjacency = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let touch = dilated[i]
                .iter()
                .zip(&dilated[j])
                .any(|(a, b)| *a && *b);
            adjacency[i][j] = touch;
            adjacency[j][i] = touch;
        }
    }

    let parts = kept
        .into_iter()
        .map(|(part_type, mask)| PartInstance {
            part_type,
            mask: bool_grid(&mask, r),
        })
        .collect();
    let scan = bool_grid(&claim.iter().map(|&c| c != usize::MAX).collect::<Vec<_>>(), r);
    (PartTreeTarget { parts, adjacency }, scan, intact)
}

fn bool_grid(mask: &[bool], r: usize) -> OccupancyGrid {
    let values = mask.iter().map(|&b| if b { 1.0f32 } else { 0.0 }).collect();
    OccupancyGrid::from_values(r, GridSemantics::Binary, values)
        .expect("binary mask from bools is always valid")
}

fn grid_bools(grid: &OccupancyGrid) -> Vec<bool> {
    grid.values().iter().map(|&v| v > 0.5).collect()
}

fn derived_adjacency_on_template(tree: &PartTreeTarget, spec: &ClassSpec) -> bool {
    let n = tree.parts.len();
    for i in 0..n {
        for j in i + 1..n {
            if tree.adjacent(i, j)
                && !spec.allows_adjacency(tree.parts[i].part_type, tree.parts[j].part_type)
            {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Samples

/// One training/eval object: a (possibly partial) binary scan plus the
/// complete ground-truth decomposition, all in the rotated frame.
#[derive(Debug, Clone)]
pub struct ObjectSample {
    pub class: usize,
    /// Rotation bin applied to the whole object at generation time.
    pub rotation: AngleBin,
    /// Partial-scan grid; equals the complete mask for uncorrupted samples.
    pub scan: OccupancyGrid,
    /// Complete part masks and adjacency. Unaffected by scan corruption.
    pub tree: PartTreeTarget,
    /// Seed this sample was generated from, for provenance.
    pub seed: u64,
}

impl ObjectSample {
    /// Union of the part masks. Parts are disjoint, so this is exact.
    pub fn complete_mask(&self) -> OccupancyGrid {
        let r = self.scan.resolution();
        let mut acc = vec![false; r * r * r];
        for part in &self.tree.parts {
            for (vi, &v) in part.mask.values().iter().enumerate() {
                if v > 0.5 {
                    acc[vi] = true;
                }
            }
        }
        bool_grid(&acc, r)
    }
}

/// Generates one uncorrupted object of the given class.
///
/// Dimensions, style choices, and the rotation bin are drawn from a stream
/// keyed by `(seed, class)`. A bounded re-roll rejects draws whose derived
/// adjacency falls outside the class's allowed pairs or that fully occlude a
/// part; after [`SHAPE_REROLLS`] attempts the last draw is accepted as-is
/// (it still validates structurally).
pub fn generate_shape(
    class: usize,
    taxonomy: &Taxonomy,
    seed: u64,
    resolution: usize,
) -> ObjectSample {
    assert!(
        class < taxonomy.class_count(),
        "class {class} out of range for taxonomy with {} classes",
        taxonomy.class_count()
    );
    assert!(resolution >= 16, "templates are calibrated for R >= 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[
        seed,
        class as u64,
        seed::hash_str("synthdata.shape"),
    ]));
    let spec = taxonomy.class(class);
    let mut accepted = None;
    for _ in 0..SHAPE_REROLLS {
        let drafts = template(class, &mut rng, resolution, taxonomy);
        assert!(
            drafts
                .iter()
                .flat_map(|d| &d.solids)
                .all(|s| s.xy_radius() <= FIT_RADIUS),
            "template geometry escapes the fit disk"
        );
        let bin = AngleBin::new(rng.gen_range(0..N_ANGLE_BINS)).expect("bin index in range");
        let (tree, scan, intact) = assemble(&drafts, bin, resolution);
        let clean = intact && derived_adjacency_on_template(&tree, spec);
        accepted = Some((tree, scan, bin));
        if clean {
            break;
        }
    }
    let (tree, scan, rotation) = accepted.expect("at least one attempt");
    ObjectSample {
        class,
        rotation,
        scan,
        tree,
        seed,
    }
}

// ---------------------------------------------------------------------------
// Corruption

/// Knobs for simulating partial scans. All probabilities and rates live in
/// `[0,1]`; `crop_depth` caps the fraction of the object's extent removed
/// behind the crop plane.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorruptionParams {
    pub crop_probability: f64,
    pub crop_depth: f64,
    pub part_drop_probability: f64,
    pub dropout_rate: f64,
    #[serde(with = "seed_string")]
    pub seed: u64,
}

impl CorruptionParams {
    /// Identity corruption: the partial scan equals the input scan.
    pub fn none(seed: u64) -> Self {
        Self {
            crop_probability: 0.0,
            crop_depth: 0.0,
            part_drop_probability: 0.0,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("crop_probability", self.crop_probability),
            ("crop_depth", self.crop_depth),
            ("part_drop_probability", self.part_drop_probability),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0,1]"));
            }
        }
        Ok(())
    }
}

impl Default for CorruptionParams {
    /// Moderate settings used for corrupted training stages.
    fn default() -> Self {
        Self {
            crop_probability: 0.8,
            crop_depth: 0.35,
            part_drop_probability: 0.15,
            dropout_rate: 0.08,
            seed: 0,
        }
    }
}

/// Removes voxels from the sample's scan: a random half-space crop, whole
/// parts at `part_drop_probability`, then i.i.d. dropout. Ground-truth masks
/// are untouched. Never adds voxels.
///
/// Each stage draws from its own stream keyed by `(params.seed, sample.seed,
/// attempt)`, so raising one rate removes a superset of what the lower rate
/// removed. An attempt that empties the scan is re-rolled up to
/// [`CORRUPT_REROLLS`] times; if all attempts empty it, the largest single
/// part (intersected with the input scan) is kept instead.
pub fn corrupt_scan(sample: &ObjectSample, params: &CorruptionParams) -> ObjectSample {
    if let Err(msg) = params.validate() {
        panic!("invalid corruption params: {msg}");
    }
    let r = sample.scan.resolution();
    let rf = r as f64;
    let n3 = r * r * r;
    let base = grid_bools(&sample.scan);
    let center = |vi: usize| {
        let z = vi % r;
        let y = (vi / r) % r;
        let x = vi / (r * r);
        [
            (x as f64 + 0.5) / rf,
            (y as f64 + 0.5) / rf,
            (z as f64 + 0.5) / rf,
        ]
    };

    let stream = |stage: &str, attempt: usize| {
        ChaCha8Rng::seed_from_u64(seed::mix(&[
            params.seed,
            sample.seed,
            attempt as u64,
            seed::hash_str(stage),
        ]))
    };

    for attempt in 0..CORRUPT_REROLLS {
        let mut keep = base.clone();

        let mut crng = stream("synthdata.crop", attempt);
        if crng.gen::<f64>() < params.crop_probability {
            let dir = loop {
                let v = [
                    crng.gen::<f64>() * 2.0 - 1.0,
                    crng.gen::<f64>() * 2.0 - 1.0,
                    crng.gen::<f64>() * 2.0 - 1.0,
                ];
                let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                if n2 > 1e-4 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let depth = params.crop_depth * crng.gen::<f64>();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (vi, &k) in base.iter().enumerate() {
                if k {
                    let p = center(vi);
                    let proj = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
                    lo = lo.min(proj);
                    hi = hi.max(proj);
                }
            }
            if hi > lo {
                let threshold = hi - depth * (hi - lo);
                for (vi, k) in keep.iter_mut().enumerate() {
                    if *k {
                        let p = center(vi);
                        let proj = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
                        if proj > threshold {
                            *k = false;
                        }
                    }
                }
            }
        }

        let mut prng = stream("synthdata.part_drop", attempt);
        for part in &sample.tree.parts {
            let drop = prng.gen::<f64>() < params.part_drop_probability;
            if drop {
                for (vi, &v) in part.mask.values().iter().enumerate() {
                    if v > 0.5 {
                        keep[vi] = false;
                    }
                }
            }
        }

        // One draw per cell regardless of occupancy keeps the stream aligned
        // across dropout rates: a higher rate removes a superset.
        let mut drng = stream("synthdata.dropout", attempt);
        for k in keep.iter_mut() {
            let u = drng.gen::<f64>();
            if u < params.dropout_rate && *k {
                *k = false;
            }
        }

        if keep.iter().any(|&k| k) {
            return ObjectSample {
                class: sample.class,
                rotation: sample.rotation,
                scan: bool_grid(&keep, r),
                tree: sample.tree.clone(),
                seed: sample.seed,
            };
        }
    }

    // Least-destructive fallback: the largest part still visible in the
    // input scan (ties to the lowest part index).
    let mut best: Option<(usize, Vec<bool>)> = None;
    for part in &sample.tree.parts {
        let visible: Vec<bool> = part
            .mask
            .values()
            .iter()
            .zip(&base)
            .map(|(&v, &b)| v > 0.5 && b)
            .collect();
        let count = visible.iter().filter(|&&k| k).count();
        if count > 0 && best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, visible));
        }
    }
    let keep = best.map(|(_, m)| m).unwrap_or_else(|| vec![false; n3]);
    ObjectSample {
        class: sample.class,
        rotation: sample.rotation,
        scan: bool_grid(&keep, r),
        tree: sample.tree.clone(),
        seed: sample.seed,
    }
}

/// Translates the scan and every part mask by the same random integer offset
/// (up to `max_fraction` of the resolution per axis), clipping at the grid
/// boundary — a stand-in for imprecise detection boxes. Parts clipped to
/// empty are removed along with their adjacency rows; if the shift would
/// empty the scan the sample is returned unchanged.
pub fn jitter_sample(sample: &ObjectSample, max_fraction: f64, seed: u64) -> ObjectSample {
    let r = sample.scan.resolution();
    let j = (max_fraction * r as f64).floor() as i64;
    if j == 0 {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[
        seed,
        sample.seed,
        seed::hash_str("synthdata.jitter"),
    ]));
    let offset = [
        rng.gen_range(-j..=j),
        rng.gen_range(-j..=j),
        rng.gen_range(-j..=j),
    ];

    let shifted_scan = translate(&grid_bools(&sample.scan), r, offset);
    if !shifted_scan.iter().any(|&k| k) {
        return sample.clone();
    }
    let mut parts = Vec::new();
    let mut kept_rows = Vec::new();
    for (i, part) in sample.tree.parts.iter().enumerate() {
        let mask = translate(&grid_bools(&part.mask), r, offset);
        if mask.iter().any(|&k| k) {
            parts.push(PartInstance {
                part_type: part.part_type,
                mask: bool_grid(&mask, r),
            });
            kept_rows.push(i);
        }
    }
    if parts.is_empty() {
        return sample.clone();
    }
    let adjacency = kept_rows
        .iter()
        .map(|&i| kept_rows.iter().map(|&k| sample.tree.adjacency[i][k]).collect())
        .collect();
    ObjectSample {
        class: sample.class,
        rotation: sample.rotation,
        scan: bool_grid(&shifted_scan, r),
        tree: PartTreeTarget { parts, adjacency },
        seed: sample.seed,
    }
}

fn translate(mask: &[bool], r: usize, offset: [i64; 3]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let ri = r as i64;
    for x in 0..ri {
        let sx = x - offset[0];
        if !(0..ri).contains(&sx) {
            continue;
        }
        for y in 0..ri {
            let sy = y - offset[1];
            if !(0..ri).contains(&sy) {
                continue;
            }
            for z in 0..ri {
                let sz = z - offset[2];
                if !(0..ri).contains(&sz) {
                    continue;
                }
                if mask[((sx * ri + sy) * ri + sz) as usize] {
                    out[((x * ri + y) * ri + z) as usize] = true;
                }
            }
        }
    }
    out
}

/// Generates `count` samples cycling through `classes`, optionally corrupting
/// each scan. Per-sample seeds mix the dataset seed with the sample index, so
/// generation is order-independent and reproducible.
pub fn generate_dataset(
    classes: &[usize],
    count: usize,
    resolution: usize,
    dataset_seed: u64,
    corruption: Option<&CorruptionParams>,
    taxonomy: &Taxonomy,
) -> Vec<ObjectSample> {
    assert!(!classes.is_empty(), "need at least one class");
    (0..count)
        .map(|i| {
            let class = classes[i % classes.len()];
            let sample =
                generate_shape(class, taxonomy, seed::mix(&[dataset_seed, i as u64]), resolution);
            match corruption {
                Some(params) => corrupt_scan(&sample, params),
                None => sample,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest and on-disk layout

/// TOML integers are i64, but mixed seeds use the full u64 range, so seed
/// fields serialize as decimal strings (plain integers are accepted on read).
pub mod seed_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) if v >= 0 => Ok(v as u64),
            Repr::Int(v) => Err(serde::de::Error::custom(format!("negative seed {v}"))),
            Repr::Text(t) => t.parse::<u64>().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Grid {
        path: PathBuf,
        #[source]
        source: GridError,
    },
    #[error("manifest parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sequential 0.7/0.15/0.15 split: the first `floor(0.7 n)` samples train,
/// the next `floor(0.15 n)` validate, the remainder test.
pub fn assign_splits(count: usize) -> Vec<Split> {
    let train = (count as f64 * 0.7).floor() as usize;
    let val = (count as f64 * 0.15).floor() as usize;
    (0..count)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub part_type: usize,
    /// Grid path relative to the manifest's directory.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class: usize,
    pub rotation: usize,
    pub split: Split,
    #[serde(with = "seed_string")]
    pub seed: u64,
    /// Partial-scan grid path relative to the manifest's directory.
    pub scan: String,
    pub parts: Vec<PartRecord>,
    /// Adjacent part-index pairs, upper triangle only.
    pub adjacency: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub taxonomy_hash: String,
    #[serde(with = "seed_string")]
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn to_toml_string(&self) -> Result<String, DataError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        Ok(toml::from_str(text)?)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes grids under `dir/grids/` and the manifest to `dir/manifest.toml`,
/// assigning sequential train/val/test splits.
pub fn save_dataset(
    dir: &Path,
    samples: &[ObjectSample],
    taxonomy: &Taxonomy,
    dataset_seed: u64,
) -> Result<DatasetManifest, DataError> {
    if samples.is_empty() {
        return Err(DataError::Invalid("refusing to write an empty dataset".into()));
    }
    let resolution = samples[0].scan.resolution();
    let grids = dir.join("grids");
    fs::create_dir_all(&grids).map_err(io_err(&grids))?;
    let splits = assign_splits(samples.len());

    let mut records = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        if sample.scan.resolution() != resolution {
            return Err(DataError::Invalid(format!(
                "sample {i} resolution {} != dataset resolution {resolution}",
                sample.scan.resolution()
            )));
        }
        let id = format!("{}_{i:05}", taxonomy.class(sample.class).name());
        let scan_rel = format!("grids/{id}_scan.pfvg");
        let scan_path = dir.join(&scan_rel);
        sample.scan.save(&scan_path).map_err(|source| DataError::Grid {
            path: scan_path.clone(),
            source,
        })?;
        let mut parts = Vec::with_capacity(sample.tree.parts.len());
        for (j, part) in sample.tree.parts.iter().enumerate() {
            let mask_rel = format!("grids/{id}_part{j:02}.pfvg");
            let mask_path = dir.join(&mask_rel);
            part.mask.save(&mask_path).map_err(|source| DataError::Grid {
                path: mask_path.clone(),
                source,
            })?;
            parts.push(PartRecord {
                part_type: part.part_type,
                mask: mask_rel,
            });
        }
        let n = sample.tree.parts.len();
        let mut adjacency = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if sample.tree.adjacent(a, b) {
                    adjacency.push([a, b]);
                }
            }
        }
        records.push(SampleRecord {
            id,
            class: sample.class,
            rotation: sample.rotation.index(),
            split: splits[i],
            seed: sample.seed,
            scan: scan_rel,
            parts,
            adjacency,
        });
    }

    let manifest = DatasetManifest {
        resolution,
        taxonomy_hash: taxonomy.content_hash_hex(),
        seed: dataset_seed,
        samples: records,
    };
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, manifest.to_toml_string()?).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads `dir/manifest.toml` and every referenced grid. A missing or corrupt
/// grid fails with an error naming its path.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ObjectSample>), DataError> {
    let manifest_path = dir.join("manifest.toml");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest = DatasetManifest::from_toml_str(&text)?;

    let load_grid = |rel: &str| -> Result<OccupancyGrid, DataError> {
        let path = dir.join(rel);
        OccupancyGrid::load(&path).map_err(|source| DataError::Grid { path, source })
    };

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let scan = load_grid(&record.scan)?;
        let rotation = AngleBin::new(record.rotation)
            .map_err(|e| DataError::Invalid(format!("sample {}: {e}", record.id)))?;
        let mut parts = Vec::with_capacity(record.parts.len());
        for part in &record.parts {
            parts.push(PartInstance {
                part_type: part.part_type,
                mask: load_grid(&part.mask)?,
            });
        }
        let n = parts.len();
        let mut adjacency = vec![vec![false; n]; n];
        for &[a, b] in &record.adjacency {
            if a >= n || b >= n {
                return Err(DataError::Invalid(format!(
                    "sample {}: adjacency pair [{a}, {b}] out of range for {n} parts",
                    record.id
                )));
            }
            adjacency[a][b] = true;
            adjacency[b][a] = true;
        }
        samples.push(ObjectSample {
            class: record.class,
            rotation,
            scan,
            tree: PartTreeTarget { parts, adjacency },
            seed: record.seed,
        });
    }
    Ok((manifest, samples))
}
