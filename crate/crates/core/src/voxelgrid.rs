//! Dense cubic voxel occupancy grids.
//!
//! Grids hold scans, part masks, and part priors as `R^3` scalars in `[0, 1]`,
//! stored x-major (x slowest, z fastest). All operations are pure; grids are
//! immutable values once constructed and safe to share across threads.
//!
//! Rotations are discretized to 45-degree steps about the vertical (z) axis:
//! multiples of 90 degrees are exact index permutations, the 45-degree family
//! resamples trilinearly with zero fill outside the grid.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Number of discretized orientation bins (45-degree steps about the up axis).
pub const N_ANGLE_BINS: usize = 8;

/// Magic bytes of the `.pfvg` grid file format.
pub const GRID_MAGIC: &[u8; 4] = b"PFVG";
const GRID_VERSION: u8 = 1;
const GRID_HEADER_LEN: usize = 16;

/// (cos, sin) of each bin angle. Exact values for the axis-aligned bins keep
/// 90-degree resampling bit-identical to the permutation path.
const BIN_COS_SIN: [(f64, f64); N_ANGLE_BINS] = {
    const S: f64 = std::f64::consts::FRAC_1_SQRT_2;
    [
        (1.0, 0.0),
        (S, S),
        (0.0, 1.0),
        (-S, S),
        (-1.0, 0.0),
        (-S, -S),
        (0.0, -1.0),
        (S, -S),
    ]
};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("degenerate box: extent must be strictly positive on every axis, got {0:?}")]
    DegenerateBox([f64; 3]),
    #[error("value {value} at cell {index} outside [0,1] for {semantics:?} grid")]
    ValueOutOfRange {
        index: usize,
        value: f32,
        semantics: GridSemantics,
    },
    #[error("binary grid holds non-binary value {value} at cell {index}")]
    NotBinary { index: usize, value: f32 },
    #[error("value count {got} does not match resolution {resolution}^3 = {want}")]
    LengthMismatch {
        resolution: usize,
        got: usize,
        want: usize,
    },
    #[error("angle bin {0} out of range [0, 8)")]
    BadAngleBin(usize),
    #[error("grid file too short: need {needed} bytes at offset {offset}, file ends at {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("bad magic at byte offset 0: expected \"PFVG\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported grid format version {version} at byte offset {offset}")]
    BadVersion { version: u8, offset: usize },
    #[error("invalid semantics tag {tag} at byte offset {offset}")]
    BadSemanticsTag { tag: u8, offset: usize },
    #[error("trailing {0} unexpected bytes after grid payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a grid is a hard occupancy mask or holds soft values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GridSemantics {
    /// Values restricted to {0, 1}.
    Binary,
    /// Values in [0, 1].
    Soft,
}

/// Discrete rotation about the up (gravity) axis: `index * 45` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AngleBin(u8);

impl AngleBin {
    pub fn new(index: usize) -> Result<Self, GridError> {
        if index < N_ANGLE_BINS {
            Ok(Self(index as u8))
        } else {
            Err(GridError::BadAngleBin(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Rotation angle in degrees.
    pub fn degrees(self) -> f64 {
        self.0 as f64 * 45.0
    }

    pub fn cos_sin(self) -> (f64, f64) {
        BIN_COS_SIN[self.0 as usize]
    }

    /// True for multiples of 90 degrees (exact permutation rotations).
    pub fn is_axis_aligned(self) -> bool {
        self.0 % 2 == 0
    }

    pub fn all() -> impl Iterator<Item = AngleBin> {
        (0..N_ANGLE_BINS).map(|i| AngleBin(i as u8))
    }
}

impl fmt::Display for AngleBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense cubic scalar grid with values in `[0, 1]`, stored x-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    semantics: GridSemantics,
    values: Vec<f32>,
}

impl OccupancyGrid {
    /// All-zero binary grid.
    pub fn zeros_binary(resolution: usize) -> Self {
        Self {
            resolution,
            semantics: GridSemantics::Binary,
            values: vec![0.0; resolution * resolution * resolution],
        }
    }

    /// All-zero soft grid.
    pub fn zeros_soft(resolution: usize) -> Self {
        Self {
            resolution,
            semantics: GridSemantics::Soft,
            values: vec![0.0; resolution * resolution * resolution],
        }
    }

    /// Builds a grid from raw values, validating the range invariant.
    pub fn from_values(
        resolution: usize,
        semantics: GridSemantics,
        values: Vec<f32>,
    ) -> Result<Self, GridError> {
        let want = resolution * resolution * resolution;
        if values.len() != want {
            return Err(GridError::LengthMismatch {
                resolution,
                got: values.len(),
                want,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(GridError::ValueOutOfRange {
                    index,
                    value,
                    semantics,
                });
            }
            if semantics == GridSemantics::Binary && value != 0.0 && value != 1.0 {
                return Err(GridError::NotBinary { index, value });
            }
        }
        Ok(Self {
            resolution,
            semantics,
            values,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn semantics(&self) -> GridSemantics {
        self.semantics
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Linear index of cell `(x, y, z)`; x-major, z contiguous.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Sets one cell. Panics on out-of-range values (construction-time invariant).
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        assert!(
            (0.0..=1.0).contains(&value),
            "grid value {value} outside [0,1]"
        );
        if self.semantics == GridSemantics::Binary {
            assert!(
                value == 0.0 || value == 1.0,
                "binary grid assigned non-binary value {value}"
            );
        }
        let idx = self.index(x, y, z);
        self.values[idx] = value;
    }

    /// Number of cells with value strictly above `threshold`.
    pub fn count_above(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    /// Hard mask of cells strictly above `threshold`.
    pub fn binarize(&self, threshold: f32) -> OccupancyGrid {
        OccupancyGrid {
            resolution: self.resolution,
            semantics: GridSemantics::Binary,
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// True if the grids agree bit-for-bit (resolution, semantics, payload).
    pub fn bit_eq(&self, other: &OccupancyGrid) -> bool {
        self.resolution == other.resolution
            && self.semantics == other.semantics
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Axis-aligned box given by min/max corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Unit box `[0,1]^3`.
    pub fn unit() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

/// Bins `points` into an `R^3` occupancy grid over `bounds`.
///
/// Binning is half-open `[lo, hi)` per axis: a point exactly on the max corner
/// is ignored, as is anything outside the box. A cell is 1 iff at least one
/// point lands in it.
pub fn voxelize_points(
    points: &[[f64; 3]],
    bounds: &Aabb,
    resolution: usize,
) -> Result<OccupancyGrid, GridError> {
    let ext = bounds.extent();
    if ext.iter().any(|&e| e <= 0.0) {
        return Err(GridError::DegenerateBox(ext));
    }
    let mut grid = OccupancyGrid::zeros_binary(resolution);
    let r = resolution as f64;
    'points: for p in points {
        let mut cell = [0usize; 3];
        for axis in 0..3 {
            let t = (p[axis] - bounds.min[axis]) / ext[axis];
            if !(0.0..1.0).contains(&t) {
                continue 'points;
            }
            cell[axis] = ((t * r).floor() as usize).min(resolution - 1);
        }
        grid.set(cell[0], cell[1], cell[2], 1.0);
    }
    Ok(grid)
}

/// Rotates a grid by `bin * 45` degrees counterclockwise about the vertical
/// axis through the grid center.
///
/// Multiples of 90 degrees are exact index permutations and preserve the
/// occupied-cell count; the 45-degree family resamples trilinearly with zero
/// fill outside the grid (output becomes soft).
pub fn rotate_grid(grid: &OccupancyGrid, bin: AngleBin) -> OccupancyGrid {
    if bin.index() == 0 {
        return grid.clone();
    }
    if bin.is_axis_aligned() {
        let mut out = grid.clone();
        for _ in 0..bin.index() / 2 {
            out = rotate_90(&out);
        }
        return out;
    }
    resample_rotation(grid, bin)
}

/// One exact 90-degree counterclockwise rotation about the grid center:
/// `out[x][y][z] = in[y][R-1-x][z]`.
fn rotate_90(grid: &OccupancyGrid) -> OccupancyGrid {
    let r = grid.resolution;
    let mut values = vec![0.0f32; grid.values.len()];
    for x in 0..r {
        for y in 0..r {
            let src_base = (y * r + (r - 1 - x)) * r;
            let dst_base = (x * r + y) * r;
            values[dst_base..dst_base + r].copy_from_slice(&grid.values[src_base..src_base + r]);
        }
    }
    OccupancyGrid {
        resolution: r,
        semantics: grid.semantics,
        values,
    }
}

fn resample_rotation(grid: &OccupancyGrid, bin: AngleBin) -> OccupancyGrid {
    let r = grid.resolution;
    let rf = r as f64;
    // Output voxel center pulled back through the inverse rotation.
    let (c, s) = bin.cos_sin();
    let mut values = vec![0.0f32; grid.values.len()];
    for x in 0..r {
        let ax = (x as f64 + 0.5) / rf - 0.5;
        for y in 0..r {
            let ay = (y as f64 + 0.5) / rf - 0.5;
            // Inverse rotation R(-theta).
            let sx = ax * c + ay * s;
            let sy = -ax * s + ay * c;
            let u = (sx + 0.5) * rf - 0.5;
            let v = (sy + 0.5) * rf - 0.5;
            let dst_base = (x * r + y) * r;
            for z in 0..r {
                values[dst_base + z] = sample_trilinear(grid, u, v, z as f64);
            }
        }
    }
    OccupancyGrid {
        resolution: r,
        semantics: GridSemantics::Soft,
        values,
    }
}

/// Trilinear sample at fractional index coordinates, zero outside the grid.
fn sample_trilinear(grid: &OccupancyGrid, u: f64, v: f64, w: f64) -> f32 {
    let u0 = u.floor();
    let v0 = v.floor();
    let w0 = w.floor();
    let (fu, fv, fw) = (u - u0, v - v0, w - w0);
    let mut acc = 0.0f64;
    for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
        if wu == 0.0 {
            continue;
        }
        for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
            if wv == 0.0 {
                continue;
            }
            for (dw, ww) in [(0i64, 1.0 - fw), (1, fw)] {
                if ww == 0.0 {
                    continue;
                }
                let (i, j, k) = (u0 as i64 + du, v0 as i64 + dv, w0 as i64 + dw);
                let r = grid.resolution as i64;
                if i < 0 || j < 0 || k < 0 || i >= r || j >= r || k >= r {
                    continue;
                }
                acc += wu
                    * wv
                    * ww
                    * grid.get(i as usize, j as usize, k as usize) as f64;
            }
        }
    }
    // Convex weights over [0,1] samples; clamp guards rounding spill.
    acc.clamp(0.0, 1.0) as f32
}

/// Centers of cells above `threshold`, as points in the unit box, in
/// lexicographic (x, y, z) cell order.
pub fn occupied_centers(grid: &OccupancyGrid, threshold: f32) -> Vec<[f64; 3]> {
    let r = grid.resolution;
    let rf = r as f64;
    let mut out = Vec::new();
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                if grid.get(x, y, z) > threshold {
                    out.push([
                        (x as f64 + 0.5) / rf,
                        (y as f64 + 0.5) / rf,
                        (z as f64 + 0.5) / rf,
                    ]);
                }
            }
        }
    }
    out
}

impl OccupancyGrid {
    /// Serializes to the `.pfvg` byte format: 16-byte header (magic "PFVG",
    /// version, semantics, resolution u16 LE, reserved) then `R^3` f32 LE
    /// values in x-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GRID_HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(GRID_MAGIC);
        out.push(GRID_VERSION);
        out.push(match self.semantics {
            GridSemantics::Binary => 0,
            GridSemantics::Soft => 1,
        });
        out.extend_from_slice(&(self.resolution as u16).to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `.pfvg` byte format. Errors name the failing byte offset;
    /// no partial grid is ever returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let need = |offset: usize, needed: usize| -> Result<(), GridError> {
            if bytes.len() < offset + needed {
                Err(GridError::Truncated {
                    offset,
                    needed,
                    len: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(0, GRID_HEADER_LEN)?;
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if &magic != GRID_MAGIC {
            return Err(GridError::BadMagic(magic));
        }
        if bytes[4] != GRID_VERSION {
            return Err(GridError::BadVersion {
                version: bytes[4],
                offset: 4,
            });
        }
        let semantics = match bytes[5] {
            0 => GridSemantics::Binary,
            1 => GridSemantics::Soft,
            tag => return Err(GridError::BadSemanticsTag { tag, offset: 5 }),
        };
        let resolution = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let count = resolution * resolution * resolution;
        need(GRID_HEADER_LEN, count * 4)?;
        let payload_end = GRID_HEADER_LEN + count * 4;
        if bytes.len() > payload_end {
            return Err(GridError::TrailingBytes(bytes.len() - payload_end));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let o = GRID_HEADER_LEN + i * 4;
            values.push(f32::from_le_bytes([
                bytes[o],
                bytes[o + 1],
                bytes[o + 2],
                bytes[o + 3],
            ]));
        }
        Self::from_values(resolution, semantics, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes an ASCII OBJ mesh with one unit cube per cell above `threshold`.
/// Coordinates are in voxel units; intended for visual inspection.
pub fn write_obj<W: Write>(
    grid: &OccupancyGrid,
    threshold: f32,
    writer: &mut W,
) -> std::io::Result<()> {
    writeln!(writer, "# voxel grid mesh, resolution {}", grid.resolution)?;
    let mut base = 0usize;
    let r = grid.resolution;
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                if grid.get(x, y, z) <= threshold {
                    continue;
                }
                let (x0, y0, z0) = (x as f64, y as f64, z as f64);
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            writeln!(
                                writer,
                                "v {} {} {}",
                                x0 + dx as f64,
                                y0 + dy as f64,
                                z0 + dz as f64
                            )?;
                        }
                    }
                }
                // Vertex order above: bit 0 = x, bit 1 = y, bit 2 = z.
                const FACES: [[usize; 4]; 6] = [
                    [1, 2, 4, 3], // z = 0
                    [5, 7, 8, 6], // z = 1
                    [1, 5, 6, 2], // y = 0
                    [3, 4, 8, 7], // y = 1
                    [1, 3, 7, 5], // x = 0
                    [2, 6, 8, 4], // x = 1
                ];
                for f in FACES {
                    writeln!(
                        writer,
                        "f {} {} {} {}",
                        base + f[0],
                        base + f[1],
                        base + f[2],
                        base + f[3]
                    )?;
                }
                base += 8;
            }
        }
    }
    Ok(())
}

/// Convenience wrapper for [`write_obj`] targeting a file path.
pub fn export_obj(grid: &OccupancyGrid, threshold: f32, path: &Path) -> Result<(), GridError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_obj(grid, threshold, &mut file)?;
    Ok(())
}
