//! Matrix-array aperture, voxel grids and per-scheme channel reduction maps.
//!
//! The aperture is a `n_cols x n_rows` grid of elements. Along the
//! elevational axis (y) the active rows are interleaved with dead slots that
//! hold no element, which splits the default probe into four 8-row
//! sub-apertures. Positions are centered on the origin and lie in `z = 0`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

use crate::error::{param, Error, Result};

pub const SOUND_SPEED: f64 = 1540.0;
pub const DEFAULT_FOCAL_DEPTH: f64 = 20e-3;

/// Physical description of the aperture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    /// Elements along lateral x.
    pub n_cols: usize,
    /// Active elements along elevational y.
    pub n_rows: usize,
    /// Center-to-center spacing, meters.
    pub pitch: f64,
    /// Meters.
    pub element_width: f64,
    /// Meters.
    pub kerf: f64,
    /// Physical row slots holding no element, in `0..n_rows + dead_slots.len()`.
    pub dead_slots: Vec<usize>,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_cols: 32,
            n_rows: 32,
            pitch: 3.0e-4,
            element_width: 2.75e-4,
            kerf: 2.5e-5,
            dead_slots: vec![8, 17, 26],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    /// Row-major: element `row * n_cols + col`.
    pub element_positions: Vec<[f64; 3]>,
    pub n_cols: usize,
    pub n_rows: usize,
    pub pitch: f64,
    pub element_width: f64,
    pub kerf: f64,
    pub dead_row_indices: Vec<usize>,
    col_x: Vec<f64>,
    row_y: Vec<f64>,
}

impl ArrayGeometry {
    pub fn n_elements(&self) -> usize {
        self.element_positions.len()
    }

    pub fn element_index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    /// Lateral position of each column.
    pub fn column_x(&self) -> &[f64] {
        &self.col_x
    }

    /// Elevational position of each active row.
    pub fn row_y(&self) -> &[f64] {
        &self.row_y
    }

    pub fn physical_slots(&self) -> usize {
        self.n_rows + self.dead_row_indices.len()
    }

    /// Stable content hash of the element layout, used for provenance tags
    /// in every output file.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n_cols as u64).to_le_bytes());
        h.update((self.n_rows as u64).to_le_bytes());
        for p in &self.element_positions {
            for v in p {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

pub fn build_array(cfg: &ArrayConfig) -> Result<ArrayGeometry> {
    if cfg.n_cols == 0 || cfg.n_rows == 0 {
        return Err(param("array must have at least one row and column"));
    }
    if !(cfg.pitch > 0.0 && cfg.element_width > 0.0) || cfg.kerf < 0.0 {
        return Err(param("pitch and element width must be positive, kerf non-negative"));
    }
    if (cfg.element_width + cfg.kerf - cfg.pitch).abs() > 1e-9 * cfg.pitch {
        return Err(param(format!(
            "pitch {} != element width {} + kerf {}",
            cfg.pitch, cfg.element_width, cfg.kerf
        )));
    }
    let n_slots = cfg.n_rows + cfg.dead_slots.len();
    let mut dead = cfg.dead_slots.clone();
    dead.sort_unstable();
    dead.dedup();
    if dead.len() != cfg.dead_slots.len() {
        return Err(param("duplicate dead slot index"));
    }
    if let Some(&s) = dead.iter().find(|&&s| s >= n_slots) {
        return Err(param(format!("dead slot {s} outside 0..{n_slots}")));
    }

    let center_col = (cfg.n_cols as f64 - 1.0) / 2.0;
    let center_slot = (n_slots as f64 - 1.0) / 2.0;
    let col_x: Vec<f64> = (0..cfg.n_cols)
        .map(|c| (c as f64 - center_col) * cfg.pitch)
        .collect();
    let row_y: Vec<f64> = (0..n_slots)
        .filter(|s| dead.binary_search(s).is_err())
        .map(|s| (s as f64 - center_slot) * cfg.pitch)
        .collect();

    let mut element_positions = Vec::with_capacity(cfg.n_cols * cfg.n_rows);
    for &y in &row_y {
        for &x in &col_x {
            element_positions.push([x, y, 0.0]);
        }
    }

    Ok(ArrayGeometry {
        element_positions,
        n_cols: cfg.n_cols,
        n_rows: cfg.n_rows,
        pitch: cfg.pitch,
        element_width: cfg.element_width,
        kerf: cfg.kerf,
        dead_row_indices: dead,
        col_x,
        row_y,
    })
}

/// Regular sampling grid for beamformed images. Values are stored with z
/// fastest, then y, then x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub counts: [usize; 3],
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], counts: [usize; 3]) -> Result<Self> {
        let g = Self { origin, spacing, counts };
        g.validate()?;
        Ok(g)
    }

    /// Grid covering `[min, max]` on each axis at `spacing`; an axis with
    /// `min == max` collapses to a single plane.
    pub fn from_extent(min: [f64; 3], max: [f64; 3], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(param("grid spacing must be positive"));
        }
        let mut counts = [0usize; 3];
        for a in 0..3 {
            if max[a] < min[a] {
                return Err(param("grid extent is inverted"));
            }
            counts[a] = ((max[a] - min[a]) / spacing + 1e-6).floor() as usize + 1;
        }
        Self::new(min, [spacing; 3], counts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(param("grid spacing must be positive on every axis"));
        }
        if self.counts.contains(&0) {
            return Err(param("grid counts must be at least 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_planar(&self) -> bool {
        self.counts[1] == 1
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.counts[1] + iy) * self.counts[2] + iz
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }

    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [self.coord(0, ix), self.coord(1, iy), self.coord(2, iz)]
    }

    /// Continuous grid coordinate of a physical position.
    pub fn to_grid(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.coord(a, self.counts[a] - 1))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| {
            let half = 0.5 * self.spacing[a];
            p[a] >= self.origin[a] - half && p[a] <= hi[a] + half
        })
    }

    /// The `y = origin_y` plane of this grid, i.e. the same x/z sampling
    /// with a single elevational sample at `y`.
    pub fn plane_at(&self, y: f64) -> VoxelGrid {
        VoxelGrid {
            origin: [self.origin[0], y, self.origin[2]],
            spacing: self.spacing,
            counts: [self.counts[0], 1, self.counts[2]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImagingScheme {
    ThreeD,
    Vip,
    Ef { focal_depth: f64 },
    Cs,
}

impl ImagingScheme {
    pub fn ef() -> Self {
        ImagingScheme::Ef { focal_depth: DEFAULT_FOCAL_DEPTH }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ImagingScheme::Ef { focal_depth } if !(*focal_depth > 0.0) => {
                Err(param("EF focal depth must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ImagingScheme::ThreeD => "3d",
            ImagingScheme::Vip => "vip",
            ImagingScheme::Ef { .. } => "ef",
            ImagingScheme::Cs => "cs",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            ImagingScheme::ThreeD => 0,
            ImagingScheme::Vip => 1,
            ImagingScheme::Ef { .. } => 2,
            ImagingScheme::Cs => 3,
        }
    }

    pub fn from_code(code: u8, focal_depth: f64) -> Result<Self> {
        Ok(match code {
            0 => ImagingScheme::ThreeD,
            1 => ImagingScheme::Vip,
            2 => ImagingScheme::Ef { focal_depth },
            3 => ImagingScheme::Cs,
            _ => return Err(Error::Format(format!("unknown scheme code {code}"))),
        })
    }

    pub fn focal_depth(&self) -> f64 {
        match self {
            ImagingScheme::Ef { focal_depth } => *focal_depth,
            _ => 0.0,
        }
    }

    /// Whether the scheme images a single elevational plane.
    pub fn is_planar(&self) -> bool {
        !matches!(self, ImagingScheme::ThreeD)
    }

    /// Whether the RF is summed over elevation before beamforming.
    pub fn is_reduced(&self) -> bool {
        matches!(self, ImagingScheme::Vip | ImagingScheme::Ef { .. })
    }
}

impl fmt::Display for ImagingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ImagingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3d" => Ok(ImagingScheme::ThreeD),
            "vip" => Ok(ImagingScheme::Vip),
            "ef" => Ok(ImagingScheme::ef()),
            "cs" => Ok(ImagingScheme::Cs),
            other => Err(param(format!("unknown scheme '{other}' (expected 3d|vip|ef|cs)"))),
        }
    }
}

/// Fixed lens delay, seconds, for an element at elevation `y`.
pub fn lens_delay(y: f64, focal_depth: f64, c: f64) -> f64 {
    ((y * y + focal_depth * focal_depth).sqrt() - focal_depth) / c
}

/// How the physical elements are combined into output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    /// Member elements of each output channel.
    pub groups: Vec<Vec<usize>>,
    /// Receive position of each output channel.
    pub positions: Vec<[f64; 3]>,
    /// Per-element lens delay in seconds (EF only), used on transmit and receive.
    pub lens_delays: Option<Vec<f64>>,
}

impl ChannelMap {
    pub fn n_outputs(&self) -> usize {
        self.groups.len()
    }

    pub fn is_identity(&self) -> bool {
        self.groups.iter().enumerate().all(|(i, g)| g.len() == 1 && g[0] == i)
    }
}

pub fn channel_map(scheme: ImagingScheme, geom: &ArrayGeometry, c: f64) -> ChannelMap {
    match scheme {
        ImagingScheme::ThreeD | ImagingScheme::Cs => ChannelMap {
            groups: (0..geom.n_elements()).map(|e| vec![e]).collect(),
            positions: geom.element_positions.clone(),
            lens_delays: None,
        },
        ImagingScheme::Vip | ImagingScheme::Ef { .. } => {
            let groups = (0..geom.n_cols)
                .map(|col| (0..geom.n_rows).map(|row| geom.element_index(row, col)).collect())
                .collect();
            let positions = geom.column_x().iter().map(|&x| [x, 0.0, 0.0]).collect();
            let lens_delays = match scheme {
                ImagingScheme::Ef { focal_depth } => Some(
                    geom.element_positions
                        .iter()
                        .map(|p| lens_delay(p[1], focal_depth, c))
                        .collect(),
                ),
                _ => None,
            };
            ChannelMap { groups, positions, lens_delays }
        }
    }
}
