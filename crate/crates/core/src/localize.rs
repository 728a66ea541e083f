//! Scatterer detection by thresholding, connected-region segmentation,
//! patch classification with adaptive re-thresholding of multi-scatterer
//! patches, and intensity-weighted centroiding. Centroids accumulate into a
//! density map that can be rendered with Gaussian smoothing.

use std::collections::VecDeque;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};

use crate::beamform::Frame;
use crate::geometry::VoxelGrid;

/// Initial noise threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Fraction of the frame maximum.
    FrameFraction(f64),
    /// Absolute envelope level.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours only (4 in a plane, 6 in a volume).
    Face,
    /// Face, edge and corner neighbours (8 in a plane, 26 in a volume).
    Full,
}

/// Feature ranges for a patch that holds a single scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBounds {
    pub min_size: usize,
    pub max_size: usize,
    pub min_solidity: f64,
    pub max_eccentricity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub threshold: Threshold,
    pub connectivity: Connectivity,
    pub bounds_2d: FeatureBounds,
    pub bounds_3d: FeatureBounds,
    /// Threshold multiplier per re-threshold step.
    pub step: f64,
    pub max_iterations: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            threshold: Threshold::FrameFraction(0.3),
            connectivity: Connectivity::Full,
            bounds_2d: FeatureBounds { min_size: 2, max_size: 40, min_solidity: 0.75, max_eccentricity: 0.999 },
            bounds_3d: FeatureBounds { min_size: 4, max_size: 170, min_solidity: 0.68, max_eccentricity: 0.999 },
            step: 1.2,
            max_iterations: 8,
        }
    }
}

impl DetectParams {
    fn bounds(&self, grid: &VoxelGrid) -> FeatureBounds {
        if grid.is_planar() {
            self.bounds_2d
        } else {
            self.bounds_3d
        }
    }
}

/// Connected set of supra-threshold voxels with its shape features.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Flat voxel indices into the frame.
    pub members: Vec<usize>,
    pub intensities: Vec<f64>,
    pub size: usize,
    pub peak: f64,
    pub solidity: f64,
    pub eccentricity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchClass {
    Single,
    Multi,
    Noise,
}

impl Patch {
    pub fn new(frame: &Frame, members: Vec<usize>) -> Self {
        let intensities: Vec<f64> = members.iter().map(|&i| frame.values[i] as f64).collect();
        let coords: Vec<[i64; 3]> = members.iter().map(|&i| voxel_coords(&frame.grid, i)).collect();
        let peak = intensities.iter().cloned().fold(f64::MIN, f64::max);
        let planar = frame.grid.is_planar();
        Self {
            size: members.len(),
            solidity: solidity(&coords, planar),
            eccentricity: eccentricity(&coords, planar),
            members,
            intensities,
            peak,
        }
    }

    pub fn classify(&self, b: &FeatureBounds) -> PatchClass {
        if self.size < b.min_size {
            PatchClass::Noise
        } else if self.size > b.max_size || self.solidity < b.min_solidity || self.eccentricity > b.max_eccentricity {
            PatchClass::Multi
        } else {
            PatchClass::Single
        }
    }

    /// Intensity-weighted mean position, meters.
    pub fn centroid(&self, grid: &VoxelGrid) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for (&i, &w) in self.members.iter().zip(&self.intensities) {
            let [ix, iy, iz] = voxel_coords(grid, i);
            let p = grid.position(ix as usize, iy as usize, iz as usize);
            for a in 0..3 {
                acc[a] += w * p[a];
            }
            wsum += w;
        }
        acc.map(|v| v / wsum)
    }

    /// Axis-aligned bounds of the member voxel centers, meters.
    pub fn bounding_box(&self, grid: &VoxelGrid) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.members {
            let [ix, iy, iz] = voxel_coords(grid, i);
            let p = grid.position(ix as usize, iy as usize, iz as usize);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub position: [f64; 3],
    pub peak: f64,
}

fn voxel_coords(grid: &VoxelGrid, i: usize) -> [i64; 3] {
    let [_, ny, nz] = grid.counts;
    [(i / (ny * nz)) as i64, ((i / nz) % ny) as i64, (i % nz) as i64]
}

/// Splits `voxels` into connected components. Output order follows the
/// smallest member index of each component, members sorted ascending.
pub fn connected_components(grid: &VoxelGrid, voxels: &[usize], connectivity: Connectivity) -> Vec<Vec<usize>> {
    if voxels.is_empty() {
        return Vec::new();
    }
    let coords: Vec<[i64; 3]> = voxels.iter().map(|&i| voxel_coords(grid, i)).collect();
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for c in &coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let dims = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1) as usize);
    let local = |c: [i64; 3]| -> usize {
        (((c[0] - lo[0]) as usize * dims[1]) + (c[1] - lo[1]) as usize) * dims[2] + (c[2] - lo[2]) as usize
    };
    // slot -> position in `voxels` + 1, 0 when empty
    let mut slot = vec![0usize; dims.iter().product()];
    let mut order: Vec<usize> = (0..voxels.len()).collect();
    order.sort_by_key(|&k| voxels[k]);
    for &k in &order {
        slot[local(coords[k])] = k + 1;
    }
    let offsets = neighbour_offsets(connectivity);
    let mut seen = vec![false; voxels.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for &k0 in &order {
        if seen[k0] {
            continue;
        }
        seen[k0] = true;
        queue.push_back(k0);
        let mut comp = Vec::new();
        while let Some(k) = queue.pop_front() {
            comp.push(voxels[k]);
            let c = coords[k];
            for off in &offsets {
                let n = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                if (0..3).any(|a| n[a] < lo[a] || n[a] > hi[a]) {
                    continue;
                }
                let s = slot[local(n)];
                if s != 0 && !seen[s - 1] {
                    seen[s - 1] = true;
                    queue.push_back(s - 1);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn neighbour_offsets(connectivity: Connectivity) -> Vec<[i64; 3]> {
    let mut v = Vec::new();
    for dx in -1..=1i64 {
        for dy in -1..=1i64 {
            for dz in -1..=1i64 {
                let m = dx.abs() + dy.abs() + dz.abs();
                if m == 0 || (connectivity == Connectivity::Face && m > 1) {
                    continue;
                }
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Voxel count over the number of lattice voxels inside the convex hull of
/// the member centers. Planar patches use the exact polygon hull; volumes
/// use a discrete-orientation polytope over all primitive integer
/// directions with components in `[-2, 2]`, which bounds the hull tightly
/// for the small patches handled here.
pub fn solidity(coords: &[[i64; 3]], planar: bool) -> f64 {
    if coords.len() <= 2 {
        return 1.0;
    }
    let hull_count = if planar {
        let pts: Vec<(i64, i64)> = coords.iter().map(|c| (c[0], c[2])).collect();
        polygon_hull_count(&pts)
    } else {
        dop_hull_count(coords)
    };
    coords.len() as f64 / hull_count as f64
}

fn cross2(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross2(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_hull_count(points: &[(i64, i64)]) -> usize {
    let hull = convex_hull(points);
    let (x0, x1) = (points.iter().map(|p| p.0).min().unwrap(), points.iter().map(|p| p.0).max().unwrap());
    let (y0, y1) = (points.iter().map(|p| p.1).min().unwrap(), points.iter().map(|p| p.1).max().unwrap());
    let inside = |q: (i64, i64)| -> bool {
        match hull.len() {
            1 => q == hull[0],
            2 => cross2(hull[0], hull[1], q) == 0,
            n => (0..n).all(|i| cross2(hull[i], hull[(i + 1) % n], q) >= 0),
        }
    };
    let mut count = 0;
    for x in x0..=x1 {
        for y in y0..=y1 {
            if inside((x, y)) {
                count += 1;
            }
        }
    }
    count
}

fn dop_directions() -> Vec<[i64; 3]> {
    let mut dirs = Vec::new();
    for a in -2..=2i64 {
        for b in -2..=2i64 {
            for c in -2..=2i64 {
                if (a, b, c) <= (0, 0, 0) {
                    continue; // one of each +/- pair
                }
                let g = gcd(gcd(a.abs(), b.abs()), c.abs());
                if g == 1 {
                    dirs.push([a, b, c]);
                }
            }
        }
    }
    dirs
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn dop_hull_count(coords: &[[i64; 3]]) -> usize {
    let dirs = dop_directions();
    let dot = |d: &[i64; 3], c: &[i64; 3]| d[0] * c[0] + d[1] * c[1] + d[2] * c[2];
    let slabs: Vec<(i64, i64)> = dirs
        .iter()
        .map(|d| {
            coords.iter().fold((i64::MAX, i64::MIN), |(lo, hi), c| {
                let v = dot(d, c);
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for c in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let mut count = 0;
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let q = [x, y, z];
                if dirs.iter().zip(&slabs).all(|(d, &(a, b))| {
                    let v = dot(d, &q);
                    v >= a && v <= b
                }) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Eccentricity of the second-moment ellipse (ellipsoid) of the patch,
/// treating each voxel as a unit cell: `sqrt(1 - l_min / l_max)` of the
/// covariance eigenvalues.
pub fn eccentricity(coords: &[[i64; 3]], planar: bool) -> f64 {
    let n = coords.len() as f64;
    let axes: &[usize] = if planar { &[0, 2] } else { &[0, 1, 2] };
    let mean: Vec<f64> = axes.iter().map(|&a| coords.iter().map(|c| c[a] as f64).sum::<f64>() / n).collect();
    let cov = |i: usize, j: usize| -> f64 {
        let s: f64 = coords
            .iter()
            .map(|c| (c[axes[i]] as f64 - mean[i]) * (c[axes[j]] as f64 - mean[j]))
            .sum::<f64>()
            / n;
        if i == j {
            s + 1.0 / 12.0
        } else {
            s
        }
    };
    let (lmin, lmax) = if planar {
        let m = Matrix2::new(cov(0, 0), cov(0, 1), cov(1, 0), cov(1, 1));
        let e = SymmetricEigen::new(m).eigenvalues;
        (e.min(), e.max())
    } else {
        let m = Matrix3::from_fn(cov);
        let e = SymmetricEigen::new(m).eigenvalues;
        (e.min(), e.max())
    };
    (1.0 - lmin / lmax).max(0.0).sqrt()
}

/// Diagnostic counts from one call to [`detect_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectStats {
    pub initial_patches: usize,
    pub rethresholds: usize,
    pub dropped_multi: usize,
    pub dropped_noise: usize,
}

pub fn detect(frame: &Frame, params: &DetectParams) -> Vec<Localization> {
    detect_with_stats(frame, params).0
}

pub fn detect_with_stats(frame: &Frame, params: &DetectParams) -> (Vec<Localization>, DetectStats) {
    let mut stats = DetectStats::default();
    let fmax = frame.max() as f64;
    let thr = match params.threshold {
        Threshold::FrameFraction(f) => f * fmax,
        Threshold::Absolute(v) => v,
    };
    if !(fmax > 0.0) || thr >= fmax {
        return (Vec::new(), stats);
    }
    let above = above_threshold(frame, thr);
    let bounds = params.bounds(&frame.grid);
    let mut out = Vec::new();
    let comps = connected_components(&frame.grid, &above, params.connectivity);
    stats.initial_patches = comps.len();
    for comp in comps {
        resolve(frame, comp, thr, 0, params, &bounds, &mut out, &mut stats);
    }
    (out, stats)
}

/// Flat indices of voxels strictly above `thr`.
pub fn above_threshold(frame: &Frame, thr: f64) -> Vec<usize> {
    frame.values.iter().enumerate().filter(|(_, &v)| v as f64 > thr).map(|(i, _)| i).collect()
}

#[allow(clippy::too_many_arguments)]
fn resolve(
    frame: &Frame,
    members: Vec<usize>,
    thr: f64,
    depth: usize,
    params: &DetectParams,
    bounds: &FeatureBounds,
    out: &mut Vec<Localization>,
    stats: &mut DetectStats,
) {
    let patch = Patch::new(frame, members);
    match patch.classify(bounds) {
        PatchClass::Single => out.push(Localization { position: patch.centroid(&frame.grid), peak: patch.peak }),
        PatchClass::Noise => stats.dropped_noise += 1,
        PatchClass::Multi if depth >= params.max_iterations => stats.dropped_multi += 1,
        PatchClass::Multi => {
            stats.rethresholds += 1;
            let next = thr * params.step;
            let kept: Vec<usize> =
                patch.members.iter().zip(&patch.intensities).filter(|(_, &v)| v > next).map(|(&i, _)| i).collect();
            if kept.is_empty() {
                stats.dropped_multi += 1;
                return;
            }
            for comp in connected_components(&frame.grid, &kept, params.connectivity) {
                resolve(frame, comp, next, depth + 1, params, bounds, out, stats);
            }
        }
    }
}

/// Detections of every frame of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSet {
    pub frames: Vec<Vec<Localization>>,
    pub grid: VoxelGrid,
}

impl LocalizationSet {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frame_index,x,y,z,peak_intensity")?;
        for (k, f) in self.frames.iter().enumerate() {
            for l in f {
                let [x, y, z] = l.position;
                writeln!(w, "{k},{x:e},{y:e},{z:e},{:e}", l.peak)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(r: R, grid: VoxelGrid, n_frames: usize) -> crate::Result<Self> {
        let mut frames = vec![Vec::new(); n_frames];
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || crate::Error::Format(format!("localization line {}", lineno + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let k: usize = f[0].parse().map_err(|_| bad())?;
            let mut v = [0.0; 4];
            for a in 0..4 {
                v[a] = f[a + 1].parse().map_err(|_| bad())?;
            }
            if k >= frames.len() {
                frames.resize(k + 1, Vec::new());
            }
            frames[k].push(Localization { position: [v[0], v[1], v[2]], peak: v[3] });
        }
        Ok(Self { frames, grid })
    }
}

/// Localization counts per cell. A planar map projects positions along y.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub grid: VoxelGrid,
    pub counts: Vec<u32>,
    pub discarded: usize,
}

impl DensityMap {
    pub fn new(grid: VoxelGrid) -> Self {
        Self { grid, counts: vec![0; grid.len()], discarded: 0 }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn add(&mut self, p: [f64; 3]) {
        let g = self.grid.to_grid(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if a == 1 && self.grid.counts[1] == 1 {
                continue;
            }
            let r = g[a].round();
            if r < 0.0 || r >= self.grid.counts[a] as f64 || !r.is_finite() {
                self.discarded += 1;
                return;
            }
            idx[a] = r as usize;
        }
        self.counts[self.grid.index(idx[0], idx[1], idx[2])] += 1;
    }

    /// Adds another partial map on the same grid.
    pub fn merge(&mut self, other: &DensityMap) {
        assert_eq!(self.grid.counts, other.grid.counts);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.discarded += other.discarded;
    }
}

pub fn accumulate(locs: &LocalizationSet, map_grid: VoxelGrid) -> DensityMap {
    let mut map = DensityMap::new(map_grid);
    for f in &locs.frames {
        for l in f {
            map.add(l.position);
        }
    }
    map
}

/// Gaussian smoothing with half-sample symmetric borders; total mass is
/// preserved. `sigma` is in cells.
pub fn render(map: &DensityMap, sigma: f64) -> Vec<f64> {
    let mut data: Vec<f64> = map.counts.iter().map(|&c| c as f64).collect();
    if sigma <= 0.0 {
        return data;
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }
    let counts = map.grid.counts;
    for axis in 0..3 {
        if counts[axis] > 1 {
            data = convolve_axis(&data, counts, axis, &kernel, radius);
        }
    }
    data
}

fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_axis(data: &[f64], counts: [usize; 3], axis: usize, kernel: &[f64], radius: i64) -> Vec<f64> {
    let stride = match axis {
        0 => counts[1] * counts[2],
        1 => counts[2],
        _ => 1,
    };
    let n = counts[axis] as i64;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % counts[axis]) as i64;
        let base = i - pos as usize * stride;
        *o = kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * data[base + reflect(pos + k as i64 - radius, n) * stride])
            .sum();
    }
    out
}
