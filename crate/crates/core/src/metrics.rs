//! Detection scoring against ground truth, localization errors, radial
//! intensity profiles and elevational sensitivity curves.

use std::fmt;

use crate::error::{param, Error, Result};
use crate::geometry::VoxelGrid;

/// One matched detection/truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub detection: usize,
    pub truth: usize,
    /// Detection minus truth, meters.
    pub displacement: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<Pair>,
}

/// Per-frame matches of a whole sequence at one tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub frames: Vec<FrameMatch>,
    pub truths: Vec<Vec<[f64; 3]>>,
    pub tolerance: f64,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        self.frames.iter().fold(Counts::default(), |c, f| Counts {
            tp: c.tp + f.tp,
            fp: c.fp + f.fp,
            fn_: c.fn_ + f.fn_,
        })
    }
}

/// Pooled detection counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub sensitivity: f64,
    pub jaccard: f64,
}

/// Drops the elevational coordinate, for schemes that image the `y = 0`
/// plane only.
pub fn project_xz(p: [f64; 3]) -> [f64; 3] {
    [p[0], 0.0, p[2]]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Greedy matching in ascending pair distance among pairs within `tol`.
/// Ties are broken by detection then truth index.
pub fn match_points(detected: &[[f64; 3]], truth: &[[f64; 3]], tol: f64) -> FrameMatch {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let r = dist(*d, *t);
            if r <= tol {
                cand.push((r, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detected.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if det_used[i] || truth_used[j] {
            continue;
        }
        det_used[i] = true;
        truth_used[j] = true;
        let d = detected[i];
        let t = truth[j];
        pairs.push(Pair { detection: i, truth: j, displacement: [d[0] - t[0], d[1] - t[1], d[2] - t[2]] });
    }
    pairs.sort_by_key(|p| p.detection);
    FrameMatch { tp: pairs.len(), fp: detected.len() - pairs.len(), fn_: truth.len() - pairs.len(), pairs }
}

/// Matches every frame. With `planar` set, truth is projected onto the
/// imaging plane first.
pub fn match_sequence(
    detected: &[Vec<[f64; 3]>],
    truth: &[Vec<[f64; 3]>],
    tol: f64,
    planar: bool,
) -> Result<MatchResult> {
    if !(tol > 0.0) {
        return Err(param("match tolerance must be positive"));
    }
    if detected.len() != truth.len() {
        return Err(param(format!("{} detection frames for {} truth frames", detected.len(), truth.len())));
    }
    let truths: Vec<Vec<[f64; 3]>> = truth
        .iter()
        .map(|f| if planar { f.iter().map(|&p| project_xz(p)).collect() } else { f.clone() })
        .collect();
    let frames = detected
        .iter()
        .zip(&truths)
        .map(|(d, t)| {
            let d: Vec<[f64; 3]> = if planar { d.iter().map(|&p| project_xz(p)).collect() } else { d.clone() };
            match_points(&d, t, tol)
        })
        .collect();
    Ok(MatchResult { frames, truths, tolerance: tol })
}

/// Pooled scores; `None` when no detections and no truths were counted.
pub fn scores(c: Counts) -> Option<Scores> {
    let all = c.tp + c.fp + c.fn_;
    if all == 0 {
        return None;
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Some(Scores {
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        jaccard: c.tp as f64 / all as f64,
    })
}

/// Signed displacement of one matched pair, in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub frame: usize,
    pub truth_position: [f64; 3],
    pub error: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisStats {
    pub mean: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorStats {
    pub pairs: Vec<PairError>,
    /// x, y, z.
    pub axes: [AxisStats; 3],
}

impl ErrorStats {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn error_stats(m: &MatchResult, wavelength: f64) -> ErrorStats {
    let mut pairs = Vec::new();
    for (k, (f, truth)) in m.frames.iter().zip(&m.truths).enumerate() {
        for p in &f.pairs {
            pairs.push(PairError {
                frame: k,
                truth_position: truth[p.truth],
                error: p.displacement.map(|d| d / wavelength),
            });
        }
    }
    if pairs.is_empty() {
        return ErrorStats::default();
    }
    let n = pairs.len() as f64;
    let axes = [0, 1, 2].map(|a| AxisStats {
        mean: pairs.iter().map(|p| p.error[a]).sum::<f64>() / n,
        max_abs: pairs.iter().fold(0.0f64, |m, p| m.max(p.error[a].abs())),
    });
    ErrorStats { pairs, axes }
}

/// Bilinear sample of a planar image (x-major, z fastest) at `(x, z)`.
/// Returns `None` outside the sampled area.
pub fn bilinear(image: &[f64], grid: &VoxelGrid, x: f64, z: f64) -> Option<f64> {
    let [nx, _, nz] = grid.counts;
    let gx = (x - grid.origin[0]) / grid.spacing[0];
    let gz = (z - grid.origin[2]) / grid.spacing[2];
    let eps = 1e-9;
    if gx < -eps || gz < -eps || gx > (nx - 1) as f64 + eps || gz > (nz - 1) as f64 + eps {
        return None;
    }
    let gx = gx.clamp(0.0, (nx - 1) as f64);
    let gz = gz.clamp(0.0, (nz - 1) as f64);
    let ix = (gx.floor() as usize).min(nx.saturating_sub(2));
    let iz = (gz.floor() as usize).min(nz.saturating_sub(2));
    let fx = gx - ix as f64;
    let fz = gz - iz as f64;
    let at = |i: usize, k: usize| image[i.min(nx - 1) * nz + k.min(nz - 1)];
    Some(
        at(ix, iz) * (1.0 - fx) * (1.0 - fz)
            + at(ix + 1, iz) * fx * (1.0 - fz)
            + at(ix, iz + 1) * (1.0 - fx) * fz
            + at(ix + 1, iz + 1) * fx * fz,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingParams {
    pub angular_step_deg: f64,
    /// Radial samples on each side of the ring, one pixel apart.
    pub radial_window: usize,
}

impl Default for RingParams {
    fn default() -> Self {
        Self { angular_step_deg: 1.0, radial_window: 2 }
    }
}

/// Mean intensity around a half ring of `radius` about `center = (x, z)`,
/// for angles 0..=180 degrees measured from +x toward +z.
pub fn radial_profile(
    image: &[f64],
    grid: &VoxelGrid,
    center: [f64; 2],
    radius: f64,
    params: RingParams,
) -> Result<Vec<(f64, f64)>> {
    if !grid.is_planar() || image.len() != grid.len() {
        return Err(param("radial profile needs a planar image matching its grid"));
    }
    if !(params.angular_step_deg > 0.0) {
        return Err(param("angular step must be positive"));
    }
    let pixel = grid.spacing[0].min(grid.spacing[2]);
    let n_angles = (180.0 / params.angular_step_deg + 1e-9).floor() as usize + 1;
    let w = params.radial_window as i64;
    let mut curve = Vec::with_capacity(n_angles);
    for k in 0..n_angles {
        let theta = k as f64 * params.angular_step_deg;
        let (s, c) = theta.to_radians().sin_cos();
        let mut sum = 0.0;
        for j in -w..=w {
            let r = radius + j as f64 * pixel;
            let v = bilinear(image, grid, center[0] + r * c, center[1] + r * s).ok_or_else(|| {
                Error::Domain(format!("ring of radius {radius} m leaves the image at {theta} degrees"))
            })?;
            sum += v;
        }
        curve.push((theta, sum / (2 * w + 1) as f64));
    }
    Ok(curve)
}

/// Peaks of a profile: maximal runs above `level`, reported at the angle
/// of each run's maximum.
pub fn profile_peaks(curve: &[(f64, f64)], level: f64) -> Vec<(f64, f64)> {
    let mut peaks = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &(a, v) in curve {
        if v > level {
            best = match best {
                Some(b) if b.1 >= v => Some(b),
                _ => Some((a, v)),
            };
        } else if let Some(b) = best.take() {
            peaks.push(b);
        }
    }
    peaks.extend(best);
    peaks
}

/// Per-frame peaks normalized to the frame whose elevational position is
/// closest to zero.
pub fn elevational_sensitivity(y_positions: &[f64], peaks: &[f64]) -> Result<Vec<(f64, f64)>> {
    if y_positions.len() != peaks.len() || peaks.is_empty() {
        return Err(param("need one peak per sweep position"));
    }
    let k0 = (0..y_positions.len()).min_by(|&a, &b| y_positions[a].abs().total_cmp(&y_positions[b].abs())).unwrap();
    let reference = peaks[k0];
    if !(reference > 0.0) {
        return Err(Error::Domain("zero response at the elevational focus".into()));
    }
    Ok(y_positions.iter().zip(peaks).map(|(&y, &p)| (y, p / reference)).collect())
}

/// One row of the scheme comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scheme: String,
    pub phantom: String,
    pub concentration: usize,
    pub frames: usize,
    pub counts: Counts,
    pub scores: Option<Scores>,
    pub errors: [AxisStats; 3],
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "scheme,phantom,concentration,frames,tp,fp,fn,precision,sensitivity,jaccard,\
err_x_mean,err_x_max,err_y_mean,err_y_max,err_z_mean,err_z_max";

    pub fn csv(&self) -> String {
        let s = match self.scores {
            Some(s) => format!("{},{},{}", s.precision, s.sensitivity, s.jaccard),
            None => "NA,NA,NA".into(),
        };
        let e = self.errors;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.phantom,
            self.concentration,
            self.frames,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            s,
            e[0].mean,
            e[0].max_abs,
            e[1].mean,
            e[1].max_abs,
            e[2].mean,
            e[2].max_abs
        )
    }
}

/// Text table in the layout of the scheme comparison.
pub struct SummaryTable<'a>(pub &'a [MetricsRow]);

impl fmt::Display for SummaryTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>6} {:>10} {:>12} {:>8}", "phantom", "conc", "scheme", "precision", "sensitivity", "J.I.")?;
        for r in self.0 {
            let (p, s, j) = match r.scores {
                Some(s) => (format!("{:.3}", s.precision), format!("{:.3}", s.sensitivity), format!("{:.3}", s.jaccard)),
                None => ("n/a".into(), "n/a".into(), "n/a".into()),
            };
            writeln!(f, "{:<10} {:>5} {:>6} {:>10} {:>12} {:>8}", r.phantom, r.concentration, r.scheme, p, s, j)?;
        }
        Ok(())
    }
}
