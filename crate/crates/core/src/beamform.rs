//! Delay-and-sum image formation for the four imaging schemes.
//!
//! Channels are converted to upsampled analytic signals before delay and
//! sum. The Hilbert transform commutes with time shifts and sums, so the
//! magnitude of the complex sum equals the envelope of the summed RF along
//! each image line, without having to sample the RF at the voxel pitch.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::time::{Duration, Instant};

use crate::error::{param, Error, Result};
use crate::forward::{reduce_channels, transmit_delay, Acquisition, ChannelLayout, RfFrame, TransmitMode};
use crate::geometry::{channel_map, ArrayGeometry, ImagingScheme, VoxelGrid};
use crate::waveform::{analytic_signal, Pulse};

/// Lateral receive weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Apodization {
    None,
    Tukey(f64),
}

impl Default for Apodization {
    fn default() -> Self {
        Apodization::Tukey(0.5)
    }
}

/// Tapered-cosine window on `u` in `[0, 1]`.
pub fn tukey(u: f64, alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    let u = u.clamp(0.0, 1.0);
    let edge = alpha / 2.0;
    if u < edge {
        0.5 * (1.0 + (std::f64::consts::PI * (u / edge - 1.0)).cos())
    } else if u > 1.0 - edge {
        0.5 * (1.0 + (std::f64::consts::PI * ((u - 1.0) / edge + 1.0)).cos())
    } else {
        1.0
    }
}

impl Apodization {
    /// Weights for channels at lateral positions `xs`.
    pub fn weights(&self, xs: &[f64]) -> Vec<f64> {
        match *self {
            Apodization::None => vec![1.0; xs.len()],
            Apodization::Tukey(alpha) => {
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi <= lo {
                    return vec![1.0; xs.len()];
                }
                xs.iter().map(|&x| tukey((x - lo) / (hi - lo), alpha)).collect()
            }
        }
    }
}

/// One envelope image (planar) or volume, z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub grid: VoxelGrid,
    pub values: Vec<f32>,
}

impl Frame {
    pub fn zeros(grid: VoxelGrid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn max(&self) -> f32 {
        self.values.iter().cloned().fold(0.0, f32::max)
    }

    pub fn argmax(&self) -> [usize; 3] {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let [_, ny, nz] = self.grid.counts;
        [i / (ny * nz), (i / nz) % ny, i % nz]
    }

    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.values[self.grid.index(ix, iy, iz)]
    }

    /// Maximum over y, giving an (x, z) image.
    pub fn mip_y(&self) -> Frame {
        let [nx, ny, nz] = self.grid.counts;
        let mut out = Frame::zeros(self.grid.plane_at(0.0));
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let v = self.at(ix, iy, iz);
                    let o = &mut out.values[ix * nz + iz];
                    *o = o.max(v);
                }
            }
        }
        out
    }
}

/// Index of the `y = 0` plane of a volume grid.
pub fn central_index(grid: &VoxelGrid) -> Result<usize> {
    let ny = grid.counts[1];
    if ny.is_multiple_of(2) {
        return Err(param(format!(
            "grid has {ny} elevational samples; use an odd count so the y = 0 plane is sampled"
        )));
    }
    let mid = ny / 2;
    if grid.coord(1, mid).abs() > 1e-6 * grid.spacing[1] {
        return Err(param("grid is not centered on y = 0; adjust the elevational extent"));
    }
    Ok(mid)
}

/// The `y = 0` plane of a volume grid, with the exact y coordinate of that sample.
pub fn central_plane(grid: &VoxelGrid) -> Result<VoxelGrid> {
    let mid = central_index(grid)?;
    Ok(grid.plane_at(grid.coord(1, mid)))
}

/// Extracts the `y = 0` plane of a volume without resampling.
pub fn central_slice(vol: &Frame) -> Result<Frame> {
    if vol.grid.counts[1] == 1 {
        return Ok(vol.clone());
    }
    let mid = central_index(&vol.grid)?;
    let [nx, _, nz] = vol.grid.counts;
    let mut out = Frame::zeros(central_plane(&vol.grid)?);
    for ix in 0..nx {
        for iz in 0..nz {
            out.values[ix * nz + iz] = vol.at(ix, mid, iz);
        }
    }
    Ok(out)
}

/// Everything about a delay-and-sum reconstruction that does not depend on
/// the RF content, prepared once per stack.
#[derive(Debug, Clone)]
pub struct BeamformPlan {
    pub scheme: ImagingScheme,
    /// Grid of the output frames.
    pub grid: VoxelGrid,
    /// Grid the voxel positions are taken from. Equal to `grid` except for
    /// CS, which reuses the columns of the volume grid.
    source_grid: VoxelGrid,
    /// Elevational indices of `source_grid` that are reconstructed.
    y_indices: Vec<usize>,
    receivers: Vec<[f64; 3]>,
    weights: Vec<f32>,
    /// Transmit arrival per output voxel for EF; `None` for a plane wave.
    tx_table: Option<Vec<f64>>,
    acq: Acquisition,
    pulse_center: f64,
    pub upsample: usize,
    geometry_hash: u64,
}

impl BeamformPlan {
    /// `volume` is the 3D grid; planar schemes image its `y = 0` plane.
    pub fn new(
        scheme: ImagingScheme,
        geom: &ArrayGeometry,
        volume: &VoxelGrid,
        pulse: &Pulse,
        acq: &Acquisition,
        apodization: Apodization,
        upsample: usize,
    ) -> Result<Self> {
        scheme.validate()?;
        volume.validate()?;
        if upsample == 0 {
            return Err(param("upsample factor must be at least 1"));
        }
        let c = acq.sound_speed;
        let map = channel_map(scheme, geom, c);
        let xs: Vec<f64> = map.positions.iter().map(|p| p[0]).collect();
        let weights = apodization.weights(&xs).into_iter().map(|w| w as f32).collect();

        let (grid, source_grid, y_indices) = match scheme {
            ImagingScheme::ThreeD => (*volume, *volume, (0..volume.counts[1]).collect()),
            ImagingScheme::Cs => {
                if volume.counts[1] == 1 {
                    (*volume, *volume, vec![0])
                } else {
                    (central_plane(volume)?, *volume, vec![central_index(volume)?])
                }
            }
            ImagingScheme::Vip | ImagingScheme::Ef { .. } => {
                let plane = if volume.counts[1] == 1 { *volume } else { central_plane(volume)? };
                (plane, plane, vec![0])
            }
        };

        let tx_table = match TransmitMode::for_scheme(scheme) {
            TransmitMode::Plane => None,
            tx => {
                let [nx, ny, nz] = grid.counts;
                let mut table = Vec::with_capacity(grid.len());
                for ix in 0..nx {
                    for iy in 0..ny {
                        for iz in 0..nz {
                            table.push(transmit_delay(grid.position(ix, iy, iz), tx, geom, c));
                        }
                    }
                }
                Some(table)
            }
        };

        Ok(Self {
            scheme,
            grid,
            source_grid,
            y_indices,
            receivers: map.positions,
            weights,
            tx_table,
            acq: *acq,
            pulse_center: pulse.center_offset(),
            upsample,
            geometry_hash: geom.hash(),
        })
    }

    pub fn n_channels(&self) -> usize {
        self.receivers.len()
    }

    fn check_layout(&self, rf: &RfFrame) -> Result<()> {
        let ok = match (self.scheme, rf.layout) {
            (ImagingScheme::ThreeD | ImagingScheme::Cs, ChannelLayout::Full) => true,
            (s, ChannelLayout::Reduced(r)) => s.is_reduced() && s.tag() == r.tag(),
            _ => false,
        };
        if !ok || rf.n_channels != self.n_channels() {
            return Err(Error::Layout(format!(
                "{} beamforming needs {} channels, frame has {} ({:?})",
                self.scheme,
                self.n_channels(),
                rf.n_channels,
                rf.layout
            )));
        }
        if rf.geometry_hash != self.geometry_hash {
            return Err(Error::Layout("frame was recorded with a different array".into()));
        }
        if rf.fs != self.acq.fs || rf.t0 != self.acq.t0 {
            return Err(Error::Layout("frame sampling window differs from the plan".into()));
        }
        Ok(())
    }
}

/// Output columns beamformed together.
const COLUMN_BLOCK: usize = 256;

/// Zero samples stored on each side of every channel.
const GUARD: usize = 1;

/// Adding this to a float in `[0, 2^23)` leaves the nearest integer in the
/// low mantissa bits.
const ROUND_MAGIC: f32 = 8_388_608.0;
const ROUND_MAGIC_BITS: u32 = 0x4B00_0000;

/// Weighted, upsampled analytic channel data in f32. Channel `ch` occupies
/// `data[ch * stride..(ch + 1) * stride]` with `GUARD` zeros on each side.
struct AnalyticChannels {
    data: Vec<Complex<f32>>,
    stride: usize,
}

fn analytic_channels(rf: &RfFrame, upsample: usize, weights: &[f32]) -> AnalyticChannels {
    let n = rf.n_samples;
    // Pad to a power of two with room for the circular wrap.
    let padded = (n + 32).next_power_of_two();
    let len = n * upsample;
    let per_channel: Vec<Vec<Complex<f32>>> = (0..rf.n_channels)
        .into_par_iter()
        .map_init(FftPlanner::new, |planner, ch| {
            let zero = Complex::new(0.0, 0.0);
            let w = weights[ch];
            if w == 0.0 {
                return vec![zero; len + 2 * GUARD];
            }
            let mut trace = rf.channel(ch).to_vec();
            trace.resize(padded, 0.0);
            let mut out = vec![zero; GUARD];
            out.extend(
                analytic_signal(&trace, upsample, planner)
                    .into_iter()
                    .take(len)
                    .map(|c| Complex::new(c.re as f32, c.im as f32) * w),
            );
            out.extend([zero; GUARD]);
            out
        })
        .collect();
    AnalyticChannels { data: per_channel.concat(), stride: len + 2 * GUARD }
}

/// Nearest sample index of `base + sqrt(dh2 + z2) * k`, clamped to `[0, last]`.
#[inline]
fn delay_indices(out: &mut [u32], base: &[f32], z2: &[f32], dh2: f32, k: f32, last: f32) {
    let n = out.len();
    let (base, z2) = (&base[..n], &z2[..n]);
    for i in 0..n {
        let p = (base[i] + (dh2 + z2[i]).sqrt() * k).max(0.0).min(last);
        out[i] = (p + ROUND_MAGIC).to_bits() - ROUND_MAGIC_BITS;
    }
}

#[inline]
fn gather_add(acc: &mut [Complex<f32>], trace: &[Complex<f32>], idx: &[u32]) {
    for (a, &i) in acc.iter_mut().zip(idx) {
        *a += trace[i as usize];
    }
}

/// Delay-and-sum of one RF frame whose layout matches the plan.
///
/// Delays are rounded to the nearest sample of the upsampled analytic
/// signal; at the default 8x upsampling the phase error stays within
/// 1/64 of a carrier cycle.
pub fn das(rf: &RfFrame, plan: &BeamformPlan) -> Result<Frame> {
    plan.check_layout(rf)?;
    let channels = analytic_channels(rf, plan.upsample, &plan.weights);
    let grid = plan.grid;
    let src = plan.source_grid;
    let [nx, ny_out, nz] = grid.counts;
    let rate = plan.acq.fs * plan.upsample as f64;
    let c = plan.acq.sound_speed;
    let k_dist = (rate / c) as f32;
    let offset = GUARD as f64 + (plan.pulse_center - plan.acq.t0) * rate;

    let z2: Vec<f32> = (0..nz).map(|iz| (src.coord(2, iz) * src.coord(2, iz)) as f32).collect();
    let plane_base: Vec<f32> = (0..nz).map(|iz| (src.coord(2, iz) / c * rate + offset) as f32).collect();

    let columns: Vec<(usize, usize)> =
        (0..nx).flat_map(|ix| (0..ny_out).map(move |iy| (ix, iy))).collect();
    // Columns are processed in blocks so the block's accumulators stay in
    // cache while every channel streams through once per block.
    let last = (channels.stride - 1) as f32;
    let per_block: Vec<Vec<f32>> = columns
        .par_chunks(COLUMN_BLOCK)
        .map(|block| {
            let bases: Vec<Vec<f32>> = block
                .iter()
                .map(|&(ix, iy_out)| match &plan.tx_table {
                    None => plane_base.clone(),
                    Some(t) => (0..nz).map(|iz| (t[grid.index(ix, iy_out, iz)] * rate + offset) as f32).collect(),
                })
                .collect();
            let xy: Vec<(f64, f64)> = block
                .iter()
                .map(|&(ix, iy_out)| (src.coord(0, ix), src.coord(1, plan.y_indices[iy_out])))
                .collect();
            let mut acc = vec![Complex::<f32>::new(0.0, 0.0); block.len() * nz];
            let mut idx = vec![0u32; nz];
            for (ch, rx) in plan.receivers.iter().enumerate() {
                if plan.weights[ch] == 0.0 {
                    continue;
                }
                let trace = &channels.data[ch * channels.stride..(ch + 1) * channels.stride];
                for (b, &(x, y)) in xy.iter().enumerate() {
                    let dx = x - rx[0];
                    let dy = y - rx[1];
                    delay_indices(&mut idx, &bases[b], &z2, (dx * dx + dy * dy) as f32, k_dist, last);
                    gather_add(&mut acc[b * nz..(b + 1) * nz], trace, &idx);
                }
            }
            acc.iter().map(|a| a.norm()).collect()
        })
        .collect();

    let mut frame = Frame::zeros(grid);
    frame.values = per_block.concat();
    Ok(frame)
}

/// Envelope frames of one scheme over an acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformedStack {
    pub grid: VoxelGrid,
    pub frames: Vec<Vec<f32>>,
    pub scheme: ImagingScheme,
    /// Hash of the array geometry and configuration that produced the stack.
    pub provenance: u64,
}

impl BeamformedStack {
    pub fn new(grid: VoxelGrid, scheme: ImagingScheme, provenance: u64) -> Self {
        Self { grid, frames: Vec::new(), scheme, provenance }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, k: usize) -> Frame {
        Frame { grid: self.grid, values: self.frames[k].clone() }
    }

    pub fn value_count(&self) -> usize {
        self.grid.len() * self.frames.len()
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if frame.grid.counts != self.grid.counts {
            return Err(Error::Layout("frame grid differs from stack grid".into()));
        }
        self.frames.push(frame.values);
        Ok(())
    }
}

/// Timing and size accounting for one processing stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageCost {
    pub channels: usize,
    pub frames: usize,
    pub values: usize,
    pub wall_clock: Duration,
}

/// Reduces (for VIP/EF) and beamforms full-aperture RF frames.
pub fn beamform_frame(rf: &RfFrame, geom: &ArrayGeometry, plan: &BeamformPlan) -> Result<Frame> {
    if plan.scheme.is_reduced() && rf.layout == ChannelLayout::Full {
        let reduced = reduce_channels(rf, plan.scheme, geom)?;
        das(&reduced, plan)
    } else {
        das(rf, plan)
    }
}

/// Beamforms every frame of an acquisition into a stack.
pub fn beamform_stack<I>(
    frames: I,
    geom: &ArrayGeometry,
    plan: &BeamformPlan,
    provenance: u64,
) -> Result<(BeamformedStack, StageCost)>
where
    I: IntoIterator<Item = Result<RfFrame>>,
{
    let start = Instant::now();
    let mut stack = BeamformedStack::new(plan.grid, plan.scheme, provenance);
    for rf in frames {
        stack.push(beamform_frame(&rf?, geom, plan)?)?;
    }
    let cost = StageCost {
        channels: plan.n_channels(),
        frames: stack.n_frames(),
        values: stack.value_count(),
        wall_clock: start.elapsed(),
    };
    Ok((stack, cost))
}
