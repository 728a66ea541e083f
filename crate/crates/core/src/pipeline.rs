//! Experiment driver. [`run`] streams every frame through simulation,
//! beamforming and localization in memory; the `*_stage` functions run the
//! same steps one at a time through files in an output directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::beamform::{beamform_frame, BeamformPlan, BeamformedStack, Frame, StageCost};
use crate::config::{ExperimentConfig, PhantomKind, SvdMode, ThresholdReference};
use crate::error::{Error, Result};
use crate::forward::{add_noise, simulate_frame, Acquisition, ChannelLayout, RfFrame, TransmitMode};
use crate::geometry::{build_array, ArrayGeometry, ImagingScheme, VoxelGrid};
use crate::io::{read_stack, write_density_csv, write_pgm, write_stack, ImageScale, RfHeader, RfReader, RfWriter};
use crate::localize::{accumulate, detect_with_stats, render, DensityMap, DetectStats, LocalizationSet, Threshold};
use crate::metrics::{
    elevational_sensitivity, error_stats, match_sequence, radial_profile, ErrorStats, MetricsRow, RingParams,
    SummaryTable,
};
use crate::phantom::{cross_tube_phantom, frame_rng, single_scatter_sweep, PhantomSequence};
use crate::svdfilter::{auto_threshold, filter_stack, to_casorati, AutoThreshold};
use crate::waveform::{make_pulse, Pulse};

pub const GROUND_TRUTH: &str = "ground_truth.csv";
pub const CONFIG_COPY: &str = "config.toml";
pub const PEAKS: &str = "peaks.csv";
pub const COST: &str = "cost.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.txt";
pub const SENSITIVITY: &str = "sensitivity.csv";
pub const TIMINGS: &str = "timings.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const FAILED: &str = "FAILED";

const RF_PLANE: &str = "rf_plane.ulrf";
const RF_EF: &str = "rf_ef.ulrf";

pub fn stack_file(tag: &str) -> String {
    format!("stack_{tag}.ulbs")
}

pub fn filtered_file(tag: &str) -> String {
    format!("filtered_{tag}.ulbs")
}

pub fn localization_file(tag: &str) -> String {
    format!("localizations_{tag}.csv")
}

/// Geometry, pulse, acquisition window and beamforming plans derived from a
/// configuration.
pub struct Setup {
    pub geom: ArrayGeometry,
    pub pulse: Pulse,
    pub volume: VoxelGrid,
    pub acq: Acquisition,
    pub plans: Vec<BeamformPlan>,
    /// Hash of the configuration, stored with every stack.
    pub provenance: u64,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let geom = build_array(&cfg.array)?;
        let pulse = make_pulse(cfg.pulse.center_frequency, cfg.pulse.cycles, cfg.pulse.sampling_frequency)?;
        let volume = cfg.grid.volume()?;
        let mut acq = Acquisition::covering(&geom, &volume, &pulse, cfg.acquisition.sound_speed);
        acq.obliquity = cfg.acquisition.obliquity;
        let plans = cfg
            .schemes
            .schemes()?
            .into_iter()
            .map(|s| BeamformPlan::new(s, &geom, &volume, &pulse, &acq, cfg.apodization(), cfg.acquisition.upsample))
            .collect::<Result<Vec<_>>>()?;
        let digest = Sha256::digest(cfg.to_toml().as_bytes());
        let provenance = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
        Ok(Self { geom, pulse, volume, acq, plans, provenance })
    }

    fn needs_plane(&self) -> bool {
        self.plans.iter().any(|p| !matches!(p.scheme, ImagingScheme::Ef { .. }))
    }

    fn ef_mode(&self) -> Option<TransmitMode> {
        self.plans
            .iter()
            .find(|p| matches!(p.scheme, ImagingScheme::Ef { .. }))
            .map(|p| TransmitMode::for_scheme(p.scheme))
    }

    fn header(&self, n_frames: usize) -> RfHeader {
        RfHeader {
            n_channels: self.geom.n_elements(),
            n_samples: self.acq.n_samples,
            fs: self.acq.fs,
            t0: self.acq.t0,
            layout: ChannelLayout::Full,
            geometry_hash: self.geom.hash(),
            n_frames,
        }
    }
}

fn at_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage, source: Box::new(e) },
    })
}

pub fn build_phantom(cfg: &ExperimentConfig) -> Result<PhantomSequence> {
    let p = &cfg.phantom;
    match p.kind {
        PhantomKind::Sweep => single_scatter_sweep(p.sweep_x, p.sweep_z, p.sweep_y_start, p.sweep_y_end, p.sweep_y_step),
        PhantomKind::Tubes => cross_tube_phantom(&p.tubes()?, p.concentration, p.total_per_tube, p.seed),
    }
}

/// Per-frame noise seed; `stream` separates the plane-wave and focused
/// acquisitions of the same frame.
fn noise_seed(seed: u64, frame: usize, stream: usize) -> u64 {
    frame_rng(seed, 2 * frame + stream).random()
}

/// Full-aperture RF of one frame with noise, rounded to the f32 precision of
/// RF archives so in-memory and staged runs see identical samples.
pub fn acquire_frame(
    cfg: &ExperimentConfig,
    setup: &Setup,
    truth: &PhantomSequence,
    frame: usize,
    tx: TransmitMode,
) -> Result<RfFrame> {
    let scatterers = &truth.frames[frame];
    let stream = usize::from(tx != TransmitMode::Plane);
    let mut rf = if scatterers.is_empty() {
        RfFrame::zeros(setup.geom.n_elements(), &setup.acq, ChannelLayout::Full, setup.geom.hash())
    } else {
        let clean = simulate_frame(scatterers, &setup.geom, &setup.pulse, tx, &setup.acq)?;
        add_noise(&clean, cfg.noise.snr_db, noise_seed(cfg.noise.seed, frame, stream))?
    };
    for v in &mut rf.data {
        *v = *v as f32 as f64;
    }
    Ok(rf)
}

/// Voxels of one frame that can still exceed the detection threshold.
#[derive(Debug, Clone, Default)]
struct SparseFrame {
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseFrame {
    fn keep(frame: &Frame, floor: f32) -> Self {
        let mut s = Self::default();
        for (i, &v) in frame.values.iter().enumerate() {
            if v >= floor {
                s.indices.push(i as u32);
                s.values.push(v);
            }
        }
        s
    }

    fn dense(&self, grid: VoxelGrid) -> Frame {
        let mut f = Frame::zeros(grid);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            f.values[i as usize] = v;
        }
        f
    }
}

/// Beamformed frames of one scheme, either complete or reduced to the
/// voxels that can matter for detection.
enum Retained {
    Dense(BeamformedStack),
    Sparse { grid: VoxelGrid, frames: Vec<SparseFrame> },
}

impl Retained {
    fn n_frames(&self) -> usize {
        match self {
            Retained::Dense(s) => s.n_frames(),
            Retained::Sparse { frames, .. } => frames.len(),
        }
    }

    fn frame(&self, k: usize) -> Frame {
        match self {
            Retained::Dense(s) => s.frame(k),
            Retained::Sparse { grid, frames } => frames[k].dense(*grid),
        }
    }
}

fn retention_floor(cfg: &ExperimentConfig, frame_max: f32, running_max: f32) -> f32 {
    let l = &cfg.localize;
    match l.reference {
        ThresholdReference::Stack => (0.5 * l.threshold) as f32 * running_max,
        ThresholdReference::Frame => (l.threshold as f32 * frame_max) * (1.0 - 1e-6),
        ThresholdReference::Absolute => l.threshold as f32,
    }
}

/// Results of one scheme.
#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub scheme: ImagingScheme,
    /// Maximum of every beamformed frame, before SVD filtering.
    pub peaks: Vec<f32>,
    pub cost: StageCost,
    pub localizations: LocalizationSet,
    pub detect_stats: DetectStats,
    /// Singular vectors removed below; zero without filtering.
    pub svd_low_cut: usize,
    pub density: DensityMap,
    /// Rendered density as an (x, z) image; volumes are projected by their
    /// maximum over y.
    pub image: Vec<f64>,
    pub image_grid: VoxelGrid,
    pub errors: ErrorStats,
    /// `(radius, angle in degrees, value)` around the ring center.
    pub profiles: Vec<(f64, Vec<(f64, f64)>)>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub truth: PhantomSequence,
    pub schemes: Vec<SchemeOutcome>,
    pub rows: Vec<MetricsRow>,
    /// Elevational sensitivity per scheme for sweep phantoms.
    pub sensitivity: Option<Vec<(ImagingScheme, Vec<(f64, f64)>)>>,
    pub timings: Vec<(String, Duration)>,
}

impl RunReport {
    pub fn scheme(&self, tag: &str) -> Option<&SchemeOutcome> {
        self.schemes.iter().find(|s| s.scheme.tag() == tag)
    }
}

/// Runs the whole experiment in memory and writes every output to
/// `out_dir`. On failure a `FAILED` marker naming the stage is left there.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(out_dir)?;
    let _ = fs::remove_file(out_dir.join(FAILED));
    let result = run_inner(cfg, out_dir);
    if let Err(e) = &result {
        let stage = match e {
            Error::Stage { stage, .. } => *stage,
            _ => "run",
        };
        let _ = fs::write(out_dir.join(FAILED), format!("stage: {stage}\nerror: {e}\n"));
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    at_stage("config", cfg.validate())?;
    let mut timings = Vec::new();
    let setup = at_stage("config", Setup::new(cfg))?;
    fs::write(out_dir.join(CONFIG_COPY), cfg.to_toml())?;

    let t = Instant::now();
    let truth = at_stage("phantom", build_phantom(cfg))?;
    at_stage("phantom", truth.write_csv(BufWriter::new(File::create(out_dir.join(GROUND_TRUTH))?)))?;
    timings.push(("phantom".to_string(), t.elapsed()));

    let t = Instant::now();
    let (retained, peaks, costs) = at_stage("beamform", acquire_and_beamform(cfg, &setup, &truth, out_dir))?;
    timings.push(("simulate+beamform".to_string(), t.elapsed()));
    for (plan, c) in setup.plans.iter().zip(&costs) {
        timings.push((format!("beamform_{}", plan.scheme.tag()), c.wall_clock));
    }
    write_peaks(&out_dir.join(PEAKS), &setup, &peaks)?;
    write_cost(&out_dir.join(COST), &setup, &costs)?;

    let t = Instant::now();
    let mut filtered = Vec::with_capacity(retained.len());
    for r in retained {
        filtered.push(at_stage("svd", apply_svd(cfg, r))?);
    }
    timings.push(("svd".to_string(), t.elapsed()));

    let t = Instant::now();
    let mut located = Vec::new();
    for (plan, (r, low)) in setup.plans.iter().zip(&filtered) {
        let (set, stats) = at_stage("localize", localize(cfg, r))?;
        set.write_csv(BufWriter::new(File::create(out_dir.join(localization_file(plan.scheme.tag())))?))?;
        located.push((plan.scheme, set, stats, *low));
    }
    drop(filtered);
    timings.push(("localize".to_string(), t.elapsed()));

    let t = Instant::now();
    let sets: Vec<(ImagingScheme, LocalizationSet)> = located.iter().map(|(s, l, _, _)| (*s, l.clone())).collect();
    let (rows, errors) = at_stage("metrics", evaluate(cfg, &truth, &sets))?;
    write_metrics(out_dir, &rows, &sets, &errors)?;
    timings.push(("metrics".to_string(), t.elapsed()));

    let t = Instant::now();
    let peak_table: Vec<(ImagingScheme, Vec<f32>)> = setup.plans.iter().map(|p| p.scheme).zip(peaks).collect();
    let reports = at_stage("report", report(cfg, out_dir, &truth, &sets, &peak_table))?;
    timings.push(("report".to_string(), t.elapsed()));

    let mut schemes = Vec::new();
    for ((((scheme, localizations, detect_stats, svd_low_cut), (density, image, image_grid, profiles)), err), cost) in
        located.into_iter().zip(reports.maps).zip(errors).zip(costs)
    {
        let peaks = peak_table.iter().find(|(s, _)| *s == scheme).map(|(_, p)| p.clone()).unwrap_or_default();
        schemes.push(SchemeOutcome {
            scheme,
            peaks,
            cost,
            localizations,
            detect_stats,
            svd_low_cut,
            density,
            image,
            image_grid,
            errors: err,
            profiles,
        });
    }
    write_timings(&out_dir.join(TIMINGS), &timings)?;
    write_manifest(out_dir)?;
    Ok(RunReport { truth, schemes, rows, sensitivity: reports.sensitivity, timings })
}

/// Simulates and beamforms every frame, keeping for each scheme only what
/// detection and SVD filtering need.
fn acquire_and_beamform(
    cfg: &ExperimentConfig,
    setup: &Setup,
    truth: &PhantomSequence,
    out_dir: &Path,
) -> Result<(Vec<Retained>, Vec<Vec<f32>>, Vec<StageCost>)> {
    let n = truth.n_frames();
    let dense = cfg.svd.mode != SvdMode::Off || cfg.output.write_stacks;
    let mut retained: Vec<Retained> = setup
        .plans
        .iter()
        .map(|p| {
            if dense {
                Retained::Dense(BeamformedStack::new(p.grid, p.scheme, setup.provenance))
            } else {
                Retained::Sparse { grid: p.grid, frames: Vec::with_capacity(n) }
            }
        })
        .collect();
    let mut peaks = vec![Vec::with_capacity(n); setup.plans.len()];
    let mut running = vec![0f32; setup.plans.len()];
    let mut elapsed = vec![Duration::ZERO; setup.plans.len()];

    let mut plane_writer = match cfg.output.write_rf && setup.needs_plane() {
        true => Some(RfWriter::create(&out_dir.join(RF_PLANE), setup.header(n))?),
        false => None,
    };
    let mut ef_writer = match cfg.output.write_rf && setup.ef_mode().is_some() {
        true => Some(RfWriter::create(&out_dir.join(RF_EF), setup.header(n))?),
        false => None,
    };

    let chunk = 4 * rayon::current_num_threads().max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let results: Vec<Result<FrameOutput>> = (start..end)
            .into_par_iter()
            .map(|k| process_frame(cfg, setup, truth, k, plane_writer.is_some() || ef_writer.is_some()))
            .collect();
        for r in results {
            let out = r?;
            if let (Some(w), Some(rf)) = (plane_writer.as_mut(), &out.plane_rf) {
                w.write(rf)?;
            }
            if let (Some(w), Some(rf)) = (ef_writer.as_mut(), &out.ef_rf) {
                w.write(rf)?;
            }
            for (s, (frame, dt)) in out.frames.into_iter().enumerate() {
                let m = frame.max();
                running[s] = running[s].max(m);
                peaks[s].push(m);
                elapsed[s] += dt;
                match &mut retained[s] {
                    Retained::Dense(stack) => stack.push(frame)?,
                    Retained::Sparse { frames, .. } => {
                        frames.push(SparseFrame::keep(&frame, retention_floor(cfg, m, running[s])))
                    }
                }
            }
        }
        log::debug!("beamformed frames {start}..{end} of {n}");
        start = end;
    }
    if let Some(w) = plane_writer {
        w.finish()?;
    }
    if let Some(w) = ef_writer {
        w.finish()?;
    }
    if cfg.output.write_stacks {
        for r in &retained {
            if let Retained::Dense(stack) = r {
                write_stack(&out_dir.join(stack_file(stack.scheme.tag())), stack)?;
            }
        }
    }
    let costs = setup
        .plans
        .iter()
        .zip(&elapsed)
        .map(|(p, &wall_clock)| StageCost {
            channels: p.n_channels(),
            frames: n,
            values: p.grid.len() * n,
            wall_clock,
        })
        .collect();
    Ok((retained, peaks, costs))
}

struct FrameOutput {
    frames: Vec<(Frame, Duration)>,
    plane_rf: Option<RfFrame>,
    ef_rf: Option<RfFrame>,
}

fn process_frame(
    cfg: &ExperimentConfig,
    setup: &Setup,
    truth: &PhantomSequence,
    k: usize,
    keep_rf: bool,
) -> Result<FrameOutput> {
    let plane = match setup.needs_plane() {
        true => Some(acquire_frame(cfg, setup, truth, k, TransmitMode::Plane)?),
        false => None,
    };
    let ef = match setup.ef_mode() {
        Some(tx) => Some(acquire_frame(cfg, setup, truth, k, tx)?),
        None => None,
    };
    let mut frames = Vec::with_capacity(setup.plans.len());
    for plan in &setup.plans {
        let rf = match plan.scheme {
            ImagingScheme::Ef { .. } => ef.as_ref(),
            _ => plane.as_ref(),
        }
        .expect("acquisition exists for every planned scheme");
        let t = Instant::now();
        let frame = beamform_frame(rf, &setup.geom, plan)?;
        frames.push((frame, t.elapsed()));
    }
    Ok(FrameOutput {
        frames,
        plane_rf: if keep_rf { plane } else { None },
        ef_rf: if keep_rf { ef } else { None },
    })
}

/// Filters a dense stack when SVD filtering is enabled. Filtered values are
/// replaced by their magnitude. Returns the low cut used.
fn apply_svd(cfg: &ExperimentConfig, r: Retained) -> Result<(Retained, usize)> {
    let stack = match (cfg.svd.mode, r) {
        (SvdMode::Off, r) => return Ok((r, 0)),
        (_, Retained::Dense(s)) => s,
        (_, Retained::Sparse { .. }) => unreachable!("SVD filtering always keeps dense stacks"),
    };
    let (filtered, low) = svd_filter_stack(cfg, &stack)?;
    Ok((Retained::Dense(filtered), low))
}

fn svd_filter_stack(cfg: &ExperimentConfig, stack: &BeamformedStack) -> Result<(BeamformedStack, usize)> {
    let s = &cfg.svd;
    let low = match s.mode {
        SvdMode::Off => return Ok((stack.clone(), 0)),
        SvdMode::Manual => s.low_cut,
        SvdMode::Auto => {
            let params = AutoThreshold { correlation: s.auto_correlation, max_vectors: s.auto_max_vectors };
            auto_threshold(&to_casorati(stack)?, params)
        }
    };
    let high = (s.high_cut > 0).then_some(s.high_cut);
    let mut out = filter_stack(stack, low, high)?;
    for f in &mut out.frames {
        for v in f.iter_mut() {
            *v = v.abs();
        }
    }
    log::info!("{}: removed {low} singular vectors", stack.scheme.tag());
    Ok((out, low))
}

fn detection_threshold(cfg: &ExperimentConfig, stack_max: f32) -> Threshold {
    let l = &cfg.localize;
    match l.reference {
        ThresholdReference::Stack => Threshold::Absolute(l.threshold * stack_max as f64),
        ThresholdReference::Frame => Threshold::FrameFraction(l.threshold),
        ThresholdReference::Absolute => Threshold::Absolute(l.threshold),
    }
}

fn localize(cfg: &ExperimentConfig, r: &Retained) -> Result<(LocalizationSet, DetectStats)> {
    let n = r.n_frames();
    let grid = match r {
        Retained::Dense(s) => s.grid,
        Retained::Sparse { grid, .. } => *grid,
    };
    let stack_max = match r {
        Retained::Dense(s) => s.frames.iter().flatten().cloned().fold(0.0, f32::max),
        Retained::Sparse { frames, .. } => frames.iter().flat_map(|f| &f.values).cloned().fold(0.0, f32::max),
    };
    let params = cfg.localize.params(detection_threshold(cfg, stack_max))?;
    let per_frame: Vec<_> = (0..n).into_par_iter().map(|k| detect_with_stats(&r.frame(k), &params)).collect();
    let mut stats = DetectStats::default();
    let mut frames = Vec::with_capacity(n);
    for (locs, s) in per_frame {
        stats.initial_patches += s.initial_patches;
        stats.rethresholds += s.rethresholds;
        stats.dropped_multi += s.dropped_multi;
        stats.dropped_noise += s.dropped_noise;
        frames.push(locs);
    }
    Ok((LocalizationSet { frames, grid }, stats))
}

/// Scores every scheme against the ground truth.
pub fn evaluate(
    cfg: &ExperimentConfig,
    truth: &PhantomSequence,
    sets: &[(ImagingScheme, LocalizationSet)],
) -> Result<(Vec<MetricsRow>, Vec<ErrorStats>)> {
    let tol = cfg.metrics.tolerance_wavelengths * cfg.wavelength();
    let truth_frames: Vec<Vec<[f64; 3]>> = (0..truth.n_frames()).map(|k| truth.positions(k)).collect();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (scheme, set) in sets {
        let mut detected: Vec<Vec<[f64; 3]>> =
            set.frames.iter().map(|f| f.iter().map(|l| l.position).collect()).collect();
        detected.resize(truth_frames.len(), Vec::new());
        let m = match_sequence(&detected, &truth_frames, tol, scheme.is_planar())?;
        let counts = m.counts();
        let err = error_stats(&m, cfg.wavelength());
        rows.push(MetricsRow {
            scheme: scheme.tag().to_string(),
            phantom: cfg.phantom.label.clone(),
            concentration: match cfg.phantom.kind {
                PhantomKind::Tubes => cfg.phantom.concentration,
                PhantomKind::Sweep => 1,
            },
            frames: truth.n_frames(),
            counts,
            scores: crate::metrics::scores(counts),
            errors: err.axes,
        });
        errors.push(err);
    }
    Ok((rows, errors))
}

fn write_metrics(
    out_dir: &Path,
    rows: &[MetricsRow],
    sets: &[(ImagingScheme, LocalizationSet)],
    errors: &[ErrorStats],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_dir.join(METRICS))?);
    writeln!(w, "{}", MetricsRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    w.flush()?;
    fs::write(out_dir.join(SUMMARY), SummaryTable(rows).to_string())?;
    for ((scheme, _), err) in sets.iter().zip(errors) {
        let mut w = BufWriter::new(File::create(out_dir.join(format!("errors_{}.csv", scheme.tag())))?);
        writeln!(w, "frame_index,truth_x,truth_y,truth_z,err_x,err_y,err_z")?;
        for p in &err.pairs {
            let [x, y, z] = p.truth_position;
            let [ex, ey, ez] = p.error;
            writeln!(w, "{},{x:e},{y:e},{z:e},{ex:e},{ey:e},{ez:e}", p.frame)?;
        }
        w.flush()?;
    }
    Ok(())
}

type SchemeMaps = (DensityMap, Vec<f64>, VoxelGrid, Vec<(f64, Vec<(f64, f64)>)>);

struct Reports {
    maps: Vec<SchemeMaps>,
    sensitivity: Option<Vec<(ImagingScheme, Vec<(f64, f64)>)>>,
}

/// Density maps, images, radial profiles and the elevational sensitivity.
fn report(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    truth: &PhantomSequence,
    sets: &[(ImagingScheme, LocalizationSet)],
    peaks: &[(ImagingScheme, Vec<f32>)],
) -> Result<Reports> {
    let mut maps = Vec::new();
    for (scheme, set) in sets {
        let tag = scheme.tag();
        let density = accumulate(set, set.grid);
        write_density_csv(BufWriter::new(File::create(out_dir.join(format!("density_{tag}.csv")))?), &density)?;
        let rendered = Frame {
            grid: set.grid,
            values: render(&density, cfg.localize.render_sigma).into_iter().map(|v| v as f32).collect(),
        };
        let planar = if set.grid.is_planar() { rendered } else { rendered.mip_y() };
        let image: Vec<f64> = planar.values.iter().map(|&v| v as f64).collect();
        let [nx, _, nz] = planar.grid.counts;
        let mut depth_rows = vec![0.0; image.len()];
        for ix in 0..nx {
            for iz in 0..nz {
                depth_rows[iz * nx + ix] = image[ix * nz + iz];
            }
        }
        let scale = ImageScale::Log { floor_db: cfg.output.image_floor_db };
        if !write_pgm(&out_dir.join(format!("density_{tag}.pgm")), &depth_rows, nx, scale)? {
            log::warn!("{tag}: no localizations, density image is blank");
        }

        let mut profiles = Vec::new();
        if cfg.phantom.kind == PhantomKind::Tubes {
            let m = &cfg.metrics;
            let params = RingParams { angular_step_deg: m.angular_step_deg, radial_window: m.radial_window };
            let mut w = BufWriter::new(File::create(out_dir.join(format!("profile_{tag}.csv")))?);
            writeln!(w, "radius,angle_deg,value")?;
            for &radius in &m.ring_radii {
                let curve = radial_profile(&image, &planar.grid, [m.ring_center_x, m.ring_center_z], radius, params)?;
                for (a, v) in &curve {
                    writeln!(w, "{radius:e},{a},{v:e}")?;
                }
                profiles.push((radius, curve));
            }
            w.flush()?;
        }
        maps.push((density, image, planar.grid, profiles));
    }

    let sensitivity = if cfg.phantom.kind == PhantomKind::Sweep {
        let ys: Vec<f64> = truth.frames.iter().map(|f| f.first().map_or(0.0, |s| s.position[1])).collect();
        let mut table = Vec::new();
        for (scheme, p) in peaks {
            let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            table.push((*scheme, elevational_sensitivity(&ys, &p)?));
        }
        let mut w = BufWriter::new(File::create(out_dir.join(SENSITIVITY))?);
        let tags: Vec<&str> = table.iter().map(|(s, _)| s.tag()).collect();
        writeln!(w, "y,{}", tags.join(","))?;
        for (k, y) in ys.iter().enumerate() {
            let vals: Vec<String> = table.iter().map(|(_, c)| format!("{:e}", c[k].1)).collect();
            writeln!(w, "{y:e},{}", vals.join(","))?;
        }
        w.flush()?;
        Some(table)
    } else {
        None
    };
    Ok(Reports { maps, sensitivity })
}

fn write_peaks(path: &Path, setup: &Setup, peaks: &[Vec<f32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let tags: Vec<&str> = setup.plans.iter().map(|p| p.scheme.tag()).collect();
    writeln!(w, "frame_index,{}", tags.join(","))?;
    let n = peaks.first().map_or(0, Vec::len);
    for k in 0..n {
        let vals: Vec<String> = peaks.iter().map(|p| format!("{:e}", p[k])).collect();
        writeln!(w, "{k},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_peaks(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty peak table".into()))??;
    let mut cols: Vec<(String, Vec<f32>)> = header.split(',').skip(1).map(|t| (t.to_string(), Vec::new())).collect();
    for line in lines {
        let line = line?;
        for (c, v) in cols.iter_mut().zip(line.split(',').skip(1)) {
            c.1.push(v.trim().parse().map_err(|_| Error::Format(format!("bad peak value {v:?}")))?);
        }
    }
    Ok(cols)
}

fn write_cost(path: &Path, setup: &Setup, costs: &[StageCost]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "scheme,channels,frames,values")?;
    for (p, c) in setup.plans.iter().zip(costs) {
        writeln!(w, "{},{},{},{}", p.scheme.tag(), c.channels, c.frames, c.values)?;
    }
    w.flush()?;
    Ok(())
}

/// Channel counts, value counts and wall-clock times of the runs recorded
/// in `out_dir`, as a text table.
pub fn cost_table(out_dir: &Path) -> Result<String> {
    let cost = fs::read_to_string(require(out_dir.join(COST), "beamform")?)?;
    let mut out = format!("{:<6} {:>9} {:>7} {:>14}\n", "scheme", "channels", "frames", "values");
    for line in cost.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 {
            out += &format!("{:<6} {:>9} {:>7} {:>14}\n", f[0], f[1], f[2], f[3]);
        }
    }
    if let Ok(t) = fs::read_to_string(out_dir.join(TIMINGS)) {
        out += &format!("\n{:<24} {:>9}\n", "stage", "seconds");
        for line in t.lines().skip(1) {
            if let Some((name, secs)) = line.split_once(',') {
                out += &format!("{name:<24} {secs:>9}\n");
            }
        }
    }
    Ok(out)
}

fn append_timing(out_dir: &Path, name: &str, d: Duration) -> Result<()> {
    let path = out_dir.join(TIMINGS);
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "stage,seconds")?;
    }
    writeln!(f, "{name},{:.3}", d.as_secs_f64())?;
    Ok(())
}

/// Runs one file-based stage, tagging its errors and logging its duration.
fn stage<T>(name: &'static str, out_dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let r = at_stage(name, f())?;
    append_timing(out_dir, name, t.elapsed())?;
    Ok(r)
}

fn write_timings(path: &Path, timings: &[(String, Duration)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "stage,seconds")?;
    for (name, d) in timings {
        writeln!(w, "{name},{:.3}", d.as_secs_f64())?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of every regular file in `out_dir` except the manifest itself,
/// sorted by name.
pub fn write_manifest(out_dir: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(out_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    let mut w = BufWriter::new(File::create(out_dir.join(MANIFEST))?);
    for name in names {
        let digest = Sha256::digest(fs::read(out_dir.join(&name))?);
        writeln!(w, "{}  {name}", hex::encode(digest))?;
    }
    w.flush()?;
    Ok(())
}

fn open_truth(out_dir: &Path) -> Result<PhantomSequence> {
    let path = out_dir.join(GROUND_TRUTH);
    let file = File::open(&path)
        .map_err(|e| Error::Config(format!("{} is missing ({e}); run the phantom stage first", path.display())))?;
    PhantomSequence::read_csv(BufReader::new(file))
}

fn require(path: PathBuf, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{} is missing; run the {stage} stage first", path.display())))
    }
}

/// Writes the ground truth and a copy of the configuration.
pub fn phantom_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PhantomSequence> {
    stage("phantom", out_dir, || {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(CONFIG_COPY), cfg.to_toml())?;
        let truth = build_phantom(cfg)?;
        truth.write_csv(BufWriter::new(File::create(out_dir.join(GROUND_TRUTH))?))?;
        Ok(truth)
    })
}

/// Synthesizes full-aperture RF archives for the ground truth in `out_dir`.
pub fn simulate_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    stage("simulate", out_dir, || {
        let setup = Setup::new(cfg)?;
        let truth = open_truth(out_dir)?;
        let n = truth.n_frames();
        let mut modes = Vec::new();
        if setup.needs_plane() {
            modes.push((TransmitMode::Plane, RF_PLANE));
        }
        if let Some(tx) = setup.ef_mode() {
            modes.push((tx, RF_EF));
        }
        for (tx, name) in modes {
            let mut w = RfWriter::create(&out_dir.join(name), setup.header(n))?;
            for k in 0..n {
                w.write(&acquire_frame(cfg, &setup, &truth, k, tx)?)?;
            }
            w.finish()?;
        }
        Ok(())
    })
}

/// Beamforms the RF archives of `out_dir` into one stack per scheme.
pub fn beamform_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<StageCost>> {
    stage("beamform", out_dir, || {
        let setup = Setup::new(cfg)?;
        let mut costs = Vec::new();
        let mut peaks = Vec::new();
        for plan in &setup.plans {
            let name = if matches!(plan.scheme, ImagingScheme::Ef { .. }) { RF_EF } else { RF_PLANE };
            let reader = RfReader::open(&require(out_dir.join(name), "simulate")?)?;
            if reader.header.geometry_hash != setup.geom.hash() {
                return Err(Error::Layout(format!("{name} was recorded with a different array")));
            }
            let frames: Vec<RfFrame> = reader.collect::<Result<_>>()?;
            let start = Instant::now();
            let beamformed: Vec<Frame> =
                frames.par_iter().map(|rf| beamform_frame(rf, &setup.geom, plan)).collect::<Result<_>>()?;
            let mut stack = BeamformedStack::new(plan.grid, plan.scheme, setup.provenance);
            for f in beamformed {
                stack.push(f)?;
            }
            peaks.push(stack.frames.iter().map(|f| f.iter().cloned().fold(0.0, f32::max)).collect());
            write_stack(&out_dir.join(stack_file(plan.scheme.tag())), &stack)?;
            costs.push(StageCost {
                channels: plan.n_channels(),
                frames: stack.n_frames(),
                values: stack.value_count(),
                wall_clock: start.elapsed(),
            });
        }
        write_peaks(&out_dir.join(PEAKS), &setup, &peaks)?;
        write_cost(&out_dir.join(COST), &setup, &costs)?;
        Ok(costs)
    })
}

/// Applies the configured SVD filter to every stack in `out_dir`.
pub fn svd_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<usize>> {
    stage("svd", out_dir, || {
        if cfg.svd.mode == SvdMode::Off {
            log::info!("SVD filtering disabled");
            return Ok(Vec::new());
        }
        let mut cuts = Vec::new();
        for scheme in cfg.schemes.schemes()? {
            let stack = read_stack(&require(out_dir.join(stack_file(scheme.tag())), "beamform")?)?;
            let (filtered, low) = svd_filter_stack(cfg, &stack)?;
            write_stack(&out_dir.join(filtered_file(scheme.tag())), &filtered)?;
            cuts.push(low);
        }
        Ok(cuts)
    })
}

/// Detects scatterers in every stack of `out_dir`, using the filtered
/// stacks when SVD filtering is enabled.
pub fn localize_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(ImagingScheme, LocalizationSet)>> {
    stage("localize", out_dir, || {
        let mut out = Vec::new();
        for scheme in cfg.schemes.schemes()? {
            let tag = scheme.tag();
            let path = match cfg.svd.mode {
                SvdMode::Off => require(out_dir.join(stack_file(tag)), "beamform")?,
                _ => require(out_dir.join(filtered_file(tag)), "svd")?,
            };
            let (set, _) = localize(cfg, &Retained::Dense(read_stack(&path)?))?;
            set.write_csv(BufWriter::new(File::create(out_dir.join(localization_file(tag)))?))?;
            out.push((scheme, set));
        }
        Ok(out)
    })
}

fn read_localizations(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    n_frames: usize,
) -> Result<Vec<(ImagingScheme, LocalizationSet)>> {
    let setup_grid = cfg.grid.volume()?;
    let mut sets = Vec::new();
    for scheme in cfg.schemes.schemes()? {
        let path = require(out_dir.join(localization_file(scheme.tag())), "localize")?;
        let grid = if scheme.is_planar() { crate::beamform::central_plane(&setup_grid)? } else { setup_grid };
        sets.push((scheme, LocalizationSet::read_csv(BufReader::new(File::open(path)?), grid, n_frames)?));
    }
    Ok(sets)
}

/// Scores the localizations in `out_dir` against its ground truth.
pub fn metrics_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetricsRow>> {
    stage("metrics", out_dir, || {
        let truth = open_truth(out_dir)?;
        let sets = read_localizations(cfg, out_dir, truth.n_frames())?;
        let (rows, errors) = evaluate(cfg, &truth, &sets)?;
        write_metrics(out_dir, &rows, &sets, &errors)?;
        Ok(rows)
    })
}

/// Renders density maps and profiles from the localizations in `out_dir`
/// and refreshes the manifest.
pub fn report_stage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    stage("report", out_dir, || {
        let truth = open_truth(out_dir)?;
        let sets = read_localizations(cfg, out_dir, truth.n_frames())?;
        let mut peaks = Vec::new();
        if cfg.phantom.kind == PhantomKind::Sweep {
            let table = read_peaks(&require(out_dir.join(PEAKS), "beamform")?)?;
            for (scheme, _) in &sets {
                let col = table
                    .iter()
                    .find(|(t, _)| t == scheme.tag())
                    .ok_or_else(|| Error::Format(format!("no peaks recorded for {}", scheme.tag())))?;
                peaks.push((*scheme, col.1.clone()));
            }
        }
        report(cfg, out_dir, &truth, &sets, &peaks)?;
        write_manifest(out_dir)
    })
}
