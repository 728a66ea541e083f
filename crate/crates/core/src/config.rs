//! Experiment configuration, read from TOML with one flat section per stage.
//! Units are SI (meters, seconds, hertz) unless a key says otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beamform::Apodization;
use crate::error::{Error, Result};
use crate::geometry::{ArrayConfig, ImagingScheme, VoxelGrid, DEFAULT_FOCAL_DEPTH, SOUND_SPEED};
use crate::localize::{Connectivity, DetectParams, FeatureBounds, Threshold};
use crate::phantom::Tube;
use crate::svdfilter::AutoThreshold;
use crate::waveform::{CENTER_FREQUENCY, PULSE_CYCLES, SAMPLING_FREQUENCY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub center_frequency: f64,
    pub cycles: u32,
    pub sampling_frequency: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self { center_frequency: CENTER_FREQUENCY, cycles: PULSE_CYCLES, sampling_frequency: SAMPLING_FREQUENCY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub sound_speed: f64,
    /// Scale echoes by the cosine of the arrival angle.
    pub obliquity: bool,
    /// Analytic-signal upsampling used by the beamformer.
    pub upsample: usize,
    /// Receive Tukey taper; 0 disables apodization.
    pub tukey_alpha: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { sound_speed: SOUND_SPEED, obliquity: false, upsample: 8, tukey_alpha: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Sweep,
    Tubes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    /// Label used in metrics rows.
    pub label: String,
    pub sweep_x: f64,
    pub sweep_z: f64,
    pub sweep_y_start: f64,
    pub sweep_y_end: f64,
    pub sweep_y_step: f64,
    /// Tube centerline points, one entry per tube.
    pub tube_x: Vec<f64>,
    pub tube_y: Vec<f64>,
    pub tube_z: Vec<f64>,
    /// Angle in the x-z plane from +x toward +z, degrees.
    pub tube_azimuth_deg: Vec<f64>,
    /// Angle out of the y = 0 plane, degrees.
    pub tube_tilt_deg: Vec<f64>,
    pub tube_radius: f64,
    pub tube_length: f64,
    /// Scatterers per tube per frame.
    pub concentration: usize,
    pub total_per_tube: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::two_tube(1, 300)
    }
}

impl PhantomConfig {
    fn tubes_through_center(label: &str, azimuths: &[f64], tilts: &[f64], concentration: usize, total: usize) -> Self {
        let n = azimuths.len();
        Self {
            kind: PhantomKind::Tubes,
            label: label.into(),
            sweep_x: 0.0,
            sweep_z: 20e-3,
            sweep_y_start: -5e-3,
            sweep_y_end: 5e-3,
            sweep_y_step: 0.2e-3,
            tube_x: vec![0.0; n],
            tube_y: vec![0.0; n],
            tube_z: vec![20e-3; n],
            tube_azimuth_deg: azimuths.to_vec(),
            tube_tilt_deg: tilts.to_vec(),
            tube_radius: 1e-4,
            tube_length: 8e-3,
            concentration,
            total_per_tube: total,
            seed: 1,
        }
    }

    /// Two tubes crossing at 20 mm depth, both inclined out of the central
    /// plane.
    pub fn two_tube(concentration: usize, total_per_tube: usize) -> Self {
        Self::tubes_through_center("2tube", &[30.0, -30.0], &[25.0, -40.0], concentration, total_per_tube)
    }

    pub fn five_tube(concentration: usize, total_per_tube: usize) -> Self {
        Self::tubes_through_center(
            "5tube",
            &[-60.0, -30.0, 0.0, 30.0, 60.0],
            &[25.0, -35.0, 30.0, -25.0, 35.0],
            concentration,
            total_per_tube,
        )
    }

    /// Single scatterer stepped through elevation at (0, y, 20 mm).
    pub fn sweep() -> Self {
        Self { kind: PhantomKind::Sweep, label: "sweep".into(), ..Self::two_tube(1, 1) }
    }

    pub fn tubes(&self) -> Result<Vec<Tube>> {
        let n = self.tube_x.len();
        let lens = [self.tube_y.len(), self.tube_z.len(), self.tube_azimuth_deg.len(), self.tube_tilt_deg.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Config("tube_x, tube_y, tube_z, tube_azimuth_deg and tube_tilt_deg must have equal length".into()));
        }
        (0..n)
            .map(|k| {
                Tube::from_angles(
                    [self.tube_x[k], self.tube_y[k], self.tube_z[k]],
                    self.tube_azimuth_deg[k],
                    self.tube_tilt_deg[k],
                    self.tube_radius,
                    self.tube_length,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { x_min: -4e-3, x_max: 4e-3, y_min: -5.1e-3, y_max: 5.1e-3, z_min: 16e-3, z_max: 24e-3, spacing: 1e-4 }
    }
}

impl GridConfig {
    pub fn volume(&self) -> Result<VoxelGrid> {
        VoxelGrid::from_extent([self.x_min, self.y_min, self.z_min], [self.x_max, self.y_max, self.z_max], self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemesConfig {
    /// Any of "ef", "cs", "vip", "3d".
    pub list: Vec<String>,
    pub focal_depth: f64,
}

impl Default for SchemesConfig {
    fn default() -> Self {
        Self { list: ["ef", "cs", "vip", "3d"].map(String::from).to_vec(), focal_depth: DEFAULT_FOCAL_DEPTH }
    }
}

impl SchemesConfig {
    pub fn schemes(&self) -> Result<Vec<ImagingScheme>> {
        let mut out: Vec<ImagingScheme> = Vec::new();
        for name in &self.list {
            let s = match name.parse::<ImagingScheme>().map_err(|e| Error::Config(e.to_string()))? {
                ImagingScheme::Ef { .. } => ImagingScheme::Ef { focal_depth: self.focal_depth },
                s => s,
            };
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
            if out.iter().any(|o| o.tag() == s.tag()) {
                return Err(Error::Config(format!("scheme {name} listed twice")));
            }
            out.push(s);
        }
        if out.is_empty() {
            return Err(Error::Config("no imaging scheme selected".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// `inf` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { snr_db: 3.0, seed: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvdMode {
    Off,
    Manual,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdConfig {
    pub mode: SvdMode,
    /// Leading singular vectors removed.
    pub low_cut: usize,
    /// Exclusive upper cut; 0 keeps everything above `low_cut`.
    pub high_cut: usize,
    pub auto_correlation: f64,
    pub auto_max_vectors: usize,
}

impl Default for SvdConfig {
    fn default() -> Self {
        let a = AutoThreshold::default();
        Self { mode: SvdMode::Off, low_cut: 0, high_cut: 0, auto_correlation: a.correlation, auto_max_vectors: a.max_vectors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdReference {
    /// Fraction of each frame's maximum.
    Frame,
    /// Fraction of the maximum over the whole stack.
    Stack,
    /// Absolute envelope level.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub threshold: f64,
    pub reference: ThresholdReference,
    /// "full" (8 / 26 neighbours) or "face" (4 / 6).
    pub connectivity: String,
    pub step: f64,
    pub max_iterations: usize,
    pub min_size_2d: usize,
    pub max_size_2d: usize,
    pub min_size_3d: usize,
    pub max_size_3d: usize,
    pub min_solidity_2d: f64,
    pub min_solidity_3d: f64,
    pub max_eccentricity: f64,
    /// Gaussian sigma for rendered density maps, in cells.
    pub render_sigma: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            reference: ThresholdReference::Stack,
            connectivity: "full".into(),
            step: 1.2,
            max_iterations: 8,
            min_size_2d: 2,
            max_size_2d: 40,
            min_size_3d: 4,
            max_size_3d: 170,
            min_solidity_2d: 0.75,
            min_solidity_3d: 0.68,
            max_eccentricity: 0.999,
            render_sigma: 1.0,
        }
    }
}

impl LocalizeConfig {
    /// Detection parameters once the threshold level is known.
    pub fn params(&self, threshold: Threshold) -> Result<DetectParams> {
        let connectivity = match self.connectivity.as_str() {
            "full" => Connectivity::Full,
            "face" => Connectivity::Face,
            other => return Err(Error::Config(format!("unknown connectivity {other:?}"))),
        };
        Ok(DetectParams {
            threshold,
            connectivity,
            bounds_2d: FeatureBounds {
                min_size: self.min_size_2d,
                max_size: self.max_size_2d,
                min_solidity: self.min_solidity_2d,
                max_eccentricity: self.max_eccentricity,
            },
            bounds_3d: FeatureBounds {
                min_size: self.min_size_3d,
                max_size: self.max_size_3d,
                min_solidity: self.min_solidity_3d,
                max_eccentricity: self.max_eccentricity,
            },
            step: self.step,
            max_iterations: self.max_iterations,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Match tolerance in wavelengths.
    pub tolerance_wavelengths: f64,
    pub ring_center_x: f64,
    pub ring_center_z: f64,
    pub ring_radii: Vec<f64>,
    pub angular_step_deg: f64,
    pub radial_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tolerance_wavelengths: 0.5,
            ring_center_x: 0.0,
            ring_center_z: 20e-3,
            ring_radii: vec![350e-6, 750e-6],
            angular_step_deg: 1.0,
            radial_window: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub write_rf: bool,
    pub write_stacks: bool,
    /// Floor of log-compressed images, dB.
    pub image_floor_db: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), write_rf: false, write_stacks: false, image_floor_db: -40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub array: ArrayConfig,
    pub pulse: PulseConfig,
    pub acquisition: AcquisitionConfig,
    pub phantom: PhantomConfig,
    pub grid: GridConfig,
    pub schemes: SchemesConfig,
    pub noise: NoiseConfig,
    pub svd: SvdConfig,
    pub localize: LocalizeConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Overrides both seeds from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.noise.seed = seed.wrapping_add(1);
    }

    pub fn apodization(&self) -> Apodization {
        if self.acquisition.tukey_alpha > 0.0 {
            Apodization::Tukey(self.acquisition.tukey_alpha)
        } else {
            Apodization::None
        }
    }

    pub fn wavelength(&self) -> f64 {
        self.acquisition.sound_speed / self.pulse.center_frequency
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        crate::geometry::build_array(&self.array).map_err(cfg_err)?;
        self.grid.volume().map_err(cfg_err)?;
        self.schemes.schemes()?;
        if self.phantom.kind == PhantomKind::Tubes {
            self.phantom.tubes().map_err(cfg_err)?;
        }
        if !(self.acquisition.sound_speed > 0.0) || self.acquisition.upsample == 0 {
            return Err(Error::Config("sound speed and upsampling must be positive".into()));
        }
        let l = &self.localize;
        if !(l.threshold > 0.0) || !(l.step > 1.0) || !(l.render_sigma >= 0.0) {
            return Err(Error::Config("localize: threshold > 0, step > 1 and render_sigma >= 0 required".into()));
        }
        if matches!(l.reference, ThresholdReference::Frame | ThresholdReference::Stack) && l.threshold >= 1.0 {
            return Err(Error::Config("relative threshold must be below 1".into()));
        }
        l.params(Threshold::Absolute(1.0))?;
        if !(self.metrics.tolerance_wavelengths > 0.0) {
            return Err(Error::Config("metrics tolerance must be positive".into()));
        }
        if self.svd.mode == SvdMode::Manual && self.svd.high_cut != 0 && self.svd.high_cut <= self.svd.low_cut {
            return Err(Error::Config("svd high_cut must exceed low_cut".into()));
        }
        Ok(())
    }
}
