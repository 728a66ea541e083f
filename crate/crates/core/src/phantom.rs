//! Ground-truth scatterer sequences: single-scatterer elevational sweeps and
//! cross-tube phantoms with scatterers redrawn uniformly inside each tube
//! every frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

use crate::error::{param, Error, Result};
use crate::forward::Scatterer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tube {
    /// A point on the centerline; the tube is centered on it.
    pub point: [f64; 3],
    /// Unit direction of the centerline.
    pub direction: [f64; 3],
    pub radius: f64,
    pub length: f64,
}

impl Tube {
    pub fn new(point: [f64; 3], direction: [f64; 3], radius: f64, length: f64) -> Result<Self> {
        let n = norm(direction);
        if !(n > 0.0) {
            return Err(param("tube direction must be non-zero"));
        }
        if !(radius > 0.0) || !(length > 0.0) {
            return Err(param("tube radius and length must be positive"));
        }
        Ok(Self { point, direction: direction.map(|v| v / n), radius, length })
    }

    /// Tube through `point` whose centerline projects onto the x-z plane at
    /// `azimuth_deg` from +x towards +z, tilted out of that plane by
    /// `tilt_deg` towards +y.
    pub fn from_angles(point: [f64; 3], azimuth_deg: f64, tilt_deg: f64, radius: f64, length: f64) -> Result<Self> {
        let (az, tilt) = (azimuth_deg.to_radians(), tilt_deg.to_radians());
        let d = [tilt.cos() * az.cos(), tilt.sin(), tilt.cos() * az.sin()];
        Self::new(point, d, radius, length)
    }

    pub fn distance_to_axis(&self, p: [f64; 3]) -> f64 {
        let r = sub(p, self.point);
        let along = dot(r, self.direction);
        norm(sub(r, self.direction.map(|v| v * along)))
    }

    /// Position along the centerline, relative to `point`.
    pub fn axial_coordinate(&self, p: [f64; 3]) -> f64 {
        dot(sub(p, self.point), self.direction)
    }

    /// Point on the centerline at signed distance `s` from `point`.
    pub fn at(&self, s: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.point[a] + s * self.direction[a])
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let (e1, e2) = orthonormal_pair(self.direction);
        let s = (rng.random::<f64>() - 0.5) * self.length;
        let (u, v) = loop {
            let u = (2.0 * rng.random::<f64>() - 1.0) * self.radius;
            let v = (2.0 * rng.random::<f64>() - 1.0) * self.radius;
            if u * u + v * v <= self.radius * self.radius {
                break (u, v);
            }
        };
        [0, 1, 2].map(|a| self.point[a] + s * self.direction[a] + u * e1[a] + v * e2[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSequence {
    pub frames: Vec<Vec<Scatterer>>,
    /// Tube of each scatterer, `-1` when not tube-bound.
    pub tube_ids: Vec<Vec<i32>>,
    pub tubes: Vec<Tube>,
    pub seed: u64,
    /// Scatterers per tube per frame.
    pub concentration: usize,
}

impl PhantomSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn positions(&self, frame: usize) -> Vec<[f64; 3]> {
        self.frames[frame].iter().map(|s| s.position).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "frame_index,tube_id,x,y,z")?;
        for (k, (frame, ids)) in self.frames.iter().zip(&self.tube_ids).enumerate() {
            for (s, id) in frame.iter().zip(ids) {
                let [x, y, z] = s.position;
                writeln!(w, "{k},{id},{x:e},{y:e},{z:e}")?;
            }
        }
        Ok(())
    }

    /// Reads ground truth written by [`write_csv`](Self::write_csv). Tube
    /// geometry and seed are not part of the file.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut frames: Vec<Vec<Scatterer>> = Vec::new();
        let mut tube_ids: Vec<Vec<i32>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("ground truth line {}: expected 5 fields", lineno + 1)));
            }
            let bad = |_| Error::Format(format!("ground truth line {}: bad number", lineno + 1));
            let k: usize = f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let id: i32 = f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = f[2 + a].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            }
            if k >= frames.len() {
                frames.resize(k + 1, Vec::new());
                tube_ids.resize(k + 1, Vec::new());
            }
            frames[k].push(Scatterer::new(p));
            tube_ids[k].push(id);
        }
        Ok(Self { frames, tube_ids, tubes: Vec::new(), seed: 0, concentration: 0 })
    }
}

/// One scatterer per frame at `(x0, y_k, z0)`, `y_k` stepping from
/// `y_start` to `y_end` inclusive.
pub fn single_scatter_sweep(x0: f64, z0: f64, y_start: f64, y_end: f64, step: f64) -> Result<PhantomSequence> {
    if !(step > 0.0) {
        return Err(param("sweep step must be positive"));
    }
    if y_end < y_start {
        return Err(param("sweep range must be ascending"));
    }
    let n = ((y_end - y_start) / step + 1e-9).floor() as usize + 1;
    let frames: Vec<Vec<Scatterer>> = (0..n)
        .map(|k| {
            let y = y_start + k as f64 * step;
            // Snap round-off so the on-axis frame sits exactly at y = 0.
            let y = if y.abs() < 1e-9 * step { 0.0 } else { y };
            vec![Scatterer::new([x0, y, z0])]
        })
        .collect();
    let n_frames = frames.len();
    Ok(PhantomSequence { frames, tube_ids: vec![vec![-1]; n_frames], tubes: Vec::new(), seed: 0, concentration: 1 })
}

/// Scatterers drawn uniformly inside `tubes`, `concentration` per tube per
/// frame, until each tube has received `total_per_tube`.
pub fn cross_tube_phantom(tubes: &[Tube], concentration: usize, total_per_tube: usize, seed: u64) -> Result<PhantomSequence> {
    if tubes.is_empty() {
        return Err(param("at least one tube is required"));
    }
    if concentration == 0 || total_per_tube == 0 || !total_per_tube.is_multiple_of(concentration) {
        return Err(param(format!(
            "total per tube ({total_per_tube}) must be a positive multiple of the concentration ({concentration})"
        )));
    }
    let n_frames = total_per_tube / concentration;
    let mut frames = Vec::with_capacity(n_frames);
    let mut tube_ids = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let mut rng = frame_rng(seed, k);
        let mut frame = Vec::with_capacity(tubes.len() * concentration);
        let mut ids = Vec::with_capacity(tubes.len() * concentration);
        for (t, tube) in tubes.iter().enumerate() {
            for _ in 0..concentration {
                frame.push(Scatterer::new(tube.sample(&mut rng)));
                ids.push(t as i32);
            }
        }
        frames.push(frame);
        tube_ids.push(ids);
    }
    Ok(PhantomSequence { frames, tube_ids, tubes: tubes.to_vec(), seed, concentration })
}

/// Independent generator per frame, so frames can be produced in any order.
pub fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn orthonormal_pair(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = cross(d, helper);
    let n1 = norm(e1);
    let e1 = e1.map(|v| v / n1);
    (e1, cross(d, e1))
}
