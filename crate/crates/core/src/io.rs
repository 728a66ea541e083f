//! On-disk formats: RF archives, beamformed stacks, density-map CSV and
//! 16-bit graymaps. Binary files are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::beamform::BeamformedStack;
use crate::error::{Error, Result};
use crate::forward::{Acquisition, ChannelLayout, RfFrame};
use crate::geometry::{ImagingScheme, VoxelGrid};
use crate::localize::DensityMap;

const RF_MAGIC: &[u8; 4] = b"ULRF";
const STACK_MAGIC: &[u8; 4] = b"ULBS";
const VERSION: u32 = 1;

fn layout_code(layout: ChannelLayout) -> (u8, f64) {
    match layout {
        ChannelLayout::Full => (0, 0.0),
        ChannelLayout::Reduced(s) => (s.code(), s.focal_depth()),
    }
}

fn layout_from_code(code: u8, focal: f64) -> Result<ChannelLayout> {
    if code == 0 {
        Ok(ChannelLayout::Full)
    } else {
        Ok(ChannelLayout::Reduced(ImagingScheme::from_code(code, focal)?))
    }
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("expected {:?} header", String::from_utf8_lossy(magic))));
    }
    let v = r.read_u32::<LE>()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

/// Header shared by every frame of an RF archive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfHeader {
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    pub t0: f64,
    pub layout: ChannelLayout,
    pub geometry_hash: u64,
    pub n_frames: usize,
}

/// Streams RF frames to disk as f32 samples.
pub struct RfWriter {
    out: BufWriter<File>,
    header: RfHeader,
}

impl RfWriter {
    pub fn create(path: &Path, header: RfHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(RF_MAGIC)?;
        out.write_u32::<LE>(VERSION)?;
        out.write_u32::<LE>(header.n_channels as u32)?;
        out.write_u32::<LE>(header.n_samples as u32)?;
        out.write_f64::<LE>(header.fs)?;
        out.write_f64::<LE>(header.t0)?;
        out.write_u64::<LE>(header.geometry_hash)?;
        let (code, focal) = layout_code(header.layout);
        out.write_u8(code)?;
        out.write_f64::<LE>(focal)?;
        out.write_u32::<LE>(header.n_frames as u32)?;
        Ok(Self { out, header })
    }

    pub fn write(&mut self, rf: &RfFrame) -> Result<()> {
        let h = &self.header;
        if rf.n_channels != h.n_channels || rf.n_samples != h.n_samples || rf.layout != h.layout {
            return Err(Error::Layout("frame does not match the archive header".into()));
        }
        for &v in &rf.data {
            self.out.write_f32::<LE>(v as f32)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub struct RfReader {
    input: BufReader<File>,
    pub header: RfHeader,
    read: usize,
}

impl RfReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        check_magic(&mut input, RF_MAGIC)?;
        let n_channels = input.read_u32::<LE>()? as usize;
        let n_samples = input.read_u32::<LE>()? as usize;
        let fs = input.read_f64::<LE>()?;
        let t0 = input.read_f64::<LE>()?;
        let geometry_hash = input.read_u64::<LE>()?;
        let code = input.read_u8()?;
        let focal = input.read_f64::<LE>()?;
        let n_frames = input.read_u32::<LE>()? as usize;
        let header = RfHeader { n_channels, n_samples, fs, t0, layout: layout_from_code(code, focal)?, geometry_hash, n_frames };
        Ok(Self { input, header, read: 0 })
    }
}

impl Iterator for RfReader {
    type Item = Result<RfFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.header.n_frames {
            return None;
        }
        self.read += 1;
        let h = self.header;
        let mut buf = vec![0f32; h.n_channels * h.n_samples];
        if let Err(e) = self.input.read_f32_into::<LE>(&mut buf) {
            return Some(Err(Error::Format(format!("truncated RF archive: {e}"))));
        }
        Some(Ok(RfFrame {
            data: buf.into_iter().map(f64::from).collect(),
            n_channels: h.n_channels,
            n_samples: h.n_samples,
            fs: h.fs,
            t0: h.t0,
            layout: h.layout,
            geometry_hash: h.geometry_hash,
        }))
    }
}

impl RfHeader {
    pub fn acquisition(&self, sound_speed: f64, obliquity: bool) -> Acquisition {
        Acquisition { sound_speed, fs: self.fs, t0: self.t0, n_samples: self.n_samples, obliquity }
    }
}

fn write_grid<W: Write>(w: &mut W, g: &VoxelGrid) -> Result<()> {
    for a in 0..3 {
        w.write_f64::<LE>(g.origin[a])?;
    }
    for a in 0..3 {
        w.write_f64::<LE>(g.spacing[a])?;
    }
    for a in 0..3 {
        w.write_u32::<LE>(g.counts[a] as u32)?;
    }
    Ok(())
}

fn read_grid<R: Read>(r: &mut R) -> Result<VoxelGrid> {
    let mut origin = [0.0; 3];
    let mut spacing = [0.0; 3];
    let mut counts = [0usize; 3];
    for o in &mut origin {
        *o = r.read_f64::<LE>()?;
    }
    for s in &mut spacing {
        *s = r.read_f64::<LE>()?;
    }
    for c in &mut counts {
        *c = r.read_u32::<LE>()? as usize;
    }
    VoxelGrid::new(origin, spacing, counts)
}

pub fn write_stack(path: &Path, stack: &BeamformedStack) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(STACK_MAGIC)?;
    out.write_u32::<LE>(VERSION)?;
    write_grid(&mut out, &stack.grid)?;
    out.write_u8(stack.scheme.code())?;
    out.write_f64::<LE>(stack.scheme.focal_depth())?;
    out.write_u64::<LE>(stack.provenance)?;
    out.write_u32::<LE>(stack.n_frames() as u32)?;
    for f in &stack.frames {
        for &v in f {
            out.write_f32::<LE>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<BeamformedStack> {
    let mut input = BufReader::new(File::open(path)?);
    check_magic(&mut input, STACK_MAGIC)?;
    let grid = read_grid(&mut input)?;
    let code = input.read_u8()?;
    let focal = input.read_f64::<LE>()?;
    let scheme = ImagingScheme::from_code(code, focal)?;
    let provenance = input.read_u64::<LE>()?;
    let n = input.read_u32::<LE>()? as usize;
    let mut stack = BeamformedStack::new(grid, scheme, provenance);
    for _ in 0..n {
        let mut f = vec![0f32; grid.len()];
        input.read_f32_into::<LE>(&mut f).map_err(|e| Error::Format(format!("truncated stack: {e}")))?;
        stack.frames.push(f);
    }
    Ok(stack)
}

/// Non-zero cells as `x,y,z,count`.
pub fn write_density_csv<W: Write>(mut w: W, map: &DensityMap) -> Result<()> {
    writeln!(w, "x,y,z,count")?;
    let [nx, ny, nz] = map.grid.counts;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let c = map.counts[map.grid.index(ix, iy, iz)];
                if c > 0 {
                    let [x, y, z] = map.grid.position(ix, iy, iz);
                    writeln!(w, "{x:e},{y:e},{z:e},{c}")?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageScale {
    Linear,
    /// Log compression with the given floor in dB below the maximum.
    Log { floor_db: f64 },
}

/// Maps a max-normalized image to 16-bit levels. All-zero input maps to
/// zeros.
pub fn gray_levels(values: &[f64], scale: ImageScale) -> Vec<u16> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            let u = v.max(0.0) / max;
            let level = match scale {
                ImageScale::Linear => u,
                ImageScale::Log { floor_db } => {
                    if u <= 0.0 {
                        0.0
                    } else {
                        (1.0 - 20.0 * u.log10() / floor_db).clamp(0.0, 1.0)
                    }
                }
            };
            (level * 65535.0).round() as u16
        })
        .collect()
}

/// Writes a binary 16-bit graymap. `values` is row-major with `width`
/// entries per row. Returns `false` when the image was all zero.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, scale: ImageScale) -> Result<bool> {
    if values.is_empty() || width == 0 || !values.len().is_multiple_of(width) {
        return Err(Error::Parameter("image must be a non-empty rectangle".into()));
    }
    let height = values.len() / width;
    let levels = gray_levels(values, scale);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n65535\n")?;
    for l in &levels {
        out.write_u16::<byteorder::BigEndian>(*l)?;
    }
    out.flush()?;
    Ok(levels.iter().any(|&l| l > 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Acquisition;

    #[test]
    fn rf_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rf.bin");
        let acq = Acquisition { sound_speed: 1540.0, fs: 31.24e6, t0: 1e-5, n_samples: 16, obliquity: false };
        let mut rf = RfFrame::zeros(3, &acq, ChannelLayout::Reduced(ImagingScheme::ef()), 42);
        for (k, v) in rf.data.iter_mut().enumerate() {
            *v = k as f64 * 0.5 - 3.0;
        }
        let header = RfHeader {
            n_channels: 3,
            n_samples: 16,
            fs: acq.fs,
            t0: acq.t0,
            layout: rf.layout,
            geometry_hash: 42,
            n_frames: 2,
        };
        let mut w = RfWriter::create(&path, header).unwrap();
        w.write(&rf).unwrap();
        w.write(&rf).unwrap();
        w.finish().unwrap();
        let r = RfReader::open(&path).unwrap();
        assert_eq!(r.header, header);
        let frames: Vec<RfFrame> = r.map(|f| f.unwrap()).collect();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1], rf);
    }

    #[test]
    fn stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let grid = VoxelGrid::new([-1e-3, 0.0, 0.018], [1e-4; 3], [3, 1, 4]).unwrap();
        let mut s = BeamformedStack::new(grid, ImagingScheme::Vip, 7);
        s.frames.push((0..12).map(|v| v as f32).collect());
        s.frames.push(vec![0.5; 12]);
        write_stack(&path, &s).unwrap();
        assert_eq!(read_stack(&path).unwrap(), s);
    }

    #[test]
    fn gray_level_mapping() {
        assert!(gray_levels(&[2.0; 4], ImageScale::Linear).iter().all(|&l| l == 65535));
        let log = ImageScale::Log { floor_db: -40.0 };
        let l = gray_levels(&[1.0, 0.01, 0.1, 1e-4], log);
        assert_eq!(l[0], 65535);
        assert_eq!(l[1], 0);
        assert!((l[2] as i32 - 32768).abs() <= 1);
        assert_eq!(l[3], 0);
        assert!(gray_levels(&[0.0; 3], log).iter().all(|&l| l == 0));
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        assert!(write_pgm(&path, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, ImageScale::Linear).unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(bytes.len(), 13 + 12);
        assert!(!write_pgm(&path, &[0.0; 4], 2, ImageScale::Linear).unwrap());
        assert!(write_pgm(&path, &[1.0; 5], 2, ImageScale::Linear).is_err());
    }
}
