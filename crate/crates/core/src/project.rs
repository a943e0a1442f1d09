//! Parallel-beam object-wise DRR rendering.
//!
//! Each channel pixel holds the line integral of one object volume along the
//! beam (world z after rotation), in value·cm. Summing pixels times pixel
//! area therefore gives the volume integral: cm³ for indicator volumes and g
//! for mass-density volumes.
//!
//! Two paths exist. When the total rotation is exactly the identity, column
//! sums of voxels are rebinned onto the detector by footprint overlap (a pure
//! reordering of the voxel sum, so conservation is exact up to rounding).
//! Otherwise each ray is sampled at fixed steps with trilinear interpolation,
//! treating everything outside the grid as zero.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pose::{euler_matrix, RigidPose};
use crate::volume::{Grid3, ScalarVolume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrrKind {
    Wv,
    V,
    M,
}

impl DrrKind {
    pub const ALL: [DrrKind; 3] = [DrrKind::Wv, DrrKind::V, DrrKind::M];

    pub fn as_str(self) -> &'static str {
        match self {
            DrrKind::Wv => "wv",
            DrrKind::V => "v",
            DrrKind::M => "m",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wv" => Some(DrrKind::Wv),
            "v" => Some(DrrKind::V),
            "m" => Some(DrrKind::M),
            _ => None,
        }
    }

    /// Units of a pixel value.
    pub fn pixel_units(self) -> &'static str {
        match self {
            DrrKind::Wv => "cm",
            DrrKind::V => "cm",
            DrrKind::M => "g/cm^2",
        }
    }

    /// Units of an intensity sum.
    pub fn sum_units(self) -> &'static str {
        match self {
            DrrKind::Wv => "1",
            DrrKind::V => "cm^3",
            DrrKind::M => "g",
        }
    }

    pub fn from_volume_kind(kind: VolumeKind) -> Option<Self> {
        match kind {
            VolumeKind::Weighted => Some(DrrKind::Wv),
            VolumeKind::Indicator => Some(DrrKind::V),
            VolumeKind::MassDensity => Some(DrrKind::M),
            VolumeKind::Hu => None,
        }
    }
}

impl std::fmt::Display for DrrKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSize {
    /// Cover the rotated volume bounds plus one pixel on each side.
    #[default]
    Auto,
    Fixed {
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    /// Euler angles (rx, ry, rz) in degrees, applied about the volume center.
    pub rotation_deg: [f64; 3],
    pub detector: DetectorSize,
    /// `[row, column]` pixel spacing in mm.
    pub pixel_spacing_mm: [f64; 2],
    pub step_mm: f64,
}

impl Default for ProjectionGeometry {
    fn default() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            detector: DetectorSize::Auto,
            pixel_spacing_mm: [1.0, 1.0],
            step_mm: 0.5,
        }
    }
}

impl ProjectionGeometry {
    pub fn validate(&self) -> Result<()> {
        if let DetectorSize::Fixed { height, width } = self.detector {
            if height == 0 || width == 0 {
                return Err(Error::Usage("detector must be at least 1x1".into()));
            }
        }
        if self
            .pixel_spacing_mm
            .iter()
            .chain(std::iter::once(&self.step_mm))
            .any(|&v| !(v.is_finite() && v > 0.0))
        {
            return Err(Error::Usage(
                "pixel spacing and ray step must be positive".into(),
            ));
        }
        if self.rotation_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::Usage("rotation angles must be finite".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_matrix(self.rotation_deg)
    }

    /// Detector placed by this geometry for volumes on `grid`.
    pub fn detector_for(&self, grid: &Grid3) -> Detector {
        let center = grid.center();
        let [ph, pw] = self.pixel_spacing_mm;
        let (height, width) = match self.detector {
            DetectorSize::Fixed { height, width } => (height, width),
            DetectorSize::Auto => {
                let rot = self.rotation();
                let half = if rot == Matrix3::identity() {
                    let (lo, hi) = grid.footprint();
                    [0, 1, 2].map(|a| 0.5 * (hi[a] - lo[a]))
                } else {
                    // trilinear support reaches one voxel past the outer centers
                    let s = grid.spacing();
                    let n = grid.dims();
                    let box_half = [0, 1, 2].map(|a| 0.5 * (n[a] as f64 + 1.0) * s[a]);
                    [0, 1, 2].map(|r| (0..3).map(|c| rot[(r, c)].abs() * box_half[c]).sum())
                };
                (
                    (2.0 * half[1] / ph - 1e-9).ceil() as usize + 2,
                    (2.0 * half[0] / pw - 1e-9).ceil() as usize + 2,
                )
            }
        };
        Detector {
            height,
            width,
            pixel_spacing_mm: self.pixel_spacing_mm,
            center_mm: [center[0], center[1]],
        }
    }
}

/// Detector plane perpendicular to world z. Rows run along y, columns along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub height: usize,
    pub width: usize,
    /// `[row, column]` spacing in mm.
    pub pixel_spacing_mm: [f64; 2],
    /// World `(x, y)` of the detector center.
    pub center_mm: [f64; 2],
}

impl Detector {
    #[inline]
    pub fn pixel_x(&self, col: f64) -> f64 {
        self.center_mm[0] + (col - 0.5 * (self.width as f64 - 1.0)) * self.pixel_spacing_mm[1]
    }

    #[inline]
    pub fn pixel_y(&self, row: f64) -> f64 {
        self.center_mm[1] + (row - 0.5 * (self.height as f64 - 1.0)) * self.pixel_spacing_mm[0]
    }

    pub fn pixel_area_cm2(&self) -> f64 {
        self.pixel_spacing_mm[0] * self.pixel_spacing_mm[1] / 100.0
    }

    /// Same physical field with pixels twice as large; odd trailing pixels are dropped.
    pub fn downsample2(&self) -> Detector {
        if self.height < 2 || self.width < 2 {
            return *self;
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let [ph, pw] = self.pixel_spacing_mm;
        // keep pooled pixel centers on the mean of their four sources
        let cx = self.pixel_x(0.5) + 0.5 * (w as f64 - 1.0) * 2.0 * pw;
        let cy = self.pixel_y(0.5) + 0.5 * (h as f64 - 1.0) * 2.0 * ph;
        Detector {
            height: h,
            width: w,
            pixel_spacing_mm: [2.0 * ph, 2.0 * pw],
            center_mm: [cx, cy],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Exact footprint rebinning whenever the rotation is the identity.
    #[default]
    Auto,
    /// Always ray-march with trilinear interpolation.
    Trilinear,
}

/// Everything needed to render one channel: a volume point `q` lands at
/// world `rotation · (q − pivot) + pivot + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSetup {
    pub detector: Detector,
    pub rotation: Matrix3<f64>,
    pub pivot: [f64; 3],
    pub translation: [f64; 3],
    pub step_mm: f64,
    pub sampling: Sampling,
}

impl RenderSetup {
    pub fn new(geom: &ProjectionGeometry, grid: &Grid3, pose: &RigidPose) -> Self {
        RenderSetup {
            detector: geom.detector_for(grid),
            rotation: pose.rotation_matrix() * geom.rotation(),
            pivot: grid.center(),
            translation: pose.translation_mm(),
            step_mm: geom.step_mm,
            sampling: Sampling::Auto,
        }
    }
}

/// Object-wise DRRs of one kind. Channel `i` corresponds to object `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrrStack {
    kind: DrrKind,
    pixel_spacing_mm: [f64; 2],
    names: Vec<String>,
    channels: Vec<Image>,
}

impl DrrStack {
    pub fn new(
        kind: DrrKind,
        pixel_spacing_mm: [f64; 2],
        names: Vec<String>,
        channels: Vec<Image>,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Usage(
                "a DRR stack needs at least one channel".into(),
            ));
        }
        if names.len() != channels.len() {
            return Err(Error::Dimension(format!(
                "{} names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        if pixel_spacing_mm
            .iter()
            .any(|&s| !(s.is_finite() && s > 0.0))
        {
            return Err(Error::Usage("pixel spacing must be positive".into()));
        }
        let shape = channels[0].shape();
        for (i, c) in channels.iter().enumerate() {
            if c.shape() != shape {
                return Err(Error::Dimension(format!(
                    "channel {i} is {:?}, channel 0 is {:?}",
                    c.shape(),
                    shape
                )));
            }
            if !c.is_finite() {
                return Err(Error::Usage(format!("channel {i} has non-finite pixels")));
            }
        }
        Ok(Self {
            kind,
            pixel_spacing_mm,
            names,
            channels,
        })
    }

    /// Stack with channel names `"0"`, `"1"`, ...
    pub fn unnamed(
        kind: DrrKind,
        pixel_spacing_mm: [f64; 2],
        channels: Vec<Image>,
    ) -> Result<Self> {
        let names = (0..channels.len()).map(|i| i.to_string()).collect();
        Self::new(kind, pixel_spacing_mm, names, channels)
    }

    pub fn kind(&self) -> DrrKind {
        self.kind
    }

    pub fn pixel_spacing_mm(&self) -> [f64; 2] {
        self.pixel_spacing_mm
    }

    pub fn pixel_area_cm2(&self) -> f64 {
        self.pixel_spacing_mm[0] * self.pixel_spacing_mm[1] / 100.0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channels(&self) -> &[Image] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Image {
        &self.channels[i]
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels.len() {
            return Err(Error::Dimension(
                "name count differs from channel count".into(),
            ));
        }
        self.names = names;
        Ok(self)
    }

    pub fn into_channels(self) -> Vec<Image> {
        self.channels
    }
}

/// Renders one DRR channel per volume. Volumes must share a grid and a
/// projectable kind (indicator, mass density or weighted intensity).
pub fn project(vols: &[ScalarVolume], geom: &ProjectionGeometry) -> Result<DrrStack> {
    project_posed(vols, geom, &RigidPose::IDENTITY, Sampling::Auto)
}

/// [`project`] with an extra rigid pose applied in the projection frame.
pub fn project_posed(
    vols: &[ScalarVolume],
    geom: &ProjectionGeometry,
    pose: &RigidPose,
    sampling: Sampling,
) -> Result<DrrStack> {
    geom.validate()?;
    let first = vols
        .first()
        .ok_or_else(|| Error::Usage("no volumes to project".into()))?;
    let kind = DrrKind::from_volume_kind(first.kind()).ok_or_else(|| {
        Error::Usage(format!("cannot project a {} volume", first.kind().as_str()))
    })?;
    for v in vols {
        if v.grid() != first.grid() {
            return Err(Error::Dimension("volumes do not share one grid".into()));
        }
        if v.kind() != first.kind() {
            return Err(Error::Usage("volumes mix different kinds".into()));
        }
    }
    let mut setup = RenderSetup::new(geom, first.grid(), pose);
    setup.sampling = sampling;
    let channels = vols.iter().map(|v| render_channel(v, &setup)).collect();
    DrrStack::unnamed(kind, geom.pixel_spacing_mm, channels)
}

/// Σ pixels · pixel area.
pub fn intensity_sum(stack: &DrrStack, channel: usize) -> Result<f64> {
    let img = stack.channels.get(channel).ok_or_else(|| {
        Error::Usage(format!(
            "channel {channel} out of range for a {}-channel stack",
            stack.len()
        ))
    })?;
    Ok(img.sum() * stack.pixel_area_cm2())
}

/// Channel-wise sum of a stack, the image comparable to a radiograph.
pub fn virtual_xray(stack: &DrrStack) -> Image {
    let (h, w) = stack.shape();
    let mut out = Image::zeros(h, w);
    for c in &stack.channels {
        out.add_scaled(c, 1.0);
    }
    out
}

pub fn render_channel(vol: &ScalarVolume, setup: &RenderSetup) -> Image {
    let det = &setup.detector;
    let Some(bounds) = vol.nonzero_bounds() else {
        return Image::zeros(det.height, det.width);
    };
    if setup.sampling == Sampling::Auto && setup.rotation == Matrix3::identity() {
        render_axis_aligned(vol, bounds, setup)
    } else {
        render_trilinear(vol, bounds, setup)
    }
}

/// 1D overlap weights of voxel intervals onto pixel intervals.
/// Entry `i` lists `(pixel, fraction of pixel width covered)`.
fn footprint_weights(
    voxel_center: impl Fn(usize) -> f64,
    voxel_range: std::ops::RangeInclusive<usize>,
    voxel_size: f64,
    pixel_center: impl Fn(f64) -> f64,
    pixel_size: f64,
    n_pixels: usize,
) -> Vec<Vec<(usize, f64)>> {
    let p0 = pixel_center(0.0);
    let same_size = (voxel_size - pixel_size).abs() <= 1e-12 * pixel_size;
    voxel_range
        .map(|i| {
            let c = voxel_center(i);
            let offset = (c - p0) / pixel_size;
            if same_size && (offset - offset.round()).abs() < 1e-9 {
                let p = offset.round();
                return if p >= 0.0 && (p as usize) < n_pixels {
                    vec![(p as usize, 1.0)]
                } else {
                    Vec::new()
                };
            }
            let lo = c - 0.5 * voxel_size;
            let hi = c + 0.5 * voxel_size;
            let first = ((lo - p0) / pixel_size + 0.5).floor().max(0.0) as usize;
            let last = ((hi - p0) / pixel_size + 0.5).floor();
            if last < 0.0 {
                return Vec::new();
            }
            let last = (last as usize).min(n_pixels.saturating_sub(1));
            (first..=last)
                .filter_map(|p| {
                    let pc = pixel_center(p as f64);
                    let ov = hi.min(pc + 0.5 * pixel_size) - lo.max(pc - 0.5 * pixel_size);
                    (ov > 0.0).then_some((p, ov / pixel_size))
                })
                .collect()
        })
        .collect()
}

fn render_axis_aligned(
    vol: &ScalarVolume,
    (lo, hi): ([usize; 3], [usize; 3]),
    setup: &RenderSetup,
) -> Image {
    let det = &setup.detector;
    let grid = vol.grid();
    let s = grid.spacing();
    let o = grid.origin();
    let [tx, ty, _] = setup.translation;
    let step_cm = s[2] / 10.0;

    let nxr = hi[0] - lo[0] + 1;
    let nyr = hi[1] - lo[1] + 1;
    let mut columns = vec![0.0; nxr * nyr];
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            let row = &mut columns[(y - lo[1]) * nxr..(y - lo[1] + 1) * nxr];
            let base = grid.index(0, y, z);
            for (acc, &v) in row
                .iter_mut()
                .zip(&vol.values()[base + lo[0]..=base + hi[0]])
            {
                *acc += v;
            }
        }
    }

    let [ph, pw] = det.pixel_spacing_mm;
    let wx = footprint_weights(
        |i| o[0] + i as f64 * s[0] + tx,
        lo[0]..=hi[0],
        s[0],
        |c| det.pixel_x(c),
        pw,
        det.width,
    );
    let wy = footprint_weights(
        |j| o[1] + j as f64 * s[1] + ty,
        lo[1]..=hi[1],
        s[1],
        |r| det.pixel_y(r),
        ph,
        det.height,
    );

    let mut img = Image::zeros(det.height, det.width);
    let w = det.width;
    let out = img.data_mut();
    for (j, ys) in wy.iter().enumerate() {
        for (i, xs) in wx.iter().enumerate() {
            let col = columns[j * nxr + i] * step_cm;
            if col == 0.0 {
                continue;
            }
            for &(r, fy) in ys {
                for &(c, fx) in xs {
                    out[r * w + c] += col * fy * fx;
                }
            }
        }
    }
    img
}

#[inline]
fn trilinear(vals: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    let (x0, y0, z0) = (fx as isize, fy as isize, fz as isize);
    let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
    let wxs = [1.0 - tx, tx];
    let wys = [1.0 - ty, ty];
    let wzs = [1.0 - tz, tz];
    let mut acc = 0.0;
    for (dz, wz) in wzs.iter().enumerate() {
        let z = z0 + dz as isize;
        if z < 0 || z >= nz as isize {
            continue;
        }
        for (dy, wy) in wys.iter().enumerate() {
            let y = y0 + dy as isize;
            if y < 0 || y >= ny as isize {
                continue;
            }
            let base = (z as usize * ny + y as usize) * nx;
            let wzy = wz * wy;
            for (dx, wx) in wxs.iter().enumerate() {
                let x = x0 + dx as isize;
                if x < 0 || x >= nx as isize {
                    continue;
                }
                acc += wzy * wx * vals[base + x as usize];
            }
        }
    }
    acc
}

fn render_trilinear(
    vol: &ScalarVolume,
    (lo, hi): ([usize; 3], [usize; 3]),
    setup: &RenderSetup,
) -> Image {
    let det = &setup.detector;
    let grid = vol.grid();
    let dims = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();
    let r = &setup.rotation;
    let rt = r.transpose();
    let pivot = Vector3::from(setup.pivot);
    let shift = pivot + Vector3::from(setup.translation);

    // open support of the trilinear interpolant, in index coordinates
    let box_lo = lo.map(|v| v as f64 - 1.0);
    let box_hi = hi.map(|v| v as f64 + 1.0);

    // detector pixel window touched by the support box
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for corner in 0..8 {
        let idx = [0, 1, 2].map(|a| {
            if corner >> a & 1 == 0 {
                box_lo[a]
            } else {
                box_hi[a]
            }
        });
        let q = Vector3::new(
            o[0] + idx[0] * s[0],
            o[1] + idx[1] * s[1],
            o[2] + idx[2] * s[2],
        );
        let p = r * (q - pivot) + shift;
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let [ph, pw] = det.pixel_spacing_mm;
    let col_of = |x: f64| (x - det.pixel_x(0.0)) / pw;
    let row_of = |y: f64| (y - det.pixel_y(0.0)) / ph;
    let c0 = col_of(xmin).floor().max(0.0) as usize;
    let c1 = col_of(xmax).ceil().min(det.width as f64 - 1.0);
    let r0 = row_of(ymin).floor().max(0.0) as usize;
    let r1 = row_of(ymax).ceil().min(det.height as f64 - 1.0);
    let mut img = Image::zeros(det.height, det.width);
    if c1 < 0.0 || r1 < 0.0 || c0 >= det.width || r0 >= det.height {
        return img;
    }
    let (c1, r1) = (c1 as usize, r1 as usize);

    // ray direction (world +z) in index units per mm
    let dir_world = rt.column(2).into_owned();
    let dir = [dir_world.x / s[0], dir_world.y / s[1], dir_world.z / s[2]];
    let step = setup.step_mm;
    let step_cm = step / 10.0;
    let vals = vol.values();

    let width = det.width;
    img.data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .filter(|(row, _)| *row >= r0 && *row <= r1)
        .for_each(|(row, out)| {
            let y = det.pixel_y(row as f64);
            for (col, px) in out.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                let x = det.pixel_x(col as f64);
                let q0 = rt * (Vector3::new(x, y, 0.0) - shift) + pivot;
                let start = [
                    (q0.x - o[0]) / s[0],
                    (q0.y - o[1]) / s[1],
                    (q0.z - o[2]) / s[2],
                ];

                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut hit = true;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if start[a] <= box_lo[a] || start[a] >= box_hi[a] {
                            hit = false;
                            break;
                        }
                    } else {
                        let ta = (box_lo[a] - start[a]) / dir[a];
                        let tb = (box_hi[a] - start[a]) / dir[a];
                        t0 = t0.max(ta.min(tb));
                        t1 = t1.min(ta.max(tb));
                    }
                }
                if !hit || t0 >= t1 {
                    continue;
                }
                let k0 = (t0 / step - 0.5).ceil() as i64;
                let k1 = (t1 / step - 0.5).floor() as i64;
                let mut acc = 0.0;
                for k in k0..=k1 {
                    let t = (k as f64 + 0.5) * step;
                    let p = [
                        start[0] + t * dir[0],
                        start[1] + t * dir[1],
                        start[2] + t * dir[2],
                    ];
                    acc += trilinear(vals, dims, p);
                }
                *px = acc * step_cm;
            }
        });
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{mass_of, volume_of};

    fn ones_cube() -> ScalarVolume {
        let g = Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        ScalarVolume::filled(g, 1.0, VolumeKind::Indicator).unwrap()
    }

    #[test]
    fn ones_cube_column_sums() {
        let geom = ProjectionGeometry {
            detector: DetectorSize::Fixed {
                height: 2,
                width: 2,
            },
            ..Default::default()
        };
        let stack = project(&[ones_cube()], &geom).unwrap();
        assert_eq!(stack.channel(0).data(), &[0.2, 0.2, 0.2, 0.2]);
        let s = intensity_sum(&stack, 0).unwrap();
        assert!((s - 0.008).abs() < 1e-15);
        assert!(intensity_sum(&stack, 1).is_err());
    }

    #[test]
    fn auto_detector_pads_one_pixel() {
        let geom = ProjectionGeometry::default();
        let stack = project(&[ones_cube()], &geom).unwrap();
        assert_eq!(stack.shape(), (4, 4));
        let img = stack.channel(0);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(1, 1), 0.2);
        assert!((intensity_sum(&stack, 0).unwrap() - 0.008).abs() < 1e-15);
    }

    #[test]
    fn hu_volumes_are_rejected() {
        let g = Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let hu = ScalarVolume::filled(g, 10.0, VolumeKind::Hu).unwrap();
        assert!(project(&[hu], &ProjectionGeometry::default()).is_err());
        assert!(project(&[], &ProjectionGeometry::default()).is_err());
    }

    fn blob(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> ScalarVolume {
        let g = Grid3::centered(dims, spacing).unwrap();
        let c = g.center();
        let mut vals = vec![0.0; g.len()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = g.voxel_center(x, y, z);
                    let r2 = ((p[0] - c[0] - 1.5) / 7.0).powi(2)
                        + ((p[1] - c[1]) / 5.0).powi(2)
                        + ((p[2] - c[2] + 1.0) / 4.0).powi(2);
                    if r2 <= 1.0 {
                        vals[g.index(x, y, z)] = match kind {
                            VolumeKind::Indicator => 1.0,
                            _ => 1.0 + 0.1 * (x % 3) as f64,
                        };
                    }
                }
            }
        }
        ScalarVolume::new(g, vals, kind).unwrap()
    }

    #[test]
    fn zero_rotation_conserves_sum_with_mismatched_pixels() {
        let v = blob([24, 20, 16], [1.0, 0.8, 1.2], VolumeKind::MassDensity);
        let oracle = mass_of(&v).unwrap();
        for spacing in [[1.0, 1.0], [0.7, 1.3], [2.5, 0.45]] {
            let geom = ProjectionGeometry {
                pixel_spacing_mm: spacing,
                ..Default::default()
            };
            let stack = project(std::slice::from_ref(&v), &geom).unwrap();
            let s = intensity_sum(&stack, 0).unwrap();
            assert!(
                ((s - oracle) / oracle).abs() < 1e-12,
                "{spacing:?}: {s} vs {oracle}"
            );
        }
    }

    #[test]
    fn translated_exact_path_conserves_sum() {
        let v = blob([24, 20, 16], [1.0; 3], VolumeKind::Indicator);
        let oracle = volume_of(&v).unwrap();
        let pose = RigidPose::new([0.0; 3], [1.3, -0.4, 7.0]).unwrap();
        let stack = project_posed(
            std::slice::from_ref(&v),
            &ProjectionGeometry::default(),
            &pose,
            Sampling::Auto,
        )
        .unwrap();
        let s = intensity_sum(&stack, 0).unwrap();
        assert!(((s - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn rotated_sum_close_to_axis_aligned() {
        let v = blob([32, 32, 32], [1.0; 3], VolumeKind::Indicator);
        let oracle = volume_of(&v).unwrap();
        let geom = ProjectionGeometry {
            rotation_deg: [0.0, 37.0, 0.0],
            ..Default::default()
        };
        let stack = project(std::slice::from_ref(&v), &geom).unwrap();
        let s = intensity_sum(&stack, 0).unwrap();
        assert!(((s - oracle) / oracle).abs() < 5e-3, "{s} vs {oracle}");
        assert!(stack.channel(0).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn trilinear_path_at_zero_rotation_is_close() {
        let v = blob([32, 32, 32], [1.0; 3], VolumeKind::Indicator);
        let oracle = volume_of(&v).unwrap();
        let stack = project_posed(
            std::slice::from_ref(&v),
            &ProjectionGeometry::default(),
            &RigidPose::IDENTITY,
            Sampling::Trilinear,
        )
        .unwrap();
        let s = intensity_sum(&stack, 0).unwrap();
        assert!(((s - oracle) / oracle).abs() < 1e-9, "{s} vs {oracle}");
    }

    #[test]
    fn virtual_xray_sums_channels() {
        let a = Image::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Image::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        let single = DrrStack::unnamed(DrrKind::Wv, [1.0, 1.0], vec![a.clone()]).unwrap();
        assert_eq!(virtual_xray(&single), a);
        let two = DrrStack::unnamed(DrrKind::Wv, [1.0, 1.0], vec![a, b]).unwrap();
        assert_eq!(virtual_xray(&two).data(), &[1.5, 1.0]);
    }

    #[test]
    fn downsampled_detector_keeps_pixel_centers() {
        let d = Detector {
            height: 6,
            width: 8,
            pixel_spacing_mm: [1.0, 0.5],
            center_mm: [3.0, -2.0],
        };
        let h = d.downsample2();
        assert_eq!((h.height, h.width), (3, 4));
        for c in 0..4 {
            let expected = 0.5 * (d.pixel_x(2.0 * c as f64) + d.pixel_x(2.0 * c as f64 + 1.0));
            assert!((h.pixel_x(c as f64) - expected).abs() < 1e-12);
        }
        for r in 0..3 {
            let expected = 0.5 * (d.pixel_y(2.0 * r as f64) + d.pixel_y(2.0 * r as f64 + 1.0));
            assert!((h.pixel_y(r as f64) - expected).abs() < 1e-12);
        }
    }
}
