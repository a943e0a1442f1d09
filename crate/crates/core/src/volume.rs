//! Voxel grids, scalar volumes, label maps and the object table.
//!
//! Voxel `(x, y, z)` is stored at `x + nx * (y + ny * z)`. `origin` is the
//! physical position (mm) of the center of voxel `(0, 0, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Dimension(format!(
                "grid dims must be positive: {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Dimension(format!(
                "grid spacing must be finite and positive: {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Dimension(format!(
                "grid origin must be finite: {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Grid whose physical center sits at the coordinate origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Self::new(dims, spacing, origin)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume_cm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2] / 1000.0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Physical center of the grid's bounding box.
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing[a])
    }

    /// Bounds of the union of voxel footprints, `(min, max)` per axis.
    pub fn footprint(&self) -> ([f64; 3], [f64; 3]) {
        let lo = [0, 1, 2].map(|a| self.origin[a] - 0.5 * self.spacing[a]);
        let hi = [0, 1, 2].map(|a| lo[a] + self.dims[a] as f64 * self.spacing[a]);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Hu,
    Indicator,
    MassDensity,
    /// Window-normalized original intensity.
    Weighted,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Hu => "hu",
            VolumeKind::Indicator => "indicator",
            VolumeKind::MassDensity => "mass_density",
            VolumeKind::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "hu" => VolumeKind::Hu,
            "indicator" => VolumeKind::Indicator,
            "mass_density" => VolumeKind::MassDensity,
            "weighted" => VolumeKind::Weighted,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: Grid3,
    values: Vec<f64>,
    kind: VolumeKind,
}

impl ScalarVolume {
    pub fn new(grid: Grid3, values: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "grid {:?} needs {} values, got {}",
                grid.dims(),
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite value at voxel {i}")));
        }
        match kind {
            VolumeKind::Indicator => {
                if let Some(i) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Usage(format!(
                        "indicator volume holds {} at voxel {i}",
                        values[i]
                    )));
                }
            }
            VolumeKind::MassDensity => {
                if let Some(i) = values.iter().position(|&v| v < 0.0) {
                    return Err(Error::Usage(format!(
                        "negative mass density {} at voxel {i}",
                        values[i]
                    )));
                }
            }
            VolumeKind::Hu | VolumeKind::Weighted => {}
        }
        Ok(Self { grid, values, kind })
    }

    pub fn filled(grid: Grid3, value: f64, kind: VolumeKind) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()], kind)
    }

    #[inline]
    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.grid.index(x, y, z)]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// 2×2×2 mean pooling with doubled spacing; odd trailing slices are
    /// dropped. Pooled indicators are fractional occupancies, so an indicator
    /// volume comes back as [`VolumeKind::Weighted`]. Axes of length 1 are
    /// kept as they are.
    pub fn downsample2(&self) -> ScalarVolume {
        let n = self.grid.dims;
        let f = n.map(|d| if d >= 2 { 2 } else { 1 });
        let dims = [0, 1, 2].map(|a| n[a] / f[a]);
        let spacing = [0, 1, 2].map(|a| self.grid.spacing[a] * f[a] as f64);
        let origin =
            [0, 1, 2].map(|a| self.grid.origin[a] + 0.5 * (f[a] - 1) as f64 * self.grid.spacing[a]);
        let grid = Grid3 {
            dims,
            spacing,
            origin,
        };
        let norm = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let mut values = Vec::with_capacity(grid.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut acc = 0.0;
                    for dz in 0..f[2] {
                        for dy in 0..f[1] {
                            for dx in 0..f[0] {
                                acc += self.at(f[0] * x + dx, f[1] * y + dy, f[2] * z + dz);
                            }
                        }
                    }
                    values.push(acc * norm);
                }
            }
        }
        let kind = match self.kind {
            VolumeKind::Indicator => VolumeKind::Weighted,
            k => k,
        };
        ScalarVolume { grid, values, kind }
    }

    /// Voxel-index bounding box of non-zero values, inclusive. `None` if all zero.
    pub fn nonzero_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let [nx, ny, _] = self.grid.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
                any = true;
            }
        }
        any.then_some((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid3,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(grid: Grid3, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "grid {:?} needs {} labels, got {}",
                grid.dims(),
                grid.len(),
                labels.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    #[inline]
    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    #[inline]
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct non-zero labels.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Muscle,
    Bone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub label: u16,
    pub name: String,
    pub class: ObjectClass,
}

/// Ordered object table. Entry order fixes the channel order of every stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ObjectEntry>", into = "Vec<ObjectEntry>")]
pub struct ObjectSet {
    entries: Vec<ObjectEntry>,
}

impl ObjectSet {
    pub fn new(entries: Vec<ObjectEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.label == 0 {
                return Err(Error::Config(format!(
                    "object `{}` uses reserved label 0",
                    e.name
                )));
            }
            if entries[..i].iter().any(|p| p.label == e.label) {
                return Err(Error::Config(format!("duplicate label id {}", e.label)));
            }
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(Error::Config(format!("duplicate object name `{}`", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ObjectEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ObjectEntry> {
        self.entries.get(index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Checks that every non-background label in `labels` has an entry.
    pub fn covers(&self, labels: &LabelMap) -> Result<()> {
        for l in labels.present_labels() {
            if !self.entries.iter().any(|e| e.label == l) {
                return Err(Error::Config(format!("label {l} has no object entry")));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<ObjectEntry>> for ObjectSet {
    type Error = Error;

    fn try_from(entries: Vec<ObjectEntry>) -> Result<Self> {
        ObjectSet::new(entries)
    }
}

impl From<ObjectSet> for Vec<ObjectEntry> {
    fn from(set: ObjectSet) -> Self {
        set.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub volume: ScalarVolume,
    /// False when the label has no voxels; `volume` is then all zero.
    pub label_present: bool,
}

/// Masks `v` to the voxels carrying `label`.
pub fn extract_object(v: &ScalarVolume, m: &LabelMap, label: u16) -> Result<Extraction> {
    if v.grid() != m.grid() {
        return Err(Error::Dimension(
            "volume and label map grids differ".to_string(),
        ));
    }
    if label == 0 {
        return Err(Error::Usage("label 0 is background".to_string()));
    }
    let mut present = false;
    let values = v
        .values()
        .iter()
        .zip(m.labels())
        .map(|(&val, &l)| {
            if l == label {
                present = true;
                val
            } else {
                0.0
            }
        })
        .collect();
    Ok(Extraction {
        volume: ScalarVolume {
            grid: *v.grid(),
            values,
            kind: v.kind(),
        },
        label_present: present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid222() -> Grid3 {
        Grid3::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn downsample_pools_and_keeps_mass() {
        let g = Grid3::new([5, 4, 1], [1.0, 2.0, 3.0], [10.0, 0.0, 0.0]).unwrap();
        let vals: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let v = ScalarVolume::new(g, vals, VolumeKind::Indicator).unwrap();
        let d = v.downsample2();
        assert_eq!(d.grid().dims(), [2, 2, 1]);
        assert_eq!(d.grid().spacing(), [2.0, 4.0, 3.0]);
        assert_eq!(d.grid().origin(), [10.5, 1.0, 0.0]);
        assert_eq!(d.kind(), VolumeKind::Weighted);
        // voxel (0,0): sources x∈{0,1}, y∈{0,1} → indices 0,1,5,6 → 1,0,0,1
        assert_eq!(d.at(0, 0, 0), 0.5);
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(Grid3::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid3::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Grid3::new([1, 1, 1], [1.0, -2.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn voxel_volume_from_spacing() {
        let g = Grid3::new([4, 4, 4], [0.5, 2.0, 1.5], [0.0; 3]).unwrap();
        assert_eq!(g.voxel_volume_cm3(), 0.5 * 2.0 * 1.5 / 1000.0);
    }

    #[test]
    fn indicator_and_density_invariants() {
        let g = grid222();
        assert!(ScalarVolume::new(g, vec![0.5; 8], VolumeKind::Indicator).is_err());
        assert!(ScalarVolume::new(g, vec![-0.1; 8], VolumeKind::MassDensity).is_err());
        assert!(ScalarVolume::new(g, vec![f64::NAN; 8], VolumeKind::Hu).is_err());
        assert!(ScalarVolume::new(g, vec![1.0; 7], VolumeKind::Hu).is_err());
    }

    #[test]
    fn extract_half_and_absent() {
        let g = grid222();
        let v = ScalarVolume::filled(g, 1.0, VolumeKind::Hu).unwrap();
        let m = LabelMap::new(g, vec![1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
        let e = extract_object(&v, &m, 1).unwrap();
        assert!(e.label_present);
        assert_eq!(e.volume.values().iter().filter(|&&x| x == 1.0).count(), 4);

        let absent = extract_object(&v, &m, 9).unwrap();
        assert!(!absent.label_present);
        assert!(absent.volume.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn extract_rejects_grid_mismatch() {
        let v = ScalarVolume::filled(grid222(), 1.0, VolumeKind::Hu).unwrap();
        let g2 = Grid3::new([2, 2, 2], [2.0; 3], [0.0; 3]).unwrap();
        let m = LabelMap::new(g2, vec![1; 8]).unwrap();
        assert!(matches!(
            extract_object(&v, &m, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn object_set_validation() {
        let e = |label, name: &str| ObjectEntry {
            label,
            name: name.into(),
            class: ObjectClass::Muscle,
        };
        assert!(ObjectSet::new(vec![e(1, "a"), e(1, "b")]).is_err());
        assert!(ObjectSet::new(vec![e(0, "a")]).is_err());
        let set = ObjectSet::new(vec![e(3, "a"), e(1, "b")]).unwrap();
        assert_eq!(set.index_of("b"), Some(1));
        let json = serde_json::to_string(&set).unwrap();
        let back: ObjectSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
        assert!(serde_json::from_str::<ObjectSet>(
            r#"[{"label":1,"name":"a","class":"bone"},{"label":1,"name":"b","class":"bone"}]"#
        )
        .is_err());
    }

    #[test]
    fn nonzero_bounds() {
        let g = Grid3::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let mut vals = vec![0.0; 27];
        vals[g.index(1, 2, 0)] = 1.0;
        vals[g.index(2, 1, 1)] = 1.0;
        let v = ScalarVolume::new(g, vals, VolumeKind::Indicator).unwrap();
        assert_eq!(v.nonzero_bounds(), Some(([1, 1, 0], [2, 2, 1])));
        let z = ScalarVolume::filled(g, 0.0, VolumeKind::Indicator).unwrap();
        assert_eq!(z.nonzero_bounds(), None);
    }
}
