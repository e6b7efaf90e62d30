//! Seeded synthetic head-CT phantoms: soft tissue, bone tubes and shells,
//! small calcified lesions (some touching bone) and faint distractor blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::CALCIFICATION_HU;
use crate::phantom::volume::{linear, LabelVolume, Volume, DEFAULT_SPACING};

const ATTEMPTS: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[depth, height, width]` in voxels.
    pub size: [usize; 3],
    pub spacing: [f64; 3],
    pub tubes: usize,
    pub tube_radius_mm: [f64; 2],
    /// Curved bone shells.
    pub plates: usize,
    pub plate_thickness_mm: [f64; 2],
    /// Inclusive range of the lesion count.
    pub lesions: [usize; 2],
    pub lesion_radius_mm: [f64; 2],
    /// Probability that a lesion touches bone.
    pub adjacent_fraction: f64,
    pub lesion_hu: [f64; 2],
    pub bone_hu: [f64; 2],
    pub background_hu: [f64; 2],
    pub distractors: usize,
    pub distractor_hu: [f64; 2],
    pub distractor_radius_mm: [f64; 2],
    pub noise_sd: f64,
    /// Lesion-free border per axis, in voxels.
    pub margin: [usize; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [48, 96, 96],
            spacing: DEFAULT_SPACING,
            tubes: 2,
            tube_radius_mm: [1.5, 3.0],
            plates: 1,
            plate_thickness_mm: [2.0, 4.0],
            lesions: [2, 6],
            lesion_radius_mm: [1.0, 2.2],
            adjacent_fraction: 0.5,
            lesion_hu: [140.0, 800.0],
            bone_hu: [400.0, 1200.0],
            background_hu: [20.0, 80.0],
            distractors: 4,
            distractor_hu: [90.0, 125.0],
            distractor_radius_mm: [1.0, 3.0],
            noise_sd: 10.0,
            margin: [4, 16, 16],
            seed: 0,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!(
            "{name} must be an ordered finite range, got {r:?}"
        )));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("phantom spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("tube_radius_mm", self.tube_radius_mm),
            ("plate_thickness_mm", self.plate_thickness_mm),
            ("lesion_radius_mm", self.lesion_radius_mm),
            ("lesion_hu", self.lesion_hu),
            ("bone_hu", self.bone_hu),
            ("background_hu", self.background_hu),
            ("distractor_hu", self.distractor_hu),
            ("distractor_radius_mm", self.distractor_radius_mm),
        ] {
            ordered(name, r)?;
        }
        if self.size.contains(&0) {
            return Err(Error::Config(format!(
                "size must be positive, got {:?}",
                self.size
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.lesions[0] > self.lesions[1] {
            return Err(Error::Config(format!(
                "lesions range {:?} is not ordered",
                self.lesions
            )));
        }
        if self.lesion_hu[0] <= CALCIFICATION_HU {
            return Err(Error::Config(format!(
                "lesion_hu must start above {CALCIFICATION_HU}, got {}",
                self.lesion_hu[0]
            )));
        }
        if self.bone_hu[0] <= CALCIFICATION_HU {
            return Err(Error::Config(format!(
                "bone_hu must start above {CALCIFICATION_HU}"
            )));
        }
        if self.background_hu[1] > CALCIFICATION_HU || self.distractor_hu[1] > CALCIFICATION_HU {
            return Err(Error::Config(format!(
                "background_hu and distractor_hu must stay at or below {CALCIFICATION_HU}"
            )));
        }
        if !(0.0..=1.0).contains(&self.adjacent_fraction) {
            return Err(Error::Config("adjacent_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("noise_sd must be finite and >= 0".into()));
        }
        if self.lesion_radius_mm[0] <= 0.0 {
            return Err(Error::Config("lesion_radius_mm must be positive".into()));
        }
        for a in 0..3 {
            if 2 * self.margin[a] >= self.size[a] {
                return Err(Error::Config(format!(
                    "margin {:?} leaves no interior in size {:?}",
                    self.margin, self.size
                )));
            }
        }
        Ok(())
    }

    /// Checks that the lesion-free border covers half of receptive field
    /// `rf` (`[depth, height, width]`).
    pub fn validate_margin(&self, rf: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.margin[a] < rf[a] / 2 {
                return Err(Error::Config(format!(
                    "margin {:?} is below half the receptive field {rf:?}",
                    self.margin
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Soft,
    Bone,
    Lesion,
    Distractor,
}

struct Grid {
    dims: [usize; 3],
    /// Voxel size in mm, `[depth, height, width]`.
    spacing: [f64; 3],
    class: Vec<Tissue>,
    hu: Vec<f64>,
}

const NEIGHBOURS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

impl Grid {
    fn mm(&self, p: [usize; 3]) -> [f64; 3] {
        [
            p[0] as f64 * self.spacing[0],
            p[1] as f64 * self.spacing[1],
            p[2] as f64 * self.spacing[2],
        ]
    }

    fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    fn step(&self, p: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
        let mut q = [0; 3];
        for a in 0..3 {
            let v = p[a] as isize + d[a];
            if v < 0 || v >= self.dims[a] as isize {
                return None;
            }
            q[a] = v as usize;
        }
        Some(q)
    }

    fn at(&self, p: [usize; 3]) -> usize {
        linear(self.dims, p[0], p[1], p[2])
    }

    fn paint(&mut self, pred: impl Fn([f64; 3]) -> bool, hu: f64) {
        for z in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[2] {
                    if pred(self.mm([z, y, x])) {
                        let i = self.at([z, y, x]);
                        self.class[i] = Tissue::Bone;
                        self.hu[i] = hu;
                    }
                }
            }
        }
    }
}

/// Voxels of the axis-aligned ellipsoid with semi-axes `r` (voxels)
/// around integer `centre`; `None` if any falls outside `[lo, hi)`.
fn ellipsoid(
    centre: [usize; 3],
    r: [f64; 3],
    lo: [usize; 3],
    hi: [usize; 3],
) -> Option<Vec<[usize; 3]>> {
    let ext = r.map(|v| v.floor() as isize);
    let mut out = Vec::new();
    for dz in -ext[0]..=ext[0] {
        for dy in -ext[1]..=ext[1] {
            for dx in -ext[2]..=ext[2] {
                let q = (dz as f64 / r[0]).powi(2)
                    + (dy as f64 / r[1]).powi(2)
                    + (dx as f64 / r[2]).powi(2);
                if q > 1.0 {
                    continue;
                }
                let mut p = [0usize; 3];
                for (a, d) in [dz, dy, dx].into_iter().enumerate() {
                    let v = centre[a] as isize + d;
                    if v < lo[a] as isize || v >= hi[a] as isize {
                        return None;
                    }
                    p[a] = v as usize;
                }
                out.push(p);
            }
        }
    }
    Some(out)
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
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

/// Generates the phantom for `spec.seed` (stream 0).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    generate_indexed(spec, 0)
}

/// Generates phantom number `index` of a dataset: each index draws from its
/// own stream of the `spec.seed` generator.
pub fn generate_indexed(spec: &PhantomSpec, index: u64) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let dims = spec.size;
    let n: usize = dims.iter().product();
    let base = uniform(&mut rng, spec.background_hu);
    let mut g = Grid {
        dims,
        spacing: spec.spacing,
        class: vec![Tissue::Soft; n],
        hu: vec![base; n],
    };
    let ext = g.extent_mm();

    for _ in 0..spec.tubes {
        let p = [0, 1, 2].map(|a| rng.gen_range(0.2..0.8) * ext[a]);
        let d = unit_vector(&mut rng);
        let r = uniform(&mut rng, spec.tube_radius_mm);
        let hu = uniform(&mut rng, spec.bone_hu);
        g.paint(
            |x| {
                let v = sub(x, p);
                let t = dot(v, d);
                norm([v[0] - t * d[0], v[1] - t * d[1], v[2] - t * d[2]]) <= r
            },
            hu,
        );
    }
    for _ in 0..spec.plates {
        let through = [0, 1, 2].map(|a| rng.gen_range(0.25..0.75) * ext[a]);
        let dir = unit_vector(&mut rng);
        let radius = rng.gen_range(0.6..1.2) * norm(ext);
        let c = [0, 1, 2].map(|a| through[a] + dir[a] * radius);
        let t = uniform(&mut rng, spec.plate_thickness_mm);
        let hu = uniform(&mut rng, spec.bone_hu);
        g.paint(|x| (norm(sub(x, c)) - radius).abs() <= t / 2.0, hu);
    }

    let lo = spec.margin;
    let hi = [0, 1, 2].map(|a| dims[a] - spec.margin[a]);
    let bone_surface: Vec<([usize; 3], [isize; 3])> = {
        let mut s = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z, y, x];
                    if g.class[g.at(p)] != Tissue::Bone {
                        continue;
                    }
                    for d in NEIGHBOURS {
                        if let Some(q) = g.step(p, d) {
                            if g.class[g.at(q)] != Tissue::Bone
                                && (0..3).all(|a| q[a] >= lo[a] && q[a] < hi[a])
                            {
                                s.push((p, d));
                            }
                        }
                    }
                }
            }
        }
        s
    };

    let count = rng.gen_range(spec.lesions[0]..=spec.lesions[1]);
    for k in 0..count {
        let adjacent = rng.gen_bool(spec.adjacent_fraction);
        if adjacent && bone_surface.is_empty() {
            return Err(Error::Generation(format!(
                "lesion {k} must touch bone but no bone surface lies inside the margin"
            )));
        }
        let hu = uniform(&mut rng, spec.lesion_hu);
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let r = [0, 1, 2]
                .map(|a| (uniform(&mut rng, spec.lesion_radius_mm) / spec.spacing[a]).max(0.5));
            let centre = if adjacent {
                let (s, d) = bone_surface[rng.gen_range(0..bone_surface.len())];
                let axis = d.iter().position(|&v| v != 0).expect("unit step");
                let off = r[axis].floor() as isize + 1;
                match g.step(s, d.map(|v| v * off)) {
                    Some(c) => c,
                    None => continue,
                }
            } else {
                [0, 1, 2].map(|a| rng.gen_range(lo[a]..hi[a]))
            };
            let Some(voxels) = ellipsoid(centre, r, lo, hi) else {
                continue;
            };
            if voxels.iter().any(|&p| g.class[g.at(p)] != Tissue::Soft) {
                continue;
            }
            let mut touches_bone = false;
            let mut crowded = false;
            for &p in &voxels {
                for d in NEIGHBOURS {
                    if let Some(q) = g.step(p, d) {
                        touches_bone |= g.class[g.at(q)] == Tissue::Bone;
                    }
                }
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if let Some(q) = g.step(p, [dz, dy, dx]) {
                                crowded |= g.class[g.at(q)] == Tissue::Lesion;
                            }
                        }
                    }
                }
            }
            if crowded || touches_bone != adjacent {
                continue;
            }
            for p in voxels {
                let i = g.at(p);
                g.class[i] = Tissue::Lesion;
                g.hu[i] = hu;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {k} ({}) after {ATTEMPTS} attempts",
                if adjacent { "bone-adjacent" } else { "free" }
            )));
        }
    }

    for _ in 0..spec.distractors {
        let r = [0, 1, 2]
            .map(|a| (uniform(&mut rng, spec.distractor_radius_mm) / spec.spacing[a]).max(0.5));
        let centre = [0, 1, 2].map(|a| rng.gen_range(0..dims[a]));
        let hu = uniform(&mut rng, spec.distractor_hu);
        let ext = r.map(|v| v.floor() as isize);
        for dz in -ext[0]..=ext[0] {
            for dy in -ext[1]..=ext[1] {
                for dx in -ext[2]..=ext[2] {
                    let q = (dz as f64 / r[0]).powi(2)
                        + (dy as f64 / r[1]).powi(2)
                        + (dx as f64 / r[2]).powi(2);
                    if q > 1.0 {
                        continue;
                    }
                    if let Some(p) = g.step(centre, [dz, dy, dx]) {
                        let i = g.at(p);
                        if g.class[i] == Tissue::Soft {
                            g.class[i] = Tissue::Distractor;
                            g.hu[i] = hu;
                        }
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let above = (CALCIFICATION_HU + 1.0) as f32;
    let mut data = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for i in 0..n {
        let e = if spec.noise_sd > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        let v = (g.hu[i] + e) as f32;
        let v = match g.class[i] {
            Tissue::Bone | Tissue::Lesion => v.max(above),
            Tissue::Soft | Tissue::Distractor => v.min(CALCIFICATION_HU as f32),
        };
        data.push(v);
        label.push(u8::from(g.class[i] == Tissue::Lesion));
    }
    Ok((
        Volume::new(dims, spec.spacing, data)?,
        LabelVolume::new(dims, spec.spacing, label)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            size: [16, 40, 40],
            margin: [2, 6, 6],
            ..Default::default()
        }
    }

    #[test]
    fn no_lesions_gives_empty_label() {
        let spec = PhantomSpec {
            lesions: [0, 0],
            ..small()
        };
        let (_, l) = generate_phantom(&spec).unwrap();
        assert_eq!(l.count(), 0);
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_indexed(&small(), 1).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn label_invariant_holds() {
        for seed in 0..5 {
            let spec = PhantomSpec { seed, ..small() };
            let (v, l) = generate_phantom(&spec).unwrap();
            for (x, y) in v.data.iter().zip(&l.data) {
                if *y == 1 {
                    assert!(*x > 130.0);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            PhantomSpec {
                lesion_hu: [120.0, 800.0],
                ..small()
            },
            PhantomSpec {
                margin: [8, 6, 6],
                ..small()
            },
            PhantomSpec {
                adjacent_fraction: 1.5,
                ..small()
            },
            PhantomSpec {
                background_hu: [20.0, 200.0],
                ..small()
            },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))));
        }
        assert!(small().validate_margin([7, 32, 32]).is_err());
        assert!(small().validate_margin([5, 13, 13]).is_ok());
    }

    #[test]
    fn impossible_placement_is_a_generation_error() {
        let spec = PhantomSpec {
            lesions: [3, 3],
            lesion_radius_mm: [6.0, 6.0],
            ..small()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Generation(_))));
    }
}
