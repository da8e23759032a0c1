//! Deterministic synthetic transmission-corridor scenes.
//!
//! The line runs along +x. Towers stand at `x = i * span_length`; phase
//! conductors hang between insulator attachment points as catenaries
//! `z = z0 + a (cosh((x - xm) / a) - 1)`. Middle towers carry one of three
//! structural families; the two end towers are always dead-end tension
//! towers. Terrain, vegetation blobs, a road and a building fill the
//! corridor and make up the bulk of the points.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::io::{write_scene, ManifestEntry, SceneManifest, Split};
use crate::model::{class, ClassId, LabeledCloud, Point3, ProbabilityField, Taxonomy};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TowerType {
    /// Vertical line-insulator strings.
    Suspension,
    /// Horizontal strain strings on both sides, joined by a jumper loop.
    Tension,
    /// Two inclined arms per phase.
    VString,
}

impl TowerType {
    pub const ALL: [TowerType; 3] = [TowerType::Suspension, TowerType::Tension, TowerType::VString];

    pub fn as_str(self) -> &'static str {
        match self {
            TowerType::Suspension => "suspension",
            TowerType::Tension => "tension",
            TowerType::VString => "vstring",
        }
    }
}

impl std::str::FromStr for TowerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TowerType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tower_type {s:?} (suspension, tension, vstring)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorridorSpec {
    /// Distance between neighboring towers, meters.
    pub span_length: f64,
    pub towers: usize,
    /// Family of the middle towers.
    pub tower_type: TowerType,
    pub phases: usize,
    /// Subconductors per phase.
    pub bundle: usize,
    /// Midspan sag of a level span, meters; converted to the catenary parameter.
    pub sag: f64,
    /// Overrides `sag` when set.
    pub catenary_a: Option<f64>,
    pub ground_wires: usize,
    /// The first ground wire is an optical cable.
    pub optical: bool,
    /// Points per meter of wire.
    pub conductor_density: f64,
    /// Points per meter of lattice member.
    pub tower_density: f64,
    /// Points per meter of insulator string.
    pub insulator_density: f64,
    /// Points per meter of spacer bar.
    pub spacer_density: f64,
    /// Distance between bundle spacers along a span, meters.
    pub spacer_interval: f64,
    /// Terrain points per square meter.
    pub ground_density: f64,
    pub corridor_width: f64,
    pub vegetation_blobs: usize,
    /// Points per vegetation blob.
    pub vegetation_points: usize,
    pub road: bool,
    pub building: bool,
    /// Gaussian coordinate noise, meters.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self {
            span_length: 100.0,
            towers: 3,
            tower_type: TowerType::Suspension,
            phases: 3,
            bundle: 2,
            sag: 4.0,
            catenary_a: None,
            ground_wires: 2,
            optical: true,
            conductor_density: 1.5,
            tower_density: 3.0,
            insulator_density: 20.0,
            spacer_density: 15.0,
            spacer_interval: 30.0,
            ground_density: 6.0,
            corridor_width: 40.0,
            vegetation_blobs: 10,
            vegetation_points: 1500,
            road: true,
            building: true,
            noise: 0.02,
            seed: 0,
        }
    }
}

const ARM_LEVELS: [(f64, f64); 4] = [(-7.0, 22.0), (7.0, 22.0), (-5.0, 26.0), (5.0, 26.0)];
const TOWER_HEIGHT: f64 = 30.0;
const INSULATOR_LENGTH: f64 = 2.0;
const STRAIN_DROP: f64 = 0.3;
const BUNDLE_SPACING: f64 = 0.45;
const V_ARM_SPREAD: f64 = 1.0;
const JUMPER_DROP: f64 = 1.5;

impl CorridorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("span_length", self.span_length),
            ("sag", self.sag),
            ("conductor_density", self.conductor_density),
            ("tower_density", self.tower_density),
            ("insulator_density", self.insulator_density),
            ("spacer_density", self.spacer_density),
            ("spacer_interval", self.spacer_interval),
            ("corridor_width", self.corridor_width),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(a) = self.catenary_a {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("catenary_a must be positive, got {a}")));
            }
        }
        if !(self.ground_density >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("ground_density and noise must be non-negative".into()));
        }
        if self.towers < 2 {
            return Err(Error::Config("a corridor needs at least 2 towers".into()));
        }
        if self.phases == 0 || self.phases > ARM_LEVELS.len() {
            return Err(Error::Config(format!("phases must be 1..={}", ARM_LEVELS.len())));
        }
        if self.bundle == 0 || self.bundle > 4 {
            return Err(Error::Config("bundle must be 1..=4".into()));
        }
        if self.ground_wires > 2 {
            return Err(Error::Config("at most 2 ground wires".into()));
        }
        Ok(())
    }

    /// Catenary parameter: the override, or the `a` whose level span of
    /// `span_length` sags by `sag` (bisection on `a (cosh(L / 2a) - 1)`).
    pub fn catenary_parameter(&self) -> f64 {
        if let Some(a) = self.catenary_a {
            return a;
        }
        let half = self.span_length / 2.0;
        let sag_of = |a: f64| a * ((half / a).cosh() - 1.0);
        // sag decreases in a
        let (mut lo, mut hi) = (half / 700.0, 1e7);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if sag_of(mid) > self.sag {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            span_length: kv.get_or("span_length", d.span_length)?,
            towers: kv.get_or("towers", d.towers)?,
            tower_type: kv.get_or("tower_type", d.tower_type)?,
            phases: kv.get_or("phases", d.phases)?,
            bundle: kv.get_or("bundle", d.bundle)?,
            sag: kv.get_or("sag", d.sag)?,
            catenary_a: kv.get("catenary_a")?,
            ground_wires: kv.get_or("ground_wires", d.ground_wires)?,
            optical: kv.get_or("optical", d.optical)?,
            conductor_density: kv.get_or("conductor_density", d.conductor_density)?,
            tower_density: kv.get_or("tower_density", d.tower_density)?,
            insulator_density: kv.get_or("insulator_density", d.insulator_density)?,
            spacer_density: kv.get_or("spacer_density", d.spacer_density)?,
            spacer_interval: kv.get_or("spacer_interval", d.spacer_interval)?,
            ground_density: kv.get_or("ground_density", d.ground_density)?,
            corridor_width: kv.get_or("corridor_width", d.corridor_width)?,
            vegetation_blobs: kv.get_or("vegetation_blobs", d.vegetation_blobs)?,
            vegetation_points: kv.get_or("vegetation_points", d.vegetation_points)?,
            road: kv.get_or("road", d.road)?,
            building: kv.get_or("building", d.building)?,
            noise: kv.get_or("noise", d.noise)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> String {
        let mut s = format!(
            "span_length = {}\ntowers = {}\ntower_type = {}\nphases = {}\nbundle = {}\nsag = {}\n",
            self.span_length,
            self.towers,
            self.tower_type.as_str(),
            self.phases,
            self.bundle,
            self.sag
        );
        if let Some(a) = self.catenary_a {
            s += &format!("catenary_a = {a}\n");
        }
        s += &format!(
            "ground_wires = {}\noptical = {}\nconductor_density = {}\ntower_density = {}\ninsulator_density = {}\n\
             spacer_density = {}\nspacer_interval = {}\nground_density = {}\ncorridor_width = {}\n\
             vegetation_blobs = {}\nvegetation_points = {}\nroad = {}\nbuilding = {}\nnoise = {}\nseed = {}\n",
            self.ground_wires,
            self.optical,
            self.conductor_density,
            self.tower_density,
            self.insulator_density,
            self.spacer_density,
            self.spacer_interval,
            self.ground_density,
            self.corridor_width,
            self.vegetation_blobs,
            self.vegetation_points,
            self.road,
            self.building,
            self.noise,
            self.seed
        );
        s
    }

    pub fn corridor_length(&self) -> f64 {
        self.span_length * (self.towers - 1) as f64
    }

    fn tower_kind(&self, i: usize) -> TowerType {
        if i == 0 || i + 1 == self.towers {
            TowerType::Tension
        } else {
            self.tower_type
        }
    }
}

/// A straight generated part with known endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub class: ClassId,
    pub kind: &'static str,
    pub tower: Option<usize>,
    /// Point indices in the generated cloud.
    pub members: Vec<usize>,
    /// Noise-free endpoints.
    pub start: Point3,
    pub end: Point3,
}

impl Component {
    pub fn orientation(&self) -> f64 {
        crate::geoverify::orientation_ratio(&self.start, &self.end).ratio
    }
}

/// One wire span.
#[derive(Debug, Clone, PartialEq)]
pub struct Catenary {
    pub class: ClassId,
    pub y: f64,
    pub x0: f64,
    pub x1: f64,
    pub a: f64,
    pub xm: f64,
    pub z0: f64,
    pub members: Vec<usize>,
}

impl Catenary {
    /// Catenary through `(x0, z_start)` and `(x1, z_end)` with parameter `a`.
    pub fn through(class: ClassId, y: f64, x0: f64, z_start: f64, x1: f64, z_end: f64, a: f64) -> Self {
        let half = (x1 - x0) / (2.0 * a);
        let shift = ((z_end - z_start) / (2.0 * a * half.sinh())).asinh();
        let xm = (x0 + x1) / 2.0 - a * shift;
        let z0 = z_start - a * (((x0 - xm) / a).cosh() - 1.0);
        Self {
            class,
            y,
            x0,
            x1,
            a,
            xm,
            z0,
            members: Vec::new(),
        }
    }

    pub fn z(&self, x: f64) -> f64 {
        self.z0 + self.a * (((x - self.xm) / self.a).cosh() - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: LabeledCloud,
    /// Points emitted per class.
    pub counts: Vec<u64>,
    pub components: Vec<Component>,
    pub catenaries: Vec<Catenary>,
    pub spec: CorridorSpec,
}

impl SynthScene {
    pub fn components_of(&self, c: ClassId) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(move |k| k.class == c)
    }
}

struct Builder {
    coords: Vec<Point3>,
    labels: Vec<ClassId>,
}

impl Builder {
    fn push(&mut self, p: Point3, c: ClassId) -> usize {
        self.coords.push(p);
        self.labels.push(c);
        self.coords.len() - 1
    }

    /// Evenly spaced points including both endpoints.
    fn segment(&mut self, a: Point3, b: Point3, density: f64, c: ClassId) -> Vec<usize> {
        let len = crate::spatial::dist2(&a, &b).sqrt();
        let n = ((len * density).round() as usize).max(2);
        (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                self.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])], c)
            })
            .collect()
    }
}

fn terrain(x: f64, y: f64) -> f64 {
    0.4 * (x / 40.0).sin() + 0.25 * (y / 15.0).cos()
}

pub fn generate(spec: &CorridorSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut b = Builder {
        coords: Vec::new(),
        labels: Vec::new(),
    };
    let mut components = Vec::new();
    let mut catenaries = Vec::new();
    let a = spec.catenary_parameter();
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k]));
    let length = spec.corridor_length();
    let half_w = spec.corridor_width / 2.0;

    // terrain and road
    let mut rng = stream(1);
    let (gx0, gx1) = (-10.0, length + 10.0);
    let road_x = length * 0.3 + spec.span_length * 0.1;
    let n_ground = (spec.ground_density * (gx1 - gx0) * spec.corridor_width).round() as usize;
    for _ in 0..n_ground {
        let x = rng.gen_range(gx0..gx1);
        let y = rng.gen_range(-half_w..half_w);
        let c = if spec.road && (x - road_x).abs() < 2.0 {
            class::ROAD
        } else {
            class::GROUND
        };
        b.push([x, y, terrain(x, y)], c);
    }

    // vegetation: gaussian blobs clipped at the terrain
    let mut rng = stream(2);
    for k in 0..spec.vegetation_blobs {
        let tall = k % 2 == 0;
        let cx = rng.gen_range(gx0..gx1);
        // keep trees out of the conductor band
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let cy = side * rng.gen_range(11.0..half_w.max(11.5));
        let (sxy, sz, cz, c) = if tall {
            (1.8, 1.5, 4.0, class::HIGH_VEGETATION)
        } else {
            (1.5, 0.4, 0.5, class::LOW_VEGETATION)
        };
        let nxy = Normal::new(0.0, sxy).unwrap();
        let nz = Normal::new(0.0, sz).unwrap();
        for _ in 0..spec.vegetation_points {
            let x = cx + nxy.sample(&mut rng);
            let y = cy + nxy.sample(&mut rng);
            let g = terrain(x, y);
            let z = (g + cz + nz.sample(&mut rng)).max(g + 0.05);
            b.push([x, y, z], c);
        }
    }

    // building: box walls and roof
    if spec.building {
        let mut rng = stream(3);
        let (bx, by) = (length * 0.6, -(half_w - 6.0));
        let (lx, ly, h) = (10.0, 8.0, 6.0);
        let g = terrain(bx, by);
        let area = 2.0 * (lx + ly) * h + lx * ly;
        for _ in 0..(area * 2.0) as usize {
            let face = rng.gen_range(0.0..area);
            let p = if face < lx * ly {
                [bx + rng.gen_range(0.0..lx), by + rng.gen_range(0.0..ly), g + h]
            } else {
                let t = rng.gen_range(0.0..2.0 * (lx + ly));
                let z = g + rng.gen_range(0.0..h);
                if t < lx {
                    [bx + t, by, z]
                } else if t < lx + ly {
                    [bx + lx, by + t - lx, z]
                } else if t < 2.0 * lx + ly {
                    [bx + t - lx - ly, by + ly, z]
                } else {
                    [bx, by + t - 2.0 * lx - ly, z]
                }
            };
            b.push(p, class::BUILDING);
        }
    }

    // towers
    let tower_x: Vec<f64> = (0..spec.towers).map(|i| i as f64 * spec.span_length).collect();
    for (t, &x) in tower_x.iter().enumerate() {
        let g = terrain(x, 0.0);
        let d = spec.tower_density;
        let (base, top) = (1.6, 0.6);
        for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            b.segment([x + sx * base, sy * base, g], [x + sx * top, sy * top, g + TOWER_HEIGHT], d, class::TOWER);
        }
        let width = |z: f64| base + (top - base) * (z - g) / TOWER_HEIGHT;
        for level in [8.0, 16.0, 22.0, 26.0] {
            let z = g + level;
            let w = width(z);
            b.segment([x - w, -w, z], [x + w, w, z], d, class::TOWER);
            b.segment([x - w, w, z], [x + w, -w, z], d, class::TOWER);
        }
        for &(arm_z, reach) in &[(22.0, 7.5), (26.0, 5.5)] {
            let z = g + arm_z;
            for dx in [-0.5, 0.5] {
                b.segment([x + dx, -reach, z], [x + dx, reach, z], d, class::TOWER);
            }
        }
        if spec.ground_wires > 0 {
            for s in [-1.0, 1.0] {
                b.segment([x, s * top, g + TOWER_HEIGHT], [x, s * 3.0, g + TOWER_HEIGHT + 1.0], d, class::TOWER);
            }
        }

        // insulators per phase
        let kind = spec.tower_kind(t);
        for &(py, arm) in ARM_LEVELS.iter().take(spec.phases) {
            let z = g + arm;
            match kind {
                TowerType::Suspension => {
                    let (s, e) = ([x, py, z], [x, py, z - INSULATOR_LENGTH]);
                    let members = b.segment(s, e, spec.insulator_density, class::LINE_INSULATOR);
                    components.push(Component {
                        class: class::LINE_INSULATOR,
                        kind: "line_insulator",
                        tower: Some(t),
                        members,
                        start: s,
                        end: e,
                    });
                }
                TowerType::VString => {
                    let bottom = [x, py, z - INSULATOR_LENGTH];
                    let mut members = Vec::new();
                    for s in [-1.0, 1.0] {
                        members.extend(b.segment([x, py + s * V_ARM_SPREAD, z], bottom, spec.insulator_density, class::V_STRING_INSULATOR));
                    }
                    components.push(Component {
                        class: class::V_STRING_INSULATOR,
                        kind: "v_string",
                        tower: Some(t),
                        members,
                        start: [x, py - V_ARM_SPREAD, z],
                        end: [x, py + V_ARM_SPREAD, z],
                    });
                }
                TowerType::Tension => {
                    let mut ends = Vec::new();
                    for dir in [-1.0, 1.0] {
                        let outward = (dir < 0.0 && t > 0) || (dir > 0.0 && t + 1 < spec.towers);
                        if !outward {
                            continue;
                        }
                        let s = [x + dir * 0.5, py, z];
                        let e = [x + dir * (0.5 + INSULATOR_LENGTH), py, z - STRAIN_DROP];
                        let members = b.segment(s, e, spec.insulator_density, class::STRAIN_INSULATOR);
                        components.push(Component {
                            class: class::STRAIN_INSULATOR,
                            kind: "strain_insulator",
                            tower: Some(t),
                            members,
                            start: s,
                            end: e,
                        });
                        ends.push(e);
                    }
                    if let [l, r] = ends[..] {
                        let jumper = Catenary::through(class::JUMPER, py, l[0], l[2] - 0.2, r[0], r[2] - 0.2, 1.0);
                        let low = jumper.z((l[0] + r[0]) / 2.0);
                        let mut j = Catenary::through(class::JUMPER, py, l[0], l[2] - 0.2, r[0], r[2] - 0.2, jumper.a);
                        j.z0 += (l[2] - JUMPER_DROP) - low;
                        let n = (((r[0] - l[0]) * spec.insulator_density).round() as usize).max(2);
                        let mut members = Vec::new();
                        for k in 0..n {
                            let xx = l[0] + (r[0] - l[0]) * (k as f64 + 0.5) / n as f64;
                            members.push(b.push([xx, py, j.z(xx).min(l[2])], class::JUMPER));
                        }
                        components.push(Component {
                            class: class::JUMPER,
                            kind: "jumper",
                            tower: Some(t),
                            members,
                            start: l,
                            end: r,
                        });
                    }
                }
            }
        }
    }

    // attachment point of phase `p` on tower `t`, seen from side `dir`
    let attach = |t: usize, p: usize, dir: f64| -> Point3 {
        let x = tower_x[t];
        let (py, arm) = ARM_LEVELS[p];
        let z = terrain(x, 0.0) + arm;
        match spec.tower_kind(t) {
            TowerType::Suspension | TowerType::VString => [x, py, z - INSULATOR_LENGTH],
            TowerType::Tension => [x + dir * (0.5 + INSULATOR_LENGTH), py, z - STRAIN_DROP],
        }
    };

    // conductors, spacers and ground wires
    let mut rng = stream(4);
    for span in 0..spec.towers - 1 {
        for p in 0..spec.phases {
            let s = attach(span, p, 1.0);
            let e = attach(span + 1, p, -1.0);
            let offsets: Vec<f64> = (0..spec.bundle)
                .map(|k| (k as f64 - (spec.bundle - 1) as f64 / 2.0) * BUNDLE_SPACING)
                .collect();
            let mut wires = Vec::new();
            for &dy in &offsets {
                let mut cat = Catenary::through(class::CONDUCTOR, s[1] + dy, s[0], s[2], e[0], e[2], a);
                let n = ((e[0] - s[0]) * spec.conductor_density).round() as usize;
                for _ in 0..n {
                    let x = rng.gen_range(s[0]..e[0]);
                    cat.members.push(b.push([x, cat.y, cat.z(x)], class::CONDUCTOR));
                }
                wires.push(cat);
            }
            if spec.bundle > 1 {
                let mut x = s[0] + spec.spacer_interval;
                while x < e[0] - spec.spacer_interval / 2.0 {
                    let z = wires[0].z(x);
                    let (y0, y1) = (wires[0].y, wires[wires.len() - 1].y);
                    let members = b.segment([x, y0, z], [x, y1, z], spec.spacer_density, class::SPACER);
                    components.push(Component {
                        class: class::SPACER,
                        kind: "spacer",
                        tower: None,
                        members,
                        start: [x, y0, z],
                        end: [x, y1, z],
                    });
                    x += spec.spacer_interval;
                }
            }
            catenaries.extend(wires);
        }
        for w in 0..spec.ground_wires {
            let side = if w == 0 { 3.0 } else { -3.0 };
            let c = if w == 0 && spec.optical {
                class::OPTICAL_CABLE
            } else {
                class::GROUND_WIRE
            };
            let (x0, x1) = (tower_x[span], tower_x[span + 1]);
            let z0 = terrain(x0, 0.0) + TOWER_HEIGHT + 1.0;
            let z1 = terrain(x1, 0.0) + TOWER_HEIGHT + 1.0;
            let mut cat = Catenary::through(c, side, x0, z0, x1, z1, a * 1.2);
            let n = ((x1 - x0) * spec.conductor_density).round() as usize;
            for _ in 0..n {
                let x = rng.gen_range(x0..x1);
                cat.members.push(b.push([x, side, cat.z(x)], c));
            }
            catenaries.push(cat);
        }
    }

    if b.coords.is_empty() {
        return Err(Error::InvalidData("corridor spec produced no points".into()));
    }
    if spec.noise > 0.0 {
        let mut rng = stream(5);
        let nd = Normal::new(0.0, spec.noise).unwrap();
        for p in &mut b.coords {
            for v in p.iter_mut() {
                *v += nd.sample(&mut rng);
            }
        }
    }
    let tax = Taxonomy::default();
    let mut counts = vec![0u64; tax.num_classes()];
    for &l in &b.labels {
        counts[l as usize] += 1;
    }
    let cloud = LabeledCloud::labeled(format!("corridor-{}", spec.seed), b.coords, b.labels)?;
    Ok(SynthScene {
        cloud,
        counts,
        components,
        catenaries,
        spec: spec.clone(),
    })
}

/// Scene mix of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkProfile {
    /// Template for every scene; seed and tower family vary per scene.
    pub base: CorridorSpec,
    /// Relative span-length jitter, uniform in `[-j, j]`.
    pub span_jitter: f64,
}

impl Default for BenchmarkProfile {
    fn default() -> Self {
        Self {
            base: CorridorSpec::default(),
            span_jitter: 0.15,
        }
    }
}

impl BenchmarkProfile {
    /// Smaller scenes for quick end-to-end runs: shorter spans and sparser
    /// terrain and vegetation, same class structure.
    pub fn desk() -> Self {
        Self {
            base: CorridorSpec {
                span_length: 60.0,
                ground_density: 2.0,
                corridor_width: 32.0,
                vegetation_blobs: 6,
                vegetation_points: 500,
                ..CorridorSpec::default()
            },
            span_jitter: 0.15,
        }
    }

    /// `profile = default|desk` picks the starting point; `span_jitter` and
    /// any corridor key override it.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let mut profile = match kv.get_str("profile").unwrap_or("default") {
            "default" => Self::default(),
            "desk" => Self::desk(),
            other => return Err(Error::Config(format!("unknown benchmark profile {other:?} (default, desk)"))),
        };
        let mut merged = KeyValues::parse(&profile.base.to_config())?;
        for (k, v) in kv.iter().filter(|(k, _)| !matches!(*k, "profile" | "span_jitter" | "scenes")) {
            merged.set(k, v);
        }
        profile.base = CorridorSpec::from_config(&merged)?;
        profile.span_jitter = kv.get_or("span_jitter", profile.span_jitter)?;
        if !(0.0..1.0).contains(&profile.span_jitter) {
            return Err(Error::Config(format!("span_jitter must lie in [0, 1), got {}", profile.span_jitter)));
        }
        Ok(profile)
    }
}

/// Spec of scene `i`: tower families cycle so every family appears.
pub fn benchmark_spec(profile: &BenchmarkProfile, i: usize, seed: u64) -> CorridorSpec {
    let scene_seed = derive_seed(seed, &[0x5ce4e, i as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let jitter = if profile.span_jitter > 0.0 {
        rng.gen_range(-profile.span_jitter..=profile.span_jitter)
    } else {
        0.0
    };
    CorridorSpec {
        span_length: profile.base.span_length * (1.0 + jitter),
        tower_type: TowerType::ALL[i % 3],
        seed: scene_seed,
        ..profile.base.clone()
    }
}

/// Split sizes: `floor(0.7 n)` train, `floor(0.15 n)` val, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Generates `n_scenes` scenes under `out_dir/scenes/` and writes
/// `out_dir/manifest.tsv` (paths relative to `out_dir`).
pub fn make_benchmark(n_scenes: usize, profile: &BenchmarkProfile, seed: u64, out_dir: &Path) -> Result<SceneManifest> {
    if n_scenes < 3 {
        return Err(Error::InvalidArgument(format!("a benchmark needs at least 3 scenes, got {n_scenes}")));
    }
    profile.base.validate()?;
    let (train, val, _) = split_sizes(n_scenes);
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b117])));
    let mut split = vec![Split::Test; n_scenes];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let hash = Taxonomy::default().hash64();
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let spec = benchmark_spec(profile, i, seed);
        let mut scene = generate(&spec)?;
        let id = format!("scene_{i:03}");
        scene.cloud.scene_id = id.clone();
        let rel = PathBuf::from("scenes").join(format!("{id}.crs"));
        write_scene(&out_dir.join(&rel), &scene.cloud, hash)?;
        entries.push(ManifestEntry {
            scene_id: id,
            path: rel,
            split: split[i],
            point_count: scene.cloud.len() as u64,
        });
    }
    let manifest = SceneManifest::new(entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Class sets that separate thin power-line parts from large structures.
pub fn thin_classes() -> BTreeSet<ClassId> {
    use class::*;
    [CONDUCTOR, GROUND_WIRE, OPTICAL_CABLE, JUMPER, STRAIN_INSULATOR, V_STRING_INSULATOR, LINE_INSULATOR, SPACER]
        .into_iter()
        .collect()
}

pub fn large_classes() -> BTreeSet<ClassId> {
    use class::*;
    [GROUND, LOW_VEGETATION, HIGH_VEGETATION, TOWER, BUILDING, ROAD].into_iter().collect()
}

/// Injects confident errors into a branch field: each point whose ground
/// truth is in `classes` is hit with probability `rate`, and its row becomes
/// `0.4 row + 0.6 onehot(w)` for a random wrong class `w` drawn from
/// `targets`.
pub fn corrupt_field(
    field: &ProbabilityField,
    truth: &[ClassId],
    classes: &BTreeSet<ClassId>,
    targets: &[ClassId],
    rate: f64,
    seed: u64,
) -> Result<ProbabilityField> {
    if truth.len() != field.len() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", truth.len(), field.len())));
    }
    let c = field.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = field.as_slice().to_vec();
    for (i, &y) in truth.iter().enumerate() {
        if !classes.contains(&y) {
            continue;
        }
        let hit = rng.gen_bool(rate);
        let choices: Vec<ClassId> = targets.iter().copied().filter(|&t| t != y && (t as usize) < c).collect();
        let Some(&w) = choices.choose(&mut rng) else {
            continue;
        };
        if hit {
            let row = &mut probs[i * c..(i + 1) * c];
            for v in row.iter_mut() {
                *v *= 0.4;
            }
            row[w as usize] += 0.6;
        }
    }
    ProbabilityField::new(probs, c, field.source())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(spec: CorridorSpec) -> CorridorSpec {
        CorridorSpec { noise: 0.0, ..spec }
    }

    #[test]
    fn catenary_points_exact_at_zero_noise() {
        let spec = quiet(CorridorSpec {
            phases: 1,
            bundle: 1,
            ..CorridorSpec::default()
        });
        let scene = generate(&spec).unwrap();
        let coords = scene.cloud.coords();
        let cond: Vec<&Catenary> = scene.catenaries.iter().filter(|c| c.class == class::CONDUCTOR).collect();
        assert_eq!(cond.len(), spec.towers - 1);
        for cat in cond {
            assert!(!cat.members.is_empty());
            for &i in &cat.members {
                let p = coords[i];
                assert!((p[2] - cat.z(p[0])).abs() <= 1e-9);
                assert_eq!(p[1], cat.y);
            }
        }
    }

    #[test]
    fn catenary_hits_both_attachments_and_sag() {
        let c = Catenary::through(class::CONDUCTOR, 0.0, 0.0, 20.0, 100.0, 23.0, 300.0);
        assert!((c.z(0.0) - 20.0).abs() < 1e-9 && (c.z(100.0) - 23.0).abs() < 1e-9);
        let spec = CorridorSpec::default();
        let a = spec.catenary_parameter();
        let level = Catenary::through(class::CONDUCTOR, 0.0, 0.0, 10.0, spec.span_length, 10.0, a);
        assert!((10.0 - level.z(spec.span_length / 2.0) - spec.sag).abs() < 1e-9);
    }

    #[test]
    fn line_insulators_are_vertical() {
        let scene = generate(&quiet(CorridorSpec::default())).unwrap();
        let coords = scene.cloud.coords();
        let mut seen = 0;
        for k in scene.components_of(class::LINE_INSULATOR) {
            assert_eq!(k.orientation(), 1.0);
            let first = coords[k.members[0]];
            let last = coords[*k.members.last().unwrap()];
            assert_eq!((first, last), (k.start, k.end));
            seen += 1;
        }
        assert_eq!(seen, 3);
        for k in scene.components_of(class::STRAIN_INSULATOR) {
            assert!(k.orientation() <= 0.35);
        }
    }

    #[test]
    fn counts_match_labels_and_spec_shares() {
        let scene = generate(&CorridorSpec::default()).unwrap();
        assert_eq!(scene.counts.iter().sum::<u64>(), scene.cloud.len() as u64);
        let spec = &scene.spec;
        let veg = scene.counts[class::LOW_VEGETATION as usize] + scene.counts[class::HIGH_VEGETATION as usize];
        assert_eq!(veg, (spec.vegetation_blobs * spec.vegetation_points) as u64);
        let terrain = scene.counts[class::GROUND as usize] + scene.counts[class::ROAD as usize];
        let area = (spec.corridor_length() + 20.0) * spec.corridor_width;
        assert_eq!(terrain, (spec.ground_density * area).round() as u64);
        // the road strip holds its area share of terrain points within sampling tolerance
        let road_share = scene.counts[class::ROAD as usize] as f64 / terrain as f64;
        let expected = 4.0 / (spec.corridor_length() + 20.0);
        assert!((road_share - expected).abs() < 4.0 * (expected / terrain as f64).sqrt());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&CorridorSpec::default()).unwrap();
        let b = generate(&CorridorSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&CorridorSpec { seed: 1, ..CorridorSpec::default() }).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn vegetation_knob_is_monotone() {
        let share = |pts: usize| {
            let s = generate(&CorridorSpec {
                vegetation_points: pts,
                ..CorridorSpec::default()
            })
            .unwrap();
            let veg = s.counts[class::LOW_VEGETATION as usize] + s.counts[class::HIGH_VEGETATION as usize];
            veg as f64 / s.cloud.len() as f64
        };
        let mut last = share(100);
        for pts in [200, 400, 800, 1600] {
            let now = share(pts);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn spec_round_trips_through_config() {
        let spec = CorridorSpec {
            tower_type: TowerType::VString,
            catenary_a: Some(250.0),
            seed: 42,
            ..CorridorSpec::default()
        };
        let kv = KeyValues::parse(&spec.to_config()).unwrap();
        assert_eq!(CorridorSpec::from_config(&kv).unwrap(), spec);
        let bad = KeyValues::parse("span_length = -1").unwrap();
        assert!(CorridorSpec::from_config(&bad).is_err());
    }

    #[test]
    fn profile_from_config() {
        let kv = KeyValues::parse("profile = desk\nspan_jitter = 0\nvegetation_points = 50\nscenes = 4").unwrap();
        let p = BenchmarkProfile::from_config(&kv).unwrap();
        assert_eq!(p.base.vegetation_points, 50);
        assert_eq!(p.base.span_length, BenchmarkProfile::desk().base.span_length);
        assert_eq!(benchmark_spec(&p, 1, 0).span_length, 60.0);
        assert!(BenchmarkProfile::from_config(&KeyValues::parse("profile = huge").unwrap()).is_err());
        assert!(BenchmarkProfile::from_config(&KeyValues::parse("sag = nope").unwrap()).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(30), (21, 4, 5));
        assert_eq!(split_sizes(3), (2, 0, 1));
    }

    #[test]
    fn corruption_only_touches_selected_classes() {
        let truth = vec![0u16, 1, 0, 1];
        let f = ProbabilityField::one_hot(&truth, 3, crate::model::FieldSource::Global).unwrap();
        let out = corrupt_field(&f, &truth, &[1].into_iter().collect(), &[0, 2], 1.0, 3).unwrap();
        assert_eq!(out.row(0), f.row(0));
        assert_eq!(out.row(2), f.row(2));
        for i in [1, 3] {
            let r = out.row(i);
            assert_eq!(r[1], 0.4);
            assert!(r[0] == 0.6 || r[2] == 0.6);
        }
    }
}
