//! Deterministic 2-D image-source multipath simulator.
//!
//! Paths are the line of sight plus specular reflections off the room walls
//! and the faces of axis-aligned rectangular obstacles, up to
//! `max_reflections` bounces. Each leg that passes through an obstacle face
//! pays that face's transmission loss. Path length is the unfolded 2-D length
//! lifted to 3-D with the transmitter/receiver height difference.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use autodiff::Tensor;

use crate::dataset::{FingerprintDataset, Origin};
use crate::error::{contract, Result};
use crate::signal::{self, CirProfile, CsiPacket, FeatureLayout, PathComponent, DEFAULT_SPACING_HZ};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Upper bound on emitted paths per link, strongest kept.
pub const MAX_PATHS: usize = 500;

fn default_wall_loss() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width_m: f64,
    pub length_m: f64,
    /// Loss per reflection off a room wall.
    #[serde(default = "default_wall_loss")]
    pub wall_reflection_loss_db: f64,
}

/// Axis-aligned rectangular obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Loss each time a path crosses one of its faces.
    pub transmission_loss_db: f64,
    /// Loss per reflection off one of its faces.
    pub reflection_loss_db: f64,
}

impl Obstacle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.x_min && p[0] < self.x_max && p[1] > self.y_min && p[1] < self.y_max
    }
}

fn d_carrier() -> f64 {
    5.785e9
}
fn d_bandwidth() -> f64 {
    80e6
}
fn d_tx_power() -> f64 {
    20.0
}
fn d_threshold() -> f64 {
    -250.0
}
fn d_reflections() -> usize {
    2
}
fn d_shadowing() -> f64 {
    2.0
}
fn d_tx_height() -> f64 {
    1.5
}
fn d_rx_height() -> f64 {
    2.0
}

/// Environment description. Serialized as TOML; see the README for keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub room: Room,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub aps: Vec<[f64; 2]>,
    /// Height of the mobile transmitter at fingerprint positions.
    #[serde(default = "d_tx_height")]
    pub tx_height_m: f64,
    /// Height of the AP receivers.
    #[serde(default = "d_rx_height")]
    pub rx_height_m: f64,
    #[serde(default = "d_carrier")]
    pub carrier_hz: f64,
    #[serde(default = "d_bandwidth")]
    pub bandwidth_hz: f64,
    #[serde(default = "d_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "d_threshold")]
    pub power_threshold_dbm: f64,
    #[serde(default = "d_reflections")]
    pub max_reflections: usize,
    #[serde(default = "d_shadowing")]
    pub shadowing_sigma_db: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn subcarriers(&self) -> usize {
        (self.bandwidth_hz / DEFAULT_SPACING_HZ).round() as usize
    }

    pub fn time_resolution_s(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn inside(&self, p: [f64; 2]) -> bool {
        p[0] > 0.0 && p[0] < self.room.width_m && p[1] > 0.0 && p[1] < self.room.length_m
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.room.width_m > 0.0 && self.room.length_m > 0.0) {
            return Err(contract("room dimensions must be positive"));
        }
        if !signal::SUPPORTED_SUBCARRIERS.contains(&self.subcarriers()) {
            return Err(contract(format!(
                "bandwidth {} Hz does not give a supported subcarrier count",
                self.bandwidth_hz
            )));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.x_min < o.x_max && o.y_min < o.y_max) {
                return Err(contract(format!("obstacle {i} has empty extent")));
            }
            if o.x_min < 0.0 || o.y_min < 0.0 || o.x_max > self.room.width_m || o.y_max > self.room.length_m {
                return Err(contract(format!("obstacle {i} extends outside the room")));
            }
        }
        for (i, &ap) in self.aps.iter().enumerate() {
            if !self.inside(ap) {
                return Err(contract(format!("AP {i} at {ap:?} is outside the room")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry

#[derive(Debug, Clone, Copy)]
enum Axis {
    /// Face lies on `x = c`.
    X,
    /// Face lies on `y = c`.
    Y,
}

#[derive(Debug, Clone)]
struct Face {
    axis: Axis,
    c: f64,
    lo: f64,
    hi: f64,
    /// Sign of the side paths reflect from: +1 means the region `coord > c`.
    side: f64,
    obstacle: Option<usize>,
    reflection_loss_db: f64,
}

impl Face {
    fn coord(&self, p: [f64; 2]) -> (f64, f64) {
        match self.axis {
            Axis::X => (p[0], p[1]),
            Axis::Y => (p[1], p[0]),
        }
    }

    fn mirror(&self, p: [f64; 2]) -> [f64; 2] {
        match self.axis {
            Axis::X => [2.0 * self.c - p[0], p[1]],
            Axis::Y => [p[0], 2.0 * self.c - p[1]],
        }
    }

    /// Signed distance to the face plane on the reflective side.
    fn side_of(&self, p: [f64; 2]) -> f64 {
        (self.coord(p).0 - self.c) * self.side
    }

    /// Parameter `t` along `a -> b` where the segment crosses the face, if it
    /// crosses within the face extent.
    fn crossing(&self, a: [f64; 2], b: [f64; 2]) -> Option<f64> {
        let (na, ta) = self.coord(a);
        let (nb, tb) = self.coord(b);
        let denom = nb - na;
        if denom == 0.0 {
            return None;
        }
        let t = (self.c - na) / denom;
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        let along = ta + t * (tb - ta);
        if along < self.lo || along > self.hi {
            return None;
        }
        Some(t)
    }
}

fn faces(spec: &ScenarioSpec) -> Vec<Face> {
    let (w, l) = (spec.room.width_m, spec.room.length_m);
    let r = spec.room.wall_reflection_loss_db;
    let wall = |axis, c, hi, side| Face {
        axis,
        c,
        lo: 0.0,
        hi,
        side,
        obstacle: None,
        reflection_loss_db: r,
    };
    let mut out = vec![
        wall(Axis::X, 0.0, l, 1.0),
        wall(Axis::X, w, l, -1.0),
        wall(Axis::Y, 0.0, w, 1.0),
        wall(Axis::Y, l, w, -1.0),
    ];
    for (i, o) in spec.obstacles.iter().enumerate() {
        let face = |axis, c, lo, hi, side| Face {
            axis,
            c,
            lo,
            hi,
            side,
            obstacle: Some(i),
            reflection_loss_db: o.reflection_loss_db,
        };
        out.push(face(Axis::X, o.x_min, o.y_min, o.y_max, -1.0));
        out.push(face(Axis::X, o.x_max, o.y_min, o.y_max, 1.0));
        out.push(face(Axis::Y, o.y_min, o.x_min, o.x_max, -1.0));
        out.push(face(Axis::Y, o.y_max, o.x_min, o.x_max, 1.0));
    }
    out
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Points of a specular path through `seq`, from `tx` to `rx`, or `None`
/// when the reflection geometry is not realizable.
fn reflection_points(tx: [f64; 2], rx: [f64; 2], seq: &[usize], faces: &[Face]) -> Option<Vec<[f64; 2]>> {
    let mut images = Vec::with_capacity(seq.len() + 1);
    images.push(tx);
    for &f in seq {
        let prev = *images.last().expect("non-empty");
        images.push(faces[f].mirror(prev));
    }
    let mut pts = vec![rx; seq.len() + 2];
    pts[0] = tx;
    let mut next = rx;
    for j in (0..seq.len()).rev() {
        let face = &faces[seq[j]];
        let image = images[j + 1];
        let t = face.crossing(image, next)?;
        if t <= 0.0 || t >= 1.0 {
            return None;
        }
        let p = [image[0] + t * (next[0] - image[0]), image[1] + t * (next[1] - image[1])];
        pts[j + 1] = p;
        next = p;
    }
    for (j, &f) in seq.iter().enumerate() {
        let face = &faces[f];
        if face.side_of(pts[j]) <= 0.0 || face.side_of(pts[j + 2]) <= 0.0 {
            return None;
        }
    }
    Some(pts)
}

/// Sum of transmission losses for obstacle faces crossed by the legs of a
/// path. Crossings at the leg endpoints (the reflection points themselves)
/// do not count.
fn transmission_loss(pts: &[[f64; 2]], faces: &[Face], spec: &ScenarioSpec) -> f64 {
    const EDGE: f64 = 1e-9;
    let mut loss = 0.0;
    for leg in pts.windows(2) {
        for f in faces {
            let Some(o) = f.obstacle else { continue };
            if let Some(t) = f.crossing(leg[0], leg[1]) {
                if t > EDGE && t < 1.0 - EDGE {
                    loss += spec.obstacles[o].transmission_loss_db;
                }
            }
        }
    }
    loss
}

fn face_sequences(n_faces: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for f in 0..n_faces {
                if seq.last() != Some(&f) {
                    let mut s: Vec<usize> = seq.clone();
                    s.push(f);
                    next.push(s);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn shadow_draw(spec: &ScenarioSpec, a: [f64; 2], b: [f64; 2], seq: &[usize]) -> f64 {
    if spec.shadowing_sigma_db == 0.0 {
        return 0.0;
    }
    let mut h = Sha256::new();
    h.update(spec.seed.to_le_bytes());
    for v in [a[0], a[1], b[0], b[1]] {
        h.update(v.to_bits().to_le_bytes());
    }
    for &f in seq {
        h.update((f as u64).to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    Normal::new(0.0, spec.shadowing_sigma_db)
        .expect("finite sigma")
        .sample(&mut rng)
}

fn canonical_first(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0].to_bits(), a[1].to_bits()) <= (b[0].to_bits(), b[1].to_bits())
}

/// Free-space path loss in dB at distance `d` and carrier `f0`.
pub fn fspl_db(d: f64, f0: f64) -> f64 {
    20.0 * (4.0 * PI * d * f0 / SPEED_OF_LIGHT).log10()
}

/// All multipath components between `tx` and `rx`, sorted by delay.
///
/// The result is symmetric in `tx` and `rx`: the link is always traced from
/// the canonically smaller endpoint, and shadowing is keyed on the unordered
/// endpoint pair plus the reflection sequence.
pub fn trace_paths(tx: [f64; 2], rx: [f64; 2], spec: &ScenarioSpec) -> Result<CirProfile> {
    if !spec.inside(tx) || !spec.inside(rx) {
        return Err(contract(format!("link endpoints {tx:?} -> {rx:?} must be inside the room")));
    }
    if tx == rx {
        return Err(contract(format!("transmitter and receiver coincide at {tx:?}")));
    }
    let (a, b) = if canonical_first(tx, rx) { (tx, rx) } else { (rx, tx) };
    let faces = faces(spec);
    let dh = spec.tx_height_m - spec.rx_height_m;
    let mut paths: Vec<(PathComponent, Vec<usize>)> = Vec::new();
    for seq in face_sequences(faces.len(), spec.max_reflections) {
        let Some(pts) = reflection_points(a, b, &seq, &faces) else { continue };
        let planar: f64 = pts.windows(2).map(|w| dist(w[0], w[1])).sum();
        let d = (planar * planar + dh * dh).sqrt();
        let refl: f64 = seq.iter().map(|&f| faces[f].reflection_loss_db).sum();
        let power = spec.tx_power_dbm
            - fspl_db(d, spec.carrier_hz)
            - transmission_loss(&pts, &faces, spec)
            - refl
            - shadow_draw(spec, a, b, &seq);
        if power < spec.power_threshold_dbm {
            continue;
        }
        let delay = d / SPEED_OF_LIGHT;
        let phase = (2.0 * PI * spec.carrier_hz * delay + PI * seq.len() as f64).rem_euclid(2.0 * PI);
        paths.push((
            PathComponent {
                delay_s: delay,
                power_dbm: power,
                phase_rad: phase,
            },
            seq,
        ));
    }
    paths.sort_by(|x, y| {
        y.0.power_dbm
            .total_cmp(&x.0.power_dbm)
            .then(x.0.delay_s.total_cmp(&y.0.delay_s))
            .then(x.1.cmp(&y.1))
    });
    paths.truncate(MAX_PATHS);
    paths.sort_by(|x, y| {
        x.0.delay_s
            .total_cmp(&y.0.delay_s)
            .then(y.0.power_dbm.total_cmp(&x.0.power_dbm))
            .then(x.1.cmp(&y.1))
    });
    Ok(CirProfile {
        paths: paths.into_iter().map(|(p, _)| p).collect(),
        time_resolution_s: spec.time_resolution_s(),
        n_taps: spec.subcarriers(),
    })
}

/// Frequency response of the traced channel on the scenario's subcarrier
/// grid: `H_k = sum_i a_i e^{-j theta_i} e^{-j 2 pi k df tau_i}` with `k`
/// centered. The carrier term is already part of `theta_i`.
pub fn synthesize_csi(tx: [f64; 2], rx: [f64; 2], ap_id: usize, spec: &ScenarioSpec) -> Result<CsiPacket> {
    let profile = trace_paths(tx, rx, spec)?;
    csi_from_paths(&profile.paths, spec.subcarriers(), ap_id, format!("{},{}", tx[0], tx[1]))
}

/// Builds a packet from explicit path components.
pub fn csi_from_paths(paths: &[PathComponent], k: usize, ap_id: usize, location_id: String) -> Result<CsiPacket> {
    let df = DEFAULT_SPACING_HZ;
    let h: Vec<Complex64> = (0..k)
        .map(|i| {
            let kc = signal::centered_index(i, k) as f64;
            paths
                .iter()
                .map(|p| {
                    let a = 10f64.powf(p.power_dbm / 20.0);
                    Complex64::from_polar(a, -p.phase_rad - 2.0 * PI * kc * df * p.delay_s)
                })
                .sum()
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    let rssi = if energy > 0.0 {
        10.0 * energy.log10()
    } else {
        signal::NOISE_FLOOR_DBM
    };
    CsiPacket::new(location_id, ap_id, rssi, h)
}

// ---------------------------------------------------------------------------
// Datasets

/// CIRs per fingerprint position, one per AP.
pub type CirGrid = Vec<Vec<CirProfile>>;

/// Traces every (position, AP) link. Work is parallel across positions; the
/// result is in grid order.
pub fn trace_grid(spec: &ScenarioSpec, grid: &[[f64; 2]]) -> Result<CirGrid> {
    if grid.is_empty() {
        return Err(contract("fingerprint grid is empty"));
    }
    if let Some(p) = grid.iter().find(|p| !spec.inside(**p)) {
        return Err(contract(format!("fingerprint position {p:?} is outside the room")));
    }
    grid.par_iter()
        .map(|&p| spec.aps.iter().map(|&ap| trace_paths(p, ap, spec)).collect())
        .collect()
}

/// Feature matrix from cached CIRs.
pub fn features_from_cirs(cirs: &CirGrid, n_ap: usize, n_path: usize) -> Result<Tensor> {
    let layout = FeatureLayout { n_ap, n_path };
    let mut data = Vec::with_capacity(cirs.len() * layout.dim());
    for per_ap in cirs {
        let map: BTreeMap<usize, CirProfile> = per_ap.iter().cloned().enumerate().collect();
        data.extend(signal::extract_features(&map, n_ap, n_path)?.values);
    }
    Ok(Tensor::new(cirs.len(), layout.dim(), data)?)
}

fn positions_tensor(grid: &[[f64; 2]]) -> Tensor {
    Tensor::from_fn(grid.len(), 2, |i, j| grid[i][j])
}

/// Fully labeled synthetic dataset over `grid`.
pub fn synthesize_dataset(spec: &ScenarioSpec, grid: &[[f64; 2]], n_path: usize, origin: Origin) -> Result<FingerprintDataset> {
    let cirs = trace_grid(spec, grid)?;
    dataset_from_cirs(spec, grid, &cirs, n_path, origin)
}

pub fn dataset_from_cirs(
    spec: &ScenarioSpec,
    grid: &[[f64; 2]],
    cirs: &CirGrid,
    n_path: usize,
    origin: Origin,
) -> Result<FingerprintDataset> {
    let x = features_from_cirs(cirs, spec.aps.len(), n_path)?;
    FingerprintDataset::new(
        x,
        (0..grid.len()).collect(),
        positions_tensor(grid),
        origin,
        spec.id.clone(),
        FeatureLayout {
            n_ap: spec.aps.len(),
            n_path,
        },
    )
}

// ---------------------------------------------------------------------------
// Perturbations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub obstacle_shift_max_m: f64,
    pub ap_jitter_max_m: f64,
    pub loss_jitter_max_db: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            obstacle_shift_max_m: 0.2,
            ap_jitter_max_m: 0.05,
            loss_jitter_max_db: 1.0,
            count: 6,
            seed: 0,
        }
    }
}

fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

/// Variant `variant` of `spec`: obstacles shifted, APs jittered and face
/// losses jittered by uniform draws, all clamped to stay valid.
pub fn perturb_spec(spec: &ScenarioSpec, pert: &PerturbationSpec, variant: usize) -> Result<ScenarioSpec> {
    if variant >= pert.count {
        return Err(contract(format!("variant {variant} out of range for {} variants", pert.count)));
    }
    let mut rng = keyed_rng(&[pert.seed, variant as u64]);
    let mut out = spec.clone();
    let (w, l) = (spec.room.width_m, spec.room.length_m);
    for o in &mut out.obstacles {
        let dx = symmetric(&mut rng, pert.obstacle_shift_max_m).clamp(-o.x_min, w - o.x_max);
        let dy = symmetric(&mut rng, pert.obstacle_shift_max_m).clamp(-o.y_min, l - o.y_max);
        o.x_min += dx;
        o.x_max += dx;
        o.y_min += dy;
        o.y_max += dy;
        o.transmission_loss_db = (o.transmission_loss_db + symmetric(&mut rng, pert.loss_jitter_max_db)).max(0.0);
        o.reflection_loss_db = (o.reflection_loss_db + symmetric(&mut rng, pert.loss_jitter_max_db)).max(0.0);
    }
    const MARGIN: f64 = 1e-3;
    for ap in &mut out.aps {
        let dx = symmetric(&mut rng, pert.ap_jitter_max_m);
        let dy = symmetric(&mut rng, pert.ap_jitter_max_m);
        if dx != 0.0 {
            ap[0] = (ap[0] + dx).clamp(MARGIN, w - MARGIN);
        }
        if dy != 0.0 {
            ap[1] = (ap[1] + dy).clamp(MARGIN, l - MARGIN);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Real-like measurements

/// Distortions that separate "measured" data from clean synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealLikeSpec {
    pub shadowing_sigma_db: f64,
    /// Delay jitter standard deviation for a path at `reference_power_dbm`;
    /// it grows as the path gets weaker (amplitude-proportional).
    pub delay_jitter_ns: f64,
    pub reference_power_dbm: f64,
    /// Jitter standard deviation never exceeds this.
    pub delay_jitter_cap_ns: f64,
    /// Per-feature gain drawn from `[1 - gain_max, 1 + gain_max]`.
    pub gain_max: f64,
    pub power_offset_max_db: f64,
    pub delay_offset_max_ns: f64,
    /// Seeds the per-feature affine distortion, shared by all datasets
    /// captured with the same device.
    pub device_seed: u64,
}

impl Default for RealLikeSpec {
    fn default() -> Self {
        Self {
            shadowing_sigma_db: 4.0,
            delay_jitter_ns: 0.5,
            reference_power_dbm: -50.0,
            delay_jitter_cap_ns: 10.0,
            gain_max: 0.1,
            power_offset_max_db: 5.0,
            delay_offset_max_ns: 2.0,
            device_seed: 0,
        }
    }
}

/// Applies real-like noise to a traced CIR grid (shadowing must already be
/// part of the trace): per-path delay jitter whose spread grows for weaker
/// paths.
pub fn jitter_cirs(cirs: &CirGrid, real: &RealLikeSpec, seed: u64) -> CirGrid {
    cirs.iter()
        .enumerate()
        .map(|(i, per_ap)| {
            per_ap
                .iter()
                .enumerate()
                .map(|(a, cir)| {
                    let mut rng = keyed_rng(&[seed, i as u64, a as u64]);
                    let mut out = cir.clone();
                    for p in &mut out.paths {
                        let sigma = (real.delay_jitter_ns
                            * 10f64.powf((real.reference_power_dbm - p.power_dbm) / 20.0))
                        .min(real.delay_jitter_cap_ns);
                        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        p.delay_s = (p.delay_s + sigma * z * 1e-9).max(0.0);
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// Per-feature affine distortion `x' = g_f x + o_f` for a device.
pub fn device_distortion(layout: FeatureLayout, real: &RealLikeSpec) -> (Vec<f64>, Vec<f64>) {
    let mut rng = keyed_rng(&[real.device_seed, 0xd1]);
    let mut gain = Vec::with_capacity(layout.dim());
    let mut offset = Vec::with_capacity(layout.dim());
    for f in 0..layout.dim() {
        gain.push(1.0 + symmetric(&mut rng, real.gain_max));
        let is_delay = f % 2 == 0;
        offset.push(symmetric(
            &mut rng,
            if is_delay {
                real.delay_offset_max_ns
            } else {
                real.power_offset_max_db
            },
        ));
    }
    (gain, offset)
}

/// A "measured" dataset: traced with stronger shadowing, delay jitter and the
/// device's affine feature distortion. All rows carry their true positions;
/// callers pick the labeled subset.
pub fn synthesize_real_like(
    spec: &ScenarioSpec,
    grid: &[[f64; 2]],
    n_path: usize,
    real: &RealLikeSpec,
    seed: u64,
    origin: Origin,
) -> Result<FingerprintDataset> {
    let cirs = trace_real_like(spec, grid, real, seed)?;
    real_like_from_cirs(spec, grid, &cirs, n_path, real, origin)
}

/// Traced and jittered CIRs for a real-like capture; reusable across `n_path`.
pub fn trace_real_like(spec: &ScenarioSpec, grid: &[[f64; 2]], real: &RealLikeSpec, seed: u64) -> Result<CirGrid> {
    let mut noisy = spec.clone();
    noisy.shadowing_sigma_db = real.shadowing_sigma_db;
    noisy.seed = seed;
    let cirs = trace_grid(&noisy, grid)?;
    Ok(jitter_cirs(&cirs, real, seed))
}

pub fn real_like_from_cirs(
    spec: &ScenarioSpec,
    grid: &[[f64; 2]],
    cirs: &CirGrid,
    n_path: usize,
    real: &RealLikeSpec,
    origin: Origin,
) -> Result<FingerprintDataset> {
    let mut ds = dataset_from_cirs(spec, grid, cirs, n_path, origin)?;
    let (gain, offset) = device_distortion(ds.layout, real);
    let f = ds.layout.dim();
    for (k, v) in ds.x.data_mut().iter_mut().enumerate() {
        *v = gain[k % f] * *v + offset[k % f];
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Position sets and built-in scenarios

/// Cell-centered `nx x ny` grid over the room, skipping points inside
/// obstacles or on an AP.
pub fn regular_grid(spec: &ScenarioSpec, nx: usize, ny: usize) -> Vec<[f64; 2]> {
    let (w, l) = (spec.room.width_m, spec.room.length_m);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let p = [(i as f64 + 0.5) * w / nx as f64, (j as f64 + 0.5) * l / ny as f64];
            if usable(spec, p) {
                out.push(p);
            }
        }
    }
    out
}

fn usable(spec: &ScenarioSpec, p: [f64; 2]) -> bool {
    spec.inside(p) && !spec.obstacles.iter().any(|o| o.contains(p)) && !spec.aps.contains(&p)
}

/// `n` uniform random positions outside obstacles, deterministic per seed.
pub fn random_positions(spec: &ScenarioSpec, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = keyed_rng(&[seed, 0x9051]);
    let (w, l) = (spec.room.width_m, spec.room.length_m);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [rng.random_range(0.0..w), rng.random_range(0.0..l)];
        if usable(spec, p) {
            out.push(p);
        }
    }
    out
}

fn obstacle(x_min: f64, y_min: f64, x_max: f64, y_max: f64, tl: f64, rl: f64) -> Obstacle {
    Obstacle {
        x_min,
        y_min,
        x_max,
        y_max,
        transmission_loss_db: tl,
        reflection_loss_db: rl,
    }
}

fn base_spec(id: &str, w: f64, l: f64, aps: Vec<[f64; 2]>, obstacles: Vec<Obstacle>) -> ScenarioSpec {
    ScenarioSpec {
        id: id.to_string(),
        room: Room {
            width_m: w,
            length_m: l,
            wall_reflection_loss_db: default_wall_loss(),
        },
        obstacles,
        aps,
        tx_height_m: d_tx_height(),
        rx_height_m: d_rx_height(),
        carrier_hz: d_carrier(),
        bandwidth_hz: d_bandwidth(),
        tx_power_dbm: d_tx_power(),
        power_threshold_dbm: d_threshold(),
        max_reflections: d_reflections(),
        shadowing_sigma_db: d_shadowing(),
        seed: 0,
    }
}

/// 20 m x 5 m hall with 5 APs and a few pillars and desks.
pub fn hall() -> ScenarioSpec {
    base_spec(
        "hall",
        20.0,
        5.0,
        vec![[0.3, 0.3], [19.7, 0.3], [10.0, 4.7], [0.3, 4.7], [19.7, 4.7]],
        vec![
            obstacle(5.3, 2.1, 5.7, 2.9, 6.0, 8.0),
            obstacle(14.3, 2.1, 14.7, 2.9, 6.0, 8.0),
            obstacle(8.05, 0.05, 9.45, 0.95, 3.0, 10.0),
        ],
    )
}

/// Empty room: only the line of sight and wall reflections.
pub fn empty_room() -> ScenarioSpec {
    base_spec(
        "empty_room",
        12.0,
        8.0,
        vec![[0.3, 0.3], [11.7, 0.3], [6.0, 7.7], [0.3, 7.7], [11.7, 7.7]],
        Vec::new(),
    )
}

/// Cluttered lab: many desks and partitions, mostly non-line-of-sight.
pub fn obstacle_dense() -> ScenarioSpec {
    let mut obstacles = Vec::new();
    for r in 0..3 {
        for c in 0..4 {
            let x = 1.6 + c as f64 * 2.6;
            let y = 1.3 + r as f64 * 2.3;
            obstacles.push(obstacle(x, y, x + 1.2, y + 0.6, 8.0, 6.0));
        }
    }
    base_spec(
        "obstacle_dense",
        12.0,
        8.0,
        vec![[0.3, 0.3], [11.7, 0.3], [6.0, 7.7], [0.3, 7.7], [11.7, 7.7]],
        obstacles,
    )
}

/// Built-in scenario by name.
pub fn builtin(name: &str) -> Option<ScenarioSpec> {
    match name {
        "hall" => Some(hall()),
        "empty_room" => Some(empty_room()),
        "obstacle_dense" => Some(obstacle_dense()),
        _ => None,
    }
}
