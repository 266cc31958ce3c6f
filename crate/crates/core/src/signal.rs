//! CSI preprocessing: abnormal-packet removal, RSSI amplitude calibration,
//! phase sanitization, CSI to CIR conversion and feature extraction.
//!
//! Subcarriers are stored in centered order: array index `i` holds
//! subcarrier `k = i - K/2`, so a 256-subcarrier packet spans `k = -128..=127`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// 802.11ac subcarrier spacing.
pub const DEFAULT_SPACING_HZ: f64 = 312.5e3;
/// Power assigned to empty taps and padding slots.
pub const NOISE_FLOOR_DBM: f64 = -250.0;
pub const SUPPORTED_SUBCARRIERS: [usize; 3] = [64, 128, 256];

/// One frequency-domain channel snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiPacket {
    pub location_id: String,
    pub ap_id: usize,
    pub rssi_db: f64,
    /// Complex response per subcarrier, centered order.
    pub subcarriers: Vec<Complex64>,
    pub spacing_hz: f64,
}

impl CsiPacket {
    pub fn new(
        location_id: impl Into<String>,
        ap_id: usize,
        rssi_db: f64,
        subcarriers: Vec<Complex64>,
    ) -> Result<Self> {
        check_k(subcarriers.len())?;
        Ok(Self {
            location_id: location_id.into(),
            ap_id,
            rssi_db,
            subcarriers,
            spacing_hz: DEFAULT_SPACING_HZ,
        })
    }

    pub fn k(&self) -> usize {
        self.subcarriers.len()
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.k() as f64 * self.spacing_hz
    }

    /// Delay spacing of one CIR tap, `1 / B`.
    pub fn time_resolution_s(&self) -> f64 {
        1.0 / self.bandwidth_hz()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.subcarriers.iter().map(|h| h.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.subcarriers.iter().map(|h| h.norm_sqr()).sum()
    }
}

fn check_k(k: usize) -> Result<()> {
    if SUPPORTED_SUBCARRIERS.contains(&k) {
        Ok(())
    } else {
        Err(contract(format!(
            "unsupported subcarrier count {k}; expected one of {SUPPORTED_SUBCARRIERS:?}"
        )))
    }
}

/// Which subcarriers are zeroed as guards.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardMap {
    /// 802.11ac edge and DC guards for 64/128/256 subcarriers.
    #[default]
    Standard,
    None,
    /// Explicit centered indices.
    Custom(Vec<i64>),
}

impl GuardMap {
    /// Guard subcarriers as centered indices.
    pub fn centered(&self, k: usize) -> Result<Vec<i64>> {
        check_k(k)?;
        Ok(match self {
            GuardMap::None => Vec::new(),
            GuardMap::Custom(v) => v.clone(),
            GuardMap::Standard => {
                let ranges: &[(i64, i64)] = match k {
                    64 => &[(-32, -29), (0, 0), (29, 31)],
                    128 => &[(-64, -59), (-1, 1), (59, 63)],
                    _ => &[(-128, -123), (-1, 1), (123, 127)],
                };
                ranges.iter().flat_map(|&(a, b)| a..=b).collect()
            }
        })
    }

    /// `true` at array positions that are guards.
    pub fn mask(&self, k: usize) -> Result<Vec<bool>> {
        let half = (k / 2) as i64;
        let mut mask = vec![false; k];
        for c in self.centered(k)? {
            let i = c + half;
            if i < 0 || i >= k as i64 {
                return Err(contract(format!("guard index {c} outside {k} subcarriers")));
            }
            mask[i as usize] = true;
        }
        Ok(mask)
    }
}

/// Centered subcarrier index for array position `i`.
pub fn centered_index(i: usize, k: usize) -> i64 {
    i as i64 - (k / 2) as i64
}

// ---------------------------------------------------------------------------
// Abnormal packet removal

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFix {
    /// Covariance was positive definite.
    None,
    /// Singular covariance; `eps * I` was added with `eps = 1e-6 * trace / dim`.
    Regularized,
    /// All samples identical; every distance is zero.
    ZeroTrace,
}

/// Squared Mahalanobis distance `(x - mean)^T cov^{-1} (x - mean)`.
pub fn mahalanobis(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| contract("covariance is not positive definite"))?;
    let diff = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    let y = chol.l().solve_lower_triangular(&diff).expect("cholesky factor is invertible");
    Ok(y.norm_squared())
}

/// Squared Mahalanobis distance of every sample to the sample mean, using the
/// population covariance.
pub fn mahalanobis_distances(samples: &[Vec<f64>]) -> Result<(Vec<f64>, CovarianceFix)> {
    let n = samples.len();
    if n < 2 {
        return Err(contract("Mahalanobis ranking needs at least 2 samples"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(contract("samples differ in length"));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| samples[i][j] - mean[j]);
    let mut cov = centered.transpose() * &centered / n as f64;
    let trace = cov.trace();
    // Rounding in the mean leaves ~ulp residue when all samples coincide.
    let scale: f64 = mean.iter().map(|m| m * m).sum();
    if trace <= 1e-24 * scale {
        return Ok((vec![0.0; n], CovarianceFix::ZeroTrace));
    }
    let mut fix = CovarianceFix::None;
    // With n <= dim the sample covariance has rank < dim.
    let chol = if n > dim {
        cov.clone().cholesky()
    } else {
        None
    };
    let chol = match chol {
        Some(c) => c,
        None => {
            fix = CovarianceFix::Regularized;
            let eps = 1e-6 * trace / dim as f64;
            for d in 0..dim {
                cov[(d, d)] += eps;
            }
            cov.cholesky()
                .ok_or_else(|| contract("regularized covariance is not positive definite"))?
        }
    };
    let l = chol.l();
    let dist = (0..n)
        .map(|i| {
            let diff = centered.row(i).transpose();
            l.solve_lower_triangular(&diff)
                .expect("cholesky factor is invertible")
                .norm_squared()
        })
        .collect();
    Ok((dist, fix))
}

/// Indices of the `ceil(fraction * n)` largest distances; on equal distances
/// the earlier index is removed first.
pub fn outlier_indices(distances: &[f64], fraction: f64) -> Vec<usize> {
    // Tolerance keeps e.g. 0.1 * 30 from rounding up past 3.
    let count = (fraction * distances.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone)]
pub struct Removal {
    pub kept: Vec<CsiPacket>,
    /// Original indices of removed packets, ascending.
    pub removed: Vec<usize>,
    pub distances: Vec<f64>,
    pub covariance: CovarianceFix,
}

/// Drops the packets whose non-guard amplitude vectors lie furthest from the
/// group in Mahalanobis distance.
pub fn remove_abnormal(packets: &[CsiPacket], fraction: f64, guards: &GuardMap) -> Result<Removal> {
    if packets.len() < 2 {
        return Err(contract("abnormal removal needs at least 2 packets"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(contract(format!("removal fraction {fraction} outside [0, 1)")));
    }
    let first = &packets[0];
    if packets
        .iter()
        .any(|p| p.location_id != first.location_id || p.ap_id != first.ap_id || p.k() != first.k())
    {
        return Err(contract(
            "abnormal removal expects packets from a single (location, AP) pair",
        ));
    }
    let mask = guards.mask(first.k())?;
    let samples: Vec<Vec<f64>> = packets
        .iter()
        .map(|p| {
            p.subcarriers
                .iter()
                .zip(&mask)
                .filter(|(_, &g)| !g)
                .map(|(h, _)| h.norm())
                .collect()
        })
        .collect();
    let (distances, covariance) = mahalanobis_distances(&samples)?;
    let removed = outlier_indices(&distances, fraction);
    let kept = packets
        .iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, p)| p.clone())
        .collect();
    Ok(Removal {
        kept,
        removed,
        distances,
        covariance,
    })
}

// ---------------------------------------------------------------------------
// Amplitude calibration

/// Gain that maps the packet's subcarrier energy onto its RSSI:
/// `s = sqrt(10^(rssi/10) / sum |H_k|^2)`.
pub fn packet_scale(packet: &CsiPacket) -> Option<f64> {
    let energy = packet.energy();
    if energy > 0.0 {
        Some((10f64.powf(packet.rssi_db / 10.0) / energy).sqrt())
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub packets: Vec<CsiPacket>,
    pub scale: f64,
    /// Number of leading packets used to estimate `scale`.
    pub calibration_count: usize,
}

/// Estimates the receiver gain from the first half of the packets (capture
/// order) and applies the mean scale to the remaining half.
///
/// A single packet is both the calibration set and the output.
pub fn calibrate_amplitude(packets: &[CsiPacket]) -> Result<Calibration> {
    if packets.is_empty() {
        return Err(contract("calibration needs at least one packet"));
    }
    let n_cal = (packets.len() / 2).max(1);
    let mut sum = 0.0;
    for (i, p) in packets[..n_cal].iter().enumerate() {
        sum += packet_scale(p).ok_or(Error::ZeroEnergy { packet: i })?;
    }
    let scale = sum / n_cal as f64;
    let rest = if packets.len() == 1 {
        packets
    } else {
        &packets[n_cal..]
    };
    let packets = rest
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.subcarriers.iter_mut().for_each(|h| *h *= scale);
            q
        })
        .collect();
    Ok(Calibration {
        packets,
        scale,
        calibration_count: n_cal,
    })
}

// ---------------------------------------------------------------------------
// Phase sanitization

/// What phase a sanitized packet carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Unwrapped phase minus its least-squares line.
    #[default]
    Residual,
    /// Unwrapped phase without line removal.
    Unwrapped,
}

/// Unwraps so that successive differences lie in `(-pi, pi]`.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let raw = p - phase[i - 1];
            offset += wrap_pi(raw) - raw;
        }
        out.push(p + offset);
    }
    out
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_pi(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Least-squares `y ~ slope * x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[derive(Debug, Clone)]
pub struct PhaseFit {
    pub slope: f64,
    pub intercept: f64,
    /// Unwrapped phase at non-guard positions, in index order.
    pub unwrapped: Vec<f64>,
    /// Phase after sanitization at non-guard positions.
    pub output: Vec<f64>,
}

/// Unwraps the phase over non-guard subcarriers, fits a line against the
/// centered subcarrier index and rebuilds the packet with the chosen phase.
/// Guard subcarriers are zeroed.
pub fn sanitize_phase(packet: &CsiPacket, guards: &GuardMap, mode: PhaseMode) -> Result<(CsiPacket, PhaseFit)> {
    let k = packet.k();
    let mask = guards.mask(k)?;
    let active: Vec<usize> = (0..k).filter(|&i| !mask[i]).collect();
    if active.len() < 2 {
        return Err(contract("phase sanitization needs at least 2 non-guard subcarriers"));
    }
    let raw: Vec<f64> = active.iter().map(|&i| packet.subcarriers[i].arg()).collect();
    let unwrapped = unwrap_phase(&raw);
    let ks: Vec<f64> = active.iter().map(|&i| centered_index(i, k) as f64).collect();
    let (slope, intercept) = fit_line(&ks, &unwrapped);
    let output: Vec<f64> = match mode {
        PhaseMode::Residual => unwrapped
            .iter()
            .zip(&ks)
            .map(|(p, kk)| p - (slope * kk + intercept))
            .collect(),
        PhaseMode::Unwrapped => unwrapped.clone(),
    };
    let mut out = packet.clone();
    out.subcarriers.iter_mut().for_each(|h| *h = Complex64::new(0.0, 0.0));
    for (&i, &phi) in active.iter().zip(&output) {
        out.subcarriers[i] = Complex64::from_polar(packet.subcarriers[i].norm(), phi);
    }
    Ok((
        out,
        PhaseFit {
            slope,
            intercept,
            unwrapped,
            output,
        },
    ))
}

// ---------------------------------------------------------------------------
// CSI <-> CIR

/// One multipath component or CIR tap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub delay_s: f64,
    pub power_dbm: f64,
    pub phase_rad: f64,
}

/// Time-domain multipath profile for one AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirProfile {
    pub paths: Vec<PathComponent>,
    /// Tap spacing `1 / B`.
    pub time_resolution_s: f64,
    /// Number of taps `K`; the largest observable delay is `K * time_resolution_s`.
    pub n_taps: usize,
}

impl CirProfile {
    pub fn max_delay_s(&self) -> f64 {
        self.n_taps as f64 * self.time_resolution_s
    }
}

pub fn power_dbm(amplitude: f64) -> f64 {
    if amplitude > 0.0 {
        (20.0 * amplitude.log10()).max(NOISE_FLOOR_DBM)
    } else {
        NOISE_FLOOR_DBM
    }
}

/// Complex CIR taps `h_n = (1/K) sum_k H_k e^{+j 2 pi k n / K}` after zeroing
/// guard subcarriers.
pub fn cir_taps(packet: &CsiPacket, guards: &GuardMap) -> Result<Vec<Complex64>> {
    let k = packet.k();
    check_k(k)?;
    let mask = guards.mask(k)?;
    // Centered index c lives in FFT bin c mod K.
    let mut buf = vec![Complex64::new(0.0, 0.0); k];
    for i in 0..k {
        if !mask[i] {
            let bin = centered_index(i, k).rem_euclid(k as i64) as usize;
            buf[bin] = packet.subcarriers[i];
        }
    }
    FftPlanner::new().plan_fft_inverse(k).process(&mut buf);
    let norm = 1.0 / k as f64;
    buf.iter_mut().for_each(|v| *v *= norm);
    Ok(buf)
}

/// Transforms a packet into its `K`-tap impulse response.
pub fn csi_to_cir(packet: &CsiPacket, guards: &GuardMap) -> Result<CirProfile> {
    let taps = cir_taps(packet, guards)?;
    Ok(profile_from_taps(&taps, packet.time_resolution_s()))
}

fn profile_from_taps(taps: &[Complex64], dt: f64) -> CirProfile {
    CirProfile {
        paths: taps
            .iter()
            .enumerate()
            .map(|(n, t)| PathComponent {
                delay_s: n as f64 * dt,
                power_dbm: power_dbm(t.norm()),
                phase_rad: t.arg(),
            })
            .collect(),
        time_resolution_s: dt,
        n_taps: taps.len(),
    }
}

/// Forward transform of a tap-domain profile back to centered subcarriers.
pub fn cir_to_csi(profile: &CirProfile) -> Result<Vec<Complex64>> {
    let k = profile.n_taps;
    check_k(k)?;
    if profile.paths.len() != k {
        return Err(contract("profile is not in tap representation"));
    }
    let mut buf: Vec<Complex64> = profile
        .paths
        .iter()
        .map(|p| {
            if p.power_dbm <= NOISE_FLOOR_DBM {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(10f64.powf(p.power_dbm / 20.0), p.phase_rad)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(k).process(&mut buf);
    Ok((0..k)
        .map(|i| buf[centered_index(i, k).rem_euclid(k as i64) as usize])
        .collect())
}

// ---------------------------------------------------------------------------
// Features

/// Shape of a feature vector: `n_ap` APs, each with `n_path` (delay, power) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_ap: usize,
    pub n_path: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.n_ap * 2 * self.n_path
    }
}

/// Per AP in ascending id order, `n_path` pairs of (delay in ns, power in
/// dBm), strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

/// The `n_path` strongest components of one profile, strongest first; ties
/// go to the smaller delay. Missing slots are padded with
/// `(max observable delay, noise floor)`.
pub fn strongest_paths(profile: &CirProfile, n_path: usize) -> Vec<(f64, f64)> {
    let mut paths: Vec<&PathComponent> = profile.paths.iter().collect();
    paths.sort_by(|a, b| {
        b.power_dbm
            .total_cmp(&a.power_dbm)
            .then(a.delay_s.total_cmp(&b.delay_s))
    });
    let pad = (profile.max_delay_s() * 1e9, NOISE_FLOOR_DBM);
    (0..n_path)
        .map(|i| {
            paths
                .get(i)
                .map(|p| (p.delay_s * 1e9, p.power_dbm))
                .unwrap_or(pad)
        })
        .collect()
}

pub fn extract_features(
    cirs: &BTreeMap<usize, CirProfile>,
    n_ap: usize,
    n_path: usize,
) -> Result<FeatureVector> {
    if n_path == 0 {
        return Err(contract("n_path must be at least 1"));
    }
    let missing: Vec<usize> = (0..n_ap).filter(|a| !cirs.contains_key(a)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingAps(missing));
    }
    let mut values = Vec::with_capacity(n_ap * 2 * n_path);
    for ap in 0..n_ap {
        for (d, p) in strongest_paths(&cirs[&ap], n_path) {
            values.push(d);
            values.push(p);
        }
    }
    Ok(FeatureVector {
        values,
        layout: FeatureLayout { n_ap, n_path },
    })
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub removal_fraction: f64,
    /// When false, no packets are set aside and the scale is fixed to 1.
    pub calibrate: bool,
    pub phase_mode: PhaseMode,
    pub guards: GuardMap,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            removal_fraction: 0.10,
            calibrate: true,
            phase_mode: PhaseMode::Residual,
            guards: GuardMap::Standard,
        }
    }
}

/// Per-AP diagnostics from [`preprocess_location`].
#[derive(Debug, Clone)]
pub struct ApReport {
    pub ap_id: usize,
    pub removed: Vec<usize>,
    pub covariance: CovarianceFix,
    pub scale: f64,
    pub packets_used: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub features: FeatureVector,
    pub cirs: BTreeMap<usize, CirProfile>,
    pub reports: Vec<ApReport>,
}

fn stage<T>(name: &'static str, ap: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        ap,
        source: Box::new(e),
    })
}

/// Averages tap powers in the linear domain; the phase of each tap is the
/// argument of the mean complex tap.
pub fn average_taps(taps: &[Vec<Complex64>], dt: f64) -> CirProfile {
    let k = taps[0].len();
    let n = taps.len() as f64;
    let mut profile = profile_from_taps(&vec![Complex64::new(0.0, 0.0); k], dt);
    for (t, path) in profile.paths.iter_mut().enumerate() {
        let power = taps.iter().map(|p| p[t].norm_sqr()).sum::<f64>() / n;
        let mean: Complex64 = taps.iter().map(|p| p[t]).sum::<Complex64>() / n;
        path.power_dbm = power_dbm(power.sqrt());
        path.phase_rad = mean.arg();
    }
    profile
}

/// Full chain for one location: per AP remove outliers, calibrate, sanitize,
/// transform, average taps, then extract features.
pub fn preprocess_location(
    raw: &BTreeMap<usize, Vec<CsiPacket>>,
    n_path: usize,
    cfg: &PipelineConfig,
) -> Result<Preprocessed> {
    let mut cirs = BTreeMap::new();
    let mut reports = Vec::new();
    for (&ap, packets) in raw {
        if packets.len() < 4 {
            return Err(contract(format!(
                "AP {ap} has {} packets; at least 4 are required",
                packets.len()
            )));
        }
        let removal = stage("abnormal removal", ap, remove_abnormal(packets, cfg.removal_fraction, &cfg.guards))?;
        let (calibrated, scale) = if cfg.calibrate {
            let c = stage("amplitude calibration", ap, calibrate_amplitude(&removal.kept))?;
            (c.packets, c.scale)
        } else {
            (removal.kept.clone(), 1.0)
        };
        let mut taps = Vec::with_capacity(calibrated.len());
        for p in &calibrated {
            let (clean, _) = stage("phase sanitization", ap, sanitize_phase(p, &cfg.guards, cfg.phase_mode))?;
            taps.push(stage("csi to cir", ap, cir_taps(&clean, &cfg.guards))?);
        }
        cirs.insert(ap, average_taps(&taps, calibrated[0].time_resolution_s()));
        reports.push(ApReport {
            ap_id: ap,
            removed: removal.removed,
            covariance: removal.covariance,
            scale,
            packets_used: calibrated.len(),
        });
    }
    let n_ap = raw.keys().next_back().map_or(0, |m| m + 1);
    let features = extract_features(&cirs, n_ap, n_path)?;
    Ok(Preprocessed {
        features,
        cirs,
        reports,
    })
}

// ---------------------------------------------------------------------------
// Raw capture text format

/// Parses capture records, one packet per line:
/// `location_id ap_id rssi_db K re,im re,im ...` (K pairs, centered order).
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_capture(text: &str) -> Result<Vec<CsiPacket>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(err("expected location, ap, rssi, K".into()));
        }
        let ap: usize = fields[1].parse().map_err(|e| err(format!("ap id: {e}")))?;
        let rssi: f64 = fields[2].parse().map_err(|e| err(format!("rssi: {e}")))?;
        let k: usize = fields[3].parse().map_err(|e| err(format!("K: {e}")))?;
        if fields.len() != 4 + k {
            return Err(err(format!("expected {k} subcarrier values, found {}", fields.len() - 4)));
        }
        let mut subcarriers = Vec::with_capacity(k);
        for f in &fields[4..] {
            let (re, im) = f
                .split_once(',')
                .ok_or_else(|| err(format!("subcarrier value {f:?} is not re,im")))?;
            let re: f64 = re.parse().map_err(|e| err(format!("real part: {e}")))?;
            let im: f64 = im.parse().map_err(|e| err(format!("imaginary part: {e}")))?;
            subcarriers.push(Complex64::new(re, im));
        }
        out.push(CsiPacket::new(fields[0], ap, rssi, subcarriers).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn format_capture(packets: &[CsiPacket]) -> String {
    let mut s = String::new();
    for p in packets {
        s.push_str(&format!("{} {} {} {}", p.location_id, p.ap_id, p.rssi_db, p.k()));
        for h in &p.subcarriers {
            s.push_str(&format!(" {},{}", h.re, h.im));
        }
        s.push('\n');
    }
    s
}

/// Groups packets by location, then AP, keeping capture order.
pub fn group_by_location(packets: Vec<CsiPacket>) -> BTreeMap<String, BTreeMap<usize, Vec<CsiPacket>>> {
    let mut out: BTreeMap<String, BTreeMap<usize, Vec<CsiPacket>>> = BTreeMap::new();
    for p in packets {
        out.entry(p.location_id.clone())
            .or_default()
            .entry(p.ap_id)
            .or_default()
            .push(p);
    }
    out
}
