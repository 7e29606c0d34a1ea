//! Multiscale scan test on the one-photon STED image.
//!
//! Every box `B_{x,h}` gets a probe `Phi` obtained by dividing the spectrum of
//! a smooth bump supported on the box by the PSF spectrum (Tikhonov
//! regularized). The local statistic is the centered inner product of the
//! data with the probe, normalized by its null standard deviation. Critical
//! values come from Monte-Carlo simulation of molecule-free images.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::{GroundTruth, Psf};
use crate::simulate::{derive_seed, expected_image, sample_image, CoincidenceImage};

/// Axis-aligned box: top-left pixel `(x, y)` and side lengths `(h1, h2)`
/// along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanBox {
    pub x: usize,
    pub y: usize,
    pub h1: usize,
    pub h2: usize,
}

impl ScanBox {
    pub fn new(x: usize, y: usize, h1: usize, h2: usize) -> Self {
        ScanBox { x, y, h1, h2 }
    }

    pub fn area(&self) -> usize {
        self.h1 * self.h2
    }

    pub fn fits(&self, n: usize) -> bool {
        self.h1 >= 1 && self.h2 >= 1 && self.x + self.h1 <= n && self.y + self.h2 <= n
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.h1 && y >= self.y && y < self.y + self.h2
    }

    /// `other` is a subset of `self` (not necessarily strict).
    pub fn contains(&self, other: &ScanBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.h1 <= self.x + self.h1
            && other.y + other.h2 <= self.y + self.h2
    }

    pub fn intersects(&self, other: &ScanBox) -> bool {
        self.x < other.x + other.h1
            && other.x < self.x + self.h1
            && self.y < other.y + other.h2
            && other.y < self.y + self.h2
    }

    /// Linear pixel indices covered by the box on an `n x n` grid.
    pub fn pixels(&self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for a in self.x..self.x + self.h1 {
            for b in self.y..self.y + self.h2 {
                out.push(a * n + b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stride {
    /// `max(1, floor(min(h1, h2) / 2))` per scale.
    Half,
    Unit,
}

impl Stride {
    fn step(self, h: (usize, usize)) -> usize {
        match self {
            Stride::Half => (h.0.min(h.1) / 2).max(1),
            Stride::Unit => 1,
        }
    }
}

/// All boxes of a set of scales, with the scale index of each box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSystem {
    pub n: usize,
    pub scales: Vec<(usize, usize)>,
    pub stride: Stride,
    pub boxes: Vec<ScanBox>,
    pub scale_of: Vec<usize>,
}

pub fn build_box_system(n: usize, scales: &[(usize, usize)], stride: Stride) -> Result<BoxSystem> {
    if scales.is_empty() {
        return Err(invalid("at least one scale is required"));
    }
    let mut boxes = Vec::new();
    let mut scale_of = Vec::new();
    for (s, &(h1, h2)) in scales.iter().enumerate() {
        if h1 == 0 || h2 == 0 || h1 > n || h2 > n {
            return Err(invalid(format!("scale ({h1}, {h2}) does not fit an {n}x{n} grid")));
        }
        let step = stride.step((h1, h2));
        for x in (0..=n - h1).step_by(step) {
            for y in (0..=n - h2).step_by(step) {
                boxes.push(ScanBox::new(x, y, h1, h2));
                scale_of.push(s);
            }
        }
    }
    Ok(BoxSystem {
        n,
        scales: scales.to_vec(),
        stride,
        boxes,
        scale_of,
    })
}

/// Dyadic side lengths `ceil(fwhm) * 2^k` up to `n / 4`, all pairings.
pub fn default_scales(n: usize, sted_fwhm: f64) -> Vec<(usize, usize)> {
    let base = (sted_fwhm.ceil() as usize).max(1);
    let top = (n / 4).max(base);
    let mut sides = Vec::new();
    let mut h = base;
    while h <= top {
        sides.push(h);
        h *= 2;
    }
    let mut scales = Vec::new();
    for &a in &sides {
        for &b in &sides {
            scales.push((a, b));
        }
    }
    scales
}

/// `sqrt(2 log(n^2 / (h1 h2)))`.
pub fn scale_penalty(n: usize, h: (usize, usize)) -> f64 {
    let ratio = (n * n) as f64 / (h.0 * h.1) as f64;
    (2.0 * ratio.ln().max(0.0)).sqrt()
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn transpose(&self, data: &mut [Complex64]) {
        let n = self.n;
        for a in 0..n {
            for b in a + 1..n {
                data.swap(a * n + b, b * n + a);
            }
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        self.transpose(data);
        plan.process(data);
        self.transpose(data);
        if inverse {
            let scale = 1.0 / (self.n * self.n) as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }

    fn forward_real(&self, img: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut data, false);
        data
    }
}

/// Separable `sin^2` bump on an `h1 x h2` window.
fn bump(h: (usize, usize)) -> Vec<f64> {
    let profile = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|a| (std::f64::consts::PI * (a as f64 + 0.5) / len as f64).sin().powi(2))
            .collect()
    };
    let (u, v) = (profile(h.0), profile(h.1));
    let mut out = Vec::with_capacity(h.0 * h.1);
    for a in &u {
        for b in &v {
            out.push(a * b);
        }
    }
    out
}

/// Probes for each scale on the periodic `n x n` grid, anchored with the box
/// corner at the origin.
pub struct ProbeBank {
    n: usize,
    fft: Fft2,
    scales: Vec<(usize, usize)>,
    tau: f64,
    probes: Vec<Vec<f64>>,
    probe_hat_conj: Vec<Vec<Complex64>>,
    norm2: Vec<f64>,
    fingerprint: String,
}

impl std::fmt::Debug for ProbeBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProbeBank")
            .field("n", &self.n)
            .field("scales", &self.scales)
            .field("tau", &self.tau)
            .finish()
    }
}

/// Relative Tikhonov floor used in the spectral division.
pub const PROBE_REGULARIZATION: f64 = 1e-3;

impl ProbeBank {
    pub fn new(n: usize, psf: &Psf, scales: &[(usize, usize)]) -> Result<Self> {
        if psf.support() > n {
            return Err(invalid(format!(
                "PSF support {} exceeds the {n}x{n} grid",
                psf.support()
            )));
        }
        let fft = Fft2::new(n);
        let r = psf.radius() as isize;
        let mut h = vec![0.0; n * n];
        for a in -r..=r {
            for b in -r..=r {
                let (i, j) = (a.rem_euclid(n as isize) as usize, b.rem_euclid(n as isize) as usize);
                h[i * n + j] += psf.at(a, b);
            }
        }
        let h_hat = fft.forward_real(&h);
        let max_abs = h_hat.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let tau = PROBE_REGULARIZATION * max_abs;
        let mut probes = Vec::new();
        let mut probe_hat_conj = Vec::new();
        let mut norm2 = Vec::new();
        for &s in scales {
            if s.0 == 0 || s.1 == 0 || s.0 > n || s.1 > n {
                return Err(invalid(format!("scale {s:?} does not fit the grid")));
            }
            let phi = bump(s);
            let mut grid = vec![0.0; n * n];
            for a in 0..s.0 {
                for b in 0..s.1 {
                    grid[a * n + b] = phi[a * s.1 + b];
                }
            }
            let mut spec = fft.forward_real(&grid);
            for (v, hh) in spec.iter_mut().zip(&h_hat) {
                *v = *v * hh.conj() / (hh.norm_sqr() + tau * tau);
            }
            let spec_copy = spec.clone();
            fft.run(&mut spec, true);
            let probe: Vec<f64> = spec.iter().map(|c| c.re).collect();
            norm2.push(probe.iter().map(|v| v * v).sum());
            probes.push(probe);
            probe_hat_conj.push(spec_copy.iter().map(|c| c.conj()).collect());
        }
        let mut hasher = Sha256::new();
        hasher.update((n as u64).to_le_bytes());
        hasher.update(psf.support().to_le_bytes());
        for v in psf.kernel() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(tau.to_le_bytes());
        let fingerprint = crate::hex(&hasher.finalize());
        Ok(ProbeBank {
            n,
            fft,
            scales: scales.to_vec(),
            tau,
            probes,
            probe_hat_conj,
            norm2,
            fingerprint,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    /// Probe of scale `s` evaluated at grid offset `(a, b)` from the box corner.
    pub fn probe_at(&self, s: usize, a: isize, b: isize) -> f64 {
        let n = self.n as isize;
        self.probes[s][(a.rem_euclid(n) * n + b.rem_euclid(n)) as usize]
    }

    pub fn probe_norm2(&self, s: usize) -> f64 {
        self.norm2[s]
    }

    /// Correlation maps `C_s(x, y) = <Y - t lambda, Phi_s(. - (x, y))>` for all scales.
    fn correlations(&self, centered: &[f64]) -> Vec<Vec<f64>> {
        let y_hat = self.fft.forward_real(centered);
        self.probe_hat_conj
            .iter()
            .map(|p| {
                let mut prod: Vec<Complex64> = y_hat.iter().zip(p).map(|(a, b)| a * b).collect();
                self.fft.run(&mut prod, true);
                prod.iter().map(|c| c.re).collect()
            })
            .collect()
    }
}

/// Per-pixel null variance of the one-photon count divided by `t`, floored so
/// that a background-free null still yields a finite normalization.
pub fn null_variance(t: u64, background: f64) -> f64 {
    (background * (1.0 - background)).max(1.0 / t as f64)
}

/// Statistics of every box in `system`, in box order.
pub fn box_statistics(
    one_photon: &[f64],
    t: u64,
    background: f64,
    bank: &ProbeBank,
    system: &BoxSystem,
) -> Result<Vec<f64>> {
    let n = bank.n;
    if one_photon.len() != n * n || system.n != n || system.scales != bank.scales {
        return Err(invalid("image, probe bank and box system disagree"));
    }
    let offset = t as f64 * background;
    let centered: Vec<f64> = one_photon.iter().map(|v| v - offset).collect();
    let maps = bank.correlations(&centered);
    let var = t as f64 * null_variance(t, background);
    let sd: Vec<f64> = bank.norm2.iter().map(|q| (var * q).sqrt()).collect();
    Ok(system
        .boxes
        .iter()
        .zip(&system.scale_of)
        .map(|(b, &s)| maps[s][b.x * n + b.y] / sd[s])
        .collect())
}

/// Statistic of a single box computed by direct summation.
pub fn probe_statistic(image: &CoincidenceImage, psf: &Psf, b: &ScanBox, background: f64) -> Result<f64> {
    let n = image.n;
    if !b.fits(n) {
        return Err(invalid(format!("box {b:?} outside the {n}x{n} image")));
    }
    let bank = ProbeBank::new(n, psf, &[(b.h1, b.h2)])?;
    let offset = image.t as f64 * background;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let y = image.planes[1][i * n + j] as f64 - offset;
            acc += y * bank.probe_at(0, i as isize - b.x as isize, j as isize - b.y as isize);
        }
    }
    let var = image.t as f64 * null_variance(image.t, background);
    Ok(acc / (var * bank.norm2[0]).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCritical {
    pub h1: usize,
    pub h2: usize,
    pub penalty: f64,
    pub critical: f64,
}

/// Monte-Carlo calibration of the penalized scan maximum. Reusable for any
/// data set with the same key `(n, t, md, alpha, box_hash, background)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCalibration {
    pub n: usize,
    pub t: u64,
    pub md: usize,
    pub alpha: f64,
    pub background: f64,
    pub box_hash: String,
    pub n_sim: usize,
    pub seed: u64,
    /// Global threshold on `max_B (T_B - penalty_h)`.
    pub c: f64,
    pub scales: Vec<ScaleCritical>,
    /// Penalized maxima of the null replicates, sorted ascending.
    pub null_maxima: Vec<f64>,
}

/// Digest of the box system and probe construction.
pub fn box_hash(system: &BoxSystem, bank: &ProbeBank) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bank.fingerprint.as_bytes());
    hasher.update((system.n as u64).to_le_bytes());
    for b in &system.boxes {
        for v in [b.x, b.y, b.h1, b.h2] {
            hasher.update((v as u64).to_le_bytes());
        }
    }
    crate::hex(&hasher.finalize())
}

fn empirical_upper_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let m = sorted.len();
    let k = ((1.0 - alpha) * m as f64).ceil() as usize;
    sorted[k.clamp(1, m) - 1]
}

fn penalized_max(stats: &[f64], system: &BoxSystem, penalties: &[f64]) -> f64 {
    stats
        .iter()
        .zip(&system.scale_of)
        .map(|(v, &s)| v - penalties[s])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Simulates `n_sim` molecule-free images with the declared background and
/// returns the critical values `c_h = c + penalty_h`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_quantiles(
    bank: &ProbeBank,
    system: &BoxSystem,
    t: u64,
    md: usize,
    background: f64,
    alpha: f64,
    n_sim: usize,
    seed: u64,
) -> Result<ScanCalibration> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha = {alpha} outside (0, 1)")));
    }
    if n_sim == 0 || t == 0 {
        return Err(invalid("calibration needs n_sim >= 1 and t >= 1"));
    }
    let n = bank.n;
    let penalties: Vec<f64> = system.scales.iter().map(|&h| scale_penalty(n, h)).collect();
    let null = expected_image(&GroundTruth::empty(n), &dummy_psf()?, md, background)?;
    let mut maxima = (0..n_sim)
        .into_par_iter()
        .map(|r| {
            let img = sample_image(&null, t, derive_seed(seed, r as u64))?;
            let stats = box_statistics(&img.one_photon(), t, background, bank, system)?;
            Ok(penalized_max(&stats, system, &penalties))
        })
        .collect::<Result<Vec<f64>>>()?;
    maxima.sort_by(f64::total_cmp);
    let c = empirical_upper_quantile(&maxima, alpha);
    Ok(ScanCalibration {
        n,
        t,
        md,
        alpha,
        background,
        box_hash: box_hash(system, bank),
        n_sim,
        seed,
        c,
        scales: system
            .scales
            .iter()
            .zip(&penalties)
            .map(|(&(h1, h2), &penalty)| ScaleCritical {
                h1,
                h2,
                penalty,
                critical: c + penalty,
            })
            .collect(),
        null_maxima: maxima,
    })
}

// Any PSF works for the molecule-free null; only the background enters.
fn dummy_psf() -> Result<Psf> {
    Psf::gaussian_with_support(1.0, 3, crate::model::PsfMode::Sted)
}

impl ScanCalibration {
    /// Same null sample, different level.
    pub fn with_alpha(&self, alpha: f64) -> Result<ScanCalibration> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha = {alpha} outside (0, 1)")));
        }
        let c = empirical_upper_quantile(&self.null_maxima, alpha);
        let mut out = self.clone();
        out.alpha = alpha;
        out.c = c;
        for s in &mut out.scales {
            s.critical = c + s.penalty;
        }
        Ok(out)
    }

    pub fn check_key(&self, n: usize, t: u64, md: usize, background: f64, hash: &str) -> Result<()> {
        if self.n != n || self.t != t || self.md != md || self.background != background || self.box_hash != hash {
            return Err(Error::Config(format!(
                "calibration for (n={}, t={}, md={}, background={}) does not match (n={n}, t={t}, md={md}, background={background}) or the box system",
                self.n, self.t, self.md, self.background
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub b: ScanBox,
    pub stat: f64,
}

/// Selected boxes with their statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<ScoredBox>,
}

impl BoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Boxes whose statistic strictly exceeds their scale's critical value.
pub fn select_significant(
    image: &CoincidenceImage,
    bank: &ProbeBank,
    system: &BoxSystem,
    cal: &ScanCalibration,
) -> Result<BoxSet> {
    cal.check_key(image.n, image.t, image.md, cal.background, &box_hash(system, bank))?;
    if cal.scales.len() != system.scales.len() {
        return Err(Error::InvalidArgument("calibration scales do not match".into()));
    }
    let stats = box_statistics(&image.one_photon(), image.t, cal.background, bank, system)?;
    Ok(BoxSet {
        boxes: system
            .boxes
            .iter()
            .zip(&system.scale_of)
            .zip(&stats)
            .filter(|((_, &s), &v)| v > cal.scales[s].critical)
            .map(|((&b, _), &stat)| ScoredBox { b, stat })
            .collect(),
    })
}

/// Keeps the members that contain no other member as a strict subset.
/// Duplicate boxes collapse to one copy carrying the largest statistic.
pub fn prune_minimal(set: &BoxSet) -> BoxSet {
    let mut uniq: Vec<ScoredBox> = Vec::new();
    let mut sorted = set.boxes.clone();
    sorted.sort_by(|a, b| a.b.cmp(&b.b).then(b.stat.total_cmp(&a.stat)));
    for sb in sorted {
        if uniq.last().is_some_and(|u| u.b == sb.b) {
            continue;
        }
        uniq.push(sb);
    }
    // Smaller boxes first so each candidate only scans potential subsets.
    let mut by_area: Vec<usize> = (0..uniq.len()).collect();
    by_area.sort_by_key(|&i| uniq[i].b.area());
    let mut keep = vec![true; uniq.len()];
    for (pos, &i) in by_area.iter().enumerate() {
        let bi = uniq[i].b;
        for &j in &by_area[..pos] {
            if uniq[j].b.area() < bi.area() && bi.contains(&uniq[j].b) {
                keep[i] = false;
                break;
            }
        }
    }
    BoxSet {
        boxes: uniq
            .into_iter()
            .zip(keep)
            .filter_map(|(b, k)| k.then_some(b))
            .collect(),
    }
}
