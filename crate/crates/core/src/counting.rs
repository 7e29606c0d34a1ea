//! Per-region molecule counts from confocal coincidence data, with
//! simultaneous confidence intervals from the delta method.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::hybrid::RoiSet;
use crate::image::{gaussian_smooth, quantile, write_pgm16};
use crate::model::{GroundTruth, PsfPowerSums};
use crate::simulate::CoincidenceImage;
use crate::transform::Transform;

/// Stand-in for an unbounded count or interval end.
pub const UNBOUNDED: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnlargedRegion {
    pub id: usize,
    /// Sorted pixels of the base region.
    pub base: Vec<usize>,
    /// Sorted pixels of the enlarged region; a superset of `base`.
    pub pixels: Vec<usize>,
    pub eps_px: f64,
}

impl EnlargedRegion {
    /// Uses a pixel set as is.
    pub fn exact(id: usize, pixels: Vec<usize>) -> Self {
        let mut pixels = pixels;
        pixels.sort_unstable();
        pixels.dedup();
        EnlargedRegion {
            id,
            base: pixels.clone(),
            pixels,
            eps_px: 0.0,
        }
    }
}

/// Grows every region to the pixels within Euclidean distance `eps_px`.
/// A pixel claimed at equal distance by two regions stays unassigned, so
/// growth freezes at the midline and the results stay disjoint.
pub fn enlarge_regions(rois: &RoiSet, eps_px: f64) -> Result<Vec<EnlargedRegion>> {
    if !(eps_px >= 0.0) {
        return Err(invalid(format!("enlargement must be nonnegative, got {eps_px}")));
    }
    rois.check_disjoint()?;
    let n = rois.n as isize;
    let r = eps_px.floor() as isize;
    let e2 = eps_px * eps_px;
    // (squared distance, region index, contested)
    let mut best: Vec<(i64, usize, bool)> = vec![(i64::MAX, usize::MAX, false); (n * n) as usize];
    for (k, region) in rois.regions.iter().enumerate() {
        for &p in &region.pixels {
            let (px, py) = ((p as isize) / n, (p as isize) % n);
            for a in -r..=r {
                for b in -r..=r {
                    let d2 = a * a + b * b;
                    if d2 as f64 > e2 + 1e-9 {
                        continue;
                    }
                    let (x, y) = (px + a, py + b);
                    if x < 0 || y < 0 || x >= n || y >= n {
                        continue;
                    }
                    let entry = &mut best[(x * n + y) as usize];
                    let d2 = d2 as i64;
                    if d2 < entry.0 {
                        *entry = (d2, k, false);
                    } else if d2 == entry.0 && entry.1 != k {
                        entry.2 = true;
                    }
                }
            }
        }
    }
    let mut grown = vec![Vec::new(); rois.regions.len()];
    for (i, &(_, k, contested)) in best.iter().enumerate() {
        if k != usize::MAX && !contested {
            grown[k].push(i);
        }
    }
    Ok(rois
        .regions
        .iter()
        .zip(grown)
        .map(|(reg, pixels)| EnlargedRegion {
            id: reg.id,
            base: reg.pixels.clone(),
            pixels,
            eps_px,
        })
        .collect())
}

pub const BACKGROUND_SMOOTH_FWHM: f64 = 4.0;
pub const BACKGROUND_QUANTILE: f64 = 0.25;
/// Pixels this many noise standard deviations above the running estimate are
/// treated as signal.
pub const BACKGROUND_CLIP: f64 = 3.0;

/// Single-photon background rate per pulse from the one-photon image.
pub fn estimate_background(img: &CoincidenceImage) -> Result<f64> {
    estimate_background_with(img, BACKGROUND_SMOOTH_FWHM, BACKGROUND_QUANTILE)
}

/// Sigma-clipped median of the smoothed one-photon rate, started from its
/// `q`-quantile. Each round keeps the pixels within `BACKGROUND_CLIP` noise
/// standard deviations of the current level (Poisson noise at that level,
/// after smoothing) and takes their median.
pub fn estimate_background_with(img: &CoincidenceImage, smooth_fwhm: f64, q: f64) -> Result<f64> {
    let t = img.t as f64;
    let rate: Vec<f64> = img.planes[1].iter().map(|&v| v as f64 / t).collect();
    let smoothed = gaussian_smooth(&rate, img.n, smooth_fwhm);
    let taps = if smooth_fwhm > 0.0 {
        crate::image::gaussian_taps(smooth_fwhm)
    } else {
        vec![1.0]
    };
    let g2: f64 = taps.iter().map(|v| v * v).sum::<f64>().powi(2);
    let mut level = quantile(&smoothed, q)?;
    for _ in 0..50 {
        let sd = (level.max(1.0 / t) / t * g2).sqrt();
        let kept: Vec<f64> = smoothed
            .iter()
            .copied()
            .filter(|&v| v <= level + BACKGROUND_CLIP * sd)
            .collect();
        if kept.is_empty() {
            break;
        }
        let next = quantile(&kept, 0.5)?;
        if (next - level).abs() <= 1e-3 * sd {
            level = next;
            break;
        }
        level = next;
    }
    Ok(level.max(0.0))
}

/// Per-pixel multinomial covariance of the frequencies `(D_1, ..., D_md)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialCovariance {
    pub e: Vec<f64>,
}

impl MultinomialCovariance {
    pub fn new(active: &[f64]) -> Self {
        MultinomialCovariance { e: active.to_vec() }
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        if j == k {
            self.e[j] * (1.0 - self.e[j])
        } else {
            -self.e[j] * self.e[k]
        }
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.e.len();
        (0..m).map(|j| (0..m).map(|k| self.entry(j, k)).collect()).collect()
    }

    /// `g^T Sigma g = sum g_k^2 E_k - (sum g_k E_k)^2`.
    pub fn quadratic_form(&self, g: &[f64]) -> f64 {
        let a: f64 = g.iter().zip(&self.e).map(|(g, e)| g * g * e).sum();
        let b: f64 = g.iter().zip(&self.e).map(|(g, e)| g * e).sum();
        a - b * b
    }
}

/// Region-level sums entering the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub id: usize,
    pub n_hat: f64,
    pub p_hat: f64,
    pub sum_s1: f64,
    pub sum_s2: f64,
    pub identified: bool,
    pub degenerate_pixels: usize,
    pub n_pixels: usize,
}

/// Frequencies `(D_1..D_md)` per pixel of a region, plus the per-pixel power
/// sums and a degeneracy mask.
struct RegionData {
    d: Vec<Vec<f64>>,
    s: Vec<(f64, f64)>,
    degenerate: Vec<bool>,
}

fn region_data(img: &CoincidenceImage, pixels: &[usize], tr: &Transform, background: f64) -> RegionData {
    let t = img.t as f64;
    let mut d = Vec::with_capacity(pixels.len());
    let mut s = Vec::with_capacity(pixels.len());
    let mut degenerate = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let active: Vec<f64> = (1..=img.md).map(|k| img.planes[k][p] as f64 / t).collect();
        let ps = tr.inverse_unchecked(&active);
        if ps.0[0] > 0.0 {
            s.push((ps.0[0] - background, ps.0[1] - background * background));
            degenerate.push(false);
        } else {
            s.push((0.0, 0.0));
            degenerate.push(true);
        }
        d.push(active);
    }
    RegionData { d, s, degenerate }
}

fn n_hat_from(h: &PsfPowerSums, s1: f64, s2: f64) -> f64 {
    h.get(2) / (h.get(1) * h.get(1)) * s1 * s1 / s2
}

/// Plug-in count and brightness estimates per region. The background rate
/// is treated as one extra emitter, whose contribution `lambda^k` is removed
/// from each recovered power sum.
pub fn estimate_counts(
    img: &CoincidenceImage,
    regions: &[EnlargedRegion],
    h: &PsfPowerSums,
    background: f64,
) -> Result<Vec<RawEstimate>> {
    let tr = Transform::new(img.md)?;
    let npx = img.n * img.n;
    regions
        .iter()
        .map(|r| {
            if r.pixels.is_empty() {
                return Err(invalid(format!("region {} is empty", r.id)));
            }
            if r.pixels.iter().any(|&p| p >= npx) {
                return Err(Error::Data(format!("region {} exceeds the image", r.id)));
            }
            let data = region_data(img, &r.pixels, &tr, background);
            let s1: f64 = data.s.iter().map(|v| v.0).sum();
            let s2: f64 = data.s.iter().map(|v| v.1).sum();
            let identified = s1 > 0.0 && s2 > 0.0;
            Ok(RawEstimate {
                id: r.id,
                n_hat: if identified { n_hat_from(h, s1, s2) } else { UNBOUNDED },
                p_hat: if identified { h.get(1) * s2 / (h.get(2) * s1) } else { 0.0 },
                sum_s1: s1,
                sum_s2: s2,
                identified,
                degenerate_pixels: data.degenerate.iter().filter(|&&d| d).count(),
                n_pixels: r.pixels.len(),
            })
        })
        .collect()
}

pub const GRADIENT_STEP: f64 = 1e-6;

/// Gradient of `Psi(D) = H_2/H_1^2 (sum s_1)^2 / sum s_2` with respect to
/// every pixel frequency `D_k`, `k = 1..md`, by central differences with one
/// Richardson step. Perturbing one pixel only moves its own power sums, so
/// each stencil point is evaluated by updating the region sums. Degenerate
/// pixels keep a zero gradient. Returns `None` when no stable step is found.
fn gradient_of(data: &RegionData, tr: &Transform, h: &PsfPowerSums, step: f64) -> Option<Vec<Vec<f64>>> {
    let s1: f64 = data.s.iter().map(|v| v.0).sum();
    let s2: f64 = data.s.iter().map(|v| v.1).sum();
    if !(s1 > 0.0 && s2 > 0.0) {
        return None;
    }
    let psi = |d1: f64, d2: f64| {
        let v = n_hat_from(h, s1 + d1, s2 + d2);
        (s2 + d2 > 0.0 && v.is_finite()).then_some(v)
    };
    let md = tr.md();
    let mut out = Vec::with_capacity(data.d.len());
    for (i, base) in data.d.iter().enumerate() {
        if data.degenerate[i] {
            out.push(vec![0.0; md]);
            continue;
        }
        let own = tr.inverse_unchecked(base);
        let mut g = vec![0.0; md];
        for k in 0..md {
            let central = |delta: f64| -> Option<f64> {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[k] += delta;
                dn[k] -= delta;
                let su = tr.inverse_unchecked(&up);
                let sd = tr.inverse_unchecked(&dn);
                let fu = psi(su.0[0] - own.0[0], su.0[1] - own.0[1])?;
                let fd = psi(sd.0[0] - own.0[0], sd.0[1] - own.0[1])?;
                Some((fu - fd) / (2.0 * delta))
            };
            let mut delta = step;
            let mut value = None;
            for _ in 0..4 {
                if let (Some(a), Some(b)) = (central(delta), central(delta / 2.0)) {
                    value = Some((4.0 * b - a) / 3.0);
                    break;
                }
                delta /= 10.0;
            }
            g[k] = value?;
        }
        out.push(g);
    }
    Some(out)
}

/// Gradient of the count functional over a region's pixels, one
/// `md`-vector per pixel in `pixels` order.
pub fn gradient_psi(
    img: &CoincidenceImage,
    pixels: &[usize],
    h: &PsfPowerSums,
    background: f64,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let tr = Transform::new(img.md)?;
    let data = region_data(img, pixels, &tr, background);
    gradient_of(&data, &tr, h, step).ok_or_else(|| Error::NonInvertible("count functional not finite".into()))
}

/// Counts above which the truncation bias is expected to become visible.
pub fn bias_threshold(md: usize) -> f64 {
    match md {
        0..=2 => 10.0,
        3 => 25.0,
        4 => 40.0,
        5 => 70.0,
        6 => 100.0,
        7 => 125.0,
        _ => 150.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEstimate {
    pub id: usize,
    #[serde(rename = "N_hat")]
    pub n_hat: f64,
    pub p_hat: f64,
    pub sigma: f64,
    pub ci: [f64; 2],
    pub t: u64,
    pub md: usize,
    pub flags: Vec<String>,
    pub degenerate_pixels: usize,
}

/// Two-sided normal quantile used for `m` simultaneous intervals at total level `alpha_ci`.
pub fn simultaneous_z(alpha_ci: f64, m: usize) -> Result<f64> {
    if !(alpha_ci > 0.0 && alpha_ci < 1.0) || m == 0 {
        return Err(invalid("need alpha in (0, 1) and at least one interval"));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - alpha_ci / (2.0 * m as f64)))
}

/// Delta-method intervals `N_hat +- z sigma / sqrt(t)` with `z` the
/// `1 - alpha_ci / (2M)` normal quantile. With `validated`, every region is
/// known to hold a molecule, so the estimate and both interval ends are
/// raised to at least 1.
#[allow(clippy::too_many_arguments)]
pub fn confidence_intervals(
    estimates: &[RawEstimate],
    img: &CoincidenceImage,
    regions: &[EnlargedRegion],
    h: &PsfPowerSums,
    background: f64,
    alpha_ci: f64,
    m: usize,
    validated: bool,
) -> Result<Vec<CountEstimate>> {
    if estimates.len() != regions.len() {
        return Err(invalid("one estimate per region required"));
    }
    let z = simultaneous_z(alpha_ci, m)?;
    let tr = Transform::new(img.md)?;
    let sqrt_t = (img.t as f64).sqrt();
    estimates
        .iter()
        .zip(regions)
        .map(|(est, reg)| {
            if est.id != reg.id {
                return Err(invalid(format!("estimate {} paired with region {}", est.id, reg.id)));
            }
            let mut flags = Vec::new();
            if est.degenerate_pixels > 0 {
                flags.push("degenerate_pixels".to_string());
            }
            let lower_floor = if validated { 1.0 } else { 0.0 };
            let non_identified = |mut flags: Vec<String>, tag: &str| {
                flags.push(tag.to_string());
                CountEstimate {
                    id: est.id,
                    n_hat: est.n_hat,
                    p_hat: est.p_hat,
                    sigma: UNBOUNDED,
                    ci: [lower_floor, UNBOUNDED],
                    t: img.t,
                    md: img.md,
                    flags,
                    degenerate_pixels: est.degenerate_pixels,
                }
            };
            if !est.identified {
                return Ok(non_identified(flags, "non_identified"));
            }
            let data = region_data(img, &reg.pixels, &tr, background);
            let Some(grad) = gradient_of(&data, &tr, h, GRADIENT_STEP) else {
                return Ok(non_identified(flags, "gradient_unstable"));
            };
            let var: f64 = grad
                .iter()
                .zip(&data.d)
                .map(|(g, d)| MultinomialCovariance::new(d).quadratic_form(g))
                .sum();
            let sigma = var.max(0.0).sqrt();
            let half = z * sigma / sqrt_t;
            if est.n_hat < lower_floor {
                flags.push("raised_to_one".to_string());
            }
            let n_hat = est.n_hat.max(lower_floor);
            let lower = (est.n_hat - half).max(lower_floor);
            let upper = (est.n_hat + half).max(lower_floor);
            if est.n_hat > bias_threshold(img.md) {
                flags.push("bias_warning".to_string());
            }
            Ok(CountEstimate {
                id: est.id,
                n_hat,
                p_hat: est.p_hat,
                sigma,
                ci: [lower, upper],
                t: img.t,
                md: img.md,
                flags,
                degenerate_pixels: est.degenerate_pixels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSegment {
    pub id: usize,
    pub pixels: Vec<usize>,
    #[serde(rename = "N_hat")]
    pub n_hat: f64,
    pub p_hat: f64,
    pub sigma: f64,
    pub ci: [f64; 2],
    pub flags: Vec<String>,
    /// Pixels whose photons entered the estimate; the segment itself when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counted_pixels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularMap {
    pub n: usize,
    pub alpha: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub segments: Vec<MapSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn build_molecular_map(rois: &RoiSet, estimates: &[CountEstimate], alpha: f64) -> Result<MolecularMap> {
    if rois.len() != estimates.len() {
        return Err(invalid(format!(
            "{} regions but {} estimates",
            rois.len(),
            estimates.len()
        )));
    }
    let segments = rois
        .regions
        .iter()
        .zip(estimates)
        .map(|(r, e)| {
            if r.id != e.id {
                return Err(invalid(format!("region id {} does not match estimate id {}", r.id, e.id)));
            }
            Ok(MapSegment {
                id: r.id,
                pixels: r.pixels.clone(),
                n_hat: e.n_hat,
                p_hat: e.p_hat,
                sigma: e.sigma,
                ci: e.ci,
                flags: e.flags.clone(),
                counted_pixels: Vec::new(),
                truth: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MolecularMap {
        n: rois.n,
        alpha,
        m: segments.len(),
        segments,
        config_hash: None,
    })
}

impl MolecularMap {
    /// Records the enlarged pixel sets the counts were computed on.
    pub fn set_counted(&mut self, regions: &[EnlargedRegion]) -> Result<()> {
        if regions.len() != self.segments.len() {
            return Err(invalid("one enlarged region per segment required"));
        }
        for (s, r) in self.segments.iter_mut().zip(regions) {
            if s.id != r.id {
                return Err(invalid(format!("segment {} paired with region {}", s.id, r.id)));
            }
            s.counted_pixels = r.pixels.clone();
        }
        Ok(())
    }

    /// Records the true number of molecules inside the counted pixels of
    /// every segment.
    pub fn attach_truth(&mut self, gt: &GroundTruth) {
        for s in &mut self.segments {
            let px = if s.counted_pixels.is_empty() { &s.pixels } else { &s.counted_pixels };
            s.truth = Some(gt.count_in(px));
        }
    }

    /// Whether every interval covers its recorded truth; `None` without truth.
    pub fn all_covered(&self) -> Option<bool> {
        self.segments
            .iter()
            .map(|s| s.truth.map(|t| s.ci[0] <= t as f64 && t as f64 <= s.ci[1]))
            .collect::<Option<Vec<bool>>>()
            .map(|v| v.into_iter().all(|c| c))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: MolecularMap = serde_json::from_str(s)?;
        if m.m != m.segments.len() {
            return Err(Error::Data("M differs from the number of segments".into()));
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let with_truth = self.segments.iter().any(|s| s.truth.is_some());
        if let Some(h) = &self.config_hash {
            writeln!(out, "# config_hash={h}")?;
        }
        if with_truth {
            writeln!(out, "segment,lower,upper,N_hat,p_hat,truth,covered")?;
        } else {
            writeln!(out, "segment,lower,upper,N_hat,p_hat")?;
        }
        for s in &self.segments {
            write!(out, "{},{},{},{},{}", s.id, s.ci[0], s.ci[1], s.n_hat, s.p_hat)?;
            if let Some(t) = s.truth {
                let covered = s.ci[0] <= t as f64 && t as f64 <= s.ci[1];
                write!(out, ",{t},{}", covered as u8)?;
            } else if with_truth {
                write!(out, ",,")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Gray levels proportional to the estimated density `N_hat / area`;
    /// regions without a finite estimate are drawn at full scale.
    pub fn write_density_pgm(&self, path: &Path) -> Result<()> {
        let density: Vec<f64> = self
            .segments
            .iter()
            .map(|s| {
                if s.n_hat >= UNBOUNDED {
                    f64::INFINITY
                } else {
                    s.n_hat.max(0.0) / s.pixels.len().max(1) as f64
                }
            })
            .collect();
        let top = density.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        let mut values = vec![0u16; self.n * self.n];
        for (s, d) in self.segments.iter().zip(&density) {
            let level = if !d.is_finite() || top <= 0.0 {
                u16::MAX
            } else {
                (d / top * u16::MAX as f64).round() as u16
            };
            for &p in &s.pixels {
                values[p] = level;
            }
        }
        write_pgm16(path, self.n, &values, self.config_hash.as_ref().map(|h| format!("config_hash={h}")).as_deref())
    }
}
