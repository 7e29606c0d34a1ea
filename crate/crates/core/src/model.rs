//! Ground truth samples, point spread functions and the per-pixel detection
//! probabilities they induce.
//!
//! Grid coordinates are zero-based `(x, y)` pairs where `x` is the row
//! (first index) and `y` the column. Linear pixel indices are row-major,
//! `x * n + y`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative threshold below which Gaussian kernel values are cut to zero.
pub const PSF_TRUNCATION: f64 = 1e-6;

/// A fluorescent marker on the scan grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub x: usize,
    pub y: usize,
    /// On-peak probability to detect a photon per excitation pulse.
    pub p: f64,
}

/// The imaged sample: grid size and marker list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n: usize,
    pub molecules: Vec<Molecule>,
}

impl GroundTruth {
    pub fn new(n: usize, molecules: Vec<Molecule>) -> Result<Self> {
        let gt = GroundTruth { n, molecules };
        gt.validate()?;
        Ok(gt)
    }

    pub fn empty(n: usize) -> Self {
        GroundTruth {
            n,
            molecules: Vec::new(),
        }
    }

    /// Builds a ground truth from continuous positions, snapping each to the
    /// closest grid point.
    pub fn from_continuous(n: usize, molecules: &[(f64, f64, f64)]) -> Result<Self> {
        let mut snapped = Vec::with_capacity(molecules.len());
        for &(x, y, p) in molecules {
            let (xr, yr) = (x.round(), y.round());
            if !(xr >= 0.0 && yr >= 0.0 && xr < n as f64 && yr < n as f64) {
                return Err(invalid(format!("position ({x}, {y}) outside the {n}x{n} grid")));
            }
            snapped.push(Molecule {
                x: xr as usize,
                y: yr as usize,
                p,
            });
        }
        GroundTruth::new(n, snapped)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("grid size must be positive"));
        }
        for (j, m) in self.molecules.iter().enumerate() {
            if m.x >= self.n || m.y >= self.n {
                return Err(invalid(format!(
                    "molecule {j} at ({}, {}) outside the {}x{} grid",
                    m.x, m.y, self.n, self.n
                )));
            }
            if !(m.p > 0.0 && m.p < 0.5) {
                return Err(invalid(format!(
                    "molecule {j} brightness {} outside (0, 0.5)",
                    m.p
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(s)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of molecules whose grid position lies in `pixels` (linear indices).
    pub fn count_in(&self, pixels: &[usize]) -> usize {
        let mut inside = vec![false; self.n * self.n];
        for &i in pixels {
            inside[i] = true;
        }
        self.molecules
            .iter()
            .filter(|m| inside[m.x * self.n + m.y])
            .count()
    }

    /// Molecule count per pixel.
    pub fn count_image(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n * self.n];
        for m in &self.molecules {
            counts[m.x * self.n + m.y] += 1;
        }
        counts
    }

    pub fn translated(&self, dx: isize, dy: isize) -> Result<Self> {
        let mut molecules = Vec::with_capacity(self.molecules.len());
        for m in &self.molecules {
            let x = m.x as isize + dx;
            let y = m.y as isize + dy;
            if x < 0 || y < 0 || x >= self.n as isize || y >= self.n as isize {
                return Err(invalid("translation moves a molecule off the grid"));
            }
            molecules.push(Molecule {
                x: x as usize,
                y: y as usize,
                p: m.p,
            });
        }
        GroundTruth::new(self.n, molecules)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfMode {
    Confocal,
    Sted,
}

/// Discrete point spread function on an odd square support, peak at the center.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    support: usize,
    kernel: Vec<f64>,
    fwhm_px: f64,
    mode: PsfMode,
}

/// Standard deviation of a Gaussian with the given full width at half maximum.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Peak-normalised Gaussian PSF on a `support x support` window.
pub fn gaussian_psf(fwhm_px: f64, support: usize) -> Result<Psf> {
    Psf::gaussian_with_support(fwhm_px, support, PsfMode::Confocal)
}

impl Psf {
    /// Gaussian PSF whose support covers every value above the truncation level.
    pub fn gaussian(fwhm_px: f64, mode: PsfMode) -> Result<Psf> {
        if !(fwhm_px > 0.0 && fwhm_px.is_finite()) {
            return Err(invalid(format!("FWHM must be positive, got {fwhm_px}")));
        }
        let sigma = fwhm_to_sigma(fwhm_px);
        let radius = (sigma * (-2.0 * PSF_TRUNCATION.ln()).sqrt()).floor().max(1.0) as usize;
        Psf::gaussian_with_support(fwhm_px, 2 * radius + 1, mode)
    }

    pub fn gaussian_with_support(fwhm_px: f64, support: usize, mode: PsfMode) -> Result<Psf> {
        if !(fwhm_px > 0.0 && fwhm_px.is_finite()) {
            return Err(invalid(format!("FWHM must be positive, got {fwhm_px}")));
        }
        if support < 3 || support % 2 == 0 {
            return Err(invalid(format!("support must be odd and >= 3, got {support}")));
        }
        let sigma = fwhm_to_sigma(fwhm_px);
        let r = (support / 2) as isize;
        let mut kernel = Vec::with_capacity(support * support);
        for a in -r..=r {
            for b in -r..=r {
                let d2 = (a * a + b * b) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                kernel.push(if v < PSF_TRUNCATION { 0.0 } else { v });
            }
        }
        Ok(Psf {
            support,
            kernel,
            fwhm_px,
            mode,
        })
    }

    /// Wraps an arbitrary kernel. It must be odd-sized, valued in `[0, 1]`,
    /// and attain its maximum at the center.
    pub fn from_kernel(support: usize, kernel: Vec<f64>, fwhm_px: f64, mode: PsfMode) -> Result<Psf> {
        if support == 0 || support % 2 == 0 || kernel.len() != support * support {
            return Err(invalid("kernel must be square with odd side"));
        }
        if kernel.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid("kernel values must lie in [0, 1]"));
        }
        let center = kernel[kernel.len() / 2];
        if kernel.iter().any(|&v| v > center) {
            return Err(invalid("kernel maximum must be attained at the center"));
        }
        if !(fwhm_px > 0.0) {
            return Err(invalid("FWHM must be positive"));
        }
        Ok(Psf {
            support,
            kernel,
            fwhm_px,
            mode,
        })
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn radius(&self) -> usize {
        self.support / 2
    }

    pub fn fwhm_px(&self) -> f64 {
        self.fwhm_px
    }

    pub fn mode(&self) -> PsfMode {
        self.mode
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn peak(&self) -> f64 {
        self.kernel[self.kernel.len() / 2]
    }

    /// Kernel value at offset `(da, db)` from the center; zero off support.
    pub fn at(&self, da: isize, db: isize) -> f64 {
        let r = self.radius() as isize;
        if da.abs() > r || db.abs() > r {
            return 0.0;
        }
        self.kernel[((da + r) as usize) * self.support + (db + r) as usize]
    }

    /// Pointwise `k`-th power of the kernel.
    pub fn powered(&self, k: i32) -> Psf {
        Psf {
            support: self.support,
            kernel: self.kernel.iter().map(|v| v.powi(k)).collect(),
            fwhm_px: self.fwhm_px,
            mode: self.mode,
        }
    }
}

/// Per-pixel detection probabilities `eps_j(x_i) = p_j h(x_i - x_psi(j))`,
/// stored sparsely: only molecules within kernel support of a pixel appear.
#[derive(Debug, Clone)]
pub struct DetectionField {
    n: usize,
    n_molecules: usize,
    entries: Vec<Vec<(u32, f64)>>,
}

pub fn detection_field(gt: &GroundTruth, psf: &Psf) -> Result<DetectionField> {
    let n = gt.n;
    let peak = psf.peak();
    let r = psf.radius() as isize;
    let mut entries = vec![Vec::new(); n * n];
    for (j, m) in gt.molecules.iter().enumerate() {
        if m.p * peak >= 1.0 {
            return Err(Error::InvalidModel(format!(
                "molecule {j}: p * h(0) = {} >= 1",
                m.p * peak
            )));
        }
        let (mx, my) = (m.x as isize, m.y as isize);
        for a in (mx - r).max(0)..=(mx + r).min(n as isize - 1) {
            for b in (my - r).max(0)..=(my + r).min(n as isize - 1) {
                let h = psf.at(a - mx, b - my);
                if h > 0.0 {
                    entries[a as usize * n + b as usize].push((j as u32, m.p * h));
                }
            }
        }
    }
    Ok(DetectionField {
        n,
        n_molecules: gt.molecules.len(),
        entries,
    })
}

impl DetectionField {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_molecules(&self) -> usize {
        self.n_molecules
    }

    /// Detection probability of molecule `j` at pixel `i`.
    pub fn entry(&self, pixel: usize, molecule: usize) -> f64 {
        self.entries[pixel]
            .iter()
            .find(|(j, _)| *j as usize == molecule)
            .map_or(0.0, |&(_, e)| e)
    }

    /// Nonzero detection probabilities at a pixel, in molecule order.
    pub fn eps_at(&self, pixel: usize) -> impl Iterator<Item = f64> + '_ {
        self.entries[pixel].iter().map(|&(_, e)| e)
    }

    /// Probability of at least one detected photon, `1 - prod(1 - eps_j)`.
    pub fn detection_rate(&self, pixel: usize) -> f64 {
        1.0 - self.eps_at(pixel).map(|e| 1.0 - e).product::<f64>()
    }

    /// Largest single-molecule detection probability at each pixel.
    pub fn gamma(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|v| v.iter().map(|&(_, e)| e).fold(0.0, f64::max))
            .collect()
    }

    /// Exact power sums `s_k = sum_j eps_j^k` for `k = 1..=kmax` at a pixel.
    pub fn power_sums_at(&self, pixel: usize, kmax: usize) -> Vec<f64> {
        (1..=kmax)
            .map(|k| self.eps_at(pixel).map(|e| e.powi(k as i32)).sum())
            .collect()
    }
}

/// Location-independent PSF power sums `H_l = sum_i h(x_i)^l`, `l = 1..=lmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfPowerSums(pub Vec<f64>);

impl PsfPowerSums {
    /// `H_l` for `l >= 1`.
    pub fn get(&self, l: usize) -> f64 {
        self.0[l - 1]
    }
}

pub fn psf_power_sums(psf: &Psf, lmax: usize) -> Result<PsfPowerSums> {
    if lmax < 2 {
        return Err(invalid(format!("lmax must be >= 2, got {lmax}")));
    }
    Ok(PsfPowerSums(
        (1..=lmax)
            .map(|l| psf.kernel().iter().map(|v| v.powi(l as i32)).sum())
            .collect(),
    ))
}
