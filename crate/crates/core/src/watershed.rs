//! Marker-controlled watershed on the smoothed one-photon STED image.
//!
//! Bright areas are basins: the image is flooded from its h-maxima downwards
//! with a priority queue (Meyer's algorithm), 4-connected.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{gaussian_smooth, gaussian_taps, quantile, write_pgm16};

/// Disjoint labelled segments; label 0 marks unassigned pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub n: usize,
    pub labels: Vec<u32>,
    pub n_segments: usize,
}

impl Segmentation {
    pub fn from_labels(n: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != n * n {
            return Err(invalid("label map has the wrong size"));
        }
        let n_segments = labels.iter().copied().max().unwrap_or(0) as usize;
        Ok(Segmentation { n, labels, n_segments })
    }

    /// Pixel lists of segments `1..=n_segments`, index `k` holding label `k + 1`.
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_segments];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let v: Vec<u16> = self.labels.iter().map(|&l| l.min(u16::MAX as u32) as u16).collect();
        write_pgm16(path, self.n, &v, config_hash.map(|h| format!("config_hash={h}")).as_deref())
    }

    pub fn write_csv(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(h) = config_hash {
            writeln!(out, "# config_hash={h}")?;
        }
        writeln!(out, "x,y,label")?;
        for x in 0..self.n {
            for y in 0..self.n {
                writeln!(out, "{x},{y},{}", self.labels[x * self.n + y])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Foreground {
    /// Every pixel may be flooded.
    All,
    /// Smoothed intensity above a low-quantile background plus
    /// `FOREGROUND_SIGMAS` noise standard deviations.
    Auto,
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedParams {
    pub smooth_fwhm: f64,
    /// Minimal dynamic of a kept maximum; `None` uses `2 sqrt(max)`.
    pub hmin: Option<f64>,
    pub foreground: Foreground,
}

impl Default for WatershedParams {
    fn default() -> Self {
        WatershedParams {
            smooth_fwhm: 2.0,
            hmin: None,
            foreground: Foreground::Auto,
        }
    }
}

fn neighbors(i: usize, n: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i / n, i % n);
    [
        (x > 0).then(|| i - n),
        (y > 0).then(|| i - 1),
        (y + 1 < n).then(|| i + 1),
        (x + 1 < n).then(|| i + n),
    ]
    .into_iter()
    .flatten()
}

/// Grayscale reconstruction by dilation of `marker` under `mask`.
fn reconstruct(marker: &[f64], mask: &[f64], n: usize) -> Vec<f64> {
    let mut r: Vec<f64> = marker.iter().zip(mask).map(|(a, b)| a.min(*b)).collect();
    loop {
        let mut changed = false;
        for i in 0..n * n {
            let (x, y) = (i / n, i % n);
            let mut m = r[i];
            if x > 0 {
                m = m.max(r[i - n]);
            }
            if y > 0 {
                m = m.max(r[i - 1]);
            }
            let v = m.min(mask[i]);
            if v > r[i] {
                r[i] = v;
                changed = true;
            }
        }
        for i in (0..n * n).rev() {
            let (x, y) = (i / n, i % n);
            let mut m = r[i];
            if x + 1 < n {
                m = m.max(r[i + n]);
            }
            if y + 1 < n {
                m = m.max(r[i + 1]);
            }
            let v = m.min(mask[i]);
            if v > r[i] {
                r[i] = v;
                changed = true;
            }
        }
        if !changed {
            return r;
        }
    }
}

/// Connected plateaus of `f` inside `inside` with no strictly higher
/// in-mask neighbour, labelled `1..` in raster order of their first pixel.
fn regional_maxima(f: &[f64], inside: &[bool], n: usize) -> Vec<u32> {
    let mut labels = vec![0u32; n * n];
    let mut seen = vec![false; n * n];
    let mut next = 0u32;
    for start in 0..n * n {
        if seen[start] || !inside[start] {
            continue;
        }
        let level = f[start];
        let mut stack = vec![start];
        let mut plateau = Vec::new();
        let mut is_max = true;
        seen[start] = true;
        while let Some(p) = stack.pop() {
            plateau.push(p);
            for q in neighbors(p, n) {
                if !inside[q] {
                    continue;
                }
                if f[q] > level {
                    is_max = false;
                } else if f[q] == level && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        if is_max {
            next += 1;
            for p in plateau {
                labels[p] = next;
            }
        }
    }
    labels
}

#[derive(PartialEq)]
struct Entry {
    level: f64,
    order: Reverse<u64>,
    pixel: usize,
    label: u32,
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.level.total_cmp(&other.level).then(self.order.cmp(&other.order))
    }
}

/// Floods from the labelled markers in decreasing order of `f`. Each pixel
/// joins the basin that reached it first; ties resolve to the lower label
/// because markers are seeded in label order.
fn flood(f: &[f64], inside: &[bool], markers: &[u32], n: usize) -> Vec<u32> {
    let mut labels = markers.to_vec();
    let mut queued: Vec<bool> = markers.iter().map(|&l| l > 0).collect();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut seeds: Vec<usize> = (0..n * n).filter(|&i| markers[i] > 0).collect();
    seeds.sort_by_key(|&i| (markers[i], i));
    for p in seeds {
        for q in neighbors(p, n) {
            if inside[q] && !queued[q] {
                queued[q] = true;
                heap.push(Entry { level: f[q], order: Reverse(order), pixel: q, label: markers[p] });
                order += 1;
            }
        }
    }
    while let Some(Entry { pixel, label, .. }) = heap.pop() {
        labels[pixel] = label;
        for q in neighbors(pixel, n) {
            if inside[q] && !queued[q] {
                queued[q] = true;
                heap.push(Entry { level: f[q], order: Reverse(order), pixel: q, label });
                order += 1;
            }
        }
    }
    labels
}

/// `2 sqrt(max)` of the smoothed image.
pub fn default_hmin(smoothed: &[f64]) -> f64 {
    2.0 * smoothed.iter().copied().fold(0.0, f64::max).sqrt()
}

/// Noise standard deviations above background for the automatic mask.
pub const FOREGROUND_SIGMAS: f64 = 3.0;

/// Background (quarter quantile) plus `FOREGROUND_SIGMAS` standard deviations
/// of smoothed Poisson noise at that level, with the level floored at one count.
pub fn auto_foreground_threshold(smoothed: &[f64], smooth_fwhm: f64) -> Result<f64> {
    let bg = quantile(smoothed, 0.25)?;
    let taps = if smooth_fwhm > 0.0 { gaussian_taps(smooth_fwhm) } else { vec![1.0] };
    let g2: f64 = taps.iter().map(|v| v * v).sum::<f64>().powi(2);
    Ok(bg + FOREGROUND_SIGMAS * (bg.max(1.0) * g2).sqrt())
}

pub fn watershed_with(image: &[f64], n: usize, params: &WatershedParams) -> Result<Segmentation> {
    if image.len() != n * n {
        return Err(invalid("image size does not match n"));
    }
    if image.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("watershed input must be nonnegative"));
    }
    let f = gaussian_smooth(image, n, params.smooth_fwhm);
    let h = params.hmin.unwrap_or_else(|| default_hmin(&f));
    if !(h >= 0.0) {
        return Err(invalid(format!("hmin must be nonnegative, got {h}")));
    }
    let inside: Vec<bool> = match params.foreground {
        Foreground::All => vec![true; n * n],
        Foreground::Auto => {
            let thr = auto_foreground_threshold(&f, params.smooth_fwhm)?;
            f.iter().map(|&v| v > thr).collect()
        }
        Foreground::Threshold(thr) => f.iter().map(|&v| v > thr).collect(),
    };
    let lowered: Vec<f64> = f.iter().map(|v| v - h).collect();
    let hmax = reconstruct(&lowered, &f, n);
    let markers = regional_maxima(&hmax, &inside, n);
    let labels = flood(&f, &inside, &markers, n);
    Segmentation::from_labels(n, labels)
}

/// Watershed over the whole image (no foreground mask).
pub fn watershed(image: &[f64], n: usize, smooth_fwhm: f64, hmin: f64) -> Result<Segmentation> {
    watershed_with(
        image,
        n,
        &WatershedParams {
            smooth_fwhm,
            hmin: Some(hmin),
            foreground: Foreground::All,
        },
    )
}
