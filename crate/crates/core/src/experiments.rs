//! Replicate studies on single clusters, cluster pairs and the full pipeline.
//!
//! Every study is deterministic given its seed: replicate `r` draws its image
//! from `derive_seed(seed, r)`, and replicates run in parallel but are
//! collected in order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::counting::{confidence_intervals, estimate_counts, EnlargedRegion, UNBOUNDED};
use crate::error::{Error, Result};
use crate::image::quantile;
use crate::model::{psf_power_sums, GroundTruth, Psf, PsfMode, PsfPowerSums};
use crate::phantom::{single_cluster, two_clusters};
use crate::pipeline::Pipeline;
use crate::simulate::{derive_seed, expected_image, sample_image, CoincidenceImage, ExpectedImage};
use crate::transform::Transform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Figure4,
    Figure5,
    Figure6,
    Figure7,
    Coverage,
    Clt,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "figure4" => Experiment::Figure4,
            "figure5" => Experiment::Figure5,
            "figure6" => Experiment::Figure6,
            "figure7" => Experiment::Figure7,
            "coverage" => Experiment::Coverage,
            "clt" => Experiment::Clt,
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment '{other}' (expected figure4, figure5, figure6, figure7, coverage or clt)"
                )))
            }
        })
    }
}

/// An isolated stack of identical molecules in the middle of an `n x n` image,
/// observed in confocal mode without background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterScene {
    pub n: usize,
    pub fwhm: f64,
    pub p: f64,
    pub md: usize,
}

impl Default for ClusterScene {
    fn default() -> Self {
        ClusterScene {
            n: 32,
            fwhm: 4.0,
            p: 0.02,
            md: 4,
        }
    }
}

struct Prepared {
    expected: ExpectedImage,
    h: PsfPowerSums,
    whole: Vec<EnlargedRegion>,
}

impl ClusterScene {
    fn prepare(&self, count: usize) -> Result<Prepared> {
        let psf = Psf::gaussian(self.fwhm, PsfMode::Confocal)?;
        if self.n < psf.support() {
            return Err(Error::Config(format!("scene size {} is below the PSF support {}", self.n, psf.support())));
        }
        let gt = single_cluster(self.n, (self.n / 2, self.n / 2), count, self.p)?;
        let expected = expected_image(&gt, &psf, self.md, 0.0)?;
        let h = psf_power_sums(&psf, self.md)?;
        let whole = vec![EnlargedRegion::exact(1, (0..self.n * self.n).collect())];
        Ok(Prepared { expected, h, whole })
    }
}

fn replicate(expected: &ExpectedImage, t: u64, seed: u64, r: usize) -> Result<CoincidenceImage> {
    sample_image(expected, t, derive_seed(seed, r as u64))
}

/// Fixed-width histogram over `[lo, hi]`; values outside fall in the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins spanning the 0.5% to 99.5% quantiles of the finite values.
    pub fn of(values: &[f64], bins: usize) -> Result<Histogram> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite() && *v < UNBOUNDED).collect();
        if finite.is_empty() || bins == 0 {
            return Ok(Histogram { lo: 0.0, hi: 0.0, counts: vec![0; bins] });
        }
        let lo = quantile(&finite, 0.005)?;
        let mut hi = quantile(&finite, 0.995)?;
        if hi <= lo {
            hi = lo + 1.0;
        }
        let mut counts = vec![0; bins];
        for v in values {
            let f = ((v.min(hi) - lo) / (hi - lo) * bins as f64).floor();
            counts[(f.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Ok(Histogram { lo, hi, counts })
    }

    fn rows(&self, label: &str, out: &mut String) {
        let w = (self.hi - self.lo) / self.counts.len().max(1) as f64;
        for (i, c) in self.counts.iter().enumerate() {
            let a = self.lo + i as f64 * w;
            let _ = writeln!(out, "{label},{a},{},{c}", a + w);
        }
    }
}

fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn sd(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn header(hash: Option<&str>) -> String {
    match hash {
        Some(h) => format!("# config_hash={h}\n"),
        None => String::new(),
    }
}

fn write_file(dir: &Path, name: &str, body: String) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

// ---------------------------------------------------------------- figure 4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure4Params {
    pub scene: ClusterScene,
    pub count: usize,
    pub t: u64,
    pub reps: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for Figure4Params {
    fn default() -> Self {
        Figure4Params {
            scene: ClusterScene::default(),
            count: 20,
            t: 10_000,
            reps: 300,
            bins: 40,
            seed: 4,
        }
    }
}

/// Image-wide power sums `S_l`, one row per replicate, with their true values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure4Result {
    pub truth: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl Figure4Result {
    pub fn order(&self, l: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[l - 1]).collect()
    }

    pub fn mean(&self, l: usize) -> f64 {
        mean(&self.order(l))
    }

    pub fn relative_bias(&self, l: usize) -> f64 {
        self.mean(l) / self.truth[l - 1] - 1.0
    }

    pub fn write(&self, dir: &Path, hash: Option<&str>, bins: usize) -> Result<Vec<PathBuf>> {
        let mut summary = header(hash);
        summary.push_str("order,truth,mean,sd,relative_bias\n");
        let mut hist = header(hash);
        hist.push_str("order,bin_lo,bin_hi,count\n");
        for l in 1..=self.truth.len() {
            let v = self.order(l);
            let _ = writeln!(summary, "{l},{},{},{},{}", self.truth[l - 1], mean(&v), sd(&v), self.relative_bias(l));
            Histogram::of(&v, bins)?.rows(&l.to_string(), &mut hist);
        }
        Ok(vec![
            write_file(dir, "figure4_summary.csv", summary)?,
            write_file(dir, "figure4_histograms.csv", hist)?,
        ])
    }
}

/// Raw `S_l = sum_i s_l(x_i)` over the whole image, no segmentation.
pub fn figure4(params: &Figure4Params) -> Result<Figure4Result> {
    let scene = &params.scene;
    let prep = scene.prepare(params.count)?;
    let tr = Transform::new(scene.md)?;
    let truth: Vec<f64> = (1..=scene.md)
        .map(|l| params.count as f64 * scene.p.powi(l as i32) * prep.h.get(l))
        .collect();
    let samples = (0..params.reps)
        .into_par_iter()
        .map(|r| {
            let img = replicate(&prep.expected, params.t, params.seed, r)?;
            let mut sums = vec![0.0; scene.md];
            for px in 0..scene.n * scene.n {
                let d = img.frequencies(px);
                let s = tr.inverse_unchecked(&d.0[1..]);
                for (acc, v) in sums.iter_mut().zip(&s.0) {
                    *acc += v;
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure4Result { truth, samples })
}

// ---------------------------------------------------------------- figure 5

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure5Params {
    pub scene: ClusterScene,
    pub count: usize,
    pub t: Vec<u64>,
    pub reps: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for Figure5Params {
    fn default() -> Self {
        Figure5Params {
            scene: ClusterScene::default(),
            count: 10,
            t: vec![1000, 10_000],
            reps: 300,
            bins: 40,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSeries {
    pub t: u64,
    pub n_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
}

impl EstimateSeries {
    pub fn median_n(&self) -> Result<f64> {
        median(&self.n_hat)
    }

    /// Share of replicates whose `N_hat * p_hat` is within `tol` (relative) of `target`.
    pub fn product_within(&self, target: f64, tol: f64) -> f64 {
        let hits = self
            .n_hat
            .iter()
            .zip(&self.p_hat)
            .filter(|(n, p)| **n < UNBOUNDED && ((*n * *p) / target - 1.0).abs() <= tol)
            .count();
        hits as f64 / self.n_hat.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure5Result {
    pub count: usize,
    pub p: f64,
    pub series: Vec<EstimateSeries>,
}

impl Figure5Result {
    pub fn write(&self, dir: &Path, hash: Option<&str>, bins: usize) -> Result<Vec<PathBuf>> {
        let mut reps = header(hash);
        reps.push_str("t,rep,N_hat,p_hat\n");
        let mut summary = header(hash);
        summary.push_str("t,median_N_hat,mean_p_hat,product_within_5pct,non_identified\n");
        let mut hist = header(hash);
        hist.push_str("quantity,bin_lo,bin_hi,count\n");
        let target = self.count as f64 * self.p;
        for s in &self.series {
            for (r, (n, p)) in s.n_hat.iter().zip(&s.p_hat).enumerate() {
                let _ = writeln!(reps, "{},{r},{n},{p}", s.t);
            }
            let unbounded = s.n_hat.iter().filter(|&&n| n >= UNBOUNDED).count();
            let _ = writeln!(
                summary,
                "{},{},{},{},{unbounded}",
                s.t,
                s.median_n()?,
                mean(&s.p_hat),
                s.product_within(target, 0.05)
            );
            Histogram::of(&s.n_hat, bins)?.rows(&format!("N_hat_t{}", s.t), &mut hist);
            Histogram::of(&s.p_hat, bins)?.rows(&format!("p_hat_t{}", s.t), &mut hist);
        }
        Ok(vec![
            write_file(dir, "figure5_replicates.csv", reps)?,
            write_file(dir, "figure5_summary.csv", summary)?,
            write_file(dir, "figure5_histograms.csv", hist)?,
        ])
    }
}

fn count_series(prep: &Prepared, t: u64, reps: usize, seed: u64) -> Result<EstimateSeries> {
    let est = (0..reps)
        .into_par_iter()
        .map(|r| {
            let img = replicate(&prep.expected, t, seed, r)?;
            let e = estimate_counts(&img, &prep.whole, &prep.h, 0.0)?;
            Ok((e[0].n_hat, e[0].p_hat))
        })
        .collect::<Result<Vec<_>>>()?;
    let (n_hat, p_hat) = est.into_iter().unzip();
    Ok(EstimateSeries { t, n_hat, p_hat })
}

/// Count and brightness estimates for one cluster, whole image as the region.
pub fn figure5(params: &Figure5Params) -> Result<Figure5Result> {
    let prep = params.scene.prepare(params.count)?;
    let series = params
        .t
        .iter()
        .enumerate()
        .map(|(i, &t)| count_series(&prep, t, params.reps, derive_seed(params.seed, 1 << 32 | i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure5Result {
        count: params.count,
        p: params.scene.p,
        series,
    })
}

// ---------------------------------------------------------------- figure 6

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure6Params {
    pub scene: ClusterScene,
    pub t: u64,
    pub pairs: Vec<(usize, usize)>,
    /// Centre distances in FWHMs, rounded to whole pixels.
    pub distances: Vec<f64>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for Figure6Params {
    fn default() -> Self {
        Figure6Params {
            scene: ClusterScene {
                n: 48,
                ..ClusterScene::default()
            },
            t: 3000,
            pairs: vec![(5, 5), (5, 20)],
            distances: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            reps: 300,
            alpha: 0.1,
            seed: 6,
        }
    }
}

/// Replicate means for one cluster at one distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub truth: usize,
    pub mean_n_hat: f64,
    pub mean_lower: f64,
    pub mean_upper: f64,
    /// Over all replicates, non-identified ones included.
    pub median_n_hat: f64,
    /// Replicates left out of the means because `S_2` was not positive.
    pub non_identified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure6Point {
    pub counts: (usize, usize),
    pub distance_fwhm: f64,
    pub distance_px: usize,
    pub clusters: [ClusterSummary; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure6Result {
    pub points: Vec<Figure6Point>,
}

impl Figure6Result {
    pub fn write(&self, dir: &Path, hash: Option<&str>) -> Result<Vec<PathBuf>> {
        let mut out = header(hash);
        out.push_str("N1,N2,distance_fwhm,distance_px,cluster,truth,mean_N_hat,mean_lower,mean_upper,median_N_hat,non_identified\n");
        for p in &self.points {
            for (k, c) in p.clusters.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    p.counts.0,
                    p.counts.1,
                    p.distance_fwhm,
                    p.distance_px,
                    k + 1,
                    c.truth,
                    c.mean_n_hat,
                    c.mean_lower,
                    c.mean_upper,
                    c.median_n_hat,
                    c.non_identified
                );
            }
        }
        Ok(vec![write_file(dir, "figure6.csv", out)?])
    }
}

/// Splits the image into the two half planes on either side of the midline
/// between columns `ya` and `yb`. An even gap leaves a midline column, which
/// alternates between the halves row by row.
pub fn half_planes(n: usize, ya: usize, yb: usize) -> [EnlargedRegion; 2] {
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for x in 0..n {
        for y in 0..n {
            let px = x * n + y;
            let twice = 2 * y;
            if twice < ya + yb || (twice == ya + yb && x % 2 == 0) {
                left.push(px);
            } else {
                right.push(px);
            }
        }
    }
    [EnlargedRegion::exact(1, left), EnlargedRegion::exact(2, right)]
}

fn summarise(truth: usize, rows: &[(f64, f64, f64)]) -> Result<ClusterSummary> {
    let ok: Vec<&(f64, f64, f64)> = rows.iter().filter(|r| r.0 < UNBOUNDED).collect();
    let avg = |f: fn(&(f64, f64, f64)) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len().max(1) as f64;
    let all: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(ClusterSummary {
        truth,
        mean_n_hat: avg(|r| r.0),
        mean_lower: avg(|r| r.1),
        mean_upper: avg(|r| r.2),
        median_n_hat: median(&all)?,
        non_identified: rows.len() - ok.len(),
    })
}

/// Two stacked clusters on one row, each counted on its half plane with
/// simultaneous intervals for the pair.
pub fn figure6(params: &Figure6Params) -> Result<Figure6Result> {
    let scene = &params.scene;
    let psf = Psf::gaussian(scene.fwhm, PsfMode::Confocal)?;
    let h = psf_power_sums(&psf, 2)?;
    let mut points = Vec::new();
    for (pi, &counts) in params.pairs.iter().enumerate() {
        for (di, &dist) in params.distances.iter().enumerate() {
            let d = (dist * scene.fwhm).round().max(1.0) as usize;
            let (gt, ya, yb) = two_clusters(scene.n, counts, d, scene.p)?;
            let expected = expected_image(&gt, &psf, scene.md, 0.0)?;
            let regions = half_planes(scene.n, ya, yb);
            let seed = derive_seed(params.seed, ((pi as u64) << 32) | di as u64);
            let rows = (0..params.reps)
                .into_par_iter()
                .map(|r| {
                    let img = replicate(&expected, params.t, seed, r)?;
                    let raw = estimate_counts(&img, &regions, &h, 0.0)?;
                    let ci = confidence_intervals(&raw, &img, &regions, &h, 0.0, params.alpha, 2, false)?;
                    Ok([(ci[0].n_hat, ci[0].ci[0], ci[0].ci[1]), (ci[1].n_hat, ci[1].ci[0], ci[1].ci[1])])
                })
                .collect::<Result<Vec<_>>>()?;
            let a: Vec<_> = rows.iter().map(|r| r[0]).collect();
            let b: Vec<_> = rows.iter().map(|r| r[1]).collect();
            points.push(Figure6Point {
                counts,
                distance_fwhm: dist,
                distance_px: d,
                clusters: [summarise(counts.0, &a)?, summarise(counts.1, &b)?],
            });
        }
    }
    Ok(Figure6Result { points })
}

// ---------------------------------------------------------------- figure 7

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure7Params {
    pub scene: ClusterScene,
    pub t: u64,
    pub md: Vec<usize>,
    pub counts: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for Figure7Params {
    fn default() -> Self {
        Figure7Params {
            scene: ClusterScene::default(),
            t: 20_000,
            md: vec![4, 6, 8],
            counts: vec![10, 20, 40, 60, 80, 100, 150, 200],
            reps: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure7Point {
    pub md: usize,
    pub count: usize,
    pub median_n_hat: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Figure7Point {
    pub fn relative_bias(&self) -> f64 {
        self.median_n_hat / self.count as f64 - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure7Result {
    pub points: Vec<Figure7Point>,
}

impl Figure7Result {
    pub fn point(&self, md: usize, count: usize) -> Option<&Figure7Point> {
        self.points.iter().find(|p| p.md == md && p.count == count)
    }

    pub fn write(&self, dir: &Path, hash: Option<&str>) -> Result<Vec<PathBuf>> {
        let mut out = header(hash);
        out.push_str("md,N,median_N_hat,q25,q75,relative_bias\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{},{}", p.md, p.count, p.median_n_hat, p.q25, p.q75, p.relative_bias());
        }
        Ok(vec![write_file(dir, "figure7.csv", out)?])
    }
}

/// Median count estimate against the true count for several detector numbers.
pub fn figure7(params: &Figure7Params) -> Result<Figure7Result> {
    let mut points = Vec::new();
    for &md in &params.md {
        let scene = ClusterScene { md, ..params.scene.clone() };
        for &count in &params.counts {
            let prep = scene.prepare(count)?;
            let seed = derive_seed(params.seed, ((md as u64) << 32) | count as u64);
            let s = count_series(&prep, params.t, params.reps, seed)?;
            points.push(Figure7Point {
                md,
                count,
                median_n_hat: s.median_n()?,
                q25: quantile(&s.n_hat, 0.25)?,
                q75: quantile(&s.n_hat, 0.75)?,
            });
        }
    }
    Ok(Figure7Result { points })
}

// ---------------------------------------------------------------- coverage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageParams {
    pub reps: usize,
    pub seed: u64,
}

impl Default for CoverageParams {
    fn default() -> Self {
        CoverageParams { reps: 300, seed: 9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReplicate {
    pub rep: usize,
    pub segments: usize,
    pub missed: usize,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub molecules: usize,
    pub replicates: Vec<CoverageReplicate>,
}

impl CoverageResult {
    pub fn fraction(&self) -> f64 {
        self.replicates.iter().filter(|r| r.covered).count() as f64 / self.replicates.len().max(1) as f64
    }

    /// Binomial standard error of [`fraction`](Self::fraction).
    pub fn mc_error(&self) -> f64 {
        let f = self.fraction();
        (f * (1.0 - f) / self.replicates.len().max(1) as f64).sqrt()
    }

    pub fn write(&self, dir: &Path, hash: Option<&str>) -> Result<Vec<PathBuf>> {
        let mut reps = header(hash);
        reps.push_str("rep,segments,missed,covered\n");
        for r in &self.replicates {
            let _ = writeln!(reps, "{},{},{},{}", r.rep, r.segments, r.missed, r.covered);
        }
        let mut summary = header(hash);
        summary.push_str("replicates,molecules,joint_coverage,mc_error\n");
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            self.replicates.len(),
            self.molecules,
            self.fraction(),
            self.mc_error()
        );
        Ok(vec![
            write_file(dir, "coverage_replicates.csv", reps)?,
            write_file(dir, "coverage_summary.csv", summary)?,
        ])
    }
}

/// Full pipeline on a fixed ground truth with fresh noise per replicate.
/// A replicate is covered when every interval of its map holds the true count.
pub fn coverage(pipeline: &Pipeline, params: &CoverageParams) -> Result<CoverageResult> {
    let gt = pipeline.ground_truth_checked()?;
    coverage_on(pipeline, &gt, params)
}

pub fn coverage_on(pipeline: &Pipeline, gt: &GroundTruth, params: &CoverageParams) -> Result<CoverageResult> {
    let expected = pipeline.expected(gt)?;
    let scanner = pipeline.scanner(gt.n)?;
    let cal = pipeline.calibration(&scanner, gt.n)?;
    let replicates = (0..params.reps)
        .into_par_iter()
        .map(|r| {
            let run = pipeline.run_once(gt, &expected, &scanner, &cal, derive_seed(params.seed, r as u64))?;
            let missed = run
                .map
                .segments
                .iter()
                .filter(|s| s.truth.is_some_and(|k| !(s.ci[0] <= k as f64 && k as f64 <= s.ci[1])))
                .count();
            Ok(CoverageReplicate {
                rep: r,
                segments: run.map.segments.len(),
                missed,
                covered: missed == 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageResult {
        molecules: gt.molecules.len(),
        replicates,
    })
}

// ---------------------------------------------------------------- CLT shape

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltParams {
    pub scene: ClusterScene,
    pub count: usize,
    pub t: u64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for CltParams {
    fn default() -> Self {
        CltParams {
            scene: ClusterScene::default(),
            count: 10,
            t: 10_000,
            reps: 500,
            seed: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltResult {
    /// `sqrt(t) (N_hat - N) / sigma_hat`, with `sigma_hat` plugged in per replicate.
    pub z: Vec<f64>,
    pub ks: f64,
}

impl CltResult {
    pub fn write(&self, dir: &Path, hash: Option<&str>) -> Result<Vec<PathBuf>> {
        let mut out = header(hash);
        out.push_str("rep,z\n");
        for (r, z) in self.z.iter().enumerate() {
            let _ = writeln!(out, "{r},{z}");
        }
        let mut summary = header(hash);
        summary.push_str("replicates,ks_distance,median_z,q05,q95\n");
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            self.z.len(),
            self.ks,
            median(&self.z)?,
            quantile(&self.z, 0.05)?,
            quantile(&self.z, 0.95)?
        );
        Ok(vec![
            write_file(dir, "clt_replicates.csv", out)?,
            write_file(dir, "clt_summary.csv", summary)?,
        ])
    }
}

/// Kolmogorov distance between the empirical distribution of `values` and N(0, 1).
pub fn ks_distance_normal(values: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / m).max((i + 1) as f64 / m - f)
        })
        .fold(0.0, f64::max)
}

pub fn clt(params: &CltParams) -> Result<CltResult> {
    let prep = params.scene.prepare(params.count)?;
    let root_t = (params.t as f64).sqrt();
    let z = (0..params.reps)
        .into_par_iter()
        .map(|r| {
            let img = replicate(&prep.expected, params.t, params.seed, r)?;
            let raw = estimate_counts(&img, &prep.whole, &prep.h, 0.0)?;
            // alpha only shapes the interval, not sigma
            let ci = confidence_intervals(&raw, &img, &prep.whole, &prep.h, 0.0, 0.05, 1, false)?;
            let e = &ci[0];
            if e.n_hat >= UNBOUNDED || !(e.sigma > 0.0) {
                // a non-identified replicate sits at the far right of any N(0, 1)
                return Ok(f64::INFINITY);
            }
            Ok(root_t * (e.n_hat - params.count as f64) / e.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let ks = ks_distance_normal(&z);
    Ok(CltResult { z, ks })
}

/// Parameters of every study, as carried in the pipeline configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsConfig {
    pub figure4: Figure4Params,
    pub figure5: Figure5Params,
    pub figure6: Figure6Params,
    pub figure7: Figure7Params,
    pub coverage: CoverageParams,
    pub clt: CltParams,
}

/// Runs one study and writes its CSV files into `dir`.
pub fn run_experiment(which: Experiment, pipeline: &Pipeline, dir: &Path) -> Result<Vec<PathBuf>> {
    let e = &pipeline.config.experiments;
    let hash = Some(pipeline.hash.as_str());
    match which {
        Experiment::Figure4 => figure4(&e.figure4)?.write(dir, hash, e.figure4.bins),
        Experiment::Figure5 => figure5(&e.figure5)?.write(dir, hash, e.figure5.bins),
        Experiment::Figure6 => figure6(&e.figure6)?.write(dir, hash),
        Experiment::Figure7 => figure7(&e.figure7)?.write(dir, hash),
        Experiment::Coverage => coverage(pipeline, &e.coverage)?.write(dir, hash),
        Experiment::Clt => clt(&e.clt)?.write(dir, hash),
    }
}

pub(crate) fn check_params(e: &ExperimentsConfig) -> Result<()> {
    let scenes = [&e.figure4.scene, &e.figure5.scene, &e.figure6.scene, &e.figure7.scene, &e.clt.scene];
    for s in scenes {
        if !(s.fwhm > 0.0) || !(s.p > 0.0 && s.p < 1.0) || !(2..=8).contains(&s.md) || s.n == 0 {
            return Err(Error::Config("experiment scene needs fwhm > 0, p in (0, 1), md in [2, 8]".into()));
        }
    }
    if e.figure7.md.iter().any(|md| !(2..=8).contains(md)) {
        return Err(Error::Config("figure7 md values must lie in [2, 8]".into()));
    }
    if !(e.figure6.alpha > 0.0 && e.figure6.alpha < 1.0) {
        return Err(Error::Config("figure6 alpha must lie in (0, 1)".into()));
    }
    if [e.figure4.reps, e.figure5.reps, e.figure6.reps, e.figure7.reps, e.coverage.reps, e.clt.reps].contains(&0) {
        return Err(Error::Config("experiments need at least one replicate".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!("figure6".parse::<Experiment>().unwrap(), Experiment::Figure6);
        assert!(matches!("figure9".parse::<Experiment>(), Err(Error::Config(_))));
    }

    #[test]
    fn half_planes_partition_the_image() {
        for (ya, yb) in [(10, 14), (10, 13)] {
            let [a, b] = half_planes(24, ya, yb);
            assert_eq!(a.pixels.len() + b.pixels.len(), 24 * 24);
            assert!(a.pixels.contains(&(5 * 24 + ya)) && b.pixels.contains(&(5 * 24 + yb)));
            let mut all: Vec<usize> = a.pixels.iter().chain(&b.pixels).copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 24 * 24);
        }
        // even gap: midline column alternates
        let [a, _] = half_planes(24, 10, 14);
        assert!(a.pixels.contains(&12) && !a.pixels.contains(&(24 + 12)));
    }

    #[test]
    fn ks_of_normal_quantiles_is_small() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v: Vec<f64> = (0..1000).map(|i| normal.inverse_cdf((i as f64 + 0.5) / 1000.0)).collect();
        assert!((ks_distance_normal(&v) - 0.0005).abs() < 1e-6);
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        assert!((ks_distance_normal(&shifted) - (normal.cdf(0.5) - normal.cdf(-0.5))).abs() < 0.01);
    }

    #[test]
    fn histogram_keeps_every_value() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).chain([UNBOUNDED, -1e9]).collect();
        let h = Histogram::of(&v, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), v.len());
    }

    #[test]
    fn small_figure4_is_deterministic() {
        let p = Figure4Params { reps: 4, ..Default::default() };
        let a = figure4(&p).unwrap();
        assert_eq!(a, figure4(&p).unwrap());
        assert_eq!(a.truth.len(), 4);
        assert!((a.truth[0] - 20.0 * 0.02 * psf_power_sums(&Psf::gaussian(4.0, PsfMode::Confocal).unwrap(), 2).unwrap().get(1)).abs() < 1e-12);
    }
}
