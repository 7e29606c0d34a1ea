//! End-to-end workflow: simulate, segment the STED image, count on the
//! confocal image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counting::{
    build_molecular_map, confidence_intervals, enlarge_regions, estimate_background_with, estimate_counts,
    EnlargedRegion, MolecularMap, BACKGROUND_QUANTILE,
};
use crate::error::{Error, Result};
use crate::experiments::{check_params, ExperimentsConfig};
use crate::hybrid::{hybridize, RoiSet};
use crate::model::{psf_power_sums, GroundTruth, Psf, PsfMode};
use crate::phantom::{clusters, filaments, ClustersParams, FilamentsParams};
use crate::scan::{
    box_hash, build_box_system, calibrate_quantiles, default_scales, prune_minimal, select_significant, BoxSet,
    BoxSystem, ProbeBank, ScanCalibration, Stride,
};
use crate::simulate::{derive_seed, expected_image, sample_image, CoincidenceImage, ExpectedImage};
use crate::watershed::{watershed_with, Segmentation, WatershedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Clusters,
    Filaments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthSource {
    Phantom(PhantomKind),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanParams {
    /// Box side pairs; dyadic from the STED FWHM up to `n/4` when absent.
    pub scales: Option<Vec<(usize, usize)>>,
    pub stride: Stride,
    pub n_sim: usize,
    pub calibration_seed: u64,
    /// Reused when its key matches, written after a fresh calibration otherwise.
    pub calibration_file: Option<PathBuf>,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            scales: None,
            stride: Stride::Half,
            n_sim: 1000,
            calibration_seed: 0x5ca1_ab1e,
            calibration_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Low quantile of the smoothed confocal one-photon image.
    Estimate,
    /// The rate recorded in the confocal image.
    Known,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountingParams {
    /// Enlargement radius in confocal FWHMs.
    pub enlarge_fwhm: f64,
    pub background: BackgroundMode,
}

impl Default for CountingParams {
    fn default() -> Self {
        CountingParams {
            enlarge_fwhm: 1.0,
            background: BackgroundMode::Estimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ground_truth: GroundTruthSource,
    pub clusters: ClustersParams,
    pub filaments: FilamentsParams,
    pub phantom_seed: u64,
    pub confocal_fwhm: f64,
    pub sted_fwhm: f64,
    /// Pulses per confocal pixel. The default matches the per-molecule photon
    /// budget of 3000 pulses with a PSF eight times wider, i.e. the default
    /// cluster layout drawn on a 512 px frame.
    pub t_confocal: u64,
    pub t_sted: u64,
    pub md: usize,
    pub alpha: f64,
    /// Share of `alpha` spent on segmentation; `alpha / 2` when absent.
    pub alpha_seg: Option<f64>,
    pub confocal_background: f64,
    pub sted_background: f64,
    pub scan: ScanParams,
    pub watershed: WatershedParams,
    pub counting: CountingParams,
    pub experiments: ExperimentsConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ground_truth: GroundTruthSource::Phantom(PhantomKind::Clusters),
            clusters: ClustersParams::default(),
            filaments: FilamentsParams::default(),
            phantom_seed: 2,
            confocal_fwhm: 4.0,
            sted_fwhm: 1.0,
            t_confocal: 192_000,
            t_sted: 3000,
            md: 4,
            alpha: 0.1,
            alpha_seg: None,
            confocal_background: 0.0,
            sted_background: 5e-4,
            scan: ScanParams::default(),
            watershed: WatershedParams::default(),
            counting: CountingParams::default(),
            experiments: ExperimentsConfig::default(),
            seed: 1,
            out: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(s).map_err(|e| config_error(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_error(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        let seg = self.alpha_seg();
        if !(seg > 0.0 && seg < self.alpha) {
            return Err(config_error(format!("alpha_seg = {seg} must lie in (0, alpha)")));
        }
        if !(2..=8).contains(&self.md) {
            return Err(config_error(format!("md = {} outside [2, 8]", self.md)));
        }
        if !(self.confocal_fwhm > 0.0 && self.sted_fwhm > 0.0) {
            return Err(config_error("FWHMs must be positive"));
        }
        if self.sted_fwhm >= self.confocal_fwhm {
            return Err(config_error("STED FWHM must be smaller than the confocal FWHM"));
        }
        if self.t_confocal == 0 || self.t_sted == 0 {
            return Err(config_error("pulse counts must be positive"));
        }
        if !(self.confocal_background >= 0.0 && self.sted_background >= 0.0) {
            return Err(config_error("background rates must be nonnegative"));
        }
        if self.scan.n_sim == 0 {
            return Err(config_error("scan.n_sim must be positive"));
        }
        if !(self.counting.enlarge_fwhm >= 0.0) {
            return Err(config_error("counting.enlarge_fwhm must be nonnegative"));
        }
        check_params(&self.experiments)
    }

    pub fn alpha_seg(&self) -> f64 {
        self.alpha_seg.unwrap_or(self.alpha / 2.0)
    }

    /// sha256 of the canonical JSON form; output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        crate::hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        match &self.ground_truth {
            GroundTruthSource::Phantom(PhantomKind::Clusters) => clusters(&self.clusters, self.phantom_seed),
            GroundTruthSource::Phantom(PhantomKind::Filaments) => filaments(&self.filaments, self.phantom_seed),
            GroundTruthSource::File(path) => {
                let text = std::fs::read_to_string(path)?;
                GroundTruth::from_json_str(&text)
            }
        }
    }
}

/// Everything derived from a config that does not depend on the data.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
    pub psf_confocal: Psf,
    pub psf_sted: Psf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub selected: BoxSet,
    pub pruned: BoxSet,
    pub watershed: Segmentation,
    pub rois: RoiSet,
}

pub struct Counted {
    pub map: MolecularMap,
    pub regions: Vec<EnlargedRegion>,
    pub background: f64,
}

/// A scan set-up for one image size.
pub struct Scanner {
    pub bank: ProbeBank,
    pub system: BoxSystem,
    pub hash: String,
}

pub struct PipelineRun {
    pub ground_truth: GroundTruth,
    pub confocal: CoincidenceImage,
    pub sted: CoincidenceImage,
    pub segmentation: SegmentationResult,
    pub map: MolecularMap,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let psf_confocal = Psf::gaussian(config.confocal_fwhm, PsfMode::Confocal)?;
        let psf_sted = Psf::gaussian(config.sted_fwhm, PsfMode::Sted)?;
        Ok(Pipeline {
            hash: config.hash(),
            config,
            psf_confocal,
            psf_sted,
        })
    }

    /// Noise-free detector distributions of both acquisitions.
    pub fn expected(&self, gt: &GroundTruth) -> Result<(ExpectedImage, ExpectedImage)> {
        let c = &self.config;
        Ok((
            expected_image(gt, &self.psf_confocal, c.md, c.confocal_background)?,
            expected_image(gt, &self.psf_sted, c.md, c.sted_background)?,
        ))
    }

    /// Draws both acquisitions. Replicate `seed`s give independent noise.
    pub fn sample(&self, expected: &(ExpectedImage, ExpectedImage), seed: u64) -> Result<(CoincidenceImage, CoincidenceImage)> {
        let mut confocal = sample_image(&expected.0, self.config.t_confocal, derive_seed(seed, 0))?;
        let mut sted = sample_image(&expected.1, self.config.t_sted, derive_seed(seed, 1))?;
        confocal.config_hash = Some(self.hash.clone());
        sted.config_hash = Some(self.hash.clone());
        Ok((confocal, sted))
    }

    pub fn simulate(&self, gt: &GroundTruth, seed: u64) -> Result<(CoincidenceImage, CoincidenceImage)> {
        self.sample(&self.expected(gt)?, seed)
    }

    pub fn scanner(&self, n: usize) -> Result<Scanner> {
        let scales = self
            .config
            .scan
            .scales
            .clone()
            .unwrap_or_else(|| default_scales(n, self.config.sted_fwhm));
        let bank = ProbeBank::new(n, &self.psf_sted, &scales)?;
        let system = build_box_system(n, &scales, self.config.scan.stride)?;
        let hash = box_hash(&system, &bank);
        Ok(Scanner { bank, system, hash })
    }

    /// Loads the cached calibration when its key matches, otherwise
    /// simulates a fresh one (and caches it if a file is configured).
    pub fn calibration(&self, scanner: &Scanner, n: usize) -> Result<ScanCalibration> {
        let c = &self.config;
        let alpha = c.alpha_seg();
        if let Some(path) = &c.scan.calibration_file {
            if path.exists() {
                let cal = ScanCalibration::from_json_str(&std::fs::read_to_string(path)?)?;
                cal.check_key(n, c.t_sted, c.md, c.sted_background, &scanner.hash)?;
                return if cal.alpha == alpha { Ok(cal) } else { cal.with_alpha(alpha) };
            }
        }
        let cal = calibrate_quantiles(
            &scanner.bank,
            &scanner.system,
            c.t_sted,
            c.md,
            c.sted_background,
            alpha,
            c.scan.n_sim,
            c.scan.calibration_seed,
        )?;
        if let Some(path) = &c.scan.calibration_file {
            std::fs::write(path, cal.to_json_string()?)?;
        }
        Ok(cal)
    }

    pub fn segment(&self, sted: &CoincidenceImage, scanner: &Scanner, cal: &ScanCalibration) -> Result<SegmentationResult> {
        sted.validate()?;
        let selected = select_significant(sted, &scanner.bank, &scanner.system, cal)?;
        let pruned = prune_minimal(&selected);
        let ws = watershed_with(&sted.one_photon(), sted.n, &self.config.watershed)?;
        let mut rois = hybridize(&pruned, &ws)?;
        rois.config_hash = Some(self.hash.clone());
        Ok(SegmentationResult {
            selected,
            pruned,
            watershed: ws,
            rois,
        })
    }

    pub fn count(&self, confocal: &CoincidenceImage, rois: &RoiSet) -> Result<Counted> {
        confocal.validate()?;
        if confocal.n != rois.n {
            return Err(Error::Data(format!(
                "regions are on a {0}x{0} grid but the image is {1}x{1}",
                rois.n, confocal.n
            )));
        }
        let c = &self.config;
        let background = match c.counting.background {
            BackgroundMode::Estimate => estimate_background_with(confocal, c.confocal_fwhm, BACKGROUND_QUANTILE)?,
            BackgroundMode::Known => confocal.background_rate,
            BackgroundMode::Fixed(v) => v,
        };
        let regions = enlarge_regions(rois, c.counting.enlarge_fwhm * c.confocal_fwhm)?;
        let h = psf_power_sums(&self.psf_confocal, 2)?;
        let raw = estimate_counts(confocal, &regions, &h, background)?;
        let cis = if regions.is_empty() {
            Vec::new()
        } else {
            confidence_intervals(&raw, confocal, &regions, &h, background, c.alpha - c.alpha_seg(), regions.len(), true)?
        };
        let mut map = build_molecular_map(rois, &cis, c.alpha)?;
        map.set_counted(&regions)?;
        map.config_hash = Some(self.hash.clone());
        Ok(Counted { map, regions, background })
    }

    /// Simulates and analyses one replicate, with truth attached to the map.
    pub fn run_once(
        &self,
        gt: &GroundTruth,
        expected: &(ExpectedImage, ExpectedImage),
        scanner: &Scanner,
        cal: &ScanCalibration,
        seed: u64,
    ) -> Result<PipelineRun> {
        let (confocal, sted) = self.sample(expected, seed)?;
        let segmentation = self.segment(&sted, scanner, cal)?;
        let mut map = self.count(&confocal, &segmentation.rois)?.map;
        map.attach_truth(gt);
        Ok(PipelineRun {
            ground_truth: gt.clone(),
            confocal,
            sted,
            segmentation,
            map,
        })
    }

    pub fn run(&self) -> Result<PipelineRun> {
        let gt = self.ground_truth_checked()?;
        let expected = self.expected(&gt)?;
        let scanner = self.scanner(gt.n)?;
        let cal = self.calibration(&scanner, gt.n)?;
        self.run_once(&gt, &expected, &scanner, &cal, self.config.seed)
    }

    pub fn ground_truth_checked(&self) -> Result<GroundTruth> {
        let gt = self.config.ground_truth()?;
        if gt.n < self.psf_confocal.support() {
            return Err(config_error(format!(
                "image size {} is smaller than the confocal PSF support {}",
                gt.n,
                self.psf_confocal.support()
            )));
        }
        Ok(gt)
    }
}
