//! Synthetic coincidence data: per-pixel multinomial counts of active detectors.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{detection_field, GroundTruth, Psf, PsfMode};
use crate::transform::{exact_detector_distribution, DetectorProbabilities};

/// Counts `(Y^0, ..., Y^md)` per pixel: how often exactly `k` detectors fired
/// out of `t` pulses. Stored as `md + 1` row-major planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceImage {
    pub n: usize,
    pub md: usize,
    pub t: u64,
    pub mode: PsfMode,
    pub planes: Vec<Vec<u64>>,
    #[serde(default)]
    pub background_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CsvHeader {
    n: usize,
    md: usize,
    t: u64,
    mode: PsfMode,
    #[serde(default)]
    background_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl CoincidenceImage {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.md < 2 || self.t == 0 {
            return Err(Error::Data("image needs n >= 1, md >= 2, t >= 1".into()));
        }
        if self.planes.len() != self.md + 1 || self.planes.iter().any(|p| p.len() != self.n * self.n) {
            return Err(Error::Data(format!(
                "expected {} planes of {} pixels",
                self.md + 1,
                self.n * self.n
            )));
        }
        for i in 0..self.n * self.n {
            let total: u64 = self.planes.iter().map(|p| p[i]).sum();
            if total != self.t {
                return Err(Error::Data(format!("pixel {i}: counts sum to {total}, not t = {}", self.t)));
            }
        }
        Ok(())
    }

    pub fn counts_at(&self, pixel: usize) -> Vec<u64> {
        self.planes.iter().map(|p| p[pixel]).collect()
    }

    /// Relative frequencies `Y / t` at a pixel.
    pub fn frequencies(&self, pixel: usize) -> DetectorProbabilities {
        DetectorProbabilities::from_counts(&self.counts_at(pixel))
    }

    /// One-photon events per pixel as reals.
    pub fn one_photon(&self) -> Vec<f64> {
        self.planes[1].iter().map(|&v| v as f64).collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let img: CoincidenceImage = serde_json::from_str(s)?;
        img.validate()?;
        Ok(img)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// CSV sidecar: a `#`-prefixed JSON header line, a column line, then one
    /// row `x,y,Y0,...,Ymd` per pixel.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = CsvHeader {
            n: self.n,
            md: self.md,
            t: self.t,
            mode: self.mode,
            background_rate: self.background_rate,
            config_hash: self.config_hash.clone(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# {}", serde_json::to_string(&header)?)?;
        let cols: Vec<String> = (0..=self.md).map(|k| format!("Y{k}")).collect();
        writeln!(out, "x,y,{}", cols.join(","))?;
        for x in 0..self.n {
            for y in 0..self.n {
                let i = x * self.n + y;
                let row: Vec<String> = self.planes.iter().map(|p| p[i].to_string()).collect();
                writeln!(out, "{x},{y},{}", row.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let first = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))??;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Data("CSV lacks the JSON header line".into()))?;
        let h: CsvHeader = serde_json::from_str(json.trim())?;
        lines.next();
        let mut planes = vec![vec![0u64; h.n * h.n]; h.md + 1];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<u64> = line
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("bad CSV row '{line}': {e}")))?;
            if vals.len() != h.md + 3 {
                return Err(Error::Data(format!("CSV row '{line}' has {} fields", vals.len())));
            }
            let (x, y) = (vals[0] as usize, vals[1] as usize);
            if x >= h.n || y >= h.n {
                return Err(Error::Data(format!("CSV pixel ({x}, {y}) off the grid")));
            }
            for k in 0..=h.md {
                planes[k][x * h.n + y] = vals[k + 2];
            }
        }
        let img = CoincidenceImage {
            n: h.n,
            md: h.md,
            t: h.t,
            mode: h.mode,
            planes,
            background_rate: h.background_rate,
            config_hash: h.config_hash,
        };
        img.validate()?;
        Ok(img)
    }
}

/// Exact per-pixel detector distributions for a sample; reusable across
/// replicates with different seeds.
#[derive(Debug, Clone)]
pub struct ExpectedImage {
    pub n: usize,
    pub md: usize,
    pub mode: PsfMode,
    pub background_rate: f64,
    pub d: Vec<DetectorProbabilities>,
}

impl ExpectedImage {
    /// Expected counts `t * D_k` for one order `k`.
    pub fn expected_plane(&self, k: usize, t: u64) -> Vec<f64> {
        self.d.iter().map(|d| d.0[k] * t as f64).collect()
    }
}

/// Computes the exact detector distribution at every pixel, folding the
/// background in as one extra emitter with detection probability `background`.
pub fn expected_image(gt: &GroundTruth, psf: &Psf, md: usize, background: f64) -> Result<ExpectedImage> {
    gt.validate()?;
    if md < 2 {
        return Err(invalid(format!("need at least 2 detectors, got {md}")));
    }
    if !(0.0..1.0).contains(&background) {
        return Err(invalid(format!("background rate {background} outside [0, 1)")));
    }
    let field = detection_field(gt, psf)?;
    let d = (0..gt.n * gt.n)
        .into_par_iter()
        .map(|i| {
            let mut eps: Vec<f64> = field.eps_at(i).collect();
            if background > 0.0 {
                eps.push(background);
            }
            exact_detector_distribution(&eps, md)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpectedImage {
        n: gt.n,
        md,
        mode: psf.mode(),
        background_rate: background,
        d,
    })
}

/// Mixes a seed with an index (SplitMix64 finalizer) to derive child seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random source for one pixel: stream `pixel` of the generator keyed by `seed`.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// One multinomial draw of size `t` over `probs`, via sequential binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, t: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = t;
    let mut mass = 1.0;
    // Category 0 is usually dominant; draw the rare ones first and give 0 the rest.
    for k in 1..probs.len() {
        if remaining == 0 || mass <= 0.0 {
            break;
        }
        let p = (probs[k] / mass).clamp(0.0, 1.0);
        let y = if p <= 0.0 {
            0
        } else if p >= 1.0 {
            remaining
        } else {
            rng.sample(Binomial::new(remaining, p).expect("valid binomial parameters"))
        };
        out[k] = y;
        remaining -= y;
        mass -= probs[k];
    }
    out[0] = remaining;
    out
}

/// Draws a coincidence image from precomputed expectations.
pub fn sample_image(expected: &ExpectedImage, t: u64, seed: u64) -> Result<CoincidenceImage> {
    if t == 0 {
        return Err(invalid("t must be at least 1"));
    }
    let md = expected.md;
    let counts: Vec<Vec<u64>> = expected
        .d
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            if d.0[0] >= 1.0 {
                let mut c = vec![0; md + 1];
                c[0] = t;
                return c;
            }
            sample_multinomial(&mut pixel_rng(seed, i), t, &d.0)
        })
        .collect();
    let mut planes = vec![vec![0u64; counts.len()]; md + 1];
    for (i, c) in counts.iter().enumerate() {
        for k in 0..=md {
            planes[k][i] = c[k];
        }
    }
    Ok(CoincidenceImage {
        n: expected.n,
        md,
        t,
        mode: expected.mode,
        planes,
        background_rate: expected.background_rate,
        config_hash: None,
    })
}

pub fn simulate_image(
    gt: &GroundTruth,
    psf: &Psf,
    t: u64,
    md: usize,
    seed: u64,
    background_rate: f64,
) -> Result<CoincidenceImage> {
    if t == 0 {
        return Err(invalid("t must be at least 1"));
    }
    sample_image(&expected_image(gt, psf, md, background_rate)?, t, seed)
}

/// Confocal and STED acquisitions of the same sample with independent noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_pair_with_background(
    gt: &GroundTruth,
    psf_confocal: &Psf,
    psf_sted: &Psf,
    t_confocal: u64,
    t_sted: u64,
    md: usize,
    seed: u64,
    background: (f64, f64),
) -> Result<(CoincidenceImage, CoincidenceImage)> {
    if t_confocal == 0 || t_sted == 0 {
        return Err(invalid("both acquisitions need t >= 1"));
    }
    if psf_sted.fwhm_px() >= psf_confocal.fwhm_px() {
        return Err(invalid("STED PSF must be narrower than the confocal PSF"));
    }
    let confocal = simulate_image(gt, psf_confocal, t_confocal, md, derive_seed(seed, 0), background.0)?;
    let sted = simulate_image(gt, psf_sted, t_sted, md, derive_seed(seed, 1), background.1)?;
    Ok((confocal, sted))
}

pub fn simulate_pair(
    gt: &GroundTruth,
    psf_confocal: &Psf,
    psf_sted: &Psf,
    t_confocal: u64,
    t_sted: u64,
    md: usize,
    seed: u64,
) -> Result<(CoincidenceImage, CoincidenceImage)> {
    simulate_pair_with_background(gt, psf_confocal, psf_sted, t_confocal, t_sted, md, seed, (0.0, 0.0))
}

/// Photon-level reference sampler for one pixel: each emitter fires
/// independently, each photon picks a detector uniformly, and the number of
/// distinct detectors hit is recorded. Slow; meant for cross-checking.
pub fn simulate_pixel_by_photons<R: Rng + ?Sized>(rng: &mut R, eps: &[f64], md: usize, t: u64) -> Vec<u64> {
    let mut counts = vec![0u64; md + 1];
    let mut hit = vec![false; md];
    for _ in 0..t {
        hit.iter_mut().for_each(|h| *h = false);
        for &e in eps {
            if rng.random::<f64>() < e {
                hit[rng.random_range(0..md)] = true;
            }
        }
        counts[hit.iter().filter(|&&h| h).count()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Molecule;

    fn one_cluster(n: usize, count: usize, p: f64) -> GroundTruth {
        let c = n / 2;
        GroundTruth::new(n, vec![Molecule { x: c, y: c, p }; count]).unwrap()
    }

    #[test]
    fn empty_sample_gives_no_events() {
        let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let img = simulate_image(&GroundTruth::empty(8), &psf, 500, 4, 1, 0.0).unwrap();
        assert!(img.planes[0].iter().all(|&v| v == 500));
        assert!(img.planes[1..].iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn counts_sum_to_t_and_are_reproducible() {
        let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let gt = one_cluster(16, 20, 0.02);
        let a = simulate_image(&gt, &psf, 1000, 4, 7, 0.001).unwrap();
        a.validate().unwrap();
        let b = simulate_image(&gt, &psf, 1000, 4, 7, 0.001).unwrap();
        assert_eq!(a, b);
        let c = simulate_image(&gt, &psf, 1000, 4, 8, 0.001).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let gt = one_cluster(16, 5, 0.03);
        let a = simulate_image(&gt, &psf, 2000, 4, 3, 0.0).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_image(&gt, &psf, 2000, 4, 3, 0.0).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_pulses_rejected() {
        let c = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let s = Psf::gaussian(0.8, PsfMode::Sted).unwrap();
        let gt = one_cluster(8, 1, 0.02);
        assert!(simulate_pair(&gt, &c, &s, 100, 0, 4, 1).is_err());
        assert!(simulate_image(&gt, &c, 0, 4, 1, 0.0).is_err());
    }

    #[test]
    fn multinomial_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs = [0.7, 0.2, 0.1];
        let reps = 4000;
        let mut mean = [0.0; 3];
        for _ in 0..reps {
            let c = sample_multinomial(&mut rng, 100, &probs);
            assert_eq!(c.iter().sum::<u64>(), 100);
            for k in 0..3 {
                mean[k] += c[k] as f64 / reps as f64;
            }
        }
        for k in 0..3 {
            let se = (100.0 * probs[k] * (1.0 - probs[k]) / reps as f64).sqrt();
            assert!((mean[k] - 100.0 * probs[k]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn photon_oracle_agrees_with_exact_distribution() {
        let eps = [0.3, 0.2, 0.25, 0.1, 0.15];
        let d = exact_detector_distribution(&eps, 3).unwrap();
        let t = 200_000;
        let counts = simulate_pixel_by_photons(&mut ChaCha8Rng::seed_from_u64(5), &eps, 3, t);
        for k in 0..=3 {
            let p = d.0[k];
            let se = (p * (1.0 - p) / t as f64).sqrt();
            assert!((counts[k] as f64 / t as f64 - p).abs() < 4.0 * se, "order {k}");
        }
    }

    #[test]
    fn one_photon_rate_scales_with_brightness() {
        let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let base = expected_image(&one_cluster(16, 3, 0.01), &psf, 4, 0.0).unwrap();
        for c in [0.5, 2.0] {
            let scaled = expected_image(&one_cluster(16, 3, 0.01 * c), &psf, 4, 0.0).unwrap();
            let centre = 8 * 16 + 8;
            let ratio = scaled.d[centre].0[1] / base.d[centre].0[1];
            // first order in the brightness; the coincidence correction is O(p)
            assert!((ratio - c).abs() < 0.05 * c, "c = {c}: ratio {ratio}");
        }
    }

    #[test]
    fn sted_resolves_what_confocal_blurs() {
        use crate::image::gaussian_smooth;
        let n = 32;
        let gt = GroundTruth::new(
            n,
            vec![Molecule { x: 16, y: 14, p: 0.02 }, Molecule { x: 16, y: 18, p: 0.02 }],
        )
        .unwrap();
        let conf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
        let sted = Psf::gaussian(0.8, PsfMode::Sted).unwrap();
        let maxima = |psf: &Psf| {
            let e = expected_image(&gt, psf, 4, 0.0).unwrap().expected_plane(1, 1000);
            let s = gaussian_smooth(&e, n, psf.fwhm_px());
            let row = &s[16 * n..17 * n];
            (1..n - 1).filter(|&y| row[y] > row[y - 1] && row[y] > row[y + 1]).count()
        };
        assert_eq!(maxima(&sted), 2);
        assert_eq!(maxima(&conf), 1);
    }

    #[test]
    fn json_and_csv_round_trip() {
        let psf = Psf::gaussian(2.0, PsfMode::Sted).unwrap();
        let img = simulate_image(&one_cluster(6, 2, 0.1), &psf, 300, 3, 2, 0.0).unwrap();
        let back = CoincidenceImage::from_json_str(&img.to_json_string().unwrap()).unwrap();
        assert_eq!(back, img);
        let v: serde_json::Value = serde_json::from_str(&img.to_json_string().unwrap()).unwrap();
        assert_eq!(v["mode"], "sted");
        assert_eq!(v["planes"].as_array().unwrap().len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.csv");
        img.write_csv(&path).unwrap();
        assert_eq!(CoincidenceImage::read_csv(&path).unwrap(), img);
    }

    #[test]
    fn inconsistent_totals_rejected() {
        let mut img = CoincidenceImage {
            n: 1,
            md: 2,
            t: 10,
            mode: PsfMode::Confocal,
            planes: vec![vec![9], vec![0], vec![0]],
            background_rate: 0.0,
            config_hash: None,
        };
        assert!(img.validate().is_err());
        img.planes[1][0] = 1;
        img.validate().unwrap();
    }
}
