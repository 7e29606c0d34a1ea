//! Built-in ground truths: compact clusters on a jittered grid and
//! curvilinear filaments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{GroundTruth, Molecule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClustersParams {
    pub n: usize,
    /// Grid cells per axis; one candidate cluster per cell.
    pub cells: (usize, usize),
    /// Probability that a cell holds a cluster.
    pub occupancy: f64,
    /// Cluster centres move up to this many pixels off the cell centre.
    pub jitter: f64,
    pub min_count: usize,
    pub max_count: usize,
    /// Standard deviation of molecule positions around the centre, in pixels.
    pub spread: f64,
    pub brightness: (f64, f64),
}

impl Default for ClustersParams {
    fn default() -> Self {
        ClustersParams {
            n: 64,
            cells: (4, 5),
            occupancy: 0.9,
            jitter: 1.5,
            min_count: 1,
            max_count: 10,
            spread: 0.5,
            brightness: (0.015, 0.025),
        }
    }
}

/// Clusters of molecules sharing one brightness, laid out on a jittered grid.
pub fn clusters(params: &ClustersParams, seed: u64) -> Result<GroundTruth> {
    let ClustersParams { n, cells, .. } = *params;
    if n == 0 || cells.0 == 0 || cells.1 == 0 || params.min_count > params.max_count {
        return Err(invalid("cluster phantom needs n, cells >= 1 and min_count <= max_count"));
    }
    if !(params.brightness.0 > 0.0 && params.brightness.0 <= params.brightness.1 && params.brightness.1 < 1.0) {
        return Err(invalid("brightness range must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, params.spread.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let clamp = |v: f64| v.round().clamp(0.0, (n - 1) as f64) as usize;
    let (cx, cy) = (n as f64 / cells.0 as f64, n as f64 / cells.1 as f64);
    let mut molecules = Vec::new();
    for i in 0..cells.0 {
        for j in 0..cells.1 {
            if !rng.random_bool(params.occupancy.clamp(0.0, 1.0)) {
                continue;
            }
            let x0 = (i as f64 + 0.5) * cx + rng.random_range(-1.0..=1.0) * params.jitter;
            let y0 = (j as f64 + 0.5) * cy + rng.random_range(-1.0..=1.0) * params.jitter;
            let count = rng.random_range(params.min_count..=params.max_count);
            let p = rng.random_range(params.brightness.0..=params.brightness.1);
            for _ in 0..count {
                let x = clamp(x0 + spread.sample(&mut rng));
                let y = clamp(y0 + spread.sample(&mut rng));
                molecules.push(Molecule { x, y, p });
            }
        }
    }
    GroundTruth::new(n, molecules)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilamentsParams {
    pub n: usize,
    pub filaments: usize,
    /// Steps per walk; each step advances one pixel.
    pub length: usize,
    /// Standard deviation of the heading change per step, in radians.
    pub turn: f64,
    /// Place a molecule every this many steps.
    pub spacing: usize,
    pub brightness: f64,
}

impl Default for FilamentsParams {
    fn default() -> Self {
        FilamentsParams {
            n: 64,
            filaments: 4,
            length: 60,
            turn: 0.15,
            spacing: 2,
            brightness: 0.02,
        }
    }
}

/// Molecules along smoothed random walks. Walks reflect at the image border.
pub fn filaments(params: &FilamentsParams, seed: u64) -> Result<GroundTruth> {
    let n = params.n;
    if n < 2 || params.spacing == 0 || !(params.brightness > 0.0 && params.brightness < 1.0) {
        return Err(invalid("filament phantom needs n >= 2, spacing >= 1 and brightness in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn = Normal::new(0.0, params.turn.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let top = (n - 1) as f64;
    let mut molecules = Vec::new();
    for _ in 0..params.filaments {
        let (mut x, mut y) = (rng.random_range(0.0..top), rng.random_range(0.0..top));
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // turning rate itself drifts, which smooths the curvature
        let mut rate = 0.0;
        for step in 0..params.length {
            rate = 0.8 * rate + turn.sample(&mut rng);
            heading += rate;
            x += heading.cos();
            y += heading.sin();
            if !(0.0..=top).contains(&x) {
                x = x.clamp(0.0, top);
                heading = std::f64::consts::PI - heading;
            }
            if !(0.0..=top).contains(&y) {
                y = y.clamp(0.0, top);
                heading = -heading;
            }
            if step % params.spacing == 0 {
                molecules.push(Molecule {
                    x: x.round() as usize,
                    y: y.round() as usize,
                    p: params.brightness,
                });
            }
        }
    }
    GroundTruth::new(n, molecules)
}

/// `count` molecules stacked on one pixel.
pub fn single_cluster(n: usize, at: (usize, usize), count: usize, p: f64) -> Result<GroundTruth> {
    GroundTruth::new(n, vec![Molecule { x: at.0, y: at.1, p }; count])
}

/// Two stacked clusters on one row, `distance` pixels apart, centred in the image.
/// Returns the truth and the two column positions.
pub fn two_clusters(n: usize, counts: (usize, usize), distance: usize, p: f64) -> Result<(GroundTruth, usize, usize)> {
    if distance == 0 || distance >= n {
        return Err(invalid("cluster distance must lie in 1..n"));
    }
    let ya = (n - distance) / 2;
    let yb = ya + distance;
    let row = n / 2;
    let mut molecules = vec![Molecule { x: row, y: ya, p }; counts.0];
    molecules.extend(std::iter::repeat_n(Molecule { x: row, y: yb, p }, counts.1));
    Ok((GroundTruth::new(n, molecules)?, ya, yb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_are_deterministic_and_in_range() {
        let p = ClustersParams::default();
        let a = clusters(&p, 7).unwrap();
        assert_eq!(a, clusters(&p, 7).unwrap());
        assert_ne!(a, clusters(&p, 8).unwrap());
        let counts: Vec<usize> = (0..20).map(|s| clusters(&p, s).unwrap().molecules.len()).collect();
        assert!(counts.iter().all(|&c| (10..=200).contains(&c)));
        assert!(a.molecules.iter().all(|m| (0.015..=0.025).contains(&m.p)));
    }

    #[test]
    fn filaments_stay_on_grid() {
        let g = filaments(&FilamentsParams::default(), 3).unwrap();
        assert_eq!(g.molecules.len(), 4 * 30);
        g.validate().unwrap();
    }

    #[test]
    fn two_cluster_layout() {
        let (g, ya, yb) = two_clusters(48, (5, 20), 4, 0.02).unwrap();
        assert_eq!((ya, yb), (22, 26));
        assert_eq!(g.molecules.len(), 25);
        assert!(two_clusters(8, (1, 1), 8, 0.02).is_err());
    }
}
