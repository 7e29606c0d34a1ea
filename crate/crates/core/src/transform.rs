//! Photon statistics of the coincidence detector.
//!
//! The number of photons emitted after one pulse is Poisson-binomial in the
//! per-molecule detection probabilities. Photons are split uniformly over
//! `md` detectors, and only the number of *active* detectors is observed.
//! [`Transform`] maps the power sums `s_k = sum_j eps_j^k` to the
//! active-detector distribution (a linear detector-splitting map composed
//! with a polynomial map through the iterated sums `S_k`) and inverts it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest order for which factorials are tabulated.
pub const MAX_ORDER: usize = 20;

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Stirling number of the second kind `S(j, i)`; zero when `i > j`.
///
/// Uses `S(j, i) = i S(j-1, i) + S(j-1, i-1)`. Panics on overflow of `u128`,
/// which first happens past `j = 50` or so.
pub fn stirling2(j: u32, i: u32) -> u128 {
    if i > j {
        return 0;
    }
    let (j, i) = (j as usize, i as usize);
    let mut row = vec![0u128; i + 1];
    row[0] = 1;
    for _ in 0..j {
        for k in (1..=i).rev() {
            row[k] = (k as u128)
                .checked_mul(row[k])
                .and_then(|v| v.checked_add(row[k - 1]))
                .expect("Stirling number overflows u128");
        }
        row[0] = 0;
    }
    row[i]
}

/// `w[i][j]`: probability that `j` photons activate exactly `i` of `md` detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorWeights {
    md: usize,
    jmax: usize,
    w: Vec<f64>,
}

impl DetectorWeights {
    pub fn md(&self) -> usize {
        self.md
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > self.md || j > self.jmax {
            return 0.0;
        }
        self.w[i * (self.jmax + 1) + j]
    }

    /// `sum_i w[i][j]`.
    pub fn column_sum(&self, j: usize) -> f64 {
        (0..=self.md).map(|i| self.get(i, j)).sum()
    }
}

/// Detector splitting weights for `md >= 2` detectors and photon orders up to `jmax`.
///
/// Built by the occupancy recurrence (one more photon either hits an active
/// detector, with probability `i/md`, or a fresh one), which equals
/// `S(j,i) (md-1)! / ((md-i)! md^(j-1))` without the large intermediate numbers.
pub fn detector_weights(md: usize, jmax: usize) -> Result<DetectorWeights> {
    if md < 2 {
        return Err(invalid(format!("need at least 2 detectors, got {md}")));
    }
    if jmax < md {
        return Err(invalid(format!("jmax ({jmax}) must be >= md ({md})")));
    }
    Ok(occupancy_weights(md, jmax))
}

// Same as `detector_weights` but allows `jmax < md` (few photons at a pixel).
fn occupancy_weights(md: usize, jmax: usize) -> DetectorWeights {
    let stride = jmax + 1;
    let mut w = vec![0.0; (md + 1) * stride];
    w[0] = 1.0;
    let m = md as f64;
    for j in 0..jmax {
        for i in 0..=md.min(j) {
            let p = w[i * stride + j];
            if p == 0.0 {
                continue;
            }
            w[i * stride + j + 1] += p * (i as f64 / m);
            if i < md {
                w[(i + 1) * stride + j + 1] += p * ((md - i) as f64 / m);
            }
        }
    }
    DetectorWeights { md, jmax, w }
}

/// Distribution `(Q'_0, ..., Q'_N)` of the number of emitted photons.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionDistribution(pub Vec<f64>);

/// Poisson-binomial distribution by folding in one Bernoulli trial at a time.
pub fn poisson_binomial(eps: &[f64]) -> Result<EmissionDistribution> {
    let mut q = Vec::with_capacity(eps.len() + 1);
    q.push(1.0);
    for &e in eps {
        if !(0.0..1.0).contains(&e) {
            return Err(invalid(format!("emission probability {e} outside [0, 1)")));
        }
        q.push(0.0);
        for k in (1..q.len()).rev() {
            q[k] = q[k] * (1.0 - e) + q[k - 1] * e;
        }
        q[0] *= 1.0 - e;
    }
    Ok(EmissionDistribution(q))
}

/// Power sums `(s_1, ..., s_m)` at one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSums(pub Vec<f64>);

impl PowerSums {
    pub fn from_eps(eps: &[f64], m: usize) -> Self {
        PowerSums(
            (1..=m)
                .map(|k| eps.iter().map(|e| e.powi(k as i32)).sum())
                .collect(),
        )
    }

    pub fn zeros(m: usize) -> Self {
        PowerSums(vec![0.0; m])
    }

    /// `s_k`, one-based.
    pub fn get(&self, k: usize) -> f64 {
        self.0[k - 1]
    }
}

/// Active-detector probabilities `(D_0, ..., D_md)` at one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProbabilities(pub Vec<f64>);

impl DetectorProbabilities {
    pub fn md(&self) -> usize {
        self.0.len() - 1
    }

    /// Relative frequencies of the observed counts.
    pub fn from_counts(counts: &[u64]) -> Self {
        let t: u64 = counts.iter().sum();
        DetectorProbabilities(counts.iter().map(|&c| c as f64 / t as f64).collect())
    }
}

/// Iterated sums `S_1..=S_kmax` over distinct ordered index tuples, from power sums.
pub fn iterated_sums(s: &PowerSums, kmax: usize) -> Result<Vec<f64>> {
    if kmax > s.0.len() {
        return Err(invalid(format!(
            "kmax {kmax} exceeds the {} available power sums",
            s.0.len()
        )));
    }
    let mut big = vec![1.0; kmax + 1];
    for k in 1..=kmax {
        let mut acc = 0.0;
        let mut ratio = 1.0; // (k-1)!/(k-j)!
        for j in 1..=k {
            if j > 1 {
                ratio *= (k - j + 1) as f64;
            }
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            acc += sign * ratio * s.0[j - 1] * big[k - j];
        }
        big[k] = acc;
    }
    big.remove(0);
    Ok(big)
}

/// Inverse of [`iterated_sums`]. Requires `S_1 > 0` whenever `kmax >= 2`.
pub fn power_sums_from_iterated(big: &[f64], kmax: usize) -> Result<PowerSums> {
    if kmax > big.len() {
        return Err(invalid("kmax exceeds the available iterated sums"));
    }
    if kmax >= 2 && !(big[0] > 0.0) {
        return Err(Error::NonInvertible(format!("S_1 = {} is not positive", big[0])));
    }
    Ok(power_sums_unchecked(big, kmax))
}

fn power_sums_unchecked(big: &[f64], kmax: usize) -> PowerSums {
    let iter = |k: usize| if k == 0 { 1.0 } else { big[k - 1] };
    let mut s = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let mut rest = 0.0;
        let mut ratio = 1.0;
        for j in 1..k {
            if j > 1 {
                ratio *= (k - j + 1) as f64;
            }
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            rest += sign * ratio * s[j - 1] * iter(k - j);
        }
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let lead = sign * factorial(k - 1);
        s.push((big[k - 1] - rest) / lead);
    }
    PowerSums(s)
}

/// The map from power sums to active-detector probabilities for `md` detectors,
/// truncated at photon order `md`, together with its inverse.
#[derive(Debug, Clone)]
pub struct Transform {
    md: usize,
    weights: DetectorWeights,
    fact: Vec<f64>,
}

impl Transform {
    pub fn new(md: usize) -> Result<Self> {
        if md > MAX_ORDER {
            return Err(invalid(format!("md = {md} exceeds the supported order {MAX_ORDER}")));
        }
        let weights = detector_weights(md, md)?;
        Ok(Transform {
            md,
            weights,
            fact: (0..=md).map(factorial).collect(),
        })
    }

    pub fn md(&self) -> usize {
        self.md
    }

    pub fn weights(&self) -> &DetectorWeights {
        &self.weights
    }

    /// Truncated emission probabilities `Q~_1..=Q~_md` from iterated sums.
    fn emission_from_iterated(&self, big: &[f64]) -> Vec<f64> {
        let md = self.md;
        (1..=md)
            .map(|k| {
                let mut acc = 0.0;
                for j in 0..=md - k {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign / self.fact[j] * big[j + k - 1];
                }
                acc / self.fact[k]
            })
            .collect()
    }

    /// `D = A g(s)`; `D_0` closes the distribution.
    pub fn forward(&self, s: &PowerSums) -> Result<DetectorProbabilities> {
        let md = self.md;
        let big = iterated_sums(s, md)?;
        let q = self.emission_from_iterated(&big);
        let mut d = vec![0.0; md + 1];
        for i in 1..=md {
            d[i] = (i..=md).map(|j| self.weights.get(i, j) * q[j - 1]).sum();
        }
        d[0] = 1.0 - d[1..].iter().sum::<f64>();
        Ok(DetectorProbabilities(d))
    }

    /// Power sums from `(D_1, ..., D_md)` without the positivity check on `S_1`.
    /// The map is polynomial, so this is smooth everywhere.
    pub fn inverse_unchecked(&self, d_active: &[f64]) -> PowerSums {
        let md = self.md;
        debug_assert_eq!(d_active.len(), md);
        let mut q = vec![0.0; md];
        for k in (1..=md).rev() {
            let tail: f64 = (k + 1..=md).map(|j| self.weights.get(k, j) * q[j - 1]).sum();
            q[k - 1] = (d_active[k - 1] - tail) / self.weights.get(k, k);
        }
        let mut big = vec![0.0; md];
        for k in (1..=md).rev() {
            let mut tail = 0.0;
            for j in 1..=md - k {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                tail += sign / self.fact[j] * big[j + k - 1];
            }
            big[k - 1] = self.fact[k] * q[k - 1] - tail;
        }
        power_sums_unchecked(&big, md)
    }

    /// Recovers the power sums from detector probabilities. Pixels whose
    /// recovered `S_1 = s_1` is not positive are reported as degenerate.
    pub fn inverse(&self, d: &DetectorProbabilities) -> Result<PowerSums> {
        if d.md() != self.md {
            return Err(invalid(format!(
                "detector vector has {} orders, transform expects {}",
                d.md(),
                self.md
            )));
        }
        let s = self.inverse_unchecked(&d.0[1..]);
        if !(s.0[0] > 0.0) {
            return Err(Error::DegeneratePixel(s.0[0]));
        }
        Ok(s)
    }
}

pub fn forward_t(s: &PowerSums, md: usize) -> Result<DetectorProbabilities> {
    Transform::new(md)?.forward(s)
}

pub fn inverse_t(d: &DetectorProbabilities) -> Result<PowerSums> {
    Transform::new(d.md())?.inverse(d)
}

/// Exact active-detector distribution for a list of emitters, with no
/// truncation of the photon order.
pub fn exact_detector_distribution(eps: &[f64], md: usize) -> Result<DetectorProbabilities> {
    if md < 2 {
        return Err(invalid(format!("need at least 2 detectors, got {md}")));
    }
    let q = poisson_binomial(eps)?;
    let w = occupancy_weights(md, eps.len());
    let mut d = vec![0.0; md + 1];
    for (j, qj) in q.0.iter().enumerate() {
        for (i, di) in d.iter_mut().enumerate().take(md.min(j) + 1) {
            *di += w.get(i, j) * qj;
        }
    }
    Ok(DetectorProbabilities(d))
}
