//! Small helpers for square row-major images.

use crate::error::{invalid, Result};
use crate::model::fwhm_to_sigma;

/// Normalized 1-D Gaussian taps for the given FWHM, truncated at 4 sigma.
pub fn gaussian_taps(fwhm: f64) -> Vec<f64> {
    let sigma = fwhm_to_sigma(fwhm);
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|a| (-((a * a) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= total);
    taps
}

fn reflect(i: isize, n: isize) -> usize {
    // Half-sample symmetric: -1 -> 0, n -> n-1. Repeated for wide kernels.
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Separable Gaussian smoothing of an `n x n` image with reflecting borders.
/// A non-positive FWHM returns the input unchanged.
pub fn gaussian_smooth(img: &[f64], n: usize, fwhm: f64) -> Vec<f64> {
    if fwhm <= 0.0 {
        return img.to_vec();
    }
    let taps = gaussian_taps(fwhm);
    let r = (taps.len() / 2) as isize;
    let ni = n as isize;
    let mut tmp = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..ni {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                acc += w * img[x * n + reflect(y + k as isize - r, ni)];
            }
            tmp[x * n + y as usize] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for x in 0..ni {
        for y in 0..n {
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                acc += w * tmp[reflect(x + k as isize - r, ni) * n + y];
            }
            out[x as usize * n + y] = acc;
        }
    }
    out
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Writes a binary 16-bit PGM (big-endian samples), with an optional
/// single-line header comment.
pub fn write_pgm16(path: &std::path::Path, n: usize, values: &[u16], comment: Option<&str>) -> Result<()> {
    let note = comment.map(|c| format!("# {}\n", c.replace('\n', " "))).unwrap_or_default();
    let mut bytes = format!("P5\n{note}{n} {n}\n65535\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary 16-bit PGM written by [`write_pgm16`].
pub fn read_pgm16(path: &std::path::Path) -> Result<(usize, Vec<u16>)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(crate::Error::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| crate::Error::Data(format!("bad PGM header field {s}")))
    };
    if fields[0] != "P5" || parse(&fields[3])? != 65535 {
        return Err(crate::Error::Data("expected a 16-bit binary PGM".into()));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    if w != h || bytes.len() < pos + 2 * w * h {
        return Err(crate::Error::Data("PGM must be square and complete".into()));
    }
    let values = bytes[pos..pos + 2 * w * h]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_preserves_constants_and_mass() {
        let n = 16;
        let flat = vec![3.0; n * n];
        for v in gaussian_smooth(&flat, n, 5.0) {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let mut spike = vec![0.0; n * n];
        spike[8 * n + 8] = 1.0;
        let s = gaussian_smooth(&spike, n, 2.0);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((s[8 * n + 7] - s[8 * n + 9]).abs() < 1e-15);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 4.0);
        assert!((quantile(&v, 0.5).unwrap() - 2.5).abs() < 1e-15);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let vals: Vec<u16> = (0..9).map(|v| v * 1000).collect();
        write_pgm16(&path, 3, &vals, None).unwrap();
        assert_eq!(read_pgm16(&path).unwrap(), (3, vals.clone()));
        write_pgm16(&path, 3, &vals, Some("config_hash=ab12")).unwrap();
        assert_eq!(read_pgm16(&path).unwrap(), (3, vals));
    }
}
