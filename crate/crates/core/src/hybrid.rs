//! Hybrid segmentation: validate every watershed segment with a significant
//! box, merging where needed, so that each final region contains a box.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::write_pgm16;
use crate::scan::{BoxSet, ScanBox};
use crate::watershed::Segmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    /// Sorted linear pixel indices.
    pub pixels: Vec<usize>,
    /// Boxes used to validate the region.
    pub boxes: Vec<ScanBox>,
    /// Watershed labels merged into the region.
    pub segments: Vec<u32>,
    /// Largest statistic among the validating boxes.
    pub max_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    pub n: usize,
    pub regions: Vec<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl RoiSet {
    pub fn empty(n: usize) -> Self {
        RoiSet { n, regions: Vec::new(), config_hash: None }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region ids `1..` per pixel, 0 outside every region.
    pub fn label_map(&self) -> Vec<u32> {
        let mut labels = vec![0u32; self.n * self.n];
        for (k, r) in self.regions.iter().enumerate() {
            for &p in &r.pixels {
                labels[p] = k as u32 + 1;
            }
        }
        labels
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let v: Vec<u16> = self.label_map().iter().map(|&l| l.min(u16::MAX as u32) as u16).collect();
        write_pgm16(path, self.n, &v, self.config_hash.as_ref().map(|h| format!("config_hash={h}")).as_deref())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let r: RoiSet = serde_json::from_str(s)?;
        r.check_disjoint()?;
        Ok(r)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_string()?.as_bytes())?;
        Ok(())
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner = vec![usize::MAX; self.n * self.n];
        for (k, r) in self.regions.iter().enumerate() {
            for &p in &r.pixels {
                if p >= owner.len() {
                    return Err(Error::Data(format!("region {k} has pixel {p} off the grid")));
                }
                if owner[p] != usize::MAX {
                    return Err(Error::Data(format!("regions {} and {k} overlap at pixel {p}", owner[p])));
                }
                owner[p] = k;
            }
        }
        Ok(())
    }
}

/// Brute-force check of the two region invariants: pairwise disjointness and
/// that every region covers at least one box of `boxes` completely.
pub fn check_roi_invariants(rois: &RoiSet, boxes: &BoxSet) -> Result<()> {
    rois.check_disjoint()?;
    let n = rois.n;
    for (k, r) in rois.regions.iter().enumerate() {
        let covered = boxes
            .boxes
            .iter()
            .any(|b| b.b.pixels(n).iter().all(|p| r.pixels.binary_search(p).is_ok()));
        if !covered {
            return Err(Error::Data(format!("region {k} contains no input box")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Owner {
    Free,
    Pending(u32),
    Final,
}

struct Options {
    contained: Vec<usize>,
    exclusive: Vec<usize>,
    shared: Vec<usize>,
}

impl Options {
    fn is_empty(&self) -> bool {
        self.contained.is_empty() && self.exclusive.is_empty() && self.shared.is_empty()
    }
}

fn bbox_corner(pixels: &[usize], n: usize) -> (usize, usize) {
    let row = pixels.iter().map(|p| p / n).min().unwrap_or(0);
    let col = pixels.iter().map(|p| p % n).min().unwrap_or(0);
    (row, col)
}

/// Sorted union of the box pixels and every pixel of the listed pending labels.
fn union_pixels(owner: &[Owner], box_pixels: &[usize], labels: &[u32]) -> Vec<usize> {
    let mut px: Vec<usize> = owner
        .iter()
        .enumerate()
        .filter(|(_, o)| matches!(o, Owner::Pending(l) if labels.contains(l)))
        .map(|(i, _)| i)
        .chain(box_pixels.iter().copied())
        .collect();
    px.sort_unstable();
    px.dedup();
    px
}

/// Runs the validation loop. Segments are handled one action at a time:
/// segments that can only be validated through a box shared with other
/// segments go first (they merge with those neighbours), then the remaining
/// ones in decreasing order of their strongest box. A segment containing a
/// free box is kept as is; otherwise it absorbs the exclusive box giving the
/// smallest union. Segments without a usable box are dropped.
pub fn hybridize(boxes: &BoxSet, seg: &Segmentation) -> Result<RoiSet> {
    let n = seg.n;
    if boxes.boxes.iter().any(|b| !b.b.fits(n)) {
        return Err(invalid("box outside the segmentation grid"));
    }
    let box_pixels: Vec<Vec<usize>> = boxes.boxes.iter().map(|b| b.b.pixels(n)).collect();
    let mut owner: Vec<Owner> = seg
        .labels
        .iter()
        .map(|&l| if l == 0 { Owner::Free } else { Owner::Pending(l) })
        .collect();

    // Priority of a segment: best statistic among the boxes it meets initially.
    let mut priority = vec![f64::NEG_INFINITY; seg.n_segments + 1];
    for (k, px) in box_pixels.iter().enumerate() {
        for &p in px {
            if let Owner::Pending(l) = owner[p] {
                priority[l as usize] = priority[l as usize].max(boxes.boxes[k].stat);
            }
        }
    }

    let mut regions = Vec::new();
    loop {
        let mut options: Vec<Options> = (0..=seg.n_segments)
            .map(|_| Options { contained: vec![], exclusive: vec![], shared: vec![] })
            .collect();
        for (k, px) in box_pixels.iter().enumerate() {
            if px.iter().any(|&p| owner[p] == Owner::Final) {
                continue;
            }
            let mut touched: Vec<u32> = Vec::new();
            let mut has_free = false;
            for &p in px {
                match owner[p] {
                    Owner::Pending(l) if !touched.contains(&l) => touched.push(l),
                    Owner::Free => has_free = true,
                    _ => {}
                }
            }
            match touched.as_slice() {
                [] => {}
                [l] if !has_free => options[*l as usize].contained.push(k),
                [l] => options[*l as usize].exclusive.push(k),
                many => {
                    for &l in many {
                        options[l as usize].shared.push(k);
                    }
                }
            }
        }

        let mut pending: Vec<u32> = Vec::new();
        for o in &owner {
            if let Owner::Pending(l) = *o {
                if !pending.contains(&l) {
                    pending.push(l);
                }
            }
        }
        if pending.is_empty() {
            break;
        }
        let dropped: Vec<u32> = pending
            .iter()
            .copied()
            .filter(|&l| options[l as usize].is_empty())
            .collect();
        if !dropped.is_empty() {
            for o in owner.iter_mut() {
                if matches!(o, Owner::Pending(l) if dropped.contains(l)) {
                    *o = Owner::Free;
                }
            }
            continue;
        }

        let by_priority = |a: &u32, b: &u32| {
            priority[*b as usize]
                .total_cmp(&priority[*a as usize])
                .then(a.cmp(b))
        };
        let mut needy: Vec<u32> = pending
            .iter()
            .copied()
            .filter(|&l| {
                let o = &options[l as usize];
                o.contained.is_empty() && o.exclusive.is_empty()
            })
            .collect();
        needy.sort_by(by_priority);
        pending.sort_by(by_priority);

        let (w, choice) = if let Some(&w) = needy.first() {
            (w, &options[w as usize].shared)
        } else {
            let w = pending[0];
            let o = &options[w as usize];
            (w, if o.contained.is_empty() { &o.exclusive } else { &o.contained })
        };

        // Candidate region for each usable box; keep the smallest.
        let mut best: Option<(usize, (usize, usize), usize, Vec<usize>, Vec<u32>)> = None;
        for &k in choice {
            let mut labels = vec![w];
            for &p in &box_pixels[k] {
                if let Owner::Pending(l) = owner[p] {
                    if !labels.contains(&l) {
                        labels.push(l);
                    }
                }
            }
            let px = union_pixels(&owner, &box_pixels[k], &labels);
            let key = (px.len(), bbox_corner(&px, n), k);
            if best.as_ref().is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                labels.sort_unstable();
                best = Some((key.0, key.1, key.2, px, labels));
            }
        }
        let (_, _, k, px, labels) = best.expect("segment with options has a candidate");
        for &p in &px {
            owner[p] = Owner::Final;
        }
        regions.push(Region {
            id: regions.len() + 1,
            pixels: px,
            boxes: vec![boxes.boxes[k].b],
            segments: labels,
            max_stat: boxes.boxes[k].stat,
        });
    }
    Ok(RoiSet { n, regions, config_hash: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::ScoredBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn seg_from_rects(n: usize, rects: &[(usize, usize, usize, usize)]) -> Segmentation {
        let mut labels = vec![0u32; n * n];
        for (k, &(x, y, h1, h2)) in rects.iter().enumerate() {
            for p in ScanBox::new(x, y, h1, h2).pixels(n) {
                labels[p] = k as u32 + 1;
            }
        }
        Segmentation::from_labels(n, labels).unwrap()
    }

    fn set(boxes: &[(usize, usize, usize, usize, f64)]) -> BoxSet {
        BoxSet {
            boxes: boxes
                .iter()
                .map(|&(x, y, h1, h2, stat)| ScoredBox { b: ScanBox::new(x, y, h1, h2), stat })
                .collect(),
        }
    }

    fn pixels_of(n: usize, x: usize, y: usize, h1: usize, h2: usize) -> Vec<usize> {
        let mut v = ScanBox::new(x, y, h1, h2).pixels(n);
        v.sort_unstable();
        v
    }

    #[test]
    fn row1_segment_containing_a_box_is_kept() {
        let n = 12;
        let seg = seg_from_rects(n, &[(2, 2, 5, 5)]);
        let b = set(&[(3, 3, 2, 2, 5.0)]);
        let r = hybridize(&b, &seg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.regions[0].pixels, pixels_of(n, 2, 2, 5, 5));
    }

    #[test]
    fn row2_segment_without_box_is_dropped() {
        let n = 12;
        let seg = seg_from_rects(n, &[(0, 0, 4, 4), (7, 7, 4, 4)]);
        let b = set(&[(1, 1, 2, 2, 5.0)]);
        let r = hybridize(&b, &seg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.regions[0].segments, vec![1]);
    }

    #[test]
    fn row3_segment_merged_with_overlapping_box() {
        let n = 12;
        let seg = seg_from_rects(n, &[(2, 2, 4, 4)]);
        let b = set(&[(4, 4, 3, 3, 5.0)]);
        let r = hybridize(&b, &seg).unwrap();
        let mut want = pixels_of(n, 2, 2, 4, 4);
        want.extend(pixels_of(n, 4, 4, 3, 3));
        want.sort_unstable();
        want.dedup();
        assert_eq!(r.regions[0].pixels, want);
    }

    #[test]
    fn row4_smallest_union_wins() {
        let n = 12;
        let seg = seg_from_rects(n, &[(2, 2, 4, 4)]);
        let b = set(&[(4, 4, 4, 4, 9.0), (1, 5, 2, 2, 3.0)]);
        let r = hybridize(&b, &seg).unwrap();
        assert_eq!(r.regions[0].boxes, vec![ScanBox::new(1, 5, 2, 2)]);
        assert_eq!(r.regions[0].pixels.len(), 16 + 3);
    }

    #[test]
    fn row5_straddling_box_merges_both_segments() {
        let n = 12;
        let seg = seg_from_rects(n, &[(2, 1, 4, 4), (2, 5, 4, 4)]);
        let b = set(&[(3, 3, 2, 4, 5.0)]);
        let r = hybridize(&b, &seg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.regions[0].segments, vec![1, 2]);
        assert_eq!(r.regions[0].pixels, pixels_of(n, 2, 1, 4, 8));
    }

    #[test]
    fn row6_shared_box_preferred_when_neighbour_depends_on_it() {
        // W (label 1) could use its exclusive box, but W' (label 2) has only
        // the box it shares with W; both end up in one region.
        let n = 12;
        let seg = seg_from_rects(n, &[(2, 1, 4, 4), (2, 5, 4, 4)]);
        let b = set(&[(0, 0, 3, 3, 9.0), (3, 4, 2, 2, 4.0)]);
        let r = hybridize(&b, &seg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.regions[0].segments, vec![1, 2]);
        assert_eq!(r.regions[0].boxes, vec![ScanBox::new(3, 4, 2, 2)]);
        assert_eq!(r.regions[0].pixels.len(), 32);
        check_roi_invariants(&r, &b).unwrap();
    }

    #[test]
    fn empty_boxes_give_empty_rois() {
        let seg = seg_from_rects(8, &[(0, 0, 4, 4)]);
        assert!(hybridize(&BoxSet::default(), &seg).unwrap().is_empty());
    }

    #[test]
    fn json_round_trip() {
        let seg = seg_from_rects(12, &[(2, 2, 4, 4)]);
        let r = hybridize(&set(&[(4, 4, 3, 3, 5.0)]), &seg).unwrap();
        assert_eq!(RoiSet::from_json_str(&r.to_json_string().unwrap()).unwrap(), r);
    }

    /// Voronoi-like segmentation with some unassigned pixels plus random boxes.
    fn instance(seed: u64) -> (BoxSet, Segmentation) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let sites: Vec<(f64, f64)> = (0..20)
            .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)))
            .collect();
        let mut labels = vec![0u32; n * n];
        for x in 0..n {
            for y in 0..n {
                let (k, d) = sites
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (k, (s.0 - x as f64).powi(2) + (s.1 - y as f64).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                if d < 12.0 {
                    labels[x * n + y] = k as u32 + 1;
                }
            }
        }
        let seg = Segmentation::from_labels(n, labels).unwrap();
        let boxes = (0..30)
            .map(|_| {
                let h1 = rng.random_range(1..6);
                let h2 = rng.random_range(1..6);
                ScoredBox {
                    b: ScanBox::new(rng.random_range(0..=n - h1), rng.random_range(0..=n - h2), h1, h2),
                    stat: rng.random_range(0.0..10.0),
                }
            })
            .collect();
        (crate::scan::prune_minimal(&BoxSet { boxes }), seg)
    }

    proptest! {
        #[test]
        fn random_instances_satisfy_invariants(seed in any::<u64>()) {
            let (b, seg) = instance(seed);
            let r = hybridize(&b, &seg).unwrap();
            prop_assert!(check_roi_invariants(&r, &b).is_ok());
            prop_assert!(r.len() <= seg.n_segments);
        }
    }
}
