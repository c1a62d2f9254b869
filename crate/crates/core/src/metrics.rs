//! Per-region overlap and surface-distance metrics and their aggregation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{derive_region_masks, Dims, LabelVolume, Region, RegionMask, Spacing};

/// Subject name used for the aggregate rows of the CSV report.
pub const AGGREGATE_SUBJECT: &str = "AGGREGATE";
/// Region name of the cross-region average row.
pub const ALL_REGIONS: &str = "ALL";

fn same_grid(pred: &RegionMask, gt: &RegionMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

fn confusion(pred: &RegionMask, gt: &RegionMask) -> Result<Confusion> {
    same_grid(pred, gt)?;
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred.mask().iter().zip(gt.mask()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice_score(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_))
}

/// `TP / (TP + FN)`; 1 when the ground truth is empty.
pub fn sensitivity(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio(c.tp, c.tp + c.fn_))
}

/// `TN / (TN + FP)`; 1 when the ground truth covers the whole grid.
pub fn specificity(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio(c.tn, c.tn + c.fp))
}

/// Set voxels with an unset 6-neighbour or lying on the grid boundary.
pub fn surface_voxels(mask: &[bool], dims: Dims) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let boundary = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if boundary
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of a sampled function on a
/// grid with step `step` (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while j < k as usize && z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        *o = (pos(q) - pos(p)).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance (in physical units) from every voxel to
/// the nearest voxel of `sites`.
pub fn squared_distance_map(sites: &[usize], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &i in sites {
        g[i] = 0.0;
    }
    let longest = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zb) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..d * h * w).filter(|i| (i / stride) % n == 0).collect();
        for start in others {
            for t in 0..n {
                line[t] = g[start + t * stride];
            }
            edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zb);
            for t in 0..n {
                g[start + t * stride] = out[t];
            }
        }
    }
    g
}

/// Linear-interpolated percentile (`q` in 0..=100) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

fn extent_diagonal(dims: Dims, spacing: Spacing) -> f64 {
    (0..3).map(|a| (dims[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// Symmetric 95th-percentile surface distance in physical units.
/// Both masks empty gives 0; exactly one empty gives the diagonal of the
/// grid's physical extent.
pub fn hd95(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    same_grid(pred, gt)?;
    if pred.spacing() != gt.spacing() {
        return Err(Error::Shape(format!("spacing {:?} vs {:?}", pred.spacing(), gt.spacing())));
    }
    let (dims, spacing) = (pred.dims(), pred.spacing());
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(extent_diagonal(dims, spacing)),
        _ => {}
    }
    let sp = surface_voxels(pred.mask(), dims);
    let sg = surface_voxels(gt.mask(), dims);
    let directed = |from: &[usize], to: &[usize]| {
        let map = squared_distance_map(to, dims, spacing);
        let mut d: Vec<f64> = from.iter().map(|&i| map[i].sqrt()).collect();
        percentile(&mut d, 95.0)
    };
    Ok(directed(&sp, &sg).max(directed(&sg, &sp)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hd95: f64,
}

/// All four metrics for the three nested tumor regions.
pub fn evaluate_subject(pred: &LabelVolume, gt: &LabelVolume) -> Result<Vec<RegionMetrics>> {
    if pred.dims() != gt.dims() || pred.spacing() != gt.spacing() {
        return Err(Error::Shape(format!(
            "prediction {:?} @ {:?} vs ground truth {:?} @ {:?}",
            pred.dims(),
            pred.spacing(),
            gt.dims(),
            gt.spacing()
        )));
    }
    let pm = derive_region_masks(pred);
    let gm = derive_region_masks(gt);
    pm.iter()
        .zip(&gm)
        .map(|(p, g)| {
            Ok(RegionMetrics {
                region: g.region,
                dice: dice_score(p, g)?,
                sensitivity: sensitivity(p, g)?,
                specificity: specificity(p, g)?,
                hd95: hd95(p, g)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub regions: Vec<RegionMetrics>,
}

/// Mean of each metric over some set of rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hd95: f64,
}

impl MeanMetrics {
    fn of<'a>(rows: impl Iterator<Item = &'a RegionMetrics>) -> Self {
        let (mut n, mut m) = (0usize, MeanMetrics { dice: 0.0, sensitivity: 0.0, specificity: 0.0, hd95: 0.0 });
        for r in rows {
            n += 1;
            m.dice += r.dice;
            m.sensitivity += r.sensitivity;
            m.specificity += r.specificity;
            m.hd95 += r.hd95;
        }
        let n = n as f64;
        MeanMetrics { dice: m.dice / n, sensitivity: m.sensitivity / n, specificity: m.specificity / n, hd95: m.hd95 / n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by subject id.
    pub subjects: Vec<SubjectMetrics>,
    pub per_region: Vec<(Region, MeanMetrics)>,
    /// Average over every subject-region row.
    pub overall: MeanMetrics,
}

impl MetricsReport {
    pub fn region_mean(&self, region: Region) -> Option<MeanMetrics> {
        self.per_region.iter().find(|(r, _)| *r == region).map(|(_, m)| *m)
    }

    /// CSV with one row per subject-region and flagged aggregate rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidValue(format!("writing CSV: {e}"));
        w.write_record(["subject", "region", "dice", "sensitivity", "specificity", "hd95"]).map_err(io)?;
        let mut row = |subject: &str, region: &str, m: MeanMetrics| {
            w.write_record([
                subject.to_string(),
                region.to_string(),
                m.dice.to_string(),
                m.sensitivity.to_string(),
                m.specificity.to_string(),
                m.hd95.to_string(),
            ])
        };
        for s in &self.subjects {
            for r in &s.regions {
                let m = MeanMetrics { dice: r.dice, sensitivity: r.sensitivity, specificity: r.specificity, hd95: r.hd95 };
                row(&s.subject, &r.region.to_string(), m).map_err(io)?;
            }
        }
        for (region, m) in &self.per_region {
            row(AGGREGATE_SUBJECT, &region.to_string(), *m).map_err(io)?;
        }
        row(AGGREGATE_SUBJECT, ALL_REGIONS, self.overall).map_err(io)?;
        w.flush().map_err(|e| Error::InvalidValue(format!("writing CSV: {e}")))
    }
}

/// Per-region means and the cross-region average. Subjects are ordered by
/// id first, so the result does not depend on input order.
pub fn aggregate(mut subjects: Vec<SubjectMetrics>) -> Result<MetricsReport> {
    if subjects.is_empty() {
        return Err(Error::Empty("subject list"));
    }
    subjects.sort_by(|a, b| a.subject.cmp(&b.subject));
    let rows = || subjects.iter().flat_map(|s| s.regions.iter());
    let per_region = Region::ALL.iter().map(|&r| (r, MeanMetrics::of(rows().filter(|m| m.region == r)))).collect();
    let overall = MeanMetrics::of(rows());
    Ok(MetricsReport { subjects, per_region, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::UNIT_SPACING;
    use proptest::prelude::*;

    fn mask(dims: Dims, on: &[usize]) -> RegionMask {
        let mut m = vec![false; dims.iter().product()];
        for &i in on {
            m[i] = true;
        }
        RegionMask::new(Region::WT, dims, UNIT_SPACING, m).unwrap()
    }

    #[test]
    fn overlap_hand_counts() {
        let d = [1, 1, 8];
        assert_eq!(dice_score(&mask(d, &[0, 1]), &mask(d, &[1, 2, 3])).unwrap(), 0.4);
        let p = mask(d, &[0, 1, 4]);
        let g = mask(d, &[0, 1, 2]);
        // TP=2, FN=1, FP=1, TN=4
        assert!((sensitivity(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((specificity(&p, &g).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(dice_score(&mask(d, &[]), &mask(d, &[])).unwrap(), 1.0);
        let comp = mask(d, &[3, 4, 5, 6, 7]);
        let gt = mask(d, &[0, 1, 2]);
        assert_eq!(sensitivity(&comp, &gt).unwrap(), 0.0);
        assert_eq!(specificity(&comp, &gt).unwrap(), 0.0);
        assert!(dice_score(&mask([1, 1, 7], &[]), &gt).is_err());
    }

    #[test]
    fn hd95_simple_cases() {
        let d = [1, 1, 10];
        assert_eq!(hd95(&mask(d, &[2]), &mask(d, &[5])).unwrap(), 3.0);
        assert_eq!(hd95(&mask(d, &[2, 3]), &mask(d, &[2, 3])).unwrap(), 0.0);
        assert_eq!(hd95(&mask(d, &[]), &mask(d, &[])).unwrap(), 0.0);
        assert!((hd95(&mask(d, &[]), &mask(d, &[4])).unwrap() - 102f64.sqrt()).abs() < 1e-12);
        let aniso = |on: &[usize]| RegionMask::new(Region::TC, [3, 1, 1], [2.5, 1.0, 1.0], mask([3, 1, 1], on).mask().to_vec()).unwrap();
        assert_eq!(hd95(&aniso(&[0]), &aniso(&[2])).unwrap(), 5.0);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert!((percentile(&mut v, 95.0) - 3.8).abs() < 1e-12);
    }

    fn brute_sq_distance(i: usize, sites: &[usize], dims: Dims, sp: Spacing) -> f64 {
        let c = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        let a = c(i);
        sites
            .iter()
            .map(|&j| {
                let b = c(j);
                (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * sp[k]).powi(2)).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn distance_map_is_exact(
            bits in prop::collection::vec(prop::bool::weighted(0.1), 5 * 6 * 7),
            sp in prop::array::uniform3(0.5f64..3.0),
        ) {
            let dims = [5, 6, 7];
            let sites: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
            let map = squared_distance_map(&sites, dims, sp);
            for i in 0..bits.len() {
                let b = brute_sq_distance(i, &sites, dims, sp);
                if b.is_infinite() {
                    prop_assert!(map[i].is_infinite());
                } else {
                    prop_assert!((map[i] - b).abs() < 1e-9, "{} vs {}", map[i], b);
                }
            }
        }

        #[test]
        fn metrics_are_symmetric_and_bounded(
            a in prop::collection::vec(any::<bool>(), 64),
            b in prop::collection::vec(any::<bool>(), 64),
        ) {
            let to = |v: &[bool]| RegionMask::new(Region::ET, [4; 3], UNIT_SPACING, v.to_vec()).unwrap();
            let (p, g) = (to(&a), to(&b));
            prop_assert_eq!(dice_score(&p, &g).unwrap(), dice_score(&g, &p).unwrap());
            prop_assert_eq!(hd95(&p, &g).unwrap(), hd95(&g, &p).unwrap());
            for v in [dice_score(&p, &g).unwrap(), sensitivity(&p, &g).unwrap(), specificity(&p, &g).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(hd95(&p, &g).unwrap() >= 0.0);
        }
    }

    fn subject(name: &str, dice: f64) -> SubjectMetrics {
        let m = |region| RegionMetrics { region, dice, sensitivity: 1.0, specificity: 1.0, hd95: 2.0 };
        SubjectMetrics { subject: name.into(), regions: Region::ALL.iter().map(|&r| m(r)).collect() }
    }

    #[test]
    fn aggregation() {
        let one = aggregate(vec![subject("a", 0.8)]).unwrap();
        assert_eq!(one.region_mean(Region::WT).unwrap().dice, 0.8);
        let two = aggregate(vec![subject("a", 0.8), subject("b", 0.6)]).unwrap();
        assert!((two.overall.dice - 0.7).abs() < 1e-15);
        let shuffled = aggregate(vec![subject("b", 0.6), subject("a", 0.8)]).unwrap();
        assert_eq!(two, shuffled);
        assert!(aggregate(vec![]).is_err());
        let mut csv = Vec::new();
        two.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "subject,region,dice,sensitivity,specificity,hd95");
        assert_eq!(text.lines().count(), 1 + 6 + 3 + 1);
        assert!(text.contains("AGGREGATE,ALL,"));
    }

    #[test]
    fn evaluate_degenerate_subjects() {
        let gt = LabelVolume::from_codes([2, 2, 2], UNIT_SPACING, &[0, 1, 2, 4, 0, 0, 1, 0]).unwrap();
        for m in evaluate_subject(&gt, &gt).unwrap() {
            assert_eq!((m.dice, m.hd95), (1.0, 0.0));
        }
        let empty = LabelVolume::zeros([2, 2, 2]);
        for m in evaluate_subject(&empty, &gt).unwrap() {
            assert_eq!((m.dice, m.sensitivity, m.specificity), (0.0, 0.0, 1.0));
        }
    }
}
