//! Region similarity J, boundary F-measure and decay, with report writers.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::davis;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::maskops::BinaryMask;

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn region_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.008 * (width as f64).hypot(height as f64)).ceil() as usize
}

/// Foreground pixels with a 4-neighbour in the background; pixels outside
/// the grid count as background.
pub fn boundary(m: &BinaryMask) -> BinaryMask {
    let (w, h) = m.shape();
    BinaryMask::from_fn(w, h, |x, y| {
        *m.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !*m.get(x - 1, y)
                || !*m.get(x + 1, y)
                || !*m.get(x, y - 1)
                || !*m.get(x, y + 1))
    })
}

/// Fraction of `from` pixels within Euclidean distance `tol` (inclusive)
/// of some `to` pixel.
fn matched_fraction(from: &BinaryMask, to: &BinaryMask, offsets: &[(isize, isize)]) -> f64 {
    let (w, h) = from.shape();
    let (mut total, mut hit) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !*from.get(x, y) {
                continue;
            }
            total += 1;
            let found = offsets.iter().any(|&(dx, dy)| {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && *to.get(xx as usize, yy as usize)
            });
            hit += found as usize;
        }
    }
    if total == 0 { 0.0 } else { hit as f64 / total as f64 }
}

/// Boundary F-measure with a pixel tolerance.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let pb = boundary(pred);
    let gb = boundary(gt);
    match (pb.is_empty_mask(), gb.is_empty_mask()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let t = tolerance as isize;
    let offsets: Vec<(isize, isize)> = (-t..=t)
        .flat_map(|dy| (-t..=t).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= t * t)
        .collect();
    let precision = matched_fraction(&pb, &gb, &offsets);
    let recall = matched_fraction(&gb, &pb, &offsets);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Mean of the first quarter minus mean of the last bin; the last bin takes
/// the remainder. Zero with fewer than four values.
pub fn decay(values: &[f64]) -> f64 {
    let q = values.len() / 4;
    if q == 0 {
        return 0.0;
    }
    mean(&values[..q]) - mean(&values[3 * q..])
}

/// Scores of one object over the frames after the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub per_frame_j: Vec<f64>,
    pub per_frame_f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub j_decay: f64,
}

impl SequenceResult {
    pub fn from_frames(per_frame_j: Vec<f64>, per_frame_f: Vec<f64>) -> Self {
        let j_mean = mean(&per_frame_j);
        let f_mean = mean(&per_frame_f);
        Self {
            j_decay: decay(&per_frame_j),
            jf_mean: jf_mean(j_mean, f_mean),
            per_frame_j,
            per_frame_f,
            j_mean,
            f_mean,
        }
    }

    /// Number of scored frames.
    pub fn frames(&self) -> usize {
        self.per_frame_j.len()
    }
}

pub fn jf_mean(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

/// Scores one object; frame 0 is the supervision and is skipped.
pub fn evaluate_sequence(preds: &[BinaryMask], gts: &[BinaryMask], tolerance: Option<usize>) -> Result<SequenceResult> {
    if preds.len() != gts.len() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let scores: Vec<(f64, f64)> = preds
        .par_iter()
        .zip(gts)
        .skip(1)
        .map(|(p, g)| {
            let tol = tolerance.unwrap_or_else(|| default_tolerance(g.width(), g.height()));
            Ok((region_j(p, g)?, boundary_f(p, g, tol)?))
        })
        .collect::<Result<_>>()?;
    let (j, f) = scores.into_iter().unzip();
    Ok(SequenceResult::from_frames(j, f))
}

/// Per-object results of one sequence of label maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub objects: Vec<(u8, SequenceResult)>,
}

/// Scores every object present in the first ground-truth frame.
pub fn evaluate_labels(name: &str, preds: &[Grid<u8>], gts: &[Grid<u8>]) -> Result<SequenceReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let ids = gts.first().map(davis::object_ids).unwrap_or_default();
    let objects = ids
        .into_iter()
        .map(|id| {
            let p: Vec<BinaryMask> = preds.iter().map(|l| davis::mask_for_id(l, id)).collect();
            let g: Vec<BinaryMask> = gts.iter().map(|l| davis::mask_for_id(l, id)).collect();
            Ok((id, evaluate_sequence(&p, &g, None)?))
        })
        .collect::<Result<_>>()?;
    Ok(SequenceReport {
        name: name.into(),
        objects,
    })
}

/// Dataset summary with the benchmark's column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    #[serde(rename = "JF_mean")]
    pub jf_mean: f64,
    #[serde(rename = "J_mean")]
    pub j_mean: f64,
    #[serde(rename = "F_mean")]
    pub f_mean: f64,
    #[serde(rename = "J_decay")]
    pub j_decay: f64,
    pub sequences: usize,
    pub objects: usize,
}

/// Averages over every scored object; objects without scored frames are
/// left out.
pub fn evaluate_dataset(reports: &[SequenceReport]) -> DatasetReport {
    let scored: Vec<&SequenceResult> = reports
        .iter()
        .flat_map(|r| r.objects.iter().map(|(_, s)| s))
        .filter(|s| s.frames() > 0)
        .collect();
    let avg = |f: fn(&SequenceResult) -> f64| mean(&scored.iter().map(|s| f(s)).collect::<Vec<_>>());
    let j_mean = avg(|s| s.j_mean);
    let f_mean = avg(|s| s.f_mean);
    DatasetReport {
        jf_mean: jf_mean(j_mean, f_mean),
        j_mean,
        f_mean,
        j_decay: avg(|s| s.j_decay),
        sequences: reports.len(),
        objects: scored.len(),
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    sequence: &'a str,
    object: u8,
    frames: usize,
    #[serde(rename = "J_mean")]
    j_mean: f64,
    #[serde(rename = "F_mean")]
    f_mean: f64,
    #[serde(rename = "JF_mean")]
    jf_mean: f64,
    #[serde(rename = "J_decay")]
    j_decay: f64,
}

pub fn write_sequence_csv(path: &Path, reports: &[SequenceReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    for r in reports {
        for (id, s) in &r.objects {
            w.serialize(CsvRow {
                sequence: &r.name,
                object: *id,
                frames: s.frames(),
                j_mean: s.j_mean,
                f_mean: s.f_mean,
                jf_mean: s.jf_mean,
                j_decay: s.j_decay,
            })
            .map_err(|e| Error::file(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn write_summary_json(path: &Path, report: &DatasetReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

/// Directory holding `<seq>/%05d.png` label maps: `root/Annotations` when it
/// exists, else `root` itself.
pub fn annotation_root(root: &Path) -> PathBuf {
    let nested = root.join(davis::ANNOTATIONS_DIR);
    if nested.is_dir() { nested } else { root.to_path_buf() }
}

/// Sorted label maps of a sequence directory.
pub fn load_label_sequence(dir: &Path) -> Result<Vec<Grid<u8>>> {
    davis::list_frames(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| davis::read_label_png(&p))
        .collect()
}

/// Scores every sequence under the ground-truth root against the
/// same-named prediction directory.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path) -> Result<Vec<SequenceReport>> {
    let pred_root = annotation_root(pred_root);
    let gt_root = annotation_root(gt_root);
    let mut names: Vec<String> = std::fs::read_dir(&gt_root)
        .map_err(|e| Error::file(&gt_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .iter()
        .map(|name| {
            let gts = load_label_sequence(&gt_root.join(name))?;
            let pred_dir = pred_root.join(name);
            let preds = load_label_sequence(&pred_dir)?;
            if preds.len() != gts.len() {
                return Err(Error::file(
                    &pred_dir,
                    format!("{} predicted frames for {} annotated frames", preds.len(), gts.len()),
                ));
            }
            evaluate_labels(name, &preds, &gts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    /// All-pairs oracle for boundary F.
    fn brute_f(p: &BinaryMask, g: &BinaryMask, tol: usize) -> f64 {
        let pts = |m: &BinaryMask| -> Vec<(f64, f64)> {
            let b = boundary(m);
            let (w, h) = b.shape();
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| *b.get(x, y))
                .map(|(x, y)| (x as f64, y as f64))
                .collect()
        };
        let (a, b) = (pts(p), pts(g));
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let t = tol as f64;
        let frac = |from: &[(f64, f64)], to: &[(f64, f64)]| {
            from.iter()
                .filter(|p| to.iter().any(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= t * t))
                .count() as f64
                / from.len() as f64
        };
        let (pr, rc) = (frac(&a, &b), frac(&b, &a));
        if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) }
    }

    #[test]
    fn j_examples() {
        let g = rect(10, 10, 2, 2, 8, 8);
        assert_eq!(region_j(&g, &g).unwrap(), 1.0);
        assert_eq!(region_j(&rect(10, 10, 0, 0, 2, 2), &rect(10, 10, 5, 5, 7, 7)).unwrap(), 0.0);
        assert_eq!(region_j(&rect(10, 10, 2, 2, 5, 8), &g).unwrap(), 0.5);
        assert_eq!(region_j(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4)).unwrap(), 1.0);
        assert!(region_j(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 5)).is_err());
    }

    #[test]
    fn f_examples() {
        let g = rect(40, 40, 10, 10, 30, 30);
        assert_eq!(boundary_f(&g, &g, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::empty(40, 40), &g, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4), 1).unwrap(), 1.0);
        // shifted by exactly the tolerance: still a full match
        let shifted = rect(40, 40, 13, 10, 33, 30);
        assert_eq!(boundary_f(&shifted, &g, 3).unwrap(), 1.0);
        assert!(boundary_f(&shifted, &g, 2).unwrap() < 1.0);
        assert_eq!(default_tolerance(854, 480), 8);
    }

    #[test]
    fn linear_ramp_decay() {
        let ramp: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 / 100.0).collect();
        assert!((decay(&ramp) - 0.75).abs() < 1e-12);
        assert_eq!(decay(&[0.7; 37]), 0.0);
        // remainder goes to the last bin
        assert!((decay(&[1.0, 1.0, 1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reported_columns_are_consistent() {
        assert!((jf_mean(0.686, 0.760) - 0.723).abs() < 1e-12);
    }

    #[test]
    fn sequence_skips_first_frame() {
        let g = rect(16, 16, 4, 4, 12, 12);
        let preds = vec![BinaryMask::empty(16, 16), g.clone(), g.clone()];
        let r = evaluate_sequence(&preds, &vec![g.clone(); 3], None).unwrap();
        assert_eq!((r.frames(), r.j_mean, r.f_mean, r.jf_mean), (2, 1.0, 1.0, 1.0));
        assert!(evaluate_sequence(&preds[..2], &vec![g; 3], None).is_err());
    }

    #[test]
    fn dataset_averages_objects_and_skips_unscored() {
        let r = |j: f64| SequenceResult::from_frames(vec![j], vec![1.0]);
        let empty = SequenceResult::from_frames(vec![], vec![]);
        let reports = vec![
            SequenceReport { name: "a".into(), objects: vec![(1, r(0.2)), (2, r(0.4))] },
            SequenceReport { name: "b".into(), objects: vec![(1, r(0.6)), (2, empty)] },
        ];
        let d = evaluate_dataset(&reports);
        assert!((d.j_mean - 0.4).abs() < 1e-12);
        assert_eq!((d.objects, d.sequences), (3, 2));
        let json = serde_json::to_string(&d).unwrap();
        for key in ["\"J_mean\"", "\"F_mean\"", "\"JF_mean\"", "\"J_decay\""] {
            assert!(json.contains(key));
        }
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1..=n, 1..=n).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(any::<bool>(), w * h),
                proptest::collection::vec(any::<bool>(), w * h),
            )
                .prop_map(move |(a, b)| {
                    (
                        BinaryMask::new(Grid::from_vec(w, h, a).unwrap()),
                        BinaryMask::new(Grid::from_vec(w, h, b).unwrap()),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn f_matches_all_pairs_oracle((p, g) in mask_strategy(12), tol in 0usize..4) {
            prop_assert_eq!(boundary_f(&p, &g, tol).unwrap(), brute_f(&p, &g, tol));
        }

        #[test]
        fn scores_are_symmetric_and_bounded((p, g) in mask_strategy(10)) {
            let j = region_j(&p, &g).unwrap();
            let f = boundary_f(&p, &g, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
            prop_assert_eq!(j, region_j(&g, &p).unwrap());
            prop_assert_eq!(f, boundary_f(&g, &p, 1).unwrap());
        }

        #[test]
        fn translation_invariant(dx in 0usize..6, dy in 0usize..6, seed in any::<u64>()) {
            let blob = |s: u64, x: usize, y: usize| (x * 7 + y * 13 + s as usize) % 5 < 2;
            let place = |s: u64| BinaryMask::from_fn(30, 30, |x, y| {
                x >= 8 + dx && y >= 8 + dy && x < 20 + dx && y < 20 + dy && blob(s, x - dx, y - dy)
            });
            let base = |s: u64| BinaryMask::from_fn(30, 30, |x, y| {
                (8..20).contains(&x) && (8..20).contains(&y) && blob(s, x, y)
            });
            let (p0, g0) = (base(seed), base(seed.wrapping_add(1)));
            let (p1, g1) = (place(seed), place(seed.wrapping_add(1)));
            prop_assert_eq!(region_j(&p0, &g0).unwrap(), region_j(&p1, &g1).unwrap());
            prop_assert_eq!(boundary_f(&p0, &g0, 2).unwrap(), boundary_f(&p1, &g1, 2).unwrap());
        }
    }

    #[test]
    fn dirs_round_trip_reports() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt/Annotations/seq");
        std::fs::create_dir_all(&gt).unwrap();
        for t in 0..4 {
            let labels = Grid::from_fn(20, 20, |x, y| u8::from((4 + t..12 + t).contains(&x) && (5..15).contains(&y)));
            davis::write_label_png(&davis::annotation_path(&gt, t), &labels).unwrap();
        }
        let reports = evaluate_dirs(&dir.path().join("gt"), &dir.path().join("gt")).unwrap();
        let d = evaluate_dataset(&reports);
        assert_eq!((d.j_mean, d.f_mean, d.objects), (1.0, 1.0, 1));
        let csv_path = dir.path().join("r.csv");
        write_sequence_csv(&csv_path, &reports).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("sequence,object,frames,J_mean,F_mean,JF_mean,J_decay"));
    }
}
