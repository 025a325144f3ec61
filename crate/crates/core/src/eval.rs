//! Detection matching, all-points average precision and per-scenario
//! correct / false / missed accounting.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::data::Scenario;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Matching {
    /// Per detection, in input order.
    pub tp: Vec<bool>,
    /// Per ground-truth box, in input order.
    pub matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }

    pub fn missed(&self) -> usize {
        self.matched.iter().filter(|&&m| !m).count()
    }
}

/// Detection order for matching and ranking: descending score, ties by
/// input position.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Greedy matching: each detection, best score first, claims the unmatched
/// same-class ground truth of highest IoU (lowest index on ties) when that
/// IoU is positive and at least `tau`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], tau: f64) -> Matching {
    let scores: Vec<f64> = dets.iter().map(|d| d.score.unwrap_or(0.0)).collect();
    let mut m = Matching {
        tp: vec![false; dets.len()],
        matched: vec![false; gts.len()],
    };
    for d in rank_order(&scores) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if m.matched[g] || gt.class.unwrap_or(0) != det.class.unwrap_or(0) {
                continue;
            }
            let v = iou(det, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v > 0.0 && v >= tau {
                m.tp[d] = true;
                m.matched[g] = true;
            }
        }
    }
    m
}

/// Ranked `(recall, precision)` after each detection.
pub fn pr_curve(scores: &[f64], tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    rank_order(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            hits += usize::from(tp[i]);
            let recall = if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 };
            (recall, hits as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-points AP: the sum of precision at each true positive times its
/// recall step `1 / n_gt`. `None` when there is neither a ground truth nor
/// a detection.
pub fn average_precision(scores: &[f64], tp: &[bool], n_gt: usize) -> Option<f64> {
    assert_eq!(scores.len(), tp.len(), "one flag per score");
    if n_gt == 0 {
        return if scores.is_empty() { None } else { Some(0.0) };
    }
    let step = 1.0 / n_gt as f64;
    let mut ap = 0.0;
    let mut hits = 0usize;
    for (k, i) in rank_order(scores).into_iter().enumerate() {
        if tp[i] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64 * step;
        }
    }
    Some(ap)
}

/// One image's detections and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub dets: Vec<BBox>,
    pub gts: Vec<BBox>,
    pub tags: BTreeSet<Scenario>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub images: usize,
    /// Ground-truth count.
    pub count: usize,
    pub detections: usize,
    pub correct: usize,
    pub false_pos: usize,
    pub missed: usize,
}

impl ScenarioRow {
    fn rate(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    pub fn correct_rate(&self) -> Option<f64> {
        Self::rate(self.correct, self.count)
    }

    pub fn missed_rate(&self) -> Option<f64> {
        Self::rate(self.missed, self.count)
    }

    /// False positives over ground-truth count.
    pub fn false_rate(&self) -> Option<f64> {
        Self::rate(self.false_pos, self.count)
    }

    /// False positives over detection count.
    pub fn false_rate_det(&self) -> Option<f64> {
        Self::rate(self.false_pos, self.detections)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub images: usize,
    pub seconds: f64,
}

impl Timing {
    pub fn images_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.images as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap: Option<f64>,
    pub pr: Vec<(f64, f64)>,
    pub images: usize,
    pub gts: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub scenarios: Vec<ScenarioRow>,
    pub timing: Option<Timing>,
}

/// Per-scenario rows over the images carrying each tag, in the fixed tag
/// order. An image with several tags counts once under each.
pub fn scenario_report(images: &[ImageEval], tau: f64) -> Vec<ScenarioRow> {
    let matches: Vec<Matching> = images.iter().map(|im| match_detections(&im.dets, &im.gts, tau)).collect();
    Scenario::ALL
        .iter()
        .map(|&s| {
            let mut row = ScenarioRow {
                scenario: s.as_str().to_owned(),
                images: 0,
                count: 0,
                detections: 0,
                correct: 0,
                false_pos: 0,
                missed: 0,
            };
            for (im, m) in images.iter().zip(&matches).filter(|(im, _)| im.tags.contains(&s)) {
                row.images += 1;
                row.count += im.gts.len();
                row.detections += im.dets.len();
                row.correct += m.matched.len() - m.missed();
                row.missed += m.missed();
                row.false_pos += m.false_positives();
            }
            row
        })
        .collect()
}

/// Pools detections over all images (in image order) for AP and the PR
/// curve, and builds the scenario rows.
pub fn evaluate(images: &[ImageEval], tau: f64) -> EvalReport {
    let mut scores = Vec::new();
    let mut tp = Vec::new();
    let mut gts = 0;
    for im in images {
        let m = match_detections(&im.dets, &im.gts, tau);
        scores.extend(im.dets.iter().map(|d| d.score.unwrap_or(0.0)));
        tp.extend(m.tp);
        gts += im.gts.len();
    }
    EvalReport {
        iou_threshold: tau,
        ap: average_precision(&scores, &tp, gts),
        pr: pr_curve(&scores, &tp, gts),
        images: images.len(),
        gts,
        detections: scores.len(),
        true_positives: tp.iter().filter(|&&t| t).count(),
        scenarios: scenario_report(images, tau),
        timing: None,
    }
}

fn pct(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_owned(), |v| format!("{:.2}%", v * 100.0))
}

fn num(r: Option<f64>) -> String {
    r.map_or_else(|| "na".to_owned(), |v| format!("{v:.17}"))
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "AP@{}: {}  (images {}, gts {}, detections {}, true positives {})",
            self.iou_threshold,
            self.ap.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.6}")),
            self.images,
            self.gts,
            self.detections,
            self.true_positives
        );
        if let Some(t) = self.timing {
            let _ = writeln!(s, "speed: {:.2} images/s over {} images", t.images_per_sec(), t.images);
        }
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>6} {:>8} {:>9} {:>6} {:>9} {:>9} {:>6} {:>9}",
            "scenario", "images", "count", "correct", "rate", "false", "rate/gt", "rate/det", "missed", "rate"
        );
        for r in &self.scenarios {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>6} {:>8} {:>9} {:>6} {:>9} {:>9} {:>6} {:>9}",
                r.scenario,
                r.images,
                r.count,
                r.correct,
                pct(r.correct_rate()),
                r.false_pos,
                pct(r.false_rate()),
                pct(r.false_rate_det()),
                r.missed,
                pct(r.missed_rate())
            );
        }
        s
    }

    /// Machine-readable rows; AP is written with full precision.
    pub fn render_csv(&self) -> String {
        let mut s = String::from(
            "scenario,images,count,detections,correct,correct_rate,false,false_rate_gt,false_rate_det,missed,missed_rate\n",
        );
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{},{},{},{},{}",
            self.images,
            self.gts,
            self.detections,
            self.true_positives,
            num((self.gts > 0).then(|| self.true_positives as f64 / self.gts as f64)),
            self.detections - self.true_positives,
            num((self.gts > 0).then(|| (self.detections - self.true_positives) as f64 / self.gts as f64)),
            num((self.detections > 0).then(|| (self.detections - self.true_positives) as f64 / self.detections as f64)),
            self.gts - self.true_positives,
            num((self.gts > 0).then(|| (self.gts - self.true_positives) as f64 / self.gts as f64)),
        );
        for r in &self.scenarios {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.scenario,
                r.images,
                r.count,
                r.detections,
                r.correct,
                num(r.correct_rate()),
                r.false_pos,
                num(r.false_rate()),
                num(r.false_rate_det()),
                r.missed,
                num(r.missed_rate())
            );
        }
        let _ = writeln!(s, "ap,{},{}", self.iou_threshold, num(self.ap));
        s
    }

    /// `recall,precision` points, one per ranked detection.
    pub fn render_pr(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr {
            let _ = writeln!(s, "{r},{p}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> BBox {
        BBox::new(cx, cy, w, h).with_score(score)
    }

    #[test]
    fn exact_hit() {
        let g = BBox::new(10.0, 10.0, 4.0, 4.0);
        let m = match_detections(&[g.with_score(0.9)], &[g], 0.5);
        assert_eq!((m.true_positives(), m.false_positives(), m.missed()), (1, 0, 0));
    }

    #[test]
    fn second_detection_on_same_gt_is_false() {
        let g = BBox::new(10.0, 10.0, 4.0, 4.0);
        let m = match_detections(&[det(10.2, 10.0, 4.0, 4.0, 0.3), det(10.0, 10.0, 4.0, 4.0, 0.8)], &[g], 0.5);
        assert_eq!(m.tp, vec![false, true]);
    }

    #[test]
    fn threshold_extremes() {
        let g = BBox::new(10.0, 10.0, 4.0, 4.0);
        let dets = [det(13.0, 10.0, 4.0, 4.0, 0.9), det(50.0, 50.0, 4.0, 4.0, 0.8), det(10.0, 10.0, 4.0, 4.0, 0.1)];
        let gts = [g, BBox::new(11.0, 10.0, 4.0, 4.0)];
        // At 0 every overlapping detection becomes a candidate; the far one stays false.
        assert_eq!(match_detections(&dets, &gts, 0.0).tp, vec![true, false, true]);
        assert_eq!(match_detections(&dets, &gts, 1.0 + 1e-9).tp, vec![false; 3]);
    }

    #[test]
    fn classes_do_not_cross_match() {
        let g = BBox::new(10.0, 10.0, 4.0, 4.0).with_class(1);
        let m = match_detections(&[g.with_class(0).with_score(0.9)], &[g], 0.5);
        assert_eq!(m.tp, vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8], &[true, true], 2), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], &[], 3), Some(0.0));
        assert_eq!(average_precision(&[0.5], &[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0), None);
    }

    #[test]
    fn pr_points() {
        let pr = pr_curve(&[0.7, 0.9, 0.8], &[true, true, false], 2);
        assert_eq!(pr, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    }

    fn tags(ts: &[Scenario]) -> BTreeSet<Scenario> {
        ts.iter().copied().collect()
    }

    #[test]
    fn perfect_detector_rows() {
        let g = vec![BBox::new(5.0, 5.0, 2.0, 2.0), BBox::new(20.0, 5.0, 2.0, 2.0)];
        let im = ImageEval {
            id: "a".into(),
            dets: g.iter().map(|b| b.with_score(0.9)).collect(),
            gts: g,
            tags: tags(&[Scenario::WeakLight]),
        };
        let rep = evaluate(&[im], 0.5);
        assert_eq!(rep.ap, Some(1.0));
        let row = rep.scenarios.iter().find(|r| r.scenario == "weak_light").unwrap();
        assert_eq!((row.correct_rate(), row.false_rate(), row.missed_rate()), (Some(1.0), Some(0.0), Some(0.0)));
        let other = rep.scenarios.iter().find(|r| r.scenario == "strong_light").unwrap();
        assert_eq!((other.images, other.count, other.correct_rate()), (0, 0, None));
    }

    #[test]
    fn hand_counted_fixture() {
        // Image a (weak_light, high_overlap): gts A1 A2; dets hit A1 twice and miss A2.
        // Image b (weak_light): gt B1 hit, one stray detection.
        // Image c (high_overlap): gts C1 C2 both hit, nothing else.
        let a1 = BBox::new(10.0, 10.0, 6.0, 6.0);
        let a2 = BBox::new(40.0, 40.0, 6.0, 6.0);
        let b1 = BBox::new(10.0, 30.0, 6.0, 6.0);
        let c1 = BBox::new(5.0, 5.0, 4.0, 4.0);
        let c2 = BBox::new(25.0, 5.0, 4.0, 4.0);
        let images = vec![
            ImageEval {
                id: "a".into(),
                dets: vec![a1.with_score(0.9), det(10.5, 10.0, 6.0, 6.0, 0.6)],
                gts: vec![a1, a2],
                tags: tags(&[Scenario::WeakLight, Scenario::HighOverlap]),
            },
            ImageEval {
                id: "b".into(),
                dets: vec![b1.with_score(0.8), det(60.0, 60.0, 5.0, 5.0, 0.7)],
                gts: vec![b1],
                tags: tags(&[Scenario::WeakLight]),
            },
            ImageEval {
                id: "c".into(),
                dets: vec![c1.with_score(0.5), c2.with_score(0.4)],
                gts: vec![c1, c2],
                tags: tags(&[Scenario::HighOverlap]),
            },
        ];
        let rep = evaluate(&images, 0.5);
        let row = |n: &str| rep.scenarios.iter().find(|r| r.scenario == n).unwrap().clone();
        let w = row("weak_light");
        assert_eq!((w.images, w.count, w.detections, w.correct, w.false_pos, w.missed), (2, 3, 4, 2, 2, 1));
        let h = row("high_overlap");
        assert_eq!((h.images, h.count, h.detections, h.correct, h.false_pos, h.missed), (2, 4, 4, 3, 1, 1));
        assert_eq!(h.false_rate_det(), Some(0.25));
        // Ranked: .9 T, .8 T, .7 F, .6 F, .5 T, .4 T over 5 gts.
        let want = (1.0 + 1.0 + 3.0 / 5.0 + 4.0 / 6.0) / 5.0;
        assert!((rep.ap.unwrap() - want).abs() < 1e-15);
        for r in &rep.scenarios {
            assert_eq!(r.correct + r.missed, r.count);
        }
        assert!(rep.render_text().contains("weak_light"));
        assert_eq!(rep.render_csv().lines().count(), 1 + 1 + 9 + 1);
    }

    fn arb_flags() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, usize)> {
        proptest::collection::vec((0.0..1.0f64, any::<bool>()), 0..30).prop_flat_map(|v| {
            let tps = v.iter().filter(|(_, t)| *t).count();
            let (s, t): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
            (Just(s), Just(t), tps..tps + 5)
        })
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval_and_monotone_invariant((s, t, n) in arb_flags()) {
            if let Some(ap) = average_precision(&s, &t, n) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
                let warped: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
                prop_assert_eq!(average_precision(&warped, &t, n), Some(ap));
            }
        }

        #[test]
        fn lowest_false_positive_never_raises_ap((s, t, n) in arb_flags()) {
            let base = average_precision(&s, &t, n);
            let mut s2 = s.clone();
            let mut t2 = t.clone();
            s2.push(-1.0);
            t2.push(false);
            let more = average_precision(&s2, &t2, n).unwrap();
            prop_assert!(more <= base.unwrap_or(0.0));
        }
    }
}
