//! Anchor priors estimated by k-means under the co-centered IoU distance.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::shape_iou;
use crate::error::{config_err, Error, Result};

pub const ANCHORS_PER_SCALE: usize = 3;
pub const MAX_ITERATIONS: usize = 300;
/// Independent seedings tried by [`kmeans`]; the lowest final distance wins.
pub const RESTARTS: usize = 8;

/// Anchor sizes in network-input pixels, ascending by area and grouped
/// three per scale from the finest stride up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct AnchorSet {
    pairs: Vec<(f64, f64)>,
}

impl AnchorSet {
    /// Validates and sorts by area (ties by width, then height).
    pub fn new(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() || pairs.len() % ANCHORS_PER_SCALE != 0 {
            return Err(config_err!(
                "anchor count {} is not a positive multiple of {ANCHORS_PER_SCALE}",
                pairs.len()
            ));
        }
        if let Some(&(w, h)) = pairs.iter().find(|&&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(config_err!("anchor ({w}, {h}) must have positive finite sides"));
        }
        pairs.sort_by(area_order);
        Ok(AnchorSet { pairs })
    }

    /// The nine priors of the published TC-YOLO configuration.
    pub fn paper() -> Self {
        AnchorSet {
            pairs: vec![
                (10.0, 13.0),
                (16.0, 30.0),
                (33.0, 23.0),
                (30.0, 61.0),
                (62.0, 45.0),
                (59.0, 119.0),
                (116.0, 90.0),
                (156.0, 198.0),
                (373.0, 326.0),
            ],
        }
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn per_scale(&self) -> usize {
        ANCHORS_PER_SCALE
    }

    pub fn num_scales(&self) -> usize {
        self.pairs.len() / ANCHORS_PER_SCALE
    }

    /// Anchors of scale `s` (0 = finest stride).
    pub fn scale(&self, s: usize) -> &[(f64, f64)] {
        &self.pairs[s * ANCHORS_PER_SCALE..(s + 1) * ANCHORS_PER_SCALE]
    }

    /// Every anchor multiplied by `k`, as when moving between input sizes.
    pub fn scaled(&self, k: f64) -> AnchorSet {
        AnchorSet {
            pairs: self.pairs.iter().map(|&(w, h)| (w * k, h * k)).collect(),
        }
    }
}

impl TryFrom<Vec<(f64, f64)>> for AnchorSet {
    type Error = Error;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        AnchorSet::new(v)
    }
}

impl From<AnchorSet> for Vec<(f64, f64)> {
    fn from(a: AnchorSet) -> Self {
        a.pairs
    }
}

fn area_order(a: &(f64, f64), b: &(f64, f64)) -> Ordering {
    (a.0 * a.1)
        .total_cmp(&(b.0 * b.1))
        .then(a.0.total_cmp(&b.0))
        .then(a.1.total_cmp(&b.1))
}

fn lex_order(a: &(f64, f64), b: &(f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

pub fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - shape_iou(a, b)
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Median with the midpoint convention for even counts.
fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Centroids sorted ascending by area.
    pub centroids: Vec<(f64, f64)>,
    /// Total point-to-centroid distance after each assignment step of the
    /// winning run.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn total_distance(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

fn seed_plus_plus(points: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|&p| nearest(p, &centroids).1.powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let mut pick = points.len() - 1;
        if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // rounding can leave r just past the last positive weight
            if weights[pick] == 0.0 {
                pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
        }
        centroids.push(points[pick]);
    }
    centroids
}

fn lloyd(points: &[(f64, f64)], mut centroids: Vec<(f64, f64)>) -> KMeansResult {
    let k = centroids.len();
    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut total = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            total += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // an empty cluster moves to the point farthest from its centroid
        for c in 0..k {
            if labels.contains(&c) {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() > 1)
                .max_by(|&i, &j| {
                    distance(points[i], centroids[labels[i]])
                        .total_cmp(&distance(points[j], centroids[labels[j]]))
                        .then(j.cmp(&i))
                });
            if let Some(i) = far {
                total -= distance(points[i], centroids[labels[i]]);
                centroids[c] = points[i];
                labels[i] = c;
                changed = true;
            }
        }
        history.push(total);
        if !changed || iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(&p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut ws: Vec<f64> = members.iter().map(|p| p.0).collect();
            let mut hs: Vec<f64> = members.iter().map(|p| p.1).collect();
            *centroid = (median(&mut ws), median(&mut hs));
        }
    }
    centroids.sort_by(area_order);
    KMeansResult {
        centroids,
        history,
        iterations,
    }
}

/// Clusters box sizes into `k` centroids. The result does not depend on
/// the order of `dims`.
pub fn kmeans(dims: &[(f64, f64)], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(config_err!("k-means needs k >= 1"));
    }
    if let Some(&(w, h)) = dims.iter().find(|&&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(Error::Data(format!("box size ({w}, {h}) must be positive and finite")));
    }
    let mut points = dims.to_vec();
    points.sort_by(lex_order);
    let mut distinct = points.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Data(format!(
            "k-means needs at least {k} distinct box sizes, found {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(&points, seed_plus_plus(&points, k, &mut rng));
        if best.as_ref().map_or(true, |b| run.total_distance() < b.total_distance()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `k` anchors (a multiple of three) from training box sizes.
pub fn kmeans_anchors(dims: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if k % ANCHORS_PER_SCALE != 0 {
        return Err(config_err!("anchor count {k} is not a multiple of {ANCHORS_PER_SCALE}"));
    }
    AnchorSet::new(kmeans(dims, k, seed)?.centroids)
}

/// Mean over boxes of the best shape-IoU against any anchor.
pub fn mean_best_iou(dims: &[(f64, f64)], anchors: &AnchorSet) -> f64 {
    if dims.is_empty() {
        return 0.0;
    }
    let sum: f64 = dims
        .iter()
        .map(|&d| anchors.pairs().iter().map(|&a| shape_iou(d, a)).fold(0.0, f64::max))
        .sum();
    sum / dims.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn planted(seed: u64, per: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for &(w, h) in AnchorSet::paper().pairs() {
            for _ in 0..per {
                out.push((w * rng.gen_range(0.98..1.02), h * rng.gen_range(0.98..1.02)));
            }
        }
        out
    }

    #[test]
    fn paper_set_is_sorted_and_grouped() {
        let a = AnchorSet::paper();
        assert_eq!(AnchorSet::new(a.pairs().to_vec()).unwrap(), a);
        assert_eq!(a.num_scales(), 3);
        assert_eq!(a.scale(2)[2], (373.0, 326.0));
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(AnchorSet::new(vec![(1.0, 1.0); 4]).is_err());
        assert!(AnchorSet::new(vec![(1.0, 1.0), (0.0, 2.0), (3.0, 3.0)]).is_err());
    }

    #[test]
    fn identical_boxes_collapse() {
        let dims = vec![(7.0, 9.0); 20];
        assert!(kmeans(&dims, 9, 0).is_err());
        let r = kmeans(&dims, 1, 0).unwrap();
        assert_eq!(r.centroids, vec![(7.0, 9.0)]);
        assert_eq!(r.total_distance(), 0.0);
    }

    #[test]
    fn one_cluster_takes_midpoint_median() {
        let r = kmeans(&[(2.0, 2.0), (4.0, 4.0)], 1, 3).unwrap();
        assert_eq!(r.centroids, vec![(3.0, 3.0)]);
    }

    /// The median is not the IoU-distance minimiser, so a Lloyd step can
    /// raise the total: from (2,2) the update moves to (3,3).
    #[test]
    fn median_update_can_raise_total_distance() {
        let r = lloyd(&[(2.0, 2.0), (4.0, 4.0)], vec![(2.0, 2.0)]);
        assert_eq!(r.centroids, vec![(3.0, 3.0)]);
        assert_eq!(r.history[0], 0.75);
        assert!(r.history[1] > r.history[0]);
    }

    #[test]
    fn recovers_planted_anchors() {
        let dims = planted(1, 30);
        let set = kmeans_anchors(&dims, 9, 42).unwrap();
        for (&(w, h), &(pw, ph)) in set.pairs().iter().zip(AnchorSet::paper().pairs()) {
            assert!((w / pw - 1.0).abs() < 0.05 && (h / ph - 1.0).abs() < 0.05, "{w},{h} vs {pw},{ph}");
        }
    }

    #[test]
    fn mean_best_iou_examples() {
        let paper = AnchorSet::paper();
        assert_eq!(mean_best_iou(&[(10.0, 13.0)], &paper), 1.0);
        assert_eq!(mean_best_iou(paper.pairs(), &paper), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims: Vec<(f64, f64)> = (0..50).map(|_| (rng.gen_range(1.0..300.0), rng.gen_range(1.0..300.0))).collect();
        let mut sum = 0.0;
        for &(w, h) in &dims {
            let mut best = 0.0f64;
            for &(aw, ah) in paper.pairs() {
                let inter = w.min(aw) * h.min(ah);
                best = best.max(inter / (w * h + aw * ah - inter));
            }
            sum += best;
        }
        assert!((mean_best_iou(&dims, &paper) - sum / 50.0).abs() < 1e-12);
    }

    #[test]
    fn beats_random_anchor_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims: Vec<(f64, f64)> = (0..120).map(|_| (rng.gen_range(5.0..150.0), rng.gen_range(5.0..150.0))).collect();
        let fitted = mean_best_iou(&dims, &kmeans_anchors(&dims, 9, 0).unwrap());
        for _ in 0..20 {
            let random = AnchorSet::new((0..9).map(|_| (rng.gen_range(5.0..150.0), rng.gen_range(5.0..150.0))).collect()).unwrap();
            assert!(fitted >= mean_best_iou(&dims, &random));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_stable(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims: Vec<(f64, f64)> = (0..40).map(|_| (rng.gen_range(2.0..90.0), rng.gen_range(2.0..90.0))).collect();
            let mut shuffled = dims.clone();
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(kmeans_anchors(&dims, 9, 5).unwrap(), kmeans_anchors(&shuffled, 9, 5).unwrap());
        }
    }
}
