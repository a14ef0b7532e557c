//! Evaluation protocols: adjusted Rand index over pixel labelings, detection
//! accuracy by IoU with optimal bipartite matching, prototype-to-class
//! assignment (Hungarian or majority), landmark-regressor input construction
//! and ridge fitting, and a 2D PCA export for descriptor scatter plots.

use crate::error::{Result, TuskError};
use crate::linalg;

/// H x W integer labeling; label 0 is reserved for background.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(TuskError::ShapeMismatch {
                op: "label_map",
                lhs: vec![h, w],
                rhs: vec![labels.len()],
            });
        }
        Ok(LabelMap { h, w, labels })
    }
}

fn comb2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same pixels, via the
/// contingency-table closed form. With `exclude_background`, pixels whose
/// ground-truth label is 0 are dropped first. The degenerate 0/0 case
/// returns 1 when the two labelings induce the same partition, else 0.
pub fn ari(gt: &[u32], pred: &[u32], exclude_background: bool) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(TuskError::ShapeMismatch {
            op: "ari",
            lhs: vec![gt.len()],
            rhs: vec![pred.len()],
        });
    }
    let pairs: Vec<(u32, u32)> = gt
        .iter()
        .zip(pred.iter())
        .filter(|(&g, _)| !(exclude_background && g == 0))
        .map(|(&g, &p)| (g, p))
        .collect();
    let n = pairs.len();
    if n <= 1 {
        return Ok(1.0);
    }

    use std::collections::HashMap;
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for &(g, p) in &pairs {
        *table.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c as f64)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c as f64)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c as f64)).sum();
    let total = comb2(n as f64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        // both labelings are trivial; identical partitions iff the
        // contingency table is a (partial) permutation matrix covering
        // every row and column exactly once
        let identical = table.len() == rows.len() && table.len() == cols.len();
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Minimum-cost assignment on a square `n x n` cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "hungarian expects a square matrix");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Pad a rectangular cost matrix with zero-cost dummies and solve.
pub fn hungarian_rect(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let n = rows.max(cols);
    let mut sq = vec![0.0f64; n * n];
    for r in 0..rows {
        for c in 0..cols {
            sq[r * n + c] = cost[r * cols + c];
        }
    }
    hungarian(&sq, n)
}

fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = ix * iy;
    let area_a = ((a[2] - a[0]) * (a[3] - a[1])) as f64;
    let area_b = ((b[2] - b[0]) * (b[3] - b[1])) as f64;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Detection matching result.
#[derive(Clone, Debug)]
pub struct DetectionResult {
    /// matched ground truths / total ground truths
    pub accuracy: f64,
    /// (gt index, prediction index) pairs
    pub matches: Vec<(usize, usize)>,
}

/// Center `box_size` boxes on the predicted points and match them one-to-one
/// against ground-truth boxes, maximizing the number of pairs with
/// IoU >= `iou_thresh`.
pub fn detect_iou(
    gt_boxes: &[[f32; 4]],
    pred_points: &[[f32; 2]],
    box_size: f32,
    iou_thresh: f64,
) -> DetectionResult {
    let ng = gt_boxes.len();
    let np = pred_points.len();
    if ng == 0 {
        return DetectionResult {
            accuracy: 1.0,
            matches: Vec::new(),
        };
    }
    let h = box_size / 2.0;
    let pred_boxes: Vec<[f32; 4]> = pred_points
        .iter()
        .map(|p| [p[0] - h, p[1] - h, p[0] + h, p[1] + h])
        .collect();
    let n = ng.max(np);
    // cost 0 when the pair clears the IoU threshold, 1 otherwise; padding
    // dummies cost 1 so real sub-threshold pairs are never preferred
    let mut cost = vec![1.0f64; n * n];
    for (gi, gb) in gt_boxes.iter().enumerate() {
        for (pi, pb) in pred_boxes.iter().enumerate() {
            if iou(gb, pb) >= iou_thresh {
                cost[gi * n + pi] = 0.0;
            }
        }
    }
    let assign = hungarian(&cost, n);
    let mut matches = Vec::new();
    for (gi, &pi) in assign.iter().enumerate().take(ng) {
        if pi < np && iou(&gt_boxes[gi], &pred_boxes[pi]) >= iou_thresh {
            matches.push((gi, pi));
        }
    }
    DetectionResult {
        accuracy: matches.len() as f64 / ng as f64,
        matches,
    }
}

/// Per-sample inputs to the classification protocol.
#[derive(Clone, Debug)]
pub struct ClassifySample {
    pub gt_classes: Vec<usize>,
    pub gt_boxes: Vec<[f32; 4]>,
    pub pred_points: Vec<[f32; 2]>,
    /// Nearest-prototype index per predicted point.
    pub proto_ids: Vec<usize>,
}

/// Prototype-to-class assignment plus the three headline accuracies.
#[derive(Clone, Debug)]
pub struct AssignmentResult {
    /// prototype -> class
    pub mapping: Vec<usize>,
    pub confusion: Vec<u64>,
    pub m: usize,
    pub n_classes: usize,
    pub localization: f64,
    pub classification: f64,
    pub both: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Majority-prototype consistency of the reverse class -> prototype
    /// mapping; reported when M < n_classes.
    pub reverse_consistency: Option<f64>,
}

/// Build the prototype/class confusion over matched detections, derive the
/// prototype -> class mapping (Hungarian when M == n_classes, per-prototype
/// majority otherwise), and score localization / classification / both.
pub fn classify(
    samples: &[ClassifySample],
    m: usize,
    n_classes: usize,
    box_size: f32,
    iou_thresh: f64,
) -> AssignmentResult {
    let mut confusion = vec![0u64; m * n_classes];
    let mut total_gt = 0usize;
    let mut matched_pairs: Vec<(usize, usize)> = Vec::new(); // (proto, class)
    for s in samples {
        total_gt += s.gt_classes.len();
        let det = detect_iou(&s.gt_boxes, &s.pred_points, box_size, iou_thresh);
        for (gi, pi) in det.matches {
            let proto = s.proto_ids[pi];
            let class = s.gt_classes[gi];
            confusion[proto * n_classes + class] += 1;
            matched_pairs.push((proto, class));
        }
    }

    let mapping: Vec<usize> = if m == n_classes {
        let maxc = confusion.iter().copied().max().unwrap_or(0) as f64;
        let cost: Vec<f64> = confusion.iter().map(|&c| maxc - c as f64).collect();
        hungarian(&cost, m)
    } else {
        (0..m)
            .map(|p| {
                (0..n_classes)
                    .max_by_key(|&c| confusion[p * n_classes + c])
                    .unwrap_or(0)
            })
            .collect()
    };

    let matched = matched_pairs.len();
    let correct = matched_pairs
        .iter()
        .filter(|&&(p, c)| mapping[p] == c)
        .count();
    let mut per_class_total = vec![0u64; n_classes];
    let mut per_class_correct = vec![0u64; n_classes];
    for &(p, c) in &matched_pairs {
        per_class_total[c] += 1;
        if mapping[p] == c {
            per_class_correct[c] += 1;
        }
    }
    let per_class_accuracy: Vec<f64> = (0..n_classes)
        .map(|c| {
            if per_class_total[c] == 0 {
                0.0
            } else {
                per_class_correct[c] as f64 / per_class_total[c] as f64
            }
        })
        .collect();

    let reverse_consistency = if m < n_classes {
        // majority prototype per class, then agreement of matched keypoints
        let class_major: Vec<usize> = (0..n_classes)
            .map(|c| {
                (0..m)
                    .max_by_key(|&p| confusion[p * n_classes + c])
                    .unwrap_or(0)
            })
            .collect();
        let agree = matched_pairs
            .iter()
            .filter(|&&(p, c)| class_major[c] == p)
            .count();
        Some(if matched == 0 {
            0.0
        } else {
            agree as f64 / matched as f64
        })
    } else {
        None
    };

    AssignmentResult {
        mapping,
        confusion,
        m,
        n_classes,
        localization: if total_gt == 0 {
            1.0
        } else {
            matched as f64 / total_gt as f64
        },
        classification: if matched == 0 {
            0.0
        } else {
            correct as f64 / matched as f64
        },
        both: if total_gt == 0 {
            1.0
        } else {
            correct as f64 / total_gt as f64
        },
        per_class_accuracy,
        reverse_consistency,
    }
}

/// Landmark-regressor input: an `M x K x 2` tensor (flattened row-major).
/// Keypoints assigned to prototype `p` fill row `p` left to right in
/// ascending-x order; unused entries stay zero. Exactly one slot per
/// keypoint is populated.
pub fn regressor_input(
    points: &[[f32; 2]],
    proto_ids: &[usize],
    m: usize,
    k: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k * 2];
    for p in 0..m {
        let mut members: Vec<usize> = (0..points.len()).filter(|&i| proto_ids[i] == p).collect();
        members.sort_by(|&a, &b| points[a][0].partial_cmp(&points[b][0]).unwrap());
        for (slot, &i) in members.iter().enumerate().take(k) {
            out[(p * k + slot) * 2] = points[i][0];
            out[(p * k + slot) * 2 + 1] = points[i][1];
        }
    }
    out
}

/// Least-squares linear map (no bias) from `inputs` (N x D) to `targets`
/// (N x T) via ridge-regularized normal equations. Returns row-major
/// `D x T` weights.
pub fn fit_linear_regressor(inputs: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<Vec<f64>> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(TuskError::ShapeMismatch {
            op: "fit_linear_regressor",
            lhs: vec![inputs.len()],
            rhs: vec![targets.len()],
        });
    }
    let d = inputs[0].len();
    let t = targets[0].len();
    let mut xtx = vec![0.0f64; d * d];
    let mut xty = vec![0.0f64; d * t];
    for (x, y) in inputs.iter().zip(targets.iter()) {
        for i in 0..d {
            let xi = x[i] as f64;
            for j in 0..d {
                xtx[i * d + j] += xi * x[j] as f64;
            }
            for j in 0..t {
                xty[i * t + j] += xi * y[j] as f64;
            }
        }
    }
    for i in 0..d {
        xtx[i * d + i] += 1e-6;
    }
    let mut w = vec![0.0f64; d * t];
    for col in 0..t {
        let b: Vec<f64> = (0..d).map(|i| xty[i * t + col]).collect();
        let sol = linalg::solve(xtx.clone(), b)?;
        for i in 0..d {
            w[i * t + col] = sol[i];
        }
    }
    Ok(w)
}

/// Apply a fitted regressor to one input row.
pub fn apply_regressor(w: &[f64], input: &[f32], t: usize) -> Vec<f64> {
    let d = input.len();
    (0..t)
        .map(|col| (0..d).map(|i| input[i] as f64 * w[i * t + col]).sum())
        .collect()
}

/// Project points onto their top-2 principal components.
/// Returns (projections as N x 2, explained-variance fractions).
pub fn pca2(points: &[Vec<f32>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = points.len();
    if n == 0 {
        return Ok((Vec::new(), [0.0, 0.0]));
    }
    let d = points[0].len();
    let mut mean = vec![0.0f64; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for p in points {
        for i in 0..d {
            let di = p[i] as f64 - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (p[j] as f64 - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (evals, evecs) = linalg::symmetric_eigen(cov, d);
    let proj: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let mut out = [0.0f64; 2];
            for (axis, o) in out.iter_mut().enumerate() {
                *o = (0..d)
                    .map(|i| (p[i] as f64 - mean[i]) * evecs[axis * d + i])
                    .sum();
            }
            out
        })
        .collect();
    let explained = if trace > 0.0 {
        [evals[0] / trace, evals.get(1).copied().unwrap_or(0.0) / trace]
    } else {
        [0.0, 0.0]
    };
    Ok((proj, explained))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force pair-counting ARI: iterate all pixel pairs.
    pub fn ari_bruteforce(gt: &[u32], pred: &[u32]) -> f64 {
        let n = gt.len();
        if n <= 1 {
            return 1.0;
        }
        let mut n11 = 0f64; // same in both
        let mut n00 = 0f64; // different in both
        let mut n10 = 0f64;
        let mut n01 = 0f64;
        for i in 0..n {
            for j in i + 1..n {
                let same_gt = gt[i] == gt[j];
                let same_pred = pred[i] == pred[j];
                match (same_gt, same_pred) {
                    (true, true) => n11 += 1.0,
                    (false, false) => n00 += 1.0,
                    (true, false) => n10 += 1.0,
                    (false, true) => n01 += 1.0,
                }
            }
        }
        let total = n11 + n00 + n10 + n01;
        let expected = (n11 + n10) * (n11 + n01) / total;
        let max_index = 0.5 * ((n11 + n10) + (n11 + n01));
        let denom = max_index - expected;
        if denom.abs() < 1e-12 {
            let identical = (0..n).all(|i| {
                (0..n).all(|j| (gt[i] == gt[j]) == (pred[i] == pred[j]))
            });
            return if identical { 1.0 } else { 0.0 };
        }
        (n11 - expected) / denom
    }

    #[test]
    fn ari_perfect_and_permuted() {
        let gt = vec![0, 0, 1, 1, 2, 2];
        assert!((ari(&gt, &gt, false).unwrap() - 1.0).abs() < 1e-12);
        let perm = vec![5, 5, 3, 3, 9, 9];
        assert!((ari(&gt, &perm, false).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ari_hand_example_minus_half() {
        let gt = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 0, 1];
        assert!((ari(&gt, &pred, false).unwrap() + 0.5).abs() < 1e-12);
        assert!((ari_bruteforce(&gt, &pred) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ari_excludes_background() {
        // gt: bg, bg, 1, 1; pred fills bg pixels arbitrarily
        let gt = vec![0, 0, 1, 1];
        let pred = vec![7, 8, 2, 2];
        assert!((ari(&gt, &pred, true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ari_matches_bruteforce_exhaustive_small() {
        // all partition pairs of up to 5 elements, via label strings 0..k
        fn all_labelings(n: usize) -> Vec<Vec<u32>> {
            let mut out = vec![];
            let mut cur = vec![0u32; n];
            fn rec(i: usize, maxl: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
                if i == cur.len() {
                    out.push(cur.clone());
                    return;
                }
                for l in 0..=maxl.min(i as u32) {
                    cur[i] = l;
                    rec(i + 1, maxl.max(l + 1), cur, out);
                }
            }
            rec(0, 0, &mut cur, &mut out);
            out
        }
        for n in 1..=5 {
            let labelings = all_labelings(n);
            for a in &labelings {
                for b in &labelings {
                    let fast = ari(a, b, false).unwrap();
                    let brute = ari_bruteforce(a, b);
                    assert!(
                        (fast - brute).abs() < 1e-9,
                        "n={n} a={a:?} b={b:?}: {fast} vs {brute}"
                    );
                }
            }
        }
    }

    #[test]
    fn hungarian_identity_and_enumeration() {
        // identity-favoring cost
        let cost = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(hungarian(&cost, 3), vec![0, 1, 2]);

        // random matrices vs exhaustive for n <= 5
        let mut rng = crate::rng::derive(0, "hungarian_test", &[]);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5usize);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let assign = hungarian(&cost, n);
            let got: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
            let best = permutations_min(&cost, n);
            assert!((got - best).abs() < 1e-9, "n={n}: {got} vs {best}");
        }
    }

    pub fn permutations_min(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_all_equal_costs() {
        let cost = vec![2.5f64; 16];
        let assign = hungarian(&cost, 4);
        let mut seen = vec![false; 4];
        for &c in &assign {
            assert!(!seen[c]);
            seen[c] = true;
        }
        let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r * 4 + c]).sum();
        assert!((total - 10.0).abs() < 1e-12);
    }

    #[test]
    fn detect_iou_exact_and_offset() {
        let gt = vec![[10.0f32, 10.0, 30.0, 30.0]];
        // prediction exactly at the center
        let det = detect_iou(&gt, &[[20.0, 20.0]], 20.0, 0.5);
        assert!((det.accuracy - 1.0).abs() < 1e-12);
        // offset by 10 px horizontally: IoU = 200/600 = 1/3 < 0.5
        let det2 = detect_iou(&gt, &[[30.0, 20.0]], 20.0, 0.5);
        assert_eq!(det2.matches.len(), 0);
        assert_eq!(det2.accuracy, 0.0);
    }

    #[test]
    fn detect_iou_one_to_one() {
        // one prediction between two gt boxes; only one match allowed
        let gt = vec![[0.0f32, 0.0, 20.0, 20.0], [4.0, 0.0, 24.0, 20.0]];
        let det = detect_iou(&gt, &[[10.0, 10.0]], 20.0, 0.5);
        assert_eq!(det.matches.len(), 1);
    }

    #[test]
    fn detect_iou_translation_invariant() {
        let mut rng = crate::rng::derive(1, "iou_shift", &[]);
        let gt: Vec<[f32; 4]> = (0..5)
            .map(|_| {
                let x = rng.gen_range(0.0f32..50.0);
                let y = rng.gen_range(0.0f32..50.0);
                [x, y, x + 20.0, y + 20.0]
            })
            .collect();
        let preds: Vec<[f32; 2]> = (0..5)
            .map(|_| [rng.gen_range(0.0f32..70.0), rng.gen_range(0.0f32..70.0)])
            .collect();
        let base = detect_iou(&gt, &preds, 20.0, 0.5);
        let (dx, dy) = (13.5f32, -7.25f32);
        let gt2: Vec<[f32; 4]> = gt
            .iter()
            .map(|b| [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy])
            .collect();
        let preds2: Vec<[f32; 2]> = preds.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        let shifted = detect_iou(&gt2, &preds2, 20.0, 0.5);
        assert_eq!(base.matches, shifted.matches);
    }

    #[test]
    fn classify_oracle_model_is_perfect() {
        // gt centers as predictions, one prototype per class
        let samples: Vec<ClassifySample> = (0..10)
            .map(|i| {
                let classes = vec![i % 4, (i + 1) % 4];
                let boxes = vec![[0.0f32, 0.0, 20.0, 20.0], [40.0, 40.0, 60.0, 60.0]];
                ClassifySample {
                    gt_classes: classes.clone(),
                    gt_boxes: boxes,
                    pred_points: vec![[10.0, 10.0], [50.0, 50.0]],
                    proto_ids: classes,
                }
            })
            .collect();
        let res = classify(&samples, 4, 4, 20.0, 0.5);
        assert!((res.localization - 1.0).abs() < 1e-12);
        assert!((res.classification - 1.0).abs() < 1e-12);
        assert!((res.both - 1.0).abs() < 1e-12);
        assert!(res.both <= res.localization.min(res.classification) + 1e-12);
    }

    #[test]
    fn regressor_input_layout() {
        // all keypoints on one prototype: that row holds them x-sorted
        let pts = vec![[5.0f32, 1.0], [2.0, 2.0], [9.0, 3.0]];
        let ids = vec![1usize, 1, 1];
        let out = regressor_input(&pts, &ids, 3, 3);
        assert_eq!(out.len(), 18);
        // row 1 slots: (2,2), (5,1), (9,3)
        assert_eq!(&out[6..12], &[2.0, 2.0, 5.0, 1.0, 9.0, 3.0]);
        // other rows zero
        assert!(out[..6].iter().all(|&v| v == 0.0));
        assert!(out[12..].iter().all(|&v| v == 0.0));
        // exactly K nonzero coordinate pairs for any input
        let nonzero = out.chunks(2).filter(|c| c[0] != 0.0 || c[1] != 0.0).count();
        assert_eq!(nonzero, 3);

        // one keypoint per prototype: one filled slot per row
        let ids2 = vec![0usize, 1, 2];
        let out2 = regressor_input(&pts, &ids2, 3, 3);
        for p in 0..3 {
            let row = &out2[p * 6..(p + 1) * 6];
            let nz = row.chunks(2).filter(|c| c[0] != 0.0 || c[1] != 0.0).count();
            assert_eq!(nz, 1);
        }
    }

    #[test]
    fn regressor_fits_exact_linear_map() {
        // targets exactly linear in inputs -> tiny residual
        let mut rng = crate::rng::derive(2, "reg", &[]);
        let w_true = [[1.5f32, -0.5], [0.25, 2.0], [-1.0, 0.5]];
        let inputs: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let targets: Vec<Vec<f32>> = inputs
            .iter()
            .map(|x| {
                (0..2)
                    .map(|t| (0..3).map(|i| x[i] * w_true[i][t]).sum())
                    .collect()
            })
            .collect();
        let w = fit_linear_regressor(&inputs, &targets).unwrap();
        for (x, y) in inputs.iter().zip(targets.iter()) {
            let pred = apply_regressor(&w, x, 2);
            for t in 0..2 {
                assert!((pred[t] - y[t] as f64).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn regressor_single_sample_1d() {
        let w = fit_linear_regressor(&[vec![2.0f32]], &[vec![6.0f32]]).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = crate::rng::derive(3, "pca", &[]);
        let pts: Vec<Vec<f32>> = (0..200)
            .map(|_| {
                let t = rng.gen_range(-1.0f32..1.0);
                vec![3.0 * t, t + rng.gen_range(-0.01f32..0.01), 0.0]
            })
            .collect();
        let (proj, explained) = pca2(&pts).unwrap();
        assert_eq!(proj.len(), 200);
        assert!(explained[0] > 0.95, "{explained:?}");
    }
}
