//! Precision-recall integration.

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    let step = (0.95 - 0.5) / 9.0;
    let mut t = [0.0; 10];
    for (i, v) in t.iter_mut().enumerate() {
        *v = i as f64 * step + 0.5;
    }
    t[9] = 0.95;
    t
}

/// The 101 recall sample points 0.00, 0.01, ..., 1.00.
pub fn recall_points() -> [f64; 101] {
    let mut r = [0.0; 101];
    for (i, v) in r.iter_mut().enumerate() {
        *v = i as f64 * 0.01;
    }
    r[100] = 1.0;
    r
}

/// Interpolated precision at each of the 101 recall points.
///
/// `tps` holds the TP flag of every counted detection, already in
/// descending score order; `num_gt` counts scored ground truth. Returns
/// `None` when there is no ground truth.
pub fn precision_at_recall(tps: &[bool], num_gt: usize) -> Option<[f64; 101]> {
    if num_gt == 0 {
        return None;
    }
    let n = tps.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    for &t in tps {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / num_gt as f64);
        precision.push(tp / (fp + tp + f64::EPSILON));
    }
    for i in (1..n).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut q = [0.0; 101];
    for (qv, r) in q.iter_mut().zip(recall_points()) {
        let i = recall.partition_point(|&x| x < r);
        if i < n {
            *qv = precision[i];
        }
    }
    Some(q)
}

/// Pairwise summation with eight-way unrolled leaves of up to 128 values,
/// matching the rounding of common array libraries.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 128;
    let n = v.len();
    if n < 8 {
        v.iter().fold(0.0, |acc, x| acc + x)
    } else if n <= BLOCK {
        let mut r = [0.0; 8];
        r.copy_from_slice(&v[..8]);
        let mut i = 8;
        while i + 8 <= n {
            for j in 0..8 {
                r[j] += v[i + j];
            }
            i += 8;
        }
        let mut res = ((r[0] + r[1]) + (r[2] + r[3])) + ((r[4] + r[5]) + (r[6] + r[7]));
        for x in &v[i..] {
            res += x;
        }
        res
    } else {
        let mut half = n / 2;
        half -= half % 8;
        pairwise_sum(&v[..half]) + pairwise_sum(&v[half..])
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| pairwise_sum(values) / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_is_a_sum() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
        assert_eq!(pairwise_sum(&v[..5]), 10.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn grids() {
        let t = iou_thresholds();
        assert!((t[1] - 0.55).abs() < 1e-12 && t[9] == 0.95);
        assert_eq!(recall_points()[100], 1.0);
    }

    #[test]
    fn perfect_is_one() {
        let q = precision_at_recall(&[true, true], 2).unwrap();
        let ap = mean(&q).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_is_zero_and_no_gt_is_none() {
        assert_eq!(mean(&precision_at_recall(&[], 3).unwrap()), Some(0.0));
        assert!(precision_at_recall(&[true], 0).is_none());
    }

    #[test]
    fn hand_worked_curve() {
        // TP, FP, TP over 2 GT: recall 0.5 at precision 1, recall 1 at 2/3.
        let q = precision_at_recall(&[true, false, true], 2).unwrap();
        assert!((q[50] - 1.0).abs() < 1e-12);
        assert!((q[51] - 2.0 / 3.0).abs() < 1e-12);
        let expected = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((mean(&q).unwrap() - expected).abs() < 1e-12);
    }
}
