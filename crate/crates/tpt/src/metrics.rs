//! Evaluation metrics: Spearman rank correlation and relative-L2 distance.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 1-based ranks with ties resolved to the average of the positions they
/// jointly occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share the average rank
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Domain {
            op: "spearman",
            message: "correlation is undefined for a constant input".into(),
        });
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Rank correlation: Pearson correlation of the average-rank vectors.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length lists of at least 2, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// Mean squared error normalized by the declared score range:
/// (1/N) Σ (|s_n − ŝ_n| / (s_max − s_min))².
pub fn relative_l2(pred: &[f64], truth: &[f64], s_min: f64, s_max: f64) -> Result<f64> {
    if s_max <= s_min {
        return Err(Error::Config(format!(
            "score range [{s_min}, {s_max}] is empty"
        )));
    }
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "relative_l2 needs two equal nonempty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let range = s_max - s_min;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let e = (p - t).abs() / range;
            e * e
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// One evaluation's results. `relative_l2_x100` is the raw relative-L2
/// scaled by 100, the convention used in results tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub spearman: f64,
    pub relative_l2_x100: f64,
    pub n: usize,
    pub s_min: f64,
    pub s_max: f64,
}

impl EvalReport {
    pub fn from_scores(pred: &[f64], truth: &[f64], s_min: f64, s_max: f64) -> Result<Self> {
        Ok(EvalReport {
            spearman: spearman(pred, truth)?,
            relative_l2_x100: 100.0 * relative_l2(pred, truth, s_min, s_max)?,
            n: pred.len(),
            s_min,
            s_max,
        })
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"spearman\": {}, \"relative_l2_x100\": {}, \"n\": {}, \"s_min\": {}, \"s_max\": {}}}",
            self.spearman, self.relative_l2_x100, self.n, self.s_min, self.s_max
        )
    }
}

/// Append one labeled report row to a run-history CSV, writing the header
/// when the file does not exist yet.
pub fn append_history(path: &Path, label: &str, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "label,spearman,relative_l2_x100,n,s_min,s_max")?;
    }
    writeln!(
        f,
        "{label},{},{},{},{},{}",
        report.spearman, report.relative_l2_x100, report.n, report.s_min, report.s_max
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) rank assignment: below-count plus half the tie block.
    fn brute_force_ranks(values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                let less = values.iter().filter(|&&o| o < v).count();
                let equal = values.iter().filter(|&&o| o == v).count();
                less as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn ranks_handle_ties_by_averaging() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(
            average_ranks(&[1.0, 2.0, 2.0, 3.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0]), vec![1.5, 1.5]);
    }

    #[test]
    fn ranks_match_brute_force_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..60);
            // draw from a small integer set so ties actually occur
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
            let fast = average_ranks(&xs);
            let slow = brute_force_ranks(&xs);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_and_reversed_rankings() {
        let truth = vec![3.0, 1.0, 4.0, 1.5, 5.0];
        assert!((spearman(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        let reversed: Vec<f64> = truth.iter().map(|&x| -x).collect();
        assert!((spearman(&reversed, &truth).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(2..50);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            if pred.iter().all(|&x| x == pred[0]) {
                continue;
            }
            let rp = brute_force_ranks(&pred);
            let rt = brute_force_ranks(&truth);
            // plain-loop Pearson, written independently of the library path
            let n_f = n as f64;
            let mp = rp.iter().sum::<f64>() / n_f;
            let mt = rt.iter().sum::<f64>() / n_f;
            let num: f64 = rp.iter().zip(&rt).map(|(p, t)| (p - mp) * (t - mt)).sum();
            let dp: f64 = rp.iter().map(|p| (p - mp) * (p - mp)).sum();
            let dt: f64 = rt.iter().map(|t| (t - mt) * (t - mt)).sum();
            let expect = num / (dp * dt).sqrt();
            let got = spearman(&pred, &truth).unwrap();
            assert!((got - expect).abs() < 1e-9, "got {got}, expected {expect}");
        }
    }

    #[test]
    fn spearman_is_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let n = rng.gen_range(3..40);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let base = spearman(&pred, &truth).unwrap();
            let cubed: Vec<f64> = pred.iter().map(|&x| x * x * x).collect();
            let exps: Vec<f64> = truth.iter().map(|&x| x.exp()).collect();
            assert!((spearman(&cubed, &truth).unwrap() - base).abs() < 1e-12);
            assert!((spearman(&pred, &exps).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_is_rejected() {
        assert!(matches!(
            spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::Domain { .. })
        ));
        assert!(spearman(&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn relative_l2_hand_cases() {
        let truth = vec![10.0, 50.0, 90.0];
        assert_eq!(relative_l2(&truth, &truth, 0.0, 100.0).unwrap(), 0.0);
        // one sample misplaced by the whole range
        assert_eq!(relative_l2(&[100.0], &[0.0], 0.0, 100.0).unwrap(), 1.0);
        assert!(matches!(
            relative_l2(&[1.0], &[1.0], 5.0, 5.0),
            Err(Error::Config(_))
        ));
        assert!(relative_l2(&[], &[], 0.0, 1.0).is_err());
        assert!(relative_l2(&[1.0], &[1.0, 2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn relative_l2_matches_scalar_oracle_and_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let errs: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let pred: Vec<f64> = truth.iter().zip(&errs).map(|(t, e)| t + e).collect();
            let doubled: Vec<f64> =
                truth.iter().zip(&errs).map(|(t, e)| t + 2.0 * e).collect();

            let mut expect = 0.0;
            for i in 0..n {
                let e = (pred[i] - truth[i]).abs() / 100.0;
                expect += e * e;
            }
            expect /= n as f64;

            let got = relative_l2(&pred, &truth, 0.0, 100.0).unwrap();
            assert!((got - expect).abs() < 1e-12);
            let got2 = relative_l2(&doubled, &truth, 0.0, 100.0).unwrap();
            assert!((got2 - 4.0 * got).abs() < 1e-9 * got.max(1.0));
        }
    }

    #[test]
    fn report_serializes_and_appends_history() {
        let pred = vec![10.0, 30.0, 20.0, 40.0];
        let truth = vec![12.0, 28.0, 22.0, 41.0];
        let report = EvalReport::from_scores(&pred, &truth, 0.0, 100.0).unwrap();
        assert!(report.spearman > 0.7);
        assert!(report.relative_l2_x100 > 0.0);
        let json = report.to_json();
        assert!(json.starts_with('{') && json.ends_with('}'));
        assert!(json.contains("\"spearman\""));
        assert!(json.contains("\"n\": 4"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        append_history(&path, "run-a", &report).unwrap();
        append_history(&path, "run-b", &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "label,spearman,relative_l2_x100,n,s_min,s_max");
        assert!(lines[1].starts_with("run-a,"));
        assert!(lines[2].starts_with("run-b,"));
    }
}
