//! Part-aware contrastive score regressor: pairwise part fusion, group
//! intervals over training score differences, classification/regression
//! heads, and score reconstruction from an exemplar.
//!
//! Score differences Δs are enumerated over all ordered training pairs
//! (antisymmetric multiset), sorted, and split into B contiguous intervals
//! holding equal pair counts (±1). The regressor classifies which interval
//! a test/exemplar difference falls into and regresses its position inside
//! that interval.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamStore, TapeParams};
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// B contiguous, increasing score-difference intervals with equal training
/// pair counts. The outer edges are treated as ±∞ at assignment time.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIntervals {
    /// B+1 increasing edges; interval n is [edges[n], edges[n+1]).
    edges: Vec<f64>,
    /// Training pairs per interval at construction time.
    counts: Vec<usize>,
}

impl GroupIntervals {
    pub fn groups(&self) -> usize {
        self.counts.len()
    }

    pub fn left(&self, n: usize) -> f64 {
        self.edges[n]
    }

    pub fn right(&self, n: usize) -> f64 {
        self.edges[n + 1]
    }

    pub fn width(&self, n: usize) -> f64 {
        self.right(n) - self.left(n)
    }

    pub fn count(&self, n: usize) -> usize {
        self.counts[n]
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Interval index for a difference; every real maps to exactly one
    /// interval (outer intervals absorb out-of-range values).
    pub fn interval_of(&self, delta: f64) -> usize {
        let b = self.groups();
        for n in 0..b {
            if delta < self.edges[n + 1] {
                return n;
            }
        }
        b - 1
    }

    /// Serialize for embedding in a checkpoint.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                "intervals.edges".to_string(),
                Tensor::new(vec![self.edges.len()], self.edges.clone()).expect("nonempty"),
            ),
            (
                "intervals.counts".to_string(),
                Tensor::new(
                    vec![self.counts.len()],
                    self.counts.iter().map(|&c| c as f64).collect(),
                )
                .expect("nonempty"),
            ),
        ]
    }

    /// Rebuild from checkpoint tensors.
    pub fn from_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    message: format!("missing {name}"),
                })
        };
        let edges = find("intervals.edges")?.data().to_vec();
        let counts: Vec<usize> = find("intervals.counts")?
            .data()
            .iter()
            .map(|&c| c as usize)
            .collect();
        if edges.len() != counts.len() + 1
            || counts.is_empty()
            || edges.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format {
                what: "checkpoint",
                message: "inconsistent interval table".into(),
            });
        }
        Ok(GroupIntervals { edges, counts })
    }
}

/// Build the interval table from training scores: all ordered-pair
/// differences, sorted, cut into B equal-count bins. Interior edges sit at
/// the midpoint between the neighboring sorted differences.
pub fn build_intervals(train_scores: &[f64], b: usize) -> Result<GroupIntervals> {
    if train_scores.len() < 2 {
        return Err(Error::Config(format!(
            "interval construction needs at least 2 training scores, got {}",
            train_scores.len()
        )));
    }
    if b == 0 {
        return Err(Error::Config("need at least one interval".into()));
    }
    let n = train_scores.len();
    let pair_count = n * (n - 1);
    if b > pair_count {
        return Err(Error::Config(format!(
            "{b} intervals exceed the {pair_count} ordered training pairs"
        )));
    }
    let mut deltas = Vec::with_capacity(pair_count);
    for (i, &si) in train_scores.iter().enumerate() {
        for (j, &sj) in train_scores.iter().enumerate() {
            if i != j {
                deltas.push(si - sj);
            }
        }
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let base = pair_count / b;
    let extra = pair_count % b;
    let mut edges = Vec::with_capacity(b + 1);
    let mut counts = Vec::with_capacity(b);
    edges.push(deltas[0]);
    let mut cursor = 0usize;
    for bin in 0..b {
        let take = base + usize::from(bin < extra);
        cursor += take;
        counts.push(take);
        if bin + 1 < b {
            edges.push(0.5 * (deltas[cursor - 1] + deltas[cursor]));
        }
    }
    edges.push(deltas[pair_count - 1]);
    Ok(GroupIntervals { edges, counts })
}

/// One-hot interval label plus the within-interval regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTarget {
    pub hot: usize,
    /// γ ∈ [0,1]: relative position of Δs inside the hot interval.
    pub gamma: f64,
}

pub fn encode_target(delta: f64, intervals: &GroupIntervals) -> GroupTarget {
    let hot = intervals.interval_of(delta);
    let width = intervals.width(hot);
    let gamma = if width > 0.0 {
        ((delta - intervals.left(hot)) / width).clamp(0.0, 1.0)
    } else {
        0.0
    };
    GroupTarget { hot, gamma }
}

/// Reconstruct a score from head outputs: pick the most probable interval
/// (ties → lowest index), clamp γ̃ into [0,1], and offset the exemplar
/// score. In difficulty mode the caller multiplies the returned raw score
/// by the test video's difficulty.
pub fn decode_score(
    probabilities: &[f64],
    regressions: &[f64],
    intervals: &GroupIntervals,
    s0: f64,
) -> Result<f64> {
    let b = intervals.groups();
    if probabilities.len() != b || regressions.len() != b {
        return Err(Error::Contract(format!(
            "expected {b} probabilities and regressions, got {} and {}",
            probabilities.len(),
            regressions.len()
        )));
    }
    let mut best = 0usize;
    for n in 1..b {
        if probabilities[n] > probabilities[best] {
            best = n;
        }
    }
    let gamma = regressions[best].clamp(0.0, 1.0);
    let delta = intervals.left(best) + gamma * intervals.width(best);
    Ok(s0 + delta)
}

/// How predictions from multiple exemplars are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExemplarFusion {
    Mean,
    Median,
}

impl FromStr for ExemplarFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ExemplarFusion::Mean),
            "median" => Ok(ExemplarFusion::Median),
            other => Err(Error::Config(format!(
                "unknown exemplar fusion {other:?} (expected mean | median)"
            ))),
        }
    }
}

impl std::fmt::Display for ExemplarFusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExemplarFusion::Mean => "mean",
            ExemplarFusion::Median => "median",
        })
    }
}

pub fn fuse_predictions(predictions: &[f64], fusion: ExemplarFusion) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Contract("no exemplar predictions to fuse".into()));
    }
    match fusion {
        ExemplarFusion::Mean => {
            Ok(predictions.iter().sum::<f64>() / predictions.len() as f64)
        }
        ExemplarFusion::Median => {
            let mut sorted = predictions.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
            let mid = sorted.len() / 2;
            Ok(if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                0.5 * (sorted[mid - 1] + sorted[mid])
            })
        }
    }
}

/// Where part information is pooled on the way to the relative score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// r_k per part pair, then average-pool over parts.
    PartWise,
    /// Pool each video's parts first, then one relative representation.
    PartEnhancedHolistic,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "part-wise" => Ok(FusionMode::PartWise),
            "part-enhanced-holistic" => Ok(FusionMode::PartEnhancedHolistic),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected part-wise | part-enhanced-holistic)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::PartWise => "part-wise",
            FusionMode::PartEnhancedHolistic => "part-enhanced-holistic",
        })
    }
}

/// The regressor's trainable stack: a shared pairwise MLP f_r and two
/// two-layer heads (interval probabilities and within-interval positions).
pub struct Regressor {
    model_dim: usize,
    groups: usize,
    fusion: FusionMode,
}

impl Regressor {
    pub fn register(
        store: &mut ParamStore,
        model_dim: usize,
        groups: usize,
        fusion: FusionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if model_dim == 0 || groups == 0 {
            return Err(Error::Config(
                "regressor needs positive model dim and group count".into(),
            ));
        }
        let d = model_dim;
        store.register("regressor.fr.w1", Tensor::xavier(2 * d, d, rng))?;
        store.register("regressor.fr.b1", Tensor::zeros(&[1, d]))?;
        store.register("regressor.fr.w2", Tensor::xavier(d, d, rng))?;
        store.register("regressor.fr.b2", Tensor::zeros(&[1, d]))?;
        for head in ["cls", "reg"] {
            store.register(&format!("regressor.{head}.w1"), Tensor::xavier(d, d, rng))?;
            store.register(&format!("regressor.{head}.b1"), Tensor::zeros(&[1, d]))?;
            store.register(&format!("regressor.{head}.w2"), Tensor::xavier(d, groups, rng))?;
            store.register(&format!("regressor.{head}.b2"), Tensor::zeros(&[1, groups]))?;
        }
        Ok(Regressor {
            model_dim,
            groups,
            fusion,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let w1 = lease.by_name(tape, store, &format!("{prefix}.w1"))?;
        let b1 = lease.by_name(tape, store, &format!("{prefix}.b1"))?;
        let w2 = lease.by_name(tape, store, &format!("{prefix}.w2"))?;
        let b2 = lease.by_name(tape, store, &format!("{prefix}.b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        tape.add(out, b2)
    }

    fn mean_rows(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.value(x).shape()[0];
        let pool = tape.leaf(Tensor::new(vec![1, k], vec![1.0 / k as f64; k])?);
        tape.matmul(pool, x)
    }

    /// Head outputs for a (test, exemplar) part pair: interval
    /// probabilities l̃ and within-interval regressions γ̃, each `[1, B]`.
    pub fn regress(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        parts: NodeId,
        exemplar_parts: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let sa = tape.value(parts).shape().to_vec();
        let sb = tape.value(exemplar_parts).shape().to_vec();
        if sa != sb || sa.len() != 2 || sa[1] != self.model_dim {
            return Err(Error::Contract(format!(
                "part sets must both be [K, {}], got {sa:?} and {sb:?}",
                self.model_dim
            )));
        }
        let fused = match self.fusion {
            FusionMode::PartWise => {
                let paired = tape.concat(&[parts, exemplar_parts], 1)?;
                let relative = self.mlp(tape, lease, store, "regressor.fr", paired)?;
                self.mean_rows(tape, relative)?
            }
            FusionMode::PartEnhancedHolistic => {
                let pooled_test = self.mean_rows(tape, parts)?;
                let pooled_ex = self.mean_rows(tape, exemplar_parts)?;
                let paired = tape.concat(&[pooled_test, pooled_ex], 1)?;
                self.mlp(tape, lease, store, "regressor.fr", paired)?
            }
        };
        let logits = self.mlp(tape, lease, store, "regressor.cls", fused)?;
        let probabilities = tape.sigmoid(logits);
        let regressions = self.mlp(tape, lease, store, "regressor.reg", fused)?;
        Ok((probabilities, regressions))
    }
}

/// Per-group BCE on the probabilities (clamped before the logs) and
/// squared error on the hot interval's regression only.
pub fn classification_regression_loss(
    tape: &mut Tape,
    probabilities: NodeId,
    regressions: NodeId,
    target: &GroupTarget,
    groups: usize,
) -> Result<(NodeId, NodeId)> {
    let shape = tape.value(probabilities).shape().to_vec();
    if shape != [1, groups] || tape.value(regressions).shape() != shape.as_slice() {
        return Err(Error::Contract(format!(
            "expected [1, {groups}] head outputs, got {:?} and {:?}",
            shape,
            tape.value(regressions).shape()
        )));
    }
    if target.hot >= groups {
        return Err(Error::Contract(format!(
            "hot interval {} out of range for {groups} groups",
            target.hot
        )));
    }
    let mut hot = vec![0.0; groups];
    hot[target.hot] = 1.0;
    let labels = tape.leaf(Tensor::new(vec![1, groups], hot.clone())?);
    let inverse_labels = tape.leaf(Tensor::new(
        vec![1, groups],
        hot.iter().map(|l| 1.0 - l).collect(),
    )?);

    let clamped = tape.clamp(probabilities, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
    let log_p = tape.log(clamped)?;
    let ones = tape.leaf(Tensor::full(&[1, groups], 1.0));
    let one_minus = tape.sub(ones, clamped)?;
    let log_q = tape.log(one_minus)?;
    let pos = tape.mul(labels, log_p)?;
    let neg = tape.mul(inverse_labels, log_q)?;
    let both = tape.add(pos, neg)?;
    let summed = tape.sum(both);
    let l_cls = tape.scale(summed, -1.0);

    let mask = tape.leaf(Tensor::new(vec![1, groups], hot)?);
    let masked = tape.mul(regressions, mask)?;
    let predicted = tape.sum(masked);
    let target_gamma = tape.leaf(Tensor::scalar(target.gamma));
    let err = tape.sub(predicted, target_gamma)?;
    let l_reg = tape.mul(err, err)?;

    Ok((l_cls, l_reg))
}

/// CSV dump of the interval table: `n, x_left, x_right, train_pairs`.
pub fn write_intervals_csv(path: &Path, intervals: &GroupIntervals) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "n,x_left,x_right,train_pairs")?;
    for n in 0..intervals.groups() {
        writeln!(
            f,
            "{},{},{},{}",
            n + 1,
            intervals.left(n),
            intervals.right(n),
            intervals.count(n)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_point_symmetric_case_splits_at_zero() {
        let iv = build_intervals(&[0.0, 10.0], 2).unwrap();
        assert_eq!(iv.groups(), 2);
        assert_eq!(iv.edges(), &[-10.0, 0.0, 10.0]);
        assert_eq!(iv.count(0), 1);
        assert_eq!(iv.count(1), 1);
    }

    #[test]
    fn ordered_pair_deltas_are_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..100.0)).collect();
        let mut deltas = Vec::new();
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if i != j {
                    deltas.push(a - b);
                }
            }
        }
        let mut sorted = deltas.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut negated: Vec<f64> = deltas.iter().map(|d| -d).collect();
        negated.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in sorted.iter().zip(&negated) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_counts_match_brute_force_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..100.0)).collect();
        let b = 4;
        let iv = build_intervals(&scores, b).unwrap();

        // brute force: sort all ordered-pair deltas, count how many land in
        // each interval by direct assignment
        let mut deltas = Vec::new();
        for (i, &a) in scores.iter().enumerate() {
            for (j, &x) in scores.iter().enumerate() {
                if i != j {
                    deltas.push(a - x);
                }
            }
        }
        let total = deltas.len();
        let mut assigned = vec![0usize; b];
        for &d in &deltas {
            assigned[iv.interval_of(d)] += 1;
        }
        let ideal = total as f64 / b as f64;
        for n in 0..b {
            assert!(
                ((assigned[n] as f64) - ideal).abs() <= 1.0,
                "interval {n} holds {} of {total}",
                assigned[n]
            );
            assert!(((iv.count(n) as f64) - ideal).abs() <= 1.0);
        }
        // contiguous and increasing
        for n in 0..b {
            assert!(iv.left(n) < iv.right(n));
            if n + 1 < b {
                assert_eq!(iv.right(n), iv.left(n + 1));
            }
        }
    }

    #[test]
    fn too_many_intervals_is_a_config_error() {
        assert!(matches!(
            build_intervals(&[0.0, 10.0], 3),
            Err(Error::Config(_))
        ));
        assert!(build_intervals(&[1.0], 1).is_err());
        assert!(build_intervals(&[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn encode_hand_cases() {
        let iv = build_intervals(&[0.0, 4.0, 10.0], 3).unwrap();
        // left edge of an interval → γ = 0
        let t = encode_target(iv.left(1), &iv);
        assert_eq!(t.hot, 1);
        assert_eq!(t.gamma, 0.0);
        // midpoint → γ = 0.5
        let mid = 0.5 * (iv.left(2) + iv.right(2));
        let t = encode_target(mid, &iv);
        assert_eq!(t.hot, 2);
        assert!((t.gamma - 0.5).abs() < 1e-12);
        // out of range clamps into the outer intervals
        let t = encode_target(-1e9, &iv);
        assert_eq!(t.hot, 0);
        assert_eq!(t.gamma, 0.0);
        let t = encode_target(1e9, &iv);
        assert_eq!(t.hot, 2);
        assert_eq!(t.gamma, 1.0);
    }

    #[test]
    fn encode_decode_round_trip_is_exact_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..100.0)).collect();
        let iv = build_intervals(&scores, 5).unwrap();
        let lo = iv.left(0);
        let hi = iv.right(iv.groups() - 1);
        for _ in 0..1000 {
            let delta = rng.gen_range(lo..hi);
            let target = encode_target(delta, &iv);
            let mut probs = vec![0.0; iv.groups()];
            probs[target.hot] = 1.0;
            let mut regs = vec![0.0; iv.groups()];
            regs[target.hot] = target.gamma;
            let s = decode_score(&probs, &regs, &iv, 0.0).unwrap();
            assert!((s - delta).abs() < 1e-9, "delta {delta} decoded as {s}");
        }
    }

    #[test]
    fn decode_clamps_gamma_and_breaks_ties_low() {
        let iv = build_intervals(&[0.0, 10.0], 2).unwrap();
        // γ̃ beyond [0,1] stays inside the chosen interval
        let s = decode_score(&[1.0, 0.0], &[5.0, 0.0], &iv, 0.0).unwrap();
        assert_eq!(s, iv.right(0));
        let s = decode_score(&[1.0, 0.0], &[-3.0, 0.0], &iv, 0.0).unwrap();
        assert_eq!(s, iv.left(0));
        // tie → lowest index
        let s = decode_score(&[0.5, 0.5], &[0.0, 0.0], &iv, 0.0).unwrap();
        assert_eq!(s, iv.left(0));
        // monotone in γ̃ inside one interval
        let lowmid = decode_score(&[1.0, 0.0], &[0.3, 0.0], &iv, 0.0).unwrap();
        let highmid = decode_score(&[1.0, 0.0], &[0.7, 0.0], &iv, 0.0).unwrap();
        assert!(lowmid < highmid);
    }

    #[test]
    fn interval_tensors_round_trip() {
        let iv = build_intervals(&[0.0, 3.0, 9.0, 12.0], 4).unwrap();
        let tensors = iv.to_tensors();
        let back = GroupIntervals::from_tensors(&tensors).unwrap();
        assert_eq!(iv, back);
        assert!(GroupIntervals::from_tensors(&tensors[..1]).is_err());
    }

    fn test_regressor(
        fusion: FusionMode,
        d: usize,
        b: usize,
        seed: u64,
    ) -> (ParamStore, Regressor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg = Regressor::register(&mut store, d, b, fusion, &mut rng).unwrap();
        (store, reg)
    }

    fn random_parts(k: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![k, d],
            (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn regress_outputs_are_probabilities_and_order_matters() {
        let (store, reg) = test_regressor(FusionMode::PartWise, 8, 4, 51);
        let a = random_parts(3, 8, 1);
        let b = random_parts(3, 8, 2);

        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let an = tape.leaf(a.clone());
        let bn = tape.leaf(b.clone());
        let (p_ab, g_ab) = reg.regress(&mut tape, &mut lease, &store, an, bn).unwrap();
        assert_eq!(tape.value(p_ab).shape(), &[1, 4]);
        assert_eq!(tape.value(g_ab).shape(), &[1, 4]);
        assert!(tape.value(p_ab).data().iter().all(|&p| p > 0.0 && p < 1.0));

        let (p_ba, _) = reg.regress(&mut tape, &mut lease, &store, bn, an).unwrap();
        let diff: f64 = tape
            .value(p_ab)
            .data()
            .iter()
            .zip(tape.value(p_ba).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "swapping test and exemplar must matter");
    }

    #[test]
    fn part_alignment_is_load_bearing() {
        let (store, reg) = test_regressor(FusionMode::PartWise, 8, 4, 52);
        let a = random_parts(3, 8, 3);
        let b = random_parts(3, 8, 4);
        let mut shuffled_rows: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..8).map(|j| b.at(k, j)).collect())
            .collect();
        shuffled_rows.swap(0, 2);
        let b_shuffled = Tensor::from_rows(&shuffled_rows).unwrap();

        let run = |ex: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let an = tape.leaf(a.clone());
            let bn = tape.leaf(ex.clone());
            let (p, _) = reg.regress(&mut tape, &mut lease, &store, an, bn).unwrap();
            tape.value(p).data().to_vec()
        };
        let orig = run(&b);
        let shuf = run(&b_shuffled);
        let diff: f64 = orig.iter().zip(&shuf).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "shuffling one side's parts must change output");
    }

    #[test]
    fn k_mismatch_is_a_contract_error() {
        let (store, reg) = test_regressor(FusionMode::PartWise, 8, 4, 53);
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let a = tape.leaf(random_parts(3, 8, 5));
        let b = tape.leaf(random_parts(2, 8, 6));
        assert!(matches!(
            reg.regress(&mut tape, &mut lease, &store, a, b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fusion_modes_agree_for_single_part_and_differ_otherwise() {
        // same parameters in both stores (same seed)
        let (store_pw, reg_pw) = test_regressor(FusionMode::PartWise, 8, 4, 54);
        let (store_ph, reg_ph) =
            test_regressor(FusionMode::PartEnhancedHolistic, 8, 4, 54);

        let run = |reg: &Regressor, store: &ParamStore, k: usize| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let a = tape.leaf(random_parts(k, 8, 7));
            let b = tape.leaf(random_parts(k, 8, 8));
            let (p, g) = reg.regress(&mut tape, &mut lease, store, a, b).unwrap();
            (
                tape.value(p).data().to_vec(),
                tape.value(g).data().to_vec(),
            )
        };

        let (p1, g1) = run(&reg_pw, &store_pw, 1);
        let (p2, g2) = run(&reg_ph, &store_ph, 1);
        for (x, y) in p1.iter().zip(&p2).chain(g1.iter().zip(&g2)) {
            assert!((x - y).abs() < 1e-12);
        }

        let (p1, _) = run(&reg_pw, &store_pw, 3);
        let (p2, _) = run(&reg_ph, &store_ph, 3);
        let diff: f64 = p1.iter().zip(&p2).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn loss_hand_cases_and_scalar_oracle() {
        let mut tape = Tape::new();
        // perfect prediction: probabilities at the clamp edges, γ̃ = γ
        let target = GroupTarget { hot: 1, gamma: 0.4 };
        let p = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let g = tape.leaf(Tensor::new(vec![1, 3], vec![9.0, 0.4, -2.0]).unwrap());
        let (lc, lr) = classification_regression_loss(&mut tape, p, g, &target, 3).unwrap();
        assert!(tape.value(lc).item() < 1e-5);
        assert!(tape.value(lc).item() > 0.0, "clamped BCE is strictly positive");
        assert!(tape.value(lr).item() < 1e-18);

        // l̃ = 0.5 everywhere, B = 4 → 4·log 2
        let target = GroupTarget { hot: 2, gamma: 0.0 };
        let p = tape.leaf(Tensor::full(&[1, 4], 0.5));
        let g = tape.leaf(Tensor::zeros(&[1, 4]));
        let (lc, _) = classification_regression_loss(&mut tape, p, g, &target, 4).unwrap();
        assert!((tape.value(lc).item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // random case against a plain-loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let b = rng.gen_range(1..6usize);
            let hot = rng.gen_range(0..b);
            let gamma: f64 = rng.gen_range(0.0..1.0);
            let probs: Vec<f64> = (0..b).map(|_| rng.gen_range(0.01..0.99)).collect();
            let regs: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..2.0)).collect();

            let mut expect_cls = 0.0;
            for n in 0..b {
                let l = if n == hot { 1.0 } else { 0.0 };
                let p = probs[n].clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
                expect_cls -= l * p.ln() + (1.0 - l) * (1.0 - p).ln();
            }
            let expect_reg = (regs[hot] - gamma) * (regs[hot] - gamma);

            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::new(vec![1, b], probs).unwrap());
            let g = tape.leaf(Tensor::new(vec![1, b], regs).unwrap());
            let (lc, lr) =
                classification_regression_loss(&mut tape, p, g, &GroupTarget { hot, gamma }, b)
                    .unwrap();
            assert!((tape.value(lc).item() - expect_cls).abs() < 1e-12);
            assert!((tape.value(lr).item() - expect_reg).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (mut store, reg) = test_regressor(FusionMode::PartWise, 6, 3, 71);
        let a = random_parts(2, 6, 9);
        let b = random_parts(2, 6, 10);
        let target = GroupTarget { hot: 1, gamma: 0.3 };

        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let an = tape.leaf(a.clone());
            let bn = tape.leaf(b.clone());
            let (p, g) = reg.regress(&mut tape, &mut lease, store, an, bn).unwrap();
            let (lc, lr) =
                classification_regression_loss(&mut tape, p, g, &target, 3).unwrap();
            let total = tape.add(lc, lr).unwrap();
            tape.value(total).item()
        };

        store.zero_grads();
        {
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let an = tape.leaf(a.clone());
            let bn = tape.leaf(b.clone());
            let (p, g) = reg.regress(&mut tape, &mut lease, &store, an, bn).unwrap();
            let (lc, lr) =
                classification_regression_loss(&mut tape, p, g, &target, 3).unwrap();
            let total = tape.add(lc, lr).unwrap();
            tape.backward(total).unwrap();
            store.accumulate_grads(&tape);
        }

        let h = 1e-5;
        for name in ["regressor.fr.w1", "regressor.fr.w2", "regressor.cls.w2", "regressor.reg.w2"] {
            let slot = store.slot(name).unwrap();
            let analytic = store.grad(slot).to_vec();
            let n = store.value(slot).len();
            // probe a deterministic subset to keep the test fast
            for i in (0..n).step_by(7) {
                let orig = store.value(slot).data()[i];
                store.value_mut(slot).data_mut()[i] = orig + h;
                let up = loss_of(&store);
                store.value_mut(slot).data_mut()[i] = orig - h;
                let dn = loss_of(&store);
                store.value_mut(slot).data_mut()[i] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs()
                    / analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{i}]: rel err {rel}");
            }
        }
    }

    #[test]
    fn exemplar_fusion_rules() {
        assert_eq!(
            fuse_predictions(&[80.0, 82.0, 84.0], ExemplarFusion::Mean).unwrap(),
            82.0
        );
        assert_eq!(
            fuse_predictions(&[77.0], ExemplarFusion::Mean).unwrap(),
            77.0
        );
        assert_eq!(
            fuse_predictions(&[5.0, 5.0, 5.0], ExemplarFusion::Mean).unwrap(),
            5.0
        );
        assert_eq!(
            fuse_predictions(&[9.0, 1.0, 5.0], ExemplarFusion::Median).unwrap(),
            5.0
        );
        assert_eq!(
            fuse_predictions(&[9.0, 1.0, 5.0, 7.0], ExemplarFusion::Median).unwrap(),
            6.0
        );
        assert!(fuse_predictions(&[], ExemplarFusion::Mean).is_err());
        assert!("median".parse::<ExemplarFusion>().is_ok());
        assert!("midpoint".parse::<ExemplarFusion>().is_err());
        assert!("part-wise".parse::<FusionMode>().is_ok());
        assert!("holistic".parse::<FusionMode>().is_err());
    }

    #[test]
    fn intervals_csv_lists_all_groups() {
        let iv = build_intervals(&[0.0, 5.0, 11.0], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intervals.csv");
        write_intervals_csv(&path, &iv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("n,x_left,x_right,train_pairs"));
    }
}
