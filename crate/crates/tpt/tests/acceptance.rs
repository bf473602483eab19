//! Acceptance gate: one test per criterion, each printing its measured
//! numbers. Criterion 5 trains three full variants and is the slow one
//! (single-digit minutes); everything else is property-level.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpt::autodiff::params::{ParamStore, TapeParams};
use tpt::autodiff::tape::Tape;
use tpt::autodiff::tensor::Tensor;
use tpt::config::RunConfig;
use tpt::decoder::{DecoderConfig, PositionalEncoding, TptDecoder};
use tpt::harness::{
    ablate, build_run, evaluate_model, gradcheck, load_checkpoint, save_checkpoint, train,
};
use tpt::losses::{
    attention_center, attention_centers_value, diversity_loss, ranking_loss, sparsity_loss,
};
use tpt::metrics::{relative_l2, spearman};
use tpt::regressor::{build_intervals, decode_score, encode_target};

fn tiny_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.data.clips_per_video = 6;
    config.data.feature_dim = 4;
    config.data.phases = 3;
    config.data.train_videos = 12;
    config.data.val_videos = 4;
    config.data.test_videos = 4;
    config.data.seed = 5;
    config.decoder.query_count = 3;
    config.decoder.model_dim = 8;
    config.decoder.layers = 1;
    config.decoder.ffn_dim = 12;
    config.decoder.self_attention_heads = 2;
    config.batch_size = 4;
    config.epochs = 1;
    config.seed = 77;
    config.exemplars = 3;
    config
}

/// Criterion 1: every parameter's gradient of the full loss matches
/// central differences to < 1e-4, in under a minute.
#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();
    let config = tiny_config();
    let report = gradcheck(&config).unwrap();
    let elapsed = started.elapsed();

    let run = build_run(&config).unwrap();
    assert_eq!(report.checks.len(), run.store.len(), "every parameter listed");
    let mut names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), report.checks.len(), "each parameter exactly once");
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {:.3e}\n{}",
        report.max_rel_error,
        report.to_text()
    );
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!(
        "criterion 1 PASS: gradcheck max rel err {:.3e} over {} params in {elapsed:?}",
        report.max_rel_error,
        report.checks.len()
    );
}

/// Criterion 2: across 1000 random decodes, attention rows sum to 1 ± 1e-6
/// and every center lies inside [1, T].
#[test]
fn criterion_2_attention_contract() {
    let config = DecoderConfig {
        query_count: 3,
        model_dim: 8,
        layers: 2,
        ffn_dim: 12,
        self_attention_heads: 2,
        ..DecoderConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let decoder = TptDecoder::register(&mut store, &config, 5, &mut rng).unwrap();

    let mut worst_row_dev = 0.0f64;
    for decode in 0..1000 {
        let t = rng.gen_range(3..16usize);
        let clips = Tensor::randn(&[t, 5], 1.0 + (decode % 7) as f64 * 0.3, &mut rng);
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let set = decoder.decode(&mut tape, &mut lease, &store, &clips).unwrap();
        for &map in &set.attention {
            let tensor = tape.value(map);
            for row in 0..tensor.shape()[0] {
                let sum: f64 = (0..t).map(|col| tensor.at(row, col)).sum();
                worst_row_dev = worst_row_dev.max((sum - 1.0).abs());
                assert!(
                    (sum - 1.0).abs() <= 1e-6,
                    "decode {decode}: row {row} sums to {sum}"
                );
            }
            let centers = attention_centers_value(tensor).unwrap();
            for (k, &c) in centers.iter().enumerate() {
                assert!(
                    (1.0..=t as f64).contains(&c),
                    "decode {decode}: center {k} = {c} outside [1, {t}]"
                );
            }
        }
    }
    println!("criterion 2 PASS: 1000 decodes, worst row-sum deviation {worst_row_dev:.2e}");
}

/// Criterion 3: loss zero-cases and invariances at their exact tolerances.
#[test]
fn criterion_3_loss_zero_cases() {
    let mut tape = Tape::new();

    // margin-satisfying centers (T = 20, margin 1): exactly zero
    let good = tape.leaf(Tensor::new(vec![4, 1], vec![2.5, 6.0, 11.0, 18.5]).unwrap());
    let zero = ranking_loss(&mut tape, good, 20, 1.0).unwrap();
    assert_eq!(tape.value(zero).item(), 0.0, "ranking loss must vanish exactly");

    // any adjacent swap turns it strictly positive
    let base = [2.5, 6.0, 11.0, 18.5];
    for swap in 0..3 {
        let mut centers = base;
        centers.swap(swap, swap + 1);
        let node = tape.leaf(Tensor::new(vec![4, 1], centers.to_vec()).unwrap());
        let loss = ranking_loss(&mut tape, node, 20, 1.0).unwrap();
        assert!(
            tape.value(loss).item() > 0.0,
            "swap at {swap} must be penalized"
        );
    }

    // point-mass attention rows: sparsity below 1e-6
    let t = 9;
    let mut rows = vec![0.0; 3 * t];
    for (k, col) in [1usize, 4, 7].iter().enumerate() {
        rows[k * t + col] = 1.0;
    }
    let attention = tape.leaf(Tensor::new(vec![3, t], rows).unwrap());
    let centers = attention_center(&mut tape, attention).unwrap();
    let sparse = sparsity_loss(&mut tape, attention, centers, false).unwrap();
    let sparse_value = tape.value(sparse).item();
    assert!(sparse_value < 1e-6, "point-mass sparsity {sparse_value}");

    // diversity is permutation-invariant to 1e-12
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.gen_range(2..7usize);
        let values: Vec<f64> = (0..k).map(|_| rng.gen_range(1.0..20.0)).collect();
        let mut permuted = values.clone();
        for i in (1..k).rev() {
            permuted.swap(i, rng.gen_range(0..=i));
        }
        let a = tape.leaf(Tensor::new(vec![k, 1], values).unwrap());
        let b = tape.leaf(Tensor::new(vec![k, 1], permuted).unwrap());
        let la = diversity_loss(&mut tape, a, 1.0).unwrap();
        let lb = diversity_loss(&mut tape, b, 1.0).unwrap();
        let dev = (tape.value(la).item() - tape.value(lb).item()).abs();
        worst = worst.max(dev);
        assert!(dev < 1e-12, "diversity changed by {dev} under permutation");
    }
    println!(
        "criterion 3 PASS: ranking zero-case exact, point-mass sparsity {sparse_value:.2e}, \
         diversity permutation deviation {worst:.2e}"
    );
}

/// Criterion 4: interval builder, encode/decode round-trip, and both
/// metrics against independent oracles.
#[test]
fn criterion_4_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // interval builder vs brute-force sort-and-split on 50 scores
    let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..100.0)).collect();
    let b = 4;
    let intervals = build_intervals(&scores, b).unwrap();
    let mut deltas = Vec::new();
    for (i, &x) in scores.iter().enumerate() {
        for (j, &y) in scores.iter().enumerate() {
            if i != j {
                deltas.push(x - y);
            }
        }
    }
    deltas.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let ideal = deltas.len() as f64 / b as f64;
    let mut assigned = vec![0usize; b];
    for &d in &deltas {
        assigned[intervals.interval_of(d)] += 1;
    }
    for n in 0..b {
        assert!(((intervals.count(n) as f64) - ideal).abs() <= 1.0);
        assert!(((assigned[n] as f64) - ideal).abs() <= 1.0);
    }

    // encode → decode round-trip to 1e-9 on 1000 random in-range deltas
    let lo = intervals.left(0);
    let hi = intervals.right(b - 1);
    let mut worst_rt = 0.0f64;
    for _ in 0..1000 {
        let delta = rng.gen_range(lo..hi);
        let target = encode_target(delta, &intervals);
        let mut probs = vec![0.0; b];
        probs[target.hot] = 1.0;
        let mut regs = vec![0.0; b];
        regs[target.hot] = target.gamma;
        let decoded = decode_score(&probs, &regs, &intervals, 0.0).unwrap();
        worst_rt = worst_rt.max((decoded - delta).abs());
        assert!((decoded - delta).abs() < 1e-9);
    }

    // Spearman and relative-L2 vs plain-loop oracles on 100 random vectors
    let mut worst_sp = 0.0f64;
    let mut worst_rl = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..60usize);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0..15) as f64).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        if pred.iter().all(|&x| x == pred[0]) {
            continue;
        }
        let rank = |xs: &[f64]| -> Vec<f64> {
            xs.iter()
                .map(|&v| {
                    let less = xs.iter().filter(|&&o| o < v).count() as f64;
                    let equal = xs.iter().filter(|&&o| o == v).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rp, rt) = (rank(&pred), rank(&truth));
        let m = n as f64;
        let (mp, mt) = (
            rp.iter().sum::<f64>() / m,
            rt.iter().sum::<f64>() / m,
        );
        let cov: f64 = rp.iter().zip(&rt).map(|(p, t)| (p - mp) * (t - mt)).sum();
        let vp: f64 = rp.iter().map(|p| (p - mp) * (p - mp)).sum();
        let vt: f64 = rt.iter().map(|t| (t - mt) * (t - mt)).sum();
        let expect_sp = cov / (vp * vt).sqrt();
        let got_sp = spearman(&pred, &truth).unwrap();
        worst_sp = worst_sp.max((got_sp - expect_sp).abs());
        assert!((got_sp - expect_sp).abs() < 1e-9);

        let mut expect_rl = 0.0;
        for i in 0..n {
            let e = (pred[i] - truth[i]).abs() / 100.0;
            expect_rl += e * e;
        }
        expect_rl /= m;
        let got_rl = relative_l2(&pred, &truth, 0.0, 100.0).unwrap();
        worst_rl = worst_rl.max((got_rl - expect_rl).abs());
        assert!((got_rl - expect_rl).abs() < 1e-9);
    }
    println!(
        "criterion 4 PASS: bins ±1, round-trip {worst_rt:.2e}, \
         spearman dev {worst_sp:.2e}, R-l2 dev {worst_rl:.2e}"
    );
}

/// The calibrated demonstration profile: T=20, K=5, K_true=5, 600 train /
/// 200 val / 200 test, d=64, λ_sparsity=0.1, 60 epochs.
fn demo_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.decoder.model_dim = 64;
    config.decoder.ffn_dim = 128;
    config.lr_backbone = 1e-3;
    config.loss.weights.sparsity = 0.1;
    config.epochs = 60;
    config
}

/// Criterion 5: the synthetic mechanism demonstration. Full TPT ≥ 0.90
/// test Spearman, ≥ 0.02 over the holistic baseline, attention losses
/// removed hurts, and ≥ 90% of test videos get strictly increasing
/// final-layer centers. All inside 10 minutes.
#[test]
fn criterion_5_mechanism_demonstration() {
    let started = Instant::now();
    let config = demo_config();
    assert_eq!(config.data.clips_per_video, 20);
    assert_eq!(config.decoder.query_count, 5);
    assert_eq!(config.data.phases, 5);
    assert_eq!(config.data.train_videos, 600);
    assert_eq!(config.data.test_videos, 200);

    let dir = tempfile::tempdir().unwrap();
    let variants = [
        "tpt".to_string(),
        "baseline".to_string(),
        "tpt-no-rank-no-sparsity".to_string(),
    ];
    let results = ablate(&config, &variants, dir.path()).unwrap();
    let score = |name: &str| -> f64 {
        results
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.spearman)
            .unwrap()
    };
    let full = score("tpt");
    let baseline = score("baseline");
    let unsupervised = score("tpt-no-rank-no-sparsity");

    // (a) absolute quality
    assert!(full >= 0.90, "full TPT test spearman {full:.4} < 0.90");
    // (b) beats holistic pooling by the directional gap
    assert!(
        full - baseline >= 0.02,
        "gap {:.4} < 0.02 (tpt {full:.4}, baseline {baseline:.4})",
        full - baseline
    );
    // (c) removing the attention losses hurts
    assert!(
        unsupervised < full,
        "without L_rank: {unsupervised:.4} should be below {full:.4}"
    );

    // (d) ordered centers on ≥ 90% of test videos, final layer
    let mut run = build_run(&config).unwrap();
    run.intervals = load_checkpoint(
        &dir.path().join("tpt/checkpoint.tpt"),
        &mut run.store,
        &config.hash(),
    )
    .unwrap();
    let mut increasing = 0usize;
    for video in &run.dataset.test {
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let forward = run
            .model
            .video_forward(&mut tape, &mut lease, &run.store, &video.clips)
            .unwrap();
        let last = *forward.attention.last().unwrap();
        let centers = attention_centers_value(tape.value(last)).unwrap();
        if centers.windows(2).all(|w| w[0] < w[1]) {
            increasing += 1;
        }
    }
    let fraction = increasing as f64 / run.dataset.test.len() as f64;
    assert!(
        fraction >= 0.90,
        "strictly increasing centers on only {:.1}% of test videos",
        100.0 * fraction
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 600, "demonstration took {elapsed:?}");
    println!(
        "criterion 5 PASS: tpt {full:.4}, baseline {baseline:.4} (gap {:.4}), \
         no-attention-losses {unsupervised:.4}, ordered centers {:.1}%, in {elapsed:?}",
        full - baseline,
        100.0 * fraction
    );
}

/// Criterion 6: with positional encoding off, permuting clips permutes the
/// first-layer attention columns identically; with it on, the property
/// breaks.
#[test]
fn criterion_6_permutation_property() {
    let t = 8;
    let backbone = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let clips = Tensor::randn(&[t, backbone], 1.0, &mut rng);
    // a fixed non-trivial permutation
    let perm: Vec<usize> = vec![3, 0, 6, 1, 7, 2, 5, 4];
    let permuted_rows: Vec<Vec<f64>> = perm
        .iter()
        .map(|&src| (0..backbone).map(|j| clips.at(src, j)).collect())
        .collect();
    let permuted = Tensor::from_rows(&permuted_rows).unwrap();

    let first_layer_map = |pe: PositionalEncoding, input: &Tensor| -> Tensor {
        let config = DecoderConfig {
            query_count: 3,
            model_dim: 8,
            layers: 2,
            ffn_dim: 12,
            self_attention_heads: 2,
            positional_encoding: pe,
            ..DecoderConfig::default()
        };
        let mut store = ParamStore::new();
        let mut seed_rng = ChaCha8Rng::seed_from_u64(999);
        let decoder = TptDecoder::register(&mut store, &config, backbone, &mut seed_rng).unwrap();
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let set = decoder.decode(&mut tape, &mut lease, &store, input).unwrap();
        tape.value(set.attention[0]).clone()
    };

    // PE off: α'(k, j) = α(k, perm[j]) to 1e-9
    let base = first_layer_map(PositionalEncoding::Off, &clips);
    let shuffled = first_layer_map(PositionalEncoding::Off, &permuted);
    let mut worst = 0.0f64;
    for k in 0..3 {
        for (j, &src) in perm.iter().enumerate() {
            worst = worst.max((shuffled.at(k, j) - base.at(k, src)).abs());
        }
    }
    assert!(worst < 1e-9, "equivariance broken by {worst:.2e} with PE off");

    // PE on: the identical comparison must fail
    let base_pe = first_layer_map(PositionalEncoding::Memory, &clips);
    let shuffled_pe = first_layer_map(PositionalEncoding::Memory, &permuted);
    let mut dev = 0.0f64;
    for k in 0..3 {
        for (j, &src) in perm.iter().enumerate() {
            dev = dev.max((shuffled_pe.at(k, j) - base_pe.at(k, src)).abs());
        }
    }
    assert!(
        dev > 1e-9,
        "positional encoding should break equivariance, deviation {dev:.2e}"
    );
    println!(
        "criterion 6 PASS: PE off deviation {worst:.2e}, PE on deviation {dev:.2e}"
    );
}

/// Criterion 7: bit-identical first-batch loss across two runs, and an
/// exact checkpoint round trip.
#[test]
fn criterion_7_reproducibility_and_persistence() {
    let config = tiny_config();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (run_a, outcome_a) = train(&config, dir_a.path()).unwrap();
    let (_, outcome_b) = train(&config, dir_b.path()).unwrap();
    assert_eq!(
        outcome_a.first_batch_loss.to_bits(),
        outcome_b.first_batch_loss.to_bits(),
        "first-batch losses differ: {} vs {}",
        outcome_a.first_batch_loss,
        outcome_b.first_batch_loss
    );

    // save the live post-training parameters, reload fresh, compare eval
    let (before, rows_before) = evaluate_model(&run_a, &run_a.dataset.test).unwrap();
    let live = dir_a.path().join("live.tpt");
    save_checkpoint(&live, &run_a.store, &run_a.intervals, &config.hash()).unwrap();
    let mut reloaded = build_run(&config).unwrap();
    reloaded.intervals = load_checkpoint(&live, &mut reloaded.store, &config.hash()).unwrap();
    let (after, rows_after) = evaluate_model(&reloaded, &reloaded.dataset.test).unwrap();
    assert_eq!(before.spearman.to_bits(), after.spearman.to_bits());
    assert_eq!(
        before.relative_l2_x100.to_bits(),
        after.relative_l2_x100.to_bits()
    );
    for (x, y) in rows_before.iter().zip(&rows_after) {
        assert_eq!(x.prediction.to_bits(), y.prediction.to_bits());
    }
    println!(
        "criterion 7 PASS: first-batch loss {} bit-identical across runs, \
         checkpoint round-trip exact over {} predictions",
        outcome_a.first_batch_loss,
        rows_before.len()
    );
}
