//! Training, evaluation, ablation, and gradient-check drivers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::adam::{Adam, AdamConfig};
use crate::autodiff::checkpoint::{read_tensors, write_tensors};
use crate::autodiff::params::{ParamStore, TapeParams};
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::config::RunConfig;
use crate::data::{
    generate_dataset, sample_train_pair, select_inference_exemplars, Dataset, ScoredVideo,
};
use crate::error::{Error, Result};
use crate::metrics::{append_history, EvalReport};
use crate::model::{PartGenerator, TptModel};
use crate::regressor::{build_intervals, write_intervals_csv, GroupIntervals};

/// Mixing constant for deriving per-video seeds (same scheme the data
/// generator uses for per-video noise).
const SEED_MIX: u64 = 0x9E3779B97F4A7C15;

/// Everything a run needs in memory: data, parameters, model, intervals.
pub struct Run {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub store: ParamStore,
    pub model: TptModel,
    pub intervals: GroupIntervals,
}

/// Build the run state deterministically from the config alone.
pub fn build_run(config: &RunConfig) -> Result<Run> {
    config.validate()?;
    let dataset = generate_dataset(&config.data)?;
    let raw_scores: Vec<f64> = dataset.train.iter().map(|v| v.raw_score).collect();
    let intervals = build_intervals(&raw_scores, config.groups)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = TptModel::register(
        &mut store,
        &config.decoder,
        config.part_generator,
        config.groups,
        config.fusion,
        config.data.feature_dim,
        config.data.clips_per_video,
        &mut rng,
    )?;
    Ok(Run {
        config: config.clone(),
        dataset,
        store,
        model,
        intervals,
    })
}

fn hash_tensor(hash: &str) -> Result<(String, Tensor)> {
    let bytes: Vec<f64> = (0..hash.len() / 2)
        .map(|i| {
            u8::from_str_radix(&hash[2 * i..2 * i + 2], 16)
                .map(f64::from)
                .map_err(|_| Error::Contract(format!("bad config hash {hash:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(("meta.config_hash".to_string(), Tensor::new(vec![bytes.len()], bytes)?))
}

fn tensor_hash(tensor: &Tensor) -> String {
    tensor
        .data()
        .iter()
        .map(|&b| format!("{:02x}", (b as u8)))
        .collect()
}

/// Persist parameters + interval table + config hash as one checkpoint.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    intervals: &GroupIntervals,
    config_hash: &str,
) -> Result<()> {
    let mut entries = store.export();
    entries.extend(intervals.to_tensors());
    entries.push(hash_tensor(config_hash)?);
    write_tensors(path, &entries)
}

/// Load a checkpoint into an existing (shape-compatible) store. The stored
/// config hash must match the current config's.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    config_hash: &str,
) -> Result<GroupIntervals> {
    let entries = read_tensors(path)?;
    let (meta, params): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|(name, _)| name.starts_with("intervals.") || name.starts_with("meta."));
    let stored_hash = meta
        .iter()
        .find(|(name, _)| name == "meta.config_hash")
        .map(|(_, t)| tensor_hash(t))
        .ok_or_else(|| Error::Format {
            what: "checkpoint",
            message: "missing config hash".into(),
        })?;
    if stored_hash != config_hash {
        return Err(Error::Config(format!(
            "checkpoint was written under config {} but the current config is {} — \
             re-run with the original config file",
            &stored_hash[..12.min(stored_hash.len())],
            &config_hash[..12]
        )));
    }
    let intervals = GroupIntervals::from_tensors(&meta)?;
    store.import(&params)?;
    Ok(intervals)
}

/// One prediction row of an evaluation.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub id: u64,
    pub truth: f64,
    pub prediction: f64,
}

/// Effective score bounds for normalization: the declared raw range,
/// stretched by the difficulty multipliers when difficulty mode is on.
pub fn score_bounds(config: &RunConfig) -> (f64, f64) {
    let (raw_min, raw_max) = (config.data.score_min, config.data.score_max);
    match &config.data.difficulty_levels {
        None => (raw_min, raw_max),
        Some(levels) => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &l in levels {
                for edge in [raw_min * l, raw_max * l] {
                    lo = lo.min(edge);
                    hi = hi.max(edge);
                }
            }
            (lo, hi)
        }
    }
}

/// Evaluate a split with an arbitrary predictor. Exemplar selection is
/// seeded per video, so repeated evaluations see identical exemplars.
pub fn evaluate_with<F>(
    config: &RunConfig,
    pool: &[ScoredVideo],
    split: &[ScoredVideo],
    mut predict: F,
) -> Result<(EvalReport, Vec<PredictionRow>)>
where
    F: FnMut(&ScoredVideo, &[ScoredVideo]) -> Result<f64>,
{
    let mut rows = Vec::with_capacity(split.len());
    for video in split {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (video.id + 1).wrapping_mul(SEED_MIX));
        let exemplars = select_inference_exemplars(pool, video, config.exemplars, &mut rng)?;
        let prediction = predict(video, &exemplars)?;
        rows.push(PredictionRow {
            id: video.id,
            truth: video.score,
            prediction,
        });
    }
    let preds: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
    let truths: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    let (s_min, s_max) = score_bounds(config);
    let report = EvalReport::from_scores(&preds, &truths, s_min, s_max)?;
    Ok((report, rows))
}

/// Evaluate the model on a split, fusing `config.exemplars` exemplars per
/// video.
pub fn evaluate_model(
    run: &Run,
    split: &[ScoredVideo],
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    evaluate_with(&run.config, &run.dataset.train, split, |video, exemplars| {
        run.model.predict(
            &run.store,
            video,
            exemplars,
            &run.intervals,
            run.config.exemplar_fusion,
        )
    })
}

/// Per-epoch running means of the loss components plus the validation
/// report.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub ranking: f64,
    pub sparsity: f64,
    pub val: EvalReport,
}

pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_spearman: f64,
    /// Total loss of the very first batch — the determinism witness.
    pub first_batch_loss: f64,
    pub init_val_spearman: f64,
    pub history: Vec<EpochStats>,
    pub checkpoint: PathBuf,
}

/// Train per the config, writing artifacts (config echo, interval dump,
/// per-epoch history, best-by-validation-Spearman checkpoint) into
/// `out_dir`. Returns the run with its final-epoch parameters in place.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<(Run, TrainOutcome)> {
    let mut run = build_run(config)?;
    fs::create_dir_all(out_dir)?;
    let hash = config.hash();
    fs::write(
        out_dir.join("config.txt"),
        format!("# config hash: {hash}\n{}", config.serialize()),
    )?;
    write_intervals_csv(&out_dir.join("intervals.csv"), &run.intervals)?;
    let checkpoint = out_dir.join("checkpoint.tpt");
    let history_path = out_dir.join("train_history.csv");
    let val_history = out_dir.join("val_history.csv");
    let mut history_file = fs::File::create(&history_path)?;
    writeln!(
        history_file,
        "epoch,total,classification,regression,ranking,sparsity,val_spearman,val_relative_l2_x100"
    )?;

    let mut adam = Adam::new(
        &run.store,
        AdamConfig {
            lr: config.lr_backbone,
            ..AdamConfig::default()
        },
    )
    .with_group("embed.", config.lr_backbone)
    .with_group("decoder.", config.lr_backbone)
    .with_group("regressor.", config.lr_regressor);

    // initial state is the reference point: evaluate and checkpoint it
    let (init_report, _) = evaluate_model(&run, &run.dataset.val)?;
    append_history(&val_history, "init", &init_report)?;
    save_checkpoint(&checkpoint, &run.store, &run.intervals, &hash)?;
    let mut best_spearman = init_report.spearman;
    let mut best_epoch = 0usize;
    log::info!(
        "init: val spearman {:.4}, R-l2 {:.4}",
        init_report.spearman,
        init_report.relative_l2_x100
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let steps_per_epoch = (run.dataset.train.len() / config.batch_size).max(1);
    let mut first_batch_loss = f64::NAN;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut sums = [0.0f64; 5];
        for step in 0..steps_per_epoch {
            run.store.zero_grads();
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let mut totals = Vec::with_capacity(config.batch_size);
            let mut components = [0.0f64; 4];
            for _ in 0..config.batch_size {
                let pair = sample_train_pair(&run.dataset.train, &mut rng)?;
                let loss = run.model.pair_loss(
                    &mut tape,
                    &mut lease,
                    &run.store,
                    &pair,
                    &run.intervals,
                    &config.loss,
                )?;
                components[0] += tape.value(loss.classification).item();
                components[1] += tape.value(loss.regression).item();
                components[2] += tape.value(loss.ranking).item();
                components[3] += tape.value(loss.sparsity).item();
                totals.push(loss.total);
            }
            let summed = totals
                .into_iter()
                .try_fold(None::<crate::autodiff::tape::NodeId>, |acc, node| {
                    Ok::<_, Error>(Some(match acc {
                        Some(a) => tape.add(a, node)?,
                        None => node,
                    }))
                })?
                .expect("batch_size >= 1");
            let batch_total = tape.scale(summed, 1.0 / config.batch_size as f64);
            let total_value = tape.value(batch_total).item();
            let batch = config.batch_size as f64;
            if !total_value.is_finite() || components.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!(
                        "epoch {epoch} step {step}: total {total_value}, \
                         classification {}, regression {}, ranking {}, sparsity {}",
                        components[0] / batch,
                        components[1] / batch,
                        components[2] / batch,
                        components[3] / batch
                    ),
                });
            }
            if first_batch_loss.is_nan() {
                first_batch_loss = total_value;
            }
            tape.backward(batch_total)?;
            run.store.accumulate_grads(&tape);
            adam.step(&mut run.store);

            sums[0] += total_value;
            for (i, c) in components.iter().enumerate() {
                sums[i + 1] += c / batch;
            }
        }
        let steps = steps_per_epoch as f64;
        let (val_report, _) = evaluate_model(&run, &run.dataset.val)?;
        append_history(&val_history, &format!("epoch-{epoch}"), &val_report)?;
        let stats = EpochStats {
            epoch,
            total: sums[0] / steps,
            classification: sums[1] / steps,
            regression: sums[2] / steps,
            ranking: sums[3] / steps,
            sparsity: sums[4] / steps,
            val: val_report.clone(),
        };
        writeln!(
            history_file,
            "{},{},{},{},{},{},{},{}",
            stats.epoch,
            stats.total,
            stats.classification,
            stats.regression,
            stats.ranking,
            stats.sparsity,
            stats.val.spearman,
            stats.val.relative_l2_x100
        )?;
        log::info!(
            "epoch {epoch}: loss {:.4}, val spearman {:.4}",
            stats.total,
            stats.val.spearman
        );
        if stats.val.spearman > best_spearman {
            best_spearman = stats.val.spearman;
            best_epoch = epoch;
            save_checkpoint(&checkpoint, &run.store, &run.intervals, &hash)?;
        }
        history.push(stats);
    }

    Ok((
        run,
        TrainOutcome {
            best_epoch,
            best_spearman,
            first_batch_loss,
            init_val_spearman: init_report.spearman,
            history,
            checkpoint,
        },
    ))
}

/// Load a checkpoint under the same config and evaluate one split.
pub fn evaluate_checkpoint(
    config: &RunConfig,
    checkpoint: &Path,
    split: &str,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    let mut run = build_run(config)?;
    run.intervals = load_checkpoint(checkpoint, &mut run.store, &config.hash())?;
    let videos = match split {
        "train" => run.dataset.train.clone(),
        "val" => run.dataset.val.clone(),
        "test" => run.dataset.test.clone(),
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?} (expected train | val | test)"
            )))
        }
    };
    evaluate_model(&run, &videos)
}

/// The named ablation variants: each is a pure config transform.
pub fn ablation_variant(config: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut v = config.clone();
    match name {
        "tpt" => {}
        "baseline" => {
            v.part_generator = PartGenerator::MeanPool;
        }
        "adaptive-pool" => {
            v.part_generator = PartGenerator::AdaptivePool;
        }
        "temporal-conv" => {
            v.part_generator = PartGenerator::TemporalConv;
        }
        "tpt-no-rank" => {
            v.loss.weights.ranking = 0.0;
        }
        "tpt-no-sparsity" => {
            v.loss.weights.sparsity = 0.0;
        }
        "tpt-no-rank-no-sparsity" => {
            v.loss.weights.ranking = 0.0;
            v.loss.weights.sparsity = 0.0;
        }
        "diversity" => {
            v.loss.diversity_instead_of_ranking = true;
        }
        "pe-memory" => {
            v.decoder.positional_encoding = crate::decoder::PositionalEncoding::Memory;
        }
        "pe-memory-query" => {
            v.decoder.positional_encoding = crate::decoder::PositionalEncoding::MemoryAndQuery;
        }
        "fusion-part-enhanced" => {
            v.fusion = crate::regressor::FusionMode::PartEnhancedHolistic;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant {other:?}"
            )))
        }
    }
    Ok(v)
}

/// Train and test-evaluate each variant under identical seeds and data,
/// appending one CSV row per variant.
pub fn ablate(
    config: &RunConfig,
    variants: &[String],
    out_dir: &Path,
) -> Result<Vec<(String, EvalReport)>> {
    fs::create_dir_all(out_dir)?;
    let table = out_dir.join("ablation.csv");
    let mut f = fs::File::create(&table)?;
    writeln!(f, "variant,spearman,relative_l2_x100")?;
    let mut results = Vec::with_capacity(variants.len());
    for name in variants {
        let variant_config = ablation_variant(config, name)?;
        let dir = out_dir.join(name);
        log::info!("ablation variant {name}: training");
        let (mut run, outcome) = train(&variant_config, &dir)?;
        // test with the best-by-validation parameters
        run.intervals =
            load_checkpoint(&outcome.checkpoint, &mut run.store, &variant_config.hash())?;
        let (report, _) = evaluate_model(&run, &run.dataset.test)?;
        writeln!(f, "{name},{},{}", report.spearman, report.relative_l2_x100)?;
        log::info!(
            "ablation variant {name}: test spearman {:.4}",
            report.spearman
        );
        results.push((name.clone(), report));
    }
    Ok(results)
}

/// One parameter's gradient-check result.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&format!("{}  {:.3e}\n", check.name, check.max_rel_error));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (tolerance {:.0e}): {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Relative disagreement between an analytic and a central-difference
/// gradient; zero when the gap sits below what the difference itself can
/// resolve (rounding in f(x±h) caps that at ~ε|f|/h).
fn gap_relative_error(analytic: f64, numeric: f64, fd_resolution: f64) -> f64 {
    let gap = (analytic - numeric).abs();
    if gap <= fd_resolution {
        return 0.0;
    }
    gap / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of the full pair loss over EVERY parameter
/// element. Intended for tiny configs.
pub fn gradcheck(config: &RunConfig) -> Result<GradcheckReport> {
    let mut run = build_run(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let pair = sample_train_pair(&run.dataset.train, &mut rng)?;

    let loss_of = |run: &Run| -> Result<f64> {
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let loss = run.model.pair_loss(
            &mut tape,
            &mut lease,
            &run.store,
            &pair,
            &run.intervals,
            &run.config.loss,
        )?;
        Ok(tape.value(loss.total).item())
    };

    run.store.zero_grads();
    let base_loss;
    {
        let mut tape = Tape::new();
        let mut lease = TapeParams::new();
        let loss = run.model.pair_loss(
            &mut tape,
            &mut lease,
            &run.store,
            &pair,
            &run.intervals,
            &run.config.loss,
        )?;
        base_loss = tape.value(loss.total).item();
        tape.backward(loss.total)?;
        run.store.accumulate_grads(&tape);
    }

    let h = 1e-5;
    let fd_resolution = 8.0 * f64::EPSILON * base_loss.abs() / h;
    let mut checks = Vec::with_capacity(run.store.len());
    let mut overall: f64 = 0.0;
    for slot in 0..run.store.len() {
        let name = run.store.name(slot).to_string();
        let analytic = run.store.grad(slot).to_vec();
        let count = run.store.value(slot).len();
        let mut worst: f64 = 0.0;
        for i in 0..count {
            let orig = run.store.value(slot).data()[i];
            run.store.value_mut(slot).data_mut()[i] = orig + h;
            let up = loss_of(&run)?;
            run.store.value_mut(slot).data_mut()[i] = orig - h;
            let dn = loss_of(&run)?;
            run.store.value_mut(slot).data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * h);
            worst = worst.max(gap_relative_error(analytic[i], numeric, fd_resolution));
        }
        overall = overall.max(worst);
        checks.push(ParamCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        checks,
        max_rel_error: overall,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
