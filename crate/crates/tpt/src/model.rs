//! Full scoring model: clip embedding, a part generator (the temporal
//! parsing transformer or one of the pooling baselines), and the contrastive
//! regressor, plus the combined training loss over a video pair.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamStore, TapeParams};
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::data::{ScoredVideo, TrainPair};
use crate::decoder::{DecoderConfig, TptDecoder};
use crate::error::{Error, Result};
use crate::losses::{
    aggregate_attention_losses, attention_center, diversity_loss, sparsity_loss, LossWeights,
};
use crate::regressor::{
    classification_regression_loss, decode_score, encode_target, fuse_predictions,
    ExemplarFusion, FusionMode, GroupIntervals, Regressor,
};

/// How clip representations become part representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartGenerator {
    /// Query-based decoding; the full model.
    Tpt,
    /// Holistic baseline: average every clip into one representation.
    MeanPool,
    /// K contiguous segments, each mean-pooled.
    AdaptivePool,
    /// Strided temporal convolution with window ⌊T/K⌋.
    TemporalConv,
}

impl FromStr for PartGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpt" => Ok(PartGenerator::Tpt),
            "mean-pool" => Ok(PartGenerator::MeanPool),
            "adaptive-pool" => Ok(PartGenerator::AdaptivePool),
            "temporal-conv" => Ok(PartGenerator::TemporalConv),
            other => Err(Error::Config(format!(
                "unknown part generator {other:?} (expected tpt | mean-pool | adaptive-pool | temporal-conv)"
            ))),
        }
    }
}

impl std::fmt::Display for PartGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartGenerator::Tpt => "tpt",
            PartGenerator::MeanPool => "mean-pool",
            PartGenerator::AdaptivePool => "adaptive-pool",
            PartGenerator::TemporalConv => "temporal-conv",
        })
    }
}

/// Knobs for the combined pair loss beyond the plain weights.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Replace the ordered ranking term with the order-free pairwise
    /// Gaussian repulsion.
    pub diversity_instead_of_ranking: bool,
    pub diversity_sigma: f64,
    /// Freeze the attention centers inside the sparsity term.
    pub detach_centers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            diversity_instead_of_ranking: false,
            diversity_sigma: 1.0,
            detach_centers: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.diversity_sigma > 0.0) {
            return Err(Error::Config(format!(
                "diversity sigma {} must be positive",
                self.diversity_sigma
            )));
        }
        Ok(())
    }
}

/// One video's decoded state on the tape.
pub struct VideoForward {
    /// `[K, d]` part representations (`[1, d]` for the holistic baseline).
    pub parts: NodeId,
    /// Per decoder layer `[K, T]`; empty for the pooling generators.
    pub attention: Vec<NodeId>,
}

/// Both videos decoded plus the regressor heads.
pub struct PairForward {
    pub test: VideoForward,
    pub exemplar: VideoForward,
    /// `[1, B]` interval probabilities.
    pub probabilities: NodeId,
    /// `[1, B]` within-interval regressions.
    pub regressions: NodeId,
}

/// The combined loss and its logged components. `total` equals the
/// weighted sum of the components exactly (same tape nodes).
pub struct PairLoss {
    pub total: NodeId,
    pub classification: NodeId,
    pub regression: NodeId,
    /// Ranking term, or the diversity term when that variant is active.
    pub ranking: NodeId,
    pub sparsity: NodeId,
}

pub struct TptModel {
    decoder: TptDecoder,
    regressor: Regressor,
    generator: PartGenerator,
    /// Temporal-conv window ⌊T/K⌋ fixed at registration; 0 otherwise.
    conv_window: usize,
}

impl TptModel {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        decoder_config: &DecoderConfig,
        generator: PartGenerator,
        groups: usize,
        fusion: FusionMode,
        backbone_dim: usize,
        expected_clips: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let decoder = TptDecoder::register(store, decoder_config, backbone_dim, rng)?;
        let d = decoder_config.model_dim;
        let k = decoder_config.query_count;
        let conv_window = if generator == PartGenerator::TemporalConv {
            if expected_clips < k {
                return Err(Error::Config(format!(
                    "temporal-conv needs at least {k} clips, config declares {expected_clips}"
                )));
            }
            let w = expected_clips / k;
            store.register("decoder.conv.w", Tensor::xavier(w * d, d, rng))?;
            store.register("decoder.conv.b", Tensor::zeros(&[1, d]))?;
            w
        } else {
            0
        };
        let regressor = Regressor::register(store, d, groups, fusion, rng)?;
        Ok(TptModel {
            decoder,
            regressor,
            generator,
            conv_window,
        })
    }

    pub fn decoder(&self) -> &TptDecoder {
        &self.decoder
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    pub fn generator(&self) -> PartGenerator {
        self.generator
    }

    /// Turn one video's clips into parts.
    pub fn video_forward(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        clips: &Tensor,
    ) -> Result<VideoForward> {
        if self.generator == PartGenerator::Tpt {
            let set = self.decoder.decode(tape, lease, store, clips)?;
            return Ok(VideoForward {
                parts: set.parts,
                attention: set.attention,
            });
        }
        let memory = self.decoder.embed(tape, lease, store, clips)?;
        let t = clips.shape()[0];
        let k = self.decoder.config().query_count;
        let parts = match self.generator {
            PartGenerator::MeanPool => {
                let pool = tape.leaf(Tensor::new(vec![1, t], vec![1.0 / t as f64; t])?);
                tape.matmul(pool, memory)?
            }
            PartGenerator::AdaptivePool => {
                if t < k {
                    return Err(Error::Contract(format!(
                        "adaptive pooling needs at least {k} clips, got {t}"
                    )));
                }
                let mut pool = vec![0.0; k * t];
                for part in 0..k {
                    let start = part * t / k;
                    let end = (part + 1) * t / k;
                    for col in start..end {
                        pool[part * t + col] = 1.0 / (end - start) as f64;
                    }
                }
                let pool = tape.leaf(Tensor::new(vec![k, t], pool)?);
                tape.matmul(pool, memory)?
            }
            PartGenerator::TemporalConv => {
                let w = self.conv_window;
                if w == 0 || t / k != w {
                    return Err(Error::Contract(format!(
                        "temporal-conv was sized for window {w}, but {t} clips / {k} parts gives {}",
                        t / k.max(1)
                    )));
                }
                let weight = lease.by_name(tape, store, "decoder.conv.w")?;
                let bias = lease.by_name(tape, store, "decoder.conv.b")?;
                let d = self.decoder.config().model_dim;
                let mut windows = Vec::with_capacity(k);
                for part in 0..k {
                    let mut select = vec![0.0; w * t];
                    for row in 0..w {
                        select[row * t + part * w + row] = 1.0;
                    }
                    let select = tape.leaf(Tensor::new(vec![w, t], select)?);
                    let window = tape.matmul(select, memory)?;
                    let flat = tape.reshape(window, vec![1, w * d])?;
                    windows.push(tape.matmul(flat, weight)?);
                }
                let stacked = tape.concat(&windows, 0)?;
                tape.add(stacked, bias)?
            }
            PartGenerator::Tpt => unreachable!(),
        };
        Ok(VideoForward {
            parts,
            attention: Vec::new(),
        })
    }

    /// Decode both videos and run the regressor heads on the aligned parts.
    pub fn forward_pair(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        test_clips: &Tensor,
        exemplar_clips: &Tensor,
    ) -> Result<PairForward> {
        let test = self.video_forward(tape, lease, store, test_clips)?;
        let exemplar = self.video_forward(tape, lease, store, exemplar_clips)?;
        let (probabilities, regressions) =
            self.regressor
                .regress(tape, lease, store, test.parts, exemplar.parts)?;
        Ok(PairForward {
            test,
            exemplar,
            probabilities,
            regressions,
        })
    }

    fn attention_terms(
        &self,
        tape: &mut Tape,
        maps: &[NodeId],
        t: usize,
        loss: &LossConfig,
    ) -> Result<(NodeId, NodeId)> {
        if !loss.diversity_instead_of_ranking {
            return aggregate_attention_losses(
                tape,
                maps,
                t,
                loss.weights.margin,
                loss.detach_centers,
            );
        }
        let mut order: Option<NodeId> = None;
        let mut sparse: Option<NodeId> = None;
        for &map in maps {
            let centers = attention_center(tape, map)?;
            let div = diversity_loss(tape, centers, loss.diversity_sigma)?;
            let spr = sparsity_loss(tape, map, centers, loss.detach_centers)?;
            order = Some(match order {
                Some(acc) => tape.add(acc, div)?,
                None => div,
            });
            sparse = Some(match sparse {
                Some(acc) => tape.add(acc, spr)?,
                None => spr,
            });
        }
        Ok((order.expect("nonempty maps"), sparse.expect("nonempty maps")))
    }

    /// The full training loss for one (test, exemplar) pair: interval
    /// classification + within-interval regression on the score difference,
    /// plus the attention losses from BOTH videos' maps, averaged.
    pub fn pair_loss(
        &self,
        tape: &mut Tape,
        lease: &mut TapeParams,
        store: &ParamStore,
        pair: &TrainPair,
        intervals: &GroupIntervals,
        loss: &LossConfig,
    ) -> Result<PairLoss> {
        let forward = self.forward_pair(
            tape,
            lease,
            store,
            &pair.test.clips,
            &pair.exemplar.clips,
        )?;
        let target = encode_target(pair.delta, intervals);
        let (classification, regression) = classification_regression_loss(
            tape,
            forward.probabilities,
            forward.regressions,
            &target,
            self.regressor.groups(),
        )?;

        let (ranking, sparsity) = if forward.test.attention.is_empty() {
            (tape.leaf(Tensor::scalar(0.0)), tape.leaf(Tensor::scalar(0.0)))
        } else {
            let t_test = pair.test.clip_count();
            let t_ex = pair.exemplar.clip_count();
            let (rank_a, sparse_a) =
                self.attention_terms(tape, &forward.test.attention, t_test, loss)?;
            let (rank_b, sparse_b) =
                self.attention_terms(tape, &forward.exemplar.attention, t_ex, loss)?;
            let rank_sum = tape.add(rank_a, rank_b)?;
            let sparse_sum = tape.add(sparse_a, sparse_b)?;
            (tape.scale(rank_sum, 0.5), tape.scale(sparse_sum, 0.5))
        };

        let w = &loss.weights;
        let mut total = tape.scale(classification, w.classification);
        let reg_term = tape.scale(regression, w.regression);
        total = tape.add(total, reg_term)?;
        let rank_term = tape.scale(ranking, w.ranking);
        total = tape.add(total, rank_term)?;
        let sparse_term = tape.scale(sparsity, w.sparsity);
        total = tape.add(total, sparse_term)?;

        Ok(PairLoss {
            total,
            classification,
            regression,
            ranking,
            sparsity,
        })
    }

    /// Score one test video against several exemplars and fuse the
    /// per-exemplar reconstructions. Differences are predicted on raw
    /// scores; a difficulty-moded video's fused raw score is multiplied by
    /// its difficulty at the end.
    pub fn predict(
        &self,
        store: &ParamStore,
        test: &ScoredVideo,
        exemplars: &[ScoredVideo],
        intervals: &GroupIntervals,
        fusion: ExemplarFusion,
    ) -> Result<f64> {
        if exemplars.is_empty() {
            return Err(Error::Contract("prediction needs at least one exemplar".into()));
        }
        let mut reconstructions = Vec::with_capacity(exemplars.len());
        for exemplar in exemplars {
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let forward =
                self.forward_pair(&mut tape, &mut lease, store, &test.clips, &exemplar.clips)?;
            let score = decode_score(
                tape.value(forward.probabilities).data(),
                tape.value(forward.regressions).data(),
                intervals,
                exemplar.raw_score,
            )?;
            reconstructions.push(score);
        }
        let raw = fuse_predictions(&reconstructions, fusion)?;
        Ok(match test.difficulty {
            Some(dd) => raw * dd,
            None => raw,
        })
    }
}
