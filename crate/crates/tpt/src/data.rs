//! Synthetic phase-structured videos standing in for backbone features.
//!
//! Each video is a sequence of T clip features built from K_true latent,
//! temporally ordered phases. Clip t inside phase k is the category's phase
//! embedding plus `u_k` times the category's quality direction plus noise,
//! and the score is an affine map of the weighted phase qualities into the
//! score range — so the score is recoverable from per-phase structure but
//! holistic pooling entangles it with the (random) phase lengths.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tensor::Tensor;
use crate::bytes::Cursor;
use crate::error::{Error, Result};

/// Difficulty multipliers used when difficulty mode is switched on without
/// an explicit list.
pub const DEFAULT_DIFFICULTY_LEVELS: [f64; 3] = [2.0, 2.5, 3.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// T: clips per video.
    pub clips_per_video: usize,
    /// D: clip feature dimension.
    pub feature_dim: usize,
    /// K_true: latent phase count.
    pub phases: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub categories: usize,
    pub noise_std: f64,
    pub score_min: f64,
    pub score_max: f64,
    /// Difficulty mode when `Some`: each video gets one of these positive
    /// multipliers and its final score is raw score times the multiplier.
    pub difficulty_levels: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            clips_per_video: 20,
            feature_dim: 64,
            phases: 5,
            train_videos: 600,
            val_videos: 200,
            test_videos: 200,
            categories: 1,
            noise_std: 0.1,
            score_min: 0.0,
            score_max: 100.0,
            difficulty_levels: None,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases == 0 || self.phases > self.clips_per_video {
            return Err(Error::Config(format!(
                "phase count {} must be in 1..={} (clips per video)",
                self.phases, self.clips_per_video
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !(self.score_min < self.score_max) {
            return Err(Error::Config(format!(
                "score range [{}, {}] is empty",
                self.score_min, self.score_max
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise std {} must be non-negative",
                self.noise_std
            )));
        }
        if self.categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        if let Some(levels) = &self.difficulty_levels {
            if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::Config(
                    "difficulty levels must be a non-empty list of positive numbers".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVideo {
    pub id: u64,
    pub category: u32,
    /// V: clip features, `[T, D]`.
    pub clips: Tensor,
    /// Score before the difficulty multiplier; equals `score` without
    /// difficulty mode. Score differences are always taken on this value.
    pub raw_score: f64,
    /// Final score s.
    pub score: f64,
    pub difficulty: Option<f64>,
    /// K_true+1 strictly increasing 1-based clip indices; first is 1, last
    /// is T+1. Held-out metadata — never visible to the model.
    pub phase_boundaries: Vec<usize>,
    /// u_k per phase. Held-out metadata.
    pub phase_quality: Vec<f64>,
}

impl ScoredVideo {
    pub fn clip_count(&self) -> usize {
        self.clips.shape()[0]
    }

    /// Whether `other` may serve as an exemplar for this video.
    pub fn pairs_with(&self, other: &ScoredVideo) -> bool {
        other.id != self.id
            && other.category == self.category
            && match (self.difficulty, other.difficulty) {
                (Some(a), Some(b)) => a == b,
                (None, None) => true,
                _ => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub test: ScoredVideo,
    pub exemplar: ScoredVideo,
    /// Δs = s − s₀ on raw scores.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<ScoredVideo>,
    pub val: Vec<ScoredVideo>,
    pub test: Vec<ScoredVideo>,
}

/// Fixed per-category geometry, drawn once from the dataset seed.
pub struct CategoryGeometry {
    /// One unit vector per phase, `[D]` each.
    pub phase_embeddings: Vec<Vec<f64>>,
    /// One unit vector per phase, `[D]` each.
    pub quality_directions: Vec<Vec<f64>>,
    /// Positive per-phase weights summing to 1.
    pub weights: Vec<f64>,
}

pub fn category_geometry(config: &GeneratorConfig) -> Vec<CategoryGeometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.categories);
    for _ in 0..config.categories {
        let phase_embeddings = (0..config.phases)
            .map(|_| unit_vector(config.feature_dim, &mut rng))
            .collect();
        let quality_directions = (0..config.phases)
            .map(|_| unit_vector(config.feature_dim, &mut rng))
            .collect();
        let mut weights: Vec<f64> = (0..config.phases)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        out.push(CategoryGeometry {
            phase_embeddings,
            quality_directions,
            weights,
        });
    }
    out
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = Tensor::randn(&[dim], 1.0, rng).into_data();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let geometry = category_geometry(config);
    let split_sizes = [config.train_videos, config.val_videos, config.test_videos];
    let mut splits: Vec<Vec<ScoredVideo>> = Vec::new();
    let mut next_id = 0u64;
    for size in split_sizes {
        let mut videos = Vec::with_capacity(size);
        for _ in 0..size {
            videos.push(generate_video(config, &geometry, next_id));
            next_id += 1;
        }
        splits.push(videos);
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        config: config.clone(),
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

fn generate_video(
    config: &GeneratorConfig,
    geometry: &[CategoryGeometry],
    id: u64,
) -> ScoredVideo {
    // Per-video rng derived from (seed, id): content does not depend on
    // generation order.
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed ^ (id + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let category = (id % config.categories as u64) as u32;
    let geo = &geometry[category as usize];
    let t = config.clips_per_video;
    let d = config.feature_dim;
    let k = config.phases;

    // Uniform composition of T into K_true nonempty runs: K_true-1 distinct
    // cut points from {1..T-1}.
    let mut cuts: Vec<usize> = index_sample(&mut rng, t - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut phase_boundaries = Vec::with_capacity(k + 1);
    phase_boundaries.push(1);
    phase_boundaries.extend(cuts.iter().map(|&c| c + 1));
    phase_boundaries.push(t + 1);

    let phase_quality: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();

    let mut clips = vec![0.0; t * d];
    for phase in 0..k {
        let (start, end) = (phase_boundaries[phase], phase_boundaries[phase + 1]);
        for clip in start..end {
            let row = &mut clips[(clip - 1) * d..clip * d];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = geo.phase_embeddings[phase][j]
                    + phase_quality[phase] * geo.quality_directions[phase][j];
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Tensor::randn(&[t, d], config.noise_std, &mut rng);
        for (slot, n) in clips.iter_mut().zip(noise.data()) {
            *slot += n;
        }
    }

    let blend: f64 = geo
        .weights
        .iter()
        .zip(&phase_quality)
        .map(|(w, u)| w * u)
        .sum();
    let raw_score = config.score_min + blend * (config.score_max - config.score_min);
    let difficulty = config
        .difficulty_levels
        .as_ref()
        .map(|levels| levels[rng.gen_range(0..levels.len())]);
    let score = raw_score * difficulty.unwrap_or(1.0);

    ScoredVideo {
        id,
        category,
        clips: Tensor::new(vec![t, d], clips).expect("sized above"),
        raw_score,
        score,
        difficulty,
        phase_boundaries,
        phase_quality,
    }
}

/// Uniformly pick a test video and an eligible exemplar for it.
pub fn sample_train_pair(videos: &[ScoredVideo], rng: &mut ChaCha8Rng) -> Result<TrainPair> {
    if videos.is_empty() {
        return Err(Error::Sampling("empty dataset".into()));
    }
    let test = &videos[rng.gen_range(0..videos.len())];
    let eligible: Vec<&ScoredVideo> = videos.iter().filter(|v| test.pairs_with(v)).collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!(
            "video {} (category {}, difficulty {:?}) has no eligible exemplar",
            test.id, test.category, test.difficulty
        )));
    }
    let exemplar = eligible[rng.gen_range(0..eligible.len())];
    Ok(TrainPair {
        test: test.clone(),
        exemplar: exemplar.clone(),
        delta: test.raw_score - exemplar.raw_score,
    })
}

/// Draw up to `m_ex` distinct exemplars for `test` from `pool` without
/// replacement. A pool smaller than `m_ex` is used whole, with a warning.
pub fn select_inference_exemplars(
    pool: &[ScoredVideo],
    test: &ScoredVideo,
    m_ex: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScoredVideo>> {
    let eligible: Vec<&ScoredVideo> = pool.iter().filter(|v| test.pairs_with(v)).collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!(
            "video {} has no eligible exemplar in a pool of {}",
            test.id,
            pool.len()
        )));
    }
    if eligible.len() < m_ex {
        log::warn!(
            "exemplar pool for video {} has only {} eligible videos (wanted {}); using all",
            test.id,
            eligible.len(),
            m_ex
        );
        return Ok(eligible.into_iter().cloned().collect());
    }
    let picks = index_sample(rng, eligible.len(), m_ex);
    Ok(picks.into_iter().map(|i| eligible[i].clone()).collect())
}

const MAGIC: &[u8; 8] = b"TPTDATA\0";
const VERSION: u32 = 1;
const MAX_EXTENT: usize = 1 << 14;
const MAX_VIDEOS: usize = 1 << 22;

pub fn write_split(path: &Path, config: &GeneratorConfig, videos: &[ScoredVideo]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.clips_per_video as u32).to_le_bytes());
    buf.extend_from_slice(&(config.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(config.phases as u32).to_le_bytes());
    buf.extend_from_slice(&(config.categories as u32).to_le_bytes());
    buf.extend_from_slice(&config.seed.to_le_bytes());
    buf.extend_from_slice(&config.noise_std.to_bits().to_le_bytes());
    buf.extend_from_slice(&config.score_min.to_bits().to_le_bytes());
    buf.extend_from_slice(&config.score_max.to_bits().to_le_bytes());
    let levels = config.difficulty_levels.as_deref().unwrap_or(&[]);
    buf.extend_from_slice(&(levels.len() as u32).to_le_bytes());
    for &l in levels {
        buf.extend_from_slice(&l.to_bits().to_le_bytes());
    }
    buf.extend_from_slice(&(videos.len() as u64).to_le_bytes());
    for v in videos {
        buf.extend_from_slice(&v.id.to_le_bytes());
        buf.extend_from_slice(&v.category.to_le_bytes());
        match v.difficulty {
            Some(d) => {
                buf.push(1);
                buf.extend_from_slice(&d.to_bits().to_le_bytes());
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&v.raw_score.to_bits().to_le_bytes());
        buf.extend_from_slice(&v.score.to_bits().to_le_bytes());
        buf.extend_from_slice(&(v.phase_quality.len() as u32).to_le_bytes());
        for &u in &v.phase_quality {
            buf.extend_from_slice(&u.to_bits().to_le_bytes());
        }
        buf.extend_from_slice(&(v.phase_boundaries.len() as u32).to_le_bytes());
        for &b in &v.phase_boundaries {
            buf.extend_from_slice(&(b as u64).to_le_bytes());
        }
        for &x in v.clips.data() {
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<(GeneratorConfig, Vec<ScoredVideo>)> {
    let bytes = fs::read(path)?;
    parse_split(&bytes)
}

/// Decode one split file from raw bytes. The echoed config has the split
/// sizes zeroed (a split file does not know its siblings).
pub fn parse_split(bytes: &[u8]) -> Result<(GeneratorConfig, Vec<ScoredVideo>)> {
    let mut cur = Cursor::new(bytes, "dataset");
    if cur.take(8)? != MAGIC {
        return Err(cur.err("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let t = cur.u32()?;
    let t = cur.usize_capped(t as u64, MAX_EXTENT, "clips per video")?;
    let d = cur.u32()?;
    let d = cur.usize_capped(d as u64, MAX_EXTENT, "feature dimension")?;
    let phases = cur.u32()?;
    let phases = cur.usize_capped(phases as u64, MAX_EXTENT, "phase count")?;
    let categories = cur.u32()?;
    let categories = cur.usize_capped(categories as u64, MAX_EXTENT, "category count")?;
    let seed = cur.u64()?;
    let noise_std = cur.f64()?;
    let score_min = cur.f64()?;
    let score_max = cur.f64()?;
    let n_levels = cur.u32()?;
    let n_levels = cur.usize_capped(n_levels as u64, MAX_EXTENT, "difficulty level count")?;
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        levels.push(cur.f64()?);
    }
    let config = GeneratorConfig {
        clips_per_video: t,
        feature_dim: d,
        phases,
        train_videos: 0,
        val_videos: 0,
        test_videos: 0,
        categories,
        noise_std,
        score_min,
        score_max,
        difficulty_levels: if levels.is_empty() { None } else { Some(levels) },
        seed,
    };
    config.validate().map_err(|e| cur.err(e.to_string()))?;

    let count = cur.u64()?;
    let count = cur.usize_capped(count, MAX_VIDEOS, "video count")?;
    if cur.remaining() < count.saturating_mul(t * d * 8) {
        return Err(cur.err("video count larger than remaining data"));
    }
    let mut videos = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.u64()?;
        let category = cur.u32()?;
        if category as usize >= categories {
            return Err(cur.err(format!("category {category} out of range")));
        }
        let difficulty = match cur.u8()? {
            0 => None,
            1 => Some(cur.f64()?),
            other => return Err(cur.err(format!("bad difficulty flag {other}"))),
        };
        if let Some(df) = difficulty {
            if !(df > 0.0) {
                return Err(cur.err(format!("difficulty {df} must be positive")));
            }
        }
        if difficulty.is_some() != config.difficulty_levels.is_some() {
            return Err(cur.err("difficulty flag disagrees with header"));
        }
        let raw_score = cur.f64()?;
        let score = cur.f64()?;
        if !raw_score.is_finite() || !score.is_finite() {
            return Err(cur.err("non-finite score"));
        }
        let n_quality = cur.u32()?;
        let n_quality = cur.usize_capped(n_quality as u64, MAX_EXTENT, "quality count")?;
        if n_quality != phases {
            return Err(cur.err(format!(
                "quality count {n_quality} does not match phase count {phases}"
            )));
        }
        let mut phase_quality = Vec::with_capacity(n_quality);
        for _ in 0..n_quality {
            phase_quality.push(cur.f64()?);
        }
        let n_bounds = cur.u32()?;
        let n_bounds = cur.usize_capped(n_bounds as u64, MAX_EXTENT, "boundary count")?;
        if n_bounds != phases + 1 {
            return Err(cur.err(format!(
                "boundary count {n_bounds} does not match phase count {phases}"
            )));
        }
        let mut phase_boundaries = Vec::with_capacity(n_bounds);
        for _ in 0..n_bounds {
            let b = cur.u64()?;
            phase_boundaries.push(cur.usize_capped(b, MAX_EXTENT + 1, "boundary")?);
        }
        if phase_boundaries.first() != Some(&1)
            || phase_boundaries.last() != Some(&(t + 1))
            || phase_boundaries.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(cur.err(format!("invalid phase boundaries {phase_boundaries:?}")));
        }
        let mut clips = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            clips.push(cur.f64()?);
        }
        videos.push(ScoredVideo {
            id,
            category,
            clips: Tensor::new(vec![t, d], clips).map_err(|e| cur.err(e.to_string()))?,
            raw_score,
            score,
            difficulty,
            phase_boundaries,
            phase_quality,
        });
    }
    if cur.remaining() != 0 {
        return Err(cur.err("trailing bytes after last video"));
    }
    Ok((config, videos))
}

/// Human-readable sidecar: one row per video.
pub fn write_manifest(path: &Path, videos: &[ScoredVideo]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "id,category,score,raw_score,difficulty,phase_boundaries")?;
    for v in videos {
        let bounds = v
            .phase_boundaries
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join("-");
        let difficulty = v
            .difficulty
            .map(|d| d.to_string())
            .unwrap_or_else(|| "".into());
        writeln!(
            f,
            "{},{},{},{},{},{}",
            v.id, v.category, v.score, v.raw_score, difficulty, bounds
        )?;
    }
    Ok(())
}
