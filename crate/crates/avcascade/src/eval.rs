//! Retrieval metrics and experiment reports. Ranks use the pessimistic
//! tie rule: every candidate scoring at least as high as the true pair
//! (other than the pair itself) outranks it, so constant embeddings score
//! at the floor rather than at chance.

use crate::corpus::{subsample, CorpusManifest, Split};
use crate::encoders::{similarity_matrix, SimilarityMatrix, VisualMode};
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::{
    run_cascade, CascadeConfigs, Checkpoint, ClipStore, SplitEmbeddings,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AudioToVisual,
    VisualToAudio,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::AudioToVisual => "audio_to_visual",
            Direction::VisualToAudio => "visual_to_audio",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n: usize,
    /// k -> recall, for k in {1, 5, 10} no larger than n.
    pub r_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub corpus_id: String,
    pub checkpoint_id: String,
}

/// Pessimistic rank of query i: 1 + strictly-better candidates + tied
/// candidates other than the true pair.
fn rank(sim: &SimilarityMatrix, i: usize, direction: Direction) -> usize {
    let n = sim.n;
    let own = sim.values[i * n + i];
    let mut better = 0;
    let mut tied = 0;
    for j in 0..n {
        let v = match direction {
            Direction::AudioToVisual => sim.values[i * n + j],
            Direction::VisualToAudio => sim.values[j * n + i],
        };
        if v > own {
            better += 1;
        } else if v == own && j != i {
            tied += 1;
        }
    }
    1 + better + tied
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64> {
    if k < 1 || k > sim.n {
        return Err(Error::Config(format!("k must be in [1, {}], got {k}", sim.n)));
    }
    let hits = (0..sim.n).filter(|&i| rank(sim, i, direction) <= k).count();
    Ok(hits as f64 / sim.n as f64)
}

/// Median of the pessimistic ranks; mean of the two middles for even n.
pub fn median_rank(sim: &SimilarityMatrix, direction: Direction) -> f64 {
    let mut ranks: Vec<usize> = (0..sim.n).map(|i| rank(sim, i, direction)).collect();
    ranks.sort_unstable();
    let n = ranks.len();
    if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    }
}

fn report(
    sim: &SimilarityMatrix,
    direction: Direction,
    corpus_id: &str,
    checkpoint_id: &str,
) -> Result<RetrievalReport> {
    let mut r_at = BTreeMap::new();
    for k in [1, 5, 10] {
        if k <= sim.n {
            r_at.insert(k, recall_at_k(sim, k, direction)?);
        }
    }
    Ok(RetrievalReport {
        direction,
        n: sim.n,
        r_at,
        median_rank: median_rank(sim, direction),
        corpus_id: corpus_id.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}

/// Metric core shared by evaluate and tests: reports for both directions
/// from explicit embeddings.
pub fn evaluate_embeddings(
    audio: &[Vec<f64>],
    visual: &[Vec<f64>],
    video_ids: &[String],
    corpus_id: &str,
    checkpoint_id: &str,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let sim = similarity_matrix(audio, visual, video_ids)?;
    Ok((
        report(&sim, Direction::AudioToVisual, corpus_id, checkpoint_id)?,
        report(&sim, Direction::VisualToAudio, corpus_id, checkpoint_id)?,
    ))
}

/// Fixed seeded gallery subset: identity below the limit, otherwise
/// `limit` indices in ascending order.
pub fn eval_subset_ids(n: usize, limit: usize, seed: u64) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "eval-subset", &[n as u64]));
    idx.truncate(limit);
    idx.sort_unstable();
    idx
}

const IMAGE_GALLERY_LIMIT: usize = 1000;

/// Embed a whole split as the retrieval gallery and report both
/// directions. Image-mode checkpoints over galleries larger than 1000 use
/// a fixed seeded 1000-clip subset.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let mode = ckpt
        .provenance
        .last()
        .map(|p| p.config.mode)
        .unwrap_or(VisualMode::Video);
    let mut gallery = manifest.clips_in_split(split);
    if gallery.is_empty() {
        return Err(Error::EmptySplit(format!("{split}")));
    }
    if mode == VisualMode::Image && gallery.len() > IMAGE_GALLERY_LIMIT {
        let keep = eval_subset_ids(gallery.len(), IMAGE_GALLERY_LIMIT, 0);
        gallery = keep.into_iter().map(|i| gallery[i]).collect();
    }
    let sub = CorpusManifest {
        records: gallery.into_iter().cloned().collect(),
        language: manifest.language.clone(),
        metadata: manifest.metadata.clone(),
        root: manifest.root.clone(),
    };
    let mut store = ClipStore::new(&sub, crate::dsp::DspParams::default());
    let emb: SplitEmbeddings =
        crate::trainer::embed_split(&ckpt.params, &ckpt.model, mode, &sub, split, &mut store)?;
    let corpus_id = format!("{}/{split}", manifest.language);
    evaluate_embeddings(&emb.audio, &emb.visual, &emb.video_ids, &corpus_id, &ckpt.id())
}

/// One cascade run at one pretraining-corpus percentage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferPoint {
    pub percent: f64,
    pub seed: u64,
    pub zero_shot: (RetrievalReport, RetrievalReport),
    pub finetuned: (RetrievalReport, RetrievalReport),
}

fn shifted(base: &CascadeConfigs, run_seed: u64) -> CascadeConfigs {
    let mut cfgs = base.clone();
    cfgs.pretrain.seed = cfgs.pretrain.seed.wrapping_add(run_seed);
    cfgs.finetune.seed = cfgs.finetune.seed.wrapping_add(run_seed);
    cfgs.scratch.seed = cfgs.scratch.seed.wrapping_add(run_seed);
    cfgs
}

/// Sweep the pretraining corpus size: for each percent (ascending) and
/// each run seed, subsample the source videos (nested across percents for
/// a given seed), run the cascade, and keep the zero-shot and fine-tuned
/// target-test reports. Run seeds offset every stage seed, so seed 0
/// reproduces the base configs exactly.
pub fn transfer_curve(
    source: &CorpusManifest,
    target: &CorpusManifest,
    base: &CascadeConfigs,
    percents: &[f64],
    seeds: &[u64],
) -> Result<Vec<TransferPoint>> {
    if percents.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one percent and one seed".into()));
    }
    if percents.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("percents must be strictly ascending".into()));
    }
    if percents.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
        return Err(Error::Config("percents must lie in (0, 100]".into()));
    }
    let mut points = Vec::with_capacity(percents.len() * seeds.len());
    for &percent in percents {
        for &seed in seeds {
            let sub = subsample(source, percent, seed)?;
            let outcome = run_cascade(&sub, target, &shifted(base, seed))?;
            points.push(TransferPoint {
                percent,
                seed,
                zero_shot: outcome.reports["zero_shot"].clone(),
                finetuned: outcome.reports["finetuned"].clone(),
            });
        }
    }
    Ok(points)
}

/// Pinned schema: percent, direction, model, r1, r5, r10, med_rank.
pub fn curve_to_csv(points: &[TransferPoint]) -> String {
    let mut out = String::from("percent,direction,model,r1,r5,r10,med_rank\n");
    for p in points {
        for (model, pair) in [("zero_shot", &p.zero_shot), ("finetuned", &p.finetuned)] {
            for rep in [&pair.0, &pair.1] {
                let r = |k: usize| rep.r_at.get(&k).copied().unwrap_or(f64::NAN);
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{:.3}",
                    p.percent,
                    rep.direction,
                    model,
                    r(1),
                    r(5),
                    r(10),
                    rep.median_rank
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(n: usize, values: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            n,
            values,
            pair_video_ids: (0..n).map(|i| format!("v{i}")).collect(),
        }
    }

    fn identity(n: usize) -> SimilarityMatrix {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        matrix(n, values)
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let sim = identity(7);
        for d in [Direction::AudioToVisual, Direction::VisualToAudio] {
            assert_eq!(recall_at_k(&sim, 1, d).unwrap(), 1.0);
            assert_eq!(median_rank(&sim, d), 1.0);
        }
    }

    #[test]
    fn constructed_ranks_one_through_four() {
        // Row ranks 1, 2, 3, 4 by construction.
        let sim = matrix(
            4,
            vec![
                10.0, 1.0, 1.0, 1.0, //
                6.0, 5.0, 1.0, 1.0, //
                4.0, 4.0, 3.0, 1.0, //
                2.0, 2.0, 2.0, 1.0,
            ],
        );
        let d = Direction::AudioToVisual;
        assert_eq!(recall_at_k(&sim, 1, d).unwrap(), 0.25);
        assert_eq!(recall_at_k(&sim, 2, d).unwrap(), 0.5);
        assert_eq!(recall_at_k(&sim, 4, d).unwrap(), 1.0);
        assert_eq!(median_rank(&sim, d), 2.5);
    }

    #[test]
    fn constant_matrix_hits_the_tie_floor() {
        let n = 6;
        let sim = matrix(n, vec![0.5; n * n]);
        for d in [Direction::AudioToVisual, Direction::VisualToAudio] {
            for k in 1..n {
                assert_eq!(recall_at_k(&sim, k, d).unwrap(), 0.0, "k={k}");
            }
            assert_eq!(recall_at_k(&sim, n, d).unwrap(), 1.0);
            assert_eq!(median_rank(&sim, d), n as f64);
        }
    }

    #[test]
    fn k_out_of_range_errors() {
        let sim = identity(3);
        assert!(recall_at_k(&sim, 0, Direction::AudioToVisual).is_err());
        assert!(recall_at_k(&sim, 4, Direction::AudioToVisual).is_err());
    }

    /// Independent oracle: sort each query's scores descending with the
    /// true pair ordered last among equals; its sort position is the rank.
    fn oracle_ranks(sim: &SimilarityMatrix, direction: Direction) -> Vec<usize> {
        let n = sim.n;
        (0..n)
            .map(|i| {
                let mut scored: Vec<(f64, bool)> = (0..n)
                    .map(|j| {
                        let v = match direction {
                            Direction::AudioToVisual => sim.values[i * n + j],
                            Direction::VisualToAudio => sim.values[j * n + i],
                        };
                        (v, j == i)
                    })
                    .collect();
                scored.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                });
                scored.iter().position(|(_, own)| *own).unwrap() + 1
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_agree_with_the_sorting_oracle(
            n in 1usize..=64,
            seed in 0u64..10_000,
            coarse in proptest::bool::ANY,
        ) {
            let mut r = crate::rng::stream(seed, "eval-prop", &[n as u64]);
            // Coarse grids force plenty of ties.
            let values: Vec<f64> = (0..n * n)
                .map(|_| if coarse { r.gen_range(0..4) as f64 } else { r.gen_range(-1.0..1.0) })
                .collect();
            let sim = matrix(n, values);
            for d in [Direction::AudioToVisual, Direction::VisualToAudio] {
                let oracle = oracle_ranks(&sim, d);
                let mut previous = 0.0;
                for k in 1..=n {
                    let got = recall_at_k(&sim, k, d).unwrap();
                    let want = oracle.iter().filter(|&&rk| rk <= k).count() as f64 / n as f64;
                    prop_assert!((got - want).abs() < 1e-12, "n={n} k={k}");
                    prop_assert!(got >= previous, "recall must not decrease in k");
                    previous = got;
                }
                prop_assert_eq!(recall_at_k(&sim, n, d).unwrap(), 1.0);
                let mut sorted = oracle.clone();
                sorted.sort_unstable();
                let want_median = if n % 2 == 1 {
                    sorted[n / 2] as f64
                } else {
                    (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
                };
                prop_assert!((median_rank(&sim, d) - want_median).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_are_permutation_invariant(n in 2usize..20, seed in 0u64..1000) {
            let mut r = crate::rng::stream(seed, "eval-perm", &[n as u64]);
            let values: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let sim = matrix(n, values.clone());
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let mut permuted = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    permuted[i * n + j] = values[perm[i] * n + perm[j]];
                }
            }
            let psim = matrix(n, permuted);
            for d in [Direction::AudioToVisual, Direction::VisualToAudio] {
                for k in [1, n / 2 + 1, n] {
                    prop_assert_eq!(
                        recall_at_k(&sim, k, d).unwrap(),
                        recall_at_k(&psim, k, d).unwrap()
                    );
                }
                prop_assert_eq!(median_rank(&sim, d), median_rank(&psim, d));
            }
        }
    }

    #[test]
    fn one_hot_embeddings_are_perfect() {
        let n = 12;
        let one_hot: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let (fwd, bwd) = evaluate_embeddings(&one_hot, &one_hot, &ids, "c", "k").unwrap();
        for rep in [&fwd, &bwd] {
            assert_eq!(rep.r_at[&1], 1.0);
            assert_eq!(rep.r_at[&5], 1.0);
            assert_eq!(rep.r_at[&10], 1.0);
            assert_eq!(rep.median_rank, 1.0);
            assert_eq!(rep.corpus_id, "c");
            assert_eq!(rep.checkpoint_id, "k");
        }
        assert_eq!(fwd.direction, Direction::AudioToVisual);
        assert_eq!(bwd.direction, Direction::VisualToAudio);
    }

    #[test]
    fn random_unit_embeddings_score_at_chance() {
        // Mean R@1 over 20 galleries of 1000 should sit within 3 standard
        // errors of 1/1000 (SE of the binomial mean = sqrt(p(1-p)/n/20)).
        let n = 1000;
        let dim = 16;
        let mut total = 0.0;
        for seed in 0..20u64 {
            let mut r = crate::rng::stream(seed, "chance", &[]);
            let unit = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                let mut v: Vec<f64> =
                    (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            };
            let audio: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r)).collect();
            let visual: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r)).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            let sim = similarity_matrix(&audio, &visual, &ids).unwrap();
            total += recall_at_k(&sim, 1, Direction::AudioToVisual).unwrap();
        }
        let mean = total / 20.0;
        let p = 1.0 / n as f64;
        let se = (p * (1.0 - p) / n as f64 / 20.0).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * se,
            "mean R@1 {mean} vs chance {p} (3 SE = {})",
            3.0 * se
        );
    }

    #[test]
    fn subset_ids_are_fixed_and_nested_in_nothing() {
        assert_eq!(eval_subset_ids(5, 10, 0), vec![0, 1, 2, 3, 4]);
        let a = eval_subset_ids(2000, 1000, 0);
        let b = eval_subset_ids(2000, 1000, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 2000));
    }

    #[test]
    fn curve_rejects_bad_percents() {
        let m = CorpusManifest::new("a");
        let cfgs = CascadeConfigs {
            model: crate::encoders::ModelConfig::default(),
            pretrain: crate::trainer::StageConfig::pretrain_defaults(),
            finetune: crate::trainer::StageConfig::finetune_defaults(),
            scratch: crate::trainer::StageConfig::finetune_defaults(),
        };
        assert!(transfer_curve(&m, &m, &cfgs, &[], &[0]).is_err());
        assert!(transfer_curve(&m, &m, &cfgs, &[50.0, 10.0], &[0]).is_err());
        assert!(transfer_curve(&m, &m, &cfgs, &[0.0, 10.0], &[0]).is_err());
        assert!(transfer_curve(&m, &m, &cfgs, &[10.0, 101.0], &[0]).is_err());
    }

    #[test]
    fn csv_schema_is_pinned() {
        let rep = |d: Direction| RetrievalReport {
            direction: d,
            n: 10,
            r_at: [(1, 0.1), (5, 0.5), (10, 1.0)].into_iter().collect(),
            median_rank: 3.5,
            corpus_id: "c".into(),
            checkpoint_id: "k".into(),
        };
        let point = TransferPoint {
            percent: 25.0,
            seed: 0,
            zero_shot: (rep(Direction::AudioToVisual), rep(Direction::VisualToAudio)),
            finetuned: (rep(Direction::AudioToVisual), rep(Direction::VisualToAudio)),
        };
        let csv = curve_to_csv(&[point]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "percent,direction,model,r1,r5,r10,med_rank");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "25,audio_to_visual,zero_shot,0.100000,0.500000,1.000000,3.500");
        assert!(lines[4].starts_with("25,visual_to_audio,finetuned,"));
    }
}
