//! Command-line surface tests: the full pipeline in-process, byte-level
//! reproducibility, exit codes through a real child process, and corpus
//! ingestion from crafted audio.

use std::path::{Path, PathBuf};
use std::process::Command;

use avcascade::corpus::load_manifest;
use avcascade::corpus::Split;
use avcascade::dsp::{read_wav, Waveform, SAMPLE_RATE};
use avcascade::synth::{read_vfea, write_vfea};
use avcascade::encoders::VisualFeatures;
use avcascade::rng;
use rand::Rng;

fn cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    avcascade::cli::run(&argv)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny paired corpora: one synthesis seed for both languages so they share
/// a visual world, which is what the cascade commands expect.
fn synth_language(out: &Path, language: &str, seed: &str) -> i32 {
    let lang = format!("synth.language={language}");
    cli(&[
        "avcascade",
        "synth",
        "--out",
        path_str(out),
        "--seed",
        seed,
        "--splits",
        "0.5,0.25,0.25",
        "--set",
        "synth.num_videos=16",
        "--set",
        "synth.clips_per_video=3",
        "--set",
        "synth.clip_duration_s=0.5",
        "--set",
        "synth.num_concepts=4",
        "--set",
        "synth.shared_concept_fraction=0.5",
        "--set",
        "synth.noise_sigma=0.3",
        "--set",
        &lang,
    ])
}

const TRAIN_SETS: [&str; 16] = [
    "--set",
    "model.conv_channels=8,8",
    "--set",
    "model.embedding_dim=8",
    "--set",
    "pretrain.videos_per_batch=2",
    "--set",
    "pretrain.clips_per_video=2",
    "--set",
    "pretrain.clip_len_s=0.5",
    "--set",
    "pretrain.epochs=2",
    "--set",
    "finetune.flat_batch_clips=6",
    "--set",
    "finetune.epochs=2",
];

fn with_sets(mut args: Vec<&str>) -> Vec<String> {
    args.extend_from_slice(&TRAIN_SETS);
    args.iter().map(|s| s.to_string()).collect()
}

fn run_manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run_manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("source");
    let target = dir.path().join("target");
    assert_eq!(synth_language(&source, "a", "11"), 0);
    assert_eq!(synth_language(&target, "b", "11"), 0);
    let source_manifest = source.join("manifest.jsonl");
    let target_manifest = target.join("manifest.jsonl");

    let manifest = load_manifest(&source_manifest).unwrap();
    assert_eq!(manifest.records.len(), 48);
    assert!(manifest.records.iter().all(|r| r.split != Split::Unassigned));
    let recorded = run_manifest(&source);
    assert_eq!(recorded["argv"][1], "synth");
    assert!(recorded["outputs"]["manifest.jsonl"].is_string());
    assert!(recorded["config_sha256"].is_string());

    let pre = dir.path().join("pre");
    let code = avcascade::cli::run(&with_sets(vec![
        "avcascade",
        "pretrain",
        "--corpus",
        path_str(&source_manifest),
        "--out",
        path_str(&pre),
        "--seed",
        "7",
    ]));
    assert_eq!(code, 0);
    let pretrained = pre.join("pretrained.avck");
    assert!(pretrained.exists());

    let fine = dir.path().join("fine");
    let code = avcascade::cli::run(&with_sets(vec![
        "avcascade",
        "finetune",
        "--corpus",
        path_str(&target_manifest),
        "--init",
        path_str(&pretrained),
        "--out",
        path_str(&fine),
        "--seed",
        "7",
    ]));
    assert_eq!(code, 0);
    assert!(fine.join("finetuned.avck").exists());
    assert!(fine.join("finetuned_audio_to_visual.json").exists());
    assert!(fine.join("finetuned_visual_to_audio.json").exists());

    let zs = dir.path().join("zs");
    let code = cli(&[
        "avcascade",
        "zero-shot-eval",
        "--init",
        path_str(&pretrained),
        "--corpus",
        path_str(&target_manifest),
        "--out",
        path_str(&zs),
    ]);
    assert_eq!(code, 0);
    assert!(zs.join("zero_shot_audio_to_visual.json").exists());

    let ev = dir.path().join("ev");
    let code = cli(&[
        "avcascade",
        "eval",
        "--init",
        path_str(&fine.join("finetuned.avck")),
        "--corpus",
        path_str(&target_manifest),
        "--split",
        "val",
        "--out",
        path_str(&ev),
    ]);
    assert_eq!(code, 0);
    assert!(ev.join("eval_visual_to_audio.json").exists());

    let cas = dir.path().join("cas");
    let code = avcascade::cli::run(&with_sets(vec![
        "avcascade",
        "cascade",
        "--source",
        path_str(&source_manifest),
        "--target",
        path_str(&target_manifest),
        "--out",
        path_str(&cas),
        "--seed",
        "7",
    ]));
    assert_eq!(code, 0);
    for tag in ["scratch", "zero_shot", "finetuned"] {
        assert!(cas.join(format!("{tag}.avck")).exists());
        assert!(cas.join(format!("{tag}_audio_to_visual.json")).exists());
        assert!(cas.join(format!("{tag}_visual_to_audio.json")).exists());
    }

    let curve = dir.path().join("curve");
    let code = avcascade::cli::run(&with_sets(vec![
        "avcascade",
        "curve",
        "--source",
        path_str(&source_manifest),
        "--target",
        path_str(&target_manifest),
        "--percents",
        "50,100",
        "--out",
        path_str(&curve),
        "--seed",
        "7",
    ]));
    assert_eq!(code, 0);
    let csv_path = curve.join("curve.csv");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("percent,direction,model,r1,r5,r10,med_rank\n"));
    // 2 percents x 2 models x 2 directions.
    assert_eq!(csv.lines().count(), 1 + 8);

    // Re-rendering from the CSV alone reproduces the chart byte for byte.
    let plot = dir.path().join("plot");
    let code = cli(&[
        "avcascade",
        "plot",
        "--csv",
        path_str(&csv_path),
        "--out",
        path_str(&plot),
    ]);
    assert_eq!(code, 0);
    let a = std::fs::read(curve.join("curve.svg")).unwrap();
    let b = std::fs::read(plot.join("curve.svg")).unwrap();
    assert!(!a.is_empty() && a == b);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = dir.path().join("c1");
    let c2 = dir.path().join("c2");
    assert_eq!(synth_language(&c1, "a", "3"), 0);
    assert_eq!(synth_language(&c2, "a", "3"), 0);
    let m1 = std::fs::read(c1.join("manifest.jsonl")).unwrap();
    let m2 = std::fs::read(c2.join("manifest.jsonl")).unwrap();
    assert_eq!(m1, m2);

    let p1 = dir.path().join("p1");
    let p2 = dir.path().join("p2");
    for out in [&p1, &p2] {
        let code = avcascade::cli::run(&with_sets(vec![
            "avcascade",
            "pretrain",
            "--corpus",
            path_str(&c1.join("manifest.jsonl")),
            "--out",
            path_str(out),
            "--seed",
            "7",
        ]));
        assert_eq!(code, 0);
    }
    let b1 = std::fs::read(p1.join("pretrained.avck")).unwrap();
    let b2 = std::fs::read(p2.join("pretrained.avck")).unwrap();
    assert_eq!(b1, b2);
}

#[test]
fn exit_codes_through_a_real_process() {
    let bin = env!("CARGO_BIN_EXE_avcascade");
    let dir = tempfile::tempdir().unwrap();

    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));

    let version = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(version.status.code(), Some(0));

    let bogus = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(bogus.status.code(), Some(1));

    let missing = Command::new(bin)
        .args([
            "pretrain",
            "--corpus",
            path_str(&dir.path().join("nope.jsonl")),
            "--out",
            path_str(&dir.path().join("out")),
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    // --out falls back to the environment.
    let env_out = dir.path().join("env_out");
    let fast = Command::new(bin)
        .args([
            "synth",
            "--set",
            "synth.num_videos=4",
            "--set",
            "synth.clips_per_video=2",
            "--set",
            "synth.clip_duration_s=0.5",
            "--set",
            "synth.num_concepts=4",
            "--set",
            "synth.shared_concept_fraction=0.5",
        ])
        .env("AVCASCADE_OUT", &env_out)
        .output()
        .unwrap();
    assert_eq!(fast.status.code(), Some(0));
    assert!(env_out.join("manifest.jsonl").exists());
}

/// 30 s track: silence, a 7 s tone, a 3 s gap, an 8 s tone, then silence.
fn bursty_track() -> Waveform {
    let sr = SAMPLE_RATE as usize;
    let mut samples = vec![0.0f32; 30 * sr];
    for (from_s, to_s) in [(2, 9), (12, 20)] {
        let w = 2.0 * std::f64::consts::PI * 330.0 / sr as f64;
        for i in from_s * sr..to_s * sr {
            samples[i] = (0.5 * (w * i as f64).sin()) as f32;
        }
    }
    Waveform::mono(samples, SAMPLE_RATE)
}

#[test]
fn build_corpus_segments_bursty_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("audio");
    let features = dir.path().join("features");
    std::fs::create_dir_all(&audio).unwrap();
    std::fs::create_dir_all(&features).unwrap();

    let mut r = rng::stream(9, "cli-build-corpus", &[]);
    for stem in ["t00", "t01"] {
        avcascade::dsp::write_wav(&audio.join(format!("{stem}.wav")), &bursty_track()).unwrap();
        let feat = VisualFeatures {
            t: 120,
            d2: 3,
            frames_2d: (0..360).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
            s: 45,
            d3: 2,
            segments_3d: (0..90).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
        };
        write_vfea(&feat, &features.join(format!("{stem}.vfea"))).unwrap();
    }

    let out = dir.path().join("corpus");
    let code = cli(&[
        "avcascade",
        "build-corpus",
        "--audio",
        path_str(&audio),
        "--features",
        path_str(&features),
        "--language",
        "x",
        "--splits",
        "0.5,0.25,0.25",
        "--seed",
        "3",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code, 0);

    let manifest = load_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.records.len(), 4, "two clips per track");
    assert!(manifest.records.iter().all(|rec| rec.language == "x"));
    assert!(manifest.records.iter().all(|rec| rec.split != Split::Unassigned));

    let expected = [(2.0, 9.0), (12.0, 20.0)];
    for rec in &manifest.records {
        let dur = rec.end_s - rec.start_s;
        assert!((5.0..=50.0).contains(&dur), "clip lasts {dur} s");
        let k: usize = rec.clip_id.rsplit("_c").next().unwrap().parse().unwrap();
        let (start, end) = expected[k];
        assert!((rec.start_s - start).abs() < 0.5, "clip {} starts at {}", rec.clip_id, rec.start_s);
        assert!((rec.end_s - end).abs() < 0.5, "clip {} ends at {}", rec.clip_id, rec.end_s);

        let wave = read_wav(&manifest.audio_path_abs(rec)).unwrap();
        let wav_s = wave.samples.len() as f64 / wave.sample_rate as f64;
        assert!((wav_s - dur).abs() < 0.05, "cropped audio lasts {wav_s} s for a {dur} s clip");

        // Feature rows stay proportional to the clip's share of the track.
        let feat = read_vfea(&manifest.visual_path_abs(rec)).unwrap();
        assert!((feat.t as f64 / 120.0 - dur / 30.0).abs() < 0.05);
        assert!((feat.s as f64 / 45.0 - dur / 30.0).abs() < 0.08);
        assert_eq!((feat.d2, feat.d3), (3, 2));
    }
}

#[test]
fn config_file_merges_with_set_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# corpus size\nsynth.num_videos = 6\nsynth.clips_per_video = 2\nsynth.clip_duration_s = 0.5\nsynth.num_concepts = 4\nsynth.shared_concept_fraction = 0.5\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let code = cli(&[
        "avcascade",
        "synth",
        "--config",
        path_str(&cfg),
        "--set",
        "synth.num_videos=8",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code, 0);
    let manifest = load_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.video_ids().len(), 8, "--set wins over the file");
    assert_eq!(manifest.records.len(), 16);
}

#[test]
fn unknown_and_malformed_keys_exit_1_or_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // Unknown namespace is a runtime config error.
    let code = cli(&[
        "avcascade",
        "synth",
        "--set",
        "nope.num_videos=8",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code, 2);
    // Missing required argument is a usage error.
    let code = cli(&["avcascade", "plot", "--csv"]);
    assert_eq!(code, 1);
}

#[test]
fn curve_rejects_unsorted_percents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = cli(&[
        "avcascade",
        "curve",
        "--source",
        path_str(&PathBuf::from("unused.jsonl")),
        "--target",
        path_str(&PathBuf::from("unused.jsonl")),
        "--percents",
        "100,50",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(code, 2);
}
