use std::path::PathBuf;

use clap::Parser;

use super::pipeline::{derive_seed, pair_name, Stream};
use super::*;
use crate::synthcohort::GroupLabel;

#[test]
fn default_config_validates_and_round_trips() {
    let config = RunConfig::default();
    config.validate().unwrap();
    let back = RunConfig::from_json(&config.to_json()).unwrap();
    assert_eq!(back, config);
}

#[test]
fn partial_config_fills_defaults() {
    let config = RunConfig::from_json(r#"{"seed": 3, "model": {"embed_dim": 16}}"#).unwrap();
    assert_eq!(config.seed, 3);
    assert_eq!(config.model.embed_dim, 16);
    assert_eq!(config.model.heads, RunConfig::default().model.heads);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [r#"{"sed": 3}"#, r#"{"detector": {"epoch": 3}}"#] {
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err:?}");
        assert_eq!(exit_code(&err), 1);
    }
}

#[test]
fn invalid_sections_fail_validation() {
    let mut config = RunConfig::default();
    config.io.workers = Some(0);
    assert!(matches!(config.validate(), Err(Error::Validation(_))));

    let mut config = RunConfig::default();
    config.model.heads = 5;
    assert!(config.validate().is_err());

    let mut config = RunConfig::default();
    config.connectome.window_count = 11;
    assert!(config.validate().is_err());
}

#[test]
fn missing_config_names_the_path() {
    let path = PathBuf::from("/nonexistent/circuitscope/run.json");
    match RunConfig::load(&path) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}

#[test]
fn exit_codes_split_input_from_runtime_failures() {
    assert_eq!(exit_code(&Error::Validation("x".into())), 1);
    assert_eq!(exit_code(&Error::MissingArtifact("a/b".into())), 1);
    assert_eq!(exit_code(&Error::parse("f", "m")), 1);
    assert_eq!(exit_code(&Error::Computation("x".into())), 2);
    let err = Error::Invariant {
        module: "diffcore",
        invariant: "grad_check",
        detail: String::new(),
    };
    assert_eq!(exit_code(&err), 2);
    let text = err.to_string();
    assert!(text.contains("diffcore") && text.contains("grad_check"), "{text}");
}

#[test]
fn config_hash_tracks_content() {
    let a = RunConfig::default();
    let mut b = a.clone();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 64);
    b.seed += 1;
    assert_ne!(config_hash(&a), config_hash(&b));
}

#[test]
fn seed_streams_are_distinct_and_stable() {
    let streams = [
        Stream::Split,
        Stream::Parameters,
        Stream::Pretrain,
        Stream::Detector,
        Stream::Shuffle,
    ];
    let seeds: Vec<u64> = streams.iter().map(|&s| derive_seed(7, s)).collect();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
    assert_eq!(derive_seed(7, Stream::Split), seeds[0]);
    assert_ne!(derive_seed(8, Stream::Split), seeds[0]);
}

#[test]
fn pair_names() {
    assert_eq!(pair_name(GroupLabel::LowNicotine), "S-L");
    assert_eq!(pair_name(GroupLabel::HighNicotine), "S-H");
}

#[test]
fn flags_parse_on_either_side_of_the_command() {
    let inv = Invocation::try_parse_from(["circuitscope", "--seed", "4", "detect", "--out", "o", "--quiet"]).unwrap();
    assert_eq!(inv.command, Command::Detect);
    assert_eq!(inv.seed, Some(4));
    assert_eq!(inv.out, Some(PathBuf::from("o")));
    assert!(inv.quiet);
    assert_eq!(inv.command.name(), "detect");
}

#[test]
fn bad_arguments_exit_one_and_help_exits_zero() {
    assert_eq!(main_with_args(["circuitscope", "frobnicate"]), 1);
    assert_eq!(main_with_args(["circuitscope", "synth", "--seed", "x"]), 1);
    assert_eq!(main_with_args(["circuitscope", "--help"]), 0);
}

#[test]
fn unreadable_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, "{ not json").unwrap();
    let out = dir.path().join("out");
    let args = [
        "circuitscope",
        "synth",
        "--quiet",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(main_with_args(args), 1);
    assert!(!out.exists());
}
