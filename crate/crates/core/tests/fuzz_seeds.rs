//! Replays the checked-in fuzz corpus through the decoders.

use std::fs;
use std::path::PathBuf;

use hban_core::channel::{decode_dataset, encode_dataset};
use hban_core::harness::{parse_cells, parse_series, ExperimentConfig};
use hban_core::hban::HbanModel;
use hban_core::labels::{parse_sidecar, write_sidecar};
use hban_core::neural::{decode_checkpoint, encode_checkpoint};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn valid(name: &str) -> bool {
    !(name.starts_with("bad") || name.starts_with("truncated"))
}

#[test]
fn dataset_seeds() {
    for (name, bytes) in seeds("decode_dataset") {
        match decode_dataset(&bytes) {
            Ok(ds) => {
                assert!(valid(&name), "{name} decoded");
                assert_eq!(encode_dataset(&ds), bytes, "{name}");
            }
            Err(_) => assert!(!valid(&name), "{name} rejected"),
        }
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in seeds("decode_checkpoint") {
        match decode_checkpoint(&bytes) {
            Ok(ts) => {
                assert!(valid(&name), "{name} decoded");
                assert_eq!(encode_checkpoint(&ts), bytes);
                let model = HbanModel::from_tensors(&ts).unwrap();
                assert!(model.is_trained());
            }
            Err(_) => assert!(!valid(&name), "{name} rejected"),
        }
    }
}

#[test]
fn sidecar_seeds() {
    for (name, bytes) in seeds("parse_sidecar") {
        let text = String::from_utf8(bytes).unwrap();
        match parse_sidecar(&text) {
            Ok(rows) => {
                assert!(valid(&name), "{name} parsed");
                assert_eq!(write_sidecar(&rows), text);
            }
            Err(_) => assert!(!valid(&name), "{name} rejected"),
        }
    }
}

#[test]
fn report_seeds() {
    for (name, bytes) in seeds("parse_report") {
        let text = String::from_utf8(bytes).unwrap();
        if name.starts_with("cells") {
            assert!(!parse_cells(&text).unwrap().is_empty());
        } else {
            assert!(!parse_series(&text).unwrap().is_empty());
        }
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("parse_config") {
        let text = String::from_utf8(bytes).unwrap();
        if name == "summary.toml" {
            assert!(ExperimentConfig::from_toml(&text).is_err());
            continue;
        }
        let cfg = ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
    }
}
