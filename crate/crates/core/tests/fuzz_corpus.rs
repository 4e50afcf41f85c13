//! Replays the checked-in fuzz corpus, plus cheap byte-level mutations of
//! every seed, through the same entry points as the fuzz targets.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use opencil::checkpoint::{parse_checkpoint, write_checkpoint};
use opencil::config::RunConfigFile;
use opencil::dataset::{parse_dataset, parse_edges, parse_features, parse_labels, read_npz, SyntheticSpec};
use opencil::engine::RunReport;
use opencil::tasks::TaskManifest;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed, its prefixes at a few cut points and copies with single bytes
/// overwritten.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    let n = seed.len();
    for k in 1..8 {
        out.push(seed[..n * k / 8].to_vec());
    }
    for (i, b) in [b'\0', b'-', b'9', b'\n', b'"', b'e', 0xff].into_iter().enumerate() {
        for pos in [n / 3, n / 2, (n * 5) / 7] {
            if pos < n {
                let mut v = seed.to_vec();
                v[(pos + i) % n] = b;
                out.push(v);
            }
        }
    }
    out
}

fn each_text(target: &str, f: impl Fn(&str)) -> usize {
    let mut n = 0;
    for (_, seed) in corpus(target) {
        for v in variants(&seed) {
            if let Ok(text) = std::str::from_utf8(&v) {
                f(text);
                n += 1;
            }
        }
    }
    n
}

#[test]
fn dataset_text_parsers() {
    each_text("features", |t| {
        if let Ok(x) = parse_features(t) {
            assert!(x.iter().all(|v| v.is_finite()));
        }
    });
    each_text("edges", |t| {
        let _ = parse_edges(t);
    });
    each_text("labels", |t| {
        if let Ok(l) = parse_labels(t) {
            assert!(l.iter().all(|&v| v >= -1));
        }
    });
    let parsed = each_text("dataset", |t| {
        let mut parts = t.splitn(3, '\0');
        if let (Some(f), Some(e), Some(l)) = (parts.next(), parts.next(), parts.next()) {
            if let Ok(g) = parse_dataset(f, e, l) {
                assert!(g.edges().iter().all(|&(u, v)| u < g.num_nodes() && v < g.num_nodes() && u != v));
            }
        }
    });
    assert!(parsed > 0);
}

#[test]
fn npz_decoder() {
    let seeds = corpus("npz");
    assert!(seeds.iter().any(|(_, b)| read_npz(Cursor::new(b)).is_ok()));
    for (_, seed) in seeds {
        for v in variants(&seed) {
            let _ = read_npz(Cursor::new(v));
        }
    }
}

#[test]
fn run_config_parser() {
    assert!(corpus("run_config")
        .iter()
        .all(|(p, b)| RunConfigFile::parse(std::str::from_utf8(b).unwrap()).is_ok() || panic!("{}", p.display())));
    each_text("run_config", |t| {
        if let Ok(c) = RunConfigFile::parse(t) {
            assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
        }
    });
    each_text("synthetic_spec", |t| {
        let _ = toml::from_str::<SyntheticSpec>(t);
    });
}

#[test]
fn checkpoint_parser() {
    for (p, b) in corpus("checkpoint") {
        assert!(parse_checkpoint(std::str::from_utf8(&b).unwrap()).is_ok(), "{}", p.display());
    }
    each_text("checkpoint", |t| {
        if let Ok(state) = parse_checkpoint(t) {
            assert_eq!(parse_checkpoint(&write_checkpoint(&state)).unwrap(), state);
        }
    });
}

#[test]
fn json_documents() {
    for (p, b) in corpus("manifest") {
        assert!(TaskManifest::from_json(std::str::from_utf8(&b).unwrap()).is_ok(), "{}", p.display());
    }
    for (p, b) in corpus("report") {
        assert!(RunReport::from_json(std::str::from_utf8(&b).unwrap()).is_ok(), "{}", p.display());
    }
    each_text("manifest", |t| {
        if let Ok(m) = TaskManifest::from_json(t) {
            assert_eq!(TaskManifest::from_json(&m.to_json()).unwrap(), m);
        }
    });
    each_text("report", |t| {
        if let Ok(r) = RunReport::from_json(t) {
            assert!(r.tasks.iter().all(|m| m.oscr <= m.closed_acc));
        }
    });
}
