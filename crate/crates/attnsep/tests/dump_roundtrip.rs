use std::fs;
use std::path::Path;

use attnsep::dump_io::{read_dump, write_dump, Dtype, DumpManifest, HeadSlice};
use attnsep::synthetic::{generate_paired, ProfileParams, SyntheticConfig};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seq_len: 48,
        head_dim: 24,
        c: 3.0,
        lambda: 0.2,
        beta: 0.1,
        rho0: -0.1,
        profile: ProfileParams {
            p_sink: 20.0,
            p_base: 1.0,
            eta: 0.3,
            omega: 0.7,
            t1: 12,
            t2: 36,
        },
        seed,
        noise: 0.01,
        softmax_renormalize: true,
        exact_a2: false,
    }
}

fn synthetic_dump(dir: &Path, seed: u64) -> Vec<HeadSlice> {
    let cfg = config(seed);
    let mut slices = Vec::new();
    for layer in 0..2 {
        for head in 0..3 {
            let mut s = generate_paired(&cfg, &[cfg.rho0], (layer * 3 + head) as u64).unwrap().remove(0);
            s.layer = layer;
            s.head = head;
            slices.push(s);
        }
    }
    let manifest = DumpManifest {
        model_name: "synthetic".into(),
        num_layers: 2,
        num_heads: 3,
        seq_len: cfg.seq_len,
        head_dim: cfg.head_dim,
        dtype: Dtype::F32,
        has_full_attention: false,
    };
    write_dump(&manifest, &slices, dir).unwrap();
    slices
}

fn digest(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let h = Sha256::digest(fs::read(&p).unwrap());
            (p.file_name().unwrap().to_string_lossy().into_owned(), format!("{h:x}"))
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synthetic_dump_round_trips_exactly() {
    let tmp = TempDir::new().unwrap();
    let written = synthetic_dump(tmp.path(), 9);
    let dump = read_dump(tmp.path()).unwrap();
    assert_eq!(dump.head_ids().len(), 6);
    let read = dump.slices().unwrap();
    assert_eq!(read, written);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b, c) = (TempDir::new().unwrap(), TempDir::new().unwrap(), TempDir::new().unwrap());
    synthetic_dump(a.path(), 9);
    synthetic_dump(b.path(), 9);
    synthetic_dump(c.path(), 10);
    let (da, db, dc) = (digest(a.path()), digest(b.path()), digest(c.path()));
    assert_eq!(da.len(), 1 + 2 * 6);
    assert_eq!(da, db);
    let differing = da.iter().zip(&dc).filter(|(x, y)| x.1 != y.1).count();
    // Attention rows depend only on the template; values change with the seed.
    assert_eq!(differing, 6);
}
