use cwssnet::checkpoint::save_checkpoint;
use cwssnet::gradcheck::tiny_network_check;
use cwssnet::network::{Model, NetworkConfig};
use cwssnet::params::Forward;
use cwssnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

#[test]
fn tiny_network_gradients_match_finite_differences() {
    for seed in [0, 1] {
        let r = tiny_network_check(seed, 6).unwrap();
        assert!(r.passed(), "{}: {:e}", r.name, r.error);
    }
}

#[test]
fn stages_halve_then_restore_the_patch() {
    let model = Model::new(NetworkConfig::default(), 42).unwrap();
    let widths = model.net.cfg.widths;
    for s in [8, 16, 32, 64] {
        let x = Tensor::randn(&[1, 30, s, s], 1.0, &mut ChaCha8Rng::seed_from_u64(s as u64));
        let mut fw = Forward::new(&model.store, false, false);
        let input = fw.input(x);
        let st = model.net.forward_stages(&mut fw, input).unwrap();
        let shape = |v| fw.graph.value(v).shape().to_vec();
        assert_eq!(shape(st.f1), [1, widths[0], s, s]);
        assert_eq!(shape(st.d1), [1, widths[0], s / 2, s / 2]);
        assert_eq!(shape(st.f2), [1, widths[1], s / 2, s / 2]);
        assert_eq!(shape(st.d2), [1, widths[1], s / 4, s / 4]);
        assert_eq!(shape(st.fu1), [1, widths[1], s / 2, s / 2]);
        assert_eq!(shape(st.fu2), [1, widths[0], s, s]);
        assert_eq!(shape(st.logits), [1, 6, s, s]);
    }
}

fn digest_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p.strip_prefix(dir).unwrap().display().to_string(), Sha256::digest(bytes).to_vec())
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_checkpoints() {
    let cfg = cwssnet::gradcheck::tiny_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let model = Model::new(cfg.clone(), 5).unwrap();
        save_checkpoint(d.path(), &model, None, serde_json::json!({"seed": 5}), 0, 0.0).unwrap();
    }
    let (a, b) = (digest_dir(dirs[0].path()), digest_dir(dirs[1].path()));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}
