//! Golden-file pinning of the checkpoint byte layout and of a composed-path
//! forward pass. The fixtures under `tests/golden/` were produced by the
//! `regenerate_golden_files` helper below and are committed; any byte-level
//! drift in the manifest or blob encoding fails these tests.

mod common;

use std::fs;
use std::path::PathBuf;

use common::shape;
use sha2::{Digest, Sha256};
use transplant_core::checkpoint;
use transplant_core::graph::{NetModule, Role, TeacherNet};
use transplant_core::layers::{LayerParams, LayerSpec};
use transplant_core::tensor::{Element, Tensor};

fn golden_dir(precision: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(precision)
}

/// Deterministic ramp values: reproducible on any platform without an RNG.
fn ramp<E: Element>(shape_dims: &[usize], scale: f64, offset: f64) -> Tensor<E> {
    Tensor::from_fn(&shape(shape_dims), |i| {
        E::from_f64((i as f64) * scale - offset)
    })
}

fn golden_teacher<E: Element>() -> TeacherNet<E> {
    let conv = LayerSpec::Conv {
        out_channels: 2,
        in_channels: 1,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let category = NetModule::new(
        "golden-cat",
        Role::Category,
        vec![
            conv,
            LayerSpec::Relu,
            LayerSpec::MaxPool {
                window: 2,
                stride: 2,
            },
        ],
        vec![
            LayerParams::new(ramp(&[2, 1, 3, 3], 0.01, 0.08), ramp(&[2], 0.1, 0.05)),
            LayerParams::none(),
            LayerParams::none(),
        ],
        shape(&[1, 4, 4]),
    )
    .unwrap();
    let task = NetModule::new(
        "golden-task",
        Role::Task,
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8,
                outputs: 2,
            },
        ],
        vec![
            LayerParams::none(),
            LayerParams::new(ramp(&[2, 8], 0.02, 0.15), ramp(&[2], 0.1, 0.0)),
        ],
        shape(&[2, 2, 2]),
    )
    .unwrap();
    let mut teacher = TeacherNet::new(category, task).unwrap();
    teacher.freeze();
    teacher
}

fn compare_dir_bytes(fresh: &std::path::Path, golden: &std::path::Path) {
    let mut names: Vec<String> = fs::read_dir(golden)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty(), "golden dir {} is empty", golden.display());
    for name in names {
        let want = fs::read(golden.join(&name)).unwrap();
        let got = fs::read(fresh.join(&name))
            .unwrap_or_else(|_| panic!("fresh checkpoint missing {name}"));
        assert_eq!(
            got,
            want,
            "{name} differs from the committed golden file"
        );
    }
}

fn check_precision<E: Element>(tag: &str) {
    let teacher = golden_teacher::<E>();
    let tmp = std::env::temp_dir().join(format!(
        "golden-fresh-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    checkpoint::save_teacher(&tmp, &teacher).unwrap();
    compare_dir_bytes(&tmp, &golden_dir(tag));

    // Load the committed files and verify bitwise parameter equality.
    let loaded = checkpoint::load_teacher::<E>(golden_dir(tag)).unwrap();
    assert_eq!(loaded.category.param_hash_hex(), teacher.category.param_hash_hex());
    assert_eq!(loaded.task.param_hash_hex(), teacher.task.param_hash_hex());
    fs::remove_dir_all(&tmp).unwrap();
}

#[test]
fn checkpoint_bytes_match_golden_single() {
    check_precision::<f32>("single");
}

#[test]
fn checkpoint_bytes_match_golden_double() {
    check_precision::<f64>("double");
}

/// Forward regression: a fixed ramp input through the golden path must
/// reproduce a pinned output hash (pure IEEE-754 arithmetic end to end).
#[test]
fn composed_forward_reproduces_pinned_hash() {
    let teacher = golden_teacher::<f64>();
    let path = teacher.path();
    let x = ramp::<f64>(&[1, 4, 4], 0.05, 0.3);
    let (y, _) = path.forward(&x).unwrap();
    let mut hasher = Sha256::new();
    hasher.update(y.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(
        hex,
        "f2e03aca50809ddccc6673eef9ebfeba7888bf9553d478bb84aa4af6d6c4adc0",
        "path forward drifted; output = {:?}",
        y.data()
    );
}

/// Regenerates the committed fixtures. Run manually, then commit the result:
/// `cargo test -p transplant-core --test golden -- --ignored regenerate`.
#[test]
#[ignore]
fn regenerate_golden_files() {
    let base = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let _ = fs::remove_dir_all(&base);
    checkpoint::save_teacher(base.join("single"), &golden_teacher::<f32>()).unwrap();
    checkpoint::save_teacher(base.join("double"), &golden_teacher::<f64>()).unwrap();
    // Print the forward hash to pin above.
    let teacher = golden_teacher::<f64>();
    let path = teacher.path();
    let x = ramp::<f64>(&[1, 4, 4], 0.05, 0.3);
    let (y, _) = path.forward(&x).unwrap();
    let mut hasher = Sha256::new();
    hasher.update(y.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("forward hash: {hex}");
}
