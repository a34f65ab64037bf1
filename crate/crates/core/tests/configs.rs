mod common;

use langcoop::backends::BackendFile;
use langcoop::harness::{run_matrix, MatrixSpec};

fn files(dir: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(common::root().join(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_backend_files_load() {
    let mut n = 0;
    for p in files("backends").into_iter().chain(files("backends/live")) {
        let f = BackendFile::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        f.registry().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 11);
}

#[test]
fn shipped_matrices_resolve() {
    let list = files("matrices");
    assert!(list.len() >= 7);
    for p in &list {
        let (spec, base) = MatrixSpec::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(!spec.cells.is_empty() && spec.scenarios.len() == 10, "{}", p.display());
        for s in &spec.scenarios {
            assert!(base.join(s).exists(), "{}: {}", p.display(), s.display());
        }
        let mut backends = vec![spec.backend_config.clone()];
        backends.extend(spec.cells.iter().filter_map(|c| c.overrides.backend_config.clone()));
        for b in backends {
            BackendFile::load(&base.join(&b)).unwrap_or_else(|e| panic!("{}: {e}", b.display()));
        }
    }
}

#[test]
fn offline_matrix_runs() {
    let (mut spec, base) = MatrixSpec::load(&common::root().join("matrices/scripted_communication.toml")).unwrap();
    spec.out = None;
    let rep = run_matrix(&spec, &base, false).unwrap();
    assert!(rep.records.iter().all(|r| r.error.is_none()));
    assert_eq!(rep.records.len(), 4 * 10 * 2);
    for label in ["Non-collab", "Image (JPEG)", "LangPack", "Image+LangPack"] {
        assert!(rep.table.lines().any(|l| l.starts_with(label)), "{}", rep.table);
    }
}

#[test]
fn fixture_frame_is_an_800_by_600_jpeg() {
    let bytes = std::fs::read(common::root().join("fixtures/frames/front_800x600.jpg")).unwrap();
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg).unwrap();
    assert_eq!((img.width(), img.height()), (800, 600));
    // Compressed size close to a typical shared camera frame.
    assert!((30_000..=60_000).contains(&bytes.len()), "{} bytes", bytes.len());
}
