use std::fs;
use std::path::Path;

use dbvae::data::{build_dataset, export_dataset, load_image, load_image_dir, DatasetSpec, GroupCounts, GroupTag};
use dbvae::train::{train_standard, TrainConfig};

fn write_png(path: &Path, size: u32, value: impl Fn(u32, u32) -> u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::GrayImage::from_fn(size, size, |x, y| image::Luma([value(x, y)]))
        .save(path)
        .unwrap();
}

#[test]
fn spec_counts_and_ratio() {
    let spec = DatasetSpec {
        faces: GroupCounts { light_a: 90, light_b: 10, dark_a: 90, dark_b: 10 },
        nonfaces: 100,
        channels: 1,
        seed: 3,
    };
    let ds = build_dataset(&spec).unwrap();
    assert_eq!(ds.len(), 300);
    assert_eq!(ds.face_indices().len(), 2 * ds.nonface_indices().len());
    for g in GroupTag::ALL {
        let n = ds.examples.iter().filter(|e| e.group == Some(g)).count();
        assert_eq!(n, spec.faces.get(g));
    }
    assert_eq!(build_dataset(&spec).unwrap(), ds);
    let bad = DatasetSpec { nonfaces: 0, ..spec };
    assert!(build_dataset(&bad).is_err());
}

#[test]
fn export_then_load_recovers_labels_and_pixels() {
    let spec = DatasetSpec { faces: GroupCounts::uniform(2), nonfaces: 3, channels: 1, seed: 9 };
    let ds = build_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path(), Some("seed=9")).unwrap();
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("# seed=9\nfilename,label,group\n"));
    assert_eq!(manifest.lines().count(), 2 + ds.len());

    let back = load_image_dir(dir.path(), 1).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.summary(), ds.summary());
    // The loader orders by directory and file name; match through the
    // exported index embedded in each file name.
    let mut faces: Vec<_> = ds.face_indices();
    faces.sort_by_key(|&i| (ds.examples[i].group.unwrap().to_string(), i));
    for (loaded, &i) in back.examples.iter().zip(&faces) {
        let orig = &ds.examples[i];
        assert_eq!(loaded.group, orig.group);
        for (a, b) in loaded.image.data().iter().zip(orig.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn loader_resizes_to_64() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&dir.path().join(format!("faces/dark_B/{i}.png")), 128, |x, _| (x * 2) as u8);
    }
    write_png(&dir.path().join("nonfaces/n.png"), 128, |_, _| 10);
    let ds = load_image_dir(dir.path(), 1).unwrap();
    assert_eq!(ds.face_indices().len(), 3);
    for e in &ds.examples {
        assert_eq!(e.image.shape(), &[1, 64, 64]);
    }
    assert!(ds.examples[..3].iter().all(|e| e.group == Some("dark_B".parse().unwrap())));
    // Horizontal ramp stays a ramp after resizing.
    let first = &ds.examples[0].image;
    assert!(first.data()[63] > first.data()[0]);
}

#[test]
fn loader_keeps_64_by_64_images() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    write_png(&path, 64, |x, y| ((x * 7 + y * 13) % 256) as u8);
    let t = load_image(&path, 1).unwrap();
    for y in 0..64u32 {
        for x in 0..64u32 {
            let want = ((x * 7 + y * 13) % 256) as f64 / 255.0;
            assert_eq!(t.data()[(y * 64 + x) as usize], want);
        }
    }
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("faces")).unwrap();
    write_png(&root.join("nonfaces/n.png"), 8, |_, _| 0);
    let err = load_image_dir(root, 1).unwrap_err().to_string();
    assert!(err.contains("no face images"), "{err}");

    write_png(&root.join("faces/purple_C/a.png"), 8, |_, _| 0);
    let err = load_image_dir(root, 1).unwrap_err().to_string();
    assert!(err.contains("purple_C"), "{err}");
    fs::remove_dir_all(root.join("faces/purple_C")).unwrap();

    fs::write(root.join("faces/broken.png"), b"not a png").unwrap();
    let err = load_image_dir(root, 1).unwrap_err().to_string();
    assert!(err.contains("broken.png"), "{err}");

    assert!(load_image_dir(&root.join("missing"), 1).is_err());
}

#[test]
fn synthetic_task_is_learnable() {
    let spec = DatasetSpec { faces: GroupCounts::uniform(50), nonfaces: 200, channels: 1, seed: 17 };
    let ds = build_dataset(&spec).unwrap();
    let config = TrainConfig { epochs: 5, seed: 17, ..TrainConfig::default() }.standard();
    let outcome = train_standard(&config, &ds).unwrap();
    let last = outcome.history.last().unwrap();
    assert!(last.train_accuracy >= 0.95, "{:?}", outcome.history);
}
