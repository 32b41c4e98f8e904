use skiptune::data::{Dataset, DatasetKind, SHAPES_CLASSES, SHAPES_SIZE};
use skiptune::Error;

#[test]
fn shapes_cover_every_class_with_bounded_pixels() {
    let d = Dataset::generate(DatasetKind::Shapes, 400, 1).unwrap();
    assert_eq!(d.images.shape(), &[400, 1, SHAPES_SIZE, SHAPES_SIZE]);
    let labels = d.labels_or_err().unwrap();
    for c in 0..SHAPES_CLASSES {
        assert!(labels.contains(&c), "class {c} missing");
    }
    assert!(labels.iter().all(|&l| l < SHAPES_CLASSES));
    assert!(d.images.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn generation_depends_only_on_seed() {
    for kind in [DatasetKind::Shapes, DatasetKind::Gmm] {
        let a = Dataset::generate(kind, 50, 3).unwrap();
        assert_eq!(a, Dataset::generate(kind, 50, 3).unwrap());
        assert_ne!(a, Dataset::generate(kind, 50, 4).unwrap());
    }
}

#[test]
fn file_round_trip_with_and_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.bin");
    let d = Dataset::generate(DatasetKind::Gmm, 33, 5).unwrap();
    d.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), d);
    let unlabeled = Dataset {
        images: d.images.clone(),
        labels: None,
    };
    unlabeled.save(&p).unwrap();
    let back = Dataset::load(&p).unwrap();
    assert!(back.images.bit_eq(&d.images));
    assert!(matches!(back.labels_or_err(), Err(Error::Config(_))));
}

#[test]
fn damaged_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.bin");
    Dataset::generate(DatasetKind::Shapes, 4, 6)
        .unwrap()
        .save(&p)
        .unwrap();
    let bytes = std::fs::read(&p).unwrap();

    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Dataset::load(&p), Err(Error::Format(_))));

    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&p, &extra).unwrap();
    assert!(matches!(Dataset::load(&p), Err(Error::Format(_))));

    std::fs::write(&p, b"something else\n").unwrap();
    assert!(matches!(Dataset::load(&p), Err(Error::Format(_))));
}
