use prtr::cli::load_dataset;
use prtr::data::{load_coco_keypoints, synth_stickfigures, write_coco, LoaderOptions, SynthConfig};
use std::path::Path;

fn fixture_with_images() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/coco_small/annotations.json");
    std::fs::copy(&src, dir.path().join("annotations.json")).unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    for (name, w, h) in [("a.png", 80, 60), ("b.png", 64, 64), ("c.png", 40, 100)] {
        image::RgbImage::new(w, h).save(dir.path().join("images").join(name)).unwrap();
    }
    dir
}

#[test]
fn coco_fixture_loads_three_images() {
    let dir = fixture_with_images();
    let (data, skipped) = load_coco_keypoints(&dir.path().join("annotations.json"), &dir.path().join("images"), LoaderOptions::default()).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.catalog.len(), 17);
    assert_eq!(data.catalog.swap[1], 2);
    assert_eq!(skipped.crowd_annotations, 1);
    assert_eq!(skipped.dropped_instances, 1);
    assert!(skipped.missing_images.is_empty());
    let per_image: Vec<usize> = data.samples.iter().map(|s| s.instances.len()).collect();
    assert_eq!(per_image, [2, 1, 0]);

    let a = &data.samples[0];
    let first = &a.instances[0];
    assert!((first.bbox.x_left - 4.0 / 80.0).abs() < 1e-15);
    assert!((first.bbox.y_down - 57.0 / 60.0).abs() < 1e-15);
    assert!((first.keypoints[16].x - 37.0 / 80.0).abs() < 1e-15);
    // v = 1 counts as visible by default, v = 0 is missing
    let second = &a.instances[1];
    assert!(second.keypoints[0].visible);
    assert!(!second.keypoints[1].visible);
    assert_eq!(second.num_visible(), 16);

    let strict = load_coco_keypoints(&dir.path().join("annotations.json"), &dir.path().join("images"), LoaderOptions { v1_visible: false }).unwrap().0;
    assert!(!strict.samples[0].instances[1].keypoints[0].visible);
}

#[test]
fn data_argument_accepts_directory_file_and_synthetic() {
    let dir = fixture_with_images();
    assert_eq!(load_dataset(dir.path().to_str().unwrap(), None).unwrap().len(), 3);
    let file = dir.path().join("annotations.json");
    assert_eq!(load_dataset(file.to_str().unwrap(), None).unwrap().len(), 3);
    assert_eq!(load_dataset("synth:4:2", None).unwrap().len(), 4);
    assert!(load_dataset("synth:4", None).is_err());
}

#[test]
fn written_corpus_reloads() {
    let data = synth_stickfigures(3, 5, &SynthConfig::default());
    let dir = tempfile::tempdir().unwrap();
    write_coco(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path().to_str().unwrap(), None).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.catalog, data.catalog);
    for (s, t) in data.samples.iter().zip(&back.samples) {
        assert_eq!(*s.load_rgb().unwrap(), *t.load_rgb().unwrap());
        assert_eq!(s.instances.len(), t.instances.len());
        for (p, q) in s.instances.iter().zip(&t.instances) {
            assert!((p.bbox.x_left - q.bbox.x_left).abs() < 1e-12);
            for (k, l) in p.keypoints.iter().zip(&q.keypoints) {
                assert_eq!(k.visible, l.visible);
                assert!((k.x - l.x).abs() < 1e-12 && (k.y - l.y).abs() < 1e-12);
            }
        }
    }
}
