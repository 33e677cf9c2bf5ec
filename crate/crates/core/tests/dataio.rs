use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::GrayImage;
use textdiff::data::{generate_synthetic, generate_synthetic_with_classes, load_folder, save_folder, split, ShapeClass};
use textdiff::Error;

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
}

#[test]
fn target_classes_are_balanced() {
    let (_, classes) = generate_synthetic_with_classes(1000, (32, 32), 11).unwrap();
    let round = classes.iter().filter(|c| **c == ShapeClass::Round).count() as f64 / 1000.0;
    assert!((round - 0.5).abs() <= 0.05, "round share {round}");
}

/// Mask geometry: a ring has a hole at its bounding-box centre, a square is
/// solid; the quadrant named in the text holds the mask centroid.
#[test]
fn mask_covers_the_named_shape() {
    let (ds, classes) = generate_synthetic_with_classes(60, (64, 64), 7).unwrap();
    for (s, class) in ds.samples.iter().zip(classes) {
        let m = flat(&s.mask);
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        let on: Vec<(usize, usize)> = (0..64 * 64).filter(|&i| m[i] == 1.0).map(|i| (i / 64, i % 64)).collect();
        assert!(!on.is_empty(), "{} has an empty mask", s.image_id);
        assert!(s.text.contains(class.word()), "{}: {}", s.image_id, s.text);

        let (y0, y1) = (on.iter().map(|p| p.0).min().unwrap(), on.iter().map(|p| p.0).max().unwrap());
        let (x0, x1) = (on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap());
        let box_area = (y1 - y0 + 1) * (x1 - x0 + 1);
        let centre = m[(y0 + y1) / 2 * 64 + (x0 + x1) / 2];
        match class {
            ShapeClass::Square => {
                assert_eq!(on.len(), box_area, "{} square not solid", s.image_id);
            }
            ShapeClass::Round => {
                assert_eq!(centre, 0.0, "{} ring has no hole", s.image_id);
                assert!(on.len() < box_area);
            }
        }

        // the mask is one connected object
        let set: BTreeSet<(usize, usize)> = on.iter().copied().collect();
        let mut seen = BTreeSet::from([on[0]]);
        let mut stack = vec![on[0]];
        while let Some((y, x)) = stack.pop() {
            for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let n = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                if set.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        assert_eq!(seen.len(), set.len(), "{} mask is not one shape", s.image_id);

        let cy = on.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / on.len() as f64;
        let cx = on.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / on.len() as f64;
        // raster centroids sit within a pixel of the true centre
        if (cy - 32.0).abs() > 1.0 {
            let v = if cy < 32.0 { "upper" } else { "lower" };
            assert!(s.text.contains(v), "{}: {} centroid row {cy:.1}", s.image_id, s.text);
        }
        if (cx - 32.0).abs() > 1.0 {
            let h = if cx < 32.0 { "left" } else { "right" };
            assert!(s.text.contains(h), "{}: {} centroid col {cx:.1}", s.image_id, s.text);
        }
    }
}

#[test]
fn same_seed_gives_identical_folders() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_folder(&generate_synthetic(60, (64, 64), 7).unwrap(), a.path()).unwrap();
    save_folder(&generate_synthetic(60, (64, 64), 7).unwrap(), b.path()).unwrap();
    for rel in ["texts.csv", "images/syn_0000.png", "masks/syn_0059.png"] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }
}

fn write_folder(root: &Path, ids: &[&str], texts: &[(&str, &str)]) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let img = GrayImage::from_fn(20, 20, |x, y| image::Luma([((x * 7 + y * 3 + k as u32) % 256) as u8]));
        img.save(root.join("images").join(format!("{id}.png"))).unwrap();
        let mask = GrayImage::from_fn(20, 20, |x, _| image::Luma([if x < 10 { 255 } else { 0 }]));
        mask.save(root.join("masks").join(format!("{id}.png"))).unwrap();
    }
    let mut csv = String::from("image_id,text\n");
    for (id, t) in texts {
        csv.push_str(&format!("{id},{t}\n"));
    }
    std::fs::write(root.join("texts.csv"), csv).unwrap();
}

#[test]
fn folder_of_five_loads_five_binary_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ids = ["img_001", "img_002", "img_003", "img_004", "img_005"];
    let texts: Vec<(&str, &str)> = ids.iter().map(|id| (*id, "a round lesion")).collect();
    write_folder(dir.path(), &ids, &texts);
    let ds = load_folder(dir.path(), (16, 16), 1).unwrap();
    assert_eq!(ds.manifest.ids, ids);
    for s in &ds.samples {
        assert_eq!(s.image.dims(), &[16, 16, 1]);
        let m = flat(&s.mask);
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 8 * 16);
        let px = flat(&s.image);
        assert!(px.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn missing_text_row_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(
        dir.path(),
        &["img_012", "img_013"],
        &[("img_012", "the square one")],
    );
    match load_folder(dir.path(), (16, 16), 1) {
        Err(Error::MissingTextRow(id)) => assert_eq!(id, "img_013"),
        other => panic!("expected MissingTextRow, got {other:?}"),
    }
}

#[test]
fn missing_mask_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &["a", "b"], &[("a", "x"), ("b", "y")]);
    std::fs::remove_file(dir.path().join("masks/b.png")).unwrap();
    match load_folder(dir.path(), (16, 16), 1) {
        Err(Error::MissingMask(id)) => assert_eq!(id, "b"),
        other => panic!("expected MissingMask, got {other:?}"),
    }
}

#[test]
fn unreadable_image_names_the_image() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &["a", "b"], &[("a", "x"), ("b", "y")]);
    std::fs::write(dir.path().join("images/a.png"), b"not a png").unwrap();
    match load_folder(dir.path(), (16, 16), 1) {
        Err(Error::UnreadableFile { id, .. }) => assert_eq!(id, "a"),
        other => panic!("expected UnreadableFile, got {other:?}"),
    }
}

#[test]
fn split_edges() {
    let ds = generate_synthetic(12, (32, 32), 3).unwrap();
    let (tr, te) = split(&ds.manifest, 11, 5).unwrap();
    assert_eq!((tr.len(), te.len()), (11, 1));
    assert!(!tr.ids.contains(&te.ids[0]));
    assert_eq!(split(&ds.manifest, 11, 5).unwrap(), (tr, te));
    assert!(matches!(
        split(&ds.manifest, 12, 5),
        Err(Error::TrainNTooLarge { train_n: 12, total: 12 })
    ));
}

#[test]
fn synthetic_round_trip_through_folder() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(4, (32, 32), 9).unwrap();
    save_folder(&ds, dir.path()).unwrap();
    let back = load_folder(dir.path(), (32, 32), 1).unwrap();
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.text, b.text);
        assert_eq!(flat(&a.image), flat(&b.image));
        assert_eq!(flat(&a.mask), flat(&b.mask));
    }
}
