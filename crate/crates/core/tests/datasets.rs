mod common;

use std::path::Path;

use common::fixture;
use image::{Rgb, RgbImage};
use reid_core::datasets::matfile::{read_first_matrix, read_text_matrix};
use reid_core::datasets::*;
use reid_core::Error;

fn write_img(path: &Path, shade: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(8, 16, Rgb([shade, 100, 200])).save(path).unwrap();
}

#[test]
fn mat_fixtures_plain_and_compressed() {
    let want = vec![1.0, 16.0, 1.0, 1.0, 17.0, 40.0, 1.0, 2.0, 41.0, 41.0, -1.0, 3.0];
    for name in ["tracks_plain.mat", "tracks_zip.mat"] {
        let m = read_first_matrix(&fixture(name)).unwrap();
        assert_eq!((m.rows, m.cols), (3, 4), "{name}");
        assert_eq!(m.values(), want.as_slice(), "{name}");
    }
    let q = read_first_matrix(&fixture("query_idx.mat")).unwrap();
    assert_eq!(q.values(), &[2.0, 3.0]);
}

#[test]
fn text_matrix_accepts_commas_and_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "1, 2,3\n4 5 6\n").unwrap();
    let m = read_text_matrix(&p).unwrap();
    assert_eq!((m.rows, m.cols), (2, 3));
    assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
}

fn mars_tree(root: &Path) {
    let train = ["0001C1T0001F001.jpg", "0001C1T0001F002.jpg", "0001C1T0001F003.jpg", "0002C2T0001F001.jpg", "0002C2T0001F002.jpg"];
    let test = ["0003C1T0001F001.jpg", "0003C1T0001F002.jpg", "0003C2T0001F001.jpg", "0003C2T0001F002.jpg", "00-1C1T0001F001.jpg"];
    for (subset, names) in [("train", &train), ("test", &test)] {
        for (i, n) in names.iter().enumerate() {
            write_img(&root.join(format!("bbox_{subset}")).join(&n[..4]).join(n), i as u8 * 20);
        }
        std::fs::create_dir_all(root.join("info")).unwrap();
        std::fs::write(root.join(format!("info/{subset}_name.txt")), names.join("\n")).unwrap();
    }
    std::fs::write(root.join("info/tracks_train_info.txt"), "1 3 1 1\n4 5 2 2\n").unwrap();
    std::fs::write(root.join("info/tracks_test_info.csv"), "1,2,3,1\n3,4,3,2\n5,5,-1,1\n").unwrap();
    std::fs::write(root.join("info/query_IDX.txt"), "1\n").unwrap();
}

#[test]
fn mars_layout() {
    let dir = tempfile::tempdir().unwrap();
    mars_tree(dir.path());
    let index = scan_dataset(dir.path(), Layout::Mars).unwrap();
    assert_eq!(index.len(), 5);
    assert_eq!(index.identities(Split::Train), vec![1, 2]);
    let query: Vec<_> = index.split(Split::Query).map(|(_, r)| r.key()).collect();
    assert_eq!(query, vec![(3, 1, 0)]);
    let gallery: Vec<_> = index.split(Split::Gallery).map(|(_, r)| r.person_id).collect();
    assert_eq!(gallery, vec![-1, 3]);
    let first = index.split(Split::Train).next().unwrap().1;
    assert_eq!(first.len(), 3);
    assert!(first.frame_paths[0].ends_with("bbox_train/0001/0001C1T0001F001.jpg"));
}

#[test]
fn mars_query_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    mars_tree(dir.path());
    std::fs::write(dir.path().join("info/query_IDX.txt"), "9\n").unwrap();
    assert!(matches!(scan_dataset(dir.path(), Layout::Mars), Err(Error::Validation(_))));
}

#[test]
fn prid_layout_keeps_shared_ids_up_to_200() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("multi_shot");
    for (cam, ids) in [("cam_a", vec![1, 2, 3, 201]), ("cam_b", vec![1, 2, 201, 300])] {
        for id in ids {
            for f in 1..=3 {
                write_img(&base.join(cam).join(format!("person_{id:04}/{f:04}.png")), f as u8);
            }
        }
    }
    let index = scan_dataset(dir.path(), Layout::Prid2011).unwrap();
    let ids: std::collections::BTreeSet<i64> = index.records().iter().map(|r| r.person_id).collect();
    assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(index.len(), 4);
    // one identity trains, the other is split between probe (cam 1) and gallery (cam 2)
    assert_eq!(index.identities(Split::Train).len(), 1);
    for (_, r) in index.split(Split::Query) {
        assert_eq!(r.camera_id, 1);
    }
    for (_, r) in index.split(Split::Gallery) {
        assert_eq!(r.camera_id, 2);
    }
}

#[test]
fn ilids_layout_with_frame_order() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("i-LIDS-VID/sequences");
    for cam in ["cam1", "cam2"] {
        for id in [1, 2, 5, 7] {
            for f in [10, 2, 1] {
                write_img(&base.join(cam).join(format!("person{id:03}/{cam}_person{id:03}_{f:05}.png")), f as u8);
            }
        }
    }
    let index = scan_dataset(dir.path(), Layout::IlidsVid).unwrap();
    assert_eq!(index.len(), 8);
    let r = &index.records()[0];
    let names: Vec<_> = r.frame_paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert!(names[0].ends_with("00001.png") && names[2].ends_with("00010.png"));
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ia = common::synth(a.path(), 3, 11);
    let ib = common::synth(b.path(), 3, 11);
    assert_eq!(ia.len(), 3 * 2 * 2);
    for (ra, rb) in ia.records().iter().zip(ib.records()) {
        assert_eq!(ra.key(), rb.key());
        for (pa, pb) in ra.frame_paths.iter().zip(&rb.frame_paths) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }
    let c = tempfile::tempdir().unwrap();
    let ic = common::synth(c.path(), 3, 12);
    let differs = ia.records()[0]
        .frame_paths
        .iter()
        .zip(&ic.records()[0].frame_paths)
        .any(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap());
    assert!(differs);
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let index = common::synth(&dir.path().join("data"), 2, 0);
    let path = dir.path().join("index.jsonl");
    index.write_manifest(&path).unwrap();
    let back = TrackletIndex::read_manifest(&path).unwrap();
    assert_eq!(back.records(), index.records());
    assert_eq!(back.layout(), Layout::Synthetic);
}

#[test]
fn scan_errors_name_the_problem() {
    let missing = Path::new("/definitely/not/here");
    match scan_dataset(missing, Layout::Synthetic) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected io error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("0001/01/0001")).unwrap();
    let err = scan_dataset(dir.path(), Layout::Synthetic).unwrap_err().to_string();
    assert!(err.contains("0001/01/0001"), "{err}");

    let bad = tempfile::tempdir().unwrap();
    let p = bad.path().join("0001/01/0001/00000.png");
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(&p, b"not a png").unwrap();
    let err = scan_dataset(bad.path(), Layout::Synthetic).unwrap_err().to_string();
    assert!(err.contains("unreadable image") && err.contains("00000.png"), "{err}");
}

#[test]
fn epoch_covers_every_identity_with_full_batches() {
    let dir = tempfile::tempdir().unwrap();
    let index = common::synth(dir.path(), 11, 3);
    let spec = BatchSpec::new(4, 4).unwrap();
    let mut rng = reid_core::seed::rng_for(1, &[]);
    let mut seen = std::collections::BTreeSet::new();
    for batch in pk_batch_stream(&index, spec, &mut rng).unwrap() {
        assert_eq!(batch.len(), 16);
        let mut counts = std::collections::BTreeMap::new();
        for (r, pid) in &batch {
            assert_eq!(r.person_id, *pid);
            *counts.entry(*pid).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
        seen.extend(counts.into_keys());
    }
    assert_eq!(seen.len(), 11);
}
