use std::path::Path;

use glasstereo::data::{
    generate_toy_scene, load_sample, save_sample, DatasetManifest, ObjectPose, Split, StereoSample, ToySceneSpec,
};
use glasstereo::Error;

fn scene(seed: u64, transparency: f64) -> StereoSample {
    let spec = ToySceneSpec {
        transparency_fraction: transparency,
        ..Default::default()
    };
    generate_toy_scene(seed, &spec).unwrap()
}

fn frontmost(objects: &[ObjectPose], x: f64, v: f64) -> Option<&ObjectPose> {
    objects
        .iter()
        .filter(|o| o.contains(x + o.disparity, v))
        .max_by(|a, b| a.disparity.total_cmp(&b.disparity))
}

#[test]
fn save_then_load_is_field_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(17, 0.5);
    let entry = save_sample(&s, dir.path(), "a", Split::Val).unwrap();
    let back = load_sample(dir.path(), &entry).unwrap();
    assert_eq!(back.left, s.left);
    assert_eq!(back.right, s.right);
    assert_eq!(back.valid, s.valid);
    assert_eq!(back.object_mask, s.object_mask);
    assert_eq!(back.rig, s.rig);
    assert_eq!(back.meta, s.meta);
    let bits = |a: &StereoSample| a.gt_disparity.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&s));
}

#[test]
fn manifest_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DatasetManifest::new(dir.path());
    for i in 0..3 {
        m.entries
            .push(save_sample(&scene(i, 0.5), dir.path(), &format!("s{i}"), Split::Train).unwrap());
    }
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(loaded.entries, m.entries);
    loaded.verify().unwrap();
    assert_eq!(loaded.split(Split::Train).count(), 3);

    std::fs::remove_file(dir.path().join("s1/right.png")).unwrap();
    assert!(matches!(loaded.verify(), Err(Error::MissingFile(_))));
    assert!(matches!(loaded.load_sample(&loaded.entries[1]), Err(Error::MissingFile(_))));
}

#[test]
fn truncated_disparity_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let entry = save_sample(&scene(3, 0.0), dir.path(), "t", Split::Test).unwrap();
    let p = dir.path().join(&entry.disparity);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_sample(dir.path(), &entry).unwrap_err();
    assert!(matches!(err, Error::Malformed { .. }));
    assert!(err.to_string().contains(&p.display().to_string()));
}

#[test]
fn mismatched_field_shapes_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = save_sample(&scene(4, 0.0), dir.path(), "a", Split::Train).unwrap();
    let small = ToySceneSpec {
        width: 64,
        height: 32,
        disparity_range: [1.0, 12.0],
        ..Default::default()
    };
    let b = save_sample(&generate_toy_scene(5, &small).unwrap(), dir.path(), "b", Split::Train).unwrap();
    std::fs::copy(dir.path().join(&b.left), dir.path().join(&a.left)).unwrap();
    assert!(matches!(load_sample(dir.path(), &a), Err(Error::Malformed { .. })));
}

#[test]
fn malformed_manifest_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.json");
    std::fs::write(&p, "[{\"id\": 3}]").unwrap();
    let err = DatasetManifest::load(&p).unwrap_err();
    assert!(err.to_string().contains("manifest.json"));
    assert!(matches!(
        DatasetManifest::load(Path::new("/nonexistent/manifest.json")),
        Err(Error::MissingFile(_))
    ));
}

/// For opaque surfaces visible in both views the right image at u − d
/// shows the same texture as the left image at u.
#[test]
fn opaque_pixels_are_photometrically_consistent() {
    let mut checked = 0;
    for seed in 0..10 {
        let s = scene(seed, 0.0);
        for ((v, u), &d) in s.gt_disparity.indexed_iter() {
            if !s.valid[[v, u]] {
                continue;
            }
            let id = s.object_mask[[v, u]];
            if id == 0 {
                continue;
            }
            let x = u as f64 - d as f64;
            let visible = frontmost(&s.meta.objects, x, v as f64).map(|o| o.id) == Some(id);
            if !visible {
                continue;
            }
            let l = s.left.get_pixel(u as u32, v as u32).0;
            let r = s.right.get_pixel(x as u32, v as u32).0;
            for c in 0..3 {
                assert!((l[c] as i32 - r[c] as i32).abs() <= 1, "seed {seed} ({u},{v}): {l:?} vs {r:?}");
            }
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

/// Background pixels visible in both views agree after bilinear warping
/// within interpolation error of the dot texture.
#[test]
fn background_warp_matches_plane() {
    for seed in 0..5 {
        let s = scene(seed, 0.0);
        let [a, b, c] = s.meta.background_plane;
        let (h, w) = (s.height() as f64, s.width() as f64);
        for ((v, u), &d) in s.gt_disparity.indexed_iter() {
            if s.valid[[v, u]] && s.object_mask[[v, u]] == 0 {
                let plane = a + b * v as f64 / h + c * u as f64 / w;
                assert!((d as f64 - plane).abs() < 1e-4);
            }
        }
    }
}
