use std::fs;

use image::GrayImage;
use proptest::prelude::*;
use uct::dataset::{
    format_groundtruth, generate_synthetic, load_sequence, parse_groundtruth, suite_specs, BBox, Occlusion, SynthSpec,
};
use uct::SuiteConfig;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0f64..500.0, -50.0f64..500.0, 0.1f64..300.0, 0.1f64..300.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn synth_spec() -> impl Strategy<Value = SynthSpec> {
    (
        (20.0f64..40.0, 16.0f64..40.0),
        (-3.0f64..3.0, -3.0f64..3.0),
        0.98f64..1.02,
        any::<bool>(),
        any::<u64>(),
        2usize..12,
    )
        .prop_map(|(size, velocity, zoom, occluded, seed, frames)| SynthSpec {
            name: "prop".into(),
            canvas: (96, 80),
            object_size: size,
            start_center: (48.0, 40.0),
            velocity,
            zoom,
            occlusion: occluded.then_some(Occlusion {
                start: 1,
                end: 3,
                opacity: 0.8,
            }),
            noise: 0.02,
            seed,
            frames,
        })
}

proptest! {
    #[test]
    fn groundtruth_round_trips(boxes in prop::collection::vec(bbox(), 1..20)) {
        prop_assert_eq!(parse_groundtruth(&format_groundtruth(&boxes)).unwrap(), boxes);
    }

    #[test]
    fn generation_is_deterministic_and_inside_the_canvas(spec in synth_spec()) {
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        prop_assert!(!a.is_empty());
        prop_assert_eq!(a.len(), a.annotations.len());
        prop_assert_eq!(&a.annotations, &b.annotations);
        for t in 0..a.len() {
            prop_assert_eq!(a.frame(t).unwrap(), b.frame(t).unwrap());
            let bx = a.annotations[t];
            prop_assert!(bx.w > 0.0 && bx.h > 0.0);
            prop_assert!(bx.x >= 0.0 && bx.y >= 0.0);
            prop_assert!(bx.right() <= spec.canvas.0 as f64 && bx.bottom() <= spec.canvas.1 as f64);
            prop_assert_eq!(bx, spec.box_at(t));
        }
    }
}

#[test]
fn export_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = suite_specs(&SuiteConfig {
        sequences: 1,
        frames: 3,
        ..SuiteConfig::desk_defaults()
    })
    .remove(0);
    let seq = generate_synthetic(&spec).unwrap();
    seq.export(dir.path()).unwrap();
    let loaded = load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert!(loaded.warnings.is_empty());
    for (a, b) in loaded.annotations.iter().zip(&seq.annotations) {
        assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        assert!((a.w - b.w).abs() < 1e-9 && (a.h - b.h).abs() < 1e-9);
    }
    for t in 0..3 {
        assert_eq!(loaded.frame(t).unwrap(), seq.frame(t).unwrap());
    }
}

#[test]
fn short_groundtruth_loads_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    fs::create_dir(&img).unwrap();
    for k in 1..=10 {
        GrayImage::from_pixel(8, 8, image::Luma([k as u8 * 20]))
            .save(img.join(format!("img{k:03}.png")))
            .unwrap();
    }
    let gt: String = (0..8).map(|k| format!("{},2,3,4\n", k + 1)).collect();
    fs::write(dir.path().join("groundtruth_rect.txt"), gt).unwrap();
    let seq = load_sequence(dir.path()).unwrap();
    assert_eq!(seq.len(), 10);
    assert_eq!(seq.annotations.len(), 8);
    assert_eq!(seq.warnings.len(), 1);
    assert_eq!(seq.annotations[0], BBox::new(0.0, 1.0, 3.0, 4.0));
    for t in 0..10 {
        let v = seq.frame(t).unwrap().data()[0];
        assert!((v - (t as f64 + 1.0) * 20.0 / 255.0).abs() < 1e-12, "frame {t} out of order");
    }
}

#[test]
fn missing_groundtruth_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("img")).unwrap();
    assert!(load_sequence(dir.path()).is_err());
}
