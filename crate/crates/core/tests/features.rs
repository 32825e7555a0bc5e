use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uct::features::{
    apply_window, backward_stack, crop_and_resize, extract, normalize_energy, normalize_energy_backward, ConvStack,
    LayerSpec, Region,
};
use uct::gradcheck::check_entries;
use uct::tensor::{hann2d, map_stats};
use uct::DenseMap;

fn image(c: usize, h: usize, w: usize, data: Vec<f64>) -> DenseMap {
    DenseMap::from_vec(c, h, w, data).unwrap()
}

fn image_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = DenseMap> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |d| image(c, h, w, d))
}

fn layer_spec() -> impl Strategy<Value = LayerSpec> {
    (1usize..=3, 1usize..=3, 1usize..=2, any::<bool>()).prop_map(|(filters, kernel, stride, relu)| LayerSpec {
        filters,
        kernel,
        stride,
        relu,
    })
}

proptest! {
    #[test]
    fn empty_stack_is_identity(img in (1usize..=3, 1usize..10, 1usize..10).prop_flat_map(|(c, h, w)| image_strategy(c, h, w))) {
        prop_assert_eq!(extract(&img, &ConvStack::empty()).unwrap(), img);
    }

    #[test]
    fn crop_of_whole_image_is_identity(img in (1usize..=3, 1usize..12, 1usize..12).prop_flat_map(|(c, h, w)| image_strategy(c, h, w))) {
        let (h, w) = (img.height() as f64, img.width() as f64);
        let window = Region::new(w / 2.0, h / 2.0, w, h);
        let patch = crop_and_resize(&img, window, (img.height(), img.width())).unwrap();
        for (a, b) in patch.pixels.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let again = crop_and_resize(&patch.pixels, window, (img.height(), img.width())).unwrap();
        for (a, b) in again.pixels.data().iter().zip(patch.pixels.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_stack_matches_finite_differences(
        specs in prop::collection::vec(layer_spec(), 1..=2),
        in_channels in 1usize..=2,
        side in 6usize..=12,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = ConvStack::random(in_channels, &specs, &mut rng).unwrap();
        let (oh, ow) = match stack.output_size(side, side) {
            Some(s) => s,
            None => return Err(TestCaseError::reject("patch too small for the stack")),
        };
        let n = in_channels * side * side;
        let input = image(in_channels, side, side, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        prop_assume!(stack.min_abs_preactivation(&input).unwrap() > 1e-4);
        let c_out = stack.output_channels(in_channels);
        let upstream = image(c_out, oh, ow, (0..c_out * oh * ow).map(|_| rng.random_range(-1.0..1.0)).collect());
        let grads = backward_stack(&stack, &input, &upstream).unwrap();
        prop_assert_eq!(grads.len(), stack.layers.len());
        for (l, g) in grads.iter().enumerate() {
            let mut w = stack.layers[l].weights.clone();
            let mut probe = stack.clone();
            let worst = check_entries(&mut w, g, |m| {
                probe.layers[l].weights = m.clone();
                extract(&input, &probe)?.dot(&upstream)
            }).unwrap();
            prop_assert!(worst < 1e-4, "layer {l}: relative error {worst}");
        }
    }

    #[test]
    fn energy_normalization_backward_matches_finite_differences(
        x in prop::collection::vec(-1.0f64..1.0, 12),
        u in prop::collection::vec(-1.0f64..1.0, 12),
        energy in 0.5f64..4.0,
    ) {
        let x = image(3, 2, 2, x);
        prop_assume!(x.sum_sq() > 1e-3);
        let u = image(3, 2, 2, u);
        let g = normalize_energy_backward(&x, energy, &u).unwrap();
        let out = normalize_energy(&x, energy);
        prop_assert!((out.sum_sq() - energy).abs() < 1e-9);
        let mut xm = x.clone();
        let worst = check_entries(&mut xm, &g, |m| normalize_energy(m, energy).dot(&u)).unwrap();
        prop_assert!(worst < 1e-4);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stack = ConvStack::random(1, &ConvStack::default_specs(), &mut rng).unwrap();
    let input = DenseMap::filled(1, 20, 20, 0.25);
    let (oh, ow) = stack.output_size(20, 20).unwrap();
    let grads = backward_stack(&stack, &input, &DenseMap::zeros(16, oh, ow)).unwrap();
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn apply_window_keeps_a_dominant_peak() {
    let w = hann2d(9, 9).unwrap();
    let mut f = DenseMap::filled(2, 9, 9, 0.1);
    f.set(0, 3, 5, 1.0);
    f.set(1, 6, 2, 2.0);
    let out = apply_window(&f, &w).unwrap();
    assert_eq!(map_stats(&out.channel_map(0)).unwrap().max_pos, (3, 5));
    assert_eq!(map_stats(&out.channel_map(1)).unwrap().max_pos, (6, 2));
}

#[test]
fn apply_window_rejects_mismatched_window() {
    assert!(apply_window(&DenseMap::zeros(2, 4, 4), &DenseMap::zeros(1, 4, 5)).is_err());
}
