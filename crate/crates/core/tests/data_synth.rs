mod common;

use proptest::prelude::*;
use rand::Rng;
use xmodal_core::container::{
    decode_archive, decode_tensor, encode_archive, encode_tensor, read_container, write_container,
    CHECKPOINT_MAGIC, TENSOR_MAGIC,
};
use xmodal_core::rng::RngState;
use xmodal_core::synth::{
    add_noise_unclamped, band_response, degrade_spatial, degrade_spectral, extract_patches, gaussian_kernel,
    generate_scene, inject_noise, load_scene, reflect, save_scene, SceneKind, Split, SyntheticSceneSpec, SNR_GRID,
};
use xmodal_core::{Error, Tensor};

use common::{random_tensor, rng};

fn cube(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for b in 0..d {
                data.push(f(y, x, b));
            }
        }
    }
    Tensor::new(vec![h, w, d], data).unwrap()
}

fn small_spec(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        height: 24,
        width: 20,
        classes: 4,
        bands_hi: 24,
        bands_lo: 4,
        label_fraction: 0.1,
        seed,
        ..Default::default()
    }
}

#[test]
fn band_response_rows_are_stochastic() {
    let r = band_response(8, 64);
    assert_eq!(r.shape(), &[8, 64]);
    for i in 0..8 {
        assert!(r.row(i).iter().all(|&v| v >= 0.0));
        assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_spectrum_keeps_its_value() {
    let hi = cube(3, 4, 64, |_, _, _| 0.37);
    let lo = degrade_spectral(&hi, &band_response(8, 64)).unwrap();
    assert!(lo.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    let ones = degrade_spectral(&cube(2, 2, 64, |_, _, _| 1.0), &band_response(8, 64)).unwrap();
    assert!(ones.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn identity_response_is_identity() {
    let mut r = rng(1);
    let hi = random_tensor(&mut r, &[3, 5, 6], 1.0);
    let mut eye = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        eye.row_mut(i)[i] = 1.0;
    }
    assert_eq!(degrade_spectral(&hi, &eye).unwrap(), hi);
}

#[test]
fn spectral_degradation_matches_a_loop_oracle() {
    let mut r = rng(2);
    let hi = random_tensor(&mut r, &[5, 4, 16], 1.0);
    let resp = band_response(3, 16);
    let lo = degrade_spectral(&hi, &resp).unwrap();
    for p in 0..20 {
        for i in 0..3 {
            let mut acc = 0.0;
            for b in 0..16 {
                acc += resp.row(i)[b] * hi.data()[p * 16 + b];
            }
            assert!((lo.data()[p * 3 + i] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn spectral_degradation_rejects_mismatched_response() {
    let hi = Tensor::zeros(&[2, 2, 8]);
    assert!(matches!(
        degrade_spectral(&hi, &band_response(3, 9)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn spatial_blur_identity_and_constant_cases() {
    let mut r = rng(3);
    let c = random_tensor(&mut r, &[7, 6, 2], 1.0);
    assert_eq!(degrade_spatial(&c, 0.0).unwrap(), c);
    let flat = cube(9, 8, 3, |_, _, b| b as f64 + 0.5);
    let blurred = degrade_spatial(&flat, 1.3).unwrap();
    assert!(blurred.max_abs_diff(&flat) < 1e-12);
    assert!(degrade_spatial(&flat, -1.0).is_err());
}

#[test]
fn gaussian_kernel_radius_and_normalisation() {
    for sigma in [0.4, 1.0, 1.5, 2.2] {
        let k = gaussian_kernel(sigma);
        assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn impulse_response_matches_sampled_gaussian() {
    let (n, sigma) = (21, 1.5);
    let centre = n / 2;
    let img = cube(n, n, 1, |y, x, _| if y == centre && x == centre { 1.0 } else { 0.0 });
    let out = degrade_spatial(&img, sigma).unwrap();
    let radius = (3.0 * sigma).ceil() as i64;
    let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-radius..=radius).map(g).sum();
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as i64 - centre as i64, x as i64 - centre as i64);
            let expect = if dy.abs() <= radius && dx.abs() <= radius {
                g(dy) * g(dx) / (norm * norm)
            } else {
                0.0
            };
            assert!((out.data()[y * n + x] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn reflect_mirrors_without_repeating_the_edge() {
    let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
    assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    assert_eq!(reflect(-5, 1), 0);
}

fn toy_scene() -> xmodal_core::synth::Scene {
    let mut scene = generate_scene(&small_spec(0)).unwrap();
    let (h, w, d) = (scene.height(), scene.width(), scene.bands_lo());
    scene.lo = cube(h, w, d, |y, x, b| (100 * y + 10 * x + b) as f64 / 10_000.0);
    scene
}

#[test]
fn unit_patch_is_the_pixel() {
    let scene = toy_scene();
    let b = extract_patches(&scene, &[0, 57, 300], 1).unwrap();
    let d = scene.bands_lo();
    for (n, &pix) in [0usize, 57, 300].iter().enumerate() {
        for c in 0..d {
            assert_eq!(b.patches.data()[n * d + c], scene.lo.data()[pix * d + c]);
        }
        let d2 = scene.bands_hi();
        assert_eq!(b.spectra.row(n), &scene.hi.data()[pix * d2..(pix + 1) * d2]);
        assert_eq!(b.labels[n], scene.labels[pix]);
    }
}

#[test]
fn interior_patch_is_the_raw_window() {
    let scene = toy_scene();
    let (w, d) = (scene.width(), scene.bands_lo());
    let (y0, x0) = (10, 9);
    let b = extract_patches(&scene, &[y0 * w + x0], 5).unwrap();
    for c in 0..d {
        for dy in 0..5 {
            for dx in 0..5 {
                let src = ((y0 + dy - 2) * w + (x0 + dx - 2)) * d + c;
                assert_eq!(b.patches.data()[(c * 5 + dy) * 5 + dx], scene.lo.data()[src]);
            }
        }
    }
}

#[test]
fn corner_patch_uses_reflect_padding() {
    let mut scene = generate_scene(&small_spec(0)).unwrap();
    scene.lo = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
    scene.hi = Tensor::zeros(&[3, 3, 2]);
    scene.labels = vec![0; 9];
    scene.split = vec![Split::Test; 9];
    let b = extract_patches(&scene, &[0], 3).unwrap();
    // grid 1 2 3 / 4 5 6 / 7 8 9, window around the top-left corner
    assert_eq!(b.patches.data(), &[5.0, 4.0, 5.0, 2.0, 1.0, 2.0, 5.0, 4.0, 5.0]);
    let b = extract_patches(&scene, &[8], 3).unwrap();
    assert_eq!(b.patches.data(), &[5.0, 6.0, 5.0, 8.0, 9.0, 8.0, 5.0, 6.0, 5.0]);
}

#[test]
fn even_patch_side_is_rejected() {
    let scene = toy_scene();
    assert!(matches!(extract_patches(&scene, &[0], 4), Err(Error::Parameter(_))));
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let a = generate_scene(&small_spec(5)).unwrap();
    let b = generate_scene(&small_spec(5)).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(&small_spec(6)).unwrap();
    assert_ne!(a.labels, c.labels);
}

#[test]
fn zero_psf_leaves_modality_two_unblurred() {
    let spec = SyntheticSceneSpec {
        psf_sigma: 0.0,
        ..small_spec(1)
    };
    let sharp = generate_scene(&spec).unwrap();
    let blurred = generate_scene(&SyntheticSceneSpec {
        psf_sigma: 1.5,
        ..small_spec(1)
    })
    .unwrap();
    let reblurred = degrade_spatial(&sharp.hi, 1.5).unwrap();
    assert!(reblurred.max_abs_diff(&blurred.hi) < 1e-12);
}

#[test]
fn scene_values_and_splits_are_well_formed() {
    let spec = SyntheticSceneSpec::default();
    let scene = generate_scene(&spec).unwrap();
    assert_eq!(scene.hi.shape(), &[96, 96, 64]);
    assert_eq!(scene.lo.shape(), &[96, 96, 8]);
    assert!(scene.hi.data().iter().chain(scene.lo.data()).all(|v| (0.0..=1.0).contains(v)));
    assert!(scene.labels.iter().all(|&c| c < spec.classes));
    for split in [Split::Train, Split::Test] {
        assert!(scene.class_histogram(split).iter().all(|&n| n > 0), "{split:?}");
    }
    let total: usize = [Split::Train, Split::Unlabeled, Split::Test]
        .iter()
        .map(|&s| scene.pixels(s).len())
        .sum();
    assert_eq!(total, 96 * 96);
    let train = scene.pixels(Split::Train).len() as f64;
    assert!((train / (96.0 * 96.0) - spec.label_fraction).abs() < 0.01);
}

#[test]
fn sar_scene_is_generated_through_the_same_pipeline() {
    let spec = SyntheticSceneSpec {
        kind: SceneKind::Sar,
        ..small_spec(2)
    };
    let scene = generate_scene(&spec).unwrap();
    let optical = generate_scene(&small_spec(2)).unwrap();
    assert_eq!(scene.labels, optical.labels);
    assert_eq!(scene.hi, optical.hi);
    assert_ne!(scene.lo, optical.lo);
    assert!(scene.lo.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn invalid_specs_name_their_key() {
    let cases = [
        (
            SyntheticSceneSpec {
                label_fraction: 1.5,
                ..Default::default()
            },
            "scene.label_fraction",
        ),
        (
            SyntheticSceneSpec {
                bands_lo: 64,
                ..Default::default()
            },
            "scene.bands_lo",
        ),
        (
            SyntheticSceneSpec {
                classes: 1,
                ..Default::default()
            },
            "scene.classes",
        ),
    ];
    for (spec, key) in cases {
        match generate_scene(&spec) {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{key}: {other:?}"),
        }
    }
}

#[test]
fn prototype_angle_floor_can_fail() {
    let spec = SyntheticSceneSpec {
        classes: 40,
        bands_hi: 6,
        bands_lo: 2,
        height: 40,
        width: 40,
        ..Default::default()
    };
    assert!(matches!(generate_scene(&spec), Err(Error::Parameter(_))));
}

#[test]
fn empirical_snr_is_within_half_a_decibel() {
    let mut r = rng(4);
    let c = cube(64, 64, 8, |_, _, _| r.gen_range(0.2..0.8));
    let signal = c.data().iter().map(|v| v * v).sum::<f64>();
    for (k, snr) in SNR_GRID.iter().enumerate() {
        let noisy = add_noise_unclamped(&c, *snr, &mut RngState::new(k as u64)).unwrap();
        let noise: f64 = noisy.data().iter().zip(c.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let measured = 10.0 * (signal / noise).log10();
        assert!((measured - snr).abs() < 0.5, "target {snr}, measured {measured}");
    }
}

#[test]
fn infinite_snr_is_identity_and_noise_is_clamped() {
    let mut r = rng(5);
    let c = random_tensor(&mut r, &[6, 6, 3], 1.0);
    let mut state = RngState::new(0);
    assert_eq!(inject_noise(&c, f64::INFINITY, &mut state).unwrap(), c);
    let noisy = inject_noise(&c, 0.0, &mut state).unwrap();
    assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(inject_noise(&c, f64::NAN, &mut state).is_err());
}

#[test]
fn snr_grid_spans_ten_to_forty() {
    assert_eq!(SNR_GRID, [10.0, 20.0, 30.0, 40.0]);
}

#[test]
fn container_bytes_are_little_endian() {
    let bytes = encode_tensor(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(&bytes[..4], TENSOR_MAGIC);
    let payload = &bytes[bytes.len() - 12..bytes.len() - 4];
    assert_eq!(payload, &1.0f64.to_le_bytes());
}

#[test]
fn container_rejects_zero_length_dims() {
    let t = Tensor::new(vec![0, 3], vec![]).unwrap();
    assert!(matches!(encode_tensor(&t), Err(Error::Parameter(_))));
}

#[test]
fn container_errors_carry_offsets() {
    let bytes = encode_tensor(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'Q';
    assert!(matches!(decode_tensor(&bad_magic), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(decode_tensor(&bytes[..bytes.len() - 9]), Err(Error::Format { .. })));
    for i in 5..bytes.len() {
        let mut flipped = bytes.clone();
        flipped[i] ^= 0x10;
        assert!(matches!(decode_tensor(&flipped), Err(Error::Format { .. })), "byte {i}");
    }
    assert!(decode_archive(CHECKPOINT_MAGIC, &bytes).is_err());
}

#[test]
fn scene_directory_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate_scene(&small_spec(3)).unwrap();
    let m1 = save_scene(tmp.path().join("a"), &scene).unwrap();
    let m2 = save_scene(tmp.path().join("b"), &scene).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(load_scene(tmp.path().join("a")).unwrap(), scene);
    let lo = tmp.path().join("a").join("lo.xmdt");
    let mut bytes = std::fs::read(&lo).unwrap();
    let last = bytes.len() - 20;
    bytes[last] ^= 1;
    std::fs::write(&lo, bytes).unwrap();
    assert!(matches!(load_scene(tmp.path().join("a")), Err(Error::Format { .. })));
}

#[test]
fn file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let t = random_tensor(&mut rng(6), &[2, 3, 4, 5], 3.0);
    write_container(tmp.path().join("t.xmdt"), &t).unwrap();
    assert_eq!(read_container(tmp.path().join("t.xmdt")).unwrap(), t);
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 0..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_container_round_trip_is_bit_exact(shape in shape_strategy(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(r.gen::<u64>() & !(0x7ff << 52) | (0x3ff << 52))).collect();
        let t = Tensor::new(shape, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn archive_round_trip(count in 0usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let entries: Vec<(String, Tensor)> = (0..count)
            .map(|i| (format!("entry/{i}"), random_tensor(&mut r, &[i + 1, 2], 1.0)))
            .collect();
        let bytes = encode_archive(CHECKPOINT_MAGIC, &entries).unwrap();
        prop_assert_eq!(decode_archive(CHECKPOINT_MAGIC, &bytes).unwrap(), entries);
    }

    #[test]
    fn spectral_output_stays_within_input_range(seed in any::<u64>(), d1 in 1usize..6) {
        let mut r = rng(seed);
        let hi = cube(3, 3, 12, |_, _, _| r.gen_range(0.0..1.0));
        let lo = degrade_spectral(&hi, &band_response(d1, 12)).unwrap();
        for p in 0..9 {
            let px = &hi.data()[p * 12..(p + 1) * 12];
            let (lo_v, hi_v) = px.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for i in 0..d1 {
                let v = lo.data()[p * d1 + i];
                prop_assert!(v >= lo_v - 1e-12 && v <= hi_v + 1e-12);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_every_pixel(seed in 0u64..1000) {
        let scene = generate_scene(&small_spec(seed)).unwrap();
        let mut seen = vec![0usize; scene.labels.len()];
        for s in [Split::Train, Split::Unlabeled, Split::Test] {
            for p in scene.pixels(s) {
                seen[p] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        prop_assert!(scene.class_histogram(Split::Train).iter().all(|&n| n > 0));
        prop_assert!(scene.class_histogram(Split::Test).iter().all(|&n| n > 0));
    }
}
