use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;
use proptest::prelude::*;
use t2sim::labels::{normalize_lines, LineLabelMask, NormAxes};
use t2sim::metrics::{classification_report, confusion, psnr, ssim, ClassReport};
use t2sim::motion::{sphere_displacement, RigidTransform};
use t2sim::recon::{finite_diff, finite_diff_adjoint};
use t2sim::sim::{apply_phase, B0Map};
use t2sim::volume::{fft2_per_slice, ifft2_per_slice, read_volume, write_volume};
use t2sim::{MultiEchoVolume, Space};

fn complex_vec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), n)
        .prop_map(|v| v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect())
}

fn volume(dims: [usize; 4], space: Space) -> impl Strategy<Value = MultiEchoVolume> {
    let n = dims.iter().product();
    complex_vec(n).prop_map(move |v| {
        let te = (0..dims[0]).map(|e| 5.0 + 5.0 * e as f64).collect();
        MultiEchoVolume::new(
            Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), v).unwrap(),
            [2.0, 2.0, 3.0],
            te,
            space,
        )
        .unwrap()
    })
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (
        prop::array::uniform3(-3.0f64..3.0),
        prop::array::uniform3(-5.0f64..5.0),
    )
        .prop_map(|(t, r)| RigidTransform::new(t, r))
}

fn rel_diff(a: &MultiEchoVolume, b: &MultiEchoVolume) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum();
    (num / b.energy().max(f64::MIN_POSITIVE)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volume_file_round_trip_is_bit_exact(
        bits in prop::collection::vec(any::<u32>(), 2 * 2 * 3 * 5 * 2)
    ) {
        let vals: Vec<f32> = bits.into_iter().map(f32::from_bits).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        let samples: Vec<Complex64> = vals.chunks(2).map(|c| Complex64::new(c[0] as f64, c[1] as f64)).collect();
        let vol = MultiEchoVolume::new(
            Array4::from_shape_vec((2, 2, 3, 5), samples).unwrap(),
            [1.5, 1.5, 2.5],
            vec![4.0, 9.0],
            Space::Kspace,
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        for (a, b) in back.data().iter().zip(vol.data().iter()) {
            prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
            prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn fft_is_invertible_and_unitary(vol in volume([2, 2, 7, 6], Space::Image)) {
        let k = fft2_per_slice(&vol).unwrap();
        prop_assert!((k.energy() - vol.energy()).abs() <= 1e-6 * vol.energy());
        let back = ifft2_per_slice(&k).unwrap();
        prop_assert!(rel_diff(&back, &vol) < 1e-6);
    }

    #[test]
    fn normalized_lines_have_unit_energy(vol in volume([3, 2, 5, 4], Space::Kspace), scale in 1e-3f64..1e3) {
        let n = normalize_lines(&vol, NormAxes::EchoReadout).unwrap();
        for s in 0..2 {
            for p in 0..5 {
                let e: f64 = (0..3).flat_map(|e| (0..4).map(move |r| (e, r)))
                    .map(|(e, r)| n.kspace.data()[(e, s, p, r)].norm_sqr()).sum();
                prop_assert!((e - 1.0).abs() < 1e-6);
            }
        }
        let again = normalize_lines(&n.kspace, NormAxes::EchoReadout).unwrap();
        prop_assert!(rel_diff(&again.kspace, &n.kspace) < 1e-12);
        let scaled = vol.with_data(vol.data().mapv(|c| c * scale), Space::Kspace).unwrap();
        let ns = normalize_lines(&scaled, NormAxes::EchoReadout).unwrap();
        prop_assert!(rel_diff(&ns.kspace, &n.kspace) < 1e-9);
    }

    #[test]
    fn phase_preserves_magnitude(vol in volume([3, 2, 4, 4], Space::Image), hz in -20.0f64..20.0) {
        let b0 = B0Map::uniform(2, 4, 4, hz);
        let out = apply_phase(&vol, &b0).unwrap();
        for (a, b) in out.data().iter().zip(vol.data().iter()) {
            prop_assert!((a.norm() - b.norm()).abs() <= 1e-7 * b.norm().max(1e-300));
        }
    }

    #[test]
    fn compose_with_inverse_is_identity(t in transform(), u in transform()) {
        let id = t.compose(&t.inverse());
        prop_assert!(id.matrix_distance(&RigidTransform::IDENTITY) < 1e-9);
        let back = t.compose(&u).compose(&u.inverse());
        prop_assert!(back.matrix_distance(&t) < 1e-9);
    }

    #[test]
    fn sphere_displacement_is_inverse_symmetric(t in transform()) {
        let a = sphere_displacement(&t, 64.0);
        let b = sphere_displacement(&t.inverse(), 64.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn finite_difference_adjoint_identity(x in complex_vec(6 * 5), z in complex_vec(2 * 6 * 5)) {
        let x = Array2::from_shape_vec((6, 5), x).unwrap();
        let z = Array3::from_shape_vec((2, 6, 5), z).unwrap();
        let lhs: Complex64 = finite_diff(x.view()).iter().zip(z.iter()).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = x.iter().zip(finite_diff_adjoint(z.view()).iter()).map(|(a, b)| a * b.conj()).sum();
        prop_assert!((lhs - rhs).norm() < 1e-8);
    }

    #[test]
    fn label_csv_round_trip(rows in prop::collection::vec(prop::collection::vec(0u8..2, 9), 1..5), d in 0.1f64..2.0) {
        let ns = rows.len();
        let mask = LineLabelMask::new(Array2::from_shape_vec((ns, 9), rows.concat()).unwrap()).unwrap();
        let back = LineLabelMask::from_csv(&mask.to_csv(Some(d))).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn confusion_counts_are_consistent(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let c = confusion(&pred, &target).unwrap();
        let r = ClassReport::from_counts(c).unwrap();
        prop_assert_eq!(c.total(), pairs.len());
        let correct = pred.iter().zip(&target).filter(|(a, b)| a == b).count();
        prop_assert!((r.accuracy - correct as f64 / pairs.len() as f64).abs() < 1e-12);
        let total = c.total() as f64;
        prop_assert!((r.accuracy * total - (total - c.missed_motion as f64 - c.false_motion as f64)).abs() < 1e-9);
        for rate in [Some(r.accuracy), r.nd_rate, r.wd_rate].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        let rep = classification_report(
            &LineLabelMask::from_line(&pred).unwrap(),
            &LineLabelMask::from_line(&target).unwrap(),
        ).unwrap();
        prop_assert_eq!(rep, r);
    }

    #[test]
    fn image_metrics_on_self(v in prop::collection::vec(0.0f64..1.0, 16 * 16)) {
        let img = Array2::from_shape_vec((16, 16), v).unwrap();
        prop_assume!(img.iter().any(|&x| x > 0.0));
        prop_assert!((ssim(img.view(), img.view()).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(psnr(img.view(), img.view()).unwrap(), f64::INFINITY);
    }
}
