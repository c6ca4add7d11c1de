use maglev_core::codec::{
    decode_output, encode_input_vec, encode_target_vec, phase_distance, rad_to_phase, CoilCommand, CoilCommandFrame, HesFrame, Pose6D, HES_CHANNELS,
    INPUT_DIM, NUM_COILS, OUTPUT_DIM,
};
use maglev_core::datagen::{
    augment_perturbations, check_geometric_constraint, sample_liftoff_trajectory, Dataset, DatasetRecord, PerturbationConfig, TrajectoryConfig,
};
use maglev_core::kernels::{matvec, Backend, DenseMatrix};
use maglev_core::model_format::{decode_model, encode_model, ModelBundle, NormSpec};
use maglev_core::runtime::{controller_step, gru_cell_step_into, reset_state, GruScratch};
use maglev_core::sim::layout::{coil_wrench, total_wrench};
use maglev_core::sim::{PlantConfig, TileLayout};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_norm(rng: &mut ChaCha8Rng) -> NormSpec {
    NormSpec {
        hes_sigma: rng.random_range(0.1..50.0),
        pose_mean: std::array::from_fn(|_| rng.random_range(-5.0..5.0)),
        pose_std: std::array::from_fn(|_| rng.random_range(0.1..30.0)),
        dq_sigma: rng.random_range(100.0..9000.0),
    }
}

fn random_frame(rng: &mut ChaCha8Rng) -> CoilCommandFrame {
    let mut f = CoilCommandFrame::off();
    for c in f.coils.iter_mut() {
        *c = CoilCommand { d: rng.random_range(-8000..=8000), q: rng.random_range(-8000..=8000), phi: rng.random_range(0..65535) };
    }
    f
}

fn random_record(rng: &mut ChaCha8Rng) -> DatasetRecord {
    let mut hes = HesFrame::default();
    for v in hes.readings.iter_mut() {
        *v = rng.random_range(-500.0..500.0);
    }
    DatasetRecord { hes, reference: std::array::from_fn(|_| rng.random_range(-50.0..50.0)), action: random_frame(rng) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backends_agree_on_random_shapes(rows in 1usize..1024, cols in 1usize..1024, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols);
        let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; rows];
        let mut b = vec![0.0; rows];
        matvec(&w, &x, &mut a, Backend::Scalar).unwrap();
        matvec(&w, &x, &mut b, Backend::Vectorized).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-4, "{p} vs {q}");
        }
    }

    #[test]
    fn zero_input_maps_to_zero(rows in 1usize..300, cols in 1usize..300, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols);
        let x = vec![0.0; cols];
        for backend in [Backend::Scalar, Backend::Vectorized] {
            let mut y = vec![1.0; rows];
            matvec(&w, &x, &mut y, backend).unwrap();
            prop_assert!(y.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn model_roundtrip_is_bit_exact(seed in any::<u64>(), input in 1usize..40, hidden in 1usize..40, layers in 1usize..4, output in 1usize..20, gru in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = random_norm(&mut rng);
        let m = if gru {
            ModelBundle::random_gru(&mut rng, input, hidden, layers, output, norm)
        } else {
            ModelBundle::random_mlp(&mut rng, input, hidden, layers, output, norm)
        };
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn any_single_bit_flip_is_rejected(seed in any::<u64>(), bit in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelBundle::random_gru(&mut rng, 12, 8, 2, 5, NormSpec::default());
        let mut bytes = encode_model(&m).unwrap();
        let bit = bit % (bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected(seed in any::<u64>(), cut in 1usize..64, extra in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelBundle::random_mlp(&mut rng, 6, 16, 2, 6, NormSpec::default());
        let bytes = encode_model(&m).unwrap();
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        prop_assert!(decode_model(short).is_err());
        let mut long = bytes.clone();
        long.extend(std::iter::repeat_n(0u8, extra));
        prop_assert!(decode_model(&long).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact(seed in any::<u64>(), n in 0usize..4, k in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = Dataset { k, trajectories: (0..n).map(|_| (0..k).map(|_| random_record(&mut rng)).collect()).collect() };
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::read(&bytes[..]).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn quantization_roundtrip_within_one_increment(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = NormSpec::default();
        let a = random_frame(&mut rng);
        let y = encode_target_vec(&a, &norm);
        let b = decode_output(&y, &norm).unwrap();
        for (p, q) in a.coils.iter().zip(&b.coils) {
            prop_assert!((p.d - q.d).abs() <= 1 && (p.q - q.q).abs() <= 1);
            prop_assert!(phase_distance(p.phi, q.phi) <= 1, "{} vs {}", p.phi, q.phi);
        }
    }

    #[test]
    fn decoded_currents_respect_limit(y in proptest::collection::vec(-100.0f32..100.0, OUTPUT_DIM)) {
        let f = decode_output(&y, &NormSpec::default()).unwrap();
        prop_assert!(f.within_limits());
    }

    #[test]
    fn input_encoding_is_affine_and_invertible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = random_norm(&mut rng);
        let mut h = HesFrame::default();
        for v in h.readings.iter_mut() {
            *v = rng.random_range(-300.0..300.0);
        }
        let p = Pose6D::from_array(std::array::from_fn(|_| rng.random_range(-40.0..40.0)));
        let x = encode_input_vec(&h, &p, &norm);
        for i in 0..HES_CHANNELS {
            let back = x[i] * norm.hes_sigma;
            prop_assert!((back - h.readings[i]).abs() <= 1e-4 * (1.0 + h.readings[i].abs()));
        }
        for a in 0..6 {
            let back = x[HES_CHANNELS + a] as f64 * norm.pose_std[a] as f64 + norm.pose_mean[a] as f64;
            prop_assert!((back - p[a]).abs() <= 1e-4 * (1.0 + p[a].abs()));
        }
        // affine: midpoint of inputs encodes to midpoint of encodings
        let zero = encode_input_vec(&HesFrame::default(), &Pose6D::ZERO, &norm);
        let mut half = HesFrame::default();
        for (o, v) in half.readings.iter_mut().zip(&h.readings) {
            *o = v * 0.5;
        }
        let xm = encode_input_vec(&half, &p.scale(0.5), &norm);
        for i in 0..INPUT_DIM {
            prop_assert!((xm[i] - 0.5 * (x[i] + zero[i])).abs() <= 1e-4 * (1.0 + x[i].abs()));
        }
    }

    #[test]
    fn gates_stay_in_range(seed in any::<u64>(), hidden in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelBundle::random_gru(&mut rng, 10, hidden, 1, 3, NormSpec::default());
        if let maglev_core::model_format::Network::GruStack { layers, .. } = &m.network {
            let layer = &layers[0];
            let mut h = vec![0.0; hidden];
            let mut scratch = GruScratch::new(hidden);
            for _ in 0..20 {
                let x: Vec<f32> = (0..10).map(|_| rng.random_range(-20.0..20.0)).collect();
                gru_cell_step_into(layer, &x, &mut h, &mut scratch, Backend::Vectorized).unwrap();
                prop_assert!(scratch.reset_gate().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(scratch.update_gate().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(scratch.candidate().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        } else {
            prop_assert!(false, "expected a GRU stack");
        }
    }

    #[test]
    fn controller_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelBundle::random_gru(&mut rng, 20, 24, 2, 7, NormSpec::default());
        let inputs: Vec<Vec<f32>> = (0..30).map(|_| (0..20).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        for backend in [Backend::Scalar, Backend::Vectorized] {
            let run = || {
                let mut s = reset_state(&m).unwrap();
                let mut y = vec![0.0; 7];
                let mut out = Vec::new();
                for x in &inputs {
                    controller_step(&m, x, &mut s, &mut y, backend).unwrap();
                    out.extend(y.iter().map(|v| v.to_bits()));
                }
                out
            };
            prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn wrench_is_linear_in_commands(seed in any::<u64>(), x in -40.0f64..40.0, y in -40.0f64..40.0, z in 0.5f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TileLayout::default();
        let cfg = PlantConfig::default();
        let pose = Pose6D::new(x, y, z, 0.1, -0.1, 1.0);
        let frame = random_frame(&mut rng);
        let total = total_wrench(&layout, &pose, &frame.coils, &cfg);
        let mut sum = [0.0; 6];
        for (coil, c) in layout.coils.iter().zip(&frame.coils) {
            let w = coil_wrench(coil, &pose, c, &cfg);
            // doubling the currents doubles the wrench
            let double = CoilCommand { d: c.d / 2 * 2, q: c.q / 2 * 2, phi: c.phi };
            let half = CoilCommand { d: c.d / 2, q: c.q / 2, phi: c.phi };
            let wd = coil_wrench(coil, &pose, &double, &cfg);
            let wh = coil_wrench(coil, &pose, &half, &cfg);
            for k in 0..6 {
                sum[k] += w[k];
                prop_assert!((wd[k] - 2.0 * wh[k]).abs() <= 1e-9 * (1.0 + wd[k].abs()));
            }
        }
        for k in 0..6 {
            prop_assert!((sum[k] - total[k]).abs() <= 1e-9 * (1.0 + total[k].abs()));
        }
    }

    #[test]
    fn perturbed_references_respect_constraint(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcfg = TrajectoryConfig::default();
        let pcfg = PerturbationConfig::default();
        let lift = sample_liftoff_trajectory(&tcfg, &mut rng);
        let p = augment_perturbations(&lift.poses, tcfg.dt(), &pcfg, &mut rng);
        prop_assert_eq!(p.poses.len(), lift.poses.len());
        for (q, n) in p.poses.iter().zip(&lift.poses) {
            prop_assert!(check_geometric_constraint(q), "{q}");
            prop_assert!((*q - *n).to_array().iter().all(|d| d.abs() <= pcfg.clip + 1e-9));
        }
        let mut end = 0;
        for e in &p.episodes {
            prop_assert!(e.start >= end);
            end = e.end();
            prop_assert!(end <= lift.poses.len());
        }
    }
}

#[test]
fn phase_wraparound_is_continuous() {
    let a = (0.0f64.cos(), 0.0f64.sin());
    let t = maglev_core::codec::phase_to_rad(65534);
    let b = (t.cos(), t.sin());
    assert!(((a.0 - b.0).hypot(a.1 - b.1)) <= std::f64::consts::TAU / 65535.0 + 1e-9);
    assert_eq!(rad_to_phase(std::f64::consts::TAU), 0);
    assert_eq!(NUM_COILS * 4, OUTPUT_DIM);
}
