use hyperfm::downstream::{patchwise_infer, tile_origins, Task, TaskTransforms};
use hyperfm::group::{build_group_spec, top_m_indices, BandProfile};
use hyperfm::mae::sample_mask;
use hyperfm::tt::{tt_linear_forward, tt_materialize, TtCores, TtShape};
use hyperfm::{Tape64, Tensor64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn factors() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=3).prop_flat_map(|d| prop::collection::vec(1usize..=4, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tt_forward_equals_materialized_product(
        nin in factors(),
        seed in any::<u64>(),
        rank in 1usize..=3,
        rows in 1usize..=4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nout: Vec<usize> = nin.iter().map(|&n| n % 3 + 1).collect();
        let shape = TtShape::new(nin, nout, rank).unwrap();
        let cores = TtCores::<f64>::random(shape.clone(), &mut rng);
        let w = tt_materialize(&cores);
        let x = Tensor64::randn([rows, shape.d_in()], 1.0, &mut rng);
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let cv: Vec<_> = cores.cores.iter().map(|c| tape.constant(c.clone())).collect();
        let y = tt_linear_forward(&mut tape, xv, &cv, &shape).unwrap();
        let d_out = shape.d_out();
        let got = tape.value(y).data();
        for r in 0..rows {
            for j in 0..d_out {
                let want: f64 = (0..shape.d_in()).map(|i| x.data()[r * shape.d_in() + i] * w.data()[i * d_out + j]).sum();
                prop_assert!((got[r * d_out + j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
        prop_assert_eq!(cores.param_count(), shape.param_count());
    }

    #[test]
    fn masks_partition_the_sequence(l in 1usize..400, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        let m = sample_mask(l, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.masked.len(), (ratio * l as f64).floor() as usize);
        let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..l).collect::<Vec<_>>());
        let again = sample_mask(l, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again.masked, m.masked);
    }

    #[test]
    fn mse_ignores_invalid_positions(
        vals in prop::collection::vec(-5.0f64..5.0, 8),
        junk in prop::collection::vec(-1e6f64..1e6, 8),
        valid in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(valid.iter().any(|&v| v));
        let mask = Tensor64::new(vec![8], valid.iter().map(|&v| f64::from(u8::from(v))).collect()).unwrap();
        let target = Tensor64::new(vec![8], vec![0.5; 8]).unwrap();
        let perturbed: Vec<f64> = vals.iter().zip(&junk).zip(&valid).map(|((&v, &j), &ok)| if ok { v } else { j }).collect();
        let noisy_target: Vec<f64> = valid.iter().map(|&ok| if ok { 0.5 } else { f64::NAN }).collect();
        let mut tape = Tape64::new();
        let a = tape.constant(Tensor64::new(vec![8], vals).unwrap());
        let b = tape.constant(Tensor64::new(vec![8], perturbed).unwrap());
        let la = tape.mse(a, &target, &mask).unwrap();
        let lb = tape.mse(b, &Tensor64::new(vec![8], noisy_target).unwrap(), &mask).unwrap();
        prop_assert_eq!(tape.value(la).item(), tape.value(lb).item());
    }

    #[test]
    fn softmax_rows_are_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let n = row.len();
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::new(vec![1, n], row.clone()).unwrap());
        let shifted = tape.add_const(x, c);
        let p = tape.softmax_lastdim(x);
        let q = tape.softmax_lastdim(shifted);
        let total: f64 = tape.value(p).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in tape.value(p).data().iter().zip(tape.value(q).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_standardizes_rows(row in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        let n = row.len();
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assume!(var > 1e-2);
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor64::new(vec![1, n], row).unwrap());
        let g = tape.constant(Tensor64::ones(vec![n]));
        let b = tape.constant(Tensor64::zeros(vec![n]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).data();
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() < 1e-6);
        prop_assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn top_m_keeps_the_largest(logits in prop::collection::vec(-3.0f64..3.0, 1..10), m in 1usize..10) {
        let kept = top_m_indices(&logits, m);
        prop_assert_eq!(kept.len(), m.min(logits.len()));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let floor = kept.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for (i, &v) in logits.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(v <= floor);
            }
        }
    }

    #[test]
    fn group_spec_partitions_bands(blue in 2usize..40, red in 2usize..40, swir in 1usize..6, k in 1usize..6) {
        let profile = BandProfile { blue, red, swir };
        prop_assume!(k <= swir);
        let spec = build_group_spec(&profile.tags(), k, [1, 1, 1]);
        prop_assume!(blue >= k && red >= k);
        let spec = spec.unwrap();
        let mut seen = vec![0u8; profile.total()];
        for g in 0..k {
            for b in spec.members(g) {
                seen[b] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = spec.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 3);
    }

    #[test]
    fn transforms_round_trip(v in 0.0f64..500.0, mean in -3.0f64..3.0, std in 0.1f64..4.0) {
        let t = TaskTransforms { mean: [mean; 4], std: [std; 4] };
        for task in Task::ALL {
            let back = t.inverse(task, t.forward(task, v));
            prop_assert!((back - v).abs() <= 1e-9 * (1.0 + v));
        }
    }

    #[test]
    fn origins_cover_the_extent(extent in 8usize..300, tile in 4usize..64) {
        prop_assume!(extent >= tile);
        let o = tile_origins(extent, tile);
        prop_assert_eq!(o[0], 0);
        prop_assert_eq!(*o.last().unwrap() + tile, extent);
        prop_assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= tile));
    }

    #[test]
    fn stitching_reproduces_a_consistent_field(h in 8usize..30, w in 8usize..30, seed in any::<u64>()) {
        let tile = 8;
        let field = Tensor64::randn([4, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let scene = Tensor64::zeros(vec![2, h, w]);
        let out = patchwise_infer(&scene, tile, None, |_, (y0, x0)| {
            let mut t = Tensor64::zeros(vec![4, tile, tile]);
            for c in 0..4 {
                for y in 0..tile {
                    for x in 0..tile {
                        t.data_mut()[(c * tile + y) * tile + x] = field.data()[(c * h + y0 + y) * w + x0 + x];
                    }
                }
            }
            Ok(t)
        }).unwrap();
        for (a, b) in out.data().iter().zip(field.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
