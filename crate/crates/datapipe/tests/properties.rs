use hyperfm::group::BandProfile;
use hyperfm_datapipe::container::{self, Array, ArrayData};
use hyperfm_datapipe::granule::{GranuleKind, GranuleMeta};
use hyperfm_datapipe::matching::match_granules;
use hyperfm_datapipe::synth::{synth_scene, SceneSpec};
use hyperfm_datapipe::tiles::{extract_patches, window_origins, ExtractOptions};
use proptest::prelude::*;

const MAGIC: &[u8; 8] = b"PROPTEST";
const BANDS: BandProfile = BandProfile { blue: 2, red: 2, swir: 1 };

fn meta(id: String, kind: GranuleKind, timestamp: i64) -> GranuleMeta {
    GranuleMeta {
        id,
        kind,
        timestamp,
        date: "2024-05-10".into(),
        height: 8,
        width: 8,
        bands: None,
    }
}

fn scene(seed: u64, h: usize, w: usize, flags: f64) -> SceneSpec {
    SceneSpec {
        id: format!("P{seed}"),
        timestamp: 0,
        date: "2024-05-10".into(),
        height: h,
        width: w,
        bands: BANDS,
        seed,
        cloud_fraction: 0.4,
        flag_fraction: flags,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masking_is_idempotent(seed in any::<u64>(), flags in 0.0f64..0.3) {
        let (a, b) = synth_scene(&scene(seed, 12, 10, flags)).unwrap();
        for g in [a, b] {
            let once = g.clone().mask_invalid();
            let twice = once.clone().mask_invalid();
            prop_assert_eq!(
                once.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                twice.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn every_window_is_kept_or_discarded(
        seed in any::<u64>(),
        h in 8usize..40,
        w in 8usize..40,
        window in 4usize..12,
        stride in 2usize..12,
        flags in 0.0f64..0.05,
    ) {
        let (a, b) = synth_scene(&scene(seed, h, w, flags)).unwrap();
        let opts = ExtractOptions { window, stride, ..ExtractOptions::default() };
        let e = extract_patches(&a.mask_invalid(), &b.mask_invalid(), &opts).unwrap();
        let grid = window_origins(h, window, stride).len() * window_origins(w, window, stride).len();
        prop_assert_eq!(e.kept + e.discarded, grid);
        prop_assert_eq!(e.tiles.len(), e.kept);
        for t in &e.tiles {
            prop_assert!(t.input_nan_fraction() < opts.t_nan);
        }
    }

    #[test]
    fn matching_uses_each_l2_once_within_tolerance(
        t1 in prop::collection::vec(0i64..200, 0..12),
        t2 in prop::collection::vec(0i64..200, 0..12),
        delta in 0i64..20,
    ) {
        let l1b: Vec<_> = t1.iter().enumerate().map(|(i, &t)| meta(format!("a{i}"), GranuleKind::L1b, t)).collect();
        let l2: Vec<_> = t2.iter().enumerate().map(|(i, &t)| meta(format!("b{i}"), GranuleKind::L2, t)).collect();
        let r = match_granules(&l1b, &l2, delta);
        let mut used: Vec<usize> = r.pairs.iter().map(|p| p.1).collect();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), r.pairs.len());
        for &(i, j) in &r.pairs {
            prop_assert!((t1[i] - t2[j]).abs() <= delta);
        }
        prop_assert_eq!(r.pairs.len() + r.unmatched_l1b.len(), l1b.len());
        prop_assert_eq!(r.pairs.len() + r.unmatched_l2.len(), l2.len());
        // a leftover L1B granule has no leftover L2 granule in reach
        for &i in &r.unmatched_l1b {
            for &j in &r.unmatched_l2 {
                prop_assert!((t1[i] - t2[j]).abs() > delta);
            }
        }
    }

    #[test]
    fn container_round_trip(
        floats in prop::collection::vec(any::<f32>(), 0..64),
        bytes in prop::collection::vec(any::<u8>(), 0..64),
        note in "[a-z]{0,12}",
    ) {
        let arrays = vec![
            Array { name: "f".into(), shape: vec![floats.len()], data: ArrayData::F32(floats.clone()) },
            Array { name: "q".into(), shape: vec![bytes.len()], data: ArrayData::U8(bytes.clone()) },
        ];
        let enc = container::encode(MAGIC, &note, &arrays).unwrap();
        let (back, mut got): (String, _) = container::decode(MAGIC, &enc).unwrap();
        prop_assert_eq!(back, note);
        let f = container::take_f32(&mut got, "f", &[floats.len()]).unwrap();
        prop_assert_eq!(
            f.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            floats.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(container::take_u8(&mut got, "q", &[bytes.len()]).unwrap(), bytes);
        prop_assert_eq!(container::encode(MAGIC, &back_note(&enc), &arrays).unwrap(), enc);
    }
}

fn back_note(enc: &[u8]) -> String {
    container::decode::<String>(MAGIC, enc).unwrap().0
}
