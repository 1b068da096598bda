//! Synthetic task generation and on-disk splits.

use autodiff::Tensor;
use jointcycle::data::{
    decode_pgm, encode_pgm, gen_edge, gen_solid, make_paired_eval, make_unpaired_split, shape_mask, spec_seed,
    stream_of, Dataset, Manifest, ShapeKind, ShapeSpec, Stream, Task, EVAL, TRAIN_SOURCE, TRAIN_TARGET,
};
use proptest::prelude::*;
use std::collections::HashSet;

const SIZE: usize = 32;

#[test]
fn edge_maps_are_sparse_and_binary() {
    for i in 0..300 {
        let spec = Task::SolidsEdges.sample_spec(spec_seed(Stream::TrainTarget, 0, i));
        let e = gen_edge(&spec, SIZE).unwrap();
        assert!(e.data().iter().all(|&v| v == 1.0 || v == -1.0));
        let on = e.data().iter().filter(|&&v| v > 0.0).count();
        assert!(on > 0);
        assert!((on as f64) < 0.3 * (SIZE * SIZE) as f64, "spec {i}: {on} edge pixels");
    }
}

#[test]
fn rectangle_mask_matches_analytic_box() {
    for (cx, cy, hx, hy) in [(0.5, 0.5, 0.25, 0.2), (0.4, 0.6, 0.17, 0.3), (0.55, 0.45, 0.35, 0.12)] {
        let spec = ShapeSpec {
            kind: ShapeKind::Rectangle,
            center: (cx, cy),
            half: (hx, hy),
            rotation: 0.0,
            intensity: 0.8,
            background: -0.8,
            texture: 0.0,
            texture_freq: 0.0,
        };
        let mask = shape_mask(&spec, SIZE);
        let truth: Vec<bool> = (0..SIZE * SIZE)
            .map(|i| {
                let x = ((i % SIZE) as f64 + 0.5) / SIZE as f64;
                let y = ((i / SIZE) as f64 + 0.5) / SIZE as f64;
                (x - cx).abs() <= hx && (y - cy).abs() <= hy
            })
            .collect();
        let inter = mask.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let union = mask.iter().zip(&truth).filter(|(a, b)| **a || **b).count();
        assert!(inter as f64 / union as f64 >= 0.8);
        // Anti-aliased solid agrees with the mask away from the border.
        let solid = gen_solid(&spec, SIZE).unwrap();
        let mean_in = mean_where(&solid, &mask, true);
        assert!(mean_in > 0.5 && mean_where(&solid, &mask, false) < -0.5);
    }
}

fn mean_where(img: &Tensor<f32>, mask: &[bool], value: bool) -> f64 {
    let picked: Vec<f64> = img
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m == value)
        .map(|(v, _)| *v as f64)
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn renders_stay_in_range(seed in any::<u32>(), bright in any::<bool>()) {
        let task = if bright { Task::BrightDark } else { Task::SolidsEdges };
        let spec = task.sample_spec(seed as u64);
        for img in [task.render_source(&spec, SIZE).unwrap(), task.render_target(&spec, SIZE).unwrap()] {
            prop_assert_eq!(img.shape(), &[1, SIZE, SIZE]);
            prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pgm_round_trip_is_within_half_a_level(values in prop::collection::vec(-1.5f32..1.5, 16 * 16)) {
        let img = Tensor::new([1, 16, 16], values.clone()).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        prop_assert_eq!(back.shape(), &[1, 16, 16]);
        for (a, b) in values.iter().zip(back.data()) {
            prop_assert!((-1.0..=1.0).contains(b));
            prop_assert!((a.clamp(-1.0, 1.0) - b).abs() <= 0.5 / 127.5 + 1e-6);
        }
    }

    #[test]
    fn spec_seeds_keep_their_stream(base in 0u64..1 << 24, index in 0usize..1 << 20) {
        for s in [Stream::TrainSource, Stream::TrainTarget, Stream::Eval] {
            prop_assert_eq!(stream_of(spec_seed(s, base, index)), s as u64);
        }
    }
}

#[test]
fn bright_dark_target_swaps_the_palette() {
    for i in 0..20 {
        let spec = Task::BrightDark.sample_spec(i);
        let (src, tgt) = (
            Task::BrightDark.render_source(&spec, SIZE).unwrap(),
            Task::BrightDark.render_target(&spec, SIZE).unwrap(),
        );
        let mask = shape_mask(&spec, SIZE);
        assert!(mean_where(&src, &mask, true) > mean_where(&src, &mask, false));
        assert!(mean_where(&tgt, &mask, true) < mean_where(&tgt, &mask, false));
    }
}

#[test]
fn splits_are_disjoint_deterministic_and_paired() {
    let root = std::env::temp_dir().join(format!("jointcycle_datasets_{}", std::process::id()));
    let again = root.with_extension("again");
    for r in [&root, &again] {
        let _ = std::fs::remove_dir_all(r);
        make_unpaired_split(r, Task::SolidsEdges, 30, 25, SIZE, 4).unwrap();
        make_paired_eval(r, Task::SolidsEdges, 200, SIZE, 4).unwrap();
    }
    for name in ["train_S.pack", "train_T.pack", "eval.pack", "eval.manifest"] {
        assert_eq!(
            std::fs::read(root.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap()
        );
    }

    let s = Dataset::load(&root, TRAIN_SOURCE, "S").unwrap();
    let t = Dataset::load(&root, TRAIN_TARGET, "T").unwrap();
    let (es, et) = (
        Dataset::load(&root, EVAL, "S").unwrap(),
        Dataset::load(&root, EVAL, "T").unwrap(),
    );
    assert_eq!((s.len(), t.len(), es.len(), et.len()), (30, 25, 200, 200));
    // Eval pairs share a spec; no seed is shared between any two streams.
    assert_eq!(es.seeds, et.seeds);
    let sets: Vec<HashSet<u64>> = [&s.seeds, &t.seeds, &es.seeds]
        .iter()
        .map(|v| v.iter().copied().collect())
        .collect();
    assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
    assert_eq!(sets[2].len(), 200);

    let m = Manifest::load(&root.join("eval.manifest")).unwrap();
    assert_eq!((m.task, m.size, m.entries.len()), (Task::SolidsEdges, SIZE, 400));
    for e in &m.entries {
        let img = decode_pgm(&std::fs::read(root.join(&e.path)).unwrap()).unwrap();
        let spec = Task::SolidsEdges.sample_spec(e.seed);
        let want = if e.domain == "S" {
            gen_solid(&spec, SIZE)
        } else {
            gen_edge(&spec, SIZE)
        }
        .unwrap();
        assert!(img.max_abs_diff(&want) <= 0.5 / 127.5 + 1e-6);
    }
    for r in [&root, &again] {
        let _ = std::fs::remove_dir_all(r);
    }
}
