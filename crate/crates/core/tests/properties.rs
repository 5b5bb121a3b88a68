use dymesh_core::dataset::{dmb, pad_batch, slice_windows, window_starts};
use dymesh_core::fixtures::random_mesh;
use dymesh_core::mesh::{
    build_adjacency, decompose, farthest_point_sampling, merge_duplicate_vertices, recompose,
};
use dymesh_core::{DynamicMesh, Tensor};
use proptest::prelude::*;

fn mesh_strategy() -> impl Strategy<Value = DynamicMesh> {
    (any::<u64>(), 3usize..40, 1usize..6).prop_map(|(seed, n, t)| random_mesh(seed, n, t))
}

/// Straightforward max-min selection: recompute every distance to the whole
/// selected set at each step.
fn fps_oracle(x: &Tensor<f64>, n: usize, seed: usize) -> Vec<usize> {
    let d2 = |a: usize, b: usize| {
        let mut s = 0.0;
        for k in 0..x.cols() {
            let diff = x.at(a, k) - x.at(b, k);
            s += diff * diff;
        }
        s
    };
    let mut picked = vec![seed];
    while picked.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..x.rows() {
            if picked.contains(&j) {
                continue;
            }
            let m = picked
                .iter()
                .map(|&p| d2(p, j))
                .fold(f64::INFINITY, f64::min);
            if m > best.0 {
                best = (m, j);
            }
        }
        picked.push(best.1);
    }
    picked
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_is_reflexive_symmetric_and_face_induced(m in mesh_strategy()) {
        let n = m.num_vertices();
        let adj = build_adjacency(m.faces(), n).unwrap();
        let mut expected = vec![false; n * n];
        for i in 0..n {
            expected[i * n + i] = true;
        }
        for f in m.faces() {
            for &a in f {
                for &b in f {
                    expected[a as usize * n + b as usize] = true;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(adj.get(i, j), adj.get(j, i));
                prop_assert_eq!(adj.get(i, j), expected[i * n + j]);
            }
        }
    }

    #[test]
    fn fps_matches_oracle(seed in any::<u64>(), rows in 2usize..64, d in 1usize..5, frac in 0.0f64..1.0, start in any::<usize>()) {
        let mut r = dymesh_core::rng::stream(seed, "test.fps", 0);
        let x = dymesh_core::fixtures::random_matrix(&mut r, rows, d).cast::<f64>();
        let n = 1 + ((rows - 1) as f64 * frac) as usize;
        let s = start % rows;
        let got = farthest_point_sampling(&x, n, s).unwrap();
        prop_assert_eq!(got.indices, fps_oracle(&x, n, s));
    }

    #[test]
    fn decompose_recompose_round_trip(m in mesh_strategy()) {
        let back = recompose(&decompose(&m)).unwrap();
        let err = back.iter().zip(m.positions()).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0f32, f32::max);
        prop_assert!(err <= 1e-6, "round trip error {}", err);
    }

    #[test]
    fn merge_is_idempotent(m in mesh_strategy(), tol in prop_oneof![Just(0.0f32), 1e-3f32..0.3]) {
        let once = merge_duplicate_vertices(&m, tol).unwrap();
        let twice = merge_duplicate_vertices(&once, tol).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn dmb_round_trip(m in mesh_strategy(), caption in proptest::option::of("[a-z ]{0,24}")) {
        let mut m = m;
        m.set_caption(caption);
        let bytes = dmb::encode(&m);
        let back = dmb::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(dmb::encode(&back), bytes);
    }

    #[test]
    fn padded_items_unpad_exactly(seeds in proptest::collection::vec((any::<u64>(), 3usize..30), 1..5)) {
        let items: Vec<_> = seeds.iter().map(|&(s, n)| random_mesh(s, n, 3)).collect();
        let batch = pad_batch(&items).unwrap();
        for (b, m) in items.iter().enumerate() {
            prop_assert_eq!(&batch.item(b).unwrap(), m);
        }
    }

    #[test]
    fn windows_have_full_length_and_reverse(frames in 1usize..80, window in prop_oneof![Just(16usize), Just(32usize)]) {
        let m = random_mesh(frames as u64, 5, frames);
        let w = slice_windows(&m, window);
        prop_assert_eq!(w.len(), 2 * window_starts(frames, window).len());
        for pair in w.chunks(2) {
            let (fwd, rev) = (&pair[0].1, &pair[1].1);
            prop_assert_eq!(fwd.num_frames(), window);
            for k in 0..window {
                prop_assert_eq!(fwd.frame(k), rev.frame(window - 1 - k));
            }
        }
    }
}
