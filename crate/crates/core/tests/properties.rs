//! Property tests for structural invariants across the core modules.

use proptest::prelude::*;
use topcomp_core::compensation::{basic_embeddings, build_compensation_fast, uniform_dims, FastConfig};
use topcomp_core::linalg::{spmm, spmm_t};
use topcomp_core::model::{forward_batch, forward_full, Activation, BatchMode};
use topcomp_core::sampler::{locality_partition, random_partition, random_walk_partition};
use topcomp_core::wl::wl_refine;
use topcomp_core::{seed, Arch, BatchContext, Csr, DenseMatrix, GnnModel, SparseGraph};

fn graph_strategy(max_n: usize) -> impl Strategy<Value = SparseGraph> {
    (3..=max_n).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..3 * n)
            .prop_map(move |edges| SparseGraph::build(n, &edges, true).expect("in-range edges"))
    })
}

fn matrix(rows: usize, cols: usize, seed_value: u64) -> DenseMatrix {
    DenseMatrix::gaussian(rows, cols, &mut seed::rng(seed_value))
}

fn close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) -> bool {
    a.max_abs_diff(b) <= tol * (1.0 + a.max_abs().max(b.max_abs()))
}

fn random_csr(rows: usize, cols: usize, seed_value: u64) -> Csr {
    let mut m = matrix(rows, cols, seed_value);
    for v in m.data_mut() {
        if v.abs() < 0.8 {
            *v = 0.0;
        }
    }
    Csr::from_dense(&m)
}

/// Batch of roughly half the nodes, chosen by `pick`.
fn half_batch(n: usize, pick: u64) -> Vec<usize> {
    let b: Vec<usize> = (0..n).filter(|&i| (pick >> (i % 64)) & 1 == 1).collect();
    if b.is_empty() {
        vec![0]
    } else {
        b
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spmm_is_linear(rows in 1usize..12, cols in 1usize..12, d in 1usize..5, s in any::<u64>(), alpha in -3.0f64..3.0) {
        let a = random_csr(rows, cols, s);
        let x = matrix(cols, d, s ^ 1);
        let y = matrix(cols, d, s ^ 2);
        let mut combo = x.scale(alpha);
        combo.add_assign(&y);
        let lhs = spmm(&a, &combo).unwrap();
        let mut rhs = spmm(&a, &x).unwrap().scale(alpha);
        rhs.add_assign(&spmm(&a, &y).unwrap());
        prop_assert!(close(&lhs, &rhs, 1e-12));
        prop_assert!(close(&lhs, &a.to_dense().dot(&combo), 1e-12));
    }

    #[test]
    fn spmm_t_is_the_adjoint(rows in 1usize..12, cols in 1usize..12, d in 1usize..5, s in any::<u64>()) {
        let a = random_csr(rows, cols, s);
        let x = matrix(cols, d, s ^ 3);
        let g = matrix(rows, d, s ^ 4);
        let lhs: f64 = spmm(&a, &x).unwrap().data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = spmm_t(&a, &g).unwrap().data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn normalized_adjacency_is_symmetric_on_undirected_graphs(g in graph_strategy(20)) {
        let a = g.normalized().to_dense();
        prop_assert!(close(&a, &a.transpose(), 1e-14));
        for i in 0..g.num_nodes() {
            let expected = 1.0 / (g.degrees()[i] as f64 + 1.0);
            prop_assert!((a.get(i, i) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn full_forward_is_permutation_equivariant(g in graph_strategy(16), s in any::<u64>(), sage in any::<bool>()) {
        let n = g.num_nodes();
        let arch = if sage { Arch::SageMean } else { Arch::Gcn };
        let x = matrix(n, 3, s);
        let m = GnnModel::init(arch, &[3, 4, 2], Activation::Relu, s).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(s ^ 5));
        let gp = g.permute(&perm).unwrap();
        let mut xp = DenseMatrix::zeros(n, 3);
        for (i, &pi) in perm.iter().enumerate() {
            xp.row_mut(pi).copy_from_slice(x.row(i));
        }
        let out = forward_full(&m, &g, &x).unwrap().0;
        let outp = forward_full(&m, &gp, &xp).unwrap().0;
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..2 {
                prop_assert!((out.get(i, c) - outp.get(pi, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitions_cover_every_node_once(g in graph_strategy(40), k in 1usize..6, s in any::<u64>()) {
        let n = g.num_nodes();
        let k = k.min(n);
        let nodes: Vec<usize> = (0..n).collect();
        let parts = [
            random_partition(&nodes, k, s).unwrap(),
            locality_partition(&g, k, s).unwrap(),
            random_walk_partition(&g, k, 3, s).unwrap(),
        ];
        for p in parts {
            prop_assert!(p.validate(n).is_ok());
            let mut seen = vec![0usize; n];
            for c in &p.clusters {
                for &v in c {
                    seen[v] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(p.len(), k);
        }
    }

    #[test]
    fn wl_classes_only_refine(g in graph_strategy(24), s in any::<u64>()) {
        let n = g.num_nodes();
        // few distinct feature rows so refinement has work to do
        let x = DenseMatrix::from_fn(n, 1, |i, _| ((i as u64 ^ s) % 2) as f64);
        let t = wl_refine(&g, &x, 4).unwrap();
        for r in 1..t.num_rounds() {
            prop_assert!(t.num_classes(r) >= t.num_classes(r - 1));
            let (prev, cur) = (t.colors(r - 1), t.colors(r));
            for i in 0..n {
                for j in 0..n {
                    if cur[i] == cur[j] {
                        prop_assert_eq!(prev[i], prev[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn compensated_transpose_is_the_adjoint(g in graph_strategy(20), pick in any::<u64>(), s in any::<u64>(), k in 1usize..4) {
        let n = g.num_nodes();
        let batch = half_batch(n, pick);
        let ctx = BatchContext::new(&g, &batch).unwrap();
        let x = matrix(n, 3, s);
        let hbar = basic_embeddings(&g, &x, Arch::Gcn, &uniform_dims(3, 2), 1, s).unwrap();
        let comp = build_compensation_fast(&hbar, &ctx, Arch::Gcn.propagation(), &FastConfig::new(k, s)).unwrap();
        let inner = &ctx.blocks(Arch::Gcn.propagation()).inner;
        let h = matrix(batch.len(), 2, s ^ 6);
        let gr = matrix(batch.len(), 2, s ^ 7);
        let lhs: f64 = comp.apply(inner, &h).unwrap().data().iter().zip(gr.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = comp.apply_transpose(inner, &gr).unwrap().data().iter().zip(h.data()).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn compensated_forward_reads_only_batch_rows(g in graph_strategy(20), pick in any::<u64>(), s in any::<u64>(), layers in 1usize..4) {
        let n = g.num_nodes();
        let batch = half_batch(n, pick);
        let ctx = BatchContext::new(&g, &batch).unwrap();
        let x = matrix(n, 3, s);
        let dims = uniform_dims(3, layers);
        let hbar = basic_embeddings(&g, &x, Arch::Gcn, &dims, 1, s).unwrap();
        let k = 3;
        let comp = build_compensation_fast(&hbar, &ctx, Arch::Gcn.propagation(), &FastConfig::new(k, s)).unwrap();
        let m = GnnModel::init(Arch::Gcn, &dims, Activation::Relu, s ^ 8).unwrap();
        let (out, tape) = forward_batch(&m, &ctx, &x.select_rows(&batch), BatchMode::Compensated(&comp)).unwrap();

        // perturbing every non-batch feature row after the fit leaves the output unchanged
        let mut x2 = x.clone();
        for v in 0..n {
            if !batch.contains(&v) {
                for c in x2.row_mut(v) {
                    *c += 100.0;
                }
            }
        }
        let out2 = forward_batch(&m, &ctx, &x2.select_rows(&batch), BatchMode::Compensated(&comp)).unwrap().0;
        prop_assert_eq!(out.data(), out2.data());
        prop_assert!(tape.embeddings_touched <= batch.len() * layers + k * layers);
    }
}
