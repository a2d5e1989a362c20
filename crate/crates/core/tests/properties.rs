use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use shapecorr::descriptors::{heat_kernel_signature, restrict_features, wave_kernel_signature};
use shapecorr::eval::{default_pck_thresholds, evaluate, pck_curve};
use shapecorr::fmaps::{fm_decompose, fm_layer, random_features};
use shapecorr::geodesics::{geodesic_matrix, GeodesicMatrix};
use shapecorr::losses::gromov_loss;
use shapecorr::matching::{nearest_neighbor_map, row_softmax, MapMethod, PointMap};
use shapecorr::mesh::{extract_submesh, normalize_area, shapes, VertexSubset};
use shapecorr::partialgen::{carve_holes, plane_cut_removing};
use shapecorr::spectral::eigenbasis;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter().map(|r| r.transpose().argmax().0).collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn softmax_rows_are_stochastic_and_keep_argmax(s in matrix(6, 9), tau in 1e-3f64..5.0) {
        let p = row_softmax(&s, tau).unwrap();
        for r in p.row_iter() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        prop_assert_eq!(argmax_rows(&p), argmax_rows(&s));
    }

    #[test]
    fn nearest_neighbor_ignores_positive_row_scaling(
        fy in matrix(5, 4),
        fx in matrix(8, 4),
        sy in prop::collection::vec(0.1f64..10.0, 5),
        sx in prop::collection::vec(0.1f64..10.0, 8),
    ) {
        let base = nearest_neighbor_map(&fy, &fx).unwrap();
        let mut fy2 = fy.clone();
        let mut fx2 = fx.clone();
        for (i, s) in sy.iter().enumerate() {
            fy2.row_mut(i).scale_mut(*s);
        }
        for (i, s) in sx.iter().enumerate() {
            fx2.row_mut(i).scale_mut(*s);
        }
        prop_assert_eq!(nearest_neighbor_map(&fy2, &fx2).unwrap().targets, base.targets);
    }

    #[test]
    fn pck_is_monotone_and_bounded(errors in prop::collection::vec(0.0f64..0.4, 1..50)) {
        let pck = pck_curve(&errors, &default_pck_thresholds());
        for w in pck.windows(2) {
            prop_assert!(w[0].fraction <= w[1].fraction);
        }
        prop_assert!(pck.iter().all(|p| (0.0..=1.0).contains(&p.fraction)));
    }

    #[test]
    fn gromov_loss_is_permutation_equivariant(
        p in matrix(4, 7),
        dx in matrix(7, 7),
        dy in matrix(4, 4),
        order in permutation(7),
    ) {
        let p = row_softmax(&p, 0.5).unwrap();
        let dx = (&dx + dx.transpose()).abs();
        let dy = (&dy + dy.transpose()).abs();
        let mass = DVector::from_element(4, 0.25);
        let base = gromov_loss(&p, &dx, &dy, &mass).unwrap();
        let pp = DMatrix::from_fn(4, 7, |i, j| p[(i, order[j])]);
        let dxp = DMatrix::from_fn(7, 7, |i, j| dx[(order[i], order[j])]);
        let moved = gromov_loss(&pp, &dxp, &dy, &mass).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - moved).abs() <= 1e-10 * base.max(1.0));
    }
}

proptest! {
    #![proptest_config(cfg(6))]

    #[test]
    fn decomposition_identity_holds(seed in 0u64..1000, frac in 0.1f64..0.5, k in 6usize..16) {
        let mesh = normalize_area(&shapes::humanoid(6, seed)).unwrap();
        let n = Vector3::new(1.0, (seed % 7) as f64 / 7.0 - 0.5, 0.2);
        let keep = plane_cut_removing(&mesh, n.into(), frac).unwrap().kept;
        let (part, _) = extract_submesh(&mesh, &keep).unwrap();
        let bx = eigenbasis(&mesh, k).unwrap();
        let by = eigenbasis(&part, k).unwrap();
        let fx = random_features(mesh.vertex_count(), k + 6, seed);
        let fy = restrict_features(&fx, &keep).unwrap();
        let dec = fm_decompose(&keep, &bx, &by, &fx, &fy, 0.0).unwrap();
        let layer = fm_layer(&bx, &by, &fx, &fy, 0.0).unwrap();
        prop_assert!((&layer.matrix - &dec.ideal.matrix - &dec.error.matrix).amax() <= 1e-8);
    }

    #[test]
    fn spectrum_is_rigid_invariant_and_scales(seed in 0u64..1000, s in 0.5f64..3.0) {
        let mesh = shapes::humanoid(5, seed);
        let (rot, t) = shapes::random_rigid(seed);
        let base = eigenbasis(&mesh, 8).unwrap();
        let moved = eigenbasis(&mesh.transformed(&rot, 1.0, t).unwrap(), 8).unwrap();
        let scaled = eigenbasis(&mesh.scaled(s).unwrap(), 8).unwrap();
        for i in 1..8 {
            let l = base.eigenvalues()[i];
            prop_assert!((moved.eigenvalues()[i] - l).abs() <= 1e-6 * l);
            prop_assert!((scaled.eigenvalues()[i] * s * s - l).abs() <= 1e-6 * l);
        }
    }

    #[test]
    fn geodesics_are_rigid_invariant_and_scale(seed in 0u64..1000, s in 0.5f64..3.0) {
        let mesh = shapes::humanoid(5, seed);
        let (rot, t) = shapes::random_rigid(seed);
        let d = geodesic_matrix(&mesh).unwrap().distances().map(f64::from);
        let dm = geodesic_matrix(&mesh.transformed(&rot, 1.0, t).unwrap()).unwrap().distances().map(f64::from);
        let ds = geodesic_matrix(&mesh.scaled(s).unwrap()).unwrap().distances().map(f64::from);
        let tol = 1e-5 * d.amax();
        prop_assert!((&dm - &d).amax() <= tol);
        prop_assert!((&ds - &d * s).amax() <= tol * s);
    }

    #[test]
    fn descriptors_follow_rigid_motion_and_relabeling(seed in 0u64..1000) {
        let mesh = shapes::humanoid(5, seed);
        let (rot, t) = shapes::random_rigid(seed);
        let order: Vec<usize> = {
            let n = mesh.vertex_count();
            (0..n).map(|i| (i * 7 + seed as usize) % n).collect()
        };
        prop_assume!({ let mut o = order.clone(); o.sort(); o.dedup(); o.len() == order.len() });
        let b = eigenbasis(&mesh, 12).unwrap();
        let bm = eigenbasis(&mesh.transformed(&rot, 1.0, t).unwrap(), 12).unwrap();
        let bp = eigenbasis(&mesh.permuted(&order).unwrap(), 12).unwrap();
        let times = [0.05, 0.5, 5.0];
        let h = heat_kernel_signature(&b, &times).unwrap();
        let w = wave_kernel_signature(&b, 16).unwrap();
        let scale = h.values().amax();
        prop_assert!((heat_kernel_signature(&bm, &times).unwrap().values() - h.values()).amax() <= 1e-6 * scale);
        prop_assert!((wave_kernel_signature(&bm, 16).unwrap().values() - w.values()).amax() <= 1e-6 * w.values().amax());
        let hp = heat_kernel_signature(&bp, &times).unwrap();
        for (new, &old) in order.iter().enumerate() {
            prop_assert!((hp.values().row(new) - h.values().row(old)).amax() <= 1e-6 * scale);
        }
    }

    #[test]
    fn normalize_and_extract_are_idempotent(seed in 0u64..1000) {
        let once = normalize_area(&shapes::humanoid(5, seed)).unwrap();
        let twice = normalize_area(&once).unwrap();
        for (a, b) in once.vertices().iter().zip(twice.vertices()) {
            prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
        }
        let (sub, _) = extract_submesh(&once, &VertexSubset::all(once.vertex_count())).unwrap();
        prop_assert_eq!(sub.vertices(), once.vertices());
        prop_assert_eq!(sub.faces(), once.faces());
    }

    #[test]
    fn generated_parts_are_injective_and_deterministic(seed in 0u64..1000, m in 1usize..4) {
        let mesh = normalize_area(&shapes::humanoid(6, seed)).unwrap();
        let a = carve_holes(&mesh, m, 0.15, seed).unwrap();
        let b = carve_holes(&mesh, m, 0.15, seed).unwrap();
        prop_assert_eq!(a.map(), b.map());
        prop_assert!(a.map().windows(2).all(|w| w[0] < w[1]));
        for (i, &j) in a.map().iter().enumerate() {
            prop_assert_eq!(a.mesh.vertices()[i], mesh.vertices()[j]);
        }
    }

    #[test]
    fn evaluation_is_relabeling_invariant(seed in 0u64..1000) {
        let mesh = normalize_area(&shapes::humanoid(5, seed)).unwrap();
        let n = mesh.vertex_count();
        let geo = geodesic_matrix(&mesh).unwrap();
        let pred: Vec<usize> = (0..n).map(|i| (i * 13 + seed as usize) % n).collect();
        let gt: Vec<usize> = (0..n).collect();
        let base = evaluate(&PointMap::new(pred.clone(), n, MapMethod::NearestNeighbor), &gt, &geo, mesh.total_area()).unwrap();

        // Relabel the full shape by a cyclic shift.
        let shift = (seed as usize % (n - 1)) + 1;
        let relabel = |v: usize| (v + shift) % n;
        let d = geo.distances();
        let moved = DMatrix::from_fn(n, n, |i, j| d[((i + n - shift) % n, (j + n - shift) % n)]);
        let geo2 = GeodesicMatrix::from_parts(moved, String::new()).unwrap();
        let pred2 = PointMap::new(pred.iter().map(|&v| relabel(v)).collect(), n, MapMethod::NearestNeighbor);
        let gt2: Vec<usize> = gt.iter().map(|&v| relabel(v)).collect();
        let other = evaluate(&pred2, &gt2, &geo2, mesh.total_area()).unwrap();
        prop_assert_eq!(base.per_vertex, other.per_vertex);
        prop_assert!(base.mean_error >= 0.0);
    }
}
