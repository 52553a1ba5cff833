//! Symbolic checks of the coefficient matching in the compiled program.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use scbc::conformity::{BlockMode, ConformityBlock};
use scbc::polyalg::{Monomial, Poly, PolyMatrix};
use scbc::region::{BoxSet, RegionSpec};
use scbc::sdpsolve::{solve, svec, SolveStatus, SolverOptions};
use scbc::soscompile::{assemble_program, CompileOptions, SdpProblem, SosDomain};

fn random_block(dim: usize, seed: &[f64]) -> ConformityBlock {
    let a = DMatrix::from_fn(dim, dim, |i, j| seed[(i * dim + j) % seed.len()] * (1.0 + i as f64 - j as f64));
    ConformityBlock {
        j: 1,
        matrix: (&a + a.transpose()) * 0.5,
        mode: BlockMode::Robust { varkappa: 0.1 },
    }
}

/// `J` for `F = [x1, x1 x2]` in two states, `G = [1 + x2]`.
fn two_state_system() -> (PolyMatrix, PolyMatrix) {
    let mut jac = PolyMatrix::zeros(2, 2, 2);
    jac.set(0, 0, Poly::constant(2, 1.0));
    jac.set(1, 0, Poly::var(2, 1));
    let mut g = PolyMatrix::zeros(1, 1, 2);
    g.set(0, 0, Poly::constant(2, 1.0).add(&Poly::var(2, 1)));
    (jac, g)
}

fn regions2() -> RegionSpec {
    RegionSpec::new(
        BoxSet::cube(2, -3.0, 3.0).unwrap(),
        BoxSet::cube(2, -0.5, 0.5).unwrap(),
        vec![BoxSet::cube(2, 2.0, 3.0).unwrap()],
    )
    .unwrap()
}

/// Projects `x0` onto `{x : A x = b}` (least-norm correction).
fn project(p: &SdpProblem, x0: &[f64]) -> Vec<f64> {
    let a = p.program.a.to_dense();
    let x = DVector::from_column_slice(x0);
    let r = DVector::from_column_slice(&p.program.b) - &a * &x;
    let svd = a.clone().svd(true, true);
    let eps = 1e-11 * svd.singular_values.max();
    let mut out = x + svd.solve(&r, eps).unwrap();
    for _ in 0..10 {
        let r = DVector::from_column_slice(&p.program.b) - &a * &out;
        out += svd.solve(&r, eps).unwrap();
    }
    let resid = (&a * &out - DVector::from_column_slice(&p.program.b)).amax();
    assert!(resid < 1e-8, "projection residual {resid}");
    out.as_slice().to_vec()
}

fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gram_form_reproduces_constraint(seed in 0u64..1000, d_k in 0u32..2, box_mode in any::<bool>(), d_alpha in prop::sample::select(vec![0u32, 2])) {
        let (jac, g) = two_state_system();
        let blocks = vec![random_block(5, &rand_vec(7, seed)), random_block(5, &rand_vec(7, seed + 1))];
        let opts = CompileOptions {
            kappa: 0.7,
            rho: 0.3,
            d_k,
            d_alpha,
            domain: if box_mode { SosDomain::Box } else { SosDomain::Global },
            ..CompileOptions::default()
        };
        let p = assemble_program(&blocks, &jac, &g, &regions2(), &opts).unwrap();
        let x = project(&p, &rand_vec(p.program.cones.dim(), seed + 7));
        let lhs = p.constraint_poly(&x);
        let rhs = p.gram_side_poly(&x);
        let diff = lhs.sub(&rhs).max_abs_coeff();
        prop_assert!(diff < 1e-8, "mismatch {diff}");
    }
}

fn scalar_blocks() -> Vec<ConformityBlock> {
    let phi = DMatrix::from_row_slice(1, 2, &[0.5, 1.0]);
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
    let mut r = DMatrix::zeros(3, 3);
    r[(0, 0)] = (&phi * &s * phi.transpose())[(0, 0)] - 0.01;
    let xh = &phi * &s;
    for c in 0..2 {
        r[(0, 1 + c)] = -xh[(0, c)];
        r[(1 + c, 0)] = -xh[(0, c)];
    }
    r.view_mut((1, 1), (2, 2)).copy_from(&s);
    vec![ConformityBlock {
        j: 1,
        matrix: r,
        mode: BlockMode::Robust { varkappa: 0.1 },
    }]
}

fn scalar_regions() -> RegionSpec {
    RegionSpec::new(
        BoxSet::cube(1, -10.0, 10.0).unwrap(),
        BoxSet::cube(1, -1.0, 1.0).unwrap(),
        vec![BoxSet::cube(1, 6.0, 10.0).unwrap()],
    )
    .unwrap()
}

/// Copies a small-degree solution into a larger-degree layout, padding
/// every new coefficient and Gram row with zeros.
fn embed(small: &SdpProblem, xs: &[f64], big: &SdpProblem) -> Vec<f64> {
    let (ls, lb) = (&small.layout, &big.layout);
    let mut x = vec![0.0; big.program.cones.dim()];
    let copy_block = |x: &mut Vec<f64>, from: usize, to: usize| {
        let k = small.program.cones.psd[from];
        let (os, ob) = (small.program.cones.psd_offset(from), big.program.cones.psd_offset(to));
        x[ob..ob + k * (k + 1) / 2].copy_from_slice(&xs[os..os + k * (k + 1) / 2]);
    };
    copy_block(&mut x, ls.p0_block, lb.p0_block);
    copy_block(&mut x, ls.ceiling_block, lb.ceiling_block);
    for (a, b) in ls.vertex_blocks.iter().zip(&lb.vertex_blocks) {
        copy_block(&mut x, *a, *b);
    }
    x[lb.eta_col] = xs[ls.eta_col];
    let (ac_s, ac_b) = (ls.alpha_col.unwrap(), lb.alpha_col.unwrap());
    for j in 0..ls.blocks_t {
        x[ac_b + j] = xs[ac_s + j];
    }
    for s in 0..ls.m {
        for c in 0..ls.n {
            for (mu, e) in ls.k_basis.iter().enumerate() {
                let mb = lb.k_basis.iter().position(|f| f == e).unwrap();
                x[lb.kbar_col + (s * lb.n + c) * lb.k_basis.len() + mb] =
                    xs[ls.kbar_col + (s * ls.n + c) * ls.k_basis.len() + mu];
            }
        }
    }
    let qs = {
        let k = small.program.cones.psd[ls.gram_block];
        let o = small.program.cones.psd_offset(ls.gram_block);
        scbc::sdpsolve::smat(&xs[o..o + k * (k + 1) / 2], k)
    };
    let kb = lb.gram_basis.len();
    let ks = ls.gram_basis.len();
    let pos: Vec<usize> = ls.gram_basis.iter().map(|e| lb.gram_basis.iter().position(|f| f == e).unwrap()).collect();
    let mut qb = DMatrix::zeros(lb.order * kb, lb.order * kb);
    for a in 0..ls.order {
        for b in 0..ls.order {
            for i in 0..ks {
                for j in 0..ks {
                    qb[(a * kb + pos[i], b * kb + pos[j])] = qs[(a * ks + i, b * ks + j)];
                }
            }
        }
    }
    let o = big.program.cones.psd_offset(lb.gram_block);
    let v = svec(&qb);
    x[o..o + v.len()].copy_from_slice(&v);
    x
}

#[test]
fn higher_controller_degree_keeps_feasible_points() {
    let jac = PolyMatrix::identity(1, 1);
    let g = PolyMatrix::identity(1, 1);
    let base = CompileOptions {
        kappa: 0.9,
        rho: 0.5,
        d_k: 0,
        domain: SosDomain::Box,
        ..CompileOptions::default()
    };
    let small = assemble_program(&scalar_blocks(), &jac, &g, &scalar_regions(), &base).unwrap();
    let sol = solve(&small.program, &SolverOptions::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    for d_k in [1, 2] {
        let big = assemble_program(&scalar_blocks(), &jac, &g, &scalar_regions(), &CompileOptions { d_k, ..base.clone() }).unwrap();
        let x = embed(&small, &sol.x, &big);
        let a = big.program.a.to_dense();
        let r = (&a * DVector::from_column_slice(&x) - DVector::from_column_slice(&big.program.b)).amax();
        assert!(r < 1e-7, "degree {d_k}: equality residual {r}");
        let report = scbc::sdpsolve::certify(
            &big.program,
            &scbc::sdpsolve::ConicSolution {
                status: SolveStatus::Optimal,
                x: x.clone(),
                y: vec![0.0; big.program.b.len()],
                s: vec![0.0; x.len()],
                pobj: 0.0,
                dobj: 0.0,
                pres: 0.0,
                dres: 0.0,
                gap: 0.0,
                iterations: 0,
                iterate_hash: String::new(),
                log: vec![],
            },
        );
        assert!(report.primal_cone < 1e-9);
        assert!(report.min_eig_primal.iter().all(|&e| e > -1e-9));
    }
}

#[test]
fn model_based_solution_satisfies_compiled_constraint() {
    // Noise-free data for x+ = 0.5 x + u; model-based design u = -0.4 x
    // gives closed loop 0.1, so (1+rho) 0.01 P <= kappa P with room.
    let blocks = scalar_blocks();
    let jac = PolyMatrix::identity(1, 1);
    let g = PolyMatrix::identity(1, 1);
    let opts = CompileOptions {
        kappa: 0.5,
        rho: 1.0,
        d_k: 0,
        domain: SosDomain::Global,
        ..CompileOptions::default()
    };
    let p = assemble_program(&blocks, &jac, &g, &scalar_regions(), &opts).unwrap();
    let pbar = 0.5;
    let kbar = -0.4 * pbar;
    // Search the S-lemma multiplier on a grid.
    let mut found = None;
    for step in 1..2000 {
        let alpha = step as f64 * 0.01;
        let mut x = vec![0.0; p.program.cones.dim()];
        x[p.layout.kbar_col] = kbar;
        x[p.layout.alpha_col.unwrap()] = alpha;
        let o = p.program.cones.psd_offset(p.layout.p0_block);
        x[o] = pbar - opts.lambda_min;
        let mm = p.matrix_polynomial(&x).eval(&[0.0]).unwrap();
        let neg = -(mm + DMatrix::identity(4, 4) * p.layout.margin);
        if nalgebra::SymmetricEigen::new(neg.clone()).eigenvalues.min() >= 0.0 {
            found = Some((x, neg));
            break;
        }
    }
    let (mut x, neg) = found.expect("a multiplier certifies the model-based design");
    // Fill the Gram matrix and the remaining slacks, then check every equality.
    let og = p.program.cones.psd_offset(p.layout.gram_block);
    let v = svec(&neg);
    x[og..og + v.len()].copy_from_slice(&v);
    let oc = p.program.cones.psd_offset(p.layout.ceiling_block);
    x[oc] = opts.p_max - pbar;
    let eta_bar = pbar; // vertex +-1: Pb - eta_bar >= 0
    x[p.layout.eta_col] = eta_bar;
    for &vb in &p.layout.vertex_blocks {
        x[p.program.cones.psd_offset(vb)] = pbar - eta_bar;
    }
    let a = p.program.a.to_dense();
    let r = (&a * DVector::from_column_slice(&x) - DVector::from_column_slice(&p.program.b)).amax();
    assert!(r < 1e-12, "residual {r}");
    let lhs = p.constraint_poly(&x);
    let rhs = p.gram_side_poly(&x);
    assert!(lhs.sub(&rhs).max_abs_coeff() < 1e-12);
    let _ = Monomial::one(1);
}
