mod common;

use common::*;
use couplingflow::flow::{
    build_flow, BatchNormLayer, BnMode, CouplingLayer, Direction, Layout, Mask, MaskKind, Shape3,
};
use couplingflow::numerics::{ParamStore, RngStream, Tape, Tensor};
use couplingflow::stnet::StNetConfig;
use proptest::prelude::*;

#[test]
fn round_trip_every_mask_and_multiscale() {
    for (name, m) in invertibility_models() {
        let gap = round_trip_gap(&m, 100, 1);
        assert!(gap < 1e-8, "{name}: {gap:e}");
    }
}

#[test]
fn logdet_antisymmetric_per_layer_and_composed() {
    let cfg = arch(
        Shape3::new(1, 4, 4),
        Layout::MultiScale {
            scales: 2,
            per_half: 1,
        },
        MaskKind::Checkerboard,
        true,
    );
    let m = random_model(&cfg, 0.3, 4);
    let x = random_batch(5, 16, 1.0, 8);
    let (z, fwd) = m.to_latent(&x, BnMode::Eval).unwrap();
    let (_, inv) = m.from_latent(&z).unwrap();
    // The inverse recomputes s from reconstructed inputs, so the composed
    // sums agree to rounding only.
    for (a, b) in fwd.iter().zip(&inv) {
        assert!((a + b).abs() < 1e-12, "{a} vs {b}");
    }

    let mut store = ParamStore::new();
    let mut rng = RngStream::new(2, 0);
    let mask = Mask::new(MaskKind::Horizontal, Shape3::new(1, 4, 4), 1).unwrap();
    let layer = CouplingLayer::new(
        &mut store,
        "c",
        mask,
        StNetConfig {
            hidden: 8,
            blocks: 1,
            bottleneck: None,
        },
        &mut rng,
    )
    .unwrap();
    randomize(&mut store, 0.4, 3);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let f = layer
        .apply(&mut tape, &store, xv, Direction::DataToLatent, "c")
        .unwrap();
    let b = layer
        .apply(&mut tape, &store, f.y, Direction::LatentToData, "c")
        .unwrap();
    assert_eq!(
        tape.value(f.logdet).data(),
        tape.value(b.logdet).map(|v| -v).data()
    );
}

fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = RngStream::new(seed, 1);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = std * rng.normal();
        }
    }
}

#[test]
fn coupling_logdet_matches_jacobian_for_every_mask() {
    for (i, kind) in MaskKind::ALL.into_iter().enumerate() {
        let cfg = arch(
            Shape3::new(2, 2, 4),
            Layout::Flat { layers: 1 },
            kind,
            false,
        );
        let m = random_model(&cfg, 0.4, 20 + i as u64);
        let gap = logdet_gap(&m, 5, i as u64);
        assert!(gap < 1e-4, "{kind}: {gap:e}");
    }
}

#[test]
fn four_dim_coupling_logdet_absolute() {
    let cfg = arch(
        Shape3::new(1, 2, 2),
        Layout::Flat { layers: 1 },
        MaskKind::Checkerboard,
        false,
    );
    let m = random_model(&cfg, 0.5, 7);
    let x = random_batch(3, 4, 1.0, 2);
    let (_, ld) = m.to_latent(&x, BnMode::Eval).unwrap();
    let f = latent_fn(&m);
    for r in 0..3 {
        let oracle = log_abs_det(&fd_jacobian(&f, x.row_slice(r), 1e-5));
        assert!((ld[r] - oracle).abs() < 1e-6, "{} vs {oracle}", ld[r]);
        assert!(ld[r].abs() > 1e-3);
    }
}

#[test]
fn batchnorm_logdet_matches_jacobian() {
    let mut store = ParamStore::new();
    let mut bn = BatchNormLayer::new(&mut store, "bn", 3);
    randomize(&mut store, 0.5, 9);
    bn.running_mean = vec![0.3, -1.0, 2.0];
    bn.running_var = vec![0.5, 2.0, 1.3];
    let apply = |x: &[f64]| -> (Vec<f64>, f64) {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(1, 3, x.to_vec()).unwrap());
        let out = bn
            .apply(
                &mut tape,
                &store,
                xv,
                Direction::DataToLatent,
                BnMode::Eval,
                "bn",
            )
            .unwrap();
        (
            tape.value(out.y).data().to_vec(),
            tape.value(out.logdet).item(),
        )
    };
    let x = [0.7, -0.2, 1.9];
    let oracle = log_abs_det(&fd_jacobian(|v| apply(v).0, &x, 1e-5));
    let ld = apply(&x).1;
    assert!((ld - oracle).abs() < 1e-6, "{ld} vs {oracle}");
    assert!(relative_error(ld, oracle) < 1e-4);
}

#[test]
fn composed_logdet_matches_jacobian() {
    let cfg = arch(
        Shape3::new(1, 4, 4),
        Layout::MultiScale {
            scales: 2,
            per_half: 1,
        },
        MaskKind::Checkerboard,
        true,
    );
    let m = random_model(&cfg, 0.3, 13);
    let gap = logdet_gap(&m, 5, 3);
    assert!(gap < 1e-4, "{gap:e}");
}

fn quadrant(i: usize, j: usize) -> usize {
    match (i < 2, j < 2) {
        (true, true) => 0,
        (true, false) => 1,
        (false, false) => 2,
        (false, true) => 3,
    }
}

#[test]
fn coupling_jacobian_structure() {
    let shape = Shape3::new(1, 4, 4);
    let mask = Mask::new(MaskKind::Checkerboard, shape, 0).unwrap();
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(
        &mut store,
        "c",
        mask.clone(),
        StNetConfig {
            hidden: 8,
            blocks: 1,
            bottleneck: None,
        },
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    randomize(&mut store, 0.4, 5);
    let run = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(1, 16, x.to_vec()).unwrap());
        let out = layer
            .apply(&mut tape, &store, xv, Direction::DataToLatent, "c")
            .unwrap();
        (
            tape.value(out.y).data().to_vec(),
            tape.value(out.s).data().to_vec(),
        )
    };
    let x = random_batch(1, 16, 1.0, 3).into_data();
    let j = fd_jacobian(|v| run(v).0, &x, 1e-5);
    let s = run(&x).1;
    let change = mask.change_idx();
    for (a, &p) in change.iter().enumerate() {
        for (b, &q) in change.iter().enumerate() {
            let want = if a == b { s[a].exp() } else { 0.0 };
            assert!((j[(p, q)] - want).abs() < 1e-7, "({p},{q})");
        }
    }
    for p in (0..16).filter(|p| !change.contains(p)) {
        for q in 0..16 {
            let want = if p == q { 1.0 } else { 0.0 };
            assert!((j[(p, q)] - want).abs() < 1e-9, "({p},{q})");
        }
    }
}

#[test]
fn cycle_layer_reads_only_the_previous_quadrant() {
    let shape = Shape3::new(1, 4, 4);
    for phase in 0..4 {
        let mask = Mask::new(MaskKind::Cycle, shape, phase).unwrap();
        let mut store = ParamStore::new();
        let layer = CouplingLayer::new(
            &mut store,
            "c",
            mask,
            StNetConfig {
                hidden: 8,
                blocks: 1,
                bottleneck: None,
            },
            &mut RngStream::new(1, 0),
        )
        .unwrap();
        randomize(&mut store, 0.5, phase as u64);
        let run = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::matrix(1, 16, x.to_vec()).unwrap());
            let out = layer
                .apply(&mut tape, &store, xv, Direction::DataToLatent, "c")
                .unwrap();
            tape.value(out.y).data().to_vec()
        };
        let x = random_batch(1, 16, 1.0, 40 + phase as u64).into_data();
        let y = run(&x);
        let j = fd_jacobian(run, &x, 1e-5);
        let own = phase % 4;
        let prev = (phase + 3) % 4;
        for p in 0..16 {
            let qp = quadrant(p / 4, p % 4);
            if qp != own {
                assert_eq!(y[p], x[p], "phase {phase}: coordinate {p} moved");
                continue;
            }
            for q in 0..16 {
                let qq = quadrant(q / 4, q % 4);
                let sensitive = j[(p, q)].abs() > 1e-9;
                assert_eq!(
                    sensitive,
                    qq == own && (p == q) || qq == prev,
                    "phase {phase}: d y{p} / d x{q} = {}",
                    j[(p, q)]
                );
            }
        }
    }
}

#[test]
fn mask_partitions() {
    let shape = Shape3::new(2, 4, 4);
    for kind in MaskKind::ALL {
        for phase in 0..4 {
            let m = Mask::new(kind, shape, phase).unwrap();
            let change = m.change_idx();
            assert!(m.condition_idx().iter().all(|c| !change.contains(c)));
            assert!(!change.is_empty());
            if kind == MaskKind::Checkerboard {
                for c in 0..shape.c {
                    for i in 0..4 {
                        for j in 0..4 {
                            let want = (i + j + phase) % 2 == 0;
                            assert_eq!(change.contains(&shape.index(c, i, j)), want);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn samples_are_deterministic_and_scorable() {
    let cfg = arch(
        Shape3::new(1, 4, 4),
        Layout::Flat { layers: 3 },
        MaskKind::Horizontal,
        false,
    );
    let m = random_model(&cfg, 0.2, 6);
    let a = m.sample(50, 3).unwrap();
    assert_eq!(a, m.sample(50, 3).unwrap());
    assert_ne!(a, m.sample(50, 4).unwrap());
    let lp = m.log_prob(&a, BnMode::Eval).unwrap().values;
    assert!(lp.iter().all(|v| v.is_finite()));
}

#[test]
fn latent_dims_add_up() {
    for (scales, shape) in [(1, Shape3::new(1, 4, 4)), (2, Shape3::new(3, 8, 8))] {
        let cfg = arch(
            shape,
            Layout::MultiScale {
                scales,
                per_half: 1,
            },
            MaskKind::Checkerboard,
            false,
        );
        let m = build_flow(&cfg).unwrap();
        let mut origin = m.latent_origin().to_vec();
        origin.sort_unstable();
        assert_eq!(origin, (0..shape.numel()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_models_invert(seed in 0u64..1000, std in 0.05f64..0.5, kind in 0usize..4) {
        let cfg = arch(
            Shape3::new(2, 4, 4),
            Layout::Flat { layers: 3 },
            MaskKind::ALL[kind],
            seed % 2 == 0,
        );
        let m = random_model(&cfg, std, seed);
        prop_assert!(round_trip_gap(&m, 8, seed) < 1e-8);
    }
}
