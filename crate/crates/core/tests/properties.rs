mod common;

use std::f64::consts::FRAC_PI_2;

use common::*;
use emctl_core::certifier::{self, Certificate, Verdict};
use emctl_core::faulton;
use emctl_core::linalg;
use emctl_core::network::{Bus, BusKind, Line, PowerNetwork};
use emctl_core::postfault::StateFile;
use emctl_core::{model, powerflow, State};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

/// Connected networks of 2–5 buses (a spanning path plus optional chords),
/// at least one generator, balanced injections.
fn arb_network() -> impl Strategy<Value = PowerNetwork> {
    (2usize..=5)
        .prop_flat_map(|n| {
            (
                Just(n),
                1usize..=n,
                prop::collection::vec((0.9f64..1.1, 0.5f64..3.0, 0.2f64..2.0, -0.3f64..0.3), n),
                prop::collection::vec(0.5f64..2.0, n - 1),
                prop::collection::vec(prop::option::of(0.5f64..2.0), n * (n - 1) / 2),
            )
        })
        .prop_map(|(n, gens, params, path, chords)| {
            let mean = params.iter().map(|p| p.3).sum::<f64>() / n as f64;
            let buses = params
                .iter()
                .enumerate()
                .map(|(i, &(v, m, d, p))| Bus {
                    id: i as u32 + 1,
                    kind: if i < gens { BusKind::Generator } else { BusKind::Load },
                    voltage: v,
                    inertia: (i < gens).then_some(m),
                    damping: d,
                    injection: p - mean,
                })
                .collect();
            let mut lines: Vec<Line> = path
                .iter()
                .enumerate()
                .map(|(i, &b)| Line {
                    from: i as u32 + 1,
                    to: i as u32 + 2,
                    susceptance: b,
                    bounds: None,
                })
                .collect();
            let mut idx = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if let (Some(b), true) = (chords[idx], j > i + 1) {
                        lines.push(Line {
                            from: i as u32 + 1,
                            to: j as u32 + 1,
                            susceptance: b,
                            bounds: None,
                        });
                    }
                    idx += 1;
                }
            }
            PowerNetwork::new(buses, lines).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sector_bound_holds_inside_polytope(gamma in 0.0f64..1.55, s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let g = model::uniform_sector_gain(gamma).unwrap();
        let d = -gamma + 2.0 * gamma * s;
        let y = (-FRAC_PI_2 - d) + u * (FRAC_PI_2 - d - (-FRAC_PI_2 - d));
        prop_assert!(sector_violation(d, y, g) <= 1e-14);
    }

    #[test]
    fn sector_gain_is_tight(gamma in 0.0f64..1.5) {
        // the chord from γ to π/2 attains the lower slope
        let g = model::uniform_sector_gain(gamma).unwrap();
        let y = FRAC_PI_2 - gamma;
        let f = (gamma + y).sin() - gamma.sin();
        prop_assert!((f / y - g).abs() <= 1e-12);
    }

    #[test]
    fn bilinear_form_matches_swing_equations(net in arb_network(), xs in unit_vec(10)) {
        let Ok(eq) = powerflow::solve_equilibrium(&net, None) else { return Ok(()) };
        let Ok(mats) = emctl_core::assemble_matrices(&net, &eq.angles) else { return Ok(()) };
        let x = DVector::from_fn(mats.state_dim(), |i, _| xs[i % xs.len()]);
        let err = (swing_rhs_as_deviation(&net, &mats, &x) - mats.bilinear_rhs(&x)).amax();
        prop_assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn residual_is_gauge_invariant(net in arb_network(), angles in unit_vec(5), shift in -20.0f64..20.0) {
        let a = DVector::from_fn(net.num_buses(), |i, _| angles[i]);
        let r0 = powerflow::residual(&net, &a);
        let r1 = powerflow::residual(&net, &a.add_scalar(shift));
        prop_assert!((r0 - r1).amax() <= 1e-12);
    }

    #[test]
    fn equilibrium_shift_keeps_differences(net in arb_network(), shift in -3.0f64..3.0) {
        let Ok(eq) = powerflow::solve_equilibrium(&net, None) else { return Ok(()) };
        let guess = eq.angles.add_scalar(shift);
        let moved = powerflow::solve_equilibrium(&net, Some(&guess)).unwrap();
        for (a, b) in eq.differences(&net).iter().zip(moved.differences(&net)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn vmin_matches_constrained_minimizer(values in unit_vec(21), shift in 0.05f64..1.0) {
        let mats = operating_point(&network("three_gen.json"));
        let p = spd_from(mats.state_dim(), &values, shift);
        let closed = certifier::compute_vmin(&p, &mats).unwrap();
        let oracle = vmin_oracle(&p, &mats);
        prop_assert!((closed - oracle).abs() <= 1e-6 * oracle, "{closed} vs {oracle}");
    }

    #[test]
    fn scaling_p_scales_vmin_and_keeps_verdicts(values in unit_vec(21), alpha in 0.01f64..100.0, xs in unit_vec(6)) {
        let mats = operating_point(&network("three_gen.json"));
        let p = spd_from(6, &values, 0.3);
        let c1 = Certificate::new(p.clone(), 0.5, None, &mats).unwrap();
        let c2 = Certificate::new(p * alpha, 0.5, None, &mats).unwrap();
        prop_assert!((c2.v_min - alpha * c1.v_min).abs() <= 1e-12 * c2.v_min.max(1.0));
        let x = DVector::from_fn(6, |i, _| 0.3 * xs[i]);
        let same = matches!(
            (certifier::assess(&c1, &mats, &x), certifier::assess(&c2, &mats, &x)),
            (Verdict::Stable { .. }, Verdict::Stable { .. }) | (Verdict::Uncertified { .. }, Verdict::Uncertified { .. })
        );
        // a ratio right at the boundary may round either way
        let ratio = c1.lyapunov(&x) / c1.v_min;
        prop_assert!(same || (ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schur_complement_signs_agree(noise in unit_vec(21), scale in 0.0f64..0.2, mu in 0.0f64..0.5) {
        let net = network("three_gen.json");
        let mats = operating_point(&net);
        let g = model::sector_gain(&mats).unwrap();
        let base = Certificate::load(fixture("three_gen_P.json"), &mats).unwrap().p;
        let p = &base + symmetric_from(6, &noise) * scale;
        let tripped = net.find_line("1-3").unwrap();
        for b_bar in [mats.b.clone(), faulton::bar_matrix(&mats.b, tripped, mu)] {
            if let Some((l, r)) = schur_signs(&mats, &b_bar, g, &p) {
                prop_assert_eq!(l, r);
            }
        }
    }

    #[test]
    fn eigenvalues_match_reference(values in unit_vec(36), n in 1usize..=8) {
        let m = symmetric_from(n, &values);
        let ours = linalg::eig_sym(&m).unwrap();
        let mut reference: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        let mut mine: Vec<f64> = ours.values.iter().copied().collect();
        mine.sort_by(f64::total_cmp);
        for (a, b) in mine.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        prop_assert!((ours.reconstruct() - &m).amax() <= 1e-12);
    }

    #[test]
    fn network_json_round_trip(net in arb_network()) {
        let back = PowerNetwork::from_json_str(&net.to_json_string()).unwrap();
        prop_assert_eq!(back.to_json_string(), net.to_json_string());
        prop_assert_eq!(back.injections(), net.injections());
        prop_assert_eq!(back.coupling_coefficients(), net.coupling_coefficients());
    }

    #[test]
    fn certificate_json_round_trip(values in unit_vec(21), g in 0.1f64..1.0) {
        let mats = operating_point(&network("three_gen.json"));
        let cert = Certificate::new(spd_from(6, &values, 0.1), g, Some(0.3), &mats).unwrap();
        let back = Certificate::from_json_str(&cert.to_json_string()).unwrap();
        prop_assert_eq!(&back.p, &cert.p);
        prop_assert_eq!(back.g, cert.g);
        prop_assert_eq!(back.gamma, cert.gamma);
        prop_assert_eq!(back.v_min, cert.v_min);
    }

    #[test]
    fn state_file_round_trip(angles in unit_vec(3), speeds in unit_vec(3)) {
        let net = network("three_gen.json");
        let state = State::new(DVector::from_vec(angles), DVector::from_vec(speeds));
        let text = StateFile::from_state(&net, &state).to_json_string();
        let back = StateFile::from_json_str(&text).unwrap().to_state(&net).unwrap();
        prop_assert_eq!(back, state);
    }
}

#[test]
fn eigenvalues_of_known_matrix() {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
    let mut values: Vec<f64> = linalg::eig_sym(&m).unwrap().values.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    let s = 2f64.sqrt();
    for (a, b) in values.iter().zip([2.0 - s, 2.0, 2.0 + s]) {
        assert!((a - b).abs() < 1e-14);
    }
}
