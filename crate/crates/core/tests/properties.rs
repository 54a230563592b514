use mixspec::functional::{build_design, gls_solve};
use mixspec::memory::{exact_log_likelihood, pacf_to_coeffs, state_space_log_likelihood};
use mixspec::noise::pl_filter;
use mixspec::nstep::{classify, variation_pct, ClassifyInputs, LevyClass, Thresholds};
use mixspec::oracles::{brute_force_moments, moments, relative_error, Harmonic, Mode, ResidualSignalSpec, Signal, Step};
use mixspec::series::{parse_series_str, OffsetCatalog, TimeSeries};
use mixspec::whiten::ScaledIdentity;
use proptest::prelude::*;

fn rank(c: LevyClass) -> u8 {
    match c {
        LevyClass::GaussianLevy => 0,
        LevyClass::FractionalLevy => 1,
        LevyClass::StableLevy => 2,
    }
}

proptest! {
    #[test]
    fn variation_is_scale_invariant(
        pairs in prop::collection::vec((0.1f64..10.0, -5.0f64..5.0), 1..8),
        c in 0.01f64..100.0,
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
        let v = variation_pct(&a, &b).unwrap();
        let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
        let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
        let w = variation_pct(&ca, &cb).unwrap();
        prop_assert!((v - w).abs() <= 1e-9 * v.max(1.0));
        prop_assert!(v >= 0.0);
        prop_assert_eq!(variation_pct(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn classification_is_monotone_in_variation(
        v1 in 0.0f64..50.0,
        dv in 0.0f64..50.0,
        other in 0.0f64..50.0,
        alpha in 0.5f64..2.0,
        cn in 0.5f64..1.0,
        dc in -0.2f64..0.2,
    ) {
        let th = Thresholds::default();
        let at = |v: f64| {
            let i = ClassifyInputs {
                stochastic_pct: Some(v),
                functional_pct: Some(other.min(v)),
                alpha: Some(alpha),
                corr_levy: Some(cn + dc),
                corr_normal: Some(cn),
            };
            classify(&i, &th).unwrap()
        };
        prop_assert!(rank(at(v1)) <= rank(at(v1 + dv)));
    }

    #[test]
    fn pl_filter_follows_its_recursion(beta in 0.0f64..3.0, len in 1usize..400) {
        let h = pl_filter(beta, len);
        prop_assert_eq!(h.len(), len);
        prop_assert_eq!(h[0], 1.0);
        let d = beta / 2.0;
        for k in 1..len {
            let expect = h[k - 1] * (d + k as f64 - 1.0) / k as f64;
            prop_assert_eq!(h[k], expect);
            if beta > 0.0 {
                prop_assert!(h[k] > 0.0);
            }
            if beta <= 2.0 && beta > 0.0 {
                prop_assert!(h[k] <= h[k - 1]);
            }
        }
    }

    #[test]
    fn write_then_parse_is_identity(
        start in 40000.0f64..60000.0,
        steps in prop::collection::vec(1u32..4, 1..200),
        seed_vals in prop::collection::vec(-1e4f64..1e4, 200),
    ) {
        // one daily step so the inferred sampling interval is a day
        let mut epochs = vec![start.round(), start.round() + 1.0];
        for s in &steps {
            let last = *epochs.last().unwrap();
            epochs.push(last + *s as f64);
        }
        let values: Vec<f64> = epochs.iter().enumerate().map(|(i, _)| seed_vals[i % seed_vals.len()]).collect();
        let ts = TimeSeries::with_dt(epochs, values, 1.0).unwrap().with_header(vec![" station TEST".into()]);
        let back = parse_series_str(&ts.to_text()).unwrap();
        prop_assert_eq!(back, ts);
    }

    #[test]
    fn ols_residuals_are_orthogonal_to_design(
        vals in prop::collection::vec(-20.0f64..20.0, 800),
        n_harm in 1usize..4,
    ) {
        let epochs: Vec<f64> = (0..vals.len()).map(|i| 51544.0 + i as f64).collect();
        let design = build_design(&epochs, n_harm, &OffsetCatalog::empty()).unwrap();
        let sol = gls_solve(&vals, &design, &ScaledIdentity { n: vals.len(), variance: 1.0 }).unwrap();
        let fitted: Vec<f64> = (0..vals.len())
            .map(|i| design.columns.iter().zip(&sol.theta).map(|(c, t)| c[i] * t).sum())
            .collect();
        let r: Vec<f64> = vals.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in &design.columns {
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = c.iter().zip(&r).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-9 * cn * rn.max(1.0));
        }
        let wrss: f64 = r.iter().map(|x| x * x).sum();
        prop_assert!((wrss - sol.weighted_rss).abs() <= 1e-8 * wrss.max(1.0));
    }

    #[test]
    fn exact_oracle_equals_brute_force(
        l in 1usize..1500,
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
        mu in -1.0f64..1.0,
        sigma in 0.0f64..3.0,
        harm in prop::collection::vec((0.001f64..3.0, -1.0f64..1.0, -1.0f64..1.0), 0..4),
        steps in prop::collection::vec((0.0f64..1.0, -2.0f64..2.0), 0..4),
    ) {
        let specs = [
            ResidualSignalSpec::trend(a, b, mu, sigma),
            ResidualSignalSpec {
                signal: Signal::Seasonal {
                    harmonics: harm.iter().map(|&(w, c, e)| Harmonic { frequency: w, cos: c, sin: e }).collect(),
                    delta: 0.0,
                },
                noise_mean: mu,
                noise_sigma: sigma,
            },
            ResidualSignalSpec {
                signal: Signal::Offsets {
                    steps: steps.iter().map(|&(f, g)| Step { epoch: 1.0 + f * (l as f64 - 1.0), size: g }).collect(),
                },
                noise_mean: mu,
                noise_sigma: sigma,
            },
        ];
        for s in &specs {
            let e = moments(s, l, Mode::Exact).unwrap();
            let f = brute_force_moments(s, l).unwrap();
            // absolute slack for results that cancel to near zero
            let scale = 1.0 + f.mean.abs();
            prop_assert!((e.mean - f.mean).abs() <= 1e-10 * scale, "{:?} {:?} {:?}", s, e, f);
            prop_assert!(relative_error(e.variance, f.variance) <= 1e-9 || (e.variance - f.variance).abs() < 1e-12,
                "{:?} {:?} {:?}", s, e, f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kalman_and_levinson_agree(
        r_ar in prop::collection::vec(-0.9f64..0.9, 0..3),
        r_ma in prop::collection::vec(-0.9f64..0.9, 0..3),
        vals in prop::collection::vec(-3.0f64..3.0, 300),
    ) {
        let ar = pacf_to_coeffs(&r_ar);
        let ma: Vec<f64> = pacf_to_coeffs(&r_ma).iter().map(|c| -c).collect();
        let a = exact_log_likelihood(&vals, &ar, &ma, 0.0).unwrap();
        let b = state_space_log_likelihood(&vals, &ar, &ma).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{} {}", a, b);
    }
}
