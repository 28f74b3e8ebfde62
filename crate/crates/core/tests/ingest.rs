use csi_ident::ingest::{extract_amplitude_phase, parse_csi_str, FormatConfig};
use proptest::prelude::*;

fn log_text(rows: &[(f64, Vec<(i32, i32)>)]) -> String {
    rows.iter()
        .map(|(t, iq)| {
            let pairs: Vec<String> = iq.iter().map(|(re, im)| format!("{re},{im}")).collect();
            format!("{t}, {}\n", pairs.join(", "))
        })
        .collect()
}

fn rows_strategy() -> impl Strategy<Value = Vec<(f64, Vec<(i32, i32)>)>> {
    (1usize..8).prop_flat_map(|k| {
        proptest::collection::vec(
            (0u32..10_000, proptest::collection::vec((-128i32..128, -128i32..128), k)),
            2..30,
        )
        .prop_map(|rows| rows.into_iter().map(|(t, iq)| (f64::from(t) / 100.0, iq)).collect())
    })
}

proptest! {
    /// `(A cos φ, A sin φ)` reproduces the logged integers.
    #[test]
    fn amplitude_phase_recompose_the_log(rows in rows_strategy()) {
        let parsed = parse_csi_str(&log_text(&rows), &FormatConfig::default()).unwrap();
        let m = extract_amplitude_phase(&parsed.session);
        for (t, rec) in parsed.session.records().iter().enumerate() {
            for (k, z) in rec.iq.iter().enumerate() {
                let (a, p) = (m.amplitude[[t, k]], m.phase[[t, k]]);
                prop_assert!(a >= 0.0);
                prop_assert!(p > -std::f64::consts::PI && p <= std::f64::consts::PI);
                let tol = 1e-9 * a.max(1.0);
                prop_assert!((a * p.cos() - z.re).abs() <= tol);
                prop_assert!((a * p.sin() - z.im).abs() <= tol);
            }
        }
    }

    /// Records come out in timestamp order whatever the line order.
    #[test]
    fn parsing_sorts_by_timestamp(rows in rows_strategy()) {
        let parsed = parse_csi_str(&log_text(&rows), &FormatConfig::default()).unwrap();
        let got: Vec<f64> = parsed.session.records().iter().map(|r| r.timestamp).collect();
        let mut want: Vec<f64> = rows.iter().map(|r| r.0).collect();
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn extraction_is_deterministic_and_shape_preserving(rows in rows_strategy()) {
        let parsed = parse_csi_str(&log_text(&rows), &FormatConfig::default()).unwrap();
        let a = extract_amplitude_phase(&parsed.session);
        let b = extract_amplitude_phase(&parsed.session);
        prop_assert_eq!(a.amplitude.dim(), (rows.len(), rows[0].1.len()));
        prop_assert_eq!(a.phase.dim(), a.amplitude.dim());
        prop_assert_eq!(a, b);
    }
}
