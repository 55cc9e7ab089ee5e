use ftsgc_cli::ingest::{ingest_reader, write_long_csv};
use proptest::prelude::*;

/// Rows of two series over a few times, some values missing, with `x`
/// optionally vector-valued.
fn long_csv() -> impl Strategy<Value = (String, bool)> {
    (
        prop::collection::vec(prop::option::weighted(0.8, -1e3f64..1e3), 3 * 4 * 2),
        prop::collection::vec(0.5f64..50.0, 4),
        any::<bool>(),
    )
        .prop_map(|(values, taus, vector)| {
            let mut grid = vec![0.0];
            for step in &taus {
                grid.push(grid.last().unwrap() + step);
            }
            let mut text = String::from("series_id,time_index,tau,value\n");
            let mut k = 0;
            for t in [3, 4, 7] {
                for name in ["y", "x"] {
                    for tau in &grid[..4] {
                        match values[k] {
                            Some(v) => text.push_str(&format!("{name},{t},{tau},{v}\n")),
                            None => text.push_str(&format!("{name},{t},{tau},NA\n")),
                        }
                        k += 1;
                    }
                }
            }
            (text, vector)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ingest_then_write_then_ingest_is_the_identity((text, vector) in long_csv()) {
        let vectors = if vector { vec!["x".to_string()] } else { Vec::new() };
        if let Ok(first) = ingest_reader(text.as_bytes(), &vectors) {
            let mut buf = Vec::new();
            write_long_csv(&first, &mut buf).unwrap();
            let second = ingest_reader(buf.as_slice(), &vectors).unwrap();
            prop_assert_eq!(&first, &second);
            let pts = &first.sample.grid.series[0].points;
            prop_assert_eq!(pts[0], 0.0);
            prop_assert_eq!(pts[pts.len() - 1], 1.0);
        }
    }
}
