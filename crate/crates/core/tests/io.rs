use ivlate::data::{Dataset, DesignMatrix, INTERCEPT};
use ivlate::io::{diagnose_iv, load_csv, read_csv, write_csv, write_csv_to, Strata};
use ivlate::simulation::{generate_dataset, DgpSpec, X2};
use proptest::prelude::*;

#[test]
fn simulated_file_round_trips() {
    let data = generate_dataset(&DgpSpec {
        n: 500,
        seed: 4,
        ..DgpSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&data, &path).unwrap();
    assert_eq!(load_csv(&path).unwrap(), data);
}

#[test]
fn simulated_data_not_flagged() {
    let data = generate_dataset(&DgpSpec {
        n: 100_000,
        seed: 6,
        ..DgpSpec::default()
    })
    .unwrap();
    let diag = diagnose_iv(&data, &[Strata::parse(&format!("{X2}:sign")).unwrap()]).unwrap();
    assert_eq!(diag.strata.len(), 2);
    assert!(!diag.any_flagged(), "{diag:?}");
    assert!(diag.skipped.is_empty());
}

#[test]
fn header_without_instrument_rejected() {
    let err = read_csv("y,d,x\n1,0,2.5\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains('z'), "{err}");
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #[test]
    fn csv_round_trip_is_lossless(
        rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2, finite(), finite()), 1..40),
    ) {
        let names = vec![INTERCEPT.to_string(), "a".to_string(), "b".to_string()];
        let x = DesignMatrix::from_fn(rows.len(), 3, |i, j| match j {
            0 => 1.0,
            1 => rows[i].3,
            _ => rows[i].4,
        });
        let z = rows.iter().map(|r| r.0).collect();
        let d = rows.iter().map(|r| r.1).collect();
        let y = rows.iter().map(|r| r.2).collect();
        let data = Dataset::new(names, x, z, d, y).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        for i in 0..data.n() {
            for (a, b) in data.row(i).iter().zip(back.row(i)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        prop_assert_eq!(back, data);
    }
}
