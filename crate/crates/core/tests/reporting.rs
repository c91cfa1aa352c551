use fcrpeak::dp::{read_value_functions, write_value_functions, ValueFunction};
use fcrpeak::sim::{mean_results, write_report, MonthResult, Strategy};

fn row(strategy: Strategy, scale: f64, events: usize) -> MonthResult {
    let priced = strategy != Strategy::Baseline;
    MonthResult {
        strategy,
        peak_site: vec![1.9 * scale, 1.1 * scale],
        peak_power: 3.0 * scale,
        peak_cost: 24_000.0 * scale,
        average_fcr_capacity: priced.then_some(0.8 * scale),
        fcr_revenue: priced.then_some(15_000.0 * scale),
        elec_cost: priced.then_some(-100.0 * scale),
        net_profit: priced.then_some(9_000.0 * scale),
        compliance_events: events,
    }
}

fn month(scale: f64, events: usize) -> Vec<MonthResult> {
    Strategy::ALL.iter().map(|&s| row(s, scale, events)).collect()
}

#[test]
fn mean_of_months_is_fieldwise() {
    let avg = mean_results(&[month(1.0, 2), month(3.0, 5)]).unwrap();
    assert_eq!(avg.len(), 4);
    for r in &avg {
        assert!((r.peak_power - 6.0).abs() < 1e-12);
        assert!((r.peak_site[1] - 2.2).abs() < 1e-12);
        assert_eq!(r.compliance_events, 7);
    }
    assert_eq!(avg[0].fcr_revenue, None);
    assert!((avg[3].fcr_revenue.unwrap() - 30_000.0).abs() < 1e-9);
}

#[test]
fn ragged_months_are_rejected() {
    let mut short = month(1.0, 0);
    short.pop();
    assert!(mean_results(&[month(1.0, 0), short]).is_err());
    assert!(mean_results(&[]).is_err());
}

#[test]
fn report_has_one_line_per_strategy() {
    let mut out = Vec::new();
    write_report(&month(1.0, 0), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains("combined"));
}

#[test]
fn value_functions_round_trip() {
    let vfs = vec![
        ValueFunction {
            breakpoints: vec![0.5, 1.0, 2.5],
            values: vec![10.0, 20.0, 80.0],
        },
        ValueFunction::linear(12_000.0),
    ];
    let mut buf = Vec::new();
    write_value_functions(&vfs, &mut buf).unwrap();
    let back = read_value_functions(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in vfs.iter().zip(&back) {
        for x in [0.0, 0.7, 1.8, 3.0] {
            assert!((a.eval(x) - b.eval(x)).abs() < 1e-9);
        }
    }
}
