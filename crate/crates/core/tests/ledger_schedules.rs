mod common;

use common::ledger_fuzz;

#[test]
fn randomized_schedules_never_delete_parents_early() {
    let report = ledger_fuzz::run(2_000, 60, 7);
    assert!(report.violations.is_empty(), "{:#?}", &report.violations[..report.violations.len().min(10)]);
    assert!(report.retired > 10_000);
    assert!(report.regenerations > 0);
}
