mod checks;

fn assert_all(list: &[checks::Check]) {
    let failures = checks::run(list);
    for (name, msg) in &failures {
        eprintln!("{name}: {msg}");
    }
    assert!(failures.is_empty(), "{} check(s) failed", failures.len());
}

#[test]
fn oracle_checks() {
    assert_all(checks::ORACLE_CHECKS);
}

#[test]
fn gradient_checks() {
    assert_all(checks::GRADIENT_CHECKS);
}
