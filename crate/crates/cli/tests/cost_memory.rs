//! Kept in its own test binary: peak child RSS is process-wide, so no other
//! command may run as a child of this process.

use std::process::Command;

/// Peak resident set size over all waited-for children, in KiB.
fn children_max_rss_kib() -> i64 {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut usage) };
    assert_eq!(rc, 0);
    usage.ru_maxrss
}

#[test]
fn cost_of_largest_preset_stays_under_memory_ceiling() {
    let out = Command::new(env!("CARGO_BIN_EXE_smoe"))
        .args(["cost", "--preset", "moe-8e", "--seconds", "10", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // materializing ~297M f64 parameters would take over 2 GiB
    assert!(report["params"].as_u64().unwrap() > 250_000_000);
    let peak = children_max_rss_kib();
    assert!(peak > 0 && peak < 64 * 1024, "peak RSS {peak} KiB");
}
