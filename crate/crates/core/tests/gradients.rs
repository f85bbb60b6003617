mod common;

use common::fd_cases::{cef_pipeline_cases, gate_cases, other_pipeline_cases, processor_cases};
use common::{FdReport, FD_TOLERANCE};

fn assert_all(cases: Vec<(String, FdReport)>) {
    for (label, r) in cases {
        assert!(r.checked > 0, "{label}: nothing checked");
        assert!(
            r.max_rel_error < FD_TOLERANCE,
            "{label}: max relative error {:.3e} over {} entries; worst in group {}: analytic {:e}, numeric {:e}",
            r.max_rel_error,
            r.checked,
            r.worst.0,
            r.worst.1,
            r.worst.2
        );
    }
}

#[test]
fn gate_and_attention_layers() {
    assert_all(gate_cases());
}

#[test]
fn processors() {
    assert_all(processor_cases());
}

#[test]
fn full_cef_pipelines() {
    assert_all(cef_pipeline_cases());
}

#[test]
fn base_and_ablation_pipelines() {
    assert_all(other_pipeline_cases());
}
