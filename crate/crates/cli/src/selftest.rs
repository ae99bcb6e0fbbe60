//! `selftest`: fast end-to-end checks that need no trained weights.

use std::path::Path;
use std::time::Instant;

use mobiface::analyzer::analyze;
use mobiface::crosscheck::{self, CrossCheck};
use mobiface::graph::{stage_trace, Architecture, MOBIFACE};
use mobiface::weights::{init_random, WeightStore};
use serde::Serialize;

use crate::{model_from_store, CliError, CliResult};

const ATOL: f32 = 1e-5;

/// Stage input sizes of the stock network, `H×W×C`, then the embedding size.
pub const MOBIFACE_STAGE_GOLDEN: [&str; 11] = [
    "112×112×3",
    "56×56×64",
    "56×56×64",
    "28×28×64",
    "28×28×64",
    "14×14×128",
    "14×14×128",
    "7×7×256",
    "7×7×256",
    "7×7×512",
    "512",
];

#[derive(Serialize)]
struct SuiteResult {
    suite: String,
    passed: bool,
    millis: f64,
    detail: String,
}

fn timed(suite: &str, f: impl FnOnce() -> CliResult<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    SuiteResult { suite: suite.to_string(), passed, millis: start.elapsed().as_secs_f64() * 1e3, detail }
}

fn oracle_suite(c: CrossCheck) -> (bool, String) {
    let detail = format!(
        "{} instances, max |diff| {:.3e}, {} bitwise equal (atol {ATOL:e})",
        c.instances, c.max_abs_diff, c.bitwise_equal
    );
    (c.within(ATOL), detail)
}

pub fn run(weights: Option<&Path>, seed: u64, as_json: bool) -> CliResult<()> {
    let mut results = vec![
        timed("conv2d-oracle", || Ok(oracle_suite(crosscheck::conv2d_vs_oracle(200, seed)?))),
        timed("dwconv2d-oracle", || Ok(oracle_suite(crosscheck::dwconv2d_vs_oracle(200, seed + 1)?))),
        timed("fc-oracle", || Ok(oracle_suite(crosscheck::fc_vs_oracle(50, seed + 2)?))),
        timed("bn-fold", || Ok(oracle_suite(crosscheck::bn_fold(50, seed + 3)?))),
        timed("shape-trace", shape_trace_golden),
        timed("analyzer-vs-init", || analyzer_vs_init(seed)),
        timed("weights-round-trip", || round_trip(seed)),
    ];
    if let Some(path) = weights {
        results.push(timed("weights-file", || {
            let store = WeightStore::load(path)?;
            let model = model_from_store(&store)?;
            let head = if model.has_flip_head() { "with flip head" } else { "no flip head" };
            Ok((true, format!("{}: {} tensors, {head}", path.display(), store.len())))
        }));
    }

    let failed = results.iter().filter(|r| !r.passed).count();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "suites": results, "failed": failed }))?);
    } else {
        for r in &results {
            println!(
                "{} {:<20} {:>9.1} ms  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.suite,
                r.millis,
                r.detail
            );
        }
        println!("{} of {} suites passed", results.len() - failed, results.len());
    }
    if failed > 0 {
        return Err(CliError(format!("selftest: {failed} suite(s) failed")));
    }
    Ok(())
}

fn shape_trace_golden() -> CliResult<(bool, String)> {
    let arch = Architecture::by_name(MOBIFACE)?;
    let got: Vec<String> = stage_trace(&arch.net)?.iter().map(|s| s.hwc()).collect();
    if got == MOBIFACE_STAGE_GOLDEN {
        Ok((true, format!("{} checkpoints, {} -> {}", got.len(), got[0], got[got.len() - 1])))
    } else {
        Ok((false, format!("trace {got:?} differs from golden {MOBIFACE_STAGE_GOLDEN:?}")))
    }
}

fn analyzer_vs_init(seed: u64) -> CliResult<(bool, String)> {
    let mut details = Vec::new();
    let mut ok = true;
    for name in Architecture::NAMES {
        let arch = Architecture::by_name(name)?;
        let report = analyze(&arch)?;
        let counted = report.totals.params + report.totals.buffers;
        let stored = init_random(&arch.weight_bindings(), seed)?.float_count();
        ok &= counted == stored;
        details.push(format!("{name}: analyzer {counted} vs init {stored}"));
    }
    Ok((ok, details.join("; ")))
}

fn round_trip(seed: u64) -> CliResult<(bool, String)> {
    let arch = Architecture::by_name(MOBIFACE)?;
    let store = init_random(&arch.weight_bindings(), seed)?;
    let bytes = store.to_bytes()?;
    let back = WeightStore::from_bytes(&bytes)?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let magic_rejected = WeightStore::from_bytes(&bad_magic).is_err();
    let truncation_rejected = WeightStore::from_bytes(&bytes[..bytes.len() - 1]).is_err();
    let ok = back.bitwise_eq(&store) && magic_rejected && truncation_rejected;
    Ok((
        ok,
        format!(
            "{} bytes bitwise={} bad-magic-rejected={magic_rejected} truncation-rejected={truncation_rejected}",
            bytes.len(),
            back.bitwise_eq(&store)
        ),
    ))
}
