//! C ABI over the modelsmith engine.
//!
//! Every function returns an [`MsmStatus`]. On failure the message is kept
//! per thread and read with [`msm_last_error_message`]. Handles are opaque
//! and must be released with their `_free` function; strings returned
//! through out-parameters are released with [`msm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use modelsmith::baselines::{simulate_policy, McgsParams, SearchPolicy, Simulation, SyntheticTaskModel};
use modelsmith::lifecycle::ensemble::{rank_percentile, select_best, weighted_blend};
use modelsmith::pipeline::{build_report, cmd_replay, cmd_run};
use modelsmith::provider::{read_transcript, TranscriptRecord};
use modelsmith::workspace::{Direction, ResultManifest};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    NotFound = 4,
    Failed = 5,
    Panic = 6,
}

/// Result of a synthetic baseline simulation.
pub struct MsmSimulation {
    inner: Simulation,
}

/// Transcript of a finished run directory.
pub struct MsmRun {
    records: Vec<TranscriptRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type Outcome = Result<(), (MsmStatus, String)>;

fn guard(f: impl FnOnce() -> Outcome) -> MsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MsmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsmStatus::Panic
        }
    }
}

fn null(what: &str) -> (MsmStatus, String) {
    (MsmStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: impl ToString) -> (MsmStatus, String) {
    (MsmStatus::InvalidArgument, msg.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MsmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (MsmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (MsmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_string(s: String, out: *mut *mut c_char) -> Outcome {
    let c = CString::new(s).map_err(|_| invalid("output contains a nul byte"))?;
    // SAFETY: caller checked `out` for null.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn msm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn msm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Tie-averaged rank percentiles of `scores` written to `out` (both `len`
/// long).
///
/// # Safety
/// `scores` and `out` must point to `len` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn msm_rank_percentile(scores: *const f64, len: usize, out: *mut f64) -> MsmStatus {
    guard(|| {
        let scores = slice_arg(scores, len, "scores")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ranks = rank_percentile(scores).map_err(invalid)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&ranks);
        Ok(())
    })
}

/// Weighted blend of `count` arrays of `len` values. With `use_threshold`
/// the output is binarized at `threshold`.
///
/// # Safety
/// `inputs` must hold `count` pointers to `len` doubles each; `weights`
/// must hold `count` doubles and `out` room for `len`.
#[no_mangle]
pub unsafe extern "C" fn msm_weighted_blend(
    inputs: *const *const f64,
    count: usize,
    len: usize,
    weights: *const f64,
    use_threshold: bool,
    threshold: f64,
    out: *mut f64,
) -> MsmStatus {
    guard(|| {
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let ptrs = std::slice::from_raw_parts(inputs, count);
        let arrays = ptrs.iter().map(|p| slice_arg(*p, len, "input")).collect::<Result<Vec<_>, _>>()?;
        let weights = slice_arg(weights, count, "weights")?;
        let blended = weighted_blend(&arrays, weights, use_threshold.then_some(threshold)).map_err(invalid)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&blended);
        Ok(())
    })
}

/// Index (0-based) of the best of `count` metric values; ties go to the
/// lowest index.
///
/// # Safety
/// `values` must point to `count` doubles and `out_index` to a `size_t`.
#[no_mangle]
pub unsafe extern "C" fn msm_select_best(
    values: *const f64,
    count: usize,
    higher_is_better: bool,
    out_index: *mut usize,
) -> MsmStatus {
    guard(|| {
        let values = slice_arg(values, count, "values")?;
        if out_index.is_null() {
            return Err(null("out_index"));
        }
        let direction = if higher_is_better { Direction::HigherBetter } else { Direction::LowerBetter };
        let entries: Vec<(usize, ResultManifest)> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                (
                    i,
                    ResultManifest {
                        metric_name: "metric".into(),
                        metric_value: *v,
                        direction,
                        checkpoints: vec![],
                        predictions_path: None,
                        produced_by: String::new(),
                        produced_at: None,
                        runs_completed: 0,
                        inference_command: None,
                    },
                )
            })
            .collect();
        *out_index = select_best(&entries).map_err(invalid)?;
        Ok(())
    })
}

/// Simulates `policy` ("greedy" or "mcgs") on the default synthetic task
/// model for `steps` operator applications.
///
/// # Safety
/// `policy` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_sim_run(
    policy: *const c_char,
    drafts: usize,
    steps: usize,
    seed: u64,
    out: *mut *mut MsmSimulation,
) -> MsmStatus {
    guard(|| {
        let policy = match str_arg(policy, "policy")? {
            "greedy" => SearchPolicy::Greedy { drafts },
            "mcgs" => SearchPolicy::Mcgs(McgsParams { drafts, ..McgsParams::default() }),
            other => return Err(invalid(format!("unknown policy `{other}`"))),
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = simulate_policy(&SyntheticTaskModel::default(), &policy, steps, seed).map_err(invalid)?;
        *out = Box::into_raw(Box::new(MsmSimulation { inner }));
        Ok(())
    })
}

/// Best valid score of a simulation; `NotFound` when no node is valid.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_sim_best_score(sim: *const MsmSimulation, out: *mut f64) -> MsmStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = sim.inner.best_score.ok_or((MsmStatus::NotFound, "no valid node".to_string()))?;
        Ok(())
    })
}

/// Tab-separated trajectory, one step per line. Free with
/// [`msm_string_free`].
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_sim_trajectory(sim: *const MsmSimulation, out: *mut *mut c_char) -> MsmStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(sim.inner.render_trajectory(), out)
    })
}

/// # Safety
/// `sim` must come from [`msm_sim_run`] and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn msm_sim_free(sim: *mut MsmSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Opens the transcript of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_run_open(run_dir: *const c_char, out: *mut *mut MsmRun) -> MsmStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let path = dir.join("transcript.jsonl");
        if !path.is_file() {
            return Err((MsmStatus::NotFound, format!("{} not found", path.display())));
        }
        let records = read_transcript(&path).map_err(|e| (MsmStatus::Failed, e.to_string()))?;
        *out = Box::into_raw(Box::new(MsmRun { records }));
        Ok(())
    })
}

/// Number of transcript records.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_run_record_count(run: *const MsmRun, out: *mut usize) -> MsmStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = run.records.len();
        Ok(())
    })
}

/// Run report as JSON lines. Free with [`msm_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msm_run_report_json(run: *const MsmRun, out: *mut *mut c_char) -> MsmStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let lines = build_report(&run.records).map_err(|e| (MsmStatus::Failed, e))?;
        out_string(lines.iter().map(|v| v.to_string() + "\n").collect(), out)
    })
}

/// # Safety
/// `run` must come from [`msm_run_open`] and not have been freed. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn msm_run_free(run: *mut MsmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs a task bundle end to end, as the `run` command does. The process
/// exit code of that command is stored in `out_exit_code`; the return value
/// only reports argument errors.
///
/// # Safety
/// `bundle` and `config` must be NUL-terminated strings; `run_dir` may be
/// null to use the config's directory.
#[no_mangle]
pub unsafe extern "C" fn msm_cmd_run(
    bundle: *const c_char,
    config: *const c_char,
    run_dir: *const c_char,
    out_exit_code: *mut i32,
) -> MsmStatus {
    guard(|| {
        let bundle = PathBuf::from(str_arg(bundle, "bundle")?);
        let config = PathBuf::from(str_arg(config, "config")?);
        let run_dir = if run_dir.is_null() { None } else { Some(PathBuf::from(str_arg(run_dir, "run_dir")?)) };
        if out_exit_code.is_null() {
            return Err(null("out_exit_code"));
        }
        let outcome = cmd_run(&bundle, &config, run_dir.as_deref());
        *out_exit_code = outcome.status.code();
        Ok(())
    })
}

/// Replays a scripted run; stores the `replay` command's exit code.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out_exit_code` valid.
#[no_mangle]
pub unsafe extern "C" fn msm_cmd_replay(run_dir: *const c_char, out_exit_code: *mut i32) -> MsmStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        if out_exit_code.is_null() {
            return Err(null("out_exit_code"));
        }
        *out_exit_code = cmd_replay(&dir).status.code();
        Ok(())
    })
}
