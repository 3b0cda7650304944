use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use modelsmith_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(msm_last_error_message()) }.to_string_lossy().into_owned()
}

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/toy")
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn rank_and_blend() {
    let scores = [0.2, 0.9, 0.2, 0.5];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { msm_rank_percentile(scores.as_ptr(), 4, out.as_mut_ptr()) }, MsmStatus::Ok);
    assert_eq!(out, [1.0 / 6.0, 1.0, 1.0 / 6.0, 2.0 / 3.0]);
    assert_eq!(last_error(), "");

    let a = [0.9, 0.1, 0.95, 0.5];
    let b = [0.9, 0.2, 0.7, 0.99];
    let inputs = [a.as_ptr(), b.as_ptr()];
    let weights = [0.3, 0.7];
    let mut blended = [0.0; 4];
    let status = unsafe { msm_weighted_blend(inputs.as_ptr(), 2, 4, weights.as_ptr(), true, 0.8, blended.as_mut_ptr()) };
    assert_eq!(status, MsmStatus::Ok);
    assert_eq!(blended, [1.0, 0.0, 0.0, 1.0]);

    let bad = [0.9, 0.9];
    let status = unsafe { msm_weighted_blend(inputs.as_ptr(), 2, 4, bad.as_ptr(), false, 0.0, blended.as_mut_ptr()) };
    assert_eq!(status, MsmStatus::InvalidArgument);
    assert!(last_error().contains("weights sum"));
}

#[test]
fn null_and_empty_arguments() {
    let mut out = [0.0; 1];
    assert_eq!(unsafe { msm_rank_percentile(ptr::null(), 3, out.as_mut_ptr()) }, MsmStatus::NullArgument);
    assert_eq!(last_error(), "scores is null");
    assert_eq!(unsafe { msm_rank_percentile(ptr::null(), 0, out.as_mut_ptr()) }, MsmStatus::InvalidArgument);
    let mut idx = 0usize;
    assert_eq!(unsafe { msm_select_best(ptr::null(), 0, true, &mut idx) }, MsmStatus::InvalidArgument);
    let mut sim = ptr::null_mut();
    let bad = CString::new("beam").unwrap();
    assert_eq!(unsafe { msm_sim_run(bad.as_ptr(), 5, 20, 0, &mut sim) }, MsmStatus::InvalidArgument);
    assert!(sim.is_null());
    unsafe {
        msm_sim_free(ptr::null_mut());
        msm_run_free(ptr::null_mut());
        msm_string_free(ptr::null_mut());
    }
}

#[test]
fn select_best_directions() {
    let values = [0.52, 0.48, 0.61, 0.48];
    let mut idx = 99usize;
    assert_eq!(unsafe { msm_select_best(values.as_ptr(), 4, false, &mut idx) }, MsmStatus::Ok);
    assert_eq!(idx, 1);
    assert_eq!(unsafe { msm_select_best(values.as_ptr(), 4, true, &mut idx) }, MsmStatus::Ok);
    assert_eq!(idx, 2);
}

#[test]
fn simulation_handle() {
    let policy = CString::new("greedy").unwrap();
    let run = |seed| {
        let mut sim = ptr::null_mut();
        assert_eq!(unsafe { msm_sim_run(policy.as_ptr(), 5, 30, seed, &mut sim) }, MsmStatus::Ok);
        let mut best = f64::NAN;
        assert_eq!(unsafe { msm_sim_best_score(sim, &mut best) }, MsmStatus::Ok);
        let mut text = ptr::null_mut();
        assert_eq!(unsafe { msm_sim_trajectory(sim, &mut text) }, MsmStatus::Ok);
        let s = unsafe { CStr::from_ptr(text) }.to_string_lossy().into_owned();
        unsafe {
            msm_string_free(text);
            msm_sim_free(sim);
        }
        (best, s)
    };
    let (best, trajectory) = run(4);
    assert!(best.is_finite());
    assert_eq!(trajectory.lines().count(), 30);
    assert_eq!(run(4), (best, trajectory));
}

#[test]
fn run_replay_and_report_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let (bundle, conf, rd) = (cstr(&toy().join("bundle")), cstr(&toy().join("run.conf")), cstr(&run_dir));
    let mut code = -1;
    assert_eq!(unsafe { msm_cmd_run(bundle.as_ptr(), conf.as_ptr(), rd.as_ptr(), &mut code) }, MsmStatus::Ok);
    assert_eq!(code, 0);
    assert_eq!(unsafe { msm_cmd_replay(rd.as_ptr(), &mut code) }, MsmStatus::Ok);
    assert_eq!(code, 0);

    let mut run = ptr::null_mut();
    assert_eq!(unsafe { msm_run_open(rd.as_ptr(), &mut run) }, MsmStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { msm_run_record_count(run, &mut n) }, MsmStatus::Ok);
    assert!(n > 10);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { msm_run_report_json(run, &mut text) }, MsmStatus::Ok);
    let report = unsafe { CStr::from_ptr(text) }.to_string_lossy().into_owned();
    unsafe {
        msm_string_free(text);
        msm_run_free(run);
    }
    let first: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "run");
    assert_eq!(first["exit_code"], 0);

    let missing = cstr(&dir.path().join("nothing"));
    assert_eq!(unsafe { msm_run_open(missing.as_ptr(), &mut run) }, MsmStatus::NotFound);
    let nope = cstr(&dir.path().join("nope.conf"));
    assert_eq!(unsafe { msm_cmd_run(bundle.as_ptr(), nope.as_ptr(), ptr::null(), &mut code) }, MsmStatus::Ok);
    assert_eq!(code, 2);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(msm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static
/// library. Skipped when no C compiler is installed.
#[test]
fn c_program_links_against_header() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let target = exe.parent().and_then(Path::parent).unwrap();
    let lib = target.join("libmodelsmith_ffi.a");
    assert!(lib.is_file(), "{} missing", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "modelsmith.h"

int main(void) {
    double s[3] = {3.0, 1.0, 2.0}, r[3];
    if (msm_rank_percentile(s, 3, r) != MSM_STATUS_OK) return 1;
    printf("%.3f %.3f %.3f\n", r[0], r[1], r[2]);
    if (msm_rank_percentile(NULL, 3, r) != MSM_STATUS_NULL_ARGUMENT) return 2;
    printf("%s\n", msm_last_error_message());
    MsmSimulation *sim = NULL;
    if (msm_sim_run("mcgs", 5, 20, 1, &sim) != MSM_STATUS_OK) return 3;
    char *t = NULL;
    msm_sim_trajectory(sim, &t);
    msm_string_free(t);
    msm_sim_free(sim);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1.000 0.000 0.500\nscores is null\n");
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
