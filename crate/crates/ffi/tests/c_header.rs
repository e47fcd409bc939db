//! Compiles a small C program against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "mtgc.h"

int main(void) {
    const char *cfg = "[task]\ndim = 2\n[topology]\ngroups = 2\nclients_per_group = 2\n"
                      "[train]\ngamma = 0.05\nrounds = 5\ngroup_rounds = 2\nlocal_steps = 2\n";
    MtgcExperiment *exp = NULL;
    if (mtgc_experiment_new(cfg, &exp) != MTGC_STATUS_OK) return 10;
    MtgcRun *run = NULL;
    if (mtgc_experiment_run_seed(exp, 0, &run) != MTGC_STATUS_OK) return 11;
    if (mtgc_run_len(run) != 11) return 12;
    MtgcRecord rec;
    if (mtgc_run_record(run, 10, &rec) != MTGC_STATUS_OK || rec.t != 5) return 13;
    MtgcExperiment *bad = NULL;
    if (mtgc_experiment_new("[train]\n", &bad) != MTGC_STATUS_CONFIG || bad != NULL) return 14;
    if (strstr(mtgc_last_error(), "train.gamma") == NULL) return 15;
    printf("%s %.3e\n", mtgc_version(), rec.grad_norm_sq);
    mtgc_run_free(run);
    mtgc_experiment_free(exp);
    return 0;
}
"#;

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test binary> -> target/<profile>
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libmtgc_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        panic!("libmtgc_ffi.a not found next to the test binary");
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")), "{text}");
}
